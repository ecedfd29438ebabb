use bevmap::config::RunConfig;
use bevmap::map::{PerCategory, Range};

use super::{ensure, Check};

/// The default configuration carries the reference setup unchanged.
pub fn default_constants() -> Check {
    let cfg = RunConfig::default();
    cfg.validate().map_err(|e| e.to_string())?;
    let g = &cfg.grid;
    ensure((g.h, g.w) == (100, 25), || format!("grid {}x{}", g.h, g.w))?;
    let r = Range { x_min: -15.0, x_max: 15.0, y_min: -60.0, y_max: 60.0 };
    ensure(g.range == r, || format!("range {:?}", g.range))?;
    let m = &cfg.model;
    ensure(m.caps == PerCategory::new(25, 20, 15), || format!("caps {:?}", m.caps))?;
    ensure(m.points == PerCategory::new(2, 10, 30), || format!("keypoints {:?}", m.points))?;
    ensure(cfg.eval.hard == [0.2, 0.5, 1.0], || format!("hard thresholds {:?}", cfg.eval.hard))?;
    ensure(cfg.eval.easy == [0.5, 1.0, 1.5], || format!("easy thresholds {:?}", cfg.eval.easy))?;
    let t = &cfg.train;
    ensure(t.epochs == 30 && t.batch_size == 4, || format!("epochs {} batch {}", t.epochs, t.batch_size))?;
    ensure(t.optim.lr == 1e-4 && t.optim.weight_decay == 1e-4, || format!("optimizer {:?}", t.optim))?;
    Ok(format!("grid {}x{}, {} element slots, {} keypoints", g.h, g.w, m.total_elements(), m.total_points()))
}
