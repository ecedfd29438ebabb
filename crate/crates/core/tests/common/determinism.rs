use bevmap::config::{ModelConfig, RunConfig};
use bevmap::eval::evaluate;
use bevmap::experiment::{generate_split, predict_all};
use bevmap::grid::GridSpec;
use bevmap::map::{PerCategory, Range, VectorMap};
use bevmap::model::Model;
use bevmap::scene::Split;
use bevmap::train::{loss_log_csv, train, TrainOptions};

use super::{ensure, Check};

pub fn small() -> RunConfig {
    let mut cfg = RunConfig::benchmark();
    cfg.grid = GridSpec { range: Range { x_min: -15.0, x_max: 15.0, y_min: -30.0, y_max: 30.0 }, h: 10, w: 5 };
    cfg.scene.channels = 4;
    cfg.model = ModelConfig { channels: 4, layers: 1, caps: PerCategory::new(2, 3, 2), ..cfg.model };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    cfg
}

/// Loss log, prediction files and eval report of one training run.
fn artifacts(cfg: &RunConfig, workers: usize) -> Result<(String, Vec<String>, String), String> {
    let train_set = generate_split(cfg, 3, Split::Train, 6);
    let test_set = generate_split(cfg, 3, Split::Test, 3);
    let mut model = Model::new(cfg);
    let logs = train(&mut model, &train_set, &TrainOptions { out_dir: None, workers }, |_| {}).map_err(|e| e.to_string())?;
    let preds = predict_all(&model, &test_set).map_err(|e| e.to_string())?;
    let gts: Vec<VectorMap> = test_set.iter().map(|s| s.gt_map.clone()).collect();
    let report = evaluate(&preds, &gts, &cfg.eval).map_err(|e| e.to_string())?;
    Ok((loss_log_csv(&logs), preds.iter().map(VectorMap::to_json).collect(), report.to_json()))
}

/// Identical seeds give byte-identical outputs, single-threaded and with a
/// worker pool.
pub fn identical_runs() -> Check {
    let cfg = small();
    let a = artifacts(&cfg, 1)?;
    let b = artifacts(&cfg, 1)?;
    ensure(a.0 == b.0, || "loss logs differ".into())?;
    ensure(a.1 == b.1, || "prediction files differ".into())?;
    ensure(a.2 == b.2, || "eval reports differ".into())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().map_err(|e| e.to_string())?;
    let c = pool.install(|| artifacts(&cfg, 3))?;
    ensure(a == c, || "three workers differ from one".into())?;
    let other = artifacts(&RunConfig { seed: cfg.seed + 1, ..cfg.clone() }, 1)?;
    ensure(other.0 != a.0, || "a different seed gave the same loss log".into())?;
    Ok(format!("{} epochs, {} prediction files, 1 and 3 workers", cfg.train.epochs, a.1.len()))
}
