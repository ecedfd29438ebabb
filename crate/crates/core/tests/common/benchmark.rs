use std::path::PathBuf;

use bevmap::config::{Ablation, RunConfig, Switch};
use bevmap::experiment::{ablate, generate_split, predict_all, AblationTable};
use bevmap::eval::evaluate;
use bevmap::map::VectorMap;
use bevmap::model::Model;
use bevmap::scene::Split;
use bevmap::train::TrainOptions;

use super::{ensure, Check};

/// Seed of the reference dataset (`bevmap synth` default).
pub const DATA_SEED: u64 = 0;
pub const MIN_EASY_GAIN: f64 = 0.30;

pub fn reference_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../benchmark")
}

fn load() -> Result<(RunConfig, AblationTable), String> {
    let dir = reference_dir();
    let cfg = RunConfig::load(&dir.join("config.toml")).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.join("ablation.json")).map_err(|e| format!("{}: {e}", dir.display()))?;
    let table: AblationTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((cfg, table))
}

fn row(table: &AblationTable, sgc: Switch, pec: Switch) -> Result<&bevmap::experiment::AblationRow, String> {
    table.row(Ablation { sgc, pec }).ok_or_else(|| format!("no row sgc={sgc} pec={pec}"))
}

/// Checks the committed reference ablation: it was produced from the
/// current benchmark config, the full model gains enough over its
/// untrained self, the hard-setting medians are ordered, and the loss
/// falls. The untrained evaluation is recomputed from scratch.
pub fn reference() -> Check {
    let (cfg, table) = load()?;
    let current = RunConfig { out: cfg.out.clone(), data: cfg.data.clone(), ..RunConfig::benchmark() };
    ensure(cfg == current, || "benchmark/config.toml differs from RunConfig::benchmark()".into())?;
    ensure(table.seeds.len() >= 3, || format!("{} seeds", table.seeds.len()))?;
    ensure((cfg.data.train, cfg.data.test) == (200, 50), || format!("{}/{} scenes", cfg.data.train, cfg.data.test))?;

    let full = row(&table, Switch::On, Switch::On)?;
    let mut gains = Vec::new();
    for r in &full.runs {
        let gain = r.trained.map("easy") - r.untrained.map("easy");
        ensure(gain >= MIN_EASY_GAIN, || format!("seed {}: easy gain {gain:.3} < {MIN_EASY_GAIN}", r.seed))?;
        gains.push(gain);
    }
    for row in &table.rows {
        for r in &row.runs {
            let (first, fifth) = (&r.logs[0].loss.total, &r.logs.get(4).map(|l| l.loss.total));
            ensure(fifth.is_some_and(|f| f < *first), || format!("{} seed {}: loss did not fall by epoch 5", row.label, r.seed))?;
        }
    }
    let hard = |s, p| row(&table, s, p).map(|r| r.median_map("hard"));
    let (base, sgc, pec, both) =
        (hard(Switch::Off, Switch::Off)?, hard(Switch::On, Switch::Off)?, hard(Switch::Off, Switch::On)?, hard(Switch::On, Switch::On)?);
    ensure(base <= sgc, || format!("hard medians: baseline {base:.3} > +SGC {sgc:.3}"))?;
    ensure(base <= pec, || format!("hard medians: baseline {base:.3} > +PEC {pec:.3}"))?;
    ensure(pec <= both, || format!("hard medians: +PEC {pec:.3} > +SGC+PEC {both:.3}"))?;

    let test = generate_split(&cfg, DATA_SEED, Split::Test, cfg.data.test);
    let first = &full.runs[0];
    let model = Model::new(&RunConfig { seed: first.seed, ablation: full.ablation, ..cfg.clone() });
    let preds = predict_all(&model, &test).map_err(|e| e.to_string())?;
    let gts: Vec<VectorMap> = test.iter().map(|s| s.gt_map.clone()).collect();
    let untrained = evaluate(&preds, &gts, &cfg.eval).map_err(|e| e.to_string())?;
    ensure(untrained.to_json() == first.untrained.to_json(), || "recomputed untrained evaluation differs from the reference".into())?;

    let min_gain = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "hard medians {base:.3} / {sgc:.3} / {pec:.3} / {both:.3}, min easy gain {min_gain:.3}, untrained eval reproduced"
    ))
}

/// Reruns the whole reference ablation and requires byte-identical results.
pub fn rerun() -> Check {
    let (cfg, table) = load()?;
    let train = generate_split(&cfg, DATA_SEED, Split::Train, cfg.data.train);
    let test = generate_split(&cfg, DATA_SEED, Split::Test, cfg.data.test);
    let opts = TrainOptions { out_dir: None, workers: 1 };
    let fresh = ablate(&cfg, &table.seeds, &train, &test, &opts, |_| {}).map_err(|e| e.to_string())?;
    ensure(fresh.to_json() == table.to_json(), || "rerun differs from the reference ablation".into())?;
    Ok(format!("{} runs reproduced", 4 * table.seeds.len()))
}
