//! Train-and-evaluate runs and the 2x2 component ablation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::eval::{evaluate, EvalReport};
use crate::map::{Category, VectorMap};
use crate::model::Model;
use crate::scene::{generate_scene, scene_seed, Split, SyntheticScene};
use crate::train::{train, EpochLog, TrainError, TrainOptions};

/// Generates `count` scenes of `split` in memory, with the same ids and
/// seeds as an on-disk dataset built from `seed`.
pub fn generate_split(cfg: &RunConfig, seed: u64, split: Split, count: usize) -> Vec<SyntheticScene> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(&format!("{}_{i:05}", split.name()), scene_seed(seed, split, i), &cfg.grid, &cfg.scene))
        .collect()
}

pub fn predict_all(model: &Model, scenes: &[SyntheticScene]) -> Result<Vec<VectorMap>, TrainError> {
    scenes.par_iter().map(|s| model.predict(s).map_err(TrainError::from)).collect()
}

fn report(model: &Model, scenes: &[SyntheticScene]) -> Result<EvalReport, TrainError> {
    let preds = predict_all(model, scenes)?;
    let gts: Vec<VectorMap> = scenes.iter().map(|s| s.gt_map.clone()).collect();
    Ok(evaluate(&preds, &gts, &model.config.eval).expect("predictions pair with their scenes"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub logs: Vec<EpochLog>,
    pub untrained: EvalReport,
    pub trained: EvalReport,
}

/// Evaluates the freshly initialized model, trains it and evaluates again.
pub fn run(
    cfg: &RunConfig,
    train_set: &[SyntheticScene],
    test_set: &[SyntheticScene],
    opts: &TrainOptions,
) -> Result<(Model, RunResult), TrainError> {
    let mut model = Model::new(cfg);
    let untrained = report(&model, test_set)?;
    let logs = train(&mut model, train_set, opts, |_| {})?;
    let trained = report(&model, test_set)?;
    let result = RunResult { ablation: cfg.ablation, seed: cfg.seed, logs, untrained, trained };
    Ok((model, result))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub label: String,
    /// One trained run per seed.
    pub runs: Vec<RunResult>,
}

impl AblationRow {
    /// Median over seeds of the trained mAP in `setting`.
    pub fn median_map(&self, setting: &str) -> f64 {
        median(self.runs.iter().map(|r| r.trained.map(setting)).collect())
    }

    /// Median per-category AP; undefined categories count as 0.
    pub fn median_category(&self, setting: &str, c: usize) -> f64 {
        median(
            self.runs
                .iter()
                .map(|r| r.trained.setting(setting).and_then(|s| s.category_ap[Category::ALL[c]]).unwrap_or(0.0))
                .collect(),
        )
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    /// Rows baseline, +SGC, +PEC, +SGC+PEC with median APs per setting.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let settings: Vec<String> = self
            .rows
            .first()
            .and_then(|r| r.runs.first())
            .map(|r| r.trained.settings.iter().map(|s| s.name.clone()).collect())
            .unwrap_or_default();
        for s in &settings {
            let _ = writeln!(out, "[{s}] median over {} seed(s)", self.seeds.len());
            let _ = writeln!(out, "{:<10} {:>6} {:>6} {:>6} {:>6}", "method", "AP_ped", "AP_div", "AP_bou", "mAP");
            for r in &self.rows {
                let _ = writeln!(
                    out,
                    "{:<10} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                    r.label,
                    r.median_category(s, 0),
                    r.median_category(s, 1),
                    r.median_category(s, 2),
                    r.median_map(s)
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Trains every row of [`Ablation::GRID`] once per seed on the same data.
/// `on_run` sees each finished run.
pub fn ablate(
    base: &RunConfig,
    seeds: &[u64],
    train_set: &[SyntheticScene],
    test_set: &[SyntheticScene],
    opts: &TrainOptions,
    mut on_run: impl FnMut(&RunResult),
) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::new();
    for a in Ablation::GRID {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = RunConfig { seed, ablation: a, ..base.clone() };
            let (_, r) = run(&cfg, train_set, test_set, opts)?;
            on_run(&r);
            runs.push(r);
        }
        rows.push(AblationRow { ablation: a, label: a.label().to_string(), runs });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}
