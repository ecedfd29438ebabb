//! Chamfer-distance average precision over vector maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{dist, resample};
use crate::map::{Category, MapElement, PerCategory, Point, VectorMap};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty polyline")]
    EmptyPolyline,
    #[error("scene sets differ: {0}")]
    SceneMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Chamfer thresholds of the hard setting, meters.
    pub hard: Vec<f64>,
    pub easy: Vec<f64>,
    /// Arc-length resampling interval, meters.
    pub interval: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { hard: vec![0.2, 0.5, 1.0], easy: vec![0.5, 1.0, 1.5], interval: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, t) in [("hard", &self.hard), ("easy", &self.easy)] {
            if t.is_empty() || t.iter().any(|v| !(*v > 0.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("eval.{name} thresholds must be positive and ascending"));
            }
        }
        if !(self.interval > 0.0) {
            return Err("eval.interval must be positive".into());
        }
        Ok(())
    }

    pub fn settings(&self) -> [(&'static str, &[f64]); 2] {
        [("hard", &self.hard), ("easy", &self.easy)]
    }
}

/// Mean nearest-sample distance from `a` to `b`.
fn directed(a: &[Point], b: &[Point]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|p| b.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / a.len() as f64
}

/// Symmetric Chamfer distance between two polylines after resampling both
/// at `interval` meters of arc length.
pub fn chamfer_distance(a: &[Point], b: &[Point], interval: f64) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyPolyline);
    }
    let (ra, rb) = (resample(a, interval), resample(b, interval));
    Ok(0.5 * (directed(&ra, &rb) + directed(&rb, &ra)))
}

/// Per-prediction outcome within one scene and category.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneScore {
    /// `(confidence, is_tp)` in processing order (confidence descending).
    pub flags: Vec<(f64, bool)>,
    /// `(pred index, gt index, distance)` for each true positive.
    pub matches: Vec<(usize, usize, f64)>,
    pub n_gt: usize,
}

/// Greedy matching from a precomputed `[pred][gt]` distance matrix.
pub fn score_matrix(conf: &[f64], dists: &[Vec<f64>], n_gt: usize, threshold: f64) -> SceneScore {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    let mut claimed = vec![false; n_gt];
    let mut flags = Vec::with_capacity(conf.len());
    let mut matches = Vec::new();
    for i in order {
        let best = (0..n_gt)
            .filter(|&j| !claimed[j])
            .min_by(|&a, &b| dists[i][a].total_cmp(&dists[i][b]));
        match best {
            Some(j) if dists[i][j] < threshold => {
                claimed[j] = true;
                flags.push((conf[i], true));
                matches.push((i, j, dists[i][j]));
            }
            _ => flags.push((conf[i], false)),
        }
    }
    SceneScore { flags, matches, n_gt }
}

fn distance_matrix(preds: &[&MapElement], gts: &[&MapElement], interval: f64) -> Result<Vec<Vec<f64>>, EvalError> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| chamfer_distance(&p.points, &g.points, interval)).collect())
        .collect()
}

/// Scores one scene's predictions of a single category against its ground truth.
pub fn score_scene(preds: &[&MapElement], gts: &[&MapElement], threshold: f64, interval: f64) -> Result<SceneScore, EvalError> {
    let d = distance_matrix(preds, gts, interval)?;
    let conf: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    Ok(score_matrix(&conf, &d, gts.len(), threshold))
}

/// All-point interpolated AP; `None` when there is no ground truth.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Interpolated precision: best precision at this rank or any later one.
    let mut tp = 0usize;
    let precision: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += hit as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut interp = precision;
    for i in (0..interp.len().saturating_sub(1)).rev() {
        interp[i] = interp[i].max(interp[i + 1]);
    }
    // Recall grows by 1 / n_gt at every hit.
    let total = sorted.iter().zip(&interp).filter(|(f, _)| f.1).fold(0.0, |acc, (_, p)| acc + p);
    Some(total / n_gt as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub name: String,
    pub per_category: PerCategory<Vec<ThresholdResult>>,
    /// Mean AP of each category over the thresholds.
    pub category_ap: PerCategory<Option<f64>>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub interval: f64,
    pub interpolation: String,
    pub settings: Vec<SettingReport>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn setting(&self, name: &str) -> Option<&SettingReport> {
        self.settings.iter().find(|s| s.name == name)
    }

    pub fn map(&self, name: &str) -> f64 {
        self.setting(name).map_or(0.0, |s| s.map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Rows `setting | AP_ped | AP_div | AP_bou | mAP`.
    pub fn table(&self) -> String {
        let mut out = String::from("setting  AP_ped  AP_div  AP_bou  mAP\n");
        for s in &self.settings {
            let cell = |v: Option<f64>| v.map_or("   n/a".to_string(), |v| format!("{v:6.3}"));
            let _ = writeln!(
                out,
                "{:<7} {}  {}  {}  {:.3}",
                s.name,
                cell(s.category_ap.ped),
                cell(s.category_ap.div),
                cell(s.category_ap.bou),
                s.map
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// Per-scene, per-category distance matrices and confidences.
struct Prepared {
    conf: PerCategory<Vec<f64>>,
    dists: PerCategory<Vec<Vec<f64>>>,
    n_gt: PerCategory<usize>,
}

fn prepare(pred: &VectorMap, gt: &VectorMap, interval: f64) -> Result<Prepared, EvalError> {
    let mut conf = PerCategory::<Vec<f64>>::default();
    let mut dists = PerCategory::<Vec<Vec<f64>>>::default();
    let mut n_gt = PerCategory::default();
    for c in Category::ALL {
        let p: Vec<&MapElement> = pred.of_category(c).collect();
        let g: Vec<&MapElement> = gt.of_category(c).collect();
        conf[c] = p.iter().map(|e| e.confidence).collect();
        dists[c] = distance_matrix(&p, &g, interval)?;
        n_gt[c] = g.len();
    }
    Ok(Prepared { conf, dists, n_gt })
}

/// Evaluates predictions against ground truth, pairing scenes by id.
pub fn evaluate(preds: &[VectorMap], gts: &[VectorMap], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let by_id: BTreeMap<&str, &VectorMap> = preds.iter().map(|m| (m.scene_id.as_str(), m)).collect();
    if by_id.len() != preds.len() {
        return Err(EvalError::SceneMismatch("duplicate scene id among predictions".into()));
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for g in gts {
        let p = by_id
            .get(g.scene_id.as_str())
            .ok_or_else(|| EvalError::SceneMismatch(format!("no prediction for scene {}", g.scene_id)))?;
        pairs.push((*p, g));
    }
    if preds.len() != gts.len() {
        return Err(EvalError::SceneMismatch(format!("{} prediction scenes for {} ground-truth scenes", preds.len(), gts.len())));
    }
    let prepared: Vec<Prepared> = pairs
        .par_iter()
        .map(|(p, g)| prepare(p, g, cfg.interval))
        .collect::<Result<_, _>>()?;

    let mut notes = Vec::new();
    let mut settings = Vec::new();
    for (name, thresholds) in cfg.settings() {
        let mut per_category = PerCategory::<Vec<ThresholdResult>>::default();
        let mut category_ap = PerCategory::default();
        let mut aps = Vec::new();
        for c in Category::ALL {
            for &t in thresholds {
                let mut flags = Vec::new();
                let mut counts = Counts::default();
                let mut n_gt = 0;
                for s in &prepared {
                    let score = score_matrix(&s.conf[c], &s.dists[c], s.n_gt[c], t);
                    let tp = score.matches.len();
                    counts.tp += tp;
                    counts.fp += score.flags.len() - tp;
                    counts.fn_ += s.n_gt[c] - tp;
                    n_gt += s.n_gt[c];
                    flags.extend(score.flags);
                }
                let ap = average_precision(&flags, n_gt);
                aps.extend(ap);
                per_category[c].push(ThresholdResult { threshold: t, ap, counts });
            }
            let defined: Vec<f64> = per_category[c].iter().filter_map(|r| r.ap).collect();
            category_ap[c] = if defined.is_empty() { None } else { Some(defined.iter().sum::<f64>() / defined.len() as f64) };
            if category_ap[c].is_none() && name == "hard" {
                notes.push(format!("{c}: no ground truth, excluded from mAP"));
            }
        }
        let map = if aps.is_empty() { 0.0 } else { aps.iter().fold(0.0, |a, b| a + b) / aps.len() as f64 };
        settings.push(SettingReport { name: name.to_string(), per_category, category_ap, map });
    }
    Ok(EvalReport {
        scenes: gts.len(),
        interval: cfg.interval,
        interpolation: "all-point".into(),
        settings,
        notes,
    })
}
