//! Run configuration shared by every command, stored as TOML.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::grid::GridSpec;
use crate::map::{Category, PerCategory, Range};
use crate::scene::SceneConfig;
use crate::tensor::AdamWConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.is_on() { "on" } else { "off" })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub sgc: Switch,
    pub pec: Switch,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { sgc: Switch::On, pec: Switch::On }
    }
}

impl Ablation {
    /// The four rows of the ablation table, in order.
    pub const GRID: [Ablation; 4] = [
        Ablation { sgc: Switch::Off, pec: Switch::Off },
        Ablation { sgc: Switch::On, pec: Switch::Off },
        Ablation { sgc: Switch::Off, pec: Switch::On },
        Ablation { sgc: Switch::On, pec: Switch::On },
    ];

    pub fn label(&self) -> &'static str {
        match (self.sgc, self.pec) {
            (Switch::Off, Switch::Off) => "baseline",
            (Switch::On, Switch::Off) => "+SGC",
            (Switch::Off, Switch::On) => "+PEC",
            (Switch::On, Switch::On) => "+SGC+PEC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width C used everywhere.
    pub channels: usize,
    /// PEC layers L.
    pub layers: usize,
    /// Element slots M per category.
    pub caps: PerCategory<usize>,
    /// Keypoints N per element, per category.
    pub points: PerCategory<usize>,
    /// Conv blocks ahead of the flow head.
    pub flow_blocks: usize,
    /// Channel standardisation inside conv blocks.
    pub norm: bool,
    /// Sinusoid frequencies of the BEV positional features added to decoder memory.
    pub pos_freqs: usize,
    /// Std of the learnable query and embedding init.
    pub query_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 3,
            caps: PerCategory::new(25, 20, 15),
            points: PerCategory::new(2, 10, 30),
            flow_blocks: 2,
            norm: false,
            pos_freqs: 4,
            query_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn total_elements(&self) -> usize {
        Category::ALL.iter().map(|&c| self.caps[c]).sum()
    }

    pub fn total_points(&self) -> usize {
        Category::ALL.iter().map(|&c| self.caps[c] * self.points[c]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub cls: f64,
    pub kp: f64,
    pub mask: f64,
    pub flow: f64,
    /// Classification weight of slots assigned to background.
    pub background: f64,
    /// Weight of the mean point-to-curve distance in the assignment cost, per meter.
    pub match_distance: f64,
    /// Weight of the collinearity penalty on unassigned keypoints.
    pub collinear: f64,
    /// Adds the endpoint-error loss against ground-truth flow.
    pub flow_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls: 2.0,
            kp: 5.0,
            mask: 1.0,
            flow: 1.0,
            background: 0.1,
            match_distance: 5.0,
            collinear: 0.1,
            flow_supervision: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 4, optim: AdamWConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory.
    pub path: String,
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: "data".into(), train: 200, test: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run output directory.
    pub out: String,
    /// Minimum confidence of emitted elements.
    pub threshold: f64,
    pub grid: GridSpec,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub fn full_grid() -> GridSpec {
    GridSpec {
        range: Range { x_min: -15.0, x_max: 15.0, y_min: -60.0, y_max: 60.0 },
        h: 100,
        w: 25,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 0,
            out: "runs".into(),
            threshold: 0.4,
            grid: full_grid(),
            data: DataConfig::default(),
            scene: SceneConfig { channels: model.channels, ..SceneConfig::default() },
            model,
            ablation: Ablation::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced setting that trains on one CPU core in minutes: half the
    /// y-range at the default cell size, narrower features, fewer slots.
    pub fn benchmark() -> Self {
        let channels = 16;
        Self {
            seed: 0,
            out: "runs".into(),
            threshold: 0.4,
            grid: GridSpec {
                range: Range { x_min: -15.0, x_max: 15.0, y_min: -30.0, y_max: 30.0 },
                h: 50,
                w: 25,
            },
            data: DataConfig::default(),
            scene: SceneConfig {
                channels,
                dividers: [1, 3],
                crossings: [0, 2],
                lidar_range: 22.0,
                lidar_gain: PerCategory::new(0.3, 0.3, 1.0),
                disparity_max: 2.5,
                ..SceneConfig::default()
            },
            model: ModelConfig {
                channels,
                layers: 2,
                caps: PerCategory::new(3, 4, 3),
                ..ModelConfig::default()
            },
            ablation: Ablation::default(),
            loss: LossConfig { flow_supervision: true, ..LossConfig::default() },
            train: TrainConfig {
                epochs: 20,
                batch_size: 4,
                optim: AdamWConfig { lr: 2e-3, lr_decay: 0.9, clip_norm: 10.0, ..AdamWConfig::default() },
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let g = &self.grid;
        if g.h == 0 || g.w == 0 || !(g.range.x_max > g.range.x_min) || !(g.range.y_max > g.range.y_min) {
            return bad(format!("degenerate grid {g:?}"));
        }
        let m = &self.model;
        if m.channels == 0 || m.layers == 0 {
            return bad("model.channels and model.layers must be positive".into());
        }
        if self.scene.channels != m.channels {
            return bad(format!("scene.channels {} != model.channels {}", self.scene.channels, m.channels));
        }
        for c in Category::ALL {
            if m.caps[c] == 0 || m.points[c] == 0 {
                return bad(format!("{c}: caps and points must be positive"));
            }
        }
        if m.points[Category::PedCrossing] < 2 {
            return bad("crossings need at least 2 keypoints".into());
        }
        let s = &self.scene;
        if s.dividers[1] > m.caps[Category::Divider] || s.crossings[1] > m.caps[Category::PedCrossing] || m.caps[Category::Boundary] < 2 {
            return bad("scene element counts exceed model caps".into());
        }
        if s.divider_vertices[1] > m.points[Category::Divider] || s.boundary_vertices[1] > m.points[Category::Boundary] {
            return bad("scene keypoint counts exceed model keypoints per element".into());
        }
        if s.dividers[0] > s.dividers[1] || s.crossings[0] > s.crossings[1] {
            return bad("scene count ranges must be [min, max]".into());
        }
        if !(s.lidar_range < g.range.y_max) {
            return bad("scene.lidar_range must be below y_max so LiDAR holes exist".into());
        }
        if !(0.0..=1.0).contains(&s.lidar_dropout) || s.raster_sigma <= 0.0 {
            return bad("scene.lidar_dropout must be in [0, 1] and raster_sigma positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.optim.lr > 0.0) || !(t.optim.lr_decay > 0.0) {
            return bad("train.batch_size, optim.lr and optim.lr_decay must be positive".into());
        }
        let l = &self.loss;
        if [l.cls, l.kp, l.mask, l.flow, l.background, l.match_distance, l.collinear].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        self.eval.validate().map_err(ConfigError::Invalid)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn from_toml(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        Self::from_toml(&text, &p)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// SHA-256 of everything that determines parameter shapes and semantics.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            grid: &'a GridSpec,
            model: &'a ModelConfig,
            ablation: &'a Ablation,
        }
        let key = toml::to_string(&Key { grid: &self.grid, model: &self.model, ablation: &self.ablation }).expect("serialises");
        hex(&Sha256::digest(key.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
