use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use bevmap::checkpoint::{Checkpoint, CheckpointError};
use bevmap::config::{ConfigError, RunConfig};
use bevmap::eval::{evaluate, EvalError};
use bevmap::experiment::{ablate, predict_all};
use bevmap::map::{MapError, VectorMap};
use bevmap::model::Model;
use bevmap::render::{grid_ppm, map_svg};
use bevmap::scene::{make_dataset, Dataset, DatasetError, Split, SyntheticScene};
use bevmap::train::{train, TrainError, TrainOptions};

use crate::{Cli, Command};

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure { code, error: error.into() }
}

fn invalid(msg: String) -> Failure {
    fail(EXIT_INVALID, anyhow!(msg))
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        fail(EXIT_INVALID, e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        fail(EXIT_INVALID, e)
    }
}

impl From<MapError> for Failure {
    fn from(e: MapError) -> Self {
        fail(EXIT_INVALID, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        fail(EXIT_INVALID, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        fail(EXIT_INVALID, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Divergence { .. } => EXIT_DIVERGED,
            TrainError::Empty => EXIT_INVALID,
            _ => EXIT_INTERNAL,
        };
        fail(code, e)
    }
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> Outcome<T> {
    r.with_context(|| format!("io error on {}", path.display())).map_err(|e| fail(EXIT_INTERNAL, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    io(fs::write(path, bytes), path)
}

fn create_dir(path: &Path) -> Outcome {
    io(fs::create_dir_all(path), path)
}

/// The config in effect: `--config` or the benchmark config, then the
/// global overrides.
fn resolve(cli: &Cli, fallback: Option<&Path>) -> Outcome<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::benchmark(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Outcome<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(invalid(format!("unknown split {s:?}; expected train or test"))),
    }
}

/// Opens a dataset and checks that it matches the config's grid and feature width.
fn open_dataset(cfg: &RunConfig, data: &Option<PathBuf>) -> Outcome<Dataset> {
    let root = data.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.path));
    let ds = Dataset::open(&root)?;
    let m = &ds.manifest;
    if m.grid != cfg.grid {
        return Err(invalid(format!("dataset grid {:?} differs from config grid {:?}", m.grid, cfg.grid)));
    }
    if m.scene.channels != cfg.model.channels {
        return Err(invalid(format!(
            "dataset has {} channels, model expects {}",
            m.scene.channels, cfg.model.channels
        )));
    }
    Ok(ds)
}

fn load_split(ds: &Dataset, split: Split) -> Outcome<Vec<SyntheticScene>> {
    let scenes = ds.load_split(split)?;
    if scenes.is_empty() {
        return Err(invalid(format!("dataset {} has no {} scenes", ds.root.display(), split.name())));
    }
    Ok(scenes)
}

fn out_dir(cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    create_dir(&dir)?;
    Ok(dir)
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Outcome {
    cfg.save(&dir.join("config.toml"))?;
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Outcome {
    if cli.workers == 0 {
        return Err(invalid("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| fail(EXIT_INTERNAL, e))?;
    match &cli.command {
        Command::Synth { data, scenes } => synth(cli, data, *scenes),
        Command::Train { data } => train_cmd(cli, data),
        Command::Infer { checkpoint, data, split, force } => infer(cli, checkpoint, data, split, *force),
        Command::Eval { predictions, data, split } => eval(cli, predictions, data, split),
        Command::Ablate { data, seeds } => ablate_cmd(cli, data, seeds),
        Command::Render { data, scene, map, pred, channel } => render(cli, data, scene, map, pred, *channel),
    }
}

fn synth(cli: &Cli, data: &Option<PathBuf>, scenes: Option<usize>) -> Outcome {
    let cfg = resolve(cli, None)?;
    let root = data.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.path));
    let (train, test) = match scenes {
        Some(n) => (n - n / 5, n / 5),
        None => (cfg.data.train, cfg.data.test),
    };
    let ds = make_dataset(&root, cfg.seed, &cfg.grid, &cfg.scene, train, test)?;
    let m = &ds.manifest;
    println!(
        "dataset {}: seed {}, grid {}x{}, {} train + {} test scenes",
        root.display(),
        m.seed,
        m.grid.h,
        m.grid.w,
        m.count(Split::Train),
        m.count(Split::Test)
    );
    Ok(())
}

fn train_cmd(cli: &Cli, data: &Option<PathBuf>) -> Outcome {
    let cfg = resolve(cli, None)?;
    let ds = open_dataset(&cfg, data)?;
    let scenes = load_split(&ds, Split::Train)?;
    let dir = out_dir(&cfg)?;
    save_config(&cfg, &dir)?;
    let mut model = Model::new(&cfg);
    log::info!("training {} on {} scenes, {} parameters", cfg.ablation.label(), scenes.len(), model.params.numel());
    let opts = TrainOptions { out_dir: Some(dir.clone()), workers: cli.workers };
    let logs = train(&mut model, &scenes, &opts, |_| {})?;
    let ckpt = dir.join("model.ckpt");
    Checkpoint::of(&model, logs.len() as u32).save(&ckpt).map_err(|e| fail(EXIT_INTERNAL, e))?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        println!("loss {:.4} -> {:.4} over {} epochs; checkpoint {}", first.loss.total, last.loss.total, logs.len(), ckpt.display());
    }
    Ok(())
}

fn infer(cli: &Cli, checkpoint: &Path, data: &Option<PathBuf>, split: &str, force: bool) -> Outcome {
    let beside = checkpoint.parent().map(|p| p.join("config.toml"));
    let cfg = resolve(cli, beside.as_deref())?;
    let split = parse_split(split)?;
    let ds = open_dataset(&cfg, data)?;
    let scenes = load_split(&ds, split)?;
    let mut model = Model::new(&cfg);
    Checkpoint::load(checkpoint)?.apply(&mut model, force)?;
    let dir = out_dir(&cfg)?;
    save_config(&cfg, &dir)?;
    let pred_dir = dir.join("predictions");
    create_dir(&pred_dir)?;
    let start = Instant::now();
    let preds = predict_all(&model, &scenes)?;
    let secs = start.elapsed().as_secs_f64();
    for p in &preds {
        p.save(&pred_dir.join(format!("{}.json", p.scene_id))).map_err(|e| fail(EXIT_INTERNAL, e))?;
    }
    eprintln!("{} scenes in {secs:.2} s ({:.2} scenes/s)", preds.len(), preds.len() as f64 / secs.max(1e-9));
    Ok(())
}

/// Every `*.json` map in `dir`, in file-name order.
fn load_maps(dir: &Path) -> Outcome<Vec<VectorMap>> {
    let mut paths: Vec<PathBuf> = io(fs::read_dir(dir), dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| VectorMap::load(p).map_err(Failure::from)).collect()
}

fn eval(cli: &Cli, predictions: &Path, data: &Option<PathBuf>, split: &str) -> Outcome {
    let cfg = resolve(cli, None)?;
    let split = parse_split(split)?;
    let ds = open_dataset(&cfg, data)?;
    let gts: Vec<VectorMap> = load_split(&ds, split)?.into_iter().map(|s| s.gt_map).collect();
    let preds = load_maps(predictions)?;
    let report = evaluate(&preds, &gts, &cfg.eval)?;
    let dir = out_dir(&cfg)?;
    save_config(&cfg, &dir)?;
    write(&dir.join("eval.json"), report.to_json() + "\n")?;
    print!("{}", report.table());
    for n in &report.notes {
        eprintln!("note: {n}");
    }
    Ok(())
}

fn ablate_cmd(cli: &Cli, data: &Option<PathBuf>, seeds: &[u64]) -> Outcome {
    if seeds.is_empty() {
        return Err(invalid("--seeds needs at least one seed".into()));
    }
    let cfg = resolve(cli, None)?;
    let ds = open_dataset(&cfg, data)?;
    let train_set = load_split(&ds, Split::Train)?;
    let test_set = load_split(&ds, Split::Test)?;
    let dir = out_dir(&cfg)?;
    save_config(&cfg, &dir)?;
    let opts = TrainOptions { out_dir: None, workers: cli.workers };
    let table = ablate(&cfg, seeds, &train_set, &test_set, &opts, |r| {
        log::info!(
            "{} seed {}: hard {:.3} easy {:.3} (untrained easy {:.3})",
            r.ablation.label(),
            r.seed,
            r.trained.map("hard"),
            r.trained.map("easy"),
            r.untrained.map("easy")
        );
    })?;
    write(&dir.join("ablation.json"), table.to_json() + "\n")?;
    write(&dir.join("ablation.txt"), table.table())?;
    print!("{}", table.table());
    Ok(())
}

fn render(
    cli: &Cli,
    data: &Option<PathBuf>,
    scene: &Option<String>,
    map: &Option<PathBuf>,
    pred: &Option<PathBuf>,
    channel: usize,
) -> Outcome {
    let cfg = resolve(cli, None)?;
    let dir = out_dir(&cfg)?;
    let (gt, grids) = match (scene, map) {
        (Some(id), None) => {
            let ds = open_dataset(&cfg, data)?;
            let entry = ds
                .manifest
                .scenes
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| invalid(format!("scene {id} not in {}", ds.root.display())))?;
            let s = ds.load(entry)?;
            (s.gt_map, Some((s.cam, s.lidar)))
        }
        (None, Some(path)) => (VectorMap::load(path)?, None),
        _ => return Err(invalid("render needs exactly one of --scene or --map".into())),
    };
    let pred = match pred {
        Some(p) if p.is_dir() => Some(VectorMap::load(&p.join(format!("{}.json", gt.scene_id)))?),
        Some(p) => Some(VectorMap::load(p)?),
        None => None,
    };
    let svg_path = dir.join(format!("{}.svg", gt.scene_id));
    write(&svg_path, map_svg(&gt, pred.as_ref(), &cfg.grid.range))?;
    println!("{}", svg_path.display());
    if let Some((cam, lidar)) = grids {
        for (name, g) in [("cam", cam), ("lidar", lidar)] {
            let ppm = grid_ppm(&g.features, channel)
                .ok_or_else(|| invalid(format!("channel {channel} out of range for {} channels", g.channels())))?;
            let path = dir.join(format!("{}_{name}.ppm", gt.scene_id));
            write(&path, ppm)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
