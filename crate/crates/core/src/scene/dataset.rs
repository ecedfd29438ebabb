//! On-disk dataset: `manifest.toml` plus one binary file per scene.
//!
//! Scene file layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "BEVSCENE"
//! version   u32      1
//! c, h, w   u32 x 3
//! seed      u64
//! id        u32 length + UTF-8 bytes
//! cam       f32 x c*h*w   row-major [c, h, w]
//! lidar     f32 x c*h*w
//! flow      f32 x 2*h*w   [dh, dw] in cells
//! elements  u32 count, then per element:
//!             id u32, category u8 (0 ped, 1 div, 2 bou), n u32, n x (x f32, y f32)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate_scene, scene_seed, SceneConfig, SyntheticScene};
use crate::grid::{BevGrid, FlowField, GridSpec, Modality};
use crate::map::{Category, MapElement, VectorMap};
use crate::tensor::Tensor;

pub const SCENE_MAGIC: &[u8; 8] = b"BEVSCENE";
pub const SCENE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    /// Relative to the dataset root.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub grid: GridSpec,
    pub scene: SceneConfig,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.scenes.iter().filter(|e| e.split == split).count()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt scene file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("corrupt manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A dataset opened from its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest {
                path: path.display().to_string(),
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.manifest.scenes.iter().filter(move |e| e.split == split)
    }

    pub fn load(&self, entry: &SceneEntry) -> Result<SyntheticScene, DatasetError> {
        read_scene(&self.root.join(&entry.file), &self.manifest.grid)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SyntheticScene>, DatasetError> {
        let entries: Vec<&SceneEntry> = self.entries(split).collect();
        entries.par_iter().map(|e| self.load(e)).collect()
    }
}

/// Generates `train + test` scenes under `root` and writes the manifest.
pub fn make_dataset(
    root: &Path,
    seed: u64,
    grid: &GridSpec,
    scene: &SceneConfig,
    train: usize,
    test: usize,
) -> Result<Dataset, DatasetError> {
    let scenes_dir = root.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(io_err(&scenes_dir))?;
    let mut entries = Vec::with_capacity(train + test);
    for (split, n) in [(Split::Train, train), (Split::Test, test)] {
        for index in 0..n {
            let id = format!("{}_{index:05}", split.name());
            entries.push(SceneEntry {
                file: format!("scenes/{id}.bin"),
                id,
                split,
                index,
                seed: scene_seed(seed, split, index),
            });
        }
    }
    entries.par_iter().try_for_each(|e| {
        let s = generate_scene(&e.id, e.seed, grid, scene);
        write_scene(&root.join(&e.file), &s)
    })?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed,
        grid: *grid,
        scene: scene.clone(),
        scenes: entries,
    };
    let path = root.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| DatasetError::Manifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_scene(path: &Path, s: &SyntheticScene) -> Result<(), DatasetError> {
    let shape = s.cam.features.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut buf = Vec::with_capacity(8 + 4 * (2 * c * h * w + 2 * h * w) + 256);
    buf.extend_from_slice(SCENE_MAGIC);
    put_u32(&mut buf, SCENE_VERSION);
    for d in [c, h, w] {
        put_u32(&mut buf, d as u32);
    }
    buf.extend_from_slice(&s.seed.to_le_bytes());
    put_u32(&mut buf, s.id.len() as u32);
    buf.extend_from_slice(s.id.as_bytes());
    put_f32s(&mut buf, s.cam.features.data());
    put_f32s(&mut buf, s.lidar.features.data());
    put_f32s(&mut buf, s.gt_flow.flow.data());
    put_u32(&mut buf, s.gt_map.elements.len() as u32);
    for e in &s.gt_map.elements {
        put_u32(&mut buf, e.id);
        buf.push(e.category.index() as u8);
        put_u32(&mut buf, e.points.len() as u32);
        for p in &e.points {
            put_f32s(&mut buf, p);
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn corrupt(&self, reason: &str) -> DatasetError {
        DatasetError::Corrupt {
            path: self.path.display().to_string(),
            reason: reason.to_string(),
        }
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, DatasetError> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
    }
}

pub fn read_scene(path: &Path, spec: &GridSpec) -> Result<SyntheticScene, DatasetError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != SCENE_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(r.corrupt(&format!("unsupported version {version}")));
    }
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if (h, w) != (spec.h, spec.w) || c == 0 {
        return Err(r.corrupt(&format!("grid {c}x{h}x{w} does not match manifest {}x{}", spec.h, spec.w)));
    }
    let seed = r.u64()?;
    let id_len = r.u32()? as usize;
    let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| r.corrupt("scene id is not UTF-8"))?;
    let grid = |r: &mut Reader<'_>, modality| -> Result<BevGrid, DatasetError> {
        Ok(BevGrid {
            modality,
            features: Tensor::new(vec![c, h, w], r.f32s(c * h * w)?).map_err(|e| r.corrupt(&e.to_string()))?,
            spec: *spec,
        })
    };
    let cam = grid(&mut r, Modality::Camera)?;
    let lidar = grid(&mut r, Modality::Lidar)?;
    let flow = Tensor::new(vec![2, h, w], r.f32s(2 * h * w)?).map_err(|e| r.corrupt(&e.to_string()))?;
    let n = r.u32()? as usize;
    let mut elements = Vec::with_capacity(n);
    for _ in 0..n {
        let eid = r.u32()?;
        let cat = r.take(1)?[0] as usize;
        let category = Category::from_index(cat).ok_or_else(|| r.corrupt(&format!("bad category {cat}")))?;
        let k = r.u32()? as usize;
        let flat = r.f32s(2 * k)?;
        elements.push(MapElement {
            id: eid,
            category,
            confidence: 1.0,
            points: flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
        });
    }
    if r.pos != buf.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    Ok(SyntheticScene {
        gt_map: VectorMap::new(id.clone(), elements),
        id,
        seed,
        cam,
        lidar,
        gt_flow: FlowField { flow },
    })
}
