//! Vectorised map elements and their JSON file format.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Foreground element categories, in report column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    PedCrossing,
    Divider,
    Boundary,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::PedCrossing, Category::Divider, Category::Boundary];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short(self) -> &'static str {
        match self {
            Category::PedCrossing => "ped",
            Category::Divider => "div",
            Category::Boundary => "bou",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::PedCrossing => "pedestrian crossing",
            Category::Divider => "lane divider",
            Category::Boundary => "road boundary",
        })
    }
}

/// One value per foreground category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerCategory<T> {
    pub ped: T,
    pub div: T,
    pub bou: T,
}

impl<T> PerCategory<T> {
    pub fn new(ped: T, div: T, bou: T) -> Self {
        Self { ped, div, bou }
    }

    pub fn from_fn(mut f: impl FnMut(Category) -> T) -> Self {
        Self {
            ped: f(Category::PedCrossing),
            div: f(Category::Divider),
            bou: f(Category::Boundary),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Category, &T)> {
        Category::ALL.into_iter().map(move |c| (c, &self[c]))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerCategory<U> {
        PerCategory::from_fn(|c| f(&self[c]))
    }
}

impl<T> Index<Category> for PerCategory<T> {
    type Output = T;
    fn index(&self, c: Category) -> &T {
        match c {
            Category::PedCrossing => &self.ped,
            Category::Divider => &self.div,
            Category::Boundary => &self.bou,
        }
    }
}

impl<T> IndexMut<Category> for PerCategory<T> {
    fn index_mut(&mut self, c: Category) -> &mut T {
        match c {
            Category::PedCrossing => &mut self.ped,
            Category::Divider => &mut self.div,
            Category::Boundary => &mut self.bou,
        }
    }
}

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapElement {
    pub id: u32,
    pub category: Category,
    /// Ground truth uses 1.0.
    pub confidence: f64,
    /// Ordered keypoints `[x, y]` in meters.
    pub points: Vec<Point>,
}

pub const VECTORMAP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorMap {
    pub version: u32,
    pub scene_id: String,
    pub elements: Vec<MapElement>,
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("element {id}: {reason}")]
    Invalid { id: u32, reason: String },
    #[error("unsupported vector map version {0}")]
    Version(u32),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vector map {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Axis-aligned metric extent `[x_min, x_max] x [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Range {
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn clamp(&self, p: Point) -> Point {
        [p[0].clamp(self.x_min, self.x_max), p[1].clamp(self.y_min, self.y_max)]
    }
}

impl VectorMap {
    pub fn new(scene_id: impl Into<String>, elements: Vec<MapElement>) -> Self {
        Self {
            version: VECTORMAP_VERSION,
            scene_id: scene_id.into(),
            elements,
        }
    }

    pub fn of_category(&self, c: Category) -> impl Iterator<Item = &MapElement> {
        self.elements.iter().filter(move |e| e.category == c)
    }

    /// Checks the ground-truth invariants: points inside `range`, at least two
    /// points (exactly two for crossings), no repeated consecutive points.
    pub fn validate(&self, range: &Range) -> Result<(), MapError> {
        for e in &self.elements {
            let bad = |reason: String| MapError::Invalid { id: e.id, reason };
            if e.points.len() < 2 {
                return Err(bad(format!("{} points, need at least 2", e.points.len())));
            }
            if e.category == Category::PedCrossing && e.points.len() != 2 {
                return Err(bad(format!("crossing with {} points", e.points.len())));
            }
            if let Some(p) = e.points.iter().find(|p| !range.contains(**p)) {
                return Err(bad(format!("point {p:?} outside range")));
            }
            if e.points.windows(2).any(|w| w[0] == w[1]) {
                return Err(bad("repeated consecutive point".into()));
            }
            if !(0.0..=1.0).contains(&e.confidence) {
                return Err(bad(format!("confidence {} outside [0, 1]", e.confidence)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vector map serialises")
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self, MapError> {
        let map: VectorMap = serde_json::from_str(text).map_err(|source| MapError::Parse {
            path: path.to_string(),
            source,
        })?;
        if map.version != VECTORMAP_VERSION {
            return Err(MapError::Version(map.version));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io { path: p.clone(), source })?;
        Self::from_json(&text, &p)
    }
}
