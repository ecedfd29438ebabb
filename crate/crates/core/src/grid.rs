//! Metric BEV grid geometry and the feature/flow grids living on it.

use serde::{Deserialize, Serialize};

use crate::map::{Point, Range};
use crate::tensor::Tensor;

/// Grid layout over a metric range. Rows run along y (row 0 at `y_min`),
/// columns along x (column 0 at `x_min`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub range: Range,
    /// Rows (H).
    pub h: usize,
    /// Columns (W).
    pub w: usize,
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Cell size in meters as `(along x, along y)`.
    pub fn cell_size(&self) -> (f64, f64) {
        (self.range.width() / self.w as f64, self.range.height() / self.h as f64)
    }

    /// Continuous `(row, col)` of a metric point; integer values are cell centres.
    pub fn to_grid(&self, p: Point) -> (f64, f64) {
        let (cx, cy) = self.cell_size();
        ((p[1] - self.range.y_min) / cy - 0.5, (p[0] - self.range.x_min) / cx - 0.5)
    }

    pub fn to_metric(&self, row: f64, col: f64) -> Point {
        let (cx, cy) = self.cell_size();
        [self.range.x_min + (col + 0.5) * cx, self.range.y_min + (row + 0.5) * cy]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        self.to_metric(row as f64, col as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Camera,
    Lidar,
    Fused,
}

/// `C x H x W` feature grid with its georeferencing.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub modality: Modality,
    pub features: Tensor,
    pub spec: GridSpec,
}

impl BevGrid {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Per-cell displacement `(dh, dw)` in cell units, shape `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: Tensor,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { flow: Tensor::zeros(&[2, h, w]) }
    }

    /// Sampling positions `(h + dh, w + dw)` as a `[2, H, W]` tensor.
    pub fn sampling_coords(&self) -> Tensor {
        let (h, w) = (self.flow.shape()[1], self.flow.shape()[2]);
        let mut coords = identity_coords(h, w);
        for (c, d) in coords.data_mut().iter_mut().zip(self.flow.data()) {
            *c += d;
        }
        coords
    }

    /// Displacement in meters at a cell, `(dx, dy)`.
    pub fn meters_at(&self, spec: &GridSpec, row: usize, col: usize) -> (f64, f64) {
        let (cx, cy) = spec.cell_size();
        (self.flow.get(&[1, row, col]) * cx, self.flow.get(&[0, row, col]) * cy)
    }
}

/// `[2, H, W]` tensor holding each cell's own `(row, col)`.
pub fn identity_coords(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[2, h, w], |i| {
        let cell = i % (h * w);
        if i < h * w {
            (cell / w) as f64
        } else {
            (cell % w) as f64
        }
    })
}
