//! Bird's-eye-view center head: point features are max-pooled into a grid,
//! passed through a small convolutional trunk and decoded into a target
//! center, height and yaw in the search frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::xavier_bound;
use crate::error::{Error, Result};
use crate::geometry::{apply_motion, Box7};
use crate::numeric::{ParamId, ParamStore, Scalar, Tape, Tensor, Var, NO_SOURCE};

/// Grid over `[-x_extent, x_extent] × [-y_extent, y_extent]` around the search
/// origin. Columns run along x, rows along y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_extent: f64,
    pub y_extent: f64,
    pub cell: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_extent: 5.6,
            y_extent: 3.6,
            cell: 0.3,
        }
    }
}

fn cells(span: f64, cell: f64) -> usize {
    // guard against 7.2 / 0.3 = 24.000000000000004
    ((span / cell) - 1e-9).ceil().max(1.0) as usize
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_extent > 0.0 && self.y_extent > 0.0 && self.cell > 0.0) {
            return Err(Error::Parameter(format!("grid extents and cell must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        cells(2.0 * self.x_extent, self.cell)
    }

    pub fn height(&self) -> usize {
        cells(2.0 * self.y_extent, self.cell)
    }

    pub fn num_cells(&self) -> usize {
        self.width() * self.height()
    }

    /// Flat cell index `row * W + col` of a point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let c = ((x + self.x_extent) / self.cell).floor();
        let r = ((y + self.y_extent) / self.cell).floor();
        if c < 0.0 || r < 0.0 {
            return None;
        }
        let (c, r) = (c as usize, r as usize);
        (c < self.width() && r < self.height()).then(|| r * self.width() + c)
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (r, c) = (cell / self.width(), cell % self.width());
        (
            -self.x_extent + (c as f64 + 0.5) * self.cell,
            -self.y_extent + (r as f64 + 0.5) * self.cell,
        )
    }
}

/// Dense BEV feature planes (`C × H × W`) with occupancy.
#[derive(Clone, Debug)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub planes: Var,
    pub occupied: Vec<bool>,
    pub dropped: usize,
}

/// Per-cell maximum of the point features; empty cells are zero and the
/// gradient of each cell flows to its argmax point.
pub fn scatter_to_bev<T: Scalar>(
    tape: &mut Tape<'_, T>,
    features: Var,
    coords: &[[f64; 3]],
    spec: GridSpec,
) -> Result<BevGrid> {
    spec.validate()?;
    let (n, c) = (tape.rows(features), tape.cols(features));
    if n != coords.len() {
        return Err(Error::dim("scatter_to_bev", tape.shape(features), &[coords.len(), 3]));
    }
    let hw = spec.num_cells();
    let vals = tape.value(features);
    let mut src = vec![NO_SOURCE; c * hw];
    let mut occupied = vec![false; hw];
    let mut dropped = 0;
    for (p, q) in coords.iter().enumerate() {
        let Some(cell) = spec.cell_of(q[0], q[1]) else {
            dropped += 1;
            continue;
        };
        occupied[cell] = true;
        for ch in 0..c {
            let slot = &mut src[ch * hw + cell];
            let cand = p * c + ch;
            if *slot == NO_SOURCE || vals[cand] > vals[*slot] {
                *slot = cand;
            }
        }
    }
    let planes = tape.select(features, src, &[c, spec.height(), spec.width()])?;
    Ok(BevGrid {
        spec,
        planes,
        occupied,
        dropped,
    })
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = xavier_bound(cin * k * k, cout * k * k);
        Ok(Conv {
            kernel: store.add(format!("{name}.kernel"), Tensor::uniform(&[cout, cin, k, k], bound, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        let b = tape.param(self.bias);
        tape.conv2d(x, k, b)
    }
}

/// Initial heatmap probability everywhere; most cells hold no target.
pub const HEATMAP_PRIOR: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Head {
    pub grid: GridSpec,
    pub trunk: [Conv; 3],
    pub heatmap: Conv,
    pub offset: Conv,
    pub z: Conv,
    pub yaw: Conv,
}

/// Raw head maps, all `· × H × W`.
#[derive(Clone, Debug)]
pub struct DetectionOutput {
    pub heatmap: Var,
    pub offset: Var,
    pub z: Var,
    pub yaw: Var,
    pub occupied: Vec<bool>,
    pub spec: GridSpec,
}

/// Decoded motion of the target relative to the previous box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub cell: usize,
    pub score: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dyaw: f64,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        grid: GridSpec,
        in_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        grid.validate()?;
        let heatmap = Conv::new(store, "head.heatmap", width, 1, 1, rng)?;
        store.get_mut(heatmap.bias).tensor.data_mut()[0] = (HEATMAP_PRIOR / (1.0 - HEATMAP_PRIOR)).ln();
        Ok(Head {
            grid,
            trunk: [
                Conv::new(store, "head.trunk1", in_dim, width, 3, rng)?,
                Conv::new(store, "head.trunk2", width, width, 3, rng)?,
                Conv::new(store, "head.trunk3", width, width, 3, rng)?,
            ],
            heatmap,
            offset: Conv::new(store, "head.offset", width, 2, 1, rng)?,
            z: Conv::new(store, "head.z", width, 1, 1, rng)?,
            yaw: Conv::new(store, "head.yaw", width, 2, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, grid: &BevGrid) -> Result<DetectionOutput> {
        let mut x = self.trunk[0].forward(tape, grid.planes)?;
        x = tape.relu(x);
        x = self.trunk[1].forward(tape, x)?;
        x = tape.relu(x);
        x = self.trunk[2].forward(tape, x)?;
        Ok(DetectionOutput {
            heatmap: self.heatmap.forward(tape, x)?,
            offset: self.offset.forward(tape, x)?,
            z: self.z.forward(tape, x)?,
            yaw: self.yaw.forward(tape, x)?,
            occupied: grid.occupied.clone(),
            spec: grid.spec,
        })
    }
}

impl DetectionOutput {
    /// Best occupied cell and its regressed motion in the search frame, or
    /// `None` when no cell holds a point.
    pub fn detect<T: Scalar>(&self, tape: &Tape<'_, T>) -> Option<Detection> {
        let heat = tape.value(self.heatmap);
        let mut best: Option<usize> = None;
        for (cell, &occ) in self.occupied.iter().enumerate() {
            if occ && best.is_none_or(|b| heat[cell] > heat[b]) {
                best = Some(cell);
            }
        }
        let cell = best?;
        let hw = self.spec.num_cells();
        let off = tape.value(self.offset);
        let yaw = tape.value(self.yaw);
        let (cx, cy) = self.spec.cell_center(cell);
        Some(Detection {
            cell,
            score: heat[cell].as_f64(),
            dx: cx + off[cell].as_f64(),
            dy: cy + off[hw + cell].as_f64(),
            dz: tape.value(self.z)[cell].as_f64(),
            dyaw: yaw[hw + cell].as_f64().atan2(yaw[cell].as_f64()),
        })
    }
}

/// Applies a detection to the previous box; the size is carried over.
pub fn decode_box(det: &Detection, prev: &Box7) -> Box7 {
    apply_motion(prev, det.dx, det.dy, det.dz, det.dyaw)
}
