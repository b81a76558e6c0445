use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use super::Box7;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

/// Per-point auxiliary values, row-aligned with the coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub width: usize,
    pub data: Vec<f64>,
}

/// `N × 3` coordinates in meters plus optional per-point features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub features: Option<Features>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("point coordinates must be finite".into()));
        }
        Ok(PointCloud {
            coords,
            features: None,
        })
    }

    pub fn with_features(coords: Vec<[f64; 3]>, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != coords.len() * width {
            return Err(Error::dim("point features", &[coords.len(), width], &[data.len()]));
        }
        let mut pc = Self::new(coords)?;
        pc.features = Some(Features { width, data });
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Points at the given indices, in that order; features follow along.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let coords = idx.iter().map(|&i| self.coords[i]).collect();
        let features = self.features.as_ref().map(|f| Features {
            width: f.width,
            data: idx
                .iter()
                .flat_map(|&i| f.data[i * f.width..(i + 1) * f.width].iter().copied())
                .collect(),
        });
        PointCloud { coords, features }
    }

    pub fn filter(&self, keep: &[bool]) -> PointCloud {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        self.select(&idx)
    }

    /// Concatenation; features are kept only when both sides carry the same width.
    pub fn union(&self, other: &PointCloud) -> PointCloud {
        let mut coords = self.coords.clone();
        coords.extend_from_slice(&other.coords);
        let features = match (&self.features, &other.features) {
            (Some(a), Some(b)) if a.width == b.width => Some(Features {
                width: a.width,
                data: a.data.iter().chain(&b.data).copied().collect(),
            }),
            _ => None,
        };
        PointCloud { coords, features }
    }

    /// Coordinates expressed in the frame of `b`.
    pub fn to_box_frame(&self, b: &Box7) -> PointCloud {
        PointCloud {
            coords: self.coords.iter().map(|&p| b.to_local(p)).collect(),
            features: self.features.clone(),
        }
    }

    pub fn to_world(&self, b: &Box7) -> PointCloud {
        PointCloud {
            coords: self.coords.iter().map(|&p| b.to_world(p)).collect(),
            features: self.features.clone(),
        }
    }

    pub fn coords_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data = self
            .coords
            .iter()
            .flat_map(|p| p.iter().map(|&v| T::from_f64c(v)))
            .collect();
        Tensor::new(&[self.len(), 3], data)
    }
}

/// Indices of a random resampling to exactly `target` points.
///
/// Without replacement when the cloud is large enough. Otherwise every
/// original point appears once and the remainder are duplicates drawn with
/// replacement; the result is shuffled.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, target: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if n >= target {
        return Ok(sample(rng, n, target).into_vec());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.extend((n..target).map(|_| rng.random_range(0..n)));
    idx.shuffle(rng);
    Ok(idx)
}

pub fn random_resample<R: Rng + ?Sized>(pc: &PointCloud, target: usize, rng: &mut R) -> Result<PointCloud> {
    let idx = resample_indices(pc.len(), target, rng)?;
    Ok(pc.select(&idx))
}

pub fn points_in_box(pc: &PointCloud, b: &Box7) -> Vec<bool> {
    pc.coords.iter().map(|&p| b.contains(p)).collect()
}

/// Points inside `prev` grown by `margin` on every face, in the input frame.
pub fn crop_search_area(frame: &PointCloud, prev: &Box7, margin: f64) -> Result<PointCloud> {
    if !(margin >= 0.0) {
        return Err(Error::Parameter(format!("search margin must be non-negative, got {margin}")));
    }
    Ok(frame.filter(&points_in_box(frame, &prev.enlarged(margin))))
}
