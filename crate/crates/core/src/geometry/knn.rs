//! Exhaustive k-nearest-neighbor graphs in coordinate and feature space.
//!
//! Each row starts with the query point itself; the remaining neighbors
//! follow in ascending distance, ties going to the lower index.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numeric::Scalar;

/// Neighbor table of `n` points with `k` entries per point.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub n: usize,
    pub k: usize,
    /// Row-major `n × k` table of point indices.
    pub indices: Vec<usize>,
    /// Squared distances matching `indices`.
    pub sq_dists: Vec<f64>,
}

impl NeighborGraph {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Neighbor coordinates, `n × k × 3`.
    pub fn neighbor_coords(&self, coords: &[[f64; 3]]) -> Vec<[f64; 3]> {
        self.indices.iter().map(|&j| coords[j]).collect()
    }

    /// Feature-space similarity `exp(-d²)` of each table entry.
    pub fn similarities(&self) -> Vec<f64> {
        self.sq_dists.iter().map(|d| (-d).exp()).collect()
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn build<F>(n: usize, k: usize, sq_dist: F) -> Result<NeighborGraph>
where
    F: Fn(usize, usize) -> f64,
{
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} neighbors requested from {n} points")));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut sq_dists = Vec::with_capacity(n * k);
    let mut cands: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cands.clear();
        cands.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(i, j), j)));
        indices.push(i);
        sq_dists.push(0.0);
        let rest = k - 1;
        if rest > 0 {
            if rest < cands.len() {
                cands.select_nth_unstable_by(rest - 1, by_distance_then_index);
                cands.truncate(rest);
            }
            cands.sort_unstable_by(by_distance_then_index);
            for &(d, j) in &cands[..rest] {
                indices.push(j);
                sq_dists.push(d);
            }
        }
    }
    Ok(NeighborGraph {
        n,
        k,
        indices,
        sq_dists,
    })
}

/// Euclidean k-NN over 3-D coordinates.
pub fn knn_coords(coords: &[[f64; 3]], k: usize) -> Result<NeighborGraph> {
    build(coords.len(), k, |i, j| {
        let a = coords[i];
        let b = coords[j];
        (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
    })
}

/// k-NN over the rows of a row-major `n × width` feature map, ranking by the
/// similarity `exp(-‖f_i - f_j‖²)` (equivalently, by squared distance).
pub fn knn_features<T: Scalar>(features: &[T], width: usize, k: usize) -> Result<NeighborGraph> {
    if width == 0 || features.len() % width != 0 {
        return Err(Error::dim("knn_features", &[features.len()], &[width]));
    }
    let n = features.len() / width;
    build(n, k, |i, j| {
        let a = &features[i * width..(i + 1) * width];
        let b = &features[j * width..(j + 1) * width];
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_is_its_own_neighbor() {
        let g = knn_coords(&[[1.0, 2.0, 3.0]], 1).unwrap();
        assert_eq!(g.indices, vec![0]);
    }

    #[test]
    fn collinear_points() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let g = knn_coords(&pts, 2).unwrap();
        assert_eq!(g.row(1), &[1, 0]);
        assert_eq!(g.row(2), &[2, 1]);
    }

    #[test]
    fn too_many_neighbors() {
        assert!(matches!(knn_coords(&[[0.0; 3]; 3], 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn identical_features_fall_back_to_index_order() {
        let f = vec![0.5f64; 5 * 3];
        let g = knn_features(&f, 3, 5).unwrap();
        assert_eq!(g.row(0), &[0, 1, 2, 3, 4]);
        assert_eq!(g.row(3), &[3, 0, 1, 2, 4]);
        assert!(g.similarities().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn unit_feature_distance_similarity() {
        let f = vec![0.0f64, 0.0, 1.0, 0.0];
        let g = knn_features(&f, 2, 2).unwrap();
        assert!((g.similarities()[1] - (-1f64).exp()).abs() < 1e-15);
    }
}
