//! Independent reference implementations used by the integration and
//! acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use siamtrack::geometry::Box7;

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn to_mat(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn phi(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Dense multi-head attention with the normalized kernel
/// `w_ij = φ(q_i)·φ(k_j) / Σ_l φ(q_i)·φ(k_l)`. Returns the projected output
/// and the full weight matrix of every head.
pub fn dense_attention(
    query: &Mat,
    key: &Mat,
    value: &Mat,
    w: [&Mat; 4],
    heads: usize,
) -> (Mat, Vec<Mat>) {
    let [wq, wk, wv, wo] = w;
    let q = matmul(query, wq);
    let k = matmul(key, wk);
    let v = matmul(value, wv);
    let c = q[0].len();
    let d = c / heads;
    let mut cat = vec![vec![0.0; c]; q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let mut wh = vec![vec![0.0; k.len()]; q.len()];
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| phi(qi[c]) * phi(kj[c])).sum())
                .collect();
            let total: f64 = scores.iter().sum();
            for (j, s) in scores.iter().enumerate() {
                wh[i][j] = s / total;
            }
            for c in cols.clone() {
                cat[i][c] = (0..k.len()).map(|j| wh[i][j] * v[j][c]).sum();
            }
        }
        weights.push(wh);
    }
    (matmul(&cat, wo), weights)
}

/// Brute-force neighbor rows: the point itself, then every other point by
/// decreasing `score`, ties to the lower index.
pub fn brute_knn(n: usize, k: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (score(i, j), j)).collect();
        others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(i);
        out.extend(others.iter().take(k - 1).map(|&(_, j)| j));
    }
    out
}

/// Monte-Carlo IoU from uniform samples over the joint bounding box.
pub fn monte_carlo_iou<R: Rng>(a: &Box7, b: &Box7, samples: usize, rng: &mut R) -> f64 {
    let radius = |x: &Box7| ((x.w * x.w + x.l * x.l).sqrt() / 2.0, x.h / 2.0);
    let (ra, ha) = radius(a);
    let (rb, hb) = radius(b);
    let lo = [(a.x - ra).min(b.x - rb), (a.y - ra).min(b.y - rb), (a.z - ha).min(b.z - hb)];
    let hi = [(a.x + ra).max(b.x + rb), (a.y + ra).max(b.y + rb), (a.z + ha).max(b.z + hb)];
    let (mut in_a, mut in_b, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let p = [0, 1, 2].map(|k| rng.random_range(lo[k]..hi[k]));
        let (ia, ib) = (a.contains(p), b.contains(p));
        in_a += ia as usize;
        in_b += ib as usize;
        both += (ia && ib) as usize;
    }
    let union = in_a + in_b - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Exact area under `t ↦ |{v : v > t}| / n` on `[0, upper]`, integrating
/// the step function piece by piece between its breakpoints.
pub fn area_above(values: &[f64], upper: f64) -> f64 {
    let n = values.len() as f64;
    let mut cuts: Vec<f64> = values.iter().map(|v| v.clamp(0.0, upper)).collect();
    cuts.push(0.0);
    cuts.push(upper);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    cuts.windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let frac = values.iter().filter(|&&v| v > mid).count() as f64 / n;
            frac * (w[1] - w[0])
        })
        .sum()
}

/// Success as the area under the IoU success curve, in percent.
pub fn success_by_integration(ious: &[f64]) -> f64 {
    area_above(ious, 1.0) * 100.0
}

/// Precision as the normalized area under `t ↦ |{d : d ≤ t}| / n` on
/// `[0, 2]`, in percent.
pub fn precision_by_integration(dists: &[f64]) -> f64 {
    (1.0 - area_above(dists, 2.0) / 2.0) * 100.0
}

pub fn random_box<R: Rng>(rng: &mut R) -> Box7 {
    Box7::new(
        [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)),
        [0, 1, 2].map(|_| rng.random_range(0.5..3.0)),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

pub mod checks;
