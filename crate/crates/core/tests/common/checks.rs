//! One function per acceptance property. Each returns a short summary on
//! success and the first violation otherwise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamtrack::attention::{Attention, AttentionConfig};
use siamtrack::config::Config;
use siamtrack::geometry::{iou3d, knn_coords, knn_features, Box7};
use siamtrack::gradsuite;
use siamtrack::metrics::{precision, success, EvalReport, FrameRecord};
use siamtrack::model::Network;
use siamtrack::numeric::{ParamStore, Tape, Tensor};
use siamtrack::tracker::{track_all, OraclePredictor};

use super::*;

pub type Outcome = std::result::Result<String, String>;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_mat<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn weight(store: &ParamStore<f64>, id: siamtrack::numeric::ParamId) -> Mat {
    let t = &store.get(id).tensor;
    to_mat(t.data(), t.cols())
}

/// Gradient suite at 64-bit precision.
pub fn gradients(seed: u64, entries: usize) -> Outcome {
    let start = std::time::Instant::now();
    let results = gradsuite::run(seed, entries).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results.iter().filter(|r| !r.report.passed()).map(|r| r.line()).collect();
    if !failed.is_empty() {
        return Err(failed.join("; "));
    }
    let worst = |prefix: bool| {
        results
            .iter()
            .filter(|r| r.name.starts_with("loss") != prefix)
            .map(|r| r.report.max_error())
            .fold(0.0, f64::max)
    };
    if secs > 300.0 {
        return Err(format!("suite took {secs:.0} s"));
    }
    Ok(format!(
        "{} cases, max error {:.1e} (ops/layers) {:.1e} (loss), {secs:.1} s",
        results.len(),
        worst(true),
        worst(false)
    ))
}

/// Kernelized attention against the dense normalized-kernel oracle. The
/// implied weights are read off by feeding one-hot values through identity
/// value and output projections.
pub fn linear_attention(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_out, mut worst_w, mut worst_sum) = (0.0f64, 0.0f64, 0.0f64);
    for inst in 0..instances {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let nq = rng.random_range(1..=64);
        let nk = rng.random_range(1..=64);
        let dim = heads * rng.random_range(1..=6);
        let kv_dim = rng.random_range(1..=12);
        let cfg = AttentionConfig {
            heads,
            layer_norm: false,
        };
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", dim, kv_dim, cfg, &mut rng).map_err(|e| e.to_string())?;
        let (q, k, v) = (random_mat(nq, dim, &mut rng), random_mat(nk, kv_dim, &mut rng), random_mat(nk, kv_dim, &mut rng));
        let mut tape = Tape::new(&store);
        let qv = tape.input(&Tensor::new(&[nq, dim], flat(&q)).unwrap());
        let kv = tape.input(&Tensor::new(&[nk, kv_dim], flat(&k)).unwrap());
        let vv = tape.input(&Tensor::new(&[nk, kv_dim], flat(&v)).unwrap());
        let out = attn.linear_attention(&mut tape, qv, kv, vv).map_err(|e| e.to_string())?;
        let w = [attn.w_q.weight, attn.w_k.weight, attn.w_v.weight, attn.w_o.weight].map(|id| weight(&store, id));
        let (want, _) = dense_attention(&q, &k, &v, [&w[0], &w[1], &w[2], &w[3]], heads);
        worst_out = worst_out.max(max_abs_diff(tape.value(out), &flat(&want)));

        // Probe: per-head width d >= nk, identity value/output maps and
        // one-hot values make output column h*d + j equal w^h_ij.
        let d = nk.max(1);
        let pd = heads * d;
        let mut store = ParamStore::new();
        let probe = Attention::new(&mut store, "p", pd, pd, cfg, &mut rng).map_err(|e| e.to_string())?;
        let eye: Vec<f64> = (0..pd * pd).map(|i| if i / pd == i % pd { 1.0 } else { 0.0 }).collect();
        for id in [probe.w_v.weight, probe.w_o.weight] {
            store.get_mut(id).tensor.data_mut().copy_from_slice(&eye);
        }
        let (pq, pk) = (random_mat(nq, pd, &mut rng), random_mat(nk, pd, &mut rng));
        let mut onehot = vec![vec![0.0; pd]; nk];
        for (j, row) in onehot.iter_mut().enumerate() {
            for h in 0..heads {
                row[h * d + j] = 1.0;
            }
        }
        let mut tape = Tape::new(&store);
        let qv = tape.input(&Tensor::new(&[nq, pd], flat(&pq)).unwrap());
        let kv = tape.input(&Tensor::new(&[nk, pd], flat(&pk)).unwrap());
        let vv = tape.input(&Tensor::new(&[nk, pd], flat(&onehot)).unwrap());
        let out = probe.linear_attention(&mut tape, qv, kv, vv).map_err(|e| e.to_string())?;
        let got = to_mat(tape.value(out), pd);
        let wp = [probe.w_q.weight, probe.w_k.weight, probe.w_v.weight, probe.w_o.weight].map(|id| weight(&store, id));
        let (_, want_w) = dense_attention(&pq, &pk, &onehot, [&wp[0], &wp[1], &wp[2], &wp[3]], heads);
        for h in 0..heads {
            for i in 0..nq {
                let row = &got[i][h * d..h * d + nk];
                worst_w = worst_w.max(max_abs_diff(row, &want_w[h][i]));
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        if worst_out > 1e-10 || worst_w > 1e-10 || worst_sum > 1e-12 {
            return Err(format!(
                "instance {inst}: output {worst_out:.1e}, weights {worst_w:.1e}, row sum {worst_sum:.1e}"
            ));
        }
    }
    Ok(format!(
        "{instances} instances, output {worst_out:.1e}, weights {worst_w:.1e}, row sums {worst_sum:.1e}"
    ))
}

/// Coordinate and feature k-NN against exhaustive ranking.
pub fn knn(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for inst in 0..instances {
        let k = [4, 16, 48][inst % 3];
        let n = rng.random_range(k..=512);
        // Every fourth instance lives on a coarse lattice to force ties.
        let lattice = inst % 4 == 3;
        let draw = |rng: &mut ChaCha8Rng| {
            if lattice {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let coords: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| draw(&mut rng))).collect();
        let got = knn_coords(&coords, k).map_err(|e| e.to_string())?;
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let want = brute_knn(n, k, |i, j| -sq(&coords[i], &coords[j]));
        if got.indices != want {
            return Err(format!("coordinate instance {inst} (n {n}, k {k}) differs"));
        }
        let width = rng.random_range(1..=32);
        let feats: Vec<f64> = (0..n * width).map(|_| draw(&mut rng)).collect();
        let got = knn_features(&feats, width, k).map_err(|e| e.to_string())?;
        let row = |i: usize| &feats[i * width..(i + 1) * width];
        let want = brute_knn(n, k, |i, j| (-sq(row(i), row(j))).exp());
        if got.indices != want {
            return Err(format!("feature instance {inst} (n {n}, k {k}, width {width}) differs"));
        }
    }
    Ok(format!("{instances} instances x 2 spaces match exactly"))
}

/// Rotated-box IoU against Monte-Carlo estimates.
pub fn iou(pairs: usize, samples: usize) -> Outcome {
    let a = Box7::new([0.0; 3], [2.0; 3], 0.0).unwrap();
    let b = Box7::new([1.0, 0.0, 0.0], [2.0; 3], 0.0).unwrap();
    let exact = iou3d(&a, &b);
    if (exact - 1.0 / 3.0).abs() > 1e-15 {
        return Err(format!("half-offset cubes give {exact}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for p in 0..pairs {
        let a = random_box(&mut rng);
        let mut b = random_box(&mut rng);
        // Keep most pairs overlapping.
        b.x = a.x + rng.random_range(-1.0..1.0);
        b.y = a.y + rng.random_range(-1.0..1.0);
        let got = iou3d(&a, &b);
        let mc = monte_carlo_iou(&a, &b, samples, &mut rng);
        worst = worst.max((got - mc).abs());
        if (got - mc).abs() > 0.005 {
            return Err(format!("pair {p}: iou3d {got:.5} vs Monte-Carlo {mc:.5}"));
        }
    }
    Ok(format!("half-offset cubes {exact:.15}, {pairs} pairs within {worst:.4}"))
}

/// Map sizes at the published settings.
pub fn shapes() -> Outcome {
    let cfg = Config::published();
    let (net, store) = Network::new(&cfg, 0).map_err(|e| e.to_string())?;
    let params = store.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut cloud = |n: usize| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)])
            .collect()
    };
    let (t, s) = (cloud(cfg.template_points), cloud(cfg.search_points));
    let mut tape = Tape::inference(&params);
    let out = net.forward(&mut tape, &t, &s, 0).map_err(|e| e.to_string())?;
    let yt = tape.shape(out.template.output()).to_vec();
    let ys = tape.shape(out.search.output()).to_vec();
    let fused = tape.shape(out.fusion.features).to_vec();
    let levels: Vec<usize> = out.search.coords.iter().map(Vec::len).collect();
    let ok = yt == [512, 32] && ys == [1024, 32] && fused == [1024, 32] && levels == [1024, 512, 256, 128];
    let msg = format!("Y^t {yt:?}, Y^s {ys:?}, fused {fused:?}, search levels {levels:?}");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Permutation and weight-sharing identities.
pub fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = AttentionConfig {
        heads: 2,
        layer_norm: true,
    };
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "s", 8, 6, cfg, &mut rng).map_err(|e| e.to_string())?;
    let own = Attention::new(&mut store, "o", 8, 8, cfg, &mut rng).map_err(|e| e.to_string())?;
    let (n, m) = (40, 30);
    let tokens = random_mat(n, 8, &mut rng);
    let pos = random_mat(n, 8, &mut rng);
    let keys = random_mat(m, 6, &mut rng);
    let kpos = random_mat(m, 6, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut kperm: Vec<usize> = (0..m).collect();
    kperm.shuffle(&mut rng);
    let permute = |a: &Mat, p: &[usize]| -> Mat { p.iter().map(|&i| a[i].clone()).collect() };
    let run = |tok: &Mat, pos: &Mat, keys: &Mat, kpos: &Mat| -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(&store);
        let t = tape.input(&Tensor::new(&[tok.len(), 8], flat(tok)).unwrap());
        let p = tape.input(&Tensor::new(&[pos.len(), 8], flat(pos)).unwrap());
        let k = tape.input(&Tensor::new(&[keys.len(), 6], flat(keys)).unwrap());
        let kp = tape.input(&Tensor::new(&[kpos.len(), 6], flat(kpos)).unwrap());
        let s = own.self_attention(&mut tape, t, p).unwrap();
        let c = attn.cross_attention(&mut tape, t, k, kp).unwrap();
        (tape.value(s).to_vec(), tape.value(c).to_vec())
    };
    let (s0, c0) = run(&tokens, &pos, &keys, &kpos);
    let (s1, _) = run(&permute(&tokens, &perm), &permute(&pos, &perm), &keys, &kpos);
    let s0p = flat(&permute(&to_mat(&s0, 8), &perm));
    let self_err = max_abs_diff(&s0p, &s1);
    let (_, c1) = run(&tokens, &pos, &permute(&keys, &kperm), &permute(&kpos, &kperm));
    let cross_err = max_abs_diff(&c0, &c1);

    let cfg = Config::toy();
    let (net, store) = Network::new(&cfg, 3).map_err(|e| e.to_string())?;
    let cloud: Vec<[f64; 3]> = (0..cfg.search_points)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-2.0..2.0)))
        .collect();
    let mut tape = Tape::inference(&store);
    let (tp, sp) = net.backbone.extract_features(&mut tape, &cloud, &cloud, 9).map_err(|e| e.to_string())?;
    let siamese_same = tape.value(tp.output()) == tape.value(sp.output());

    let mut records = Vec::new();
    for i in 0..50 {
        let gt = random_box(&mut rng);
        let mut pred = gt;
        pred.x += rng.random_range(-1.5..1.5);
        pred.yaw += rng.random_range(-0.5..0.5);
        records.push(FrameRecord {
            tracklet: format!("t{}", i / 10),
            category: "Car".into(),
            frame: i % 10,
            pred,
            gt: Some(gt),
            degraded: false,
            timings: None,
        });
    }
    let a = EvalReport::from_records("Car", &records).map_err(|e| e.to_string())?;
    records.shuffle(&mut rng);
    let b = EvalReport::from_records("Car", &records).map_err(|e| e.to_string())?;
    let metric_err = (a.success - b.success).abs().max((a.precision - b.precision).abs());

    let msg = format!(
        "self-attn {self_err:.1e}, cross-attn keys {cross_err:.1e}, siamese identical {siamese_same}, metrics {metric_err:.1e}"
    );
    if self_err <= 1e-12 && cross_err <= 1e-12 && siamese_same && metric_err <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Closed forms against exact piecewise integration, and the oracle
/// predictor on synthetic tracklets.
pub fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(1..200);
        let mut ious: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut dists: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        if trial % 5 == 0 {
            // Boundary values and repeats.
            ious[0] = 0.0;
            ious[n - 1] = 1.0;
            dists[0] = 2.0;
            dists[n - 1] = dists[0];
        }
        let s = success(&ious).map_err(|e| e.to_string())?;
        let mean = ious.iter().sum::<f64>() / n as f64 * 100.0;
        let p = precision(&dists).map_err(|e| e.to_string())?;
        let err = (s - success_by_integration(&ious))
            .abs()
            .max((s - mean).abs())
            .max((p - precision_by_integration(&dists)).abs());
        worst = worst.max(err);
        if err > 1e-9 {
            return Err(format!("trial {trial}: error {err:.2e}"));
        }
    }
    let data = siamtrack::experiment::toy_data(4, 0, 6, 1).map_err(|e| e.to_string())?;
    let records = track_all(&mut OraclePredictor, &data.train, 0).map_err(|e| e.to_string())?;
    let r = EvalReport::from_records("Car", &records).map_err(|e| e.to_string())?;
    if r.success != 100.0 || r.precision != 100.0 {
        return Err(format!("oracle predictor scored {} / {}", r.success, r.precision));
    }
    Ok(format!("200 trials within {worst:.1e}; oracle predictor {:.1} / {:.1}", r.success, r.precision))
}
