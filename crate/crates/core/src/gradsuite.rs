//! The finite-difference suite: every differentiable primitive, the composed
//! layers, and the full training loss on small scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, AttentionConfig, PosEmbed};
use crate::backbone::EdgeConv;
use crate::config::Config;
use crate::data::synth::{generate, SynthSpec};
use crate::error::{Error, Result};
use crate::geometry::{knn_coords, knn_features};
use crate::head::{scatter_to_bev, GridSpec, Head};
use crate::model::Network;
use crate::numeric::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::train::{compute_loss, make_samples, resample_coords, LossSpec};

/// Tolerance for single operations and layers.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for the composed loss.
pub const END_TO_END_TOL: f64 = 1e-4;

type Objective = Box<dyn for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>>;

struct Case {
    name: String,
    store: ParamStore<f64>,
    f: Objective,
    opts: GradCheckOptions,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{:<28} max error {:.2e} (tol {:.0e}) {}",
            self.name,
            self.report.max_error(),
            self.report.tol,
            if self.report.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// Values in `±[0.2, 1]`, keeping clear of the kinks of `relu` and `abs`.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `Σ out ⊙ W` for a fixed random `W`, so that every output entry matters.
fn weigh(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(&shape, 1.0, &mut rng);
    let w = tape.input(&w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Moves every parameter off its initial value. Zero-initialized biases
/// would otherwise put empty grid cells exactly on a rectifier kink.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}

fn primitive(name: &str, store: ParamStore<f64>, f: Objective) -> Case {
    Case {
        name: name.to_string(),
        store,
        f,
        opts: GradCheckOptions {
            tol: PRIMITIVE_TOL,
            step: 1e-5,
            ..GradCheckOptions::default()
        },
    }
}

fn params(shapes: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(*name, off_zero(shape, rng))?;
    }
    Ok(s)
}

macro_rules! ids {
    ($store:expr, $($n:literal),+) => {
        ( $( $store.id($n).expect("declared") ),+ )
    };
}

fn unary(name: &str, shape: &[usize], rng: &mut ChaCha8Rng, op: fn(&mut Tape<'_, f64>, Var) -> Result<Var>) -> Result<Case> {
    let store = params(&[("a", shape)], rng)?;
    let a = store.id("a").expect("declared");
    Ok(primitive(
        name,
        store,
        Box::new(move |t| {
            let x = t.param(a);
            let y = op(t, x)?;
            weigh(t, y, 1)
        }),
    ))
}

fn binary(name: &str, sa: &[usize], sb: &[usize], rng: &mut ChaCha8Rng, op: fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var>) -> Result<Case> {
    let store = params(&[("a", sa), ("b", sb)], rng)?;
    let (a, b) = ids!(store, "a", "b");
    Ok(primitive(
        name,
        store,
        Box::new(move |t| {
            let (x, y) = (t.param(a), t.param(b));
            let z = op(t, x, y)?;
            weigh(t, z, 2)
        }),
    ))
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = vec![
        binary("matmul", &[3, 4], &[4, 2], rng, |t, a, b| t.matmul(a, b))?,
        binary("add", &[3, 4], &[3, 4], rng, |t, a, b| t.add(a, b))?,
        binary("sub", &[3, 4], &[3, 4], rng, |t, a, b| t.sub(a, b))?,
        binary("mul", &[3, 4], &[3, 4], rng, |t, a, b| t.mul(a, b))?,
        binary("add_row", &[3, 4], &[4], rng, |t, a, b| t.add_row(a, b))?,
        binary("concat_cols", &[3, 2], &[3, 3], rng, |t, a, b| t.concat_cols(&[a, b]))?,
        unary("scale", &[3, 4], rng, |t, a| Ok(t.scale(a, -0.7)))?,
        unary("relu", &[3, 4], rng, |t, a| Ok(t.relu(a)))?,
        unary("elu1", &[3, 4], rng, |t, a| Ok(t.elu1(a)))?,
        unary("abs", &[3, 4], rng, |t, a| Ok(t.abs(a)))?,
        unary("transpose", &[3, 4], rng, |t, a| t.transpose(a))?,
        unary("sum_rows", &[3, 4], rng, |t, a| t.sum_rows(a))?,
        unary("sum", &[3, 4], rng, |t, a| Ok(t.sum(a)))?,
        unary("slice_cols", &[3, 4], rng, |t, a| t.slice_cols(a, 1, 3))?,
        unary("gather_rows", &[3, 4], rng, |t, a| t.gather_rows(a, &[2, 0, 2, 1]))?,
        unary("reshape", &[3, 4], rng, |t, a| t.reshape(a, &[2, 6]))?,
        unary("pick", &[3, 4], rng, |t, a| t.pick(a, &[0, 5, 5, 11]))?,
        unary("neighbor_max", &[5, 3], rng, |t, a| {
            t.neighbor_max(a, &[0, 1, 2, 1, 3, 4, 2, 0, 4, 3, 3, 1, 4, 2, 0], 3)
        })?,
    ];

    // Divisors kept positive and away from zero.
    let mut store = params(&[("a", &[3, 4])], rng)?;
    let d = Tensor::new(&[3, 1], (0..3).map(|_| rng.random_range(0.5..2.0)).collect())?;
    store.add("d", d)?;
    let (a, d) = ids!(store, "a", "d");
    cases.push(primitive(
        "div_rows",
        store,
        Box::new(move |t| {
            let (x, y) = (t.param(a), t.param(d));
            let z = t.div_rows(x, y)?;
            weigh(t, z, 3)
        }),
    ));

    let store = params(&[("x", &[4, 6]), ("gamma", &[6]), ("beta", &[6])], rng)?;
    let (x, g, b) = ids!(store, "x", "gamma", "beta");
    cases.push(primitive(
        "layer_norm",
        store,
        Box::new(move |t| {
            let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
            let y = t.layer_norm(xv, gv, bv, 1e-5)?;
            weigh(t, y, 4)
        }),
    ));

    let store = params(&[("q", &[5, 4]), ("k", &[5, 4]), ("v", &[5, 4])], rng)?;
    let (q, k, v) = ids!(store, "q", "k", "v");
    cases.push(primitive(
        "graph_attention",
        store,
        Box::new(move |t| {
            let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
            let (qv, kv) = (t.elu1(qv), t.elu1(kv));
            let table = [0, 1, 2, 1, 3, 4, 2, 0, 4, 3, 3, 1, 4, 2, 0];
            let y = t.graph_attention(qv, kv, vv, &table, 3, 2)?;
            weigh(t, y, 5)
        }),
    ));

    let store = params(&[("x", &[2, 5, 6]), ("kernel", &[3, 2, 3, 3]), ("bias", &[3])], rng)?;
    let (x, kn, b) = ids!(store, "x", "kernel", "bias");
    cases.push(primitive(
        "conv2d",
        store,
        Box::new(move |t| {
            let (xv, kv, bv) = (t.param(x), t.param(kn), t.param(b));
            let y = t.conv2d(xv, kv, bv)?;
            weigh(t, y, 6)
        }),
    ));

    let store = params(&[("logits", &[4, 5])], rng)?;
    let l = store.id("logits").expect("declared");
    let grid = GridSpec {
        x_extent: 0.75,
        y_extent: 0.6,
        cell: 0.3,
    };
    let target = crate::train::heatmap_target(&grid, 7, 1.0);
    cases.push(primitive(
        "focal_loss",
        store,
        Box::new(move |t| {
            let lv = t.param(l);
            t.focal_loss(lv, &target, 2.0, 4.0)
        }),
    ));
    Ok(cases)
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let coords: Vec<[f64; 3]> = (0..12)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();
    let cfg = AttentionConfig {
        heads: 2,
        layer_norm: true,
    };

    {
        let mut store = params(&[("tokens", &[12, 8]), ("kv", &[7, 6]), ("value_pos", &[7, 6])], rng)?;
        let attn = Attention::new(&mut store, "attn", 8, 6, cfg, rng)?;
        let own = Attention::new(&mut store, "self", 8, 8, cfg, rng)?;
        let pos = PosEmbed::new(&mut store, "pos", 8, rng)?;
        let (tok, kv, vp) = ids!(store, "tokens", "kv", "value_pos");
        let flat = flat.clone();
        cases.push(primitive(
            "linear_attention",
            store,
            Box::new(move |t| {
                let (x, y) = (t.param(tok), t.param(kv));
                let c = t.input_raw(&[12, 3], flat.clone());
                let p = pos.forward(t, c)?;
                let s = own.self_attention(t, x, p)?;
                let vpos = t.param(vp);
                let z = attn.cross_attention(t, s, y, vpos)?;
                weigh(t, z, 7)
            }),
        ));
    }

    {
        let mut store = params(&[("features", &[12, 6])], rng)?;
        let f = store.id("features").expect("declared");
        let edge = EdgeConv::new(&mut store, "edge", 6, 8, rng)?;
        let local = Attention::new(&mut store, "local", 8, 8, cfg, rng)?;
        let pos = PosEmbed::new(&mut store, "pos", 8, rng)?;
        let graph = knn_coords(&coords, 4)?;
        let fgraph = knn_features(store.get(f).tensor.data(), 6, 5)?;
        cases.push(primitive(
            "edge_conv+local_attention",
            store,
            Box::new(move |t| {
                let x = t.param(f);
                let y = edge.forward(t, x, &graph)?;
                let c = t.input_raw(&[12, 3], flat.clone());
                let p = pos.forward(t, c)?;
                let z = local.local_attention(t, y, p, &fgraph)?;
                weigh(t, z, 8)
            }),
        ));
    }

    {
        let grid = GridSpec {
            x_extent: 1.2,
            y_extent: 0.9,
            cell: 0.3,
        };
        let mut store = params(&[("features", &[12, 4])], rng)?;
        let f = store.id("features").expect("declared");
        let head = Head::new(&mut store, grid, 4, 4, rng)?;
        jitter(&mut store, rng);
        let pts: Vec<[f64; 3]> = coords.iter().map(|p| [p[0] * 1.1, p[1] * 0.8, p[2]]).collect();
        cases.push(primitive(
            "bev_scatter+head",
            store,
            Box::new(move |t| {
                let x = t.param(f);
                let bev = scatter_to_bev(t, x, &pts, grid)?;
                let out = head.forward(t, &bev)?;
                let maps = [out.heatmap, out.offset, out.z, out.yaw];
                let mut total = weigh(t, maps[0], 9)?;
                for (i, &m) in maps[1..].iter().enumerate() {
                    let w = weigh(t, m, 10 + i as u64)?;
                    total = t.add(total, w)?;
                }
                Ok(total)
            }),
        ));
    }
    Ok(cases)
}

/// Network settings for the end-to-end check: 16-point templates and
/// 32-point search areas.
pub fn tiny_config() -> Config {
    Config {
        template_points: 16,
        search_points: 32,
        neighbors: [4, 4, 2],
        channels: [8, 8, 16],
        feature_dim: 8,
        ego_k: 4,
        head_width: 8,
        ..Config::default()
    }
}

fn end_to_end_case(config: &Config, seed: u64, max_entries: usize) -> Result<Case> {
    let (net, mut store) = Network::new(config, seed)?;
    jitter(&mut store, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
    let spec = SynthSpec::random_car(seed, 4);
    let tracklet = generate(&spec, 4, "gradcheck")?;
    let samples = make_samples(&tracklet.annotated(), config, seed)?;
    let sample = samples
        .first()
        .ok_or_else(|| Error::Precondition("no training pair for the gradient check".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = resample_coords(&sample.template, config.template_points, &mut rng)?;
    let search = resample_coords(&sample.search, config.search_points, &mut rng)?;
    let gt = sample.gt;
    let loss = LossSpec::from_config(config);
    Ok(Case {
        name: format!(
            "loss (ego {}, {} iter.)",
            if config.ego { "on" } else { "off" },
            config.iterations
        ),
        store,
        f: Box::new(move |t| {
            let out = net.forward(t, &template, &search, seed)?;
            let l = compute_loss(t, &out.detection, &gt, &loss)?
                .ok_or_else(|| Error::Precondition("target outside the grid".into()))?;
            Ok(l.total)
        }),
        opts: GradCheckOptions {
            tol: END_TO_END_TOL,
            max_entries: Some(max_entries),
            seed,
            step: 1e-5,
            // Rounding in a forward pass of this depth leaves about 1e-10 of
            // absolute noise in each difference quotient.
            floor: 1e-5,
            ..GradCheckOptions::default()
        },
    })
}

/// Runs the suite. `max_entries` bounds the entries checked per parameter
/// tensor in the end-to-end cases.
pub fn run(seed: u64, max_entries: usize) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng)?;
    cases.extend(layer_cases(&mut rng)?);
    let full = tiny_config();
    cases.push(end_to_end_case(&full, seed, max_entries)?);
    cases.push(end_to_end_case(
        &Config {
            ego: false,
            iterations: 1,
            ..full
        },
        seed,
        max_entries,
    )?);
    cases
        .into_iter()
        .map(|c| {
            let report = finite_diff_check(&c.f, &c.store, &c.opts)?;
            Ok(SuiteResult { name: c.name, report })
        })
        .collect()
}
