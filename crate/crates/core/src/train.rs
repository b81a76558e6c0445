//! Loss assembly, parameter updates and the toy training loop.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, OptimizerKind};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, resample_indices, Box7, PointCloud};
use crate::head::{DetectionOutput, GridSpec};
use crate::model::Model;
use crate::numeric::{ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub z: f64,
    pub yaw: f64,
}

impl LossSpec {
    pub fn from_config(c: &Config) -> Self {
        LossSpec {
            sigma: c.heatmap_sigma,
            alpha: c.focal_alpha,
            beta: c.focal_beta,
            heatmap: c.weight_heatmap,
            offset: c.weight_offset,
            z: c.weight_z,
            yaw: c.weight_yaw,
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::from_config(&Config::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub z: f64,
    pub yaw: f64,
}

pub struct Loss {
    pub total: Var,
    pub report: LossReport,
}

/// Gaussian bump with peak exactly 1 at `cell`; `sigma` is in cells.
pub fn heatmap_target(spec: &GridSpec, cell: usize, sigma: f64) -> Vec<f64> {
    let w = spec.width();
    let (r0, c0) = ((cell / w) as f64, (cell % w) as f64);
    (0..spec.num_cells())
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

fn l1_at<T: Scalar>(tape: &mut Tape<'_, T>, map: Var, flat: &[usize], target: &[f64]) -> Result<Var> {
    let got = tape.pick(map, flat)?;
    let want = tape.input_raw(&[target.len()], target.iter().map(|&v| T::from_f64c(v)).collect());
    let d = tape.sub(got, want)?;
    let d = tape.abs(d);
    Ok(tape.sum(d))
}

/// Focal heatmap loss plus L1 regression at the ground-truth cell. `gt` is
/// the target box in the search frame. Returns `None` when the target
/// center lies outside the grid.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    out: &DetectionOutput,
    gt: &Box7,
    spec: &LossSpec,
) -> Result<Option<Loss>> {
    let grid = out.spec;
    let Some(cell) = grid.cell_of(gt.x, gt.y) else {
        return Ok(None);
    };
    let hw = grid.num_cells();
    let target: Vec<T> = heatmap_target(&grid, cell, spec.sigma)
        .into_iter()
        .map(T::from_f64c)
        .collect();
    let heat = tape.focal_loss(out.heatmap, &target, T::from_f64c(spec.alpha), T::from_f64c(spec.beta))?;
    let (cx, cy) = grid.cell_center(cell);
    let offset = l1_at(tape, out.offset, &[cell, hw + cell], &[gt.x - cx, gt.y - cy])?;
    let z = l1_at(tape, out.z, &[cell], &[gt.z])?;
    let yaw = l1_at(tape, out.yaw, &[cell, hw + cell], &[gt.yaw.cos(), gt.yaw.sin()])?;
    let mut total = tape.scale(heat, T::from_f64c(spec.heatmap));
    for (term, w) in [(offset, spec.offset), (z, spec.z), (yaw, spec.yaw)] {
        let t = tape.scale(term, T::from_f64c(w));
        total = tape.add(total, t)?;
    }
    let report = LossReport {
        total: tape.scalar(total).as_f64(),
        heatmap: tape.scalar(heat).as_f64(),
        offset: tape.scalar(offset).as_f64(),
        z: tape.scalar(z).as_f64(),
        yaw: tape.scalar(yaw).as_f64(),
    };
    Ok(Some(Loss { total, report }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl StepRule {
    pub fn from_config(c: &Config) -> Self {
        match c.optimizer {
            OptimizerKind::Sgd => StepRule::Sgd { lr: c.learning_rate },
            OptimizerKind::Adam => StepRule::adam(c.learning_rate),
        }
    }

    pub fn adam(lr: f64) -> Self {
        StepRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over a parameter store.
pub struct Optimizer<T> {
    rule: StepRule,
    t: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(rule: StepRule, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        Optimizer {
            rule,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from `grads[i]` (aligned with the store order);
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) {
        self.t += 1;
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let w = p.tensor.data_mut();
            match self.rule {
                StepRule::Sgd { lr } => {
                    let lr = T::from_f64c(lr);
                    w.iter_mut().zip(g).for_each(|(w, &g)| *w = *w - lr * g);
                }
                StepRule::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let (b1, b2) = (T::from_f64c(beta1), T::from_f64c(beta2));
                    let step = T::from_f64c(lr * c2.sqrt() / c1);
                    let eps = T::from_f64c(eps * c2.sqrt());
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..w.len() {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        w[j] = w[j] - step * m[j] / (v[j].sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One training pair in canonical frames: the template in its own box
/// frame, the search area in the reference-box frame and the target box
/// expressed in that same frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub template: Vec<[f64; 3]>,
    pub search: Vec<[f64; 3]>,
    pub gt: Box7,
}

fn jittered<R: Rng + ?Sized>(b: &Box7, translation: f64, yaw: f64, rng: &mut R) -> Box7 {
    let mut u = |s: f64| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
    let (dx, dy, dz, dyaw) = (u(translation), u(translation), u(translation), u(yaw));
    Box7 {
        x: b.x + dx,
        y: b.y + dy,
        z: b.z + dz,
        yaw: normalize_angle(b.yaw + dyaw),
        ..*b
    }
}

/// The target box `b` seen from the frame of `reference`.
pub fn relative_box(b: &Box7, reference: &Box7) -> Box7 {
    let c = reference.to_local(b.center());
    Box7 {
        x: c[0],
        y: c[1],
        z: c[2],
        yaw: normalize_angle(b.yaw - reference.yaw),
        ..*b
    }
}

/// Builds training pairs from consecutive annotated frames. The reference
/// box is the previous ground truth jittered to mimic tracking error; the
/// template merges the first-frame and previous-frame object points.
pub fn make_samples(
    frames: &[(PointCloud, Box7)],
    config: &Config,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some((first_pc, first_box)) = frames.first() else {
        return Ok(Vec::new());
    };
    let crop = |pc: &PointCloud, b: &Box7| pc.filter(&crate::geometry::points_in_box(pc, b)).to_box_frame(b);
    let first = crop(first_pc, first_box);
    let mut out = Vec::new();
    for w in frames.windows(2) {
        let (prev_pc, prev_box) = (&w[0].0, &w[0].1);
        let (pc, gt) = (&w[1].0, &w[1].1);
        let template = first.union(&crop(prev_pc, prev_box));
        if template.is_empty() {
            continue;
        }
        let reference = jittered(prev_box, config.jitter_translation, config.jitter_yaw_deg.to_radians(), &mut rng);
        let search = crate::geometry::crop_search_area(pc, &reference, config.search_margin)?;
        if search.is_empty() {
            continue;
        }
        out.push(Sample {
            template: template.coords,
            search: search.to_box_frame(&reference).coords,
            gt: relative_box(gt, &reference),
        });
    }
    Ok(out)
}

pub(crate) fn resample_coords<R: Rng + ?Sized>(pts: &[[f64; 3]], n: usize, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    Ok(resample_indices(pts.len(), n, rng)?.into_iter().map(|i| pts[i]).collect())
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub rule: StepRule,
    pub loss: LossSpec,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(c: &Config, seed: u64) -> Self {
        TrainOptions {
            steps: c.steps,
            batch_size: c.batch_size,
            rule: StepRule::from_config(c),
            loss: LossSpec::from_config(c),
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Samples whose target fell outside the grid.
    pub skipped: usize,
}

/// Loss and parameter gradients of one sample; `None` if skipped.
pub fn sample_gradients<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    sample: &Sample,
    spec: &LossSpec,
    rng: &mut R,
) -> Result<Option<(LossReport, Vec<Option<Vec<T>>>)>> {
    let cfg = &model.config;
    let template = resample_coords(&sample.template, cfg.template_points, rng)?;
    let search = resample_coords(&sample.search, cfg.search_points, rng)?;
    let seed = rng.next_u64();
    let mut tape = Tape::new(&model.params);
    let out = model.net.forward(&mut tape, &template, &search, seed)?;
    let Some(loss) = compute_loss(&mut tape, &out.detection, &sample.gt, spec)? else {
        return Ok(None);
    };
    if !loss.report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss terms {:?}", loss.report)));
    }
    let grads = tape.backward(loss.total);
    let ids: Vec<ParamId> = model.params.ids().collect();
    let g = ids.iter().map(|&id| grads.param(id).map(<[T]>::to_vec)).collect();
    Ok(Some((loss.report, g)))
}

/// Minibatch training with a fixed seed; aborts on a non-finite loss.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    opts: &TrainOptions,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Optimizer::new(opts.rule, &model.params);
    let mut outcome = TrainOutcome::default();
    for step in 0..opts.steps {
        let mut acc: Vec<Option<Vec<T>>> = vec![None; model.params.len()];
        let mut total = 0.0;
        let mut used = 0usize;
        for _ in 0..opts.batch_size {
            let sample = samples.choose(&mut rng).expect("non-empty");
            let Some((report, grads)) = sample_gradients(model, sample, &opts.loss, &mut rng)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                    other => other,
                })?
            else {
                outcome.skipped += 1;
                continue;
            };
            total += report.total;
            used += 1;
            for (a, g) in acc.iter_mut().zip(grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + y),
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
        }
        if used == 0 {
            outcome.losses.push(f64::NAN);
            continue;
        }
        let inv = T::from_f64c(1.0 / used as f64);
        acc.iter_mut().flatten().flatten().for_each(|x| *x = *x * inv);
        opt.step(&mut model.params, &acc);
        let mean = total / used as f64;
        outcome.losses.push(mean);
        on_step(step, mean);
    }
    Ok(outcome)
}

/// Two-column `step loss` text.
pub fn format_loss_curve(losses: &[f64]) -> String {
    losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i} {l}\n"))
        .collect()
}
