//! Desk-scale experiments on synthetic tracklets: training, held-out
//! evaluation and the hyperparameter sweep table.

use crate::config::Config;
use crate::data::synth::{generate, SynthSpec};
use crate::data::Tracklet;
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::model::{Model, StageTimings};
use crate::tracker::{self, one_pass_eval, ConstantPredictor, ModelPredictor, Predictor};
use crate::train::{make_samples, train, Sample, TrainOptions, TrainOutcome};

/// Seeds of held-out tracklets start here, far from training seeds.
const HELD_OUT_BASE: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct ToyData {
    pub train: Vec<Tracklet>,
    pub held_out: Vec<Tracklet>,
}

/// Car-like tracklets from [`SynthSpec::random_car`]; the two sets never
/// share a generator seed.
pub fn toy_data(train: usize, held_out: usize, frames: usize, seed: u64) -> Result<ToyData> {
    let make = |base: u64, n: usize, tag: &str| {
        (0..n as u64)
            .map(|i| {
                let s = base.wrapping_add(seed.wrapping_mul(1000)).wrapping_add(i);
                generate(&SynthSpec::random_car(s, frames), frames, &format!("{tag}{i:03}"))
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(ToyData {
        train: make(0, train, "train")?,
        held_out: make(HELD_OUT_BASE, held_out, "held")?,
    })
}

pub fn samples_from(tracklets: &[Tracklet], config: &Config, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, t) in tracklets.iter().enumerate() {
        out.extend(make_samples(&t.annotated(), config, seed.wrapping_add(i as u64))?);
    }
    Ok(out)
}

/// Trains a fresh 32-bit model for `config.steps` steps.
pub fn train_model(config: &Config, tracklets: &[Tracklet], seed: u64) -> Result<(Model<f32>, TrainOutcome)> {
    let samples = samples_from(tracklets, config, seed)?;
    let mut model = Model::new(config, seed)?;
    let outcome = train(&mut model, &samples, &TrainOptions::from_config(config, seed), |_, _| {})?;
    Ok((model, outcome))
}

/// One-pass evaluation of a single-category set.
pub fn evaluate(pred: &mut dyn Predictor, tracklets: &[Tracklet], seed: u64) -> Result<EvalReport> {
    let mut reports = one_pass_eval(pred, tracklets, seed)?;
    Ok(reports.remove(0))
}

pub fn evaluate_model(model: &Model<f32>, tracklets: &[Tracklet], seed: u64) -> Result<EvalReport> {
    evaluate(&mut ModelPredictor::new(model, false), tracklets, seed)
}

pub fn evaluate_constant(tracklets: &[Tracklet]) -> Result<EvalReport> {
    evaluate(&mut ConstantPredictor::default(), tracklets, 0)
}

/// Stage timings of `repeats` tracker steps at `config` sizes and 32-bit
/// precision, on a synthetic car scene.
pub fn bench(config: &Config, repeats: usize, seed: u64) -> Result<Vec<StageTimings>> {
    let model: Model<f32> = Model::new(config, seed)?;
    let frames = repeats + 1;
    let t = generate(&SynthSpec::random_car(seed, frames), frames, "bench")?;
    let gt = t.frames[0].gt.expect("synthetic frames are annotated");
    let mut state = tracker::init(&t.frames[0].cloud, gt, seed)?;
    t.frames[1..]
        .iter()
        .map(|f| tracker::step(&model, &mut state, &f.cloud).map(|o| o.timings))
        .collect()
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub group: String,
    pub setting: String,
    pub success: f64,
    pub precision: f64,
}

/// Rows grouped under their parameter, as in an ablation table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<12}| {:<10}| {:>8} {:>10}\n", "", "Parameters", "Success", "Precision");
    s.push_str(&format!("{}\n", "-".repeat(45)));
    let mut last = "";
    for r in rows {
        if r.group != last && !last.is_empty() {
            s.push_str(&format!("{}\n", "-".repeat(45)));
        }
        let group = if r.group == last { "" } else { r.group.as_str() };
        s.push_str(&format!(
            "{:<12}| {:<10}| {:>8.1} {:>10.1}\n",
            group, r.setting, r.success, r.precision
        ));
        last = &r.group;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sets_are_disjoint_and_repeatable() {
        let a = toy_data(3, 2, 4, 0).unwrap();
        let b = toy_data(3, 2, 4, 0).unwrap();
        assert_eq!(a.train, b.train);
        for h in &a.held_out {
            assert!(a.train.iter().all(|t| t.frames[0].gt != h.frames[0].gt));
        }
    }

    #[test]
    fn bench_times_every_stage() {
        let t = bench(&Config::toy(), 2, 0).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|s| s.backbone_ms > 0.0 && s.head_ms > 0.0));
    }

    #[test]
    fn table_groups_rows() {
        let row = |g: &str, s: &str| SweepRow {
            group: g.into(),
            setting: s.into(),
            success: 50.0,
            precision: 60.0,
        };
        let t = sweep_table(&[row("Neighbors", "K=16"), row("Neighbors", "K=32"), row("Iterations", "iter.=1")]);
        assert_eq!(t.matches("Neighbors").count(), 1);
        assert!(t.contains("K=32"));
        assert_eq!(t.lines().count(), 6);
    }
}
