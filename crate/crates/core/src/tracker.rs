//! Frame-by-frame single object tracking and one-pass evaluation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Frame, Tracklet};
use crate::error::{Error, Result};
use crate::geometry::{crop_search_area, points_in_box, Box7, PointCloud};
use crate::head::{decode_box, Detection};
use crate::metrics::{EvalReport, FrameRecord};
use crate::model::{Model, StageTimings};
use crate::numeric::{Scalar, Tape};
use crate::train::resample_coords;

/// Object points of `frame` inside `b`, in the frame of `b`.
fn box_crop(frame: &PointCloud, b: &Box7) -> PointCloud {
    frame.filter(&points_in_box(frame, b)).to_box_frame(b)
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub first_box: Box7,
    pub prev_box: Box7,
    /// First-frame object points in the first box frame.
    pub first_template: PointCloud,
    /// Current template before resampling.
    pub template: PointCloud,
    pub frame: usize,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub pred: Box7,
    /// Empty search area or no occupied grid cell; the previous box was kept.
    pub degraded: bool,
    pub detection: Option<Detection>,
    pub timings: StageTimings,
}

pub fn init(frame0: &PointCloud, gt: Box7, seed: u64) -> Result<TrackerState> {
    if !gt.is_valid() {
        return Err(Error::Init(format!("invalid first box {gt:?}")));
    }
    let template = box_crop(frame0, &gt);
    if template.is_empty() {
        return Err(Error::Init("first box contains no points".into()));
    }
    Ok(TrackerState {
        first_box: gt,
        prev_box: gt,
        first_template: template.clone(),
        template,
        frame: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

/// Replaces the template by the first-frame crop merged with the crop of the
/// latest prediction.
pub fn update_template(state: &mut TrackerState, frame: &PointCloud, predicted: &Box7) {
    state.template = state.first_template.union(&box_crop(frame, predicted));
}

pub fn step<T: Scalar>(model: &Model<T>, state: &mut TrackerState, frame: &PointCloud) -> Result<StepOutput> {
    let cfg = &model.config;
    let prev = state.prev_box;
    state.frame += 1;
    let crop = crop_search_area(frame, &prev, cfg.search_margin)?;
    let mut out = StepOutput {
        pred: prev,
        degraded: true,
        detection: None,
        timings: StageTimings::default(),
    };
    if !crop.is_empty() {
        let search = resample_coords(&crop.to_box_frame(&prev).coords, cfg.search_points, &mut state.rng)?;
        let template = resample_coords(&state.template.coords, cfg.template_points, &mut state.rng)?;
        let seed = state.rng.next_u64();
        let mut tape = Tape::inference(&model.params);
        let fwd = model.net.forward(&mut tape, &template, &search, seed)?;
        out.timings = fwd.timings;
        if let Some(det) = fwd.detection.detect(&tape) {
            out.pred = decode_box(&det, &prev);
            out.detection = Some(det);
            out.degraded = false;
        }
    }
    update_template(state, frame, &out.pred);
    state.prev_box = out.pred;
    Ok(out)
}

/// Anything that produces one box per frame after seeing the first.
pub trait Predictor {
    fn start(&mut self, first: &Frame, gt: Box7, seed: u64) -> Result<()>;
    /// Returns the predicted box, a degraded flag and optional timings.
    fn predict(&mut self, frame: &Frame) -> Result<(Box7, bool, Option<StageTimings>)>;
}

pub struct ModelPredictor<'m, T: Scalar> {
    pub model: &'m Model<T>,
    pub record_timing: bool,
    state: Option<TrackerState>,
}

impl<'m, T: Scalar> ModelPredictor<'m, T> {
    pub fn new(model: &'m Model<T>, record_timing: bool) -> Self {
        ModelPredictor {
            model,
            record_timing,
            state: None,
        }
    }
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn start(&mut self, first: &Frame, gt: Box7, seed: u64) -> Result<()> {
        self.state = Some(init(&first.cloud, gt, seed)?);
        Ok(())
    }

    fn predict(&mut self, frame: &Frame) -> Result<(Box7, bool, Option<StageTimings>)> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Precondition("tracker not initialized".into()))?;
        let out = step(self.model, state, &frame.cloud)?;
        Ok((out.pred, out.degraded, self.record_timing.then_some(out.timings)))
    }
}

/// Repeats the first box forever.
#[derive(Default)]
pub struct ConstantPredictor {
    first: Option<Box7>,
}

impl Predictor for ConstantPredictor {
    fn start(&mut self, _: &Frame, gt: Box7, _: u64) -> Result<()> {
        self.first = Some(gt);
        Ok(())
    }

    fn predict(&mut self, _: &Frame) -> Result<(Box7, bool, Option<StageTimings>)> {
        let b = self.first.ok_or_else(|| Error::Precondition("predictor not started".into()))?;
        Ok((b, false, None))
    }
}

/// Emits the annotation of each frame.
#[derive(Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn start(&mut self, _: &Frame, _: Box7, _: u64) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, frame: &Frame) -> Result<(Box7, bool, Option<StageTimings>)> {
        let gt = frame
            .gt
            .ok_or_else(|| Error::Precondition("oracle needs a ground-truth box".into()))?;
        Ok((gt, false, None))
    }
}

/// Initializes from the first annotation and predicts every later frame.
/// Frame 0 is reported with its ground-truth box.
pub fn run_tracklet(pred: &mut dyn Predictor, tracklet: &Tracklet, seed: u64) -> Result<Vec<FrameRecord>> {
    let first = tracklet
        .frames
        .first()
        .ok_or_else(|| Error::Precondition(format!("tracklet {} has no frames", tracklet.id)))?;
    let gt0 = first
        .gt
        .ok_or_else(|| Error::Precondition(format!("tracklet {} lacks a first-frame box", tracklet.id)))?;
    pred.start(first, gt0, seed)?;
    let record = |frame: usize, pred: Box7, gt: Option<Box7>, degraded, timings| FrameRecord {
        tracklet: tracklet.id.clone(),
        category: tracklet.category.clone(),
        frame,
        pred,
        gt,
        degraded,
        timings,
    };
    let mut out = vec![record(0, gt0, Some(gt0), false, None)];
    for (i, f) in tracklet.frames.iter().enumerate().skip(1) {
        let (b, degraded, timings) = pred.predict(f)?;
        out.push(record(i, b, f.gt, degraded, timings));
    }
    Ok(out)
}

/// Per-tracklet seed derived from a run seed.
pub fn tracklet_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn track_all(pred: &mut dyn Predictor, tracklets: &[Tracklet], seed: u64) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for (i, t) in tracklets.iter().enumerate() {
        out.extend(run_tracklet(pred, t, tracklet_seed(seed, i))?);
    }
    Ok(out)
}

/// Tracks every tracklet once and scores all frames per category.
pub fn one_pass_eval(pred: &mut dyn Predictor, tracklets: &[Tracklet], seed: u64) -> Result<Vec<EvalReport>> {
    EvalReport::by_category(&track_all(pred, tracklets, seed)?)
}
