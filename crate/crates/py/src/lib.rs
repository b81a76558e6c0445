//! Python bindings: configuration, boxes, synthetic and KITTI tracklets,
//! training, tracking, evaluation and the check suite.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};

use siamtrack_core as st;
use st::config::Config;
use st::data::{Split, Tracklet};
use st::geometry::{Box7, PointCloud};
use st::metrics::EvalReport;
use st::model::Model;
use st::tracker::{ConstantPredictor, ModelPredictor, OraclePredictor, Predictor, TrackerState};

fn py_err(e: st::Error) -> PyErr {
    match e {
        st::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        st::Error::Parameter(_)
        | st::Error::Config(_)
        | st::Error::UnknownConfigKeys(_)
        | st::Error::Dimension { .. }
        | st::Error::Precondition(_)
        | st::Error::EmptyCloud
        | st::Error::Init(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for st::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn cloud(points: Vec<[f64; 3]>) -> PyResult<PointCloud> {
    PointCloud::new(points).py()
}

/// Model and training configuration.
#[pyclass(name = "Config", module = "siamtrack", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyConfig(Config);

fn toml_to_py(py: Python<'_>, v: &toml::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        toml::Value::Boolean(b) => PyBool::new(py, *b).to_owned().into_any().unbind(),
        toml::Value::Integer(i) => i.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Float(f) => f.into_pyobject(py)?.into_any().unbind(),
        toml::Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Array(a) => {
            let items = a.iter().map(|x| toml_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        other => return Err(PyValueError::new_err(format!("unsupported value {other}"))),
    })
}

fn py_to_toml(v: &Bound<'_, PyAny>) -> PyResult<toml::Value> {
    if v.is_instance_of::<PyBool>() {
        Ok(toml::Value::Boolean(v.extract()?))
    } else if v.is_instance_of::<PyInt>() {
        Ok(toml::Value::Integer(v.extract()?))
    } else if v.is_instance_of::<PyFloat>() {
        Ok(toml::Value::Float(v.extract()?))
    } else if v.is_instance_of::<PyString>() {
        Ok(toml::Value::String(v.extract()?))
    } else if let Ok(items) = v.try_iter() {
        Ok(toml::Value::Array(items.map(|x| py_to_toml(&x?)).collect::<PyResult<_>>()?))
    } else {
        Err(PyValueError::new_err(format!("unsupported value {v}")))
    }
}

impl PyConfig {
    fn table(&self) -> PyResult<toml::Table> {
        toml::from_str(&self.0.to_toml()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig(Config::default())
    }

    #[staticmethod]
    fn published() -> Self {
        PyConfig(Config::published())
    }

    #[staticmethod]
    fn toy() -> Self {
        PyConfig(Config::toy())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig(Config::parse(text, "<string>".as_ref()).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig(Config::load(&path).py()?))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    /// A copy with some keys replaced, e.g. `cfg.replace(steps=100, ego=False)`.
    #[pyo3(signature = (**values))]
    fn replace(&self, values: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut table = self.table()?;
        if let Some(values) = values {
            for (k, v) in values.iter() {
                table.insert(k.extract()?, py_to_toml(&v)?);
            }
        }
        let text = toml::to_string(&table).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Self::from_toml(&text)
    }

    fn __getitem__(&self, py: Python<'_>, key: &str) -> PyResult<Py<PyAny>> {
        let table = self.table()?;
        let v = table
            .get(key)
            .ok_or_else(|| pyo3::exceptions::PyKeyError::new_err(key.to_string()))?;
        toml_to_py(py, v)
    }

    fn keys(&self) -> PyResult<Vec<String>> {
        Ok(self.table()?.keys().cloned().collect())
    }

    fn __repr__(&self) -> String {
        format!("Config(\n{})", self.0.to_toml())
    }
}

/// Oriented 3D box: center, size `(w, l, h)` with `w` along the heading,
/// and yaw about the vertical axis.
#[pyclass(name = "Box7", module = "siamtrack", frozen, eq, skip_from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyBox(Box7);

#[pymethods]
impl PyBox {
    #[new]
    fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> PyResult<Self> {
        Ok(PyBox(Box7::new(center, size, yaw).py()?))
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center()
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.0.size()
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw
    }

    fn iou(&self, other: &PyBox) -> f64 {
        st::geometry::iou3d(&self.0, &other.0)
    }

    fn center_distance(&self, other: &PyBox) -> f64 {
        self.0.center_distance(&other.0)
    }

    fn contains(&self, point: [f64; 3]) -> bool {
        self.0.contains(point)
    }

    fn __repr__(&self) -> String {
        let b = &self.0;
        format!(
            "Box7(center=[{:.3}, {:.3}, {:.3}], size=[{:.3}, {:.3}, {:.3}], yaw={:.4})",
            b.x, b.y, b.z, b.w, b.l, b.h, b.yaw
        )
    }
}

#[pyclass(name = "Tracklet", module = "siamtrack", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTracklet(Tracklet);

#[pymethods]
impl PyTracklet {
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn category(&self) -> String {
        self.0.category.clone()
    }

    fn __len__(&self) -> usize {
        self.0.frames.len()
    }

    /// `(points, box or None)` of frame `i`.
    fn frame(&self, i: usize) -> PyResult<(Vec<[f64; 3]>, Option<PyBox>)> {
        let f = self
            .0
            .frames
            .get(i)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))?;
        Ok((f.cloud.coords.clone(), f.gt.map(PyBox)))
    }

    fn __repr__(&self) -> String {
        format!("Tracklet(id={:?}, category={:?}, frames={})", self.0.id, self.0.category, self.0.frames.len())
    }
}

fn owned(ts: &[PyRef<'_, PyTracklet>]) -> Vec<Tracklet> {
    ts.iter().map(|t| t.0.clone()).collect()
}

/// Network parameters at 32-bit precision.
#[pyclass(name = "Model", module = "siamtrack", frozen)]
struct PyModel(Arc<Model<f32>>);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel(Arc::new(Model::new(&config.0, seed).py()?)))
    }

    #[staticmethod]
    fn load(config: &PyConfig, path: PathBuf) -> PyResult<Self> {
        Ok(PyModel(Arc::new(Model::load(&config.0, &path).py()?)))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig(self.0.config.clone())
    }

    fn parameter_count(&self) -> usize {
        self.0.params.iter().map(|(_, p)| p.tensor.data().len()).sum()
    }

    /// Trains a copy for `config.steps` steps; returns it with the loss curve.
    #[pyo3(signature = (tracklets, seed = 0))]
    fn trained(&self, tracklets: Vec<PyRef<'_, PyTracklet>>, seed: u64) -> PyResult<(PyModel, Vec<f64>)> {
        let data = owned(&tracklets);
        let cfg = &self.0.config;
        let samples = st::experiment::samples_from(&data, cfg, seed).py()?;
        let mut model = (*self.0).clone();
        let opts = st::train::TrainOptions::from_config(cfg, seed);
        let outcome = st::train::train(&mut model, &samples, &opts, |_, _| {}).py()?;
        Ok((PyModel(Arc::new(model)), outcome.losses))
    }
}

/// Frame-by-frame tracker around one model.
#[pyclass(name = "Tracker", module = "siamtrack")]
struct PyTracker {
    model: Arc<Model<f32>>,
    state: TrackerState,
}

#[pymethods]
impl PyTracker {
    #[new]
    #[pyo3(signature = (model, points, first_box, seed = 0))]
    fn new(model: &PyModel, points: Vec<[f64; 3]>, first_box: &PyBox, seed: u64) -> PyResult<Self> {
        let state = st::tracker::init(&cloud(points)?, first_box.0, seed).py()?;
        Ok(PyTracker {
            model: model.0.clone(),
            state,
        })
    }

    /// Predicted box for the next frame and whether the previous box was
    /// kept for lack of evidence.
    fn step(&mut self, points: Vec<[f64; 3]>) -> PyResult<(PyBox, bool)> {
        let out = st::tracker::step(&self.model, &mut self.state, &cloud(points)?).py()?;
        Ok((PyBox(out.pred), out.degraded))
    }
}

#[pyfunction]
fn iou3d(a: &PyBox, b: &PyBox) -> f64 {
    st::geometry::iou3d(&a.0, &b.0)
}

/// Area under the IoU success curve, in percent.
#[pyfunction]
fn success(ious: Vec<f64>) -> PyResult<f64> {
    st::metrics::success(&ious).py()
}

/// Area under the center-distance precision curve on `[0, 2]` m, in percent.
#[pyfunction]
fn precision(distances: Vec<f64>) -> PyResult<f64> {
    st::metrics::precision(&distances).py()
}

#[pyfunction]
#[pyo3(signature = (count, frames = 10, seed = 0))]
fn synthetic_tracklets(count: usize, frames: usize, seed: u64) -> PyResult<Vec<PyTracklet>> {
    let data = st::experiment::toy_data(count, 0, frames, seed).py()?;
    Ok(data.train.into_iter().map(PyTracklet).collect())
}

#[pyfunction]
#[pyo3(signature = (root, split = "test", category = "Car"))]
fn load_tracklets(root: PathBuf, split: &str, category: &str) -> PyResult<Vec<PyTracklet>> {
    let split = Split::parse(split).py()?;
    let ts = st::data::load_tracklets(&root, split, category).py()?;
    Ok(ts.into_iter().map(PyTracklet).collect())
}

#[pyfunction]
fn write_tracklets(root: PathBuf, tracklets: Vec<PyRef<'_, PyTracklet>>) -> PyResult<()> {
    st::data::write_tracklets(&root, &owned(&tracklets)).py()
}

/// One-pass evaluation. `predictor` is a `Model` or one of the baselines
/// `"constant"` and `"oracle"`. Returns `{category: (success, precision)}`.
#[pyfunction]
#[pyo3(signature = (predictor, tracklets, seed = 0))]
fn evaluate(
    predictor: &Bound<'_, PyAny>,
    tracklets: Vec<PyRef<'_, PyTracklet>>,
    seed: u64,
) -> PyResult<Vec<(String, f64, f64)>> {
    let data = owned(&tracklets);
    let run = |p: &mut dyn Predictor| st::tracker::one_pass_eval(p, &data, seed).py();
    let reports: Vec<EvalReport> = if let Ok(model) = predictor.cast::<PyModel>() {
        let model = model.get().0.clone();
        run(&mut ModelPredictor::new(&model, false))?
    } else {
        match predictor.extract::<String>()?.as_str() {
            "constant" => run(&mut ConstantPredictor::default())?,
            "oracle" => run(&mut OraclePredictor)?,
            other => return Err(PyValueError::new_err(format!("unknown predictor {other:?}"))),
        }
    };
    Ok(reports.into_iter().map(|r| (r.category, r.success, r.precision)).collect())
}

/// Finite-difference checks: `(name, max error, tolerance, passed)` per case.
#[pyfunction]
#[pyo3(signature = (seed = 0, entries = 8))]
fn gradcheck(seed: u64, entries: usize) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let results = st::gradsuite::run(seed, entries).py()?;
    Ok(results
        .into_iter()
        .map(|r| (r.name.to_string(), r.report.max_error(), r.report.tol, r.report.passed()))
        .collect())
}

/// Per-stage forward timings in milliseconds:
/// `(backbone, correlation, head)` per repeat.
#[pyfunction]
#[pyo3(name = "bench", signature = (config, repeats = 3, seed = 0))]
fn bench_stages(config: &PyConfig, repeats: usize, seed: u64) -> PyResult<Vec<(f64, f64, f64)>> {
    let ts = st::experiment::bench(&config.0, repeats, seed).py()?;
    Ok(ts.iter().map(|t| (t.backbone_ms, t.correlation_ms, t.head_ms)).collect())
}

#[pymodule(name = "siamtrack")]
fn siamtrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyBox>()?;
    m.add_class::<PyTracklet>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTracker>()?;
    m.add_function(wrap_pyfunction!(iou3d, m)?)?;
    m.add_function(wrap_pyfunction!(success, m)?)?;
    m.add_function(wrap_pyfunction!(precision, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_tracklets, m)?)?;
    m.add_function(wrap_pyfunction!(load_tracklets, m)?)?;
    m.add_function(wrap_pyfunction!(write_tracklets, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(bench_stages, m)?)?;
    Ok(())
}
