//! Python bindings. Points cross the boundary as `(x, y)` tuples in pixels,
//! images as flat row-major `float` lists with explicit width and height.

use std::collections::BTreeMap;
use std::path::PathBuf;

use caliper_core::augmentation::{augment as core_augment, AugmentConfig, AugmentFlags};
use caliper_core::checkpoint::Checkpoint;
use caliper_core::dataset::{load_manifest, GroundTruthPolicy, Split};
use caliper_core::decoding::{decode_landmark, DEFAULT_THRESHOLD};
use caliper_core::encoding::{encode_constraints as core_constraints, encode_heatmaps as core_heatmaps, DEFAULT_LINE_WIDTH, DEFAULT_SIGMA};
use caliper_core::evaluation::{evaluate as core_evaluate, icc_2k as core_icc, EvalOptions};
use caliper_core::phantom::{generate, generate_dataset as core_dataset, DatasetConfig, PhantomSpec, RaterSimulation};
use caliper_core::pipeline::{load_predictions, predict_entries, prediction_sets, save_predictions, select};
use caliper_core::training::{infer as core_infer, train as core_train, TrainConfig, TrainingData};
use caliper_core::{CaliperPoint, LandmarkSet, PixelSpacing, PlaneConfig, Raster};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;

create_exception!(caliper, CaliperError, PyException, "Raised for every error reported by the core library.");

type Points = BTreeMap<String, (f64, f64)>;

fn err(e: caliper_core::CaliperError) -> PyErr {
    CaliperError::new_err(e.to_string())
}

fn json_value<'py>(py: Python<'py>, text: String) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    Ok(json_value(py, text)?.unbind())
}

fn to_tuples(points: &BTreeMap<String, CaliperPoint>) -> Points {
    points.iter().map(|(k, p)| (k.clone(), (p.x, p.y))).collect()
}

fn from_tuples(points: Points) -> BTreeMap<String, CaliperPoint> {
    points.into_iter().map(|(k, (x, y))| (k, CaliperPoint::new(x, y))).collect()
}

fn raster(image: Vec<f32>, width: usize, height: usize) -> PyResult<Raster> {
    Raster::from_vec(width, height, image).map_err(err)
}

fn spacing(x: f64, y: Option<f64>) -> PyResult<PixelSpacing> {
    PixelSpacing::new(x, y.unwrap_or(x)).map_err(err)
}

#[pyclass(name = "PlaneConfig", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyPlane(PlaneConfig);

#[pymethods]
impl PyPlane {
    /// Transcerebellar plane: TCD, CMS and NFT.
    #[staticmethod]
    fn tc() -> Self {
        PyPlane(PlaneConfig::tc())
    }

    /// Transventricular plane: AW.
    #[staticmethod]
    fn tv() -> Self {
        PyPlane(PlaneConfig::tv())
    }

    #[staticmethod]
    fn by_name(name: &str) -> PyResult<Self> {
        PlaneConfig::by_name(name).map(PyPlane).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name().to_string()
    }

    #[getter]
    fn landmark_names(&self) -> Vec<String> {
        self.0.landmark_names().to_vec()
    }

    #[getter]
    fn biometry_names(&self) -> Vec<String> {
        self.0.biometry_names()
    }

    /// `(biometry, landmark_a, landmark_b)` per measurement.
    fn pairs(&self) -> Vec<(String, String, String)> {
        self.0
            .biometry_pairs()
            .iter()
            .map(|p| (p.name.clone(), p.landmark_a.clone(), p.landmark_b.clone()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("PlaneConfig({})", self.0.name())
    }
}

#[pyclass(name = "LandmarkSet", frozen, from_py_object)]
#[derive(Clone)]
pub struct PySet(LandmarkSet);

#[pymethods]
impl PySet {
    /// A complete set: every landmark of the plane, no others.
    #[new]
    fn new(plane: &PyPlane, points: Points) -> PyResult<Self> {
        LandmarkSet::new(plane.0.clone(), from_tuples(points)).map(PySet).map_err(err)
    }

    #[getter]
    fn plane(&self) -> PyPlane {
        PyPlane(self.0.plane().clone())
    }

    fn points(&self) -> Points {
        to_tuples(self.0.points())
    }

    /// Biometry in millimetres.
    #[pyo3(signature = (mm_per_px_x, mm_per_px_y=None))]
    fn biometry(&self, mm_per_px_x: f64, mm_per_px_y: Option<f64>) -> PyResult<BTreeMap<String, f64>> {
        caliper_core::compute_biometry(&self.0, spacing(mm_per_px_x, mm_per_px_y)?).map_err(err)
    }

    fn check_bounds(&self, width: usize, height: usize) -> PyResult<()> {
        self.0.check_bounds(width, height).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("LandmarkSet({}, {:?})", self.0.plane().name(), self.points())
    }
}

#[pyclass(name = "Checkpoint", frozen)]
pub struct PyCheckpoint(Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(PyCheckpoint).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn plane(&self) -> PyPlane {
        PyPlane(self.0.plane().clone())
    }

    /// `(height, width)` the network runs at.
    #[getter]
    fn input_size(&self) -> (usize, usize) {
        let c = self.0.model.config();
        (c.input_height, c.input_width)
    }

    /// Header as a dict: plane, backbone, training configuration and history.
    fn header(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_json(py, &self.0.header)
    }

    /// Calipers, confidences and biometry for one image of any size.
    #[pyo3(signature = (image, width, height, mm_per_px=0.25))]
    fn infer(&self, py: Python<'_>, image: Vec<f32>, width: usize, height: usize, mm_per_px: f64) -> PyResult<Py<PyAny>> {
        let img = raster(image, width, height)?;
        let sp = spacing(mm_per_px, None)?;
        let plane = self.0.plane().clone();
        let out = py.detach(|| core_infer(&self.0, &img, sp, &plane)).map_err(err)?;
        to_json(py, &out)
    }

    /// Same as `infer` for a grayscale PNG on disk.
    #[pyo3(signature = (path, mm_per_px=0.25))]
    fn infer_png(&self, py: Python<'_>, path: PathBuf, mm_per_px: f64) -> PyResult<Py<PyAny>> {
        let img = Raster::load_png(&path).map_err(err)?;
        let sp = spacing(mm_per_px, None)?;
        let plane = self.0.plane().clone();
        let out = py.detach(|| core_infer(&self.0, &img, sp, &plane)).map_err(err)?;
        to_json(py, &out)
    }
}

/// One peak-normalized Gaussian channel per landmark, each a flat `height * width` list.
#[pyfunction]
#[pyo3(signature = (set, height, width, sigma=DEFAULT_SIGMA))]
fn encode_heatmaps(set: &PySet, height: usize, width: usize, sigma: f64) -> PyResult<Vec<Vec<f32>>> {
    let stack = core_heatmaps(&set.0, height, width, sigma).map_err(err)?;
    Ok(stack.channels.into_iter().map(Raster::into_vec).collect())
}

/// One binary line mask per biometry, each a flat `height * width` list.
#[pyfunction]
#[pyo3(signature = (set, height, width, line_width=DEFAULT_LINE_WIDTH))]
fn encode_constraints(set: &PySet, height: usize, width: usize, line_width: f64) -> PyResult<Vec<Vec<f32>>> {
    let stack = core_constraints(&set.0, height, width, line_width).map_err(err)?;
    Ok(stack.channels.into_iter().map(Raster::into_vec).collect())
}

/// Sub-pixel landmark position from one heatmap channel.
#[pyfunction]
#[pyo3(signature = (heatmap, width, height, threshold=DEFAULT_THRESHOLD))]
fn decode_heatmap(heatmap: Vec<f32>, width: usize, height: usize, threshold: f64) -> PyResult<(f64, f64)> {
    let p = decode_landmark(&raster(heatmap, width, height)?, threshold).map_err(err)?;
    Ok((p.x, p.y))
}

/// ICC(A,k) of a `subjects x raters` table.
#[pyfunction]
fn icc_2k(table: Vec<Vec<f64>>) -> PyResult<f64> {
    core_icc(&table).map_err(err)
}

/// A random phantom: `{"image", "width", "height", "landmarks", "mm_per_px"}`.
#[pyfunction]
#[pyo3(signature = (plane="TC", seed=0, width=288, height=160))]
fn generate_phantom(py: Python<'_>, plane: &str, seed: u64, width: usize, height: usize) -> PyResult<Py<PyAny>> {
    let plane = PlaneConfig::by_name(plane).map_err(err)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = PhantomSpec::random(&plane, width, height, &mut rng).map_err(err)?;
    let ph = generate(&spec).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("width", ph.image.width())?;
    out.set_item("height", ph.image.height())?;
    out.set_item("mm_per_px", ph.spacing.mm_per_px_x())?;
    out.set_item("landmarks", to_tuples(ph.landmarks.points()))?;
    out.set_item("image", ph.image.into_vec())?;
    Ok(out.into_any().unbind())
}

/// Writes `n` phantoms (plus `test` held-out ones) and a manifest under `out`;
/// returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, n, seed, plane="TC", test=0, raters=0))]
fn generate_dataset(out: PathBuf, n: usize, seed: u64, plane: &str, test: usize, raters: usize) -> PyResult<PathBuf> {
    let config = DatasetConfig {
        plane: plane.to_string(),
        test_count: test,
        raters: (raters > 0).then_some(RaterSimulation {
            raters,
            bias_sd_px: 1.5,
            pass_sd_px: 1.0,
        }),
        ..DatasetConfig::default()
    };
    core_dataset(n, seed, &config, &out).map_err(err)?;
    Ok(out.join("manifest.jsonl"))
}

/// One augmentation draw; returns `(image, landmarks, rejected)`.
#[pyfunction]
#[pyo3(signature = (image, width, height, set, seed, geometric=true, intensity=true))]
#[allow(clippy::too_many_arguments)]
fn augment(
    image: Vec<f32>,
    width: usize,
    height: usize,
    set: &PySet,
    seed: u64,
    geometric: bool,
    intensity: bool,
) -> PyResult<(Vec<f32>, Points, bool)> {
    let flags = match (geometric, intensity) {
        (true, true) => AugmentFlags::all(),
        (true, false) => AugmentFlags::geometric_only(),
        (false, true) => AugmentFlags::intensity_only(),
        (false, false) => AugmentFlags::none(),
    };
    let cfg = AugmentConfig::default().scaled_for_width(width);
    let out = core_augment(&raster(image, width, height)?, &set.0, flags, seed, &cfg).map_err(err)?;
    Ok((out.image.into_vec(), to_tuples(out.landmarks.points()), out.rejected))
}

/// Trains on a manifest and writes the best checkpoint to `out`; returns the epoch history.
/// `config` is a JSON object overriding any training defaults.
#[pyfunction]
#[pyo3(signature = (manifest, out, config=None))]
fn train(py: Python<'_>, manifest: PathBuf, out: PathBuf, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg = match config {
        Some(text) => TrainConfig::default().overlay_json(text).map_err(err)?,
        None => TrainConfig::default(),
    };
    let history = py
        .detach(|| -> caliper_core::Result<_> {
            let m = load_manifest(&manifest)?.manifest;
            let data = TrainingData::from_manifest(&m, &cfg)?;
            let outcome = core_train(&data, &cfg, |_| {})?;
            outcome.best.save(&out)?;
            Ok(outcome.history)
        })
        .map_err(err)?;
    to_json(py, &history)
}

fn parse_split(split: Option<&str>) -> PyResult<Option<Split>> {
    split
        .map(|s| match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(CaliperError::new_err(format!("unknown split {other}"))),
        })
        .transpose()
}

/// Predicts every selected manifest entry into a predictions file; returns the record count.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, out, split=None))]
fn predict(py: Python<'_>, checkpoint: &PyCheckpoint, manifest: PathBuf, out: PathBuf, split: Option<&str>) -> PyResult<usize> {
    let split = parse_split(split)?;
    py.detach(|| -> caliper_core::Result<usize> {
        let m = load_manifest(&manifest)?.manifest;
        let entries = select(&m, split);
        let records = predict_entries(&checkpoint.0, &m, &entries)?;
        save_predictions(&records, &out)?;
        Ok(records.len())
    })
    .map_err(err)
}

/// Scores a predictions file against the manifest; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (predictions, manifest, policy="per_rater_mean", split=None))]
fn evaluate(py: Python<'_>, predictions: PathBuf, manifest: PathBuf, policy: &str, split: Option<&str>) -> PyResult<Py<PyAny>> {
    let policy: GroundTruthPolicy = policy.parse().map_err(err)?;
    let split = parse_split(split)?;
    let report = (|| -> caliper_core::Result<_> {
        let m = load_manifest(&manifest)?.manifest;
        let entries: Vec<_> = select(&m, split).into_iter().cloned().collect();
        let preds = prediction_sets(&load_predictions(&predictions)?)?;
        core_evaluate(
            &preds,
            &entries,
            EvalOptions {
                policy,
                ..EvalOptions::default()
            },
        )
    })()
    .map_err(err)?;
    to_json(py, &report)
}

#[pymodule]
fn caliper(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CaliperError", m.py().get_type::<CaliperError>())?;
    m.add_class::<PyPlane>()?;
    m.add_class::<PySet>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(encode_heatmaps, m)?)?;
    m.add_function(wrap_pyfunction!(encode_constraints, m)?)?;
    m.add_function(wrap_pyfunction!(decode_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(icc_2k, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
