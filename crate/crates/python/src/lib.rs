//! Python bindings: datasets, model fitting, Fisher features, the linear
//! classifier and the evaluation protocol.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gazeid::classify::{self, split_saliency, EvalProtocol, ModelFamily, Split, SvmOptions};
use gazeid::dataset::{self, Item};
use gazeid::fisher::{self, FisherScore, Observation, ScoreModel};
use gazeid::gaze::{self, DetectionParams, GazeRecording, GazeSample};
use gazeid::markov::{self, MarkovConfig, MarkovModelParams};
use gazeid::scenewalk::{self, FitOptions, Grid, SaliencyMap, SceneWalkParams, PARAM_NAMES};
use gazeid::simulate::{generate_cohort, ModelKind, SyntheticCohortSpec};
use gazeid::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Scanpaths (and optional saccade features) of many viewers on many images.
#[pyclass(frozen, module = "pygazeid")]
struct Dataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: dataset::read_dataset(&path).map_err(py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        dataset::write_dataset(&path, &self.inner, None).map_err(py_err)
    }

    /// Synthetic cohort; returns the dataset and the generating parameters
    /// of each user as JSON.
    #[staticmethod]
    #[pyo3(signature = (model, n_users, delta, n_images, fixations, seed=0))]
    fn simulate(
        model: &str,
        n_users: usize,
        delta: f64,
        n_images: usize,
        fixations: usize,
        seed: u64,
    ) -> PyResult<(Self, String)> {
        let kind: ModelKind = model.parse().map_err(value_err)?;
        let cohort =
            generate_cohort(&SyntheticCohortSpec::new(kind, n_users, delta, n_images, fixations, seed)).map_err(py_err)?;
        Ok((Self { inner: cohort.dataset }, serde_json::to_string(&cohort.users).map_err(value_err)?))
    }

    fn __len__(&self) -> usize {
        self.inner.items.len()
    }

    fn subjects(&self) -> Vec<String> {
        self.inner.subjects()
    }

    /// `(subject_id, image_id)` per item.
    fn items(&self) -> Vec<(String, String)> {
        self.inner.items.iter().map(|i| (i.subject_id().to_string(), i.image_id().to_string())).collect()
    }

    /// `(x_deg, y_deg, dur_ms)` per fixation of item `i`.
    fn fixations(&self, i: usize) -> PyResult<Vec<(f64, f64, f64)>> {
        let item = self.item(i)?;
        Ok(item.path.fixations.iter().map(|f| (f.x, f.y, f.duration_ms)).collect())
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        let items = indices.iter().map(|&i| self.item(i).cloned()).collect::<PyResult<_>>()?;
        Ok(Self {
            inner: dataset::Dataset { items, ..self.inner.clone() },
        })
    }
}

impl Dataset {
    fn item(&self, i: usize) -> PyResult<&Item> {
        self.inner
            .items
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("item {i} out of range ({} items)", self.inner.items.len())))
    }
}

fn markov_features(data: &dataset::Dataset) -> PyResult<Vec<Vec<gaze::SaccadeFeatures>>> {
    data.items
        .iter()
        .map(|i| i.saccade_features().map(|f| f.into_owned()).map_err(py_err))
        .collect()
}

/// Saliency per image: maps computed from `data` itself, replaced by the
/// model's own maps where they cover the same image.
fn saliency_maps(data: &dataset::Dataset, grid: Grid, stored: &BTreeMap<String, SaliencyMap>) -> BTreeMap<String, SaliencyMap> {
    let all = Split {
        train: vec![(0..data.items.len()).collect()],
        test: vec![Vec::new()],
    };
    let mut maps = split_saliency(data, grid, &all);
    for (image, map) in maps.iter_mut() {
        if let Some(s) = stored.get(image) {
            *map = s.clone();
        }
    }
    maps
}

fn scores_of<M: ScoreModel>(model: &M, obs: &[Observation<'_>]) -> PyResult<Vec<Vec<f64>>> {
    Ok(fisher::compute_scores(model, obs).map_err(py_err)?.into_iter().map(|s| s.g).collect())
}

/// Type-conditioned Gamma/multinomial saccade model.
#[pyclass(frozen, module = "pygazeid")]
struct MarkovModel {
    inner: MarkovModelParams,
}

#[pymethods]
impl MarkovModel {
    /// `config` is "base" or "dynamics".
    #[staticmethod]
    #[pyo3(signature = (data, config="base"))]
    fn fit(data: &Dataset, config: &str) -> PyResult<Self> {
        let config: MarkovConfig = match config {
            "base" => MarkovConfig::Base,
            "dynamics" => MarkovConfig::Dynamics,
            other => return Err(PyValueError::new_err(format!("unknown markov config {other:?}"))),
        };
        let fit = markov::fit(&markov_features(&data.inner)?, config).map_err(py_err)?;
        Ok(Self { inner: fit.params })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: MarkovModelParams::from_json(s).map_err(py_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Log-likelihood of every item.
    fn loglik(&self, data: &Dataset) -> PyResult<Vec<f64>> {
        markov_features(&data.inner)?.iter().map(|f| markov::loglik(f, &self.inner).map_err(py_err)).collect()
    }

    /// Log-likelihood gradient of every item.
    fn scores(&self, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let feats = markov_features(&data.inner)?;
        let obs: Vec<_> = feats.iter().map(|f| Observation::Saccades(f)).collect();
        scores_of(&self.inner, &obs)
    }
}

/// SceneWalk parameters with the grid and saliency maps used to fit them.
#[pyclass(frozen, module = "pygazeid")]
struct SceneWalkModel {
    params: SceneWalkParams,
    grid: Grid,
    saliency: BTreeMap<String, SaliencyMap>,
    converged: bool,
}

#[pymethods]
impl SceneWalkModel {
    /// Pooled fit. `grid` is `(rows, cols)`; defaults to the dataset's grid.
    #[staticmethod]
    #[pyo3(signature = (data, grid=None, max_iter=None))]
    fn fit(data: &Dataset, grid: Option<(usize, usize)>, max_iter: Option<usize>) -> PyResult<Self> {
        let protocol = EvalProtocol {
            grid: grid.map(|(r, c)| [r, c]),
            ..EvalProtocol::default()
        };
        let grid = classify::eval_grid(&data.inner, &protocol).map_err(py_err)?;
        let saliency = saliency_maps(&data.inner, grid, &BTreeMap::new());
        let items: Vec<_> = data.inner.items.iter().map(|i| (&i.path, &saliency[i.image_id()])).collect();
        let mut opts = FitOptions::default();
        if let Some(m) = max_iter {
            opts.max_iter = m;
        }
        let report = scenewalk::fit(&items, &SceneWalkParams::default(), &opts).map_err(py_err)?;
        Ok(Self { params: report.params, grid, saliency, converged: report.converged })
    }

    #[getter]
    fn params(&self) -> BTreeMap<&'static str, f64> {
        PARAM_NAMES.iter().copied().zip(self.params.to_array()).collect()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.converged
    }

    fn loglik(&self, data: &Dataset) -> PyResult<Vec<f64>> {
        let maps = saliency_maps(&data.inner, self.grid, &self.saliency);
        data.inner
            .items
            .iter()
            .map(|i| {
                scenewalk::loglik(&i.path, &maps[i.image_id()], &self.params, Default::default()).map_err(py_err)
            })
            .collect()
    }

    fn scores(&self, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let maps = saliency_maps(&data.inner, self.grid, &self.saliency);
        let obs: Vec<_> = data.inner.items.iter().map(|i| Observation::Fixations(&i.path, &maps[i.image_id()])).collect();
        scores_of(&self.params, &obs)
    }
}

fn wrap_scores(scores: Vec<Vec<f64>>) -> Vec<FisherScore> {
    scores.into_iter().map(|g| FisherScore { g, model_tag: String::new() }).collect()
}

/// Regularized Fisher information estimated from training scores.
#[pyclass(frozen, module = "pygazeid")]
struct FisherInformation {
    inner: fisher::FisherInformation,
}

#[pymethods]
impl FisherInformation {
    #[staticmethod]
    #[pyo3(signature = (scores, eps_reg=fisher::DEFAULT_EPS_REG))]
    fn estimate(scores: Vec<Vec<f64>>, eps_reg: f64) -> PyResult<Self> {
        Ok(Self { inner: fisher::estimate_information(&wrap_scores(scores), eps_reg).map_err(py_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[pyo3(signature = (score, normalize=true))]
    fn feature_map(&self, score: Vec<f64>, normalize: bool) -> PyResult<Vec<f64>> {
        let s = FisherScore { g: score, model_tag: String::new() };
        fisher::feature_map(&s, &self.inner, normalize).map_err(py_err)
    }

    #[pyo3(signature = (a, b, normalize=true))]
    fn kernel(&self, a: Vec<f64>, b: Vec<f64>, normalize: bool) -> PyResult<f64> {
        let w = wrap_scores(vec![a, b]);
        fisher::kernel(&w[0], &w[1], &self.inner, normalize).map_err(py_err)
    }
}

/// One-vs-rest linear SVM over feature vectors.
#[pyclass(frozen, module = "pygazeid")]
struct LinearClassifier {
    inner: classify::LinearModel,
}

#[pymethods]
impl LinearClassifier {
    /// Classes are the sorted distinct labels.
    #[staticmethod]
    #[pyo3(signature = (features, labels, c=1.0, seed=0))]
    fn train(features: Vec<Vec<f64>>, labels: Vec<String>, c: f64, seed: u64) -> PyResult<Self> {
        let mut classes = labels.clone();
        classes.sort();
        classes.dedup();
        let idx: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("label is a class")).collect();
        let inner = classify::train(&features, &idx, &classes, c, seed, &SvmOptions::default()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    fn decision_scores(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        classify::decision_scores(&self.inner, &x).map_err(py_err)
    }

    /// Class with the highest score summed over the images of one viewer.
    fn identify(&self, images: Vec<Vec<f64>>) -> PyResult<String> {
        let k = classify::identify(&self.inner, &images).map_err(py_err)?;
        Ok(self.inner.classes[k].clone())
    }
}

/// Accuracy curve from the split / cross-validation protocol.
#[pyclass(frozen, module = "pygazeid")]
struct EvalResult {
    inner: classify::EvalResult,
}

#[pymethods]
impl EvalResult {
    /// `(k, mean_acc, stderr)` per k.
    #[getter]
    fn curve(&self) -> Vec<(usize, f64, f64)> {
        self.inner.curve.iter().map(|p| (p.k, p.mean_acc, p.stderr)).collect()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// `family` is e.g. "fisher-svm-markov"; `protocol` is a JSON object with
/// any protocol settings to override.
#[pyfunction]
#[pyo3(signature = (data, family, protocol=None))]
fn run_protocol(py: Python<'_>, data: &Dataset, family: &str, protocol: Option<&str>) -> PyResult<EvalResult> {
    let family: ModelFamily = family.parse().map_err(value_err)?;
    let protocol: EvalProtocol = match protocol {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => EvalProtocol::default(),
    };
    let inner = py.detach(|| classify::run_protocol(&data.inner, family, &protocol)).map_err(py_err)?;
    Ok(EvalResult { inner })
}

/// Fixations `(x_deg, y_deg, dur_ms)` from raw samples `(t_ms, x_deg, y_deg)`.
#[pyfunction]
fn detect_fixations(samples: Vec<(f64, f64, f64)>, sampling_rate: f64) -> PyResult<Vec<(f64, f64, f64)>> {
    let samples = samples.into_iter().map(|(t_ms, x, y)| GazeSample { t_ms, x, y }).collect();
    let rec = GazeRecording::new(samples, sampling_rate, "s", "i").map_err(py_err)?;
    let path = gaze::detect_saccades(&rec, &DetectionParams::default()).map_err(py_err)?;
    Ok(path.fixations.iter().map(|f| (f.x, f.y, f.duration_ms)).collect())
}

#[pymodule]
fn pygazeid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<MarkovModel>()?;
    m.add_class::<SceneWalkModel>()?;
    m.add_class::<FisherInformation>()?;
    m.add_class::<LinearClassifier>()?;
    m.add_class::<EvalResult>()?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(detect_fixations, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
