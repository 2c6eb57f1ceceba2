//! Python bindings. Arrays cross the boundary as nested lists of floats;
//! labels and subset indices are 0-based ints.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use calibrar::smoothing::{self, AdaptiveSmoothing, SubsetValStats};
use calibrar::{
    attack, data, metrics, AttackConfig, Checkpoint, Dataset, Error, MlpSpec, NumArray, Policy, RobustnessPartition,
    TrainConfig,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<NumArray> {
    NumArray::from_rows(rows).map_err(py_err)
}

fn rows(a: &NumArray) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn dataset(x: &[Vec<f64>], y: Vec<usize>, classes: usize) -> PyResult<Dataset> {
    Dataset::new(matrix(x)?, y, classes).map_err(py_err)
}

fn assignment(subsets: Vec<usize>) -> PyResult<RobustnessPartition> {
    let r = subsets.iter().max().map_or(1, |m| m + 1);
    RobustnessPartition::from_assignment(subsets, r).map_err(py_err)
}

/// A trained or freshly initialised MLP.
#[pyclass(module = "pycalibrar")]
pub struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input, hidden, classes, seed = 0))]
    pub fn new(input: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> PyResult<Self> {
        let inner = calibrar::init(&MlpSpec::new(input, &hidden, classes, seed)).map_err(py_err)?;
        Ok(Model { inner })
    }

    /// Trains in place. `policy` is one of vanilla, ls, adals, ar_adals.
    /// Adaptive policies need `val_x`/`val_y`; ar_adals also needs 0-based
    /// subset assignments for both splits.
    #[pyo3(signature = (
        x, y, *, val_x = None, val_y = None, policy = "vanilla", epsilon = None, alpha = None,
        train_subsets = None, val_subsets = None, epochs = 100, batch_size = 64, learning_rate = 1e-3, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        val_x: Option<Vec<Vec<f64>>>,
        val_y: Option<Vec<usize>>,
        policy: &str,
        epsilon: Option<f64>,
        alpha: Option<f64>,
        train_subsets: Option<Vec<usize>>,
        val_subsets: Option<Vec<usize>>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let classes = self.inner.spec.classes();
        let train = dataset(&x, y, classes)?;
        let val = match (val_x, val_y) {
            (Some(vx), Some(vy)) => dataset(&vx, vy, classes)?,
            (None, None) => train.clone(),
            _ => return Err(PyValueError::new_err("give both val_x and val_y or neither")),
        };
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            ..TrainConfig::default()
        };
        let mut losses = Vec::with_capacity(epochs);
        let mut log = |r: &calibrar::model::EpochReport, _: &Checkpoint| {
            losses.push(r.loss);
            Ok(())
        };
        let start = self.inner.clone();
        self.inner = match policy {
            "vanilla" => calibrar::train(start, &train, &mut smoothing::OneHot::new(&train), &cfg, &mut log),
            "ls" => {
                let eps = epsilon.unwrap_or(smoothing::DEFAULT_LS_EPSILON);
                let mut sup = smoothing::FixedSmoothing::new(&train, eps).map_err(py_err)?;
                calibrar::train(start, &train, &mut sup, &cfg, &mut log)
            }
            "adals" => {
                let a = alpha.unwrap_or(smoothing::DEFAULT_ADALS_ALPHA);
                let mut sup = AdaptiveSmoothing::without_robustness(&train, &val, a).map_err(py_err)?;
                calibrar::train(start, &train, &mut sup, &cfg, &mut log)
            }
            "ar_adals" => {
                let (Some(ts), Some(vs)) = (train_subsets, val_subsets) else {
                    return Err(PyValueError::new_err("ar_adals needs train_subsets and val_subsets"));
                };
                let a = alpha.unwrap_or(smoothing::DEFAULT_AR_ADALS_ALPHA);
                let mut sup = AdaptiveSmoothing::new(&train, &val, assignment(ts)?, assignment(vs)?, a).map_err(py_err)?;
                calibrar::train(start, &train, &mut sup, &cfg, &mut log)
            }
            other => return Err(PyValueError::new_err(format!("unknown policy {other:?}"))),
        }
        .map_err(py_err)?;
        Ok(losses)
    }

    pub fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.predict_proba(&matrix(&x)?).map_err(py_err)?))
    }

    pub fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(&x)?).map_err(py_err)
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: Checkpoint::load(&path).map_err(py_err)?,
        })
    }

    pub fn params_hash(&self) -> String {
        self.inner.params_hash()
    }

    #[getter]
    pub fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.inner.spec.layer_sizes.clone()
    }

    /// Correct-class soft labels of the last adaptive epoch, if any.
    #[getter]
    pub fn smoothing(&self) -> Option<Vec<f64>> {
        self.inner.smoothing.as_ref().map(|s| s.correct.clone())
    }

    fn __repr__(&self) -> String {
        format!("Model(layers={:?}, epoch={})", self.inner.spec.layer_sizes, self.inner.epoch)
    }
}

/// Per-subset correct-class soft labels.
#[pyclass(module = "pycalibrar")]
pub struct SmoothingState {
    inner: smoothing::SmoothingState,
}

#[pymethods]
impl SmoothingState {
    #[new]
    pub fn new(subsets: usize, classes: usize, alpha: f64) -> PyResult<Self> {
        Ok(SmoothingState {
            inner: smoothing::SmoothingState::new(subsets, classes, alpha).map_err(py_err)?,
        })
    }

    /// One adaptive step from per-subset validation confidence and accuracy.
    pub fn update(&self, confidence: Vec<f64>, accuracy: Vec<f64>) -> PyResult<Self> {
        let stats = SubsetValStats::new(confidence, accuracy).map_err(py_err)?;
        Ok(SmoothingState {
            inner: self.inner.adaptive_update(&stats).map_err(py_err)?,
        })
    }

    pub fn soft_label(&self, subset: usize, label: usize) -> PyResult<Vec<f64>> {
        if subset >= self.inner.subsets {
            return Err(PyValueError::new_err(format!("subset {subset} out of range")));
        }
        self.inner.soft_label(subset, label).map_err(py_err)
    }

    #[getter]
    pub fn correct(&self) -> Vec<f64> {
        self.inner.correct.clone()
    }

    #[getter]
    pub fn epsilon(&self) -> Vec<f64> {
        self.inner.epsilon.clone()
    }

    #[getter]
    pub fn epoch(&self) -> usize {
        self.inner.epoch
    }

    fn __repr__(&self) -> String {
        format!("SmoothingState(correct={:?}, epoch={})", self.inner.correct, self.inner.epoch)
    }
}

/// Gaussian blobs: `(features, labels)`.
#[pyfunction]
#[pyo3(signature = (classes = 4, dim = 8, n_per_class = 500, spread = 0.9, seed = 7))]
pub fn synth(classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = data::synth(classes, dim, n_per_class, spread, seed).map_err(py_err)?;
    Ok((rows(ds.features()), ds.labels().to_vec()))
}

#[pyfunction]
#[pyo3(signature = (probs, labels, bins = 10))]
pub fn ece(probs: Vec<Vec<f64>>, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    Ok(metrics::ece(&matrix(&probs)?, &labels, bins).map_err(py_err)?.ece)
}

/// Across-model variance of the predicted-class probability.
#[pyfunction]
pub fn variance(per_model: Vec<Vec<Vec<f64>>>, labels: Vec<usize>) -> PyResult<f64> {
    let ms = per_model.iter().map(|p| matrix(p)).collect::<PyResult<Vec<_>>>()?;
    Ok(metrics::variance(&ms, &labels).map_err(py_err)?.sigma2)
}

#[pyfunction]
pub fn soften(one_hot: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
    smoothing::soften(&one_hot, epsilon).map_err(py_err)
}

#[pyfunction]
pub fn epsilon_from_correct(correct: f64, classes: usize) -> PyResult<f64> {
    smoothing::epsilon_from_correct(correct, classes).map_err(py_err)
}

#[pyfunction]
pub fn correct_from_epsilon(epsilon: f64, classes: usize) -> PyResult<f64> {
    smoothing::correct_from_epsilon(epsilon, classes).map_err(py_err)
}

/// 0-based subset of each example, subset 0 the least robust.
#[pyfunction]
pub fn partition(scores: Vec<f64>, subsets: usize) -> PyResult<Vec<usize>> {
    Ok(attack::partition(&scores, subsets).map_err(py_err)?.assignment().to_vec())
}

/// Minimal-perturbation L2 norms; `inf` where no attack succeeded.
#[pyfunction]
#[pyo3(signature = (model, x, max_iterations = 500, binary_search_steps = 3))]
pub fn robustness_scores(
    py: Python<'_>,
    model: &Model,
    x: Vec<Vec<f64>>,
    max_iterations: usize,
    binary_search_steps: usize,
) -> PyResult<Vec<f64>> {
    let cfg = AttackConfig {
        max_iterations,
        binary_search_steps,
        ..AttackConfig::default()
    };
    let x = matrix(&x)?;
    let ck = &model.inner;
    let out = py.detach(|| attack::robustness_scores(ck, &x, &cfg)).map_err(py_err)?;
    Ok(attack::scores_of(&out))
}

/// Names of the supervision policies `Model.train` accepts.
#[pyfunction]
pub fn policies() -> Vec<&'static str> {
    [
        Policy::Vanilla,
        Policy::LabelSmoothing { epsilon: 0.0 },
        Policy::AdaLs { alpha: 0.0 },
        Policy::ArAdaLs { alpha: 0.0, subsets: 1 },
    ]
    .iter()
    .map(Policy::name)
    .collect()
}

#[pymodule]
fn pycalibrar(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<SmoothingState>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(variance, m)?)?;
    m.add_function(wrap_pyfunction!(soften, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_from_correct, m)?)?;
    m.add_function(wrap_pyfunction!(correct_from_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(robustness_scores, m)?)?;
    m.add_function(wrap_pyfunction!(policies, m)?)?;
    Ok(())
}
