//! Python bindings. Batches cross the boundary as nested lists with one
//! flattened sample per row.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lsa_core::checkpoint;
use lsa_core::data::{make_moons as core_moons, Dataset, Split};
use lsa_core::eval;
use lsa_core::lsa::{comparison_measure as core_cm, run_lsa, LsaConfig};
use lsa_core::loss::LossKind;
use lsa_core::perturb::{attack as core_attack, AttackKind, AttackSpec, Perturbation};
use lsa_core::train::{train as core_train, TrainConfig, TrainerKind};
use lsa_core::{Architecture, Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::Autodiff(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Rows of equal length to an `N x ...` tensor with the given sample shape.
fn rows_to_tensor(rows: &[Vec<f64>], sample_shape: &[usize]) -> Result<Tensor, Error> {
    let slices: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::stack(&slices, sample_shape)
}

type Rows = Vec<Vec<f64>>;

fn tensor_to_rows(t: &Tensor) -> Rows {
    (0..t.batch()).map(|i| t.sample(i).to_vec()).collect()
}

fn attack_spec(kind: &str, epsilon: f64, clamp: Option<(f64, f64)>) -> PyResult<AttackSpec> {
    let kind = AttackKind::parse(kind).ok_or_else(|| PyValueError::new_err(format!("unknown attack `{kind}`")))?;
    let spec = match kind {
        AttackKind::Fgsm => AttackSpec::fgsm(epsilon),
        AttackKind::Pgd => AttackSpec::pgd(epsilon),
        AttackKind::Fast => AttackSpec::fast(epsilon),
    };
    Ok(AttackSpec { clamp, ..spec })
}

/// A sequential model with per-layer activation capture.
#[pyclass(name = "Model")]
struct PyModel {
    inner: lsa_core::Model,
}

impl PyModel {
    fn batch(&self, rows: &[Vec<f64>]) -> PyResult<Tensor> {
        rows_to_tensor(rows, self.inner.input_shape()).map_err(to_py)
    }

    fn dataset(&self, rows: &[Vec<f64>], labels: Vec<usize>) -> PyResult<Dataset> {
        let classes = self.inner.num_outputs().max(2);
        Dataset::new(self.batch(rows)?, labels, classes, Split::Test).map_err(to_py)
    }
}

#[pymethods]
impl PyModel {
    /// Reference architecture `"A"` (2-D inputs) or `"B"` (1x28x28 images).
    #[new]
    #[pyo3(signature = (architecture = "A", seed = 0))]
    fn new(architecture: &str, seed: u64) -> PyResult<Self> {
        let arch = Architecture::parse(architecture)
            .ok_or_else(|| PyValueError::new_err(format!("unknown architecture `{architecture}`")))?;
        Ok(PyModel { inner: arch.build(seed).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, architecture = "A"))]
    fn load(path: PathBuf, architecture: &str) -> PyResult<Self> {
        let arch = Architecture::parse(architecture)
            .ok_or_else(|| PyValueError::new_err(format!("unknown architecture `{architecture}`")))?;
        let inner = checkpoint::load_expecting(&path, &arch.input_shape(), &arch.layers()).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn num_learnable(&self) -> usize {
        self.inner.num_learnable()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    /// `(logits, trace)`: logits as rows, trace as one list of rows per
    /// learnable layer.
    fn forward(&self, rows: Vec<Vec<f64>>) -> PyResult<(Rows, Vec<Rows>)> {
        let (logits, trace) = self.inner.forward(&self.batch(&rows)?).map_err(to_py)?;
        Ok((tensor_to_rows(&logits), trace.layers().iter().map(tensor_to_rows).collect()))
    }

    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let logits = self.inner.logits(&self.batch(&rows)?, 256).map_err(to_py)?;
        Ok(eval::predictions(&logits))
    }

    /// Percent accuracy.
    fn accuracy(&self, rows: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        eval::accuracy(&self.inner, &self.dataset(&rows, labels)?).map_err(to_py)
    }

    /// Trains in place with `trainer` in {"standard", "at", "trade"}; returns
    /// the per-epoch clean loss.
    #[pyo3(signature = (rows, labels, trainer = "standard", epochs = 100, attack = "fgsm", epsilon = 0.3, mvl = Vec::new(), gamma = 0.1, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        trainer: &str,
        epochs: usize,
        attack: &str,
        epsilon: f64,
        mvl: Vec<usize>,
        gamma: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let ds = self.dataset(&rows, labels)?.with_split(Split::Train);
        let kind = TrainerKind::parse(trainer).ok_or_else(|| PyValueError::new_err(format!("unknown trainer `{trainer}`")))?;
        let gamma: BTreeMap<usize, f64> = mvl.iter().map(|&l| (l, gamma)).collect();
        let cfg = TrainConfig {
            trainer: kind,
            epochs,
            attack: attack_spec(attack, epsilon, None)?,
            mvl,
            gamma,
            seed,
            ..TrainConfig::default()
        };
        let log = core_train(&mut self.inner, &ds, &cfg).map_err(to_py)?;
        Ok(log.epochs.iter().map(|e| e.clean_loss).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (n, noise = 0.2, seed = 0))]
fn make_moons(n: usize, noise: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = core_moons(n, noise, seed).map_err(to_py)?;
    Ok((tensor_to_rows(&ds.inputs), ds.targets))
}

/// Adversarial twins of `rows` inside the L-infinity ball of radius `epsilon`.
#[pyfunction]
#[pyo3(signature = (model, rows, labels, kind = "fgsm", epsilon = 0.3, seed = 0, clamp = None))]
fn attack(
    model: &PyModel,
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    kind: &str,
    epsilon: f64,
    seed: u64,
    clamp: Option<(f64, f64)>,
) -> PyResult<Vec<Vec<f64>>> {
    let x = model.batch(&rows)?;
    let spec = attack_spec(kind, epsilon, clamp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adv = core_attack(&model.inner, &x, &labels, LossKind::for_model(&model.inner), &spec, &mut rng).map_err(to_py)?;
    Ok(tensor_to_rows(&adv))
}

/// Relative Frobenius error between two representations.
#[pyfunction]
fn comparison_measure(clean: Vec<f64>, perturbed: Vec<f64>) -> PyResult<f64> {
    let a = Tensor::new(vec![clean.len()], clean).map_err(to_py)?;
    let b = Tensor::new(vec![perturbed.len()], perturbed).map_err(to_py)?;
    core_cm(&a, &b).map_err(to_py)
}

/// Runs the analysis and returns a dict with `per_layer_mean`, `mu`,
/// `sigma` and the ranked `mvl` layer list.
#[pyfunction]
#[pyo3(signature = (model, rows, labels, kind = "pgd", epsilon = 0.3, m = 256, eta = 1.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn lsa(
    py: Python<'_>,
    model: &PyModel,
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    kind: &str,
    epsilon: f64,
    m: usize,
    eta: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let ds = model.dataset(&rows, labels)?;
    let p = Perturbation::Attack(attack_spec(kind, epsilon, None)?);
    let cfg = LsaConfig { m: m.min(ds.len()), eta, seed, ..LsaConfig::default() };
    let rep = run_lsa(&model.inner, &ds, &p, &cfg).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("per_layer_mean", rep.stats.per_layer_mean.clone())?;
    d.set_item("mu", rep.stats.mu)?;
    d.set_item("sigma", rep.stats.sigma)?;
    d.set_item("mvl", rep.mvl.layers())?;
    Ok(d.into_any().unbind())
}

/// Sum of percent accuracies over an epsilon grid.
#[pyfunction]
fn rg_score(accuracies: Vec<f64>) -> f64 {
    eval::rg_score(&accuracies)
}

#[pymodule]
fn lsa_toolkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(make_moons, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(comparison_measure, m)?)?;
    m.add_function(wrap_pyfunction!(lsa, m)?)?;
    m.add_function(wrap_pyfunction!(rg_score, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let t = rows_to_tensor(&rows, &[2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(tensor_to_rows(&t), rows);
        assert!(rows_to_tensor(&[vec![1.0]], &[2]).is_err());
    }
}
