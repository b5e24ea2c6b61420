//! Python bindings for the npvae toolkit.
//!
//! Matrices cross the boundary as lists of rows of floats.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use npvae::artifacts::Checkpoint;
use npvae::cli::{decode_queries, embed_split};
use npvae::data::{DataSplit, SplitName};
use npvae::gradcheck::{run_gradcheck, GradCheckOptions};
use npvae::model::{ModelConfig, ModelKind};
use npvae::npvae::{interpolate, KernelParams, LossBreakdown, Space};
use npvae::train::Trainer as CoreTrainer;
use npvae::{Error, Matrix, Rng};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::MissingFile(_) => PyOSError::new_err(e.to_string()),
        Error::Invalid(_) | Error::Unsupported(_) | Error::Dimension { .. } | Error::DegenerateBatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Matrix::from_rows(&refs).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.to_rows()
}

fn loss_dict<'py>(py: Python<'py>, l: &LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("neg_recon", l.neg_reconstruction)?;
    d.set_item("kl", l.kl)?;
    d.set_item("penalty", l.penalty)?;
    d.set_item("total", l.total)?;
    Ok(d)
}

fn parse_kind(kind: &str) -> PyResult<ModelKind> {
    match kind {
        "vae" => Ok(ModelKind::Vae),
        "npvae" => Ok(ModelKind::Npvae),
        other => Err(PyValueError::new_err(format!("unknown model kind {other:?}"))),
    }
}

/// Squared Euclidean distances between all pairs of rows.
#[pyfunction]
fn pairwise_sqdist(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&matrix(x)?.pairwise_sqdist()))
}

/// Leave-one-out kernel weights for a batch of X locations.
#[pyfunction]
#[pyo3(signature = (x, log_lengthscale = 0.0))]
fn kernel_weights(x: Vec<Vec<f64>>, log_lengthscale: f64) -> PyResult<Vec<Vec<f64>>> {
    let w = npvae::npvae::kernel_weights(&matrix(x)?, &KernelParams { log_lengthscale }).map_err(to_py)?;
    Ok(rows(&w))
}

/// Two-dimensional Gaussian clusters mapped into `obs_dim` dimensions.
/// Returns `(points, labels)`.
#[pyfunction]
#[pyo3(signature = (n, obs_dim, k = 2, separation = 6.0, seed = 0))]
fn synthetic_clusters(n: usize, obs_dim: usize, k: usize, separation: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
    let d = npvae::data::synthetic_clusters(&mut Rng::new(seed), n, obs_dim, k, separation).map_err(to_py)?;
    Ok((rows(&d.y), d.labels))
}

/// Runs the finite-difference gradient check. Returns a list of
/// `(case, block, max_rel_err, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (tolerance = 1e-4, flip_sign = None))]
fn gradcheck(tolerance: f64, flip_sign: Option<String>) -> PyResult<Vec<(String, String, f64, bool)>> {
    let opts = GradCheckOptions {
        tolerance,
        flip_sign,
        ..GradCheckOptions::default()
    };
    let cases = run_gradcheck(&opts).map_err(to_py)?;
    Ok(cases
        .iter()
        .flat_map(|c| {
            c.report
                .blocks
                .iter()
                .map(|b| (c.name.clone(), b.name.clone(), b.max_rel_err, b.max_rel_err < tolerance))
        })
        .collect())
}

/// A trained (or freshly initialized) model loaded from a checkpoint.
#[pyclass(module = "npvae_py")]
struct Model {
    ckpt: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            ckpt: Checkpoint::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ckpt.save(path).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> String {
        self.ckpt.model.kind().to_string()
    }

    #[getter]
    fn z_dim(&self) -> usize {
        self.ckpt.model.vae().z_dim()
    }

    #[getter]
    fn x_dim(&self) -> Option<usize> {
        self.ckpt.model.npvae().map(|n| n.x_dim())
    }

    #[getter]
    fn lengthscale(&self) -> Option<f64> {
        self.ckpt.model.npvae().map(|n| n.kernel.lengthscale())
    }

    #[getter]
    fn epochs_done(&self) -> u64 {
        self.ckpt.state.epochs_done
    }

    /// Decodes query points in X (npvae) or Z (vae) into pixel rows.
    fn sample(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&decode_queries(&self.ckpt, &matrix(points)?).map_err(to_py)?))
    }

    /// Decoded images along the line between two observations.
    #[pyo3(signature = (y_a, y_b, steps = 11, space = "x"))]
    fn interpolate(&self, y_a: Vec<f64>, y_b: Vec<f64>, steps: usize, space: &str) -> PyResult<Vec<Vec<f64>>> {
        let space: Space = space.parse().map_err(to_py)?;
        let out = interpolate(&self.ckpt.model, self.ckpt.reference.as_ref(), &y_a, &y_b, steps, space).map_err(to_py)?;
        Ok(rows(&out))
    }

    /// X locations (npvae) or 2-D Z means (vae) of the given observations.
    fn embed(&self, y: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let n = y.len();
        let split = DataSplit {
            y: matrix(y)?,
            labels: vec![0; n],
            name: SplitName::Test,
        };
        Ok(rows(&embed_split(&self.ckpt.model, &split).map_err(to_py)?.0))
    }
}

/// Minibatch trainer over an in-memory dataset with values in [0, 1].
#[pyclass(module = "npvae_py")]
struct Trainer {
    inner: CoreTrainer,
    data: DataSplit,
    last: Option<LossBreakdown>,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (
        data, labels = None, kind = "npvae", z_dim = 2, x_dim = 2, hidden = vec![500, 500],
        batch_size = 128, lr = 1e-3, keep_prob = 0.9, lambda_ = 1.0, seed = 0, reference_size = 1024
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        data: Vec<Vec<f64>>,
        labels: Option<Vec<u32>>,
        kind: &str,
        z_dim: usize,
        x_dim: usize,
        hidden: Vec<usize>,
        batch_size: usize,
        lr: f64,
        keep_prob: f64,
        lambda_: f64,
        seed: u64,
        reference_size: usize,
    ) -> PyResult<Self> {
        let y = matrix(data)?;
        let labels = labels.unwrap_or_else(|| vec![0; y.rows()]);
        if labels.len() != y.rows() {
            return Err(PyValueError::new_err(format!("{} rows but {} labels", y.rows(), labels.len())));
        }
        let config = ModelConfig {
            kind: parse_kind(kind)?,
            obs_dim: y.cols(),
            z_dim,
            x_dim,
            hidden,
            batch_size,
            lr,
            keep_prob,
            lambda: lambda_,
            seed,
            binarize: false,
            reference_size,
            train_limit: None,
        };
        let inner = CoreTrainer::new(config, y.rows()).map_err(to_py)?;
        Ok(Trainer {
            inner,
            data: DataSplit {
                y,
                labels,
                name: SplitName::Train,
            },
            last: None,
        })
    }

    /// Runs one epoch and returns its mean losses.
    fn train_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.train_epoch(&self.data).map_err(to_py)?;
        self.last = Some(m.loss);
        let d = loss_dict(py, &m.loss)?;
        d.set_item("epoch", m.epoch)?;
        Ok(d)
    }

    #[getter]
    fn epochs_done(&self) -> u64 {
        self.inner.epochs_done()
    }

    /// Snapshot of the current model, with a reference set for npvae.
    fn model(&self) -> PyResult<Model> {
        let reference = self.inner.reference_set(&self.data).map_err(to_py)?;
        Ok(Model {
            ckpt: self.inner.checkpoint(reference, self.last),
        })
    }
}

#[pymodule]
fn npvae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pairwise_sqdist, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_weights, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    Ok(())
}
