//! Python module `pfm`: datasets, flow training and inference, discrete
//! oracles, metrics, and the CLI pipeline stages.

use std::path::PathBuf;

use ndarray::Array2;
use pfm_cli::artifacts::Progress;
use pfm_cli::config::{RunConfig, SourceKind};
use pfm_cli::run;
use pfm_core::eval;
use pfm_core::flowmatch::{self, CompositeSampler, FieldConfig, FlowField, OdeConfig, PathConfig, TrainConfig};
use pfm_core::nnflow::AdamConfig;
use pfm_core::oracle::{self, DiscreteDist, PreferenceMatrix};
use pfm_core::prefdata::{self, GaussianMixture, PreferenceDataset, PreferenceLabeler, RewardFunction};
use pfm_core::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::RawIo(_) => PyOSError::new_err(e.to_string()),
        Error::Numerical { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn array(points: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    pfm_core::nnflow::rows_to_array(points, dim).map_err(to_py)
}

fn dist(p: Vec<f64>) -> PyResult<DiscreteDist> {
    DiscreteDist::new(p).map_err(to_py)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<PreferenceMatrix> {
    let n = rows.len();
    PreferenceMatrix::new(n, rows.into_iter().flatten().collect()).map_err(to_py)
}

/// Labeled preference pairs `(x, y+, y-)`.
#[pyclass(name = "Dataset", module = "pfm", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: PreferenceDataset,
}

#[pymethods]
impl PyDataset {
    /// Sample the default toy reference policy and label pairs with the
    /// deterministic toy labeler.
    #[staticmethod]
    #[pyo3(signature = (n, seed = 0))]
    fn generate(n: usize, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let labeler = cfg.labeler().map_err(to_py)?;
        let seeds = pfm_core::rng::StageSeeds::from_master(seed);
        let inner = prefdata::collect_dataset(&cfg.data.reference, &labeler, n, cfg.context(), seeds.data)
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: prefdata::load_dataset(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        prefdata::save_dataset(path, &self.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn y_dim(&self) -> usize {
        self.inner.y_dim
    }

    fn positives(&self) -> Vec<Vec<f64>> {
        self.inner.positives()
    }

    fn negatives(&self) -> Vec<Vec<f64>> {
        self.inner.negatives()
    }
}

/// A learned velocity field carrying rejected samples toward preferred ones.
#[pyclass(name = "FlowField", module = "pfm", skip_from_py_object)]
#[derive(Clone)]
struct PyFlowField {
    inner: FlowField,
}

#[pymethods]
impl PyFlowField {
    #[staticmethod]
    #[pyo3(signature = (dataset, hidden = vec![128, 128, 128], epochs = 300, batch_size = 256, lr = 1e-3, sigma = 0.05, seed = 0))]
    fn train(
        dataset: &PyDataset,
        hidden: Vec<usize>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        sigma: f64,
        seed: u64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let seeds = pfm_core::rng::StageSeeds::from_master(seed);
        let ds = &dataset.inner;
        let field_cfg = FieldConfig {
            hidden,
            ..FieldConfig::default()
        };
        let init = FlowField::init(&field_cfg, ds.y_dim, ds.x_dim, seeds.init).map_err(to_py)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            seed: seeds.train,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        };
        let path = PathConfig {
            sigma,
            ..PathConfig::default()
        };
        let trained = flowmatch::train_flow(ds, init, &path, &cfg).map_err(to_py)?;
        let losses = trained.losses.iter().map(|l| l.loss).collect();
        Ok((Self { inner: trained.field }, losses))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: FlowField::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Integrate the given points from t=0 to t=1 with RK4.
    #[pyo3(signature = (points, steps = 100))]
    fn push(&self, points: Vec<Vec<f64>>, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        let y = array(&points)?;
        let x = Array2::zeros((y.nrows(), self.inner.x_dim));
        let ode = OdeConfig {
            steps,
            ..OdeConfig::default()
        };
        Ok(rows(&flowmatch::integrate_many(&self.inner, y.view(), x.view(), &ode).map_err(to_py)?))
    }

    /// Draw from the default toy reference (`source="reference"`) or its
    /// rejected-sample marginal (`source="negative"`) and push through the flow.
    #[pyo3(signature = (n, seed = 0, source = "reference"))]
    fn sample(&self, n: usize, seed: u64, source: &str) -> PyResult<Vec<Vec<f64>>> {
        let kind = match source {
            "reference" => SourceKind::Reference,
            "negative" => SourceKind::NegativeMarginal,
            other => return Err(PyValueError::new_err(format!("unknown source {other:?}"))),
        };
        let sampler = CompositeSampler {
            source: RunConfig::default().source(kind).map_err(to_py)?,
            flows: vec![self.inner.clone()],
            ode: OdeConfig::default(),
        };
        Ok(rows(&sampler.sample(n, seed).map_err(to_py)?))
    }
}

/// Draw `n` points from the default toy reference policy.
#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn reference_samples(n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let source = flowmatch::SampleSource::reference(GaussianMixture::default_reference());
    Ok(rows(&source.draw_many(n, seed).map_err(to_py)?))
}

/// Ground-truth toy reward at each point.
#[pyfunction]
fn toy_reward(points: Vec<Vec<f64>>) -> Vec<f64> {
    let r = RewardFunction::eight_gaussians();
    points.iter().map(|p| r.eval(p)).collect()
}

#[pyfunction]
fn marginal_positive(reference: Vec<f64>, prefs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let p = oracle::marginal_positive(&dist(reference)?, &matrix(prefs)?).map_err(to_py)?;
    Ok(p.probs().to_vec())
}

#[pyfunction]
fn marginal_negative(reference: Vec<f64>, prefs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let p = oracle::marginal_negative(&dist(reference)?, &matrix(prefs)?).map_err(to_py)?;
    Ok(p.probs().to_vec())
}

#[pyfunction]
fn rlhf_optimal(reference: Vec<f64>, prefs: Vec<Vec<f64>>, beta: f64) -> PyResult<Vec<f64>> {
    let p = oracle::rlhf_optimal(&dist(reference)?, &matrix(prefs)?, beta).map_err(to_py)?;
    Ok(p.probs().to_vec())
}

/// `n` rounds of `p -> p * (P p)`, renormalized.
#[pyfunction]
fn iterate_marginal(reference: Vec<f64>, prefs: Vec<Vec<f64>>, n: usize) -> PyResult<Vec<f64>> {
    let p = oracle::iterate_marginal(&dist(reference)?, &matrix(prefs)?, n).map_err(to_py)?;
    Ok(p.probs().to_vec())
}

#[pyfunction]
fn energy_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::energy_distance(array(&a)?.view(), array(&b)?.view()).map_err(to_py)
}

/// Fraction of comparisons `a` wins over `b` under the deterministic toy labeler.
#[pyfunction]
#[pyo3(signature = (a, b, seed = 0))]
fn win_rate(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, seed: u64) -> PyResult<f64> {
    let labeler = PreferenceLabeler::deterministic(RewardFunction::eight_gaussians());
    eval::win_rate(array(&a)?.view(), array(&b)?.view(), &labeler, seed).map_err(to_py)
}

/// Run a pipeline command (`gen-data`, `train`, `infer`, `iterate`, `oracle`,
/// `baseline`, `eval`, `repro-8g`) with an optional TOML config.
#[pyfunction]
#[pyo3(signature = (command, config = None, seed = None, out = None))]
fn run_command(command: &str, config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    let cfg = run::apply_overrides(cfg, seed, out);
    let progress = Progress::silent();
    match command {
        "gen-data" => run::cmd_gen_data(&cfg, &progress),
        "train" => run::cmd_train(&cfg, &progress),
        "infer" => run::cmd_infer(&cfg, &progress),
        "iterate" => run::cmd_iterate(&cfg, &progress),
        "oracle" => run::cmd_oracle(&cfg, &progress).map(|_| ()),
        "baseline" => run::cmd_baseline(&cfg, &progress).map(|_| ()),
        "eval" => run::cmd_eval(&cfg, &progress).map(|_| ()),
        "repro-8g" => run::cmd_repro_8g(&cfg, &progress).map(|_| ()),
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    }
    .map_err(to_py)
}

#[pymodule]
fn pfm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFlowField>()?;
    m.add_function(wrap_pyfunction!(reference_samples, m)?)?;
    m.add_function(wrap_pyfunction!(toy_reward, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_positive, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_negative, m)?)?;
    m.add_function(wrap_pyfunction!(rlhf_optimal, m)?)?;
    m.add_function(wrap_pyfunction!(iterate_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(energy_distance, m)?)?;
    m.add_function(wrap_pyfunction!(win_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
