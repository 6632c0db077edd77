//! Python bindings: datasets, the composer, training, evaluation,
//! interventions and the loss functions.
//!
//! Images cross the boundary as a flat row-major `(y, x, c)` pixel list plus
//! a `(height, width, channels)` shape; matrices as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use intent_core::composer::{compose, ComposerConfig, ComposerParams};
use intent_core::data::{self, DatasetConfig, ModificationText, TripletDataset};
use intent_core::eval::{self, RetrievalMetrics};
use intent_core::experiment::{self, ExperimentSpec, Variant};
use intent_core::gradcheck::{run_gradcheck, GradcheckConfig};
use intent_core::intervention::{self as iv, InterventionOp, InterventionSettings, MixParams};
use intent_core::objectives::{self as obj, RewardOptions, RobustTerms};
use intent_core::train::{self, OptimizerKind, TrainConfig};
use intent_core::{Image, IntentError};

fn err(e: IntentError) -> PyErr {
    match e {
        IntentError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(pixels: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Image> {
    Image::new(shape.0, shape.1, shape.2, pixels).map_err(err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn metrics_dict<'py>(py: Python<'py>, m: &RetrievalMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("r1", m.r1)?;
    d.set_item("r5", m.r5)?;
    d.set_item("r10", m.r10)?;
    d.set_item("subset_r1", m.subset_r1)?;
    d.set_item("subset_r2", m.subset_r2)?;
    d.set_item("subset_r3", m.subset_r3)?;
    Ok(d)
}

/// A generated triplet dataset.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: TripletDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (n_triplets=500, noise_ratio=0.2, clutter_level=0.3, seed=0, n_validation=None, image_size=32))]
    fn new(
        n_triplets: usize,
        noise_ratio: f64,
        clutter_level: f64,
        seed: u64,
        n_validation: Option<usize>,
        image_size: usize,
    ) -> PyResult<Self> {
        let config = DatasetConfig {
            n_triplets,
            noise_ratio,
            clutter_level,
            seed,
            n_validation,
            image_size,
            ..Default::default()
        };
        Ok(PyDataset { inner: data::generate_dataset(&config).map_err(err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: data::load_dataset(&dir).map_err(err)? })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
        data::write_dataset(&self.inner, &dir).map_err(err)
    }

    #[getter]
    fn num_triplets(&self) -> usize {
        self.inner.triplets.len()
    }

    #[getter]
    fn noisy_count(&self) -> usize {
        self.inner.noisy_count()
    }

    #[getter]
    fn num_validation(&self) -> usize {
        self.inner.validation.len()
    }

    #[getter]
    fn gallery_size(&self) -> usize {
        self.inner.gallery.len()
    }

    /// `(reference pixels, tokens, target pixels, is_noisy)` of one triplet.
    fn triplet(&self, index: usize) -> PyResult<(Vec<f64>, Vec<u32>, Vec<f64>, bool)> {
        let t = self
            .inner
            .triplets
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("triplet {index} out of range")))?;
        Ok((t.reference.pixels().to_vec(), t.modification.tokens.clone(), t.target.pixels().to_vec(), t.is_noisy))
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.config.image_size;
        (s, s, 3)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(triplets={}, noisy={}, validation={}, gallery={})",
            self.num_triplets(),
            self.noisy_count(),
            self.num_validation(),
            self.gallery_size()
        )
    }
}

/// Composer parameters.
#[pyclass(name = "Composer")]
struct PyComposer {
    inner: ComposerParams,
}

#[pymethods]
impl PyComposer {
    #[new]
    #[pyo3(signature = (seed=0, image_size=32, patch_size=8, queries=4, dim=32, hidden=32, vocab_size=17))]
    fn new(
        seed: u64,
        image_size: usize,
        patch_size: usize,
        queries: usize,
        dim: usize,
        hidden: usize,
        vocab_size: usize,
    ) -> PyResult<Self> {
        let config = ComposerConfig {
            image_height: image_size,
            image_width: image_size,
            patch_size,
            queries,
            dim,
            hidden,
            vocab_size,
            seed,
            ..Default::default()
        };
        Ok(PyComposer { inner: ComposerParams::init(&config).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyComposer { inner: ComposerParams::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    /// Q×D composed feature of an image and modification tokens.
    #[pyo3(signature = (pixels, shape, tokens=Vec::new()))]
    fn compose(&self, pixels: Vec<f64>, shape: (usize, usize, usize), tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let img = image(pixels, shape)?;
        let f = compose(&self.inner, &img, &ModificationText { tokens }).map_err(err)?;
        Ok(rows(&f))
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(py, &eval::evaluate(&self.inner, &dataset.inner).map_err(err)?)
    }
}

/// Trains a fresh composer; returns `(composer, metrics, step_losses)`.
#[pyfunction]
#[pyo3(signature = (dataset, epochs=10, batch_size=32, learning_rate=0.01, optimizer="adam", variant="full", intervention=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_composer<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: &str,
    variant: &str,
    intervention: Option<&str>,
    seed: u64,
) -> PyResult<(PyComposer, Bound<'py, PyDict>, Vec<f64>)> {
    let optimizer = match optimizer {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        other => return Err(PyValueError::new_err(format!("unknown optimizer {other:?}"))),
    };
    let base = TrainConfig { epochs, batch_size, learning_rate, optimizer, seed, evaluate_each_epoch: false, ..Default::default() };
    let mut config = variant.parse::<Variant>().map_err(err)?.apply(&base);
    if let Some(op) = intervention {
        config.intervention = op.parse().map_err(err)?;
    }
    config.composer = config.composer_for(&dataset.inner.config);
    let out = py.detach(|| train::train(&dataset.inner, &config)).map_err(err)?;
    let losses = out.steps.iter().map(|s| s.total).collect();
    Ok((PyComposer { inner: out.params }, metrics_dict(py, &out.metrics)?, losses))
}

/// Counterfactual of `reference` under `op`; `distractor` feeds fft_mix.
#[pyfunction]
#[pyo3(signature = (op, reference, distractor, shape, seed=0, lam=None, crop_ratio=0.25))]
fn intervene(
    op: &str,
    reference: Vec<f64>,
    distractor: Vec<f64>,
    shape: (usize, usize, usize),
    seed: u64,
    lam: Option<f64>,
    crop_ratio: f64,
) -> PyResult<Vec<f64>> {
    let op: InterventionOp = op.parse().map_err(err)?;
    let x_ref = image(reference, shape)?;
    let x_dist = image(distractor, shape)?;
    let out = match (op, lam) {
        (InterventionOp::FftMix, Some(lambda)) => {
            iv::make_counterfactual(&x_ref, &x_dist, &MixParams { lambda, crop_ratio, rng_seed: seed })
        }
        _ => {
            let settings = InterventionSettings { crop_ratio, ..Default::default() };
            iv::apply_intervention(op, &settings, &x_ref, &x_dist, seed)
        }
    }
    .map_err(err)?;
    Ok(out.into_pixels())
}

#[pyfunction]
fn cka_loss(f: Vec<Vec<Vec<f64>>>, fhat: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let f = f.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let fhat = fhat.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    Ok(obj::cka_loss(&f, &fhat).map_err(err)?.value)
}

#[pyfunction]
fn similarity_matrix(composed: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let s = obj::similarity_matrix(matrix(composed)?.view(), matrix(targets)?.view(), tau).map_err(err)?;
    Ok(rows(&s.entries))
}

#[pyfunction]
#[pyo3(signature = (composed, targets, tau=0.07, mask_diagonal=true))]
fn robust_contrastive_loss(composed: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, tau: f64, mask_diagonal: bool) -> PyResult<f64> {
    let r = obj::robust_contrastive_loss(
        matrix(composed)?.view(),
        matrix(targets)?.view(),
        tau,
        RobustTerms::from_mask(mask_diagonal),
    )
    .map_err(err)?;
    Ok(r.value)
}

/// Loyalty matrix of a row-stochastic `s` with diagonal labels.
#[pyfunction]
#[pyo3(signature = (s, positive_reward=true, negative_reward=true))]
fn loyalty_matrix(s: Vec<Vec<f64>>, positive_reward: bool, negative_reward: bool) -> PyResult<Vec<Vec<f64>>> {
    let s = matrix(s)?;
    let y = obj::diagonal_labels(s.nrows());
    let opts = RewardOptions { enable_pwr: positive_reward, enable_nwr: negative_reward, detach: false };
    Ok(rows(&obj::loyalty_matrix(&s, &y, opts).map_err(err)?.entries))
}

#[pyfunction]
fn soft_discriminative_loss(s: Vec<Vec<f64>>) -> PyResult<f64> {
    let s = matrix(s)?;
    let y = obj::diagonal_labels(s.nrows());
    let l = obj::loyalty_matrix(&s, &y, RewardOptions::default()).map_err(err)?;
    Ok(obj::soft_discriminative_loss(&l.entries, &y))
}

/// Finite-difference suite; one dict per (term, batch size).
#[pyfunction]
#[pyo3(signature = (batch_sizes=vec![2, 3, 4], tau=0.07))]
fn gradcheck(py: Python<'_>, batch_sizes: Vec<usize>, tau: f64) -> PyResult<Vec<Bound<'_, PyDict>>> {
    let mut config = GradcheckConfig { batch_sizes, ..Default::default() };
    config.objective.tau = tau;
    config.objective.similarity_tau = tau;
    let results = py.detach(|| run_gradcheck(&config)).map_err(err)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("term", r.term.name())?;
            d.set_item("batch_size", r.batch_size)?;
            d.set_item("max_abs_error", r.max_abs_error)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("passed", r.passed())?;
            Ok(d)
        })
        .collect()
}

/// Runs generate + train for a TOML experiment spec, then returns the results CSV.
#[pyfunction]
fn run_experiment(py: Python<'_>, spec_toml: &str) -> PyResult<String> {
    let spec = ExperimentSpec::from_toml(spec_toml).map_err(err)?;
    py.detach(|| {
        experiment::cmd_generate(&spec)?;
        experiment::cmd_train(&spec)?;
        let report = experiment::cmd_report(&spec.output_dir)?;
        Ok(experiment::results_csv(&report))
    })
    .map_err(err)
}

#[pymodule]
fn intent(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyComposer>()?;
    m.add_function(wrap_pyfunction!(train_composer, m)?)?;
    m.add_function(wrap_pyfunction!(intervene, m)?)?;
    m.add_function(wrap_pyfunction!(cka_loss, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(robust_contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loyalty_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(soft_discriminative_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>())?;
    Ok(())
}
