//! Python bindings: datasets, variants, models, training, visualization and
//! whole experiments. Images cross the boundary as flat `[C, H, W]` lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fvlab_core::dataset::{self, BackgroundMode, SyntheticConfig};
use fvlab_core::experiment::{Experiment as CoreExperiment, ExperimentConfig};
use fvlab_core::featviz::{self, Jitter, VizConfig};
use fvlab_core::model::{self as core_model, Checkpoint, CheckpointMeta, ModelConfig, ResNetLite};
use fvlab_core::training::{self, TrainConfig};
use fvlab_core::transforms::{self, NoiseParams, VariantKind};
use fvlab_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A labeled image set with segmentation masks.
#[pyclass(module = "fvlab")]
struct Dataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dataset::load_dataset(&path).map(|inner| Dataset { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save_dataset(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.names().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.images.iter().map(|im| im.id.clone()).collect()
    }

    /// Channel-major pixels of image `i` in `[0, 1]`.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.get(i).map(|im| im.to_chw())
    }

    /// Mask of image `i`: 0 background, class + 1 foreground, 255 void.
    fn mask(&self, i: usize) -> PyResult<Vec<u8>> {
        self.get(i).map(|im| im.mask.clone())
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} images, {} classes)", self.inner.len(), self.inner.classes.len())
    }
}

impl Dataset {
    fn get(&self, i: usize) -> PyResult<&dataset::LabeledImage> {
        self.inner
            .images
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }
}

/// Renders the synthetic shapes dataset. `correlation` ties each
/// background hue to the class with that probability.
#[pyfunction]
#[pyo3(signature = (classes=8, per_class=50, resolution=64, correlation=None, seed=7))]
fn generate_synthetic(
    classes: usize,
    per_class: usize,
    resolution: usize,
    correlation: Option<f64>,
    seed: u64,
) -> PyResult<Dataset> {
    let cfg = SyntheticConfig {
        classes,
        per_class,
        resolution,
        background_mode: if correlation.is_some() {
            BackgroundMode::Correlated
        } else {
            BackgroundMode::Uncorrelated
        },
        correlation: correlation.unwrap_or(0.0),
        seed,
    };
    dataset::generate_synthetic(&cfg).map(|inner| Dataset { inner }).map_err(py_err)
}

/// Builds a training variant: "standard", "black", "noise" or "mixed".
#[pyfunction]
#[pyo3(signature = (data, kind, seed=0, noise_mean=0.5, noise_sigma=0.25))]
fn build_variant(data: &Dataset, kind: &str, seed: u64, noise_mean: f64, noise_sigma: f64) -> PyResult<Dataset> {
    let kind: VariantKind = kind.parse().map_err(py_err)?;
    let noise = NoiseParams {
        mean: noise_mean,
        sigma: noise_sigma,
        seed,
    };
    transforms::build_variant(&data.inner, kind, &noise, seed)
        .map(|v| Dataset { inner: v.data })
        .map_err(py_err)
}

/// The residual classifier.
#[pyclass(module = "fvlab")]
struct Model {
    inner: ResNetLite,
    classes: Vec<String>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (resolution=64, classes=8, seed=0, widths=None, blocks_per_stage=2))]
    fn new(resolution: usize, classes: usize, seed: u64, widths: Option<Vec<usize>>, blocks_per_stage: usize) -> PyResult<Self> {
        let mut cfg = ModelConfig::new(resolution, classes);
        if let Some(w) = widths {
            cfg.widths = w;
        }
        cfg.blocks_per_stage = blocks_per_stage;
        let inner = ResNetLite::init(cfg, seed).map_err(py_err)?;
        Ok(Model {
            inner,
            classes: (0..classes).map(|i| format!("class{i}")).collect(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = core_model::load_checkpoint(&path).map_err(py_err)?;
        Ok(Model {
            classes: ck.meta.classes.names().to_vec(),
            inner: ck.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let classes = dataset::ClassTable::new(self.classes.clone()).map_err(py_err)?;
        let ck = Checkpoint {
            model: self.inner.clone(),
            meta: CheckpointMeta::untrained(classes),
        };
        core_model::save_checkpoint(&ck, &path).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().classes
    }

    /// Eval-mode logits, one row per image of `data`.
    fn predict(&self, data: &Dataset) -> PyResult<Vec<Vec<f32>>> {
        let refs: Vec<_> = data.inner.images.iter().collect();
        let batch = training::batch_tensor(&refs).map_err(py_err)?;
        let logits = self.inner.predict(&batch).map_err(py_err)?;
        Ok(logits.data().chunks(self.num_classes()).map(|r| r.to_vec()).collect())
    }

    /// Trains in place; returns (train_acc, val_acc, final_loss).
    #[pyo3(signature = (train, val, epochs=30, learning_rate=0.05, batch_size=64, seed=0))]
    fn train(
        &mut self,
        py: Python<'_>,
        train: &Dataset,
        val: &Dataset,
        epochs: usize,
        learning_rate: f32,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(f64, f64, f64)> {
        let cfg = TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        self.classes = train.inner.classes.names().to_vec();
        let model = &mut self.inner;
        let m = py
            .detach(|| training::train(model, &train.inner, &val.inner, &cfg))
            .map_err(py_err)?;
        Ok((m.train_acc, m.val_acc, m.final_loss))
    }

    /// Returns (accuracy, mean cross-entropy).
    fn evaluate(&self, data: &Dataset) -> PyResult<(f64, f64)> {
        let e = training::evaluate(&self.inner, &data.inner).map_err(py_err)?;
        Ok((e.accuracy, e.loss))
    }

    /// Maximizes one class logit over the input image.
    #[pyo3(signature = (target_class, iterations=256, step=0.05, l2_lambda=1e-4, tv_lambda=2.5e-4, jitter=true, input_noise_sigma=0.01, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn visualize(
        &self,
        py: Python<'_>,
        target_class: usize,
        iterations: usize,
        step: f32,
        l2_lambda: f32,
        tv_lambda: f32,
        jitter: bool,
        input_noise_sigma: f32,
        seed: u64,
    ) -> PyResult<Visualization> {
        let cfg = VizConfig {
            target_class,
            iterations,
            step,
            l2_lambda,
            tv_lambda,
            jitter: Jitter {
                enabled: jitter,
                ..Jitter::default()
            },
            input_noise_sigma,
            seed,
            ..VizConfig::default()
        };
        let model = &self.inner;
        let inner = py.detach(|| featviz::visualize(model, &cfg)).map_err(py_err)?;
        Ok(Visualization { inner })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(resolution={}, classes={}, widths={:?}, parameters={})",
            c.resolution,
            c.classes,
            c.widths,
            self.inner.num_parameters()
        )
    }
}

/// Result of one visualization run.
#[pyclass(module = "fvlab")]
struct Visualization {
    inner: featviz::VizResult,
}

#[pymethods]
impl Visualization {
    #[getter]
    fn image(&self) -> Vec<f32> {
        self.inner.image.data().to_vec()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.image.shape().to_vec()
    }

    /// (iteration, raw_logit, objective) per iteration.
    #[getter]
    fn trace(&self) -> Vec<(usize, f32, f64)> {
        self.inner.trace.iter().map(|r| (r.iteration, r.raw_logit, r.objective)).collect()
    }

    fn to_ppm<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.to_ppm().map_err(py_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn trace_csv(&self) -> String {
        self.inner.trace_csv()
    }
}

/// Share of gradient energy inside `footprint` for a `[3, H, W]` image.
#[pyfunction]
fn foreground_energy(image: Vec<f32>, height: usize, width: usize, footprint: Vec<bool>) -> PyResult<f64> {
    let t = Tensor::new([image.len() / (height * width).max(1), height, width], image).map_err(py_err)?;
    featviz::foreground_energy(&t, &footprint).map_err(py_err)
}

/// A full experiment rooted at an output directory.
#[pyclass(module = "fvlab")]
struct Experiment {
    inner: CoreExperiment,
}

#[pymethods]
impl Experiment {
    /// `config` is experiment JSON; defaults apply to omitted fields.
    #[new]
    #[pyo3(signature = (out, config=None, seed=None))]
    fn new(out: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => ExperimentConfig::from_json(text).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            cfg.master_seed = s;
        }
        let inner = CoreExperiment::new(cfg, out).map_err(py_err)?;
        Ok(Experiment { inner })
    }

    #[pyo3(signature = (force=false))]
    fn generate_data(&self, py: Python<'_>, force: bool) -> PyResult<usize> {
        let exp = &self.inner;
        py.detach(|| exp.generate_data(force)).map(|s| s.images).map_err(py_err)
    }

    fn build_variants(&self, py: Python<'_>) -> PyResult<()> {
        let exp = &self.inner;
        py.detach(|| exp.build_variants()).map_err(py_err)
    }

    /// Returns {variant: (train_acc, val_acc, final_loss)}.
    fn train(&self, py: Python<'_>) -> PyResult<Vec<(String, (f64, f64, f64))>> {
        let exp = &self.inner;
        let runs = py.detach(|| exp.train()).map_err(py_err)?;
        Ok(runs
            .into_iter()
            .map(|(k, m)| (k.to_string(), (m.train_acc, m.val_acc, m.final_loss)))
            .collect())
    }

    fn visualize(&self, py: Python<'_>) -> PyResult<()> {
        let exp = &self.inner;
        py.detach(|| exp.visualize()).map_err(py_err)
    }

    fn report(&self, py: Python<'_>) -> PyResult<()> {
        let exp = &self.inner;
        py.detach(|| exp.report()).map_err(py_err)
    }

    #[pyo3(signature = (force=false))]
    fn run(&self, py: Python<'_>, force: bool) -> PyResult<()> {
        let exp = &self.inner;
        py.detach(|| exp.run(force)).map_err(py_err)
    }

    /// Stage name and state ("pending", "ok" or "failed"), in order.
    fn status(&self) -> Vec<(String, String)> {
        self.inner
            .read_status()
            .stages
            .into_iter()
            .map(|s| (s.name, state_name(s.state)))
            .collect()
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }
}

fn state_name(state: fvlab_core::experiment::StageState) -> String {
    use fvlab_core::experiment::StageState::*;
    match state {
        Pending => "pending",
        Ok => "ok",
        Failed => "failed",
    }
    .to_string()
}

/// Stage seed derived from a master seed.
#[pyfunction]
#[pyo3(signature = (master, stage, index=0))]
fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    fvlab_core::seed::derive_seed(master, stage, index)
}

#[pymodule]
fn fvlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Visualization>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(build_variant, m)?)?;
    m.add_function(wrap_pyfunction!(foreground_energy, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add("VARIANTS", VariantKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
