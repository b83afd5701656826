use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uniseg::checkpoint::{load_checkpoint, save_checkpoint};
use uniseg::data::augment::AugmentConfig;
use uniseg::data::format;
use uniseg::data::phantom::{generate_phantom, PhantomSpec};
use uniseg::losses::{self, Domain, LossParams};
use uniseg::metrics;
use uniseg::network::{count_macs, count_parameters};
use uniseg::optim::OneCycleSchedule;
use uniseg::trainer::{self, TrainConfig, TrainData};
use uniseg::{AttentionUNet, Error, ModelConfig, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn domain(name: &str) -> PyResult<Domain> {
    name.parse().map_err(py_err)
}

fn model_config(stage_channels: Vec<usize>, input_size: usize) -> PyResult<ModelConfig> {
    let config = ModelConfig {
        input_size,
        ..ModelConfig::with_stages(stage_channels)
    };
    config.validate().map_err(py_err)?;
    Ok(config)
}

/// One image slice: `image` is 4 x size x size and `mask` size x size,
/// both flattened row-major.
#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: uniseg::data::Sample,
}

#[pymethods]
impl PySample {
    #[new]
    fn new(id: String, domain_name: &str, image: Vec<f64>, mask: Vec<f64>, size: usize) -> PyResult<Self> {
        let channels = image.len() / (size * size).max(1);
        let image = Tensor::new([channels, size, size], image).map_err(py_err)?;
        let mask = Tensor::new([1, size, size], mask).map_err(py_err)?;
        let inner = uniseg::data::Sample::new(id, domain(domain_name)?, image, mask).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn domain(&self) -> &'static str {
        self.inner.domain.name()
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn image(&self) -> Vec<f64> {
        self.inner.image.data().to_vec()
    }

    #[getter]
    fn mask(&self) -> Vec<f64> {
        self.inner.mask.data().to_vec()
    }

    fn mask_fraction(&self) -> f64 {
        self.inner.mask_fraction()
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        format::write_sample(&path, &self.inner).map_err(py_err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = format::read_sample(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(id={:?}, domain={}, size={})",
            self.inner.id,
            self.inner.domain,
            self.size()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (domain_name, n, size=128, seed=0))]
fn phantoms(domain_name: &str, n: usize, size: usize, seed: u64) -> PyResult<Vec<PySample>> {
    let samples = generate_phantom(&PhantomSpec::new(size, seed), domain(domain_name)?, n).map_err(py_err)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

/// Attention U-Net with its weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: AttentionUNet,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (stage_channels=vec![64, 128], input_size=128, seed=0))]
    fn new(stage_channels: Vec<usize>, input_size: usize, seed: u64) -> PyResult<Self> {
        let config = model_config(stage_channels, input_size)?;
        let inner = AttentionUNet::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let params = load_checkpoint(&path).map_err(py_err)?;
        let config = ModelConfig::infer(&params).map_err(py_err)?;
        let inner = AttentionUNet::from_params(config, params).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner.params).map_err(py_err)
    }

    #[getter]
    fn stage_channels(&self) -> Vec<usize> {
        self.inner.config.stage_channels.clone()
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Probability map (size x size, flattened) for one 4-channel image.
    fn predict(&self, image: Vec<f64>, size: usize) -> PyResult<Vec<f64>> {
        let channels = self.inner.config.in_channels;
        let x = Tensor::new([1, channels, size, size], image).map_err(py_err)?;
        Ok(self.inner.predict(&x).map_err(py_err)?.into_data())
    }

    /// Per-domain mean loss and mean per-sample Dice at threshold 0.5.
    fn validate(&self, samples: Vec<PySample>) -> PyResult<Vec<(String, f64, f64)>> {
        let table = losses::LossTable::default();
        let mut out = Vec::new();
        for d in Domain::ALL {
            let subset: Vec<_> = samples
                .iter()
                .filter(|s| s.inner.domain == d)
                .map(|s| s.inner.clone())
                .collect();
            if subset.is_empty() {
                continue;
            }
            let score = trainer::validate(&self.inner, &subset, &table.get(d), 8).map_err(py_err)?;
            out.push((d.name().to_string(), score.loss, score.dice));
        }
        Ok(out)
    }

    /// Pretraining plus joint training; returns the curves CSV text and
    /// leaves the model at the best checkpoint.
    #[pyo3(signature = (mri_train, ct_train, mri_val, ct_val, joint_epochs, pretrain_epochs=5, batch_size=8, lr=1e-4, seed=0, augment=true))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        mri_train: Vec<PySample>,
        ct_train: Vec<PySample>,
        mri_val: Vec<PySample>,
        ct_val: Vec<PySample>,
        joint_epochs: usize,
        pretrain_epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
        augment: bool,
    ) -> PyResult<String> {
        let unwrap = |v: Vec<PySample>| v.into_iter().map(|s| s.inner).collect();
        let data = TrainData {
            mri_train: unwrap(mri_train),
            ct_train: unwrap(ct_train),
            mri_val: unwrap(mri_val),
            ct_val: unwrap(ct_val),
        };
        let config = TrainConfig {
            pretrain_epochs,
            joint_epochs,
            batch_size,
            lr,
            seed,
            augment: if augment {
                AugmentConfig::default()
            } else {
                AugmentConfig::none()
            },
            image_size: self.inner.config.input_size,
            ..TrainConfig::default()
        };
        let model = &mut self.inner;
        let outcome = py.detach(|| trainer::train(model, &data, &config)).map_err(py_err)?;
        self.inner.params = outcome.best;
        if outcome.records.is_empty() {
            return Ok(String::new());
        }
        trainer::curves_csv(&outcome.records).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (stage_channels=vec![64, 128], input_size=128))]
fn parameter_count(stage_channels: Vec<usize>, input_size: usize) -> PyResult<usize> {
    Ok(count_parameters(&model_config(stage_channels, input_size)?))
}

#[pyfunction]
#[pyo3(signature = (stage_channels=vec![64, 128], input_size=128))]
fn mac_count(stage_channels: Vec<usize>, input_size: usize) -> PyResult<u64> {
    count_macs(&model_config(stage_channels, input_size)?).map_err(py_err)
}

fn loss_params(alpha: f64, beta: f64, gamma: f64, epsilon: f64) -> PyResult<LossParams> {
    let params = LossParams {
        epsilon,
        ..LossParams::new(alpha, beta, gamma)
    };
    params.validate().map_err(py_err)?;
    Ok(params)
}

#[pyfunction]
#[pyo3(signature = (probs, truth, alpha=0.5, beta=0.5, epsilon=1e-6))]
fn tversky_index(probs: Vec<f64>, truth: Vec<f64>, alpha: f64, beta: f64, epsilon: f64) -> PyResult<f64> {
    losses::tversky_index(&probs, &truth, &loss_params(alpha, beta, 1.0, epsilon)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (probs, truth, alpha=0.5, beta=0.5, gamma=4.0 / 3.0, epsilon=1e-6))]
fn focal_tversky_loss(
    probs: Vec<f64>,
    truth: Vec<f64>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    epsilon: f64,
) -> PyResult<f64> {
    losses::focal_tversky_loss(&probs, &truth, &loss_params(alpha, beta, gamma, epsilon)?).map_err(py_err)
}

#[pyfunction]
fn dice(pred: Vec<bool>, truth: Vec<bool>) -> PyResult<f64> {
    metrics::dice(&pred, &truth).map_err(py_err)
}

#[pyfunction]
fn iou(pred: Vec<bool>, truth: Vec<bool>) -> PyResult<f64> {
    metrics::iou(&pred, &truth).map_err(py_err)
}

/// `(tp, fp, tn, fn)`.
#[pyfunction]
fn confusion(pred: Vec<bool>, truth: Vec<bool>) -> PyResult<(u64, u64, u64, u64)> {
    let c = metrics::confusion(&pred, &truth).map_err(py_err)?;
    Ok((c.tp, c.fp, c.tn, c.fn_))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (max_lr, total_steps, step, pct_start=0.3))]
fn one_cycle_lr(max_lr: f64, total_steps: usize, step: usize, pct_start: f64) -> PyResult<f64> {
    let schedule = OneCycleSchedule {
        pct_start,
        ..OneCycleSchedule::new(max_lr, total_steps)
    };
    schedule.validate().map_err(py_err)?;
    schedule.lr(step).map_err(py_err)
}

#[pymodule]
fn uniseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(mac_count, m)?)?;
    m.add_function(wrap_pyfunction!(tversky_index, m)?)?;
    m.add_function(wrap_pyfunction!(focal_tversky_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(one_cycle_lr, m)?)?;
    Ok(())
}
