use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use diffstyle::checkpoint::Checkpoint;
use diffstyle::cli::toy_style_image;
use diffstyle::config::RunConfig;
use diffstyle::data::{artifact_corpus, Face};
use diffstyle::diffae::{encode_semantic, SplitPoint};
use diffstyle::evaluation::{self, ReconstructOptions};
use diffstyle::finetune::{self, FinetuneConfig};
use diffstyle::image_io::{read_png, write_png};
use diffstyle::losses;
use diffstyle::pretrain::{self, PretrainConfig};
use diffstyle::sampler::{self, StylizeOptions, TextEditOptions};
use diffstyle::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(diffstyle, DiffstyleError, PyException);
create_exception!(diffstyle, ConfigError, DiffstyleError);
create_exception!(diffstyle, IoError, DiffstyleError);
create_exception!(diffstyle, ComputeError, DiffstyleError);

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => ConfigError::new_err(e.to_string()),
        3 => IoError::new_err(e.to_string()),
        _ => ComputeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for diffstyle::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A `[C, H, W]` image with values in `[-1, 1]`.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage(Tensor);

#[pymethods]
impl PyImage {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self(Tensor::new(&shape, data).py()?))
    }

    #[staticmethod]
    fn read_png(path: PathBuf) -> PyResult<Self> {
        Ok(Self(read_png(&path).py()?))
    }

    /// A procedural toy face.
    #[staticmethod]
    fn toy_face(seed: u64) -> Self {
        Self(Face::sample(&mut ChaCha8Rng::seed_from_u64(seed)).render())
    }

    /// The poster-filtered toy face used as the default style image.
    #[staticmethod]
    fn toy_style(seed: u64) -> Self {
        Self(toy_style_image(seed))
    }

    fn write_png(&self, path: PathBuf) -> PyResult<()> {
        write_png(&path, &self.0).py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn mean_abs_diff(&self, other: &PyImage) -> f64 {
        self.0.mean_abs_diff(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("Image(shape={:?})", self.0.shape())
    }
}

fn run_config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(t) => RunConfig::parse(t).py(),
        None => Ok(RunConfig::default()),
    }
}

/// Pretrained encoder, domain-A denoiser, toy backend and latent prior.
#[pyclass(name = "BaseModel")]
struct PyBaseModel(pretrain::BaseModel);

#[pymethods]
impl PyBaseModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(pretrain::BaseModel::from_checkpoint(&Checkpoint::load(&path).py()?).py()?))
    }

    /// Pretrains from a run-config TOML (its `[pretrain]` table).
    #[staticmethod]
    #[pyo3(signature = (config=None, steps=None, seed=None))]
    fn pretrain(config: Option<&str>, steps: Option<usize>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg: PretrainConfig = run_config(config)?.pretrain;
        if let Some(s) = steps {
            cfg.steps = s;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self(pretrain::pretrain(&cfg).py()?.model))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.to_checkpoint().py()?.save(&path).py()
    }

    fn encode(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        Ok(encode_semantic(&self.0.encoder, &image.0).py()?.0.data().to_vec())
    }

    fn frozen_digest(&self) -> String {
        self.0.frozen_digest()
    }

    fn stochastic_reconstruct(&self, image: &PyImage, seed: u64) -> PyResult<PyImage> {
        Ok(PyImage(evaluation::stochastic_reconstruct(&self.0, &image.0, seed).py()?))
    }

    /// `(style_a, selection_score, candidate_scores)`.
    #[pyo3(signature = (style, t0=50, candidates=30, seed=0))]
    fn prepare_style_pair(&self, style: &PyImage, t0: usize, candidates: usize, seed: u64) -> PyResult<(PyImage, f64, Vec<f64>)> {
        let pair = finetune::prepare_style_pair(&self.0, &style.0, t0, candidates, seed).py()?;
        Ok((PyImage(pair.style_a), pair.selection_score, pair.candidate_scores))
    }

    /// Density ranking of `images` as `(id, score, rank, bucket)` rows in rank order.
    #[pyo3(signature = (images, k, seed=0, repeats=1))]
    fn density_rank(&self, images: Vec<PyImage>, k: usize, seed: u64, repeats: usize) -> PyResult<Vec<(String, f64, usize, String)>> {
        let corpus: Vec<(String, Tensor)> = images.into_iter().enumerate().map(|(i, im)| (i.to_string(), im.0)).collect();
        let opts = ReconstructOptions {
            repeats,
            ..Default::default()
        };
        let recs = evaluation::density_rank(&self.0, &corpus, k, seed, &opts).py()?;
        Ok(recs
            .into_iter()
            .map(|r| (r.image_id, r.perceptual_score, r.rank, r.bucket.as_str().to_string()))
            .collect())
    }

    /// `(edited image, best loss, directional cosine)`.
    #[pyo3(signature = (image, source, target, steps=30, learning_rate=0.05))]
    fn text_edit(&self, image: &PyImage, source: &str, target: &str, steps: usize, learning_rate: f64) -> PyResult<(PyImage, f64, f64)> {
        let opts = TextEditOptions {
            steps,
            learning_rate,
            ..Default::default()
        };
        let edit = sampler::optimize_semantic_for_text(&self.0, &image.0, source, target, &opts).py()?;
        let cos = edit.cosine();
        Ok((PyImage(edit.image), edit.best_loss, cos))
    }

    fn structure_distance(&self, a: &PyImage, b: &PyImage) -> PyResult<f64> {
        evaluation::structure_distance_proxy(&self.0.backend, &a.0, &b.0).py()
    }

    fn id_similarity(&self, a: &PyImage, b: &PyImage) -> PyResult<f64> {
        evaluation::id_similarity_proxy(&self.0.backend, &a.0, &b.0).py()
    }
}

/// A finetuned domain-B model with its SPN and style pair.
#[pyclass(name = "Finetuned")]
struct PyFinetuned(finetune::Finetuned);

#[pymethods]
impl PyFinetuned {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(finetune::Finetuned::from_checkpoint(&Checkpoint::load(&path).py()?).py()?))
    }

    /// Finetunes from a run-config TOML (its `[finetune.training]` table).
    #[staticmethod]
    #[pyo3(signature = (base, style, config=None, iterations=None, seed=None))]
    fn finetune(base: &PyBaseModel, style: &PyImage, config: Option<&str>, iterations: Option<usize>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg: FinetuneConfig = run_config(config)?.finetune.training;
        if let Some(i) = iterations {
            cfg.iterations = i;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self(finetune::finetune(&cfg, &base.0, &style.0).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.to_checkpoint().py()?.save(&path).py()
    }

    fn digest(&self) -> PyResult<String> {
        Ok(self.0.to_checkpoint().py()?.digest())
    }

    fn total_losses(&self) -> Vec<f64> {
        self.0.metrics.iter().map(|r| r.total).collect()
    }

    #[getter]
    fn style_a(&self) -> PyImage {
        PyImage(self.0.pair.style_a.clone())
    }

    #[pyo3(signature = (image, f_ch="32", lambda_spn=0.1, t0=50))]
    fn stylize(&self, image: &PyImage, f_ch: &str, lambda_spn: f64, t0: usize) -> PyResult<PyImage> {
        let opts = StylizeOptions {
            f_ch: SplitPoint::parse(f_ch).py()?,
            lambda_spn,
            t0,
            ..Default::default()
        };
        Ok(PyImage(sampler::stylize(&self.0, &image.0, &opts).py()?))
    }

    #[pyo3(signature = (image, source, target, f_ch="32", lambda_spn=0.1, recompute_x_t0=false))]
    fn stylize_with_text(
        &self,
        image: &PyImage,
        source: &str,
        target: &str,
        f_ch: &str,
        lambda_spn: f64,
        recompute_x_t0: bool,
    ) -> PyResult<PyImage> {
        let opts = StylizeOptions {
            f_ch: SplitPoint::parse(f_ch).py()?,
            lambda_spn,
            ..Default::default()
        };
        let out = sampler::stylize_with_text(&self.0, &image.0, source, target, &opts, &TextEditOptions::default(), recompute_x_t0);
        Ok(PyImage(out.py()?))
    }
}

/// `1 - cos(a, b)` of two equal-length vectors.
#[pyfunction]
fn directional_loss(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let n = a.len();
    losses::directional_loss(&Tensor::new(&[n], a).py()?, &Tensor::new(&[b.len()], b).py()?).py()
}

/// `n` toy faces whose odd entries carry occluding artifacts, as `(image, is_artifact)`.
#[pyfunction]
fn toy_artifact_corpus(n: usize, seed: u64) -> Vec<(PyImage, bool)> {
    artifact_corpus(n, &mut ChaCha8Rng::seed_from_u64(seed))
        .into_iter()
        .map(|(t, a)| (PyImage(t), a))
        .collect()
}

#[pyfunction]
fn auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    evaluation::auc(&scores, &positive).py()
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    diffstyle::cli::main_with_args(std::iter::once("diffstyle".to_string()).chain(args))
}

#[pymodule(name = "diffstyle")]
fn diffstyle_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DiffstyleError", m.py().get_type::<DiffstyleError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("IoError", m.py().get_type::<IoError>())?;
    m.add("ComputeError", m.py().get_type::<ComputeError>())?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyBaseModel>()?;
    m.add_class::<PyFinetuned>()?;
    m.add_function(wrap_pyfunction!(directional_loss, m)?)?;
    m.add_function(wrap_pyfunction!(toy_artifact_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
