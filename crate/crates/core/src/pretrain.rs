//! The pretrained base: semantic encoder, frozen denoiser, toy embedding
//! backend and a Gaussian prior over semantic latents, all trained in-repo.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::face_corpus;
use crate::diffae::{
    as_batch, check_image, encode_semantic, unbatch, ConditionalDenoiser, Conditioning, DiffAeConfig,
    SemanticEncoder, SemanticLatent, WithLatent,
};
use crate::diffusion::{sample_from_noise, NoiseSchedule, ReverseVariance, SamplerKind};
use crate::embedders::{train_toy_backend, BackendTrainConfig, ToyBackend, ToyBackendConfig};
use crate::error::{Error, Result};
use crate::image_io::read_png;
use crate::nn::{Ctx, Module};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    /// Defaults to `1e-4 * 1000 / T`.
    pub beta_start: Option<f64>,
    /// Defaults to `0.02 * 1000 / T`.
    pub beta_end: Option<f64>,
    pub variance: ReverseVariance,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 100,
            beta_start: None,
            beta_end: None,
            variance: ReverseVariance::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let scale = 1000.0 / self.total_steps.max(1) as f64;
        NoiseSchedule::build_with_variance(
            self.total_steps,
            self.beta_start.unwrap_or(1e-4 * scale),
            self.beta_end.unwrap_or(0.02 * scale),
            crate::diffusion::BetaKind::Linear,
            self.variance,
        )
    }
}

/// Where pretraining images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Render procedural faces on the fly.
    pub generate: bool,
    /// Directory of PNG images used when `generate` is off.
    pub dir: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            generate: true,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: DiffAeConfig,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Probability of replacing a sample's latent by zeros, which trains the
    /// same network as an unconditional denoiser.
    pub uncond_prob: f64,
    pub ema_decay: f64,
    /// Corpus images whose latents fit the Gaussian prior.
    pub prior_samples: usize,
    pub corpus: CorpusConfig,
    pub backend: ToyBackendConfig,
    pub backend_train: BackendTrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: DiffAeConfig::default(),
            steps: 4000,
            batch: 16,
            learning_rate: 1e-3,
            uncond_prob: 0.1,
            ema_decay: 0.995,
            prior_samples: 256,
            corpus: CorpusConfig::default(),
            backend: ToyBackendConfig::default(),
            backend_train: BackendTrainConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        if self.batch == 0 || self.prior_samples < 2 {
            return Err(Error::Config("batch must be >= 1 and prior_samples >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.uncond_prob) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("uncond_prob and ema_decay must lie in [0, 1)".into()));
        }
        if !self.corpus.generate && self.corpus.dir.is_none() {
            return Err(Error::Config("no corpus directory given and generation is disabled".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over semantic latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPrior {
    pub mean: Tensor,
    pub std: Tensor,
}

impl LatentPrior {
    pub fn fit(latents: &[SemanticLatent]) -> Result<Self> {
        if latents.len() < 2 {
            return Err(Error::Parameter("a latent prior needs at least two samples".into()));
        }
        let d = latents[0].dim();
        let n = latents.len() as f64;
        let mut mean = vec![0.0; d];
        for z in latents {
            mean.iter_mut().zip(z.0.data()).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for z in latents {
            var.iter_mut()
                .zip(z.0.data().iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m).powi(2) / (n - 1.0));
        }
        Ok(Self {
            mean: Tensor::new(&[d], mean)?,
            std: Tensor::new(&[d], var.into_iter().map(f64::sqrt).collect())?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SemanticLatent {
        let eps = Tensor::randn(self.mean.shape(), rng);
        SemanticLatent(self.mean.add(&eps.mul(&self.std)))
    }
}

/// Source of training and reference images.
#[derive(Clone, Debug)]
pub enum Corpus {
    Procedural,
    Images(Vec<Tensor>),
}

impl Corpus {
    pub fn from_config(cfg: &CorpusConfig, model: &DiffAeConfig) -> Result<Self> {
        if cfg.generate {
            return Ok(Corpus::Procedural);
        }
        let dir = cfg
            .dir
            .as_ref()
            .ok_or_else(|| Error::Config("no corpus directory given and generation is disabled".into()))?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| {
                let img = read_png(p)?;
                check_image(model, &img)?;
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::Config(format!("corpus directory {} holds no PNG images", dir.display())));
        }
        Ok(Corpus::Images(images))
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Tensor> {
        match self {
            Corpus::Procedural => face_corpus(n, rng),
            Corpus::Images(imgs) => (0..n).map(|_| imgs[rng.random_range(0..imgs.len())].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaseModel {
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub encoder: SemanticEncoder,
    pub eps_a: ConditionalDenoiser,
    pub backend: ToyBackend,
    pub prior: LatentPrior,
}

impl BaseModel {
    pub fn config(&self) -> &DiffAeConfig {
        &self.eps_a.config
    }

    pub fn write_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.set_meta("model_config", to_toml(self.config())?);
        ck.set_meta("schedule_config", to_toml(&self.schedule_config)?);
        ck.set_meta("backend_config", to_toml(&self.backend.config)?);
        ck.insert_module("encoder", &self.encoder);
        ck.insert_module("eps_a", &self.eps_a);
        ck.insert_module("backend", &self.backend);
        ck.insert("prior.mean", &self.prior.mean);
        ck.insert("prior.std", &self.prior.std);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "base");
        self.write_into(&mut ck)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: DiffAeConfig = from_toml(ck.meta("model_config")?)?;
        let schedule_config: ScheduleConfig = from_toml(ck.meta("schedule_config")?)?;
        let backend_config: ToyBackendConfig = from_toml(ck.meta("backend_config")?)?;
        let mut encoder = SemanticEncoder::new(&config, 0)?;
        ck.load_module("encoder", &mut encoder)?;
        let schedule = schedule_config.build()?;
        let mut eps_a = ConditionalDenoiser::new(&config, 0)?.precondition(&schedule);
        ck.load_module("eps_a", &mut eps_a)?;
        let mut backend = ToyBackend::new(&backend_config, 0)?;
        ck.load_module("backend", &mut backend)?;
        Ok(Self {
            schedule,
            schedule_config,
            encoder,
            eps_a,
            backend,
            prior: LatentPrior {
                mean: ck.tensor("prior.mean")?.clone(),
                std: ck.tensor("prior.std")?.clone(),
            },
        })
    }

    /// Decodes a sample from noise `x_t` at `T` under `z` with `eps_A`.
    pub fn generate(&self, z: &SemanticLatent, x_t: &Tensor, kind: SamplerKind, steps: usize, seed: u64) -> Result<Tensor> {
        check_image(self.config(), x_t)?;
        let model = WithLatent { model: &self.eps_a, z };
        let out = sample_from_noise(&model, &as_batch(x_t), kind, steps, seed, &self.schedule)?;
        Ok(unbatch(out))
    }

    /// Digest over the frozen networks (encoder, denoiser, backend).
    pub fn frozen_digest(&self) -> String {
        format!(
            "{}:{}:{}",
            self.encoder.param_digest(),
            self.eps_a.param_digest(),
            self.backend.param_digest()
        )
    }
}

pub(crate) fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Format(format!("serializing metadata: {e}")))
}

pub(crate) fn from_toml<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    toml::from_str(s).map_err(|e| Error::Format(format!("parsing metadata: {e}")))
}

fn ema_update<M: Module>(ema: &mut M, live: &M, decay: f64) {
    let mut live_params = Vec::new();
    live.visit("", &mut |_, t| live_params.push(t.clone()));
    let mut i = 0;
    ema.visit_mut("", &mut |_, t| {
        let src = &live_params[i];
        let d = t.data_mut();
        for (e, v) in d.iter_mut().zip(src.data()) {
            *e = decay * *e + (1.0 - decay) * v;
        }
        i += 1;
    });
}

/// Result of [`pretrain`]: the model plus per-step `L_simple` values.
pub struct PretrainOutput {
    pub model: BaseModel,
    pub losses: Vec<f64>,
    pub backend_losses: Vec<f64>,
}

/// Trains the toy backend, then the semantic encoder and denoiser jointly on
/// `||eps - eps_theta(x_t, t, z)||^2`, then fits the latent prior.
pub fn pretrain(cfg: &PretrainConfig) -> Result<PretrainOutput> {
    pretrain_with_progress(cfg, &mut |_, _| {})
}

pub fn pretrain_with_progress(cfg: &PretrainConfig, progress: &mut dyn FnMut(usize, f64)) -> Result<PretrainOutput> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let corpus = Corpus::from_config(&cfg.corpus, &cfg.model)?;
    let (backend, backend_losses) = train_toy_backend(&cfg.backend, &cfg.backend_train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = SemanticEncoder::new(&cfg.model, rng.random())?;
    let mut eps = ConditionalDenoiser::new(&cfg.model, rng.random())?.precondition(&schedule);
    let (mut ema_enc, mut ema_eps) = (encoder.clone(), eps.clone());
    let (mut opt_enc, mut opt_eps) = (Adam::new(cfg.learning_rate), Adam::new(cfg.learning_rate));
    let total = schedule.total_steps();
    let d = cfg.model.latent_dim;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let x0 = Tensor::cat0(&corpus.draw(cfg.batch, &mut rng).iter().map(as_batch).collect::<Vec<_>>())?;
        let ts: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(1..=total))
            .collect();
        let noise = Tensor::randn(x0.shape(), &mut rng);
        let per = x0.numel() / cfg.batch;
        let mut xt = x0.data().to_vec();
        for (b, &t) in ts.iter().enumerate() {
            let ab = schedule.alpha_bar(t);
            for i in b * per..(b + 1) * per {
                xt[i] = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * noise.data()[i];
            }
        }
        let xt = Tensor::new(x0.shape(), xt)?;
        let keep: Vec<f64> = (0..cfg.batch)
            .flat_map(|_| {
                let k = if rng.random_bool(cfg.uncond_prob) { 0.0 } else { 1.0 };
                std::iter::repeat_n(k, d)
            })
            .collect();

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let z = encoder.forward(ctx, &tape.constant(x0));
        let z = z.mul(&tape.constant(Tensor::new(&[cfg.batch, d], keep)?));
        let pred = eps.forward(ctx, &tape.constant(xt), &ts, &Conditioning::Single(z))?;
        let loss = pred.sub(&tape.constant(noise)).square().mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        losses.push(value);
        progress(step, value);
        let grads = tape.backward(&loss);
        opt_enc.step(&mut encoder, &grads);
        opt_eps.step(&mut eps, &grads);
        ema_update(&mut ema_enc, &encoder, cfg.ema_decay);
        ema_update(&mut ema_eps, &eps, cfg.ema_decay);
    }

    let prior_images = corpus.draw(cfg.prior_samples, &mut rng);
    let latents = prior_images
        .iter()
        .map(|img| encode_semantic(&ema_enc, img))
        .collect::<Result<Vec<_>>>()?;
    let prior = LatentPrior::fit(&latents)?;
    Ok(PretrainOutput {
        model: BaseModel {
            schedule_config: cfg.schedule.clone(),
            schedule,
            encoder: ema_enc,
            eps_a: ema_eps,
            backend,
            prior,
        },
        losses,
        backend_losses,
    })
}
