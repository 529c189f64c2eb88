//! Style-pair preparation and the finetuning loop that produces the
//! domain-B denoiser and the structure-preserving network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::diffae::{
    as_batch, check_image, diffae_encode, encode_semantic, unbatch, ConditionalDenoiser, Conditioned, Conditioning,
    SemanticLatent, StructuralLatent,
};
use crate::diffusion::{forward_marginal, run_trajectory_var, Direction, Mode, SamplerKind, TimestepSubsequence};
use crate::embedders::perceptual_distance;
use crate::error::{Error, Result};
use crate::losses::{cross_domain_loss_var, in_domain_loss_var, reconstruction_loss_var, LossReport, LossWeights};
use crate::nn::Ctx;
use crate::optim::Adam;
use crate::pretrain::{from_toml, to_toml, BaseModel, Corpus, CorpusConfig};
use crate::spn::{decode_with_spn_var, Spn, SpnConfig, SpnGuide};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    LatentPrior,
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub t0: usize,
    /// Must match the base model's schedule length.
    pub total_steps: usize,
    pub weights: LossWeights,
    pub lambda_spn: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub candidates: usize,
    pub input_source: InputSource,
    /// Strided DDIM steps from `t0` to 0 used (and back-propagated through)
    /// during training.
    pub train_steps: usize,
    /// Sampler and DDIM stride count used to decode prior samples into inputs.
    pub sampler: SamplerKind,
    pub sample_steps: usize,
    /// Images used when `input_source = "corpus"`.
    pub corpus: CorpusConfig,
    /// How many procedural faces make up a generated corpus.
    pub corpus_size: usize,
    pub spn: SpnConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            t0: 50,
            total_steps: 100,
            weights: LossWeights::default(),
            lambda_spn: 0.1,
            iterations: 200,
            learning_rate: 1e-4,
            seed: 0,
            candidates: 30,
            input_source: InputSource::LatentPrior,
            train_steps: 8,
            sampler: SamplerKind::Ddim,
            sample_steps: 20,
            corpus: CorpusConfig::default(),
            corpus_size: 64,
            spn: SpnConfig::default(),
        }
    }
}

impl FinetuneConfig {
    /// `iterations = 0` is allowed here so the untrained state can be
    /// produced; run configurations additionally require at least one.
    pub fn validate(&self) -> Result<()> {
        if self.t0 == 0 || self.t0 > self.total_steps {
            return Err(Error::Config(format!("t0 = {} must lie in 1..={}", self.t0, self.total_steps)));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be >= 1".into()));
        }
        if self.train_steps == 0 || self.train_steps > self.t0 {
            return Err(Error::Config(format!("train_steps = {} must lie in 1..=t0", self.train_steps)));
        }
        if self.sample_steps == 0 || self.sample_steps > self.total_steps {
            return Err(Error::Config(format!("sample_steps = {} must lie in 1..=T", self.sample_steps)));
        }
        if !(self.lambda_spn >= 0.0 && self.lambda_spn.is_finite()) {
            return Err(Error::Config(format!("lambda_spn = {} must be >= 0", self.lambda_spn)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.input_source == InputSource::Corpus && self.corpus.generate && self.corpus_size == 0 {
            return Err(Error::Config("corpus input needs corpus_size >= 1".into()));
        }
        self.weights.validate()?;
        self.spn.validate()
    }

    fn check_base(&self, base: &BaseModel) -> Result<()> {
        if base.schedule.total_steps() != self.total_steps {
            return Err(Error::Config(format!(
                "config T = {} but the base model was trained with T = {}",
                self.total_steps,
                base.schedule.total_steps()
            )));
        }
        if self.spn.image_channels != base.config().image_channels {
            return Err(Error::Config("SPN channel count differs from the model's".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StylePair {
    pub style_b: Tensor,
    pub style_a: Tensor,
    pub selection_score: f64,
    pub candidate_count: usize,
    /// Score of every candidate, in generation order.
    pub candidate_scores: Vec<f64>,
}

/// Seed of the `index`-th style candidate.
fn candidate_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1)
}

/// One photorealistic candidate: forward DDPM of `style_b` to `t0`, then
/// reverse DDPM to 0 with the unconditional (zero-latent) denoiser.
pub fn style_candidate(base: &BaseModel, style_b: &Tensor, t0: usize, seed: u64, index: usize) -> Result<Tensor> {
    check_image(base.config(), style_b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed(seed, index));
    let noise = Tensor::randn(style_b.shape(), &mut rng);
    let x_t0 = forward_marginal(style_b, t0, &noise, &base.schedule)?;
    let tape = Tape::inference();
    let model = Conditioned {
        model: &base.eps_a,
        ctx: Ctx::frozen(&tape),
        cond: Conditioning::Single(tape.constant(SemanticLatent::zeros(base.config().latent_dim).as_row())),
    };
    let steps = TimestepSubsequence::full(t0);
    let out = run_trajectory_var(
        &model,
        &tape.constant(as_batch(&x_t0)),
        &steps,
        Direction::Decode,
        Mode::Ddpm,
        rng.random(),
        &base.schedule,
        false,
    )?;
    Ok(unbatch(out.output.into_value()))
}

/// `L1 + perceptual distance` between a candidate and the style image.
pub fn score_style_candidate(base: &BaseModel, candidate: &Tensor, style_b: &Tensor) -> Result<f64> {
    Ok(candidate.mean_abs_diff(style_b) + perceptual_distance(&base.backend, candidate, style_b)?)
}

/// Generates `n_candidates` photorealistic counterparts of `style_b` and keeps
/// the closest. Ties go to the earliest candidate.
pub fn prepare_style_pair(
    base: &BaseModel,
    style_b: &Tensor,
    t0: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<StylePair> {
    if n_candidates == 0 {
        return Err(Error::Parameter("at least one style candidate is needed".into()));
    }
    if t0 == 0 || t0 > base.schedule.total_steps() {
        return Err(Error::Parameter(format!("t0 = {t0} outside 1..={}", base.schedule.total_steps())));
    }
    let mut best: Option<(f64, Tensor)> = None;
    let mut scores = Vec::with_capacity(n_candidates);
    for i in 0..n_candidates {
        let cand = style_candidate(base, style_b, t0, seed, i)?;
        let score = score_style_candidate(base, &cand, style_b)?;
        scores.push(score);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, cand));
        }
    }
    let (selection_score, style_a) = best.expect("at least one candidate");
    Ok(StylePair {
        style_b: style_b.clone(),
        style_a,
        selection_score,
        candidate_count: n_candidates,
        candidate_scores: scores,
    })
}

/// Source of the per-iteration photorealistic inputs `I_in_A`.
pub enum InputPool {
    LatentPrior { sampler: SamplerKind, steps: usize },
    Images(Vec<Tensor>),
}

impl InputPool {
    pub fn from_config(cfg: &FinetuneConfig, base: &BaseModel) -> Result<Self> {
        match cfg.input_source {
            InputSource::LatentPrior => Ok(InputPool::LatentPrior {
                sampler: cfg.sampler,
                steps: cfg.sample_steps,
            }),
            InputSource::Corpus => {
                let images = match Corpus::from_config(&cfg.corpus, base.config())? {
                    Corpus::Images(imgs) => imgs,
                    Corpus::Procedural => {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FFEE);
                        Corpus::Procedural.draw(cfg.corpus_size, &mut rng)
                    }
                };
                if images.is_empty() {
                    return Err(Error::Config("input corpus is empty".into()));
                }
                Ok(InputPool::Images(images))
            }
        }
    }
}

/// Latent-prior mode decodes a prior sample with `eps_A`; corpus mode draws
/// a held image uniformly.
pub fn sample_input_image<R: Rng + ?Sized>(base: &BaseModel, pool: &InputPool, rng: &mut R) -> Result<Tensor> {
    match pool {
        InputPool::LatentPrior { sampler, steps } => {
            let z = base.prior.sample(rng);
            let x_t = Tensor::randn(&base.config().image_shape(), rng);
            base.generate(&z, &x_t, *sampler, *steps, rng.random())
        }
        InputPool::Images(images) => {
            if images.is_empty() {
                return Err(Error::Config("input corpus is empty".into()));
            }
            Ok(images[rng.random_range(0..images.len())].clone())
        }
    }
}

/// Trainable parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub eps_b: ConditionalDenoiser,
    pub spn: Spn,
    opt_eps: Adam,
    opt_spn: Adam,
    style_code: Option<(SemanticLatent, StructuralLatent)>,
}

impl FinetuneState {
    /// `eps_B` starts as a copy of `eps_A`.
    pub fn new(base: &BaseModel, cfg: &FinetuneConfig) -> Result<Self> {
        Ok(Self {
            eps_b: base.eps_a.trainable_copy(),
            spn: Spn::new(&cfg.spn, cfg.seed ^ 0x5EED_5B11)?,
            opt_eps: Adam::new(cfg.learning_rate),
            opt_spn: Adam::new(cfg.learning_rate),
            style_code: None,
        })
    }
}

fn first<'t>(x: &Var<'t>, i: usize) -> Var<'t> {
    let mut shape = vec![1];
    shape.extend_from_slice(&x.shape()[1..]);
    x.select0(i).reshape(&shape)
}

/// Encodes the input with the frozen networks, generates `I_in_B` and
/// `I^style_B` with `eps_B` and the SPN, and applies one update.
pub fn finetune_step(
    base: &BaseModel,
    state: &mut FinetuneState,
    in_a: &Tensor,
    pair: &StylePair,
    cfg: &FinetuneConfig,
) -> Result<LossReport> {
    check_image(base.config(), in_a)?;
    let steps = TimestepSubsequence::strided(cfg.t0, cfg.train_steps)?;
    let z_in = encode_semantic(&base.encoder, in_a)?;
    let x_in = diffae_encode(&base.eps_a, in_a, &z_in, &steps, &base.schedule)?;
    if state.style_code.is_none() {
        let z = encode_semantic(&base.encoder, &pair.style_a)?;
        let x = diffae_encode(&base.eps_a, &pair.style_a, &z, &steps, &base.schedule)?;
        state.style_code = Some((z, x));
    }
    let (z_style, x_style) = state.style_code.as_ref().expect("style code cached above");

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, true);
    let model = Conditioned {
        model: &state.eps_b,
        ctx,
        cond: Conditioning::Single(tape.constant(Tensor::cat0(&[z_in.as_row(), z_style.as_row()])?)),
    };
    let guide = SpnGuide {
        spn: &state.spn,
        ctx,
        image: tape.constant(Tensor::cat0(&[as_batch(in_a), as_batch(&pair.style_a)])?),
        lambda: cfg.lambda_spn,
    };
    let x_start = tape.constant(Tensor::cat0(&[as_batch(&x_in.tensor), as_batch(&x_style.tensor)])?);
    let out = decode_with_spn_var(&model, &guide, &x_start, &steps, &base.schedule)?;
    let (in_b, style_b_hat) = (first(&out, 0), first(&out, 1));

    let sa = tape.constant(as_batch(&pair.style_a));
    let sb = tape.constant(as_batch(&pair.style_b));
    let ia = tape.constant(as_batch(in_a));
    let w = &cfg.weights;
    let cross = cross_domain_loss_var(&base.backend, &sa, &sb, &ia, &in_b)?;
    let in_domain = in_domain_loss_var(&base.backend, &sa, &sb, &ia, &in_b)?;
    let (recon, [r_img, r_lpips, r_clip]) = reconstruction_loss_var(&base.backend, &sb, &style_b_hat, w)?;
    let total = cross.scale(w.cross).add(&in_domain.scale(w.in_domain)).add(&recon);
    let report = LossReport {
        cross: cross.item(),
        in_domain: in_domain.item(),
        recon_image: r_img.item(),
        recon_lpips: r_lpips.item(),
        recon_clip: r_clip.item(),
        total: total.item(),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("finetuning loss {report:?}")));
    }
    let grads = tape.backward(&total);
    state.opt_eps.step(&mut state.eps_b, &grads);
    state.opt_spn.step(&mut state.spn, &grads);
    Ok(report)
}

/// A finetuned model: the frozen base plus `eps_B`, the SPN and the style pair.
#[derive(Clone, Debug)]
pub struct Finetuned {
    pub base: BaseModel,
    pub eps_b: ConditionalDenoiser,
    pub spn: Spn,
    pub pair: StylePair,
    pub config: FinetuneConfig,
    pub metrics: Vec<LossReport>,
}

impl Finetuned {
    pub fn metrics_log(&self) -> String {
        let mut out = String::from(LossReport::LOG_HEADER);
        out.push('\n');
        for (i, r) in self.metrics.iter().enumerate() {
            out.push_str(&r.log_line(i + 1));
            out.push('\n');
        }
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "finetuned");
        self.base.write_into(&mut ck)?;
        ck.set_meta("finetune_config", to_toml(&self.config)?);
        ck.set_meta("metrics", self.metrics_log());
        ck.set_meta("style.selection_score", format!("{:?}", self.pair.selection_score));
        ck.set_meta(
            "style.candidate_scores",
            self.pair
                .candidate_scores
                .iter()
                .map(|s| format!("{s:?}"))
                .collect::<Vec<_>>()
                .join(" "),
        );
        ck.insert("style.b", &self.pair.style_b);
        ck.insert("style.a", &self.pair.style_a);
        ck.insert_module("eps_b", &self.eps_b);
        ck.insert_module("spn", &self.spn);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "finetuned" {
            return Err(Error::Format(format!("expected a finetuned checkpoint, found {:?}", ck.meta("kind")?)));
        }
        let base = BaseModel::from_checkpoint(ck)?;
        let config: FinetuneConfig = from_toml(ck.meta("finetune_config")?)?;
        let mut eps_b = base.eps_a.trainable_copy();
        ck.load_module("eps_b", &mut eps_b)?;
        let mut spn = Spn::new(&config.spn, 0)?;
        ck.load_module("spn", &mut spn)?;
        let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
        let candidate_scores = ck
            .meta("style.candidate_scores")?
            .split_whitespace()
            .map(parse)
            .collect::<Result<Vec<_>>>()?;
        let metrics = ck
            .meta("metrics")?
            .lines()
            .skip(1)
            .map(|l| LossReport::parse_log_line(l).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pair: StylePair {
                style_b: ck.tensor("style.b")?.clone(),
                style_a: ck.tensor("style.a")?.clone(),
                selection_score: parse(ck.meta("style.selection_score")?)?,
                candidate_count: candidate_scores.len(),
                candidate_scores,
            },
            base,
            eps_b,
            spn,
            config,
            metrics,
        })
    }
}

/// Prepares the style pair, then runs `config.iterations` finetuning steps.
pub fn finetune(cfg: &FinetuneConfig, base: &BaseModel, style_b: &Tensor) -> Result<Finetuned> {
    cfg.validate()?;
    cfg.check_base(base)?;
    let pair = prepare_style_pair(base, style_b, cfg.t0, cfg.candidates, cfg.seed)?;
    finetune_with_pair(cfg, base, pair, &mut |_, _| {})
}

pub fn finetune_with_pair(
    cfg: &FinetuneConfig,
    base: &BaseModel,
    pair: StylePair,
    progress: &mut dyn FnMut(usize, &LossReport),
) -> Result<Finetuned> {
    cfg.validate()?;
    cfg.check_base(base)?;
    check_image(base.config(), &pair.style_a)?;
    check_image(base.config(), &pair.style_b)?;
    let pool = InputPool::from_config(cfg, base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = FinetuneState::new(base, cfg)?;
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let in_a = sample_input_image(base, &pool, &mut rng)?;
        let report = finetune_step(base, &mut state, &in_a, &pair, cfg)?;
        progress(i + 1, &report);
        metrics.push(report);
    }
    Ok(Finetuned {
        base: base.clone(),
        eps_b: state.eps_b,
        spn: state.spn,
        pair,
        config: cfg.clone(),
        metrics,
    })
}
