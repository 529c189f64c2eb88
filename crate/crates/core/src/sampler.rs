//! Inference: content/style mixing and text-driven semantic edits.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::diffae::{
    as_batch, check_image, diffae_encode, encode_semantic, make_conditioning_plan, unbatch, ConditionalDenoiser,
    Conditioned, Conditioning, ConditioningPlan, SemanticLatent, SplitPoint, StructuralLatent,
};
use crate::diffusion::{run_trajectory_var, Direction, Mode, TimestepSubsequence};
use crate::embedders::{tokenize, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::finetune::Finetuned;
use crate::losses::{text_direction, text_directional_loss_var};
use crate::nn::Ctx;
use crate::optim::AdamVec;
use crate::pretrain::BaseModel;
use crate::spn::{decode_with_spn_var, Spn, SpnGuide};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylizeOptions {
    /// Blocks at resolution `>= f_ch` take the style latent.
    #[serde(with = "split_point")]
    pub f_ch: SplitPoint,
    pub lambda_spn: f64,
    pub t0: usize,
    /// Strided DDIM steps between 0 and `t0`. The SPN residual is added once
    /// per step, so this should match the training stride count.
    pub steps: usize,
}

impl Default for StylizeOptions {
    fn default() -> Self {
        Self {
            f_ch: SplitPoint::At(32),
            lambda_spn: 0.1,
            t0: 50,
            steps: 8,
        }
    }
}

pub(crate) mod split_point {
    use super::SplitPoint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &SplitPoint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SplitPoint, D::Error> {
        let s = String::deserialize(d)?;
        SplitPoint::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda_spn = {lambda} must be >= 0")));
    }
    Ok(())
}

fn structural(base: &BaseModel, image: &Tensor, z: &SemanticLatent, t0: usize, steps: usize) -> Result<StructuralLatent> {
    let seq = TimestepSubsequence::strided(t0, steps)?;
    diffae_encode(&base.eps_a, image, z, &seq, &base.schedule)
}

/// The stylization path with every ingredient explicit: `x_t0` encoded by
/// `eps_A` under `z_in`, then an SPN-augmented decode by `denoiser` under the
/// plan `(z_in_decode, z_style, f_ch)`.
#[allow(clippy::too_many_arguments)]
pub fn stylize_parts(
    base: &BaseModel,
    denoiser: &ConditionalDenoiser,
    spn: &Spn,
    input: &Tensor,
    z_style: &SemanticLatent,
    z_in_decode: Option<&SemanticLatent>,
    x_t0: Option<&StructuralLatent>,
    opts: &StylizeOptions,
) -> Result<Tensor> {
    check_image(base.config(), input)?;
    check_lambda(opts.lambda_spn)?;
    let z_in = encode_semantic(&base.encoder, input)?;
    let x_t0 = match x_t0 {
        Some(x) => x.clone(),
        None => structural(base, input, &z_in, opts.t0, opts.steps)?,
    };
    let z_dec = z_in_decode.unwrap_or(&z_in);
    let plan = make_conditioning_plan(z_dec, z_style, opts.f_ch, denoiser)?;
    stylize_with_plan(base, denoiser, spn, input, &x_t0, &plan, opts)
}

/// SPN-augmented decode of `x_t0` under an explicit plan. `opts.f_ch` is
/// ignored in favour of the plan's assignments.
pub fn stylize_with_plan(
    base: &BaseModel,
    denoiser: &ConditionalDenoiser,
    spn: &Spn,
    input: &Tensor,
    x_t0: &StructuralLatent,
    plan: &ConditioningPlan,
    opts: &StylizeOptions,
) -> Result<Tensor> {
    check_image(base.config(), input)?;
    check_lambda(opts.lambda_spn)?;
    if x_t0.t0 != opts.t0 {
        return Err(Error::Parameter(format!("x_t0 is at t = {} but t0 = {}", x_t0.t0, opts.t0)));
    }
    let seq = TimestepSubsequence::strided(opts.t0, opts.steps)?;
    let tape = Tape::inference();
    let ctx = Ctx::frozen(&tape);
    let model = Conditioned {
        model: denoiser,
        ctx,
        cond: plan.conditioning(&tape, 1),
    };
    let guide = SpnGuide {
        spn,
        ctx,
        image: tape.constant(as_batch(input)),
        lambda: opts.lambda_spn,
    };
    let out = decode_with_spn_var(&model, &guide, &tape.constant(as_batch(&x_t0.tensor)), &seq, &base.schedule)?;
    Ok(unbatch(out.into_value()))
}

/// `x_t0` of `input` under its own latent, encoded with `eps_A`.
pub fn structural_latent(base: &BaseModel, input: &Tensor, opts: &StylizeOptions) -> Result<StructuralLatent> {
    let z_in = encode_semantic(&base.encoder, input)?;
    structural(base, input, &z_in, opts.t0, opts.steps)
}

/// Stylizes `input` with the finetuned `eps_B`, the SPN and the checkpoint's style image.
pub fn stylize(model: &Finetuned, input: &Tensor, opts: &StylizeOptions) -> Result<Tensor> {
    let z_style = encode_semantic(&model.base.encoder, &model.pair.style_b)?;
    stylize_parts(&model.base, &model.eps_b, &model.spn, input, &z_style, None, None, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEditOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub t0: usize,
    /// Strided DDIM steps of the differentiable decode.
    pub decode_steps: usize,
}

impl Default for TextEditOptions {
    fn default() -> Self {
        Self {
            steps: 30,
            learning_rate: 0.05,
            t0: 50,
            decode_steps: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEdit {
    /// Best iterate, `Enc(input)` when no step improved on it.
    pub z: SemanticLatent,
    pub z_init: SemanticLatent,
    /// Loss of every evaluated iterate; the first is at `z_init`.
    pub losses: Vec<f64>,
    pub best_loss: f64,
    /// Decoded image at the best iterate.
    pub image: Tensor,
    pub x_t0: StructuralLatent,
}

impl TextEdit {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    /// `cos(v_text, v_image)` at the best iterate.
    pub fn cosine(&self) -> f64 {
        1.0 - self.best_loss
    }
}

/// Gradient descent on `z_sem` so that the frozen `eps_A` decode of the frozen
/// `x_t0` moves along `E_T(trg) - E_T(src)` in embedding space.
pub fn optimize_semantic_for_text(
    base: &BaseModel,
    input: &Tensor,
    t_src: &str,
    t_trg: &str,
    opts: &TextEditOptions,
) -> Result<TextEdit> {
    check_image(base.config(), input)?;
    let (src, trg) = (tokenize(t_src), tokenize(t_trg));
    if src == trg {
        return Err(Error::Degenerate("source and target prompts are identical".into()));
    }
    if !(opts.learning_rate > 0.0 && opts.learning_rate.is_finite()) {
        return Err(Error::Parameter(format!("learning rate {} must be positive", opts.learning_rate)));
    }
    let backend: &dyn EmbeddingBackend = &base.backend;
    let v_text = text_direction(backend, &src, &trg)?;
    let z_init = encode_semantic(&base.encoder, input)?;
    let x_t0 = structural(base, input, &z_init, opts.t0, opts.decode_steps)?;
    let seq = TimestepSubsequence::strided(opts.t0, opts.decode_steps)?;

    let mut z = z_init.as_row();
    let mut opt = AdamVec::new(opts.learning_rate);
    let mut losses = Vec::with_capacity(opts.steps + 1);
    let mut best: Option<(f64, Tensor, Tensor)> = None;
    for step in 0..=opts.steps {
        let tape = Tape::new();
        let zv = tape.watch(&z);
        let model = Conditioned {
            model: &base.eps_a,
            ctx: Ctx::frozen(&tape),
            cond: Conditioning::Single(zv),
        };
        let x = tape.constant(as_batch(&x_t0.tensor));
        let img = run_trajectory_var(&model, &x, &seq, Direction::Decode, Mode::Ddim, 0, &base.schedule, false)?.output;
        let loss = text_directional_loss_var(backend, &v_text, &tape.constant(as_batch(input)), &img)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("text loss at step {step}")));
        }
        losses.push(value);
        if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
            best = Some((value, z.clone(), img.value().clone()));
        }
        if step == opts.steps {
            break;
        }
        let grads = tape.backward(&loss);
        opt.step(&mut z, &grads);
    }
    let (best_loss, z_best, image) = best.expect("at least one evaluation");
    let d = z_best.numel();
    Ok(TextEdit {
        z: SemanticLatent(z_best.reshaped(&[d])),
        z_init,
        losses,
        best_loss,
        image: unbatch(image),
        x_t0,
    })
}

/// Stylization with the text-optimized input latent. `x_t0` keeps the
/// original encoding unless `recompute_x_t0` is set.
pub fn stylize_with_text(
    model: &Finetuned,
    input: &Tensor,
    t_src: &str,
    t_trg: &str,
    opts: &StylizeOptions,
    text: &TextEditOptions,
    recompute_x_t0: bool,
) -> Result<Tensor> {
    let z_star = if tokenize(t_src) == tokenize(t_trg) {
        encode_semantic(&model.base.encoder, input)?
    } else {
        optimize_semantic_for_text(&model.base, input, t_src, t_trg, text)?.z
    };
    stylize_with_latent(model, input, &z_star, opts, recompute_x_t0)
}

/// Stylization with `z_star` replacing the input latent in the decode.
pub fn stylize_with_latent(
    model: &Finetuned,
    input: &Tensor,
    z_star: &SemanticLatent,
    opts: &StylizeOptions,
    recompute_x_t0: bool,
) -> Result<Tensor> {
    let z_style = encode_semantic(&model.base.encoder, &model.pair.style_b)?;
    let x_t0 = if recompute_x_t0 {
        Some(structural(&model.base, input, z_star, opts.t0, opts.steps)?)
    } else {
        None
    };
    stylize_parts(
        &model.base,
        &model.eps_b,
        &model.spn,
        input,
        &z_style,
        Some(z_star),
        x_t0.as_ref(),
        opts,
    )
}
