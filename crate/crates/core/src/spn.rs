//! Structure-preserving network: a per-pixel, timestep-conditioned map from
//! the clean input image to a residual that is blended into each reverse step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffae::{as_batch, unbatch, Conditioned, Conditioning, ConditionalDenoiser, SemanticLatent, ConditioningPlan};
use crate::diffusion::{ddim_reverse_step_var, EpsModel, NoiseSchedule, TimestepSubsequence};
use crate::error::{Error, Result};
use crate::nn::{child, sinusoidal_embedding, visit_list, visit_list_mut, Conv2d, Ctx, GroupNorm, Linear, Module};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpnConfig {
    pub image_channels: usize,
    pub blocks: usize,
    pub width: usize,
    pub groups: usize,
    pub embed_dim: usize,
}

impl Default for SpnConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            blocks: 3,
            width: 32,
            groups: 8,
            embed_dim: 64,
        }
    }
}

impl SpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.image_channels == 0 {
            return Err(Error::Config("SPN blocks, width and channels must be positive".into()));
        }
        if self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config(format!("SPN width {} not divisible into {} groups", self.width, self.groups)));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("SPN embed_dim {} must be even", self.embed_dim)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct SpnBlock {
    te1: Linear,
    te2: Linear,
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl SpnBlock {
    fn forward<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>, emb: &Var<'t>) -> Var<'t> {
        let w = x.shape()[1];
        let te = self.te2.forward(ctx, &self.te1.forward(ctx, emb).silu());
        let h = self.norm1.forward(ctx, x);
        let h = h.affine_nc(&te.narrow_cols(0, w).add_scalar(1.0), &te.narrow_cols(w, w));
        let h = self.conv1.forward(ctx, &h.silu());
        let h = self.conv2.forward(ctx, &self.norm2.forward(ctx, &h).silu());
        x.add(&h)
    }
}

impl Module for SpnBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.te1.visit(&child(prefix, "te1"), f);
        self.te2.visit(&child(prefix, "te2"), f);
        self.norm1.visit(&child(prefix, "norm1"), f);
        self.conv1.visit(&child(prefix, "conv1"), f);
        self.norm2.visit(&child(prefix, "norm2"), f);
        self.conv2.visit(&child(prefix, "conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.te1.visit_mut(&child(prefix, "te1"), f);
        self.te2.visit_mut(&child(prefix, "te2"), f);
        self.norm1.visit_mut(&child(prefix, "norm1"), f);
        self.conv1.visit_mut(&child(prefix, "conv1"), f);
        self.norm2.visit_mut(&child(prefix, "norm2"), f);
        self.conv2.visit_mut(&child(prefix, "conv2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Spn {
    pub config: SpnConfig,
    conv_in: Conv2d,
    blocks: Vec<SpnBlock>,
    conv_out: Conv2d,
}

impl Spn {
    pub fn new(config: &SpnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, e) = (config.width, config.embed_dim);
        let blocks = (0..config.blocks)
            .map(|_| SpnBlock {
                te1: Linear::new(e, e, &mut rng),
                te2: Linear::new(e, 2 * w, &mut rng),
                norm1: GroupNorm::new(config.groups, w),
                conv1: Conv2d::new(w, w, 1, &mut rng),
                norm2: GroupNorm::new(config.groups, w),
                conv2: Conv2d::new(w, w, 1, &mut rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            conv_in: Conv2d::new(config.image_channels, w, 1, &mut rng),
            blocks,
            conv_out: Conv2d::new(w, config.image_channels, 1, &mut rng).with_gain(0.0),
        })
    }

    /// Batched residual for images `[n, C, H, W]` at timestep `t`.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, image: &Var<'t>, t: usize) -> Result<Var<'t>> {
        if image.shape().len() != 4 || image.shape()[1] != self.config.image_channels {
            return Err(Error::Contract(format!(
                "SPN expects [n, {}, h, w], got {:?}",
                self.config.image_channels,
                image.shape()
            )));
        }
        let n = image.shape()[0];
        let emb = ctx.tape.constant(sinusoidal_embedding(&vec![t as f64; n], self.config.embed_dim));
        let mut h = self.conv_in.forward(ctx, image);
        for b in &self.blocks {
            h = b.forward(ctx, &h, &emb);
        }
        Ok(self.conv_out.forward(ctx, &h))
    }
}

impl Module for Spn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv_in.visit(&child(prefix, "conv_in"), f);
        visit_list(&self.blocks, &child(prefix, "blocks"), f);
        self.conv_out.visit(&child(prefix, "conv_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv_in.visit_mut(&child(prefix, "conv_in"), f);
        visit_list_mut(&mut self.blocks, &child(prefix, "blocks"), f);
        self.conv_out.visit_mut(&child(prefix, "conv_out"), f);
    }
}

/// `SPN(image)` at timestep `t` for a single `[C, H, W]` image.
pub fn spn_apply(spn: &Spn, image: &Tensor, t: usize) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(Error::Contract(format!("expected a [C, H, W] image, got {:?}", image.shape())));
    }
    if t == 0 {
        return Err(Error::Parameter("SPN timestep must be >= 1".into()));
    }
    let tape = Tape::inference();
    let out = spn.forward(Ctx::frozen(&tape), &tape.constant(as_batch(image)), t)?;
    Ok(unbatch(out.into_value()))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda_spn must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// `x_t + lambda * residual`; returns `x_t` untouched when `lambda == 0`.
pub fn blend(x_t: &Tensor, residual: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    if x_t.shape() != residual.shape() {
        return Err(Error::Contract(format!(
            "residual shape {:?} does not match {:?}",
            residual.shape(),
            x_t.shape()
        )));
    }
    if lambda == 0.0 {
        return Ok(x_t.clone());
    }
    Ok(x_t.axpby(1.0, residual, lambda))
}

pub(crate) fn blend_var<'t>(x_t: &Var<'t>, residual: &Var<'t>, lambda: f64) -> Var<'t> {
    if lambda == 0.0 {
        x_t.clone()
    } else {
        x_t.add(&residual.scale(lambda))
    }
}

/// Trainable or frozen SPN bound to a tape, plus the image it reads.
pub struct SpnGuide<'s, 't> {
    pub spn: &'s Spn,
    pub ctx: Ctx<'t>,
    pub image: Var<'t>,
    pub lambda: f64,
}

impl<'s, 't> SpnGuide<'s, 't> {
    /// `blend(x_t, SPN(image, t), lambda)`, skipping the network when `lambda == 0`.
    pub fn apply(&self, x_t: &Var<'t>, t: usize) -> Result<Var<'t>> {
        if self.lambda == 0.0 {
            return Ok(x_t.clone());
        }
        let r = self.spn.forward(self.ctx, &self.image, t)?;
        if r.shape() != x_t.shape() {
            return Err(Error::Contract(format!("SPN output {:?} vs state {:?}", r.shape(), x_t.shape())));
        }
        Ok(blend_var(x_t, &r, self.lambda))
    }
}

/// Reverse DDIM step evaluated at the blended state `x'_t`.
pub fn reverse_step_with_spn_var<'t>(
    model: &dyn EpsModel<'t>,
    guide: &SpnGuide<'_, 't>,
    x_t: &Var<'t>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let x = guide.apply(x_t, t)?;
    ddim_reverse_step_var(model, &x, t, t_prev, sched)
}

/// Decodes from `steps.last()` down to 0 with an SPN-augmented step at every stride.
pub fn decode_with_spn_var<'t>(
    model: &dyn EpsModel<'t>,
    guide: &SpnGuide<'_, 't>,
    x_start: &Var<'t>,
    steps: &TimestepSubsequence,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    steps.check(sched)?;
    let mut x = x_start.clone();
    for w in steps.steps().windows(2).rev() {
        x = reverse_step_with_spn_var(model, guide, &x, w[1], w[0], sched)?;
    }
    Ok(x)
}

/// Which semantic latent(s) condition the denoiser.
#[derive(Clone, Copy, Debug)]
pub enum LatentChoice<'a> {
    Single(&'a SemanticLatent),
    Plan(&'a ConditioningPlan),
}

impl<'a> LatentChoice<'a> {
    pub(crate) fn conditioning<'t>(&self, tape: &'t Tape, batch: usize) -> Conditioning<'t> {
        match self {
            LatentChoice::Single(z) => {
                let rows = Tensor::cat0(&vec![z.as_row(); batch]).expect("equal rows");
                Conditioning::Single(tape.constant(rows))
            }
            LatentChoice::Plan(p) => p.conditioning(tape, batch),
        }
    }
}

/// Single-image reverse step with SPN blending.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_with_spn(
    denoiser: &ConditionalDenoiser,
    latent: LatentChoice<'_>,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    input_image: &Tensor,
    spn: &Spn,
    lambda: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    if x_t.shape() != input_image.shape() {
        return Err(Error::Contract(format!(
            "input image {:?} does not match state {:?}",
            input_image.shape(),
            x_t.shape()
        )));
    }
    let tape = Tape::inference();
    let ctx = Ctx::frozen(&tape);
    let model = Conditioned {
        model: denoiser,
        ctx,
        cond: latent.conditioning(&tape, 1),
    };
    let guide = SpnGuide {
        spn,
        ctx,
        image: tape.constant(as_batch(input_image)),
        lambda,
    };
    let out = reverse_step_with_spn_var(&model, &guide, &tape.constant(as_batch(x_t)), t, t_prev, sched)?;
    Ok(unbatch(out.into_value()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 4, 4], &mut rng);
        let r = Tensor::randn(&[3, 4, 4], &mut rng);
        assert!(blend(&x, &r, 0.0).unwrap().bit_eq(&x));
        assert_eq!(blend(&x, &x.scale(-1.0), 1.0).unwrap().max_abs_diff(&Tensor::zeros(&[3, 4, 4])), 0.0);
        let lhs = blend(&x, &r, 0.3).unwrap().add(&blend(&x, &r, 0.4).unwrap()).sub(&x);
        assert!(lhs.max_abs_diff(&blend(&x, &r, 0.7).unwrap()) < 1e-12);
        assert!(blend(&x, &r, -0.1).is_err());
        assert!(blend(&x, &Tensor::zeros(&[3, 2, 2]), 0.1).is_err());
    }

    #[test]
    fn spn_is_a_per_pixel_map() {
        let mut spn = Spn::new(&SpnConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4, 4], &mut rng);
        assert!(spn_apply(&spn, &x, 5).unwrap().data().iter().all(|&v| v == 0.0));
        spn.visit_mut("", &mut |_, p| *p = Tensor::randn(p.shape(), &mut rng).scale(0.5));
        // reverse the pixel order within each channel
        let perm = |t: &Tensor| {
            let mut d = t.data().to_vec();
            d.chunks_mut(16).for_each(|c| c.reverse());
            Tensor::new(t.shape(), d).unwrap()
        };
        let a = perm(&spn_apply(&spn, &x, 5).unwrap());
        let b = spn_apply(&spn, &perm(&x), 5).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(spn_apply(&spn, &x, 5).unwrap().max_abs_diff(&spn_apply(&spn, &x, 40).unwrap()) > 0.0);
        assert!(spn_apply(&spn, &x, 5).unwrap().bit_eq(&spn_apply(&spn, &x, 5).unwrap()));
    }
}
