//! Training objectives: directional cosine losses, the reconstruction
//! triple and their weighted total.
//!
//! Each loss has a `_var` form that builds on a tape so callers can
//! back-propagate into images; the plain forms evaluate on an inference tape.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffae::as_batch;
use crate::embedders::{check_images, perceptual_distance_var, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub re_image: f64,
    pub re_lpips: f64,
    pub re_clip: f64,
    pub cross: f64,
    pub in_domain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            re_image: 10.0,
            re_lpips: 10.0,
            re_clip: 30.0,
            cross: 1.0,
            in_domain: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            re_image: 0.0,
            re_lpips: 0.0,
            re_clip: 0.0,
            cross: 0.0,
            in_domain: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("re_image", self.re_image),
            ("re_lpips", self.re_lpips),
            ("re_clip", self.re_clip),
            ("cross", self.cross),
            ("in_domain", self.in_domain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted reconstruction components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconComponents {
    pub image: f64,
    pub lpips: f64,
    pub clip: f64,
}

impl ReconComponents {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.re_image * self.image + w.re_lpips * self.lpips + w.re_clip * self.clip
    }
}

/// Unweighted loss components of one step plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub cross: f64,
    pub in_domain: f64,
    pub recon_image: f64,
    pub recon_lpips: f64,
    pub recon_clip: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recon(&self) -> ReconComponents {
        ReconComponents {
            image: self.recon_image,
            lpips: self.recon_lpips,
            clip: self.recon_clip,
        }
    }

    /// The weighted sum of the components, recomputed.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        total_loss(self.cross, self.in_domain, self.recon().weighted(w), w)
    }

    /// Header of the metrics log; tab-separated.
    pub const LOG_HEADER: &'static str = "step\tcross\tin_domain\trecon_image\trecon_lpips\trecon_clip\ttotal";

    /// One metrics line, columns as in [`LossReport::LOG_HEADER`]; floats in
    /// shortest round-trip form.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            self.cross, self.in_domain, self.recon_image, self.recon_lpips, self.recon_clip, self.total
        )
    }

    pub fn parse_log_line(line: &str) -> Result<(usize, Self)> {
        let cols: Vec<&str> = line.trim_end().split('\t').collect();
        if cols.len() != 7 {
            return Err(Error::Format(format!("metrics line has {} columns, expected 7", cols.len())));
        }
        let f = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad metrics value {:?}", cols[i])))
        };
        let step = cols[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad step {:?}", cols[0])))?;
        Ok((
            step,
            Self {
                cross: f(1)?,
                in_domain: f(2)?,
                recon_image: f(3)?,
                recon_lpips: f(4)?,
                recon_clip: f(5)?,
                total: f(6)?,
            },
        ))
    }
}

fn check_direction(v: &Tensor, what: &str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} direction")));
    }
    if v.norm() == 0.0 {
        return Err(Error::Degenerate(format!("{what} direction vector is zero")));
    }
    Ok(())
}

/// `1 - cos(v1, v2)` on a tape. Zero vectors are rejected rather than
/// regularized, so gradients stay exact everywhere else.
pub fn directional_loss_var<'t>(v1: &Var<'t>, v2: &Var<'t>) -> Result<Var<'t>> {
    if v1.shape() != v2.shape() {
        return Err(Error::Contract(format!("direction shapes {:?} and {:?} differ", v1.shape(), v2.shape())));
    }
    check_direction(v1.value(), "first")?;
    check_direction(v2.value(), "second")?;
    // sqrt(|a|^2 |b|^2) rather than |a| |b|: identical or opposite vectors
    // then give a cosine of exactly +-1.
    let cos = v1.dot(v2).div(&v1.square().sum().mul(&v2.square().sum()).sqrt());
    Ok(cos.scale(-1.0).add_scalar(1.0))
}

pub fn directional_loss(v1: &Tensor, v2: &Tensor) -> Result<f64> {
    let tape = Tape::inference();
    Ok(directional_loss_var(&tape.constant(v1.clone()), &tape.constant(v2.clone()))?.item())
}

fn embed_row<'t>(backend: &dyn EmbeddingBackend, x: &Var<'t>) -> Var<'t> {
    let e = backend.image_embedding(x);
    let d = e.value().numel();
    e.reshape(&[d])
}

/// `v_style = E(style_b) - E(style_a)`, `v_in = E(in_b) - E(in_a)`; images are `[1, C, H, W]`.
pub fn cross_domain_loss_var<'t>(
    backend: &dyn EmbeddingBackend,
    style_a: &Var<'t>,
    style_b: &Var<'t>,
    in_a: &Var<'t>,
    in_b: &Var<'t>,
) -> Result<Var<'t>> {
    let v_style = embed_row(backend, style_b).sub(&embed_row(backend, style_a));
    let v_in = embed_row(backend, in_b).sub(&embed_row(backend, in_a));
    directional_loss_var(&v_style, &v_in)
}

/// `v_a = E(cont_a) - E(style_a)`, `v_b = E(cont_b) - E(style_b)`.
pub fn in_domain_loss_var<'t>(
    backend: &dyn EmbeddingBackend,
    style_a: &Var<'t>,
    style_b: &Var<'t>,
    cont_a: &Var<'t>,
    cont_b: &Var<'t>,
) -> Result<Var<'t>> {
    let v_a = embed_row(backend, cont_a).sub(&embed_row(backend, style_a));
    let v_b = embed_row(backend, cont_b).sub(&embed_row(backend, style_b));
    directional_loss_var(&v_a, &v_b)
}

/// Unweighted L1 pixel, perceptual and L1 embedding terms, in that order.
pub fn reconstruction_terms_var<'t>(
    backend: &dyn EmbeddingBackend,
    target: &Var<'t>,
    hat: &Var<'t>,
) -> Result<[Var<'t>; 3]> {
    if target.shape() != hat.shape() {
        return Err(Error::Contract(format!(
            "reconstruction shapes {:?} and {:?} differ",
            target.shape(),
            hat.shape()
        )));
    }
    let image = hat.sub(target).abs().mean();
    let lpips = perceptual_distance_var(backend, target, hat).mean();
    let clip = embed_row(backend, hat).sub(&embed_row(backend, target)).abs().mean();
    Ok([image, lpips, clip])
}

pub fn reconstruction_loss_var<'t>(
    backend: &dyn EmbeddingBackend,
    target: &Var<'t>,
    hat: &Var<'t>,
    w: &LossWeights,
) -> Result<(Var<'t>, [Var<'t>; 3])> {
    let terms = reconstruction_terms_var(backend, target, hat)?;
    let total = terms[0]
        .scale(w.re_image)
        .add(&terms[1].scale(w.re_lpips))
        .add(&terms[2].scale(w.re_clip));
    Ok((total, terms))
}

/// `lambda_cross * cross + lambda_in * in_domain + recon`.
pub fn total_loss(cross: f64, in_domain: f64, recon: f64, w: &LossWeights) -> f64 {
    w.cross * cross + w.in_domain * in_domain + recon
}

/// `1 - cos(E_T(trg) - E_T(src), E_I(opt) - E_I(src))` with the text
/// direction precomputed.
pub fn text_directional_loss_var<'t>(
    backend: &dyn EmbeddingBackend,
    v_text: &Tensor,
    i_src: &Var<'t>,
    i_opt: &Var<'t>,
) -> Result<Var<'t>> {
    let v_image = embed_row(backend, i_opt).sub(&embed_row(backend, i_src));
    directional_loss_var(&i_opt.tape().constant(v_text.clone()), &v_image)
}

/// `E_T(trg) - E_T(src)`.
pub fn text_direction(backend: &dyn EmbeddingBackend, src: &[String], trg: &[String]) -> Result<Tensor> {
    let e = backend.text_embedding(&[trg.to_vec(), src.to_vec()])?;
    let d = backend.dim();
    Ok(e.select0(0).sub(&e.select0(1)).reshaped(&[d]))
}

fn consts<'t, const N: usize>(tape: &'t Tape, images: [&Tensor; N]) -> Result<[Var<'t>; N]> {
    for img in images {
        check_images(img, Some(images[0]))?;
    }
    Ok(images.map(|i| tape.constant(as_batch(i))))
}

pub fn cross_domain_loss(
    backend: &dyn EmbeddingBackend,
    style_a: &Tensor,
    style_b: &Tensor,
    in_a: &Tensor,
    in_b: &Tensor,
) -> Result<f64> {
    let tape = Tape::inference();
    let [sa, sb, ia, ib] = consts(&tape, [style_a, style_b, in_a, in_b])?;
    Ok(cross_domain_loss_var(backend, &sa, &sb, &ia, &ib)?.item())
}

pub fn in_domain_loss(
    backend: &dyn EmbeddingBackend,
    style_a: &Tensor,
    style_b: &Tensor,
    cont_a: &Tensor,
    cont_b: &Tensor,
) -> Result<f64> {
    let tape = Tape::inference();
    let [sa, sb, ca, cb] = consts(&tape, [style_a, style_b, cont_a, cont_b])?;
    Ok(in_domain_loss_var(backend, &sa, &sb, &ca, &cb)?.item())
}

/// Weighted reconstruction loss and its unweighted components.
pub fn reconstruction_loss(
    backend: &dyn EmbeddingBackend,
    target: &Tensor,
    hat: &Tensor,
    w: &LossWeights,
) -> Result<(f64, ReconComponents)> {
    let tape = Tape::inference();
    let [t, h] = consts(&tape, [target, hat])?;
    let (total, [image, lpips, clip]) = reconstruction_loss_var(backend, &t, &h, w)?;
    Ok((
        total.item(),
        ReconComponents {
            image: image.item(),
            lpips: lpips.item(),
            clip: clip.item(),
        },
    ))
}

pub fn text_directional_loss(
    backend: &dyn EmbeddingBackend,
    t_src: &[String],
    t_trg: &[String],
    i_src: &Tensor,
    i_opt: &Tensor,
) -> Result<f64> {
    let v_text = text_direction(backend, t_src, t_trg)?;
    let tape = Tape::inference();
    let [s, o] = consts(&tape, [i_src, i_opt])?;
    Ok(text_directional_loss_var(backend, &v_text, &s, &o)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::{tokenize, ToyBackend, ToyBackendConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(d: &[f64]) -> Tensor {
        Tensor::new(&[d.len()], d.to_vec()).unwrap()
    }

    #[test]
    fn directional_geometry() {
        assert_eq!(directional_loss(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(directional_loss(&v(&[1.0, 0.0]), &v(&[0.0, 3.0])).unwrap(), 1.0);
        assert_eq!(directional_loss(&v(&[1.0, -2.0]), &v(&[-1.0, 2.0])).unwrap(), 2.0);
        let err = directional_loss(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss(0.4, 0.2, 1.0, &w) - 1.5).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let no_in = LossWeights { in_domain: 0.0, ..w };
        assert_eq!(total_loss(0.4, 123.0, 1.0, &no_in), 1.4);
    }

    #[test]
    fn log_line_round_trips() {
        let r = LossReport {
            cross: 0.1,
            in_domain: 1.0 / 3.0,
            recon_image: 2.5e-7,
            recon_lpips: 0.0,
            recon_clip: 7.25,
            total: 9.0,
        };
        let (step, back) = LossReport::parse_log_line(&r.log_line(12)).unwrap();
        assert_eq!(step, 12);
        assert_eq!(back, r);
        assert_eq!(LossReport::LOG_HEADER.split('\t').count(), 7);
    }

    #[test]
    fn reconstruction_hand_case() {
        let b = ToyBackend::new(&ToyBackendConfig::default(), 3).unwrap();
        let a = Tensor::full(&[3, 1, 1], 0.2);
        let c = Tensor::full(&[3, 1, 1], -0.3);
        let w = LossWeights::default();
        let (total, comps) = reconstruction_loss(&b, &a, &c, &w).unwrap();
        assert!((w.re_image * comps.image - 5.0).abs() < 1e-12);
        assert!((total - comps.weighted(&w)).abs() < 1e-12);
        let (zero, _) = reconstruction_loss(&b, &a, &a, &w).unwrap();
        assert_eq!(zero, 0.0);
        assert_eq!(reconstruction_loss(&b, &a, &c, &LossWeights::zero()).unwrap().0, 0.0);
    }

    #[test]
    fn text_loss_rejects_degenerate_pairs() {
        let b = ToyBackend::new(&ToyBackendConfig::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let (s, t) = (tokenize("black hair"), tokenize("blonde hair"));
        assert!(text_directional_loss(&b, &s, &s, &x, &y).is_err());
        assert!(text_directional_loss(&b, &s, &t, &x, &x).is_err());
        let l = text_directional_loss(&b, &s, &t, &x, &y).unwrap();
        assert!((0.0..=2.0).contains(&l));
    }
}
