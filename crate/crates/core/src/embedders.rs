//! Joint image/text embeddings and a feature-space perceptual distance.
//!
//! [`EmbeddingBackend`] is the seam: everything downstream only sees
//! embeddings and intermediate feature maps. [`ToyBackend`] is a small conv
//! image encoder plus a bag-of-words text encoder, trained contrastively on
//! captioned procedural faces and frozen afterwards.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Backdrop, Domain, Face, HairColor, PosterStyle, Skin};
use crate::diffae::as_batch;
use crate::error::{Error, Result};
use crate::nn::{child, visit_list, visit_list_mut, Conv2d, Ctx, Linear, Module};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// The documented toy vocabulary (one token per line, `#` starts a comment).
pub const TOY_VOCAB: &str = include_str!("../assets/toy_vocab.txt");

const NORM_EPS: f64 = 1e-10;

pub trait EmbeddingBackend: Send + Sync {
    fn dim(&self) -> usize;

    /// `[n, C, H, W] -> [n, dim]`, with the backend's parameters held constant.
    fn image_embedding<'t>(&self, x: &Var<'t>) -> Var<'t>;

    /// Intermediate feature maps, shallowest first.
    fn image_features<'t>(&self, x: &Var<'t>) -> Vec<Var<'t>>;

    /// One embedding row per token list.
    fn text_embedding(&self, prompts: &[Vec<String>]) -> Result<Tensor>;

    /// Digest of all parameters, for freeze checks.
    fn digest(&self) -> String;
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for line in text.lines() {
            let tok = line.trim();
            if tok.is_empty() || tok.starts_with('#') {
                continue;
            }
            if index.insert(tok.to_string(), tokens.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
            tokens.push(tok.to_string());
        }
        Ok(Self { tokens, index })
    }

    pub fn toy() -> Self {
        Self::parse(TOY_VOCAB).expect("bundled vocabulary parses")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Parameter("empty prompt".into()));
        }
        tokens
            .iter()
            .map(|t| {
                self.index
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Parameter(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }
}

/// Splits on whitespace and lowercases.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackendConfig {
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub token_dim: usize,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            embed_dim: 128,
            token_dim: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyBackend {
    pub config: ToyBackendConfig,
    pub vocab: Vocab,
    convs: Vec<Conv2d>,
    head: Linear,
    table: Tensor,
    text_head: Linear,
}

impl ToyBackend {
    pub fn new(config: &ToyBackendConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.embed_dim == 0 || config.token_dim == 0 {
            return Err(Error::Config("toy backend widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::toy();
        let mut cin = 3;
        let mut convs = Vec::new();
        for &c in &config.channels {
            convs.push(Conv2d::new(cin, c, 3, &mut rng));
            cin = c;
        }
        Ok(Self {
            head: Linear::new(cin, config.embed_dim, &mut rng),
            table: Tensor::randn(&[vocab.len(), config.token_dim], &mut rng).scale(0.5),
            text_head: Linear::new(config.token_dim, config.embed_dim, &mut rng),
            convs,
            vocab,
            config: config.clone(),
        })
    }

    fn features_ctx<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>) -> Vec<Var<'t>> {
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 && h.shape()[2] >= 2 && h.shape()[3] >= 2 {
                h = h.avg_pool2();
            }
            h = conv.forward(ctx, &h).silu();
            feats.push(h.clone());
        }
        feats
    }

    fn image_ctx<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let last = self.features_ctx(ctx, x).pop().expect("at least one layer");
        self.head.forward(ctx, &last.global_avg_pool())
    }

    fn text_ctx<'t>(&self, ctx: Ctx<'t>, bags: &[Vec<usize>]) -> Var<'t> {
        let pooled = ctx.p(&self.table).embedding_bag(bags);
        self.text_head.forward(ctx, &pooled)
    }

    /// Contrastive pretraining on captioned faces; returns the per-step loss.
    pub fn pretrain(&mut self, cfg: &BackendTrainConfig) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Adam::new(cfg.learning_rate);
        let style = PosterStyle::default();
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let mut images = Vec::with_capacity(cfg.batch);
            let mut bags = Vec::with_capacity(cfg.batch);
            // Pairs that differ in a single attribute act as hard negatives.
            let mut items = Vec::with_capacity(cfg.batch);
            while items.len() < cfg.batch {
                let face = Face::sample(&mut rng);
                let domain = if rng.random_bool(cfg.poster_fraction) { Domain::Poster } else { Domain::Photo };
                items.push((face.clone(), domain));
                if items.len() < cfg.batch {
                    items.push(flip_one_attribute(&face, domain, &mut rng));
                }
            }
            for (face, domain) in &items {
                let img = face.render();
                images.push(match domain {
                    Domain::Photo => img,
                    Domain::Poster => style.apply(&img),
                });
                bags.push(self.vocab.ids(&caption_tokens(face, *domain))?);
            }
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, true);
            let x = tape.constant(Tensor::cat0(&images.iter().map(as_batch).collect::<Vec<_>>())?);
            let img = unit_rows(&self.image_ctx(ctx, &x));
            let txt = unit_rows(&self.text_ctx(ctx, &bags));
            let zero = tape.constant(Tensor::zeros(&[cfg.batch]));
            let logits = img.linear(&txt, &zero).scale(1.0 / cfg.temperature);
            let logits_t = txt.linear(&img, &zero).scale(1.0 / cfg.temperature);
            let targets: Vec<usize> = (0..cfg.batch).collect();
            let loss = logits.cross_entropy(&targets).add(&logits_t.cross_entropy(&targets)).scale(0.5);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("contrastive loss at step {}", losses.len())));
            }
            losses.push(value);
            let grads = tape.backward(&loss);
            opt.step(self, &grads);
        }
        Ok(losses)
    }
}

fn flip_one_attribute<R: Rng + ?Sized>(face: &Face, domain: Domain, rng: &mut R) -> (Face, Domain) {
    let mut f = face.clone();
    let mut d = domain;
    match rng.random_range(0..6) {
        0 => f.smiling = !f.smiling,
        1 => f.glasses = !f.glasses,
        2 => f.hair = HairColor::ALL[(HairColor::ALL.iter().position(|&h| h == f.hair).unwrap() + rng.random_range(1..4)) % 4],
        3 => f.backdrop = Backdrop::ALL[(Backdrop::ALL.iter().position(|&b| b == f.backdrop).unwrap() + rng.random_range(1..4)) % 4],
        4 => f.skin = Skin::ALL[(Skin::ALL.iter().position(|&s| s == f.skin).unwrap() + rng.random_range(1..3)) % 3],
        _ => {
            d = match domain {
                Domain::Photo => Domain::Poster,
                Domain::Poster => Domain::Photo,
            }
        }
    }
    (f, d)
}

fn unit_rows<'t>(x: &Var<'t>) -> Var<'t> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    x.reshape(&[n, d, 1, 1]).normalize_channels(NORM_EPS).reshape(&[n, d])
}

impl Module for ToyBackend {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        visit_list(&self.convs, &child(prefix, "convs"), f);
        self.head.visit(&child(prefix, "head"), f);
        f(child(prefix, "table"), &self.table);
        self.text_head.visit(&child(prefix, "text_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_list_mut(&mut self.convs, &child(prefix, "convs"), f);
        self.head.visit_mut(&child(prefix, "head"), f);
        f(child(prefix, "table"), &mut self.table);
        self.text_head.visit_mut(&child(prefix, "text_head"), f);
    }
}

impl EmbeddingBackend for ToyBackend {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn image_embedding<'t>(&self, x: &Var<'t>) -> Var<'t> {
        self.image_ctx(Ctx::frozen(x.tape()), x)
    }

    fn image_features<'t>(&self, x: &Var<'t>) -> Vec<Var<'t>> {
        self.features_ctx(Ctx::frozen(x.tape()), x)
    }

    fn text_embedding(&self, prompts: &[Vec<String>]) -> Result<Tensor> {
        let bags = prompts.iter().map(|p| self.vocab.ids(p)).collect::<Result<Vec<_>>>()?;
        let tape = Tape::inference();
        Ok(self.text_ctx(Ctx::frozen(&tape), &bags).into_value())
    }

    fn digest(&self) -> String {
        self.param_digest()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub poster_fraction: f64,
    pub seed: u64,
}

impl Default for BackendTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            learning_rate: 3e-3,
            temperature: 0.1,
            poster_fraction: 0.3,
            seed: 17,
        }
    }
}

pub(crate) fn check_images(a: &Tensor, b: Option<&Tensor>) -> Result<()> {
    let s = a.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("expected a [3, H, W] image, got {s:?}")));
    }
    if let Some(b) = b {
        if b.shape() != s {
            return Err(Error::Contract(format!("image shapes differ: {:?} vs {:?}", s, b.shape())));
        }
        if !b.is_finite() {
            return Err(Error::Contract("image contains non-finite values".into()));
        }
    }
    if !a.is_finite() {
        return Err(Error::Contract("image contains non-finite values".into()));
    }
    Ok(())
}

/// `E_I(image)` as a flat vector.
pub fn embed_image(backend: &dyn EmbeddingBackend, image: &Tensor) -> Result<Tensor> {
    check_images(image, None)?;
    let tape = Tape::inference();
    let e = backend.image_embedding(&tape.constant(as_batch(image))).into_value();
    Ok(e.reshaped(&[backend.dim()]))
}

/// `E_T(tokens)` as a flat vector.
pub fn embed_text(backend: &dyn EmbeddingBackend, tokens: &[String]) -> Result<Tensor> {
    let e = backend.text_embedding(&[tokens.to_vec()])?;
    Ok(e.reshaped(&[backend.dim()]))
}

/// Per-sample perceptual distances `[n]` summed over layers of
/// `mean_hw sum_c (unit(f_a) - unit(f_b))^2`.
pub fn perceptual_distance_var<'t>(backend: &dyn EmbeddingBackend, a: &Var<'t>, b: &Var<'t>) -> Var<'t> {
    let n = a.shape()[0];
    let fa = backend.image_features(a);
    let fb = backend.image_features(b);
    let mut total: Option<Var<'t>> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let c = x.shape()[1];
        let d = x.normalize_channels(NORM_EPS).sub(&y.normalize_channels(NORM_EPS)).square();
        // channel sum of the per-channel spatial means
        let per = d.global_avg_pool().reshape(&[n, 1, c, 1]).global_avg_pool().scale(c as f64);
        total = Some(match total {
            Some(t) => t.add(&per),
            None => per,
        });
    }
    total.expect("at least one feature layer").reshape(&[n])
}

pub fn perceptual_distance(backend: &dyn EmbeddingBackend, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_images(a, Some(b))?;
    if a.bit_eq(b) {
        return Ok(0.0);
    }
    let tape = Tape::inference();
    let d = perceptual_distance_var(backend, &tape.constant(as_batch(a)), &tape.constant(as_batch(b)));
    Ok(d.item())
}

/// Cosine similarity of image embeddings, in `[-1, 1]`.
pub fn id_similarity_proxy(backend: &dyn EmbeddingBackend, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_images(a, Some(b))?;
    if a.bit_eq(b) {
        return Ok(1.0);
    }
    let (ea, eb) = (embed_image(backend, a)?, embed_image(backend, b)?);
    let denom = ea.norm() * eb.norm();
    if denom == 0.0 {
        return Err(Error::Degenerate("zero image embedding".into()));
    }
    Ok((ea.dot(&eb) / denom).clamp(-1.0, 1.0))
}

fn self_similarity(feat: &Tensor) -> Tensor {
    let (_, c, h, w) = feat.dims4();
    let p = h * w;
    let mut cols: Vec<Vec<f64>> = (0..p).map(|i| (0..c).map(|ch| feat.data()[ch * p + i]).collect()).collect();
    for v in cols.iter_mut() {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::from_fn(&[p, p], |k| {
        let (i, j) = (k / p, k % p);
        cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum()
    })
}

/// Mean squared difference between the cosine self-similarity matrices of
/// 4x4-pixel patches of the backend's second feature layer.
pub fn structure_distance_proxy(backend: &dyn EmbeddingBackend, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_images(a, Some(b))?;
    if a.bit_eq(b) {
        return Ok(0.0);
    }
    let tape = Tape::inference();
    let grid = |x: &Tensor| -> Result<Tensor> {
        let feats = backend.image_features(&tape.constant(as_batch(x)));
        let f = feats
            .get(1)
            .or_else(|| feats.last())
            .ok_or_else(|| Error::Contract("backend exposes no features".into()))?;
        let (_, _, h, _) = f.value().dims4();
        if h % 4 != 0 {
            return Err(Error::Contract(format!("feature map side {h} is not a multiple of 4")));
        }
        Ok(f.avg_pool2().avg_pool2().into_value())
    };
    let (sa, sb) = (self_similarity(&grid(a)?), self_similarity(&grid(b)?));
    Ok(sa.sub(&sb).map(|v| v * v).mean())
}

/// Pretrains a toy backend; deterministic given the config.
pub fn train_toy_backend(model: &ToyBackendConfig, train: &BackendTrainConfig) -> Result<(ToyBackend, Vec<f64>)> {
    let mut backend = ToyBackend::new(model, train.seed)?;
    let losses = backend.pretrain(train)?;
    Ok((backend, losses))
}

/// Caption tokens for a face in a domain, as owned strings.
pub fn caption_tokens(face: &Face, domain: Domain) -> Vec<String> {
    face.caption_in(domain).iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_rejects_unknown_and_empty() {
        let v = Vocab::toy();
        assert!(v.ids(&tokenize("blonde hair")).is_ok());
        assert!(v.ids(&tokenize("")).is_err());
        assert!(v.ids(&tokenize("purple unicorn")).is_err());
        assert!(v.tokens().iter().all(|t| !t.contains(' ')));
    }

    #[test]
    fn distances_on_an_untrained_backend() {
        let b = ToyBackend::new(&ToyBackendConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);
        assert_eq!(perceptual_distance(&b, &x, &x).unwrap(), 0.0);
        let (d1, d2) = (perceptual_distance(&b, &x, &y).unwrap(), perceptual_distance(&b, &y, &x).unwrap());
        assert!(d1 > 0.0 && (d1 - d2).abs() < 1e-7);
        assert_eq!(id_similarity_proxy(&b, &x, &x).unwrap(), 1.0);
        assert_eq!(structure_distance_proxy(&b, &x, &x).unwrap(), 0.0);
        let nan = Tensor::full(&[3, 32, 32], f64::NAN);
        assert!(embed_image(&b, &nan).is_err());
    }
}
