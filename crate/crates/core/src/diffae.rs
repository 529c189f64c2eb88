//! Diffusion autoencoder: a semantic encoder plus a U-Net noise predictor
//! whose residual blocks are each conditioned on a semantic latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffusion::{
    run_trajectory_var, Direction, EpsModel, Mode, NoiseSchedule, TimestepSubsequence,
};
use crate::error::{Error, Result};
use crate::nn::{child, sinusoidal_embedding, visit_list, visit_list_mut, Conv2d, Ctx, GroupNorm, Linear, Module};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffAeConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Feature width per U-Net level; level `l` runs at `image_size / 2^l`.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub latent_dim: usize,
    /// Feature widths of the semantic encoder's conv stages.
    pub encoder_channels: Vec<usize>,
    /// Pixel standard deviation assumed by the denoiser's input and skip
    /// scaling; 0 disables the scaling.
    pub data_std: f64,
}

impl Default for DiffAeConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            channels: vec![8, 16, 16],
            blocks_per_level: 2,
            groups: 4,
            time_dim: 64,
            latent_dim: 64,
            encoder_channels: vec![16, 32, 32],
            data_std: 0.5,
        }
    }
}

impl DiffAeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.latent_dim == 0 || self.blocks_per_level == 0 {
            return bad("image_channels, latent_dim and blocks_per_level must be positive".into());
        }
        if self.channels.is_empty() || self.encoder_channels.is_empty() {
            return bad("channel lists must be non-empty".into());
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim {} must be even and >= 2", self.time_dim));
        }
        let levels = self.channels.len().max(self.encoder_channels.len());
        if self.image_size == 0 || self.image_size % (1 << levels) != 0 {
            return bad(format!("image_size {} is not divisible by 2^{levels}", self.image_size));
        }
        for &c in self.channels.iter().chain(&self.encoder_channels) {
            if self.groups == 0 || c % self.groups != 0 {
                return bad(format!("width {c} is not divisible into {} groups", self.groups));
            }
        }
        Ok(())
    }

    /// Spatial resolution of each U-Net level, highest first.
    pub fn ladder(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|l| self.image_size >> l).collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }
}

/// A semantic latent `z_sem`, stored as a flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLatent(pub Tensor);

impl SemanticLatent {
    pub fn dim(&self) -> usize {
        self.0.numel()
    }

    pub fn zeros(dim: usize) -> Self {
        Self(Tensor::zeros(&[dim]))
    }

    /// `[1, dim]` row for batched networks.
    pub fn as_row(&self) -> Tensor {
        self.0.reshaped(&[1, self.dim()])
    }
}

/// An image encoded to timestep `t0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralLatent {
    pub tensor: Tensor,
    pub t0: usize,
}

pub(crate) fn check_image(cfg: &DiffAeConfig, image: &Tensor) -> Result<()> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::Contract(format!(
            "image shape {:?} does not match model shape {:?}",
            image.shape(),
            cfg.image_shape()
        )));
    }
    if !image.is_finite() {
        return Err(Error::Contract("image contains non-finite values".into()));
    }
    Ok(())
}

pub(crate) fn as_batch(image: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.reshaped(&shape)
}

pub(crate) fn unbatch(batch: Tensor) -> Tensor {
    let shape = batch.shape()[1..].to_vec();
    batch.reshaped(&shape)
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub config: DiffAeConfig,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    head: Linear,
}

impl SemanticEncoder {
    pub fn new(config: &DiffAeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = config.image_channels;
        let (mut convs, mut norms) = (Vec::new(), Vec::new());
        for &c in &config.encoder_channels {
            convs.push(Conv2d::new(cin, c, 3, &mut rng));
            norms.push(GroupNorm::new(config.groups, c));
            cin = c;
        }
        let side = config.image_size >> config.encoder_channels.len();
        let head = Linear::new(cin * side * side, config.latent_dim, &mut rng);
        Ok(Self {
            config: config.clone(),
            convs,
            norms,
            head,
        })
    }

    /// Batched encoding `[n, C, H, W] -> [n, latent_dim]`.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        let mut h = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = norm.forward(ctx, &conv.forward(ctx, &h)).silu().avg_pool2();
        }
        let n = h.shape()[0];
        let flat = h.value().numel() / n;
        self.head.forward(ctx, &h.reshape(&[n, flat]))
    }
}

impl Module for SemanticEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        visit_list(&self.convs, &child(prefix, "convs"), f);
        visit_list(&self.norms, &child(prefix, "norms"), f);
        self.head.visit(&child(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_list_mut(&mut self.convs, &child(prefix, "convs"), f);
        visit_list_mut(&mut self.norms, &child(prefix, "norms"), f);
        self.head.visit_mut(&child(prefix, "head"), f);
    }
}

/// `z_sem = Enc(image)`; deterministic.
pub fn encode_semantic(enc: &SemanticEncoder, image: &Tensor) -> Result<SemanticLatent> {
    check_image(&enc.config, image)?;
    let tape = Tape::inference();
    let z = enc.forward(Ctx::frozen(&tape), &tape.constant(as_batch(image)));
    let z = z.into_value();
    let dim = z.numel();
    Ok(SemanticLatent(z.reshaped(&[dim])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Half {
    Encoder,
    Middle,
    Decoder,
}

/// Where a residual block sits in the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockSite {
    pub index: usize,
    pub half: Half,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    resolution: usize,
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    latent_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cfg: &DiffAeConfig, cin: usize, cout: usize, resolution: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            resolution,
            norm1: GroupNorm::new(cfg.groups, cin),
            conv1: Conv2d::new(cin, cout, 3, rng),
            time_proj: Linear::new(cfg.time_dim, 2 * cout, rng),
            latent_proj: Linear::new(cfg.latent_dim, 2 * cout, rng),
            norm2: GroupNorm::new(cfg.groups, cout),
            conv2: Conv2d::new(cout, cout, 3, rng).with_gain(0.1),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng)),
        }
    }

    fn forward<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>, temb: &Var<'t>, z: &Var<'t>) -> Var<'t> {
        let h = self.conv1.forward(ctx, &self.norm1.forward(ctx, x).silu());
        let c = h.shape()[1];
        let h = self.norm2.forward(ctx, &h);
        let ts = self.time_proj.forward(ctx, temb);
        let h = h.affine_nc(&ts.narrow_cols(0, c).add_scalar(1.0), &ts.narrow_cols(c, c));
        let zs = self.latent_proj.forward(ctx, z);
        let h = h.affine_nc(&zs.narrow_cols(0, c).add_scalar(1.0), &zs.narrow_cols(c, c));
        let h = self.conv2.forward(ctx, &h.silu());
        let skip = match &self.skip {
            Some(conv) => conv.forward(ctx, x),
            None => x.clone(),
        };
        skip.add(&h)
    }
}

impl Module for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm1.visit(&child(prefix, "norm1"), f);
        self.conv1.visit(&child(prefix, "conv1"), f);
        self.time_proj.visit(&child(prefix, "time_proj"), f);
        self.latent_proj.visit(&child(prefix, "latent_proj"), f);
        self.norm2.visit(&child(prefix, "norm2"), f);
        self.conv2.visit(&child(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&child(prefix, "skip"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm1.visit_mut(&child(prefix, "norm1"), f);
        self.conv1.visit_mut(&child(prefix, "conv1"), f);
        self.time_proj.visit_mut(&child(prefix, "time_proj"), f);
        self.latent_proj.visit_mut(&child(prefix, "latent_proj"), f);
        self.norm2.visit_mut(&child(prefix, "norm2"), f);
        self.conv2.visit_mut(&child(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&child(prefix, "skip"), f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    FrozenA,
    TrainableB,
}

/// Semantic latents fed to the denoiser's blocks.
#[derive(Clone)]
pub enum Conditioning<'t> {
    /// One `[n, latent_dim]` latent for every block.
    Single(Var<'t>),
    /// Per-block choice between two latents, in block order.
    Split {
        input: Var<'t>,
        style: Var<'t>,
        roles: Vec<LatentRole>,
    },
}

impl<'t> Conditioning<'t> {
    fn latent(&self, block: usize) -> &Var<'t> {
        match self {
            Conditioning::Single(z) => z,
            Conditioning::Split { input, style, roles } => match roles[block] {
                LatentRole::Input => input,
                LatentRole::Style => style,
            },
        }
    }
}

/// U-Net noise predictor `eps(x_t, t, z_sem)`.
#[derive(Clone, Debug)]
pub struct ConditionalDenoiser {
    pub config: DiffAeConfig,
    pub role: Role,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    /// Per-timestep `(c_in, c_skip)`; empty means the raw network output.
    precond: Vec<(f64, f64)>,
}

impl ConditionalDenoiser {
    pub fn new(config: &DiffAeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ladder = cfg.ladder();
        let c0 = cfg.channels[0];
        let time1 = Linear::new(cfg.time_dim / 2, cfg.time_dim, &mut rng);
        let time2 = Linear::new(cfg.time_dim, cfg.time_dim, &mut rng);
        let conv_in = Conv2d::new(cfg.image_channels, c0, 3, &mut rng);
        let mut down = Vec::new();
        let mut cin = c0;
        for (l, &c) in cfg.channels.iter().enumerate() {
            for _ in 0..cfg.blocks_per_level {
                down.push(ResBlock::new(cfg, cin, c, ladder[l], &mut rng));
                cin = c;
            }
        }
        let last = *ladder.last().expect("non-empty ladder");
        let mid = ResBlock::new(cfg, cin, cin, last, &mut rng);
        let mut up = Vec::new();
        for (l, &c) in cfg.channels.iter().enumerate().rev() {
            for _ in 0..cfg.blocks_per_level {
                up.push(ResBlock::new(cfg, cin, c, ladder[l], &mut rng));
                cin = c;
            }
        }
        Ok(Self {
            config: cfg.clone(),
            role: Role::FrozenA,
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            norm_out: GroupNorm::new(cfg.groups, c0),
            conv_out: Conv2d::new(c0, cfg.image_channels, 3, &mut rng).with_gain(0.1),
            precond: Vec::new(),
        })
    }

    /// Rewrites the network as `eps = c_skip(t) x_t + F(c_in(t) x_t)`, with
    /// the coefficients of the optimal linear denoiser for data of standard
    /// deviation `config.data_std`. At high noise `eps` is close to `x_t`, so
    /// the network only has to model the image-dependent remainder.
    pub fn precondition(mut self, sched: &NoiseSchedule) -> Self {
        let s2 = self.config.data_std * self.config.data_std;
        self.precond = if s2 > 0.0 {
            sched
                .alpha_bars()
                .iter()
                .map(|&ab| {
                    let var = ab * s2 + 1.0 - ab;
                    (1.0 / var.sqrt(), (1.0 - ab).sqrt() / var)
                })
                .collect()
        } else {
            Vec::new()
        };
        self
    }

    /// A parameter-identical copy tagged as trainable. Storage is not shared
    /// with `self`, so gradient bookkeeping can never alias the two.
    pub fn trainable_copy(&self) -> Self {
        let mut copy = Self {
            role: Role::TrainableB,
            ..self.clone()
        };
        copy.visit_mut("", &mut |_, t| *t = Tensor::new(t.shape(), t.data().to_vec()).expect("same shape"));
        copy
    }

    /// Every residual block in evaluation order, with its resolution.
    pub fn blocks(&self) -> Vec<BlockSite> {
        let mut sites = Vec::new();
        let mut push = |half, resolution| {
            let index = sites.len();
            sites.push(BlockSite { index, half, resolution });
        };
        self.down.iter().for_each(|b| push(Half::Encoder, b.resolution));
        push(Half::Middle, self.mid.resolution);
        self.up.iter().for_each(|b| push(Half::Decoder, b.resolution));
        sites
    }

    /// Batched prediction; `t` holds one timestep per sample.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>, t: &[usize], cond: &Conditioning<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        if x.shape()[1..] != self.config.image_shape() {
            return Err(Error::Contract(format!(
                "denoiser input {:?} does not match model shape {:?}",
                x.shape(),
                self.config.image_shape()
            )));
        }
        if t.len() != n {
            return Err(Error::Contract(format!("{} timesteps for a batch of {n}", t.len())));
        }
        let check_z = |z: &Var<'t>| {
            if z.shape() != [n, self.config.latent_dim] {
                return Err(Error::Contract(format!(
                    "latent shape {:?}, expected [{n}, {}]",
                    z.shape(),
                    self.config.latent_dim
                )));
            }
            Ok(())
        };
        match cond {
            Conditioning::Single(z) => check_z(z)?,
            Conditioning::Split { input, style, roles } => {
                check_z(input)?;
                check_z(style)?;
                if roles.len() != self.blocks().len() {
                    return Err(Error::Contract(format!(
                        "plan covers {} blocks, denoiser has {}",
                        roles.len(),
                        self.blocks().len()
                    )));
                }
            }
        }

        let tf: Vec<f64> = t.iter().map(|&s| s as f64).collect();
        let emb = ctx.tape.constant(sinusoidal_embedding(&tf, self.config.time_dim / 2));
        let temb = self.time2.forward(ctx, &self.time1.forward(ctx, &emb).silu()).silu();

        let coef = |pick: fn(&(f64, f64)) -> f64| -> Result<Option<Var<'t>>> {
            if self.precond.is_empty() {
                return Ok(None);
            }
            let c = self.config.image_channels;
            let mut v = Vec::with_capacity(n * c);
            for &s in t {
                let pair = self
                    .precond
                    .get(s)
                    .ok_or_else(|| Error::Contract(format!("timestep {s} outside the preconditioned schedule")))?;
                v.extend(std::iter::repeat_n(pick(pair), c));
            }
            Ok(Some(ctx.tape.constant(Tensor::new(&[n, c], v)?)))
        };
        let zero = ctx.tape.constant(Tensor::zeros(&[n, self.config.image_channels]));
        let x_in = match coef(|p| p.0)? {
            Some(c_in) => x.affine_nc(&c_in, &zero),
            None => x.clone(),
        };
        let mut h = self.conv_in.forward(ctx, &x_in);
        let mut skips = Vec::with_capacity(self.down.len());
        let mut block = 0;
        for b in &self.down {
            if b.resolution < h.shape()[2] {
                h = h.avg_pool2();
            }
            h = b.forward(ctx, &h, &temb, cond.latent(block));
            skips.push(h.clone());
            block += 1;
        }
        h = self.mid.forward(ctx, &h, &temb, cond.latent(block));
        block += 1;
        for b in &self.up {
            if b.resolution > h.shape()[2] {
                h = h.upsample2();
            }
            h = b.forward(ctx, &h, &temb, cond.latent(block));
            h = h.add(&skips.pop().expect("one skip per decoder block"));
            block += 1;
        }
        let h = self.norm_out.forward(ctx, &h).silu();
        let out = self.conv_out.forward(ctx, &h);
        Ok(match coef(|p| p.1)? {
            Some(c_skip) => out.add(&x.affine_nc(&c_skip, &zero)),
            None => out,
        })
    }
}

impl Module for ConditionalDenoiser {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.time1.visit(&child(prefix, "time1"), f);
        self.time2.visit(&child(prefix, "time2"), f);
        self.conv_in.visit(&child(prefix, "conv_in"), f);
        visit_list(&self.down, &child(prefix, "down"), f);
        self.mid.visit(&child(prefix, "mid"), f);
        visit_list(&self.up, &child(prefix, "up"), f);
        self.norm_out.visit(&child(prefix, "norm_out"), f);
        self.conv_out.visit(&child(prefix, "conv_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.time1.visit_mut(&child(prefix, "time1"), f);
        self.time2.visit_mut(&child(prefix, "time2"), f);
        self.conv_in.visit_mut(&child(prefix, "conv_in"), f);
        visit_list_mut(&mut self.down, &child(prefix, "down"), f);
        self.mid.visit_mut(&child(prefix, "mid"), f);
        visit_list_mut(&mut self.up, &child(prefix, "up"), f);
        self.norm_out.visit_mut(&child(prefix, "norm_out"), f);
        self.conv_out.visit_mut(&child(prefix, "conv_out"), f);
    }
}

/// A denoiser bound to a tape and a conditioning, usable as an [`EpsModel`].
pub struct Conditioned<'m, 't> {
    pub model: &'m ConditionalDenoiser,
    pub ctx: Ctx<'t>,
    pub cond: Conditioning<'t>,
}

impl<'m, 't> EpsModel<'t> for Conditioned<'m, 't> {
    fn eps(&self, x_t: &Var<'t>, t: usize) -> Result<Var<'t>> {
        let n = x_t.shape()[0];
        self.model.forward(self.ctx, x_t, &vec![t; n], &self.cond)
    }
}

/// A frozen denoiser with a fixed single latent, usable on any tape.
pub struct WithLatent<'m> {
    pub model: &'m ConditionalDenoiser,
    pub z: &'m SemanticLatent,
}

impl<'t> EpsModel<'t> for WithLatent<'_> {
    fn eps(&self, x_t: &Var<'t>, t: usize) -> Result<Var<'t>> {
        let n = x_t.shape()[0];
        let tape = x_t.tape();
        let rows = Tensor::cat0(&vec![self.z.as_row(); n])?;
        let cond = Conditioning::Single(tape.constant(rows));
        self.model.forward(Ctx::frozen(tape), x_t, &vec![t; n], &cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentRole {
    Input,
    Style,
}

/// Resolution threshold at which conditioning switches from the input latent
/// (below) to the style latent (at or above).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPoint {
    /// Threshold 0: the input latent everywhere.
    AllInput,
    At(usize),
    /// Threshold above every resolution: the style latent everywhere.
    AllStyle,
}

impl SplitPoint {
    /// Parses `0`, a resolution, or `inf`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "max" => Ok(SplitPoint::AllStyle),
            "0" => Ok(SplitPoint::AllInput),
            other => other
                .parse::<usize>()
                .map(SplitPoint::At)
                .map_err(|_| Error::Parameter(format!("f_ch {other:?} is not 0, a resolution or inf"))),
        }
    }

    fn role(&self, resolution: usize) -> LatentRole {
        match *self {
            SplitPoint::AllInput => LatentRole::Input,
            SplitPoint::AllStyle => LatentRole::Style,
            SplitPoint::At(f) if resolution >= f => LatentRole::Style,
            SplitPoint::At(_) => LatentRole::Input,
        }
    }
}

impl std::fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitPoint::AllInput => write!(f, "0"),
            SplitPoint::At(r) => write!(f, "{r}"),
            SplitPoint::AllStyle => write!(f, "inf"),
        }
    }
}

/// Per-block latent assignment for mixing content and style.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningPlan {
    pub assignments: Vec<(BlockSite, LatentRole)>,
    pub f_ch: SplitPoint,
    pub z_in: SemanticLatent,
    pub z_style: SemanticLatent,
}

impl ConditioningPlan {
    pub fn roles(&self) -> Vec<LatentRole> {
        self.assignments.iter().map(|&(_, r)| r).collect()
    }

    /// The same blocks with input and style roles exchanged.
    pub fn swapped(&self) -> Self {
        let flip = |r| match r {
            LatentRole::Input => LatentRole::Style,
            LatentRole::Style => LatentRole::Input,
        };
        Self {
            assignments: self.assignments.iter().map(|&(s, r)| (s, flip(r))).collect(),
            ..self.clone()
        }
    }

    pub fn conditioning<'t>(&self, tape: &'t Tape, batch: usize) -> Conditioning<'t> {
        let rows = |z: &SemanticLatent| {
            let row = z.as_row();
            Tensor::cat0(&vec![row; batch]).expect("equal rows")
        };
        Conditioning::Split {
            input: tape.constant(rows(&self.z_in)),
            style: tape.constant(rows(&self.z_style)),
            roles: self.roles(),
        }
    }

    fn check(&self, denoiser: &ConditionalDenoiser) -> Result<()> {
        let sites: Vec<BlockSite> = self.assignments.iter().map(|&(s, _)| s).collect();
        if sites != denoiser.blocks() {
            return Err(Error::Contract("conditioning plan was built for a different denoiser".into()));
        }
        for z in [&self.z_in, &self.z_style] {
            if z.dim() != denoiser.config.latent_dim {
                return Err(Error::Contract(format!(
                    "latent dimension {} does not match {}",
                    z.dim(),
                    denoiser.config.latent_dim
                )));
            }
        }
        Ok(())
    }
}

/// Blocks at resolution `>= f_ch` take the style latent, the rest the input
/// latent. The middle block counts as a block at the lowest resolution.
pub fn make_conditioning_plan(
    z_in: &SemanticLatent,
    z_style: &SemanticLatent,
    f_ch: SplitPoint,
    denoiser: &ConditionalDenoiser,
) -> Result<ConditioningPlan> {
    if let SplitPoint::At(f) = f_ch {
        if f != 0 && !denoiser.config.ladder().contains(&f) {
            return Err(Error::Parameter(format!(
                "f_ch {f} is not on the resolution ladder {:?}",
                denoiser.config.ladder()
            )));
        }
    }
    let plan = ConditioningPlan {
        assignments: denoiser.blocks().into_iter().map(|s| (s, f_ch.role(s.resolution))).collect(),
        f_ch,
        z_in: z_in.clone(),
        z_style: z_style.clone(),
    };
    plan.check(denoiser)?;
    Ok(plan)
}

/// Single-image noise prediction under a single latent.
pub fn denoise(denoiser: &ConditionalDenoiser, x_t: &Tensor, t: usize, z: &SemanticLatent) -> Result<Tensor> {
    check_image(&denoiser.config, x_t)?;
    let tape = Tape::inference();
    let cond = Conditioning::Single(tape.constant(z.as_row()));
    let eps = denoiser.forward(Ctx::frozen(&tape), &tape.constant(as_batch(x_t)), &[t], &cond)?;
    Ok(unbatch(eps.into_value()))
}

/// Single-image noise prediction under a conditioning plan.
pub fn denoise_with_plan(
    denoiser: &ConditionalDenoiser,
    x_t: &Tensor,
    t: usize,
    plan: &ConditioningPlan,
) -> Result<Tensor> {
    check_image(&denoiser.config, x_t)?;
    plan.check(denoiser)?;
    let tape = Tape::inference();
    let eps = denoiser.forward(Ctx::frozen(&tape), &tape.constant(as_batch(x_t)), &[t], &plan.conditioning(&tape, 1))?;
    Ok(unbatch(eps.into_value()))
}

fn check_steps(steps: &TimestepSubsequence, t0: usize) -> Result<()> {
    if steps.first() != 0 || steps.last() != t0 {
        return Err(Error::Parameter(format!(
            "step list must run from 0 to t0 = {t0}, got {:?}",
            steps.steps()
        )));
    }
    Ok(())
}

/// Deterministic DDIM encoding of `image` to `steps.last()` under `z_sem`.
pub fn diffae_encode(
    denoiser: &ConditionalDenoiser,
    image: &Tensor,
    z_sem: &SemanticLatent,
    steps: &TimestepSubsequence,
    sched: &NoiseSchedule,
) -> Result<StructuralLatent> {
    check_image(&denoiser.config, image)?;
    check_steps(steps, steps.last())?;
    let tape = Tape::inference();
    let model = Conditioned {
        model: denoiser,
        ctx: Ctx::frozen(&tape),
        cond: Conditioning::Single(tape.constant(z_sem.as_row())),
    };
    let x = tape.constant(as_batch(image));
    let out = run_trajectory_var(&model, &x, steps, Direction::Encode, Mode::Ddim, 0, sched, false)?;
    Ok(StructuralLatent {
        tensor: unbatch(out.output.into_value()),
        t0: steps.last(),
    })
}

/// Deterministic DDIM decoding of a structural latent under `z_sem`.
pub fn diffae_decode(
    denoiser: &ConditionalDenoiser,
    x_t0: &StructuralLatent,
    z_sem: &SemanticLatent,
    steps: &TimestepSubsequence,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_image(&denoiser.config, &x_t0.tensor)?;
    check_steps(steps, x_t0.t0)?;
    let tape = Tape::inference();
    let model = Conditioned {
        model: denoiser,
        ctx: Ctx::frozen(&tape),
        cond: Conditioning::Single(tape.constant(z_sem.as_row())),
    };
    let x = tape.constant(as_batch(&x_t0.tensor));
    let out = run_trajectory_var(&model, &x, steps, Direction::Decode, Mode::Ddim, 0, sched, false)?;
    Ok(unbatch(out.output.into_value()))
}
