//! Parameterized layers and the parameter-visiting machinery shared by all
//! networks (checkpointing, optimizers, freeze checks).

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Anything that owns named parameter tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// SHA-256 over every parameter name and its little-endian bytes.
    fn param_digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit("", &mut |name, t| {
            hasher.update(name.as_bytes());
            hasher.update(t.to_le_bytes());
        });
        hex::encode(hasher.finalize())
    }
}

/// How a network's parameters enter a tape: tracked leaves or constants.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub track: bool,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, track: bool) -> Self {
        Self { tape, track }
    }

    pub fn frozen(tape: &'t Tape) -> Self {
        Self { tape, track: false }
    }

    pub fn p(&self, t: &Tensor) -> Var<'t> {
        self.tape.bind(t, self.track)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Scales the initial weights, e.g. to start a residual branch near zero.
    pub fn with_gain(mut self, gain: f64) -> Self {
        self.weight = self.weight.scale(gain);
        self
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        x.conv2d(&ctx.p(&self.weight), &ctx.p(&self.bias))
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[dout, din], -bound, bound, rng),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn zeroed(din: usize, dout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[dout, din]),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.weight = self.weight.scale(gain);
        self
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        x.linear(&ctx.p(&self.weight), &ctx.p(&self.bias))
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0, "{channels} channels into {groups} groups");
        Self {
            groups,
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: &Var<'t>) -> Var<'t> {
        x.group_norm(self.groups, &ctx.p(&self.gamma), &ctx.p(&self.beta))
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

pub(crate) fn visit_list<M: Module>(items: &[M], prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
    for (i, m) in items.iter().enumerate() {
        m.visit(&join(prefix, &i.to_string()), f);
    }
}

pub(crate) fn visit_list_mut<M: Module>(
    items: &mut [M],
    prefix: &str,
    f: &mut dyn FnMut(String, &mut Tensor),
) {
    for (i, m) in items.iter_mut().enumerate() {
        m.visit_mut(&join(prefix, &i.to_string()), f);
    }
}

pub(crate) fn child(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

/// Sinusoidal embeddings `[sin(t w_i), cos(t w_i)]` with geometric
/// frequencies `w_i = 10000^(-i / (dim/2))`; one row per timestep.
pub fn sinusoidal_embedding(timesteps: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
    }
    Tensor::from_vec(&[timesteps.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_embedding_distinguishes_timesteps() {
        let e = sinusoidal_embedding(&[0.0, 1.0, 50.0], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert_eq!(e.data()[0], 0.0);
        assert_eq!(e.data()[8], 1.0);
        assert!(e.select0(1).max_abs_diff(&e.select0(2)) > 0.1);
    }

    #[test]
    fn digest_changes_with_parameters() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(2, 2, 3, &mut rng);
        let d0 = conv.param_digest();
        conv.bias.data_mut()[0] += 1e-12;
        assert_ne!(d0, conv.param_digest());
    }
}
