//! Noise schedules and the elementary diffusion transitions.
//!
//! Conventions: `alpha_bar(t)` is the cumulative product `prod_{s<=t} (1 - beta_s)`
//! with `alpha_bar(0) = 1`; timesteps run `0..=T`. Every transition is written
//! against [`Var`] so that the same code serves inference (on a disabled tape)
//! and training (back-propagating through unrolled trajectories).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
}

/// Choice of the reverse-DDPM noise scale `sigma_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `sigma_t = sqrt(beta_t)`.
    Beta,
    /// `sigma_t^2 = beta_t (1 - alpha_bar(t-1)) / (1 - alpha_bar(t))`.
    Posterior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
    pub variance: ReverseVariance,
}

impl NoiseSchedule {
    pub fn build(total: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<Self> {
        Self::build_with_variance(total, beta_start, beta_end, kind, ReverseVariance::Beta)
    }

    pub fn build_with_variance(
        total: usize,
        beta_start: f64,
        beta_end: f64,
        kind: BetaKind,
        variance: ReverseVariance,
    ) -> Result<Self> {
        if total < 1 {
            return Err(Error::Parameter("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            BetaKind::Linear => (0..total)
                .map(|i| {
                    if total == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (total - 1) as f64
                    }
                })
                .collect(),
        };
        let mut alpha_bars = Vec::with_capacity(total + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        let sigmas = (1..=total)
            .map(|t| {
                let beta = betas[t - 1];
                match variance {
                    ReverseVariance::Beta => beta.sqrt(),
                    ReverseVariance::Posterior => {
                        (beta * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])).sqrt()
                    }
                }
            })
            .collect();
        Ok(Self {
            betas,
            alpha_bars,
            sigmas,
            beta_start,
            beta_end,
            kind,
            variance,
        })
    }

    /// Linear schedule whose endpoints are the 1000-step defaults
    /// (`1e-4`, `0.02`) rescaled by `1000 / T`.
    pub fn scaled_linear(total: usize) -> Result<Self> {
        let scale = 1000.0 / total as f64;
        Self::build(total, 1e-4 * scale, (0.02 * scale).min(0.999), BetaKind::Linear)
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar(t)` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Reverse-DDPM noise scale for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.total_steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [{lo}, {}]",
                self.total_steps()
            )));
        }
        Ok(())
    }
}

/// A noise-prediction network `eps(x_t, t)`.
pub trait EpsModel<'t> {
    fn eps(&self, x_t: &Var<'t>, t: usize) -> Result<Var<'t>>;
}

/// Adapts a plain tensor closure into an [`EpsModel`]; outputs are constants.
pub struct FnEps<F>(pub F);

impl<'t, F: Fn(&Tensor, usize) -> Tensor> EpsModel<'t> for FnEps<F> {
    fn eps(&self, x_t: &Var<'t>, t: usize) -> Result<Var<'t>> {
        Ok(x_t.constant_like((self.0)(x_t.value(), t)))
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{what}: shape {:?} does not match {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

fn eval_eps<'t>(model: &dyn EpsModel<'t>, x_t: &Var<'t>, t: usize) -> Result<Var<'t>> {
    let eps = model.eps(x_t, t)?;
    check_same_shape(x_t.value(), eps.value(), "denoiser output")?;
    Ok(eps)
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) z`.
pub fn forward_marginal(x0: &Tensor, t: usize, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    check_same_shape(x0, z, "noise")?;
    let ab = sched.alpha_bar(t);
    Ok(x0.axpby(ab.sqrt(), z, (1.0 - ab).sqrt()))
}

/// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 1)?;
    check_same_shape(x_t, eps, "eps")?;
    let tape = Tape::inference();
    Ok(predict_x0_var(&tape.constant(x_t.clone()), &tape.constant(eps.clone()), sched.alpha_bar(t)).into_value())
}

pub(crate) fn predict_x0_var<'t>(x_t: &Var<'t>, eps: &Var<'t>, alpha_bar: f64) -> Var<'t> {
    x_t.sub(&eps.scale((1.0 - alpha_bar).sqrt())).scale(1.0 / alpha_bar.sqrt())
}

/// Deterministic DDIM move from `t` to `target` given a noise prediction.
pub(crate) fn ddim_move<'t>(x_t: &Var<'t>, eps: &Var<'t>, ab_t: f64, ab_target: f64) -> Var<'t> {
    let x0 = predict_x0_var(x_t, eps, ab_t);
    x0.scale(ab_target.sqrt()).add(&eps.scale((1.0 - ab_target).sqrt()))
}

/// One stochastic reverse step `x_t -> x_{t-1}`; `z` is the only noise source.
pub fn ddpm_reverse_step_var<'t>(
    model: &dyn EpsModel<'t>,
    x_t: &Var<'t>,
    t: usize,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    sched.check_t(t, 1)?;
    check_same_shape(x_t.value(), z, "noise")?;
    let eps = eval_eps(model, x_t, t)?;
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let mean = x_t.sub(&eps.scale(coef)).scale(1.0 / (1.0 - beta).sqrt());
    let sigma = sched.sigma(t);
    if sigma == 0.0 {
        return Ok(mean);
    }
    Ok(mean.add(&x_t.constant_like(z.scale(sigma))))
}

pub fn ddpm_reverse_step(
    model: &dyn for<'a> EpsModel<'a>,
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::inference();
    Ok(ddpm_reverse_step_var(model, &tape.constant(x_t.clone()), t, z, sched)?.into_value())
}

pub fn ddim_forward_step_var<'t>(
    model: &dyn EpsModel<'t>,
    x_t: &Var<'t>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    if t >= t_next {
        return Err(Error::Parameter(format!("encode step needs t < t_next, got {t} -> {t_next}")));
    }
    sched.check_t(t_next, 1)?;
    let eps = eval_eps(model, x_t, t)?;
    Ok(ddim_move(x_t, &eps, sched.alpha_bar(t), sched.alpha_bar(t_next)))
}

pub fn ddim_forward_step(
    model: &dyn for<'a> EpsModel<'a>,
    x_t: &Tensor,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::inference();
    Ok(ddim_forward_step_var(model, &tape.constant(x_t.clone()), t, t_next, sched)?.into_value())
}

pub fn ddim_reverse_step_var<'t>(
    model: &dyn EpsModel<'t>,
    x_t: &Var<'t>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    if t_prev >= t {
        return Err(Error::Parameter(format!("decode step needs t_prev < t, got {t} -> {t_prev}")));
    }
    sched.check_t(t, 1)?;
    let eps = eval_eps(model, x_t, t)?;
    Ok(ddim_move(x_t, &eps, sched.alpha_bar(t), sched.alpha_bar(t_prev)))
}

pub fn ddim_reverse_step(
    model: &dyn for<'a> EpsModel<'a>,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::inference();
    Ok(ddim_reverse_step_var(model, &tape.constant(x_t.clone()), t, t_prev, sched)?.into_value())
}

/// Strictly increasing timesteps used to stride an encode/decode trajectory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepSubsequence(Vec<usize>);

impl TimestepSubsequence {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Parameter("empty timestep subsequence".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!("timesteps not strictly increasing: {steps:?}")));
        }
        Ok(Self(steps))
    }

    /// `0, .., end` in `n` roughly equal strides (fewer if `end < n`).
    pub fn strided(end: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("need at least one stride".into()));
        }
        let mut steps: Vec<usize> = (0..=n)
            .map(|i| ((i as f64) * end as f64 / n as f64).round() as usize)
            .collect();
        steps.dedup();
        Self::new(steps)
    }

    /// Every timestep `0..=end`.
    pub fn full(end: usize) -> Self {
        Self((0..=end).collect())
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn first(&self) -> usize {
        self.0[0]
    }

    pub fn last(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.last() > sched.total_steps() {
            return Err(Error::Parameter(format!(
                "subsequence ends at {} beyond T = {}",
                self.last(),
                sched.total_steps()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Encode,
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Ddim,
    Ddpm,
}

pub struct Trajectory<'t> {
    pub output: Var<'t>,
    /// States after each step (the start state first), when requested.
    pub states: Option<Vec<Tensor>>,
}

/// Folds DDIM (or DDPM, decode only) steps over `steps`.
///
/// Encoding walks the subsequence upwards from its first element, decoding
/// walks it downwards from its last. DDPM decoding needs consecutive
/// timesteps; its noise comes from `seed` and no noise is added on the
/// final `1 -> 0` step.
#[allow(clippy::too_many_arguments)]
pub fn run_trajectory_var<'t>(
    model: &dyn EpsModel<'t>,
    x_start: &Var<'t>,
    steps: &TimestepSubsequence,
    direction: Direction,
    mode: Mode,
    seed: u64,
    sched: &NoiseSchedule,
    record: bool,
) -> Result<Trajectory<'t>> {
    steps.check(sched)?;
    let mut states = record.then(|| vec![x_start.value().clone()]);
    let mut x = x_start.clone();
    match (direction, mode) {
        (Direction::Encode, Mode::Ddpm) => {
            return Err(Error::Parameter("DDPM trajectories can only decode".into()));
        }
        (Direction::Encode, Mode::Ddim) => {
            for w in steps.steps().windows(2) {
                x = ddim_forward_step_var(model, &x, w[0], w[1], sched)?;
                if let Some(s) = states.as_mut() {
                    s.push(x.value().clone());
                }
            }
        }
        (Direction::Decode, Mode::Ddim) => {
            for w in steps.steps().windows(2).rev() {
                x = ddim_reverse_step_var(model, &x, w[1], w[0], sched)?;
                if let Some(s) = states.as_mut() {
                    s.push(x.value().clone());
                }
            }
        }
        (Direction::Decode, Mode::Ddpm) => {
            if steps.steps().windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::Parameter("DDPM decoding needs consecutive timesteps".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for w in steps.steps().windows(2).rev() {
                let t = w[1];
                let z = Tensor::randn(x.shape(), &mut rng);
                let z = if t == 1 { Tensor::zeros(x.shape()) } else { z };
                x = ddpm_reverse_step_var(model, &x, t, &z, sched)?;
                if let Some(s) = states.as_mut() {
                    s.push(x.value().clone());
                }
            }
        }
    }
    Ok(Trajectory { output: x, states })
}

pub fn run_trajectory(
    model: &dyn for<'a> EpsModel<'a>,
    x_start: &Tensor,
    steps: &TimestepSubsequence,
    direction: Direction,
    mode: Mode,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::inference();
    let traj = run_trajectory_var(model, &tape.constant(x_start.clone()), steps, direction, mode, seed, sched, false)?;
    Ok(traj.output.into_value())
}

/// Sampler used when generating from pure noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Deterministic strided DDIM.
    Ddim,
    /// Ancestral DDPM over every timestep.
    Ddpm,
}

/// Generates `x_0` from `x_start` at `T`.
///
/// Unlike encode/decode trajectories, every step clamps the predicted `x_0`
/// to `[-1, 1]` and re-derives the noise from it. `steps` is the DDIM stride
/// count; DDPM always visits every timestep and draws its noise from `seed`.
pub fn sample_from_noise(
    model: &dyn for<'a> EpsModel<'a>,
    x_start: &Tensor,
    kind: SamplerKind,
    steps: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let total = sched.total_steps();
    let seq = match kind {
        SamplerKind::Ddim => TimestepSubsequence::strided(total, steps)?,
        SamplerKind::Ddpm => TimestepSubsequence::full(total),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::inference();
    let mut x = x_start.clone();
    for w in seq.steps().windows(2).rev() {
        let (t, t_prev) = (w[1], w[0]);
        let eps = eval_eps(model, &tape.constant(x.clone()), t)?.into_value();
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let x0 = x.axpby(1.0 / ab.sqrt(), &eps, -((1.0 - ab) / ab).sqrt()).clamp(-1.0, 1.0);
        x = match kind {
            SamplerKind::Ddim => {
                let eps = x.axpby(1.0 / (1.0 - ab).sqrt(), &x0, -(ab / (1.0 - ab)).sqrt());
                x0.axpby(ab_prev.sqrt(), &eps, (1.0 - ab_prev).sqrt())
            }
            SamplerKind::Ddpm => {
                let beta = sched.beta(t);
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let mean = x0.axpby(c0, &x, ct);
                let z = Tensor::randn(x.shape(), &mut rng);
                if t > 1 {
                    mean.axpby(1.0, &z, sched.sigma(t))
                } else {
                    mean
                }
            }
        };
    }
    Ok(x)
}
