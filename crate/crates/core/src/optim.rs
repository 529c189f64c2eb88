//! First-order adaptive-moment optimizer.

use crate::autograd::Gradients;
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `module` that has a gradient.
    /// Moment buffers are indexed by visiting order, which is fixed per module.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_mut("", &mut |_, param| {
            if m_all.len() <= idx {
                m_all.push(Tensor::zeros(param.shape()));
                v_all.push(Tensor::zeros(param.shape()));
            }
            if let Some(g) = grads.get(param) {
                let g = g.clone();
                let m = m_all[idx].data_mut();
                let v = v_all[idx].data_mut();
                let p = param.data_mut();
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}

/// Optimizer state for a single free tensor (e.g. a latent being optimized).
#[derive(Clone, Debug)]
pub struct AdamVec {
    inner: Adam,
}

struct Single<'a>(&'a mut Tensor);

impl Module for Single<'_> {
    fn visit(&self, _: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f("x".into(), self.0);
    }
    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("x".into(), self.0);
    }
}

impl AdamVec {
    pub fn new(lr: f64) -> Self {
        Self { inner: Adam::new(lr) }
    }

    pub fn step(&mut self, x: &mut Tensor, grads: &Gradients) {
        self.inner.step(&mut Single(x), grads);
    }
}
