//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation whose inputs depend on a watched leaf.
//! Operations on untracked inputs (frozen weights, constants) run eagerly and
//! are never recorded, so inference on a disabled tape costs the same as
//! plain tensor code.
//!
//! Leaves are keyed by their tensor storage ([`Tensor::key`]). Binding the
//! same parameter tensor several times, as happens when a denoiser is unrolled
//! over a trajectory, accumulates all contributions into one gradient.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    key: Option<usize>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            enabled: true,
        }
    }

    /// A tape that never records; every variable is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            enabled: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// Registers `value` as a differentiable leaf.
    pub fn watch(&self, value: &Tensor) -> Var<'_> {
        if !self.enabled {
            return self.constant(value.clone());
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            key: Some(value.key()),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value: value.clone(),
        }
    }

    /// Binds `value` as a leaf when `track` is set, as a constant otherwise.
    pub fn bind(&self, value: &Tensor, track: bool) -> Var<'_> {
        if track {
            self.watch(value)
        } else {
            self.constant(value.clone())
        }
    }

    fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[&Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let tracked = self.enabled && parents.iter().any(|p| p.id.is_some());
        if !tracked {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
            key: None,
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Back-propagates from scalar `root` and consumes the recorded graph.
    pub fn backward(&self, root: &Var<'_>) -> Gradients {
        assert_eq!(root.value.numel(), 1, "backward root must be a scalar");
        let mut out = Gradients::default();
        let Some(root_id) = root.id else {
            return out;
        };
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = vec![None; root_id + 1];
        grads[root_id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=root_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            if let Some(key) = node.key {
                match out.by_key.get_mut(&key) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        out.by_key.insert(key, grad.clone());
                    }
                }
            }
            if let Some(backward) = node.backward.take() {
                let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
                let parent_grads = backward(&grad, &needs);
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    if let (Some(pid), Some(pg)) = (parent, pg) {
                        match grads[*pid].as_mut() {
                            Some(acc) => acc.add_assign(&pg),
                            None => grads[*pid] = Some(pg),
                        }
                    }
                }
            }
        }
        nodes.clear();
        out
    }
}

/// Gradients of watched leaves, looked up by the tensor that was watched.
#[derive(Default)]
pub struct Gradients {
    by_key: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, value: &Tensor) -> Option<&Tensor> {
        self.by_key.get(&value.key())
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}

#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Tensor,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, tracked={})", self.value, self.id.is_some())
    }
}

fn unbroadcast_nc(grad: &Tensor, n: usize, c: usize) -> Tensor {
    let hw = grad.numel() / (n * c);
    let data = grad.data().chunks(hw).map(|ch| ch.iter().sum()).collect();
    Tensor::from_vec(&[n, c], data)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value.clone())
    }

    pub fn constant_like(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.tape.record(self.value.add(&other.value), &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.tape.record(self.value.sub(&other.value), &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value.clone(), other.value.clone());
        self.tape.record(self.value.mul(&other.value), &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.mul(&b)),
                need[1].then(|| g.mul(&a)),
            ]
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.tape
            .record(self.value.scale(s), &[self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.tape
            .record(self.value.map(|v| v + s), &[self], |g, _| vec![Some(g.clone())])
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_by(&self, s: &Var<'t>) -> Var<'t> {
        let sv = s.value.item();
        let x = self.value.clone();
        self.tape.record(self.value.scale(sv), &[self, s], move |g, need| {
            vec![
                need[0].then(|| g.scale(sv)),
                need[1].then(|| Tensor::scalar(g.dot(&x))),
            ]
        })
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value.clone(), other.value.clone());
        self.tape.record(self.value.zip_map(&other.value, |x, y| x / y), &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, bv| gv / bv)),
                need[1].then(|| {
                    let t = g.mul(&a);
                    t.zip_map(&b, |tv, bv| -tv / (bv * bv))
                }),
            ]
        })
    }

    pub fn square(&self) -> Var<'t> {
        let x = self.value.clone();
        self.tape.record(self.value.map(|v| v * v), &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| 2.0 * gv * xv))]
        })
    }

    pub fn sqrt(&self) -> Var<'t> {
        let y = self.value.map(f64::sqrt);
        let yc = y.clone();
        self.tape.record(y, &[self], move |g, _| {
            vec![Some(g.zip_map(&yc, |gv, yv| 0.5 * gv / yv))]
        })
    }

    /// Elementwise absolute value with subgradient `sign(x)` (0 at 0).
    pub fn abs(&self) -> Var<'t> {
        let x = self.value.clone();
        self.tape.record(self.value.map(f64::abs), &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| gv * sign(xv)))]
        })
    }

    pub fn silu(&self) -> Var<'t> {
        let x = self.value.clone();
        let y = self.value.map(|v| v * kernels::sigmoid(v));
        self.tape.record(y, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| {
                let s = kernels::sigmoid(xv);
                gv * (s + xv * s * (1.0 - s))
            }))]
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let shape = self.value.shape().to_vec();
        self.tape.record(Tensor::scalar(self.value.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let old = self.value.shape().to_vec();
        self.tape.record(self.value.reshaped(shape), &[self], move |g, _| {
            vec![Some(g.reshaped(&old))]
        })
    }

    /// Concatenates along the leading axis.
    pub fn cat0(items: &[Var<'t>]) -> Var<'t> {
        let tape = items[0].tape;
        let values: Vec<Tensor> = items.iter().map(|v| v.value.clone()).collect();
        let leads: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        let inner = values[0].numel() / leads[0];
        let out = Tensor::cat0(&values).expect("cat0");
        let refs: Vec<&Var<'t>> = items.iter().collect();
        tape.record(out, &refs, move |g, need| {
            let mut off = 0;
            leads
                .iter()
                .zip(need)
                .map(|(&l, &nd)| {
                    let part = &g.data()[off * inner..(off + l) * inner];
                    off += l;
                    nd.then(|| {
                        let mut shape = g.shape().to_vec();
                        shape[0] = l;
                        Tensor::from_vec(&shape, part.to_vec())
                    })
                })
                .collect()
        })
    }

    /// Item `index` along the leading axis (kept as size 1).
    pub fn select0(&self, index: usize) -> Var<'t> {
        let full = self.value.shape().to_vec();
        let inner = self.value.numel() / full[0];
        self.tape.record(self.value.select0(index), &[self], move |g, _| {
            let mut d = vec![0.0; full.iter().product()];
            d[index * inner..(index + 1) * inner].copy_from_slice(g.data());
            vec![Some(Tensor::from_vec(&full, d))]
        })
    }

    /// Columns `start..start+len` of a `[n, d]` matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Var<'t> {
        let (n, d) = (self.value.shape()[0], self.value.shape()[1]);
        let data: Vec<f64> = (0..n)
            .flat_map(|r| self.value.data()[r * d + start..r * d + start + len].to_vec())
            .collect();
        self.tape.record(Tensor::from_vec(&[n, len], data), &[self], move |g, _| {
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                out[r * d + start..r * d + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::from_vec(&[n, d], out))]
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let (m, k) = (self.value.shape()[0], self.value.shape()[1]);
        let n = other.value.shape()[1];
        assert_eq!(other.value.shape()[0], k, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value.data(), (k, 1), other.value.data(), (n, 1), 0.0, &mut out, (n, 1));
        let (a, b) = (self.value.clone(), other.value.clone());
        self.tape.record(Tensor::from_vec(&[m, n], out), &[self, other], move |g, need| {
            let da = need[0].then(|| {
                let mut d = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), 0.0, &mut d, (k, 1));
                Tensor::from_vec(&[m, k], d)
            });
            let db = need[1].then(|| {
                let mut d = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), 0.0, &mut d, (n, 1));
                Tensor::from_vec(&[k, n], d)
            });
            vec![da, db]
        })
    }

    /// `x [n, din] -> x W^T + b` with `weight [dout, din]`, `bias [dout]`.
    pub fn linear(&self, weight: &Var<'t>, bias: &Var<'t>) -> Var<'t> {
        let (n, din) = (self.value.shape()[0], self.value.shape()[1]);
        let dout = weight.value.shape()[0];
        assert_eq!(weight.value.shape()[1], din, "linear input width mismatch");
        let mut out: Vec<f64> = (0..n).flat_map(|_| bias.value.data().to_vec()).collect();
        kernels::gemm(n, din, dout, self.value.data(), (din, 1), weight.value.data(), (1, din), 1.0, &mut out, (dout, 1));
        let (x, w) = (self.value.clone(), weight.value.clone());
        self.tape.record(Tensor::from_vec(&[n, dout], out), &[self, weight, bias], move |g, need| {
            let dx = need[0].then(|| {
                let mut d = vec![0.0; n * din];
                kernels::gemm(n, dout, din, g.data(), (dout, 1), w.data(), (din, 1), 0.0, &mut d, (din, 1));
                Tensor::from_vec(&[n, din], d)
            });
            let dw = need[1].then(|| {
                let mut d = vec![0.0; dout * din];
                kernels::gemm(dout, n, din, g.data(), (1, dout), x.data(), (din, 1), 0.0, &mut d, (din, 1));
                Tensor::from_vec(&[dout, din], d)
            });
            let db = need[2].then(|| {
                let mut d = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_vec(&[dout], d)
            });
            vec![dx, dw, db]
        })
    }

    /// Stride-1 convolution with zero padding `k / 2`; `weight [cout, cin, k, k]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Var<'t> {
        let (n, cin, h, w) = self.value.dims4();
        let ws = weight.value.shape();
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        let dims = ConvDims { n, cin, cout: ws[0], h, w, k: ws[2] };
        let out = kernels::conv2d_forward(self.value.data(), weight.value.data(), bias.value.data(), &dims);
        let (x, wt) = (self.value.clone(), weight.value.clone());
        let out_shape = [n, dims.cout, h, w];
        self.tape.record(Tensor::from_vec(&out_shape, out), &[self, weight, bias], move |g, need| {
            let (dx, dw, db) = kernels::conv2d_backward(x.data(), wt.data(), g.data(), &dims, need[0], need[1]);
            vec![
                dx.map(|d| Tensor::from_vec(x.shape(), d)),
                dw.map(|d| Tensor::from_vec(wt.shape(), d)),
                need[2].then(|| Tensor::from_vec(&[dims.cout], db)),
            ]
        })
    }

    pub fn group_norm(&self, groups: usize, gamma: &Var<'t>, beta: &Var<'t>) -> Var<'t> {
        let (n, c, h, w) = self.value.dims4();
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let dims = (n, c, h * w);
        let (out, cache) = kernels::group_norm_forward(
            self.value.data(),
            dims,
            groups,
            gamma.value.data(),
            beta.value.data(),
            1e-5,
        );
        let gm = gamma.value.clone();
        let shape = self.value.shape().to_vec();
        self.tape.record(Tensor::from_vec(&shape.clone(), out), &[self, gamma, beta], move |g, need| {
            let (dx, dg, db) = kernels::group_norm_backward(g.data(), &cache, dims, groups, gm.data());
            vec![
                need[0].then(|| Tensor::from_vec(&shape, dx)),
                need[1].then(|| Tensor::from_vec(&[c], dg)),
                need[2].then(|| Tensor::from_vec(&[c], db)),
            ]
        })
    }

    /// `x * scale + shift` with per-sample, per-channel `scale`/`shift` of shape `[n, c]`.
    pub fn affine_nc(&self, scale: &Var<'t>, shift: &Var<'t>) -> Var<'t> {
        let (n, c, h, w) = self.value.dims4();
        let hw = h * w;
        assert_eq!(scale.value.shape(), [n, c], "affine scale shape");
        assert_eq!(shift.value.shape(), [n, c], "affine shift shape");
        let mut out = self.value.data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            let (s, b) = (scale.value.data()[p], shift.value.data()[p]);
            for v in chunk.iter_mut() {
                *v = *v * s + b;
            }
        }
        let (x, sc) = (self.value.clone(), scale.value.clone());
        self.tape.record(Tensor::from_vec(x.shape(), out), &[self, scale, shift], move |g, need| {
            let dx = need[0].then(|| {
                let mut d = g.data().to_vec();
                for (p, chunk) in d.chunks_mut(hw).enumerate() {
                    let s = sc.data()[p];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                Tensor::from_vec(x.shape(), d)
            });
            let ds = need[1].then(|| unbroadcast_nc(&g.mul(&x), n, c));
            let db = need[2].then(|| unbroadcast_nc(g, n, c));
            vec![dx, ds, db]
        })
    }

    pub fn avg_pool2(&self) -> Var<'t> {
        let (n, c, h, w) = self.value.dims4();
        let out = kernels::avg_pool2_forward(self.value.data(), (n * c, h, w));
        self.tape.record(Tensor::from_vec(&[n, c, h / 2, w / 2], out), &[self], move |g, _| {
            vec![Some(Tensor::from_vec(&[n, c, h, w], kernels::avg_pool2_backward(g.data(), (n * c, h, w))))]
        })
    }

    pub fn upsample2(&self) -> Var<'t> {
        let (n, c, h, w) = self.value.dims4();
        let out = kernels::upsample2_forward(self.value.data(), (n * c, h, w));
        self.tape.record(Tensor::from_vec(&[n, c, 2 * h, 2 * w], out), &[self], move |g, _| {
            vec![Some(Tensor::from_vec(&[n, c, h, w], kernels::upsample2_backward(g.data(), (n * c, h, w))))]
        })
    }

    /// Spatial mean: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Var<'t> {
        let (n, c, h, w) = self.value.dims4();
        let hw = h * w;
        let out = unbroadcast_nc(&self.value, n, c).scale(1.0 / hw as f64);
        self.tape.record(out, &[self], move |g, _| {
            let d: Vec<f64> = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
            vec![Some(Tensor::from_vec(&[n, c, h, w], d))]
        })
    }

    /// Unit-normalizes the channel vector at every pixel: `x / sqrt(sum_c x^2 + eps)`.
    pub fn normalize_channels(&self, eps: f64) -> Var<'t> {
        let (n, c, h, w) = self.value.dims4();
        let hw = h * w;
        let x = self.value.clone();
        let mut inv = vec![0.0; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let ss: f64 = (0..c).map(|ch| x.data()[(b * c + ch) * hw + p].powi(2)).sum();
                inv[b * hw + p] = 1.0 / (ss + eps).sqrt();
            }
        }
        let out = Tensor::from_fn(x.shape(), |i| {
            let (b, p) = (i / (c * hw), i % hw);
            x.data()[i] * inv[b * hw + p]
        });
        self.tape.record(out, &[self], move |g, _| {
            // d/dx (x * r) with r = (|x|^2 + eps)^-1/2: g*r - x * r^3 * <g, x>
            let mut d = vec![0.0; x.numel()];
            for b in 0..n {
                for p in 0..hw {
                    let r = inv[b * hw + p];
                    let gx: f64 = (0..c)
                        .map(|ch| {
                            let i = (b * c + ch) * hw + p;
                            g.data()[i] * x.data()[i]
                        })
                        .sum();
                    for ch in 0..c {
                        let i = (b * c + ch) * hw + p;
                        d[i] = g.data()[i] * r - x.data()[i] * r * r * r * gx;
                    }
                }
            }
            vec![Some(Tensor::from_vec(x.shape(), d))]
        })
    }

    /// Mean over rows of `table` picked by each bag: `[vocab, d] -> [bags, d]`.
    pub fn embedding_bag(&self, bags: &[Vec<usize>]) -> Var<'t> {
        let (v, d) = (self.value.shape()[0], self.value.shape()[1]);
        let mut out = vec![0.0; bags.len() * d];
        for (b, bag) in bags.iter().enumerate() {
            let inv = 1.0 / bag.len() as f64;
            for &tok in bag {
                for j in 0..d {
                    out[b * d + j] += self.value.data()[tok * d + j] * inv;
                }
            }
        }
        let bags = bags.to_vec();
        self.tape.record(Tensor::from_vec(&[bags.len(), d], out), &[self], move |g, _| {
            let mut dt = vec![0.0; v * d];
            for (b, bag) in bags.iter().enumerate() {
                let inv = 1.0 / bag.len() as f64;
                for &tok in bag {
                    for j in 0..d {
                        dt[tok * d + j] += g.data()[b * d + j] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[v, d], dt))]
        })
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against row targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Var<'t> {
        let (n, k) = (self.value.shape()[0], self.value.shape()[1]);
        assert_eq!(targets.len(), n);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &self.value.data()[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            loss -= row[targets[r]] - mx - z.ln();
        }
        let targets = targets.to_vec();
        self.tape.record(Tensor::scalar(loss / n as f64), &[self], move |g, _| {
            let s = g.item() / n as f64;
            let mut d = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                d[r * k + t] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= s);
            vec![Some(Tensor::from_vec(&[n, k], d))]
        })
    }

    pub fn dot(&self, other: &Var<'t>) -> Var<'t> {
        self.mul(other).sum()
    }

    pub fn norm(&self) -> Var<'t> {
        self.square().sum().sqrt()
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(x: &Tensor, build: &dyn for<'t> Fn(&Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let v = tape.watch(x);
        let out = build(&v);
        let grads = tape.backward(&out);
        let analytic = grads.get(x).expect("gradient for watched leaf").clone();
        let numeric = numeric_grad(x, &|p| {
            let t = Tape::inference();
            build(&t.constant(p.clone())).item()
        });
        let err = analytic.max_abs_diff(&numeric);
        let scale = numeric.data().iter().fold(1e-3f64, |a, b| a.max(b.abs()));
        assert!(err / scale < 1e-6, "gradient mismatch: {err} (scale {scale})");
    }

    #[test]
    fn conv_norm_pool_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 4, 6, 6], &mut rng);
        let w3 = Tensor::randn(&[4, 4, 3, 3], &mut rng).scale(0.3);
        let w1 = Tensor::randn(&[2, 4, 1, 1], &mut rng);
        let b = Tensor::randn(&[4], &mut rng);
        let b1 = Tensor::randn(&[2], &mut rng);
        let gamma = Tensor::randn(&[4], &mut rng);
        let beta = Tensor::randn(&[4], &mut rng);
        let scale = Tensor::randn(&[2, 4], &mut rng);
        let probe = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        check(&x, &|v| {
            let t = v.tape();
            let h = v.conv2d(&t.constant(w3.clone()), &t.constant(b.clone()));
            let h = h.group_norm(2, &t.constant(gamma.clone()), &t.constant(beta.clone()));
            let h = h.affine_nc(&t.constant(scale.clone()), &t.constant(scale.clone())).silu();
            let h = h.conv2d(&t.constant(w1.clone()), &t.constant(b1.clone())).avg_pool2();
            h.mul(&t.constant(probe.clone())).sum()
        });
    }

    #[test]
    fn weight_gradients_through_conv_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let w = Tensor::randn(&[5, 3, 3, 3], &mut rng);
        let b = Tensor::randn(&[5], &mut rng);
        let lw = Tensor::randn(&[2, 5], &mut rng);
        let lb = Tensor::randn(&[2], &mut rng);
        check(&w, &|wv| {
            let t = wv.tape();
            let h = t.constant(x.clone()).conv2d(wv, &t.constant(b.clone())).upsample2();
            let pooled = h.global_avg_pool();
            pooled.linear(&t.constant(lw.clone()), &t.constant(lb.clone())).square().sum()
        });
        check(&lw, &|lv| {
            let t = lv.tape();
            let h = t.constant(x.clone()).conv2d(&t.constant(w.clone()), &t.constant(b.clone()));
            h.global_avg_pool().linear(lv, &t.constant(lb.clone())).silu().sum()
        });
    }

    #[test]
    fn vector_and_loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let m = Tensor::randn(&[4, 5], &mut rng);
        check(&a, &|v| v.matmul(&v.constant_like(m.clone())).cross_entropy(&[0, 3, 1]));
        check(&a, &|v| {
            let n = v.norm();
            v.narrow_cols(1, 2).sum().div(&n).add(&v.select0(2).abs().mean())
        });
        let img = Tensor::randn(&[1, 3, 2, 2], &mut rng);
        check(&img, &|v| v.normalize_channels(1e-10).mul(&v.scale(0.5)).sum());
        let table = Tensor::randn(&[6, 3], &mut rng);
        check(&table, &|v| v.embedding_bag(&[vec![0, 2], vec![5]]).square().sum().sqrt());
        let s = Tensor::scalar(0.7);
        check(&s, &|v| v.constant_like(a.clone()).mul_by(v).square().sum());
    }

    #[test]
    fn cat_and_select_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[1, 2, 2, 2], &mut rng);
        let b = Tensor::randn(&[2, 2, 2, 2], &mut rng);
        check(&a, &|v| {
            let c = Var::cat0(&[v.clone(), v.constant_like(b.clone())]);
            c.select0(0).square().sum().add(&c.square().sum())
        });
    }

    #[test]
    fn repeated_leaf_binding_accumulates() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let a = tape.watch(&x);
        let b = tape.watch(&x);
        let out = a.mul(&b).sum();
        let g = tape.backward(&out);
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.watch(&Tensor::ones(&[3]));
        let y = x.square().sum();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }
}
