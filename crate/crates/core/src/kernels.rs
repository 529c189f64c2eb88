//! Raw forward/backward kernels over `f64` slices in NCHW layout.

/// `C = alpha * op(A) * op(B) + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfolds one `[c, h, w]` image into `[c * k * k, h * w]` patch columns for a
/// stride-1 convolution with zero padding `k / 2`.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s_lo = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&srow[s_lo..s_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
pub(crate) fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    let s_lo = (x_lo as isize + dx) as usize;
                    let drow = &mut dst[sy as usize * w + s_lo..sy as usize * w + s_lo + (x_hi - x_lo)];
                    for (d, s) in drow.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let mut out = vec![0.0; d.n * d.cout * hw];
    let mut col = if d.k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for b in 0..d.n {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let ob = &mut out[b * d.cout * hw..(b + 1) * d.cout * hw];
        for (co, chunk) in ob.chunks_mut(hw).enumerate() {
            chunk.fill(bias[co]);
        }
        let cols: &[f64] = if d.k == 1 {
            xb
        } else {
            im2col(xb, d.cin, d.h, d.w, d.k, &mut col);
            &col
        };
        gemm(d.cout, kk, hw, weight, (kk, 1), cols, (hw, 1), 1.0, ob, (hw, 1));
    }
    out
}

/// Returns `(dx, dweight, dbias)`; `dx`/`dweight` are skipped when not needed.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad: &[f64],
    d: &ConvDims,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let mut dbias = vec![0.0; d.cout];
    for b in 0..d.n {
        for (co, chunk) in grad[b * d.cout * hw..(b + 1) * d.cout * hw].chunks(hw).enumerate() {
            dbias[co] += chunk.iter().sum::<f64>();
        }
    }
    let mut dx = need_x.then(|| vec![0.0; d.n * d.cin * hw]);
    let mut dw = need_w.then(|| vec![0.0; d.cout * kk]);
    let mut col = vec![0.0; if d.k == 1 { 0 } else { kk * hw }];
    let mut dcol = vec![0.0; if need_x && d.k != 1 { kk * hw } else { 0 }];
    for b in 0..d.n {
        let gb = &grad[b * d.cout * hw..(b + 1) * d.cout * hw];
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        if let Some(dw) = dw.as_mut() {
            let cols: &[f64] = if d.k == 1 {
                xb
            } else {
                im2col(xb, d.cin, d.h, d.w, d.k, &mut col);
                &col
            };
            // dW[co, r] += sum_p g[co, p] * col[r, p]
            gemm(d.cout, hw, kk, gb, (hw, 1), cols, (1, hw), 1.0, dw, (kk, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw];
            if d.k == 1 {
                gemm(d.cin, d.cout, hw, weight, (1, kk), gb, (hw, 1), 1.0, dxb, (hw, 1));
            } else {
                gemm(kk, d.cout, hw, weight, (1, kk), gb, (hw, 1), 0.0, &mut dcol, (hw, 1));
                col2im_add(&dcol, d.cin, d.h, d.w, d.k, dxb);
            }
        }
    }
    (dx, dw, dbias)
}

pub(crate) struct GroupNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn group_norm_forward(
    x: &[f64],
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, GroupNormCache) {
    let cpg = c / groups;
    let glen = cpg * hw;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * groups];
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cpg) * hw;
            let seg = &x[start..start + glen];
            let mean = seg.iter().sum::<f64>() / glen as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[b * groups + g] = is;
            for (i, v) in seg.iter().enumerate() {
                let ch = g * cpg + i / hw;
                let xh = (v - mean) * is;
                xhat[start + i] = xh;
                out[start + i] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

pub(crate) fn group_norm_backward(
    grad: &[f64],
    cache: &GroupNormCache,
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cpg = c / groups;
    let glen = cpg * hw;
    let mut dx = vec![0.0; grad.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cpg) * hw;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for i in 0..glen {
                let ch = g * cpg + i / hw;
                let gi = grad[start + i];
                let xh = cache.xhat[start + i];
                dgamma[ch] += gi * xh;
                dbeta[ch] += gi;
                let dxh = gi * gamma[ch];
                sum_d += dxh;
                sum_dx += dxh * xh;
            }
            let mean_d = sum_d / glen as f64;
            let mean_dx = sum_dx / glen as f64;
            let is = cache.inv_std[b * groups + g];
            for i in 0..glen {
                let ch = g * cpg + i / hw;
                let dxh = grad[start + i] * gamma[ch];
                dx[start + i] = is * (dxh - mean_d - cache.xhat[start + i] * mean_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn avg_pool2_forward(x: &[f64], (nc, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad: &[f64], (nc, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let g = &grad[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = 0.25 * g[y * wo + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    dx
}

pub(crate) fn upsample2_forward(x: &[f64], (nc, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad: &[f64], (nc, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let g = &grad[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += g[y * wo + xx];
            }
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
        let pad = (d.k / 2) as isize;
        let mut out = vec![0.0; d.n * d.cout * d.h * d.w];
        for n in 0..d.n {
            for co in 0..d.cout {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = b[co];
                        for ci in 0..d.cin {
                            for ky in 0..d.k {
                                for kx in 0..d.k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * d.cin + ci) * d.k + ky) * d.k + kx]
                                        * x[((n * d.cin + ci) * d.h + sy as usize) * d.w + sx as usize];
                                }
                            }
                        }
                        out[((n * d.cout + co) * d.h + y) * d.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &k in &[1usize, 3] {
            let d = ConvDims { n: 2, cin: 3, cout: 4, h: 5, w: 6, k };
            let x: Vec<f64> = (0..d.n * d.cin * d.h * d.w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..d.cout * d.cin * k * k).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
            let b = vec![0.5, -0.25, 0.0, 1.0];
            let fast = conv2d_forward(&x, &w, &b, &d);
            let slow = naive_conv(&x, &w, &b, &d);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, c, h, w, k, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
