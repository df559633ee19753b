//! Dense row-major building blocks with hand-written backward passes.
//!
//! Activations are `rows x cols` slices. Linear weights are stored
//! `d_in x d_out` so a forward pass is a single `X W` product.

/// `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`; each
/// operand is given with its row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
    // SAFETY: the asserts above bound every strided access.
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

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

/// `c += a^T b` with `a` stored `k x m` and `b` stored `k x n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, (1, m), b, (n, 1), 1.0, c, (n, 1));
}

/// `a (m x k) * b^T` with `b` stored `n x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (1, k), 0.0, &mut c, (n, 1));
    c
}

/// `x W + b` over `rows` rows.
pub fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let (d_in, d_out) = (w.len() / b.len(), b.len());
    debug_assert_eq!(x.len(), rows * d_in);
    let mut y = matmul(x, w, rows, d_in, d_out);
    for row in y.chunks_mut(d_out) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

/// Accumulates weight and bias gradients and returns the input cotangent.
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let (d_out, d_in) = (gb.len(), w.len() / gb.len());
    matmul_tn_acc(x, dy, d_in, rows, d_out, gw);
    for row in dy.chunks(d_out) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    matmul_nt(dy, w, rows, d_out, d_in)
}

pub const LN_EPS: f64 = 1e-5;

/// Normalized rows and reciprocal standard deviations, kept for backward.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for ((xr, yr), hr) in x.chunks(d).zip(y.chunks_mut(d)).zip(x_hat.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            hr[i] = (xr[i] - mean) * r;
            yr[i] = gamma[i] * hr[i] + beta[i];
        }
        inv_std.push(r);
    }
    (y, LnCache { x_hat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LnCache,
    d: usize,
    gamma: &[f64],
    dy: &[f64],
    g_gamma: &mut [f64],
    g_beta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let mut dh = vec![0.0; d];
    for (((dyr, hr), dxr), &r) in dy.chunks(d).zip(cache.x_hat.chunks(d)).zip(dx.chunks_mut(d)).zip(&cache.inv_std) {
        for i in 0..d {
            g_gamma[i] += dyr[i] * hr[i];
            g_beta[i] += dyr[i];
            dh[i] = dyr[i] * gamma[i];
        }
        let mean_dh = dh.iter().sum::<f64>() / d as f64;
        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            dxr[i] = r * (dh[i] - mean_dh - hr[i] * mean_dh_h);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU, written as `x * sigmoid(2u)` since
/// `(1 + tanh u) / 2 = sigmoid(2u)`; one `exp` is much cheaper than `tanh`.
pub fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

pub fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

pub fn softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    /// Keys carry no bias: softmax is invariant to it.
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

/// Gradient buffers matching [`AttnWeights`].
pub struct AttnGrads<'a> {
    pub wq: &'a mut [f64],
    pub bq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub bv: &'a mut [f64],
    pub wo: &'a mut [f64],
    pub bo: &'a mut [f64],
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    nq: usize,
    nk: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x nq x nk` attention weights.
    p: Vec<f64>,
    o: Vec<f64>,
}

/// Scaled dot-product attention of `xq` (`nq x d`) over `xkv` (`nk x d`).
pub fn attention(xq: &[f64], xkv: &[f64], d: usize, heads: usize, w: AttnWeights) -> (Vec<f64>, AttnCache) {
    let (nq, nk) = (xq.len() / d, xkv.len() / d);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(xq, nq, w.wq, w.bq);
    let k = matmul(xkv, w.wk, nk, d, d);
    let v = linear(xkv, nk, w.wv, w.bv);
    let mut p = vec![0.0; heads * nq * nk];
    let mut o = vec![0.0; nq * d];
    for h in 0..heads {
        let ph = &mut p[h * nq * nk..(h + 1) * nq * nk];
        gemm(nq, dh, nk, &q[h * dh..], (d, 1), &k[h * dh..], (1, d), 0.0, ph, (nk, 1));
        ph.iter_mut().for_each(|s| *s *= scale);
        softmax_rows(ph, nk);
        gemm(nq, nk, dh, ph, (nk, 1), &v[h * dh..], (d, 1), 0.0, &mut o[h * dh..], (d, 1));
    }
    let y = linear(&o, nq, w.wo, w.bo);
    let cache = AttnCache { xq: xq.to_vec(), xkv: xkv.to_vec(), nq, nk, q, k, v, p, o };
    (y, cache)
}

/// Returns the cotangents of `xq` and `xkv`.
pub fn attention_backward(
    cache: &AttnCache,
    d: usize,
    heads: usize,
    w: AttnWeights,
    g: AttnGrads,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let AttnCache { xq, xkv, nq, nk, q, k, v, p, o } = cache;
    let (nq, nk) = (*nq, *nk);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_o = linear_backward(o, nq, w.wo, dy, g.wo, g.bo);
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut dp = vec![0.0; nq * nk];
    for h in 0..heads {
        let ph = &p[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO_h V_h^T, dV_h = P^T dO_h
        gemm(nq, dh, nk, &d_o[h * dh..], (d, 1), &v[h * dh..], (1, d), 0.0, &mut dp, (nk, 1));
        gemm(nk, nq, dh, ph, (1, nk), &d_o[h * dh..], (d, 1), 0.0, &mut dv[h * dh..], (d, 1));
        for (dr, pr) in dp.chunks_mut(nk).zip(ph.chunks(nk)) {
            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
            for (x, &pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        gemm(nq, nk, dh, &dp, (nk, 1), &k[h * dh..], (d, 1), 0.0, &mut dq[h * dh..], (d, 1));
        gemm(nk, nq, dh, &dp, (1, nk), &q[h * dh..], (d, 1), 0.0, &mut dk[h * dh..], (d, 1));
    }
    let dxq = linear_backward(xq, nq, w.wq, &dq, g.wq, g.bq);
    matmul_tn_acc(xkv, &dk, d, nk, d, g.wk);
    let mut dxkv = matmul_nt(&dk, w.wk, nk, d, d);
    let dxv = linear_backward(xkv, nk, w.wv, &dv, g.wv, g.bv);
    dxkv.iter_mut().zip(&dxv).for_each(|(a, b)| *a += b);
    (dxq, dxkv)
}

/// Geometry of a square-kernel convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

/// Unfolds `c_in x h x w` into `patch x (out_h * out_w)` columns.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![0.0; g.patch() * oh * ow];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dst[oy * ow + ox] = x[(c * g.h + iy) * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            x[(c * g.h + iy) * g.w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `W (c_out x patch) * cols + b`, giving `c_out x (out_h * out_w)`.
pub fn conv2d(cols: &[f64], g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let mut y = matmul(w, cols, g.c_out, g.patch(), hw);
    for (row, &bias) in y.chunks_mut(hw).zip(b) {
        row.iter_mut().for_each(|v| *v += bias);
    }
    y
}

/// Accumulates weight and bias gradients; returns the input cotangent when
/// `need_input` is set.
pub fn conv2d_backward(
    cols: &[f64],
    g: &ConvGeom,
    w: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let hw = g.out_h() * g.out_w();
    // dW += dY cols^T
    gemm(g.c_out, hw, g.patch(), dy, (hw, 1), cols, (1, hw), 1.0, gw, (g.patch(), 1));
    for (gbias, row) in gb.iter_mut().zip(dy.chunks(hw)) {
        *gbias += row.iter().sum::<f64>();
    }
    need_input.then(|| {
        let mut dcols = vec![0.0; g.patch() * hw];
        gemm(g.patch(), g.c_out, hw, w, (1, g.patch()), dy, (hw, 1), 0.0, &mut dcols, (hw, 1));
        col2im(&dcols, g)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul_nt(&a, &a, 2, 3, 2), vec![14.0, 32.0, 32.0, 77.0]);
        let mut c = vec![0.0; 4];
        matmul_tn_acc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], 2, 2, 2, &mut c);
        assert_eq!(c, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1000.0, 1001.0, -5.0, 0.0, 0.0, 0.0];
        softmax_rows(&mut x, 3);
        for row in x.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((x[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
        for x in [-40.0, -3.0, -0.2, 0.7, 2.5, 40.0f64] {
            let tanh_form = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
            assert!((gelu(x) - tanh_form).abs() < 1e-14 * x.abs().max(1.0));
        }
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_kernel_convolution() {
        let g = ConvGeom { c_in: 1, c_out: 1, h: 3, w: 3, kernel: 3, stride: 1, pad: 1 };
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d(&im2col(&x, &g), &g, &w, &[0.5]), x.iter().map(|v| v + 0.5).collect::<Vec<_>>());
    }

    #[test]
    fn strided_output_size() {
        let g = ConvGeom { c_in: 3, c_out: 8, h: 64, w: 64, kernel: 3, stride: 2, pad: 1 };
        assert_eq!((g.out_h(), g.out_w()), (32, 32));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c_in: 2, c_out: 1, h: 5, w: 4, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
