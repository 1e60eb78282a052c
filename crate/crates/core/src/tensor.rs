//! Small dense kernels on row-major `f64` slices.
//!
//! Everything in the backbone is written against these helpers so the
//! forward and backward passes stay explicit. All `gemm*` variants
//! accumulate into `out`.

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds `bias` to every row of the `rows×bias.len()` matrix `x`.
pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulates the column sums of `x` into `out`.
pub fn col_sum_into(x: &[f64], out: &mut [f64]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
pub fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + GELU_A * u * u * u);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * u * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Per-row layer-norm statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm with affine `gain`/`shift`.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64], out: &mut [f64]) -> NormCache {
    let width = gain.len();
    let rows = x.len() / width;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let xh = (xr[c] - mean) * rs;
            xhat[r * width + c] = xh;
            out[r * width + c] = gain[c] * xh + shift[c];
        }
    }
    NormCache { xhat, rstd }
}

/// Backward of [`layer_norm`]. Accumulates parameter gradients and adds the
/// input gradient into `dx`.
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dshift: &mut [f64],
    dx: &mut [f64],
) {
    let width = gain.len();
    let rows = dy.len() / width;
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let dyr = &dy[r * width..(r + 1) * width];
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..width {
            dgain[c] += dyr[c] * xh[c];
            dshift[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= width as f64;
        mean_dxhat_xhat /= width as f64;
        let rs = cache.rstd[r];
        for c in 0..width {
            dx[r * width + c] += rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

/// Sinusoidal embedding of a scalar time in `[0,1]`, width `dim` (even).
///
/// `t` is scaled by 1000 before the usual geometric frequency ladder.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let angle = 1000.0 * t * freq;
        out[i] = angle.sin();
        out[i + half] = angle.cos();
    }
    out
}
