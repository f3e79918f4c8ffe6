//! Row-major dense kernels used by the decoder forward and backward passes.

use super::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// `out[m x n] (+)= a[m x k] * b[k x n]`
pub fn matmul<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), beta, out, (n as isize, 1));
}

/// `out[m x n] (+)= a[m x k] * b[n x k]^T`
pub fn matmul_bt<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), beta, out, (n as isize, 1));
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
pub fn matmul_at_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    T::gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), T::one(), out, (n as isize, 1));
}

pub fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `dy` accumulated into `dbias`.
pub fn bias_grad<T: Scalar>(dbias: &mut [T], dy: &[T]) {
    for row in dy.chunks_exact(dbias.len()) {
        for (g, &d) in dbias.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// Layer norm over rows of width `gain.len()`. Writes the output, the
/// normalized input and each row's reciprocal standard deviation.
pub fn layer_norm<T: Scalar>(out: &mut [T], xhat: &mut [T], rstd: &mut [T], x: &[T], gain: &[T], shift: &[T]) {
    let width = gain.len();
    let inv_w = T::of(1.0 / width as f64);
    for (r, row) in x.chunks_exact(width).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = (var + T::of(LN_EPS)).sqrt().recip();
        rstd[r] = rs;
        let xh = &mut xhat[r * width..(r + 1) * width];
        let o = &mut out[r * width..(r + 1) * width];
        for i in 0..width {
            xh[i] = (row[i] - mean) * rs;
            o[i] = xh[i] * gain[i] + shift[i];
        }
    }
}

/// Accumulates parameter grads and adds the input grad into `dx`.
pub fn layer_norm_backward<T: Scalar>(
    dx: &mut [T],
    dgain: &mut [T],
    dshift: &mut [T],
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
) {
    let width = gain.len();
    let inv_w = T::of(1.0 / width as f64);
    for (r, dyr) in dy.chunks_exact(width).enumerate() {
        let xh = &xhat[r * width..(r + 1) * width];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..width {
            let d = dyr[i] * gain[i];
            mean_dxhat += d;
            mean_dxhat_xhat += d * xh[i];
            dgain[i] += dyr[i] * xh[i];
            dshift[i] += dyr[i];
        }
        mean_dxhat *= inv_w;
        mean_dxhat_xhat *= inv_w;
        let dxr = &mut dx[r * width..(r + 1) * width];
        for i in 0..width {
            let d = dyr[i] * gain[i];
            dxr[i] += rstd[r] * (d - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let x2 = x * x;
    let inner = c * (x + T::of(0.044715) * x2 * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * sech2 * c * (T::one() + T::of(3.0 * 0.044715) * x2)
}

/// Natural-log softmax of one row, computed in f64.
pub fn log_softmax_row<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v.as_f64() - lse).collect()
}
