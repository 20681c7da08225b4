//! Shared numeric kernels.
//!
//! Both the graph-based forward pass and the cache-based incremental decoder
//! call into these functions, so the two paths produce bit-identical values
//! for the same inputs. Accumulation order is fixed everywhere.

pub const GELU_COEF: f64 = 0.044715;

/// c = a[m x k] * b[k x n], row-major, written into `out` (len m*n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// y = x[1 x k] * b[k x n] as a row vector.
pub fn matvec_row(x: &[f64], b: &[f64], k: usize, n: usize, out: &mut [f64]) {
    matmul(x, b, 1, k, n, out);
}

/// In-place row softmax with max-subtraction.
pub fn softmax_row(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row layer norm: y = (x - mean) / sqrt(var + eps) * gamma + beta.
/// Returns (mean, inv_std) for reuse in backward.
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv_std * gamma[i] + beta[i];
    }
    (mean, inv_std)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// d gelu(x) / dx for the tanh approximation.
pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Same-padded 1-D convolution over rows of x[t_in x c_in].
/// w is [k x c_in x c_out] row-major, b is [c_out]. Output length is
/// ceil(t_in / stride).
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    t_in: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    out: &mut [f64],
) {
    let t_out = conv1d_out_len(t_in, stride);
    debug_assert_eq!(out.len(), t_out * c_out);
    let pad = (kernel - 1) / 2;
    for t in 0..t_out {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        orow.copy_from_slice(b);
        for dk in 0..kernel {
            let it = (t * stride + dk) as isize - pad as isize;
            if it < 0 || it as usize >= t_in {
                continue;
            }
            let xrow = &x[it as usize * c_in..(it as usize + 1) * c_in];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xv * wv;
                }
            }
        }
    }
}

pub fn conv1d_out_len(t_in: usize, stride: usize) -> usize {
    (t_in + stride - 1) / stride
}
