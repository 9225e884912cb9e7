//! Plain loops over flat row-major buffers. Summation order is fixed by the
//! loop nesting, which is what makes every op bit-reproducible.

/// √(2/π) ≈ 0.7978845608
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, y) in row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
}

/// `out[m,k] = g[m,n] · b[k,n]ᵀ`
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, y) in o_row.iter_mut().zip(g_row) {
                *o += x * y;
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place softmax of `len` entries starting at `base` with stride `stride`.
pub fn softmax_strided(buf: &mut [f64], base: usize, len: usize, stride: usize) {
    let max = (0..len)
        .map(|j| buf[base + j * stride])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for j in 0..len {
        let p = base + j * stride;
        let e = (buf[p] - max).exp();
        buf[p] = e;
        total += e;
    }
    for j in 0..len {
        buf[base + j * stride] /= total;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of a plain slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_strided(&mut out, 0, row.len(), 1);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_constant_is_sqrt_two_over_pi() {
        assert!((GELU_SQRT_2_OVER_PI - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let p = softmax(&[0.0, f64::NEG_INFINITY, 0.0]);
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }
}
