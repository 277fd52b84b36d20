//! Dense row-major kernels shared by inference and training.

/// `c[m, n] = alpha * a[m, k] · b[k, n] + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds of every operand were checked against the strides above.
    unsafe {
        matrixmultiply::sgemm(
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
            n as isize,
            1,
        );
    }
}

/// `out[m, n] (+)= x[m, k] · w[n, k]ᵀ`, the layout of every projection weight.
pub fn matmul_wt(x: &[f32], m: usize, k: usize, w: &[f32], n: usize, out: &mut [f32], acc: bool) {
    gemm(m, k, n, x, (k, 1), w, (1, k), if acc { 1.0 } else { 0.0 }, out);
}

/// `out[m, n] (+)= x[m, k] · w[k, n]`.
pub fn matmul(x: &[f32], m: usize, k: usize, w: &[f32], n: usize, out: &mut [f32], acc: bool) {
    gemm(m, k, n, x, (k, 1), w, (n, 1), if acc { 1.0 } else { 0.0 }, out);
}

/// `out[n, k] (+)= dy[m, n]ᵀ · x[m, k]`, the weight-gradient product.
pub fn matmul_tn(dy: &[f32], m: usize, n: usize, x: &[f32], k: usize, out: &mut [f32], acc: bool) {
    gemm(n, m, k, dy, (1, n), x, (k, 1), if acc { 1.0 } else { 0.0 }, out);
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Returns the reciprocal RMS used for the row.
pub fn rmsnorm_row(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let rstd = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * rstd * g;
    }
    rstd
}

pub fn rmsnorm(x: &[f32], width: usize, gain: &[f32], eps: f32, out: &mut [f32], rstd: &mut Vec<f32>) {
    rstd.clear();
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        rstd.push(rmsnorm_row(row, gain, eps, orow));
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax in f64, used wherever probabilities are reported.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f32], m: usize, k: usize, w: &[f32], n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| x[i * k + p] * w[j * k + p]).sum();
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let x: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..n * k).map(|i| (i as f32 * 0.91).cos()).collect();
        let want = naive(&x, m, k, &w, n);

        let mut got = vec![0.0; m * n];
        matmul_wt(&x, m, k, &w, n, &mut got, false);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }

        // w transposed into [k, n]
        let mut wt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                wt[p * n + j] = w[j * k + p];
            }
        }
        let mut got2 = vec![1.0; m * n];
        matmul(&x, m, k, &wt, n, &mut got2, false);
        for (a, b) in got2.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }

        // gradient product: dW[n,k] = dy[m,n]^T x[m,k]
        let dy: Vec<f32> = (0..m * n).map(|i| i as f32 * 0.1 - 0.3).collect();
        let mut dw = vec![0.0; n * k];
        matmul_tn(&dy, m, n, &x, k, &mut dw, false);
        for j in 0..n {
            for p in 0..k {
                let e: f32 = (0..m).map(|i| dy[i * n + j] * x[i * k + p]).sum();
                assert!((dw[j * k + p] - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = vec![1.0, 2.0, -3.0, 0.5];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
