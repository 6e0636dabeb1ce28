//! Plain slice kernels shared by the tape ops and usable on their own.

use crate::error::{GradError, Result};

pub const LN_EPS: f64 = 1e-5;
pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Softmax over the unmasked entries of `logits`; masked entries come out as exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(logits.len(), mask.len(), "logits and mask lengths differ");
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, mask, &mut out, 0)?;
    Ok(out)
}

pub(crate) fn masked_softmax_into(
    logits: &[f64],
    mask: &[bool],
    out: &mut [f64],
    row: usize,
) -> Result<()> {
    if !mask.contains(&true) {
        return Err(GradError::EmptyAttentionRow { row });
    }
    // NaN logits must reach the output so the loss check can report them
    let mut max = f64::NEG_INFINITY;
    for (&l, &m) in logits.iter().zip(mask) {
        if m && (l > max || l.is_nan()) {
            max = l;
        }
    }
    let mut total = 0.0;
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(mask) {
        if m {
            let e = (l - max).exp();
            *o = e;
            total += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Normalizes `x` to zero mean and unit (population) variance, then applies gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, gain, bias, &mut out);
    out
}

/// Returns `(mean, rstd)` for the row.
pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

pub fn clamp_log_sigma(ls: f64) -> f64 {
    ls.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
}

/// Diagonal Gaussian negative log-likelihood, averaged over the dimensions.
pub fn gaussian_nll(x: &[f64], mu: &[f64], log_sigma: &[f64]) -> f64 {
    assert!(x.len() == mu.len() && mu.len() == log_sigma.len());
    let sum: f64 = x
        .iter()
        .zip(mu)
        .zip(log_sigma)
        .map(|((&x, &m), &ls)| nll_term(x, m, ls))
        .sum();
    sum / x.len() as f64
}

#[inline]
pub(crate) fn nll_term(x: f64, mu: f64, log_sigma: f64) -> f64 {
    let ls = clamp_log_sigma(log_sigma);
    let z = (x - mu) * (-ls).exp();
    ls + HALF_LN_2PI + 0.5 * z * z
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

/// tanh through a single `exp`; libm's tanh dominated profiles.
#[inline]
pub(crate) fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        return u.tanh();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `c (+)= op(a) · op(b)` for row-major `m×k` and `k×n` operands.
///
/// With `trans_a`, `a` is stored as `k×m`; with `trans_b`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n index ranges
    // addressed through the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_single_unmasked_entry() {
        let p = masked_softmax(&[5.0, 100.0, -3.0], &[true, false, false]).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform() {
        let p = masked_softmax(&[0.0; 4], &[true; 4]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn softmax_two_entries() {
        let e = std::f64::consts::E;
        let p = masked_softmax(&[1.0, 2.0], &[true, true]).unwrap();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.2689).abs() < 1e-4 && (p[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_all_masked_is_an_error() {
        let err = masked_softmax(&[1.0, 2.0], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("empty attention row"));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = masked_softmax(&[1000.0, 1000.0], &[true, true]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_input() {
        let y = layer_norm(&[1.0; 4], &[1.0; 4], &[0.0; 4]);
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn layer_norm_symmetric_pair() {
        for a in [0.5, 3.0, 100.0] {
            let y = layer_norm(&[-a, a], &[1.0; 2], &[0.0; 2]);
            let tol = LN_EPS / (a * a);
            assert!(
                (y[0] + 1.0).abs() < tol && (y[1] - 1.0).abs() < tol,
                "{y:?}"
            );
        }
    }

    #[test]
    fn layer_norm_one_two_three() {
        // mean 2, population variance 2/3
        let y = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3]);
        let s = (2.0f64 / 3.0 + LN_EPS).sqrt();
        let expected = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean = y.iter().sum::<f64>() / 3.0;
        let var = y.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn nll_zero_residual_unit_sigma() {
        let v = gaussian_nll(&[0.3, -1.0], &[0.3, -1.0], &[0.0, 0.0]);
        assert!((v - HALF_LN_2PI).abs() < 1e-15);
        assert!((v - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn nll_unit_standardized_residual() {
        for sigma in [0.5f64, 1.0, 3.0] {
            let v = gaussian_nll(&[1.0 + sigma], &[1.0], &[sigma.ln()]);
            assert!((v - (sigma.ln() + HALF_LN_2PI + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_sigma_two() {
        let v = gaussian_nll(&[1.0], &[0.0], &[2f64.ln()]);
        assert!((v - (2f64.ln() + HALF_LN_2PI + 0.125)).abs() < 1e-12);
        assert!((v - 1.7371).abs() < 1e-4);
    }

    #[test]
    fn nll_clamps_log_sigma() {
        let lo = gaussian_nll(&[0.0], &[0.0], &[-50.0]);
        assert!((lo - (LOG_SIGMA_MIN + HALF_LN_2PI)).abs() < 1e-12);
        let hi = gaussian_nll(&[0.0], &[0.0], &[50.0]);
        assert!((hi - (LOG_SIGMA_MAX + HALF_LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // transposed operands
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
