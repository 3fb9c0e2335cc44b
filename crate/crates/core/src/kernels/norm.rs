use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics saved by a batch-norm forward for its backward.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
    /// Batch mean and unbiased variance (training mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Normalizes `x` (`[n, c, h, w]`). With `running = Some((mean, var))` the
/// given statistics are used (evaluation); otherwise batch statistics.
pub fn batch_norm_forward<T: Scalar>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Vec<T>, BnSaved<T>) {
    let hw = h * w;
    let m = n * hw;
    let eps = T::from_f64(BN_EPS);
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    let mut batch_var = Vec::new();
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        None => {
            batch_var = vec![T::ZERO; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for ni in 0..n {
                    let p = &x[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
                    s += p.iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0f64;
                for ni in 0..n {
                    let p = &x[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
                    ss += p.iter().map(|v| (v.to_f64() - mu) * (v.to_f64() - mu)).sum::<f64>();
                }
                mean[ch] = T::from_f64(mu);
                var[ch] = T::from_f64(ss / m as f64);
                batch_var[ch] = T::from_f64(if m > 1 { ss / (m - 1) as f64 } else { 0.0 });
            }
        }
    }
    let invstd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; x.len()];
    let mut y = vec![T::ZERO; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            let (mu, is, g, b) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            for i in off..off + hw {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    let batch_mean = if running.is_none() { mean } else { Vec::new() };
    (y, BnSaved { xhat, invstd, batch_mean, batch_var })
}

/// Returns `(dx, dgamma, dbeta)`. `train` selects whether the statistics were
/// batch statistics (and therefore depend on `x`).
pub fn batch_norm_backward<T: Scalar>(
    dy: &[T],
    [n, c, h, w]: [usize; 4],
    gamma: &[T],
    saved: &BnSaved<T>,
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let m = T::from_usize(n * hw);
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            let mut sg = T::ZERO;
            let mut sb = T::ZERO;
            for i in off..off + hw {
                sb += dy[i];
                sg += dy[i] * saved.xhat[i];
            }
            dgamma[ch] += sg;
            dbeta[ch] += sb;
        }
    }
    let mut dx = vec![T::ZERO; dy.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            let k = gamma[ch] * saved.invstd[ch];
            if train {
                let (db, dg) = (dbeta[ch] / m, dgamma[ch] / m);
                for i in off..off + hw {
                    dx[i] = k * (dy[i] - db - saved.xhat[i] * dg);
                }
            } else {
                for i in off..off + hw {
                    dx[i] = k * dy[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = vec![3.0f32; 2 * 2 * 3 * 3];
        let (y, _) = batch_norm_forward(&x, [2, 2, 3, 3], &[1.0, 1.0], &[0.0, 0.0], None);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_output_is_standardized_then_shifted() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7919) % 13) as f64 * 0.3 - 1.0).collect();
        let (y, _) = batch_norm_forward(&x, [2, 3, 2, 2], &[1.0; 3], &[5.0; 3], None);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| y[(n * 3 + ch) * 4 + i]).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!((mean - 5.0).abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
