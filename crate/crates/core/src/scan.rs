//! Elementwise affine scans `h_t = a_t ⊙ h_{t-1} + b_t`.
//!
//! Sequences are stored batch-major: row `b·steps + t` holds step `t` of
//! batch item `b`, each row a `dim`-vector.

use crate::error::{Error, Result};

/// Reference sequential recurrence for a single sequence.
pub fn scan_sequential(h0: &[f64], a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    assert_eq!(h0.len(), dim);
    assert_eq!(a.len(), b.len());
    let mut out = vec![0.0; a.len()];
    let mut h = h0.to_vec();
    for ((ar, br), orow) in a
        .chunks_exact(dim)
        .zip(b.chunks_exact(dim))
        .zip(out.chunks_exact_mut(dim))
    {
        for i in 0..dim {
            h[i] = ar[i] * h[i] + br[i];
        }
        orow.copy_from_slice(&h);
    }
    out
}

/// Associative combine for affine maps: applying `first` then `second`.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Work-efficient (Blelloch) exclusive-then-inclusive prefix scan over the
/// affine pairs, applied to `h0`. Same result as [`scan_sequential`] up to
/// floating-point reassociation.
pub fn scan_prefix(h0: &[f64], a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    let steps = a.len() / dim;
    let mut out = vec![0.0; a.len()];
    if steps == 0 {
        return out;
    }
    let size = steps.next_power_of_two();
    let mut tree: Vec<(f64, f64)> = vec![(1.0, 0.0); size];
    for i in 0..dim {
        for t in 0..size {
            tree[t] = if t < steps {
                (a[t * dim + i], b[t * dim + i])
            } else {
                (1.0, 0.0)
            };
        }
        let leaves: Vec<(f64, f64)> = tree[..steps].to_vec();
        // up-sweep
        let mut stride = 1;
        while stride < size {
            let mut k = 2 * stride - 1;
            while k < size {
                tree[k] = combine(tree[k - stride], tree[k]);
                k += 2 * stride;
            }
            stride *= 2;
        }
        // down-sweep (exclusive)
        tree[size - 1] = (1.0, 0.0);
        let mut stride = size / 2;
        while stride >= 1 {
            let mut k = 2 * stride - 1;
            while k < size {
                let left = tree[k - stride];
                tree[k - stride] = tree[k];
                tree[k] = combine(tree[k], left);
                k += 2 * stride;
            }
            stride /= 2;
        }
        for t in 0..steps {
            let (pa, pb) = combine(tree[t], leaves[t]);
            out[t * dim + i] = pa * h0[i] + pb;
        }
    }
    out
}

/// `h_t = exp(-λ·Δt_t) ⊙ h_{t-1} + b_t` for one sequence.
pub fn affine_scan(h0: &[f64], rates: &[f64], dt_eff: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let dim = h0.len();
    if rates.len() != dim || b.len() != dt_eff.len() * dim {
        return Err(Error::Domain(format!(
            "affine scan shape mismatch: dim {dim}, rates {}, steps {}, inputs {}",
            rates.len(),
            dt_eff.len(),
            b.len()
        )));
    }
    if let Some(t) = dt_eff.iter().position(|&dt| !(dt > 0.0)) {
        return Err(Error::Domain(format!(
            "non-positive effective step {} at index {t}",
            dt_eff[t]
        )));
    }
    let a: Vec<f64> = dt_eff
        .iter()
        .flat_map(|&dt| rates.iter().map(move |&l| (-l * dt).exp()))
        .collect();
    Ok(scan_sequential(h0, &a, b, dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_cumulative_sum() {
        let h = affine_scan(&[0.0], &[0.0], &[1.0, 2.0, 0.5], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(h, vec![1.0, 3.0, 6.0]);
    }

    #[test]
    fn halving() {
        let h = affine_scan(&[1.0], &[1.0], &[std::f64::consts::LN_2], &[0.0]).unwrap();
        assert!((h[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(affine_scan(&[1.0], &[1.0], &[1.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(affine_scan(&[1.0], &[1.0], &[-1.0], &[0.0]).is_err());
    }

    #[test]
    fn prefix_matches_sequential_small() {
        let a = [0.9, 0.5, 0.8, 0.7, 0.95, 0.3, 0.99];
        let b = [0.1, -0.2, 0.3, 0.0, 1.0, 0.5, -0.4];
        let seq = scan_sequential(&[2.0], &a, &b, 1);
        let par = scan_prefix(&[2.0], &a, &b, 1);
        for (x, y) in seq.iter().zip(&par) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
