//! Small order-statistics helpers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Percentile by linear interpolation between closest ranks:
/// rank = p/100 · (n−1), interpolated between the two bracketing order
/// statistics. Deterministic and well-defined for small n.
pub fn percentile<F: Scalar>(values: &[F], p: f64) -> Result<F> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("percentile of empty slice".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Config(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "percentile" });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(percentile_sorted(&sorted, p))
}

/// Same rule, on an already-sorted slice.
pub fn percentile_sorted<F: Scalar>(sorted: &[F], p: f64) -> F {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = F::cast(rank - lo as f64);
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn median<F: Scalar>(values: &[F]) -> Result<F> {
    percentile(values, 50.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn interpolates_between_ranks() {
        let xs: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_relative_eq!(percentile(&xs, 1.0).unwrap(), 1.0);
        assert_relative_eq!(percentile(&xs, 99.0).unwrap(), 99.0);
        assert_relative_eq!(percentile(&xs, 99.5).unwrap(), 99.5);
    }

    #[test]
    fn two_point_distribution() {
        let xs = vec![-1.0f64; 40]
            .into_iter()
            .chain(vec![1.0; 40])
            .collect::<Vec<_>>();
        assert_relative_eq!(percentile(&xs, 1.0).unwrap(), -1.0);
        assert_relative_eq!(percentile(&xs, 99.0).unwrap(), 1.0);
    }

    #[test]
    fn single_value_and_errors() {
        assert_relative_eq!(percentile(&[3.5f64], 75.0).unwrap(), 3.5);
        assert!(percentile::<f64>(&[], 50.0).is_err());
        assert!(percentile(&[1.0f64], 101.0).is_err());
    }
}
