//! Low-discrepancy initial ensembles for pullback runs.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::seed::{rng_for, streams};

const PRIMES: [u32; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101,
    103, 107, 109, 113, 127, 131,
];

pub(crate) fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    r
}

/// Halton points in `[0,1)^dim` with a seeded Cranley–Patterson rotation.
pub fn halton(count: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dim > PRIMES.len() {
        return invalid(format!("halton sequence supports at most {} dimensions", PRIMES.len()));
    }
    let mut rng = rng_for(seed, streams::LOW_DISCREPANCY, dim as u64);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    Ok((1..=count as u64)
        .map(|i| {
            (0..dim)
                .map(|c| (radical_inverse(i, PRIMES[c]) + shift[c]).fract())
                .collect()
        })
        .collect())
}

/// `count` points in the box: its center, then as many corners as fit into
/// half the budget, then rotated Halton points. When all corners fit into
/// both budgets the ensemble for `2M` extends the ensemble for `M`.
pub fn box_ensemble(bounds: &[[f64; 2]], count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if bounds.is_empty() {
        return invalid("initial box has no coordinates");
    }
    for (i, [lo, hi]) in bounds.iter().enumerate() {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("initial box coordinate {i} has bounds [{lo}, {hi}]"));
        }
    }
    let dim = bounds.len();
    let map = |p: &[f64]| -> Vec<f64> {
        p.iter()
            .zip(bounds)
            .map(|(t, [lo, hi])| lo + t * (hi - lo))
            .collect()
    };
    let mut pts = Vec::with_capacity(count);
    pts.push(map(&vec![0.5; dim]));
    if dim < 20 {
        let corners = 1usize << dim;
        let take = corners.min(count / 2);
        for c in 0..take {
            let unit: Vec<f64> = (0..dim).map(|k| ((c >> k) & 1) as f64).collect();
            pts.push(map(&unit));
        }
    }
    let rest = count.saturating_sub(pts.len());
    for p in halton(rest, dim, seed)? {
        pts.push(map(&p));
    }
    pts.truncate(count);
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base2() {
        let v: Vec<f64> = (1..5).map(|i| radical_inverse(i, 2)).collect();
        assert_eq!(v, vec![0.5, 0.25, 0.75, 0.125]);
    }

    #[test]
    fn ensemble_covers_box_and_prefix_stable() {
        let b = [[-3.0, 3.0], [0.0, 1.0]];
        let small = box_ensemble(&b, 16, 9).unwrap();
        let big = box_ensemble(&b, 32, 9).unwrap();
        assert_eq!(small.len(), 16);
        assert_eq!(small[0], vec![0.0, 0.5]);
        assert!(small.contains(&vec![3.0, 1.0]) && small.contains(&vec![-3.0, 0.0]));
        assert_eq!(&big[..16], &small[..]);
        assert!(big.iter().all(|p| (-3.0..=3.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
        assert_eq!(box_ensemble(&b, 16, 9).unwrap(), small);
    }
}
