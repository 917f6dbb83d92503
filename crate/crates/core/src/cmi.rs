//! Conditional mutual information estimators and permutation nulls.
//!
//! Samples are rows: `x[i]`, `y[i]`, `z[i]` are the three blocks of sample
//! `i` (`z` may have zero columns). Estimates are in nats.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{invalid, shape_err, Error, Result};
use crate::seed::{rng_for, streams};

/// Continuous estimators need at least this many samples.
pub const MIN_CONTINUOUS_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Estimator {
    /// Weighted plug-in estimator on exact values; exact for finite laws.
    Discrete,
    /// Gaussian CMI from log-determinants of covariance blocks.
    #[default]
    Gaussian,
    /// Frenzel–Pompe k-nearest-neighbour estimator in the max norm.
    Knn { k: usize },
}


impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Discrete => "discrete",
            Estimator::Gaussian => "gaussian",
            Estimator::Knn { .. } => "knn",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Blocks<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [Vec<f64>],
    pub z: &'a [Vec<f64>],
    /// Sample weights; uniform when `None`.
    pub weights: Option<&'a [f64]>,
}

impl Blocks<'_> {
    fn check(&self) -> Result<usize> {
        let n = self.x.len();
        if self.y.len() != n || self.z.len() != n || self.weights.is_some_and(|w| w.len() != n) {
            return shape_err("CMI blocks have different sample counts");
        }
        if n == 0 {
            return invalid("CMI needs samples");
        }
        for b in [self.x, self.y, self.z] {
            let d = b[0].len();
            if b.iter().any(|r| r.len() != d) {
                return shape_err("CMI block rows differ in length");
            }
        }
        Ok(n)
    }

    fn weights(&self) -> Vec<f64> {
        match self.weights {
            Some(w) => {
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            }
            None => vec![1.0 / self.x.len() as f64; self.x.len()],
        }
    }
}

/// Dense ids for exact row values.
fn encode(rows: &[Vec<f64>]) -> Vec<u32> {
    let mut ids: HashMap<Vec<u64>, u32> = HashMap::new();
    rows.iter()
        .map(|r| {
            let key: Vec<u64> = r.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect();
            let next = ids.len() as u32;
            *ids.entry(key).or_insert(next)
        })
        .collect()
}

fn discrete_from_ids(x: &[u32], y: &[u32], z: &[u32], w: &[f64]) -> f64 {
    // ordered so that the final sum is reproducible bit for bit
    let mut pxyz: BTreeMap<(u32, u32, u32), f64> = BTreeMap::new();
    let mut pxz: HashMap<(u32, u32), f64> = HashMap::new();
    let mut pyz: HashMap<(u32, u32), f64> = HashMap::new();
    let mut pz: HashMap<u32, f64> = HashMap::new();
    for i in 0..x.len() {
        *pxyz.entry((x[i], y[i], z[i])).or_default() += w[i];
        *pxz.entry((x[i], z[i])).or_default() += w[i];
        *pyz.entry((y[i], z[i])).or_default() += w[i];
        *pz.entry(z[i]).or_default() += w[i];
    }
    let mut s = 0.0;
    for (&(a, b, c), &p) in &pxyz {
        if p > 0.0 {
            s += p * (p * pz[&c] / (pxz[&(a, c)] * pyz[&(b, c)])).ln();
        }
    }
    s
}

fn log_det(cov: &DMatrix<f64>, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| cov[(idx[i], idx[j])]);
    let eig = sub.symmetric_eigenvalues();
    let top = eig.iter().copied().fold(0.0, f64::max);
    let floor = 1e-12 * top.max(1e-300);
    eig.iter().map(|l| l.max(floor).ln()).sum()
}

fn gaussian_cmi(b: &Blocks, w: &[f64]) -> f64 {
    let (dx, dy, dz) = (b.x[0].len(), b.y[0].len(), b.z[0].len());
    let d = dx + dy + dz;
    let row = |i: usize| b.x[i].iter().chain(&b.y[i]).chain(&b.z[i]).copied();
    let mut mean = vec![0.0; d];
    for (i, wi) in w.iter().enumerate() {
        for (m, v) in mean.iter_mut().zip(row(i)) {
            *m += wi * v;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (i, wi) in w.iter().enumerate() {
        let c = DVector::from_iterator(d, row(i).zip(&mean).map(|(v, m)| v - m));
        cov += *wi * &c * c.transpose();
    }
    // Constant coordinates carry no information.
    let live: Vec<bool> = (0..d).map(|j| cov[(j, j)] > 1e-14 * (1.0 + mean[j] * mean[j])).collect();
    let pick = |r: std::ops::Range<usize>| r.filter(|j| live[*j]).collect::<Vec<_>>();
    let xs = pick(0..dx);
    let ys = pick(dx..dx + dy);
    let zs = pick(dx + dy..d);
    if xs.is_empty() || ys.is_empty() {
        return 0.0;
    }
    let cat = |a: &[usize], b: &[usize]| a.iter().chain(b).copied().collect::<Vec<_>>();
    let xz = cat(&xs, &zs);
    let yz = cat(&ys, &zs);
    let xyz = cat(&xz, &ys);
    0.5 * (log_det(&cov, &xz) + log_det(&cov, &yz) - log_det(&cov, &zs) - log_det(&cov, &xyz))
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn knn_cmi(b: &Blocks, k: usize) -> f64 {
    let n = b.x.len();
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dists: Vec<(f64, f64, f64, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = max_dist(&b.x[i], &b.x[j]);
                    let dy = max_dist(&b.y[i], &b.y[j]);
                    let dz = max_dist(&b.z[i], &b.z[j]);
                    (dx.max(dy).max(dz), dx.max(dz), dy.max(dz), dz)
                })
                .collect();
            dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
            let eps = dists[k - 1].0;
            let (mut nxz, mut nyz, mut nz) = (0usize, 0usize, 0usize);
            for d in &dists {
                nxz += (d.1 < eps) as usize;
                nyz += (d.2 < eps) as usize;
                nz += (d.3 < eps) as usize;
            }
            digamma(nz as f64 + 1.0) - digamma(nxz as f64 + 1.0) - digamma(nyz as f64 + 1.0)
        })
        .collect();
    digamma(k as f64) + terms.iter().sum::<f64>() / n as f64
}

/// Point estimate of `I(X; Y | Z)`.
pub fn cmi(est: Estimator, b: &Blocks) -> Result<f64> {
    let n = b.check()?;
    let w = b.weights();
    match est {
        Estimator::Discrete => Ok(discrete_from_ids(&encode(b.x), &encode(b.y), &encode(b.z), &w)),
        Estimator::Gaussian => {
            if n < MIN_CONTINUOUS_SAMPLES {
                return Err(Error::InsufficientSamples {
                    needed: MIN_CONTINUOUS_SAMPLES,
                    got: n,
                });
            }
            Ok(gaussian_cmi(b, &w))
        }
        Estimator::Knn { k } => {
            if n < MIN_CONTINUOUS_SAMPLES {
                return Err(Error::InsufficientSamples {
                    needed: MIN_CONTINUOUS_SAMPLES,
                    got: n,
                });
            }
            if k == 0 || k >= n {
                return invalid("knn estimator needs 1 <= k < n");
            }
            Ok(knn_cmi(b, k))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic: f64,
    /// `1 - alpha` quantile of the null statistics.
    pub threshold: f64,
    pub p_value: f64,
    pub permutations: usize,
    /// True when the null of conditional independence is rejected.
    pub dependent: bool,
}

/// Number of permutations that can resolve level `alpha`.
pub fn default_permutations(alpha: f64) -> usize {
    ((2.0 / alpha).ceil() as usize).max(199)
}

/// Weighted least-squares fit of `x` on `[1, z]`; returns fitted rows.
fn regress(x: &[Vec<f64>], z: &[Vec<f64>], w: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let dz = z[0].len();
    let dx = x[0].len();
    let design = DMatrix::from_fn(n, dz + 1, |i, j| if j == 0 { 1.0 } else { z[i][j - 1] });
    let target = DMatrix::from_fn(n, dx, |i, j| x[i][j]);
    let sw = DMatrix::from_diagonal(&DVector::from_iterator(n, w.iter().map(|v| v.sqrt())));
    let a = &sw * &design;
    let t = &sw * &target;
    let coef = match a.clone().svd(true, true).solve(&t, 1e-12) {
        Ok(c) => c,
        Err(_) => DMatrix::zeros(dz + 1, dx),
    };
    let fit = &design * coef;
    (0..n).map(|i| fit.row(i).iter().copied().collect()).collect()
}

/// Permutation test of `X ⊥ Y | Z` at level `alpha`. Discrete data are
/// permuted within strata of `Z`; continuous data by permuting the
/// residuals of `X` regressed on `Z` (which leaves `E[X | Z]` in place).
pub fn permutation_test(est: Estimator, b: &Blocks, alpha: f64, permutations: usize, seed: u64) -> Result<PermutationResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid("alpha must lie in (0, 1)");
    }
    if permutations == 0 {
        return invalid("need at least one permutation");
    }
    let statistic = cmi(est, b)?;
    let n = b.x.len();
    let w = b.weights();
    let null: Vec<f64> = match est {
        Estimator::Discrete => {
            let (xi, yi, zi) = (encode(b.x), encode(b.y), encode(b.z));
            let mut strata: HashMap<u32, Vec<usize>> = HashMap::new();
            for (i, z) in zi.iter().enumerate() {
                strata.entry(*z).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = strata.into_values().collect();
            groups.sort();
            (0..permutations)
                .into_par_iter()
                .map(|r| {
                    let mut rng = rng_for(seed, streams::PERMUTATION, r as u64);
                    let mut xp = xi.clone();
                    for g in &groups {
                        let mut vals: Vec<u32> = g.iter().map(|&i| xi[i]).collect();
                        vals.shuffle(&mut rng);
                        for (&i, v) in g.iter().zip(vals) {
                            xp[i] = v;
                        }
                    }
                    discrete_from_ids(&xp, &yi, &zi, &w)
                })
                .collect()
        }
        Estimator::Gaussian | Estimator::Knn { .. } => {
            let fit = regress(b.x, b.z, &w);
            let resid: Vec<Vec<f64>> = b
                .x
                .iter()
                .zip(&fit)
                .map(|(x, f)| x.iter().zip(f).map(|(a, c)| a - c).collect())
                .collect();
            (0..permutations)
                .into_par_iter()
                .map(|r| {
                    let mut rng = rng_for(seed, streams::PERMUTATION, r as u64);
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    let xp: Vec<Vec<f64>> = (0..n)
                        .map(|i| fit[i].iter().zip(&resid[perm[i]]).map(|(f, e)| f + e).collect())
                        .collect();
                    let pb = Blocks { x: &xp, ..b.clone() };
                    cmi(est, &pb)
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    let tol = 1e-12 * (1.0 + statistic.abs());
    let exceed = null.iter().filter(|v| **v >= statistic - tol).count();
    let p_value = (1 + exceed) as f64 / (permutations + 1) as f64;
    let mut sorted = null;
    sorted.sort_by(f64::total_cmp);
    let pos = ((1.0 - alpha) * (permutations - 1) as f64).ceil() as usize;
    let threshold = sorted[pos.min(permutations - 1)];
    Ok(PermutationResult {
        statistic,
        threshold,
        p_value,
        permutations,
        dependent: p_value <= alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    fn entropy(p: &HashMap<Vec<u64>, f64>) -> f64 {
        -p.values().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum::<f64>()
    }

    /// `H(XZ) + H(YZ) - H(Z) - H(XYZ)` from marginal tables.
    fn entropy_oracle(x: &[Vec<f64>], y: &[Vec<f64>], z: &[Vec<f64>], w: &[f64]) -> f64 {
        let key = |parts: &[&Vec<f64>]| parts.iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect::<Vec<u64>>();
        let mut tables: Vec<HashMap<Vec<u64>, f64>> = vec![HashMap::new(); 4];
        for i in 0..x.len() {
            *tables[0].entry(key(&[&x[i], &z[i]])).or_default() += w[i];
            *tables[1].entry(key(&[&y[i], &z[i]])).or_default() += w[i];
            *tables[2].entry(key(&[&z[i]])).or_default() += w[i];
            *tables[3].entry(key(&[&x[i], &y[i], &z[i]])).or_default() += w[i];
        }
        entropy(&tables[0]) + entropy(&tables[1]) - entropy(&tables[2]) - entropy(&tables[3])
    }

    #[test]
    fn discrete_matches_entropy_oracle_on_enumerated_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let ax = rng.random_range(1..=4);
            let ay = rng.random_range(1..=4);
            let az = rng.random_range(1..=4);
            let (mut x, mut y, mut z, mut w) = (vec![], vec![], vec![], vec![]);
            for a in 0..ax {
                for b in 0..ay {
                    for c in 0..az {
                        x.push(vec![a as f64]);
                        y.push(vec![b as f64, (b * 2) as f64]);
                        z.push(vec![c as f64 - 1.5]);
                        w.push(rng.random::<f64>() * (rng.random::<f64>() < 0.8) as u8 as f64);
                    }
                }
            }
            let s: f64 = w.iter().sum();
            if s == 0.0 {
                continue;
            }
            w.iter_mut().for_each(|v| *v /= s);
            let b = Blocks { x: &x, y: &y, z: &z, weights: Some(&w) };
            let got = cmi(Estimator::Discrete, &b).unwrap();
            let oracle = entropy_oracle(&x, &y, &z, &w);
            assert!((got - oracle).abs() < 1e-12, "{got} {oracle}");
            assert!(got >= -1e-12);
        }
    }

    #[test]
    fn anti_causal_bernoulli_is_log_two() {
        // the 8 equally likely (U_{-1}, U_0) x (X_{-1} = U_0) atoms
        let (mut x, mut y, mut z) = (vec![], vec![], vec![]);
        for um1 in [0.0, 1.0] {
            for u0 in [0.0, 1.0] {
                for _ in 0..2 {
                    x.push(vec![u0]);
                    y.push(vec![u0]);
                    z.push(vec![um1]);
                }
            }
        }
        let b = Blocks { x: &x, y: &y, z: &z, weights: None };
        assert!((cmi(Estimator::Discrete, &b).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_matches_closed_form() {
        // X = Z + e1, Y = X + e2: I(X;Y|Z) = 0.5 ln(1 + var(e1)/var(e2))
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = z.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let b = Blocks { x: &col(&x), y: &col(&y), z: &col(&z), weights: None };
        let got = cmi(Estimator::Gaussian, &b).unwrap();
        let expect = 0.5 * (1.0f64 + 1.0 / 4.0).ln();
        assert!((got - expect).abs() < 0.01, "{got} {expect}");
        let k = cmi(Estimator::Knn { k: 5 }, &Blocks { x: &b.x[..2000], y: &b.y[..2000], z: &b.z[..2000], weights: None }).unwrap();
        assert!((k - expect).abs() < 0.04, "{k}");
    }

    #[test]
    fn gaussian_handles_constant_columns_and_small_samples() {
        let x = col(&vec![1.0; 600]);
        let y: Vec<Vec<f64>> = (0..600).map(|i| vec![(i as f64).sin()]).collect();
        let z: Vec<Vec<f64>> = vec![vec![]; 600];
        assert_eq!(cmi(Estimator::Gaussian, &Blocks { x: &x, y: &y, z: &z, weights: None }).unwrap(), 0.0);
        let r = cmi(Estimator::Gaussian, &Blocks { x: &x[..10], y: &y[..10], z: &z[..10], weights: None });
        assert!(matches!(r, Err(Error::InsufficientSamples { needed: 500, got: 10 })));
    }

    #[test]
    fn permutation_tests_calibrate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 800;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = z.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect();
        let y_ind: Vec<f64> = z.iter().map(|v| 2.0 * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let y_dep: Vec<f64> = x.iter().zip(&y_ind).map(|(a, b)| a + b).collect();
        let (xc, zc) = (col(&x), col(&z));
        let ind = permutation_test(Estimator::Gaussian, &Blocks { x: &xc, y: &col(&y_ind), z: &zc, weights: None }, 0.05, 199, 1).unwrap();
        assert!(!ind.dependent, "{ind:?}");
        let dep = permutation_test(Estimator::Gaussian, &Blocks { x: &xc, y: &col(&y_dep), z: &zc, weights: None }, 0.05, 199, 1).unwrap();
        assert!(dep.dependent && dep.statistic > dep.threshold);
        // discrete: X independent of everything
        let xd: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let yd: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let zd: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let r = permutation_test(Estimator::Discrete, &Blocks { x: &col(&xd), y: &col(&yd), z: &col(&zd), weights: None }, 0.05, 199, 2).unwrap();
        assert!(!r.dependent && r.statistic <= r.threshold + 1e-12, "{r:?}");
        assert_eq!(r, permutation_test(Estimator::Discrete, &Blocks { x: &col(&xd), y: &col(&yd), z: &col(&zd), weights: None }, 0.05, 199, 2).unwrap());
    }
}
