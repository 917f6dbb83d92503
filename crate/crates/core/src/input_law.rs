//! Input laws on left-infinite sequences and their conditional samplers.
//!
//! Each builtin law has a finite-order sufficient statistic for its
//! conditional future given the past, so exact conditional sampling only
//! needs the most recent `markov_order()` entries of a window.
//!
//! Two independent sampling routes exist on purpose: [`InputLawSpec::sample_path`]
//! draws whole paths with `rand_distr` (the direct joint draw), while
//! [`InputLawSpec::conditional_step`] maps a past window and uniforms to the
//! next entry by inverse CDFs.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{invalid, shape_err, Result};
use crate::sequences::Window;

const MATCH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseDist {
    Dirac { value: Vec<f64> },
    /// Independent coordinates, uniform on `[low_c, high_c)`.
    Uniform { low: Vec<f64>, high: Vec<f64> },
    /// Independent coordinates, `N(mean_c, std_c^2)`.
    Normal { mean: Vec<f64>, std: Vec<f64> },
    Discrete { values: Vec<Vec<f64>>, probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputLawSpec {
    Iid {
        base: BaseDist,
    },
    /// Finite-alphabet chain; started from `init`, or from the stationary
    /// distribution when `init` is absent.
    MarkovChain {
        alphabet: Vec<Vec<f64>>,
        transition: Vec<Vec<f64>>,
        #[serde(default)]
        init: Option<Vec<f64>>,
    },
    /// Stationary `u_t - m = a (u_{t-1} - m) + sigma * eps_t` per coordinate.
    GaussianAr1 {
        a: f64,
        sigma: f64,
        #[serde(default = "one")]
        dim: usize,
        #[serde(default)]
        mean: f64,
    },
    /// Deterministic periodic sequence with a random phase: with probability
    /// `weights[j]` the time-0 entry is `cycle[j]`, and `u_t = cycle[(j+t) mod k]`.
    Periodic { cycle: Vec<Vec<f64>>, weights: Vec<f64> },
}

fn one() -> usize {
    1
}

fn check_probs(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|x| !(x >= &0.0) || !x.is_finite()) {
        return invalid(format!("{what} must be nonnegative and nonempty"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return invalid(format!("{what} sums to {s}, not 1"));
    }
    Ok(())
}

fn same_dims(vals: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = vals.first().map(Vec::len).unwrap_or(0);
    if d == 0 || vals.iter().any(|v| v.len() != d) {
        return shape_err(format!("{what} entries must share a positive dimension"));
    }
    Ok(d)
}

/// Uniform draw in the open interval `(0, 1)`.
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn inverse_discrete(probs: &[f64], v: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if v < acc {
            return i;
        }
    }
    // v within rounding of 1: last atom with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn std_normal_quantile(v: f64) -> f64 {
    statrs::distribution::Normal::standard().inverse_cdf(v)
}

/// Outcome of a conditional step: the sampled entry and whether the past
/// left several periodic phases possible.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub value: Vec<f64>,
    pub ambiguous: bool,
}

impl BaseDist {
    /// Validates the distribution and returns its dimension.
    pub fn dim(&self) -> Result<usize> {
        match self {
            BaseDist::Dirac { value } => {
                if value.is_empty() {
                    return shape_err("dirac value is empty");
                }
                Ok(value.len())
            }
            BaseDist::Uniform { low, high } => {
                if low.is_empty() || low.len() != high.len() {
                    return shape_err("uniform bounds have mismatched lengths");
                }
                if low.iter().zip(high).any(|(l, h)| !(l < h)) {
                    return invalid("uniform requires low < high");
                }
                Ok(low.len())
            }
            BaseDist::Normal { mean, std } => {
                if mean.is_empty() || mean.len() != std.len() {
                    return shape_err("normal mean and std have mismatched lengths");
                }
                if std.iter().any(|s| !(*s >= 0.0)) {
                    return invalid("normal std must be nonnegative");
                }
                Ok(mean.len())
            }
            BaseDist::Discrete { values, probs } => {
                if values.len() != probs.len() {
                    return shape_err("discrete values and probs differ in length");
                }
                check_probs(probs, "discrete probabilities")?;
                same_dims(values, "discrete value")
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            BaseDist::Dirac { value } => value.clone(),
            BaseDist::Uniform { low, high } => low
                .iter()
                .zip(high)
                .map(|(l, h)| Uniform::new(*l, *h).expect("validated bounds").sample(rng))
                .collect(),
            BaseDist::Normal { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| Normal::new(*m, *s).expect("validated std").sample(rng))
                .collect(),
            BaseDist::Discrete { values, probs } => {
                let idx = WeightedIndex::new(probs).expect("validated probs").sample(rng);
                values[idx].clone()
            }
        }
    }

    fn quantile(&self, v: &[f64]) -> Vec<f64> {
        match self {
            BaseDist::Dirac { value } => value.clone(),
            BaseDist::Uniform { low, high } => low
                .iter()
                .zip(high)
                .zip(v)
                .map(|((l, h), t)| l + t * (h - l))
                .collect(),
            BaseDist::Normal { mean, std } => mean
                .iter()
                .zip(std)
                .zip(v)
                .map(|((m, s), t)| m + s * std_normal_quantile(*t))
                .collect(),
            BaseDist::Discrete { values, probs } => values[inverse_discrete(probs, v[0])].clone(),
        }
    }

    fn uniforms(&self) -> usize {
        match self {
            BaseDist::Dirac { .. } => 0,
            BaseDist::Uniform { low, .. } => low.len(),
            BaseDist::Normal { mean, .. } => mean.len(),
            BaseDist::Discrete { .. } => 1,
        }
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let k = p.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..100_000 {
        let mut next = vec![0.0; k];
        for (i, row) in p.iter().enumerate() {
            for (j, pij) in row.iter().enumerate() {
                next[j] += pi[i] * pij;
            }
        }
        // Averaging with the previous iterate handles periodic chains.
        let next: Vec<f64> = next.iter().zip(&pi).map(|(a, b)| 0.5 * (a + b)).collect();
        let delta = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pi = next;
        if delta < 1e-16 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter().map(|x| x / s).collect()
}

fn find_symbol(alphabet: &[Vec<f64>], v: &[f64]) -> Option<usize> {
    alphabet
        .iter()
        .position(|a| a.iter().zip(v).all(|(x, y)| (x - y).abs() <= MATCH_TOL))
}

impl InputLawSpec {
    /// Validates the spec and returns the input dimension.
    pub fn validate(&self) -> Result<usize> {
        match self {
            InputLawSpec::Iid { base } => base.dim(),
            InputLawSpec::MarkovChain { alphabet, transition, init } => {
                let d = same_dims(alphabet, "alphabet")?;
                if transition.len() != alphabet.len() || transition.iter().any(|r| r.len() != alphabet.len()) {
                    return shape_err("transition matrix must be k x k for an alphabet of size k");
                }
                for (i, row) in transition.iter().enumerate() {
                    check_probs(row, &format!("transition row {i}"))?;
                }
                if let Some(p) = init {
                    if p.len() != alphabet.len() {
                        return shape_err("initial distribution has wrong length");
                    }
                    check_probs(p, "initial distribution")?;
                }
                Ok(d)
            }
            InputLawSpec::GaussianAr1 { a, sigma, dim, mean } => {
                if !(a.abs() < 1.0) {
                    return invalid(format!("ar1 coefficient {a} must satisfy |a| < 1"));
                }
                if !(*sigma >= 0.0) || !mean.is_finite() {
                    return invalid("ar1 sigma must be nonnegative and mean finite");
                }
                if *dim == 0 {
                    return invalid("ar1 dimension must be positive");
                }
                Ok(*dim)
            }
            InputLawSpec::Periodic { cycle, weights } => {
                let d = same_dims(cycle, "cycle")?;
                if weights.len() != cycle.len() {
                    return shape_err("periodic weights must have one entry per phase");
                }
                check_probs(weights, "periodic weights")?;
                Ok(d)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.validate().unwrap_or(0)
    }

    /// Number of trailing entries the conditional law depends on.
    pub fn markov_order(&self) -> usize {
        match self {
            InputLawSpec::Iid { .. } => 0,
            InputLawSpec::MarkovChain { .. } | InputLawSpec::GaussianAr1 { .. } => 1,
            InputLawSpec::Periodic { cycle, .. } => cycle.len(),
        }
    }

    /// Uniforms consumed per conditional step.
    pub fn uniforms_per_step(&self) -> usize {
        match self {
            InputLawSpec::Iid { base } => base.uniforms(),
            InputLawSpec::MarkovChain { .. } | InputLawSpec::Periodic { .. } => 1,
            InputLawSpec::GaussianAr1 { dim, .. } => *dim,
        }
    }

    fn chain_init(&self) -> Vec<f64> {
        match self {
            InputLawSpec::MarkovChain { transition, init, .. } => {
                init.clone().unwrap_or_else(|| stationary_distribution(transition))
            }
            _ => unreachable!(),
        }
    }

    /// Direct draw of `len` consecutive entries (oldest first) from the law.
    pub fn sample_path<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<Vec<f64>> {
        match self {
            InputLawSpec::Iid { base } => (0..len).map(|_| base.sample(rng)).collect(),
            InputLawSpec::MarkovChain { alphabet, transition, .. } => {
                let init = self.chain_init();
                let rows: Vec<WeightedIndex<f64>> = transition
                    .iter()
                    .map(|r| WeightedIndex::new(r).expect("validated row"))
                    .collect();
                let mut s = WeightedIndex::new(&init).expect("validated init").sample(rng);
                let mut out = Vec::with_capacity(len);
                for t in 0..len {
                    if t > 0 {
                        s = rows[s].sample(rng);
                    }
                    out.push(alphabet[s].clone());
                }
                out
            }
            InputLawSpec::GaussianAr1 { a, sigma, dim, mean } => {
                let noise = Normal::new(0.0, *sigma).expect("validated sigma");
                let stat = Normal::new(0.0, sigma / (1.0 - a * a).sqrt()).expect("validated sigma");
                let mut x: Vec<f64> = (0..*dim).map(|_| stat.sample(rng)).collect();
                let mut out = Vec::with_capacity(len);
                for t in 0..len {
                    if t > 0 {
                        for v in x.iter_mut() {
                            *v = a * *v + noise.sample(rng);
                        }
                    }
                    out.push(x.iter().map(|v| v + mean).collect());
                }
                out
            }
            InputLawSpec::Periodic { weights, .. } => {
                let phase = WeightedIndex::new(weights).expect("validated weights").sample(rng);
                self.periodic_path(len, phase).expect("periodic law")
            }
        }
    }

    /// Path of a periodic law whose last entry is `cycle[phase]`.
    pub fn periodic_path(&self, len: usize, phase: usize) -> Result<Vec<Vec<f64>>> {
        let InputLawSpec::Periodic { cycle, .. } = self else {
            return invalid("periodic_path needs a periodic law");
        };
        let k = cycle.len();
        if phase >= k {
            return invalid(format!("phase {phase} outside a cycle of length {k}"));
        }
        Ok((0..len)
            .map(|i| {
                let t = i as i64 - (len as i64 - 1);
                cycle[(phase as i64 + t).rem_euclid(k as i64) as usize].clone()
            })
            .collect())
    }

    /// Phase whose cumulative cycle weight first exceeds `v ∈ [0, 1)`.
    pub fn phase_for(&self, v: f64) -> Option<usize> {
        match self {
            InputLawSpec::Periodic { weights, .. } => Some(inverse_discrete(weights, v)),
            _ => None,
        }
    }

    /// Periodic phases consistent with the past window.
    pub fn consistent_phases(&self, past: &Window) -> Vec<usize> {
        let InputLawSpec::Periodic { cycle, .. } = self else {
            return Vec::new();
        };
        let k = cycle.len();
        (0..k)
            .filter(|&j| {
                (0..past.len()).all(|l| {
                    let c = &cycle[(j as i64 - l as i64).rem_euclid(k as i64) as usize];
                    c.iter().zip(past.lag(l)).all(|(x, y)| (x - y).abs() <= MATCH_TOL)
                })
            })
            .collect()
    }

    /// The representation map: next entry `u_1 = g(past, v)` for uniforms
    /// `v ∈ (0,1)^uniforms_per_step()`, distributed as the conditional law of
    /// `u_1` given the past when `v` is uniform.
    pub fn conditional_step(&self, past: &Window, v: &[f64]) -> Result<Step> {
        if past.dim() != self.dim() {
            return shape_err(format!("past has dimension {}, law has {}", past.dim(), self.dim()));
        }
        if v.len() != self.uniforms_per_step() {
            return shape_err(format!("expected {} uniforms, got {}", self.uniforms_per_step(), v.len()));
        }
        let value = match self {
            InputLawSpec::Iid { base } => base.quantile(v),
            InputLawSpec::MarkovChain { alphabet, transition, .. } => {
                let Some(s) = find_symbol(alphabet, past.newest()) else {
                    return invalid("past ends in a value outside the chain alphabet");
                };
                alphabet[inverse_discrete(&transition[s], v[0])].clone()
            }
            InputLawSpec::GaussianAr1 { a, sigma, mean, .. } => past
                .newest()
                .iter()
                .zip(v)
                .map(|(x, t)| mean + a * (x - mean) + sigma * std_normal_quantile(*t))
                .collect(),
            InputLawSpec::Periodic { cycle, weights } => {
                let k = cycle.len();
                let phases = self.consistent_phases(past);
                if phases.is_empty() {
                    return invalid("past is not a segment of the periodic cycle");
                }
                let ambiguous = phases.len() > 1;
                let w: Vec<f64> = phases.iter().map(|&j| weights[j]).collect();
                let total: f64 = w.iter().sum();
                let chosen = if total > 0.0 {
                    let norm: Vec<f64> = w.iter().map(|x| x / total).collect();
                    phases[inverse_discrete(&norm, v[0])]
                } else {
                    phases[0]
                };
                return Ok(Step {
                    value: cycle[(chosen + 1) % k].clone(),
                    ambiguous,
                });
            }
        };
        Ok(Step { value, ambiguous: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn validation() {
        let bad = InputLawSpec::MarkovChain {
            alphabet: vec![vec![0.0], vec![1.0]],
            transition: vec![vec![0.5, 0.6], vec![0.5, 0.5]],
            init: None,
        };
        assert!(bad.validate().is_err());
        assert!(InputLawSpec::GaussianAr1 { a: 1.0, sigma: 1.0, dim: 1, mean: 0.0 }.validate().is_err());
        assert!(InputLawSpec::Periodic { cycle: vec![vec![1.0]], weights: vec![0.5] }.validate().is_err());
        let json = r#"{"kind":"iid","base":{"dist":"uniform","low":[1.1],"high":[1.9]}}"#;
        let spec: InputLawSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.validate().unwrap(), 1);
    }

    #[test]
    fn stationary_of_symmetric_chain() {
        let pi = stationary_distribution(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_map_matches_distribution() {
        let spec = InputLawSpec::Iid {
            base: BaseDist::Normal { mean: vec![1.0], std: vec![2.0] },
        };
        let past = Window::scalar(&[0.0]).unwrap();
        let med = spec.conditional_step(&past, &[0.5]).unwrap().value[0];
        assert!((med - 1.0).abs() < 1e-12);
        let q = spec.conditional_step(&past, &[0.975]).unwrap().value[0];
        assert!((q - (1.0 + 2.0 * 1.959963984540054)).abs() < 1e-8);
    }

    #[test]
    fn periodic_phases() {
        let spec = InputLawSpec::Periodic {
            cycle: vec![vec![0.0], vec![1.0], vec![2.0]],
            weights: vec![0.2, 0.3, 0.5],
        };
        let past = Window::scalar(&[0.0, 1.0]).unwrap();
        assert_eq!(spec.consistent_phases(&past), vec![1]);
        assert_eq!(spec.conditional_step(&past, &[0.3]).unwrap().value, vec![2.0]);
        let mut rng = rng_for(1, 0, 0);
        let path = spec.sample_path(7, &mut rng);
        let w = Window::new(1, path).unwrap();
        assert_eq!(spec.consistent_phases(&w).len(), 1);
        assert!(spec.conditional_step(&Window::scalar(&[0.0, 2.0]).unwrap(), &[0.5]).is_err());
    }
}
