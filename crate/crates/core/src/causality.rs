//! Causal couplings: conditional future sampling, causal extensions of
//! measures on pasts, conditional-independence reports and the Markov
//! property of augmented states.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmi::{default_permutations, permutation_test, Blocks, Estimator, PermutationResult};
use crate::error::{invalid, shape_err, Error, Result};
use crate::input_law::{open01, InputLawSpec};
use crate::measures::{
    sample_input_law, two_sample_envelope, wasserstein, ParticleMeasure, Particle, Projection, WassersteinOptions,
};
use crate::seed::{derive_seed, rng_for, streams};
use crate::sequences::{ExtendedInput, FutureSampler, Window};
use crate::systems::SystemInstance;

/// Exact conditional sampler of future inputs given a past window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSampler {
    pub spec: InputLawSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDraw {
    pub future: Vec<Vec<f64>>,
    /// The past matched several periodic phases; the draw used the
    /// weight-normalised mixture over them.
    pub ambiguous: bool,
}

impl ConditionalSampler {
    pub fn new(spec: InputLawSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ConditionalSampler { spec })
    }

    pub fn draw(&self, past: &Window, n_future: usize, seed: u64) -> Result<ConditionalDraw> {
        if past.is_empty() {
            return invalid("conditional sampling needs a nonempty past");
        }
        let mut rng = rng_for(seed, streams::CONDITIONAL, 0);
        // Builtin laws other than periodic only look at their Markov order.
        let keep = match self.spec {
            InputLawSpec::Periodic { .. } => past.len(),
            _ => self.spec.markov_order().max(1).min(past.len()),
        };
        let mut window = past.take_recent(keep)?;
        let mut future = Vec::with_capacity(n_future);
        let mut ambiguous = false;
        let per_step = self.spec.uniforms_per_step();
        for _ in 0..n_future {
            let v: Vec<f64> = (0..per_step).map(|_| open01(&mut rng)).collect();
            let step = self.spec.conditional_step(&window, &v)?;
            ambiguous |= step.ambiguous;
            if matches!(self.spec, InputLawSpec::Periodic { .. }) {
                window.push(&step.value)?;
            } else {
                window = window.shift_append(&step.value)?;
            }
            future.push(step.value);
        }
        if ambiguous {
            log::warn!("periodic phase not identified by the past; sampled from the phase mixture");
        }
        Ok(ConditionalDraw { future, ambiguous })
    }
}

impl FutureSampler for ConditionalSampler {
    fn sample_future(&self, past: &Window, n_future: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(self.draw(past, n_future, seed)?.future)
    }
}

/// Future inputs drawn from the conditional law of the spec given `past`.
pub fn conditional_future_sampler(spec: &InputLawSpec, past: &Window, n_future: usize, seed: u64) -> Result<ConditionalDraw> {
    ConditionalSampler::new(spec.clone())?.draw(past, n_future, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalCheck {
    /// Double-draw envelope pairs used for the input-marginal check.
    pub pairs: usize,
    /// Distances above `error_factor` envelopes are errors; above one
    /// envelope they are logged.
    pub error_factor: f64,
}

impl Default for MarginalCheck {
    fn default() -> Self {
        MarginalCheck {
            pairs: 10,
            error_factor: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalExtension {
    pub measure: ParticleMeasure,
    pub marginal_distance: Option<f64>,
    pub marginal_threshold: Option<f64>,
    pub ambiguous_particles: usize,
}

/// Appends `n_future` conditionally sampled inputs to every particle,
/// independently of its state. Dropping the future recovers `mu_minus`.
pub fn causal_extension(
    mu_minus: &ParticleMeasure,
    spec: &InputLawSpec,
    n_future: usize,
    seed: u64,
    check: Option<&MarginalCheck>,
) -> Result<CausalExtension> {
    let sampler = ConditionalSampler::new(spec.clone())?;
    let p0 = &mu_minus.particles()[0];
    if p0.input.dim() != spec.dim() {
        return shape_err("input law dimension does not match the measure");
    }
    let (mut marginal_distance, mut marginal_threshold) = (None, None);
    if let Some(chk) = check {
        let len = p0.input.past.len();
        let n = mu_minus.len();
        let opts = WassersteinOptions::default().with_projection(Projection::InputPast);
        let env = two_sample_envelope(
            chk.pairs,
            derive_seed(seed, streams::ENVELOPE, 0),
            |s| sample_input_law(spec, len, 0, n, s),
            |a, b| wasserstein(a, b, &opts),
        )?;
        let fresh = sample_input_law(spec, len, 0, n, derive_seed(seed, streams::INPUTS, 0))?;
        let d = wasserstein(&mu_minus.truncate(), &fresh, &opts)?;
        if d > chk.error_factor * env.threshold {
            return Err(Error::InconsistentMarginal {
                distance: d,
                threshold: chk.error_factor * env.threshold,
            });
        }
        if d > env.threshold {
            log::warn!("input marginal distance {d:e} exceeds the two-sample envelope {:e}", env.threshold);
        }
        marginal_distance = Some(d);
        marginal_threshold = Some(env.threshold);
    }
    let draws = mu_minus
        .particles()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let draw = sampler.draw(&p.input.past, n_future, derive_seed(seed, streams::CONDITIONAL, i as u64))?;
            Ok((
                Particle {
                    state: p.state.clone(),
                    input: ExtendedInput::new(p.input.past.clone(), draw.future)?,
                },
                draw.ambiguous,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let ambiguous_particles = draws.iter().filter(|d| d.1).count();
    let particles = draws.into_iter().map(|d| d.0).collect();
    let measure = ParticleMeasure::new(particles, mu_minus.weights().to_vec())?.with_meta(mu_minus.horizon, seed);
    Ok(CausalExtension {
        measure,
        marginal_distance,
        marginal_threshold,
        ambiguous_particles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmiOptions {
    #[serde(default)]
    pub estimator: Estimator,
    /// Number of most recent inputs up to time `t` conditioned on.
    #[serde(default = "one")]
    pub order: usize,
    /// Number of states up to time `t` in the first block.
    #[serde(default = "one")]
    pub state_lags: usize,
    /// Limit on the future block `U_{t+1}, ...`; all available when absent.
    #[serde(default)]
    pub future_len: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub permutations: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.05
}

impl Default for CmiOptions {
    fn default() -> Self {
        CmiOptions {
            estimator: Estimator::default(),
            order: 1,
            state_lags: 1,
            future_len: None,
            alpha: default_alpha(),
            permutations: None,
            seed: 0,
        }
    }
}

impl CmiOptions {
    /// Conditioning order matching the law's finite-order sufficient statistic.
    pub fn for_spec(spec: &InputLawSpec) -> Self {
        CmiOptions {
            order: spec.markov_order(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Independent,
    Dependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiLag {
    pub t: isize,
    pub cmi: f64,
    pub threshold: f64,
    pub p_value: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiSample {
    pub state: Window,
    /// Input entries up to the last available time (past then future).
    pub input: Window,
    /// Number of input entries after time 0.
    pub n_future: usize,
}

impl CmiSample {
    pub fn from_particle(p: &Particle) -> Result<Self> {
        let state = p.state.clone().ok_or_else(|| Error::InvalidArgument("particle has no state".into()))?;
        Ok(CmiSample {
            state,
            input: p.input.full_window(),
            n_future: p.input.future_len(),
        })
    }

    fn state_at(&self, t: isize) -> &[f64] {
        self.state.at(t)
    }

    fn input_at(&self, t: isize) -> &[f64] {
        self.input.at(t - self.n_future as isize)
    }
}

/// Range of lags `t` at which the blocks fit inside the windows.
pub fn lag_range(sample: &CmiSample, opts: &CmiOptions) -> Option<(isize, isize)> {
    let ls = sample.state.len() as isize;
    let lu = (sample.input.len() - sample.n_future) as isize;
    let need = opts.state_lags.max(1) as isize;
    let t_min = (-(ls - 1) + need - 1).max(-(lu - 1) + opts.order as isize - 1).max(-(lu - 1));
    let t_max = if sample.n_future > 0 { 0 } else { -1 };
    (t_min <= t_max).then_some((t_min, t_max))
}

fn blocks_at(samples: &[CmiSample], t: isize, opts: &CmiOptions) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let last = samples[0].n_future as isize;
    let y_end = match opts.future_len {
        Some(h) => (t + h as isize).min(last),
        None => last,
    };
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    let mut zs = Vec::with_capacity(samples.len());
    for s in samples {
        let mut x = Vec::new();
        for k in (0..opts.state_lags as isize).rev() {
            x.extend_from_slice(s.state_at(t - k));
        }
        let mut y = Vec::new();
        for r in t + 1..=y_end {
            y.extend_from_slice(s.input_at(r));
        }
        let mut z = Vec::new();
        for k in (0..opts.order as isize).rev() {
            z.extend_from_slice(s.input_at(t - k));
        }
        xs.push(x);
        ys.push(y);
        zs.push(z);
    }
    (xs, ys, zs)
}

/// Estimate and permutation threshold of `I(X_{t-s+1..t}; U_{t+1..} | U_{t-r+1..t})`
/// at level `opts.alpha`.
pub fn cmi_test(samples: &[CmiSample], weights: Option<&[f64]>, t: isize, opts: &CmiOptions) -> Result<CmiLag> {
    if samples.is_empty() {
        return invalid("no samples");
    }
    let s0 = &samples[0];
    if samples.iter().any(|s| {
        s.state.len() != s0.state.len() || s.input.len() != s0.input.len() || s.n_future != s0.n_future
    }) {
        return shape_err("samples differ in window shape");
    }
    let Some((t_min, t_max)) = lag_range(s0, opts) else {
        return invalid("windows are too short for the requested blocks");
    };
    if t < t_min || t > t_max {
        return invalid(format!("lag {t} outside the covered range [{t_min}, {t_max}]"));
    }
    let (x, y, z) = blocks_at(samples, t, opts);
    let b = Blocks { x: &x, y: &y, z: &z, weights };
    let perms = opts.permutations.unwrap_or_else(|| default_permutations(opts.alpha));
    let lag_seed = derive_seed(opts.seed, streams::PERMUTATION, t.unsigned_abs() as u64);
    let PermutationResult {
        statistic,
        threshold,
        p_value,
        dependent,
        ..
    } = permutation_test(opts.estimator, &b, opts.alpha, perms, lag_seed)?;
    Ok(CmiLag {
        t,
        cmi: statistic,
        threshold,
        p_value,
        verdict: if dependent { Verdict::Dependent } else { Verdict::Independent },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiReport {
    pub lags: Vec<CmiLag>,
    pub estimator: String,
    pub seed: u64,
    pub alpha: f64,
    /// Bonferroni-corrected level used at each lag.
    pub alpha_per_lag: f64,
    pub causal: bool,
}

/// `cmi_test` at every covered lag with a Bonferroni correction.
pub fn is_causal_report(mu: &ParticleMeasure, opts: &CmiOptions) -> Result<CmiReport> {
    let samples = mu.particles().iter().map(CmiSample::from_particle).collect::<Result<Vec<_>>>()?;
    let Some((t_min, t_max)) = lag_range(&samples[0], opts) else {
        return invalid("windows are too short for a causality report");
    };
    let n_lags = (t_max - t_min + 1) as usize;
    let per = CmiOptions {
        alpha: opts.alpha / n_lags as f64,
        ..opts.clone()
    };
    let lags = (t_min..=t_max)
        .map(|t| cmi_test(&samples, Some(mu.weights()), t, &per))
        .collect::<Result<Vec<_>>>()?;
    Ok(CmiReport {
        causal: lags.iter().all(|l| l.verdict == Verdict::Independent),
        lags,
        estimator: opts.estimator.name().to_string(),
        seed: opts.seed,
        alpha: opts.alpha,
        alpha_per_lag: per.alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

/// Forward runs of the state equation on sampled input paths after a burn-in.
pub fn simulate_trajectories(
    sys: &SystemInstance,
    spec: &InputLawSpec,
    x0: &[f64],
    n_traj: usize,
    len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if x0.len() != sys.dims().state {
        return shape_err("initial state has the wrong dimension");
    }
    let paths = crate::measures::sample_input_paths(spec, burn_in + len, n_traj, seed)?;
    paths
        .into_par_iter()
        .map(|path| {
            let mut x = x0.to_vec();
            let mut states = Vec::with_capacity(len);
            let mut inputs = Vec::with_capacity(len);
            for (t, u) in path.into_iter().enumerate() {
                x = sys.eval_f(&x, &u)?;
                if t >= burn_in {
                    states.push(x.clone());
                    inputs.push(u);
                }
            }
            Ok(Trajectory { states, inputs })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationOptions {
    /// Gaussian by default: binning a continuous state destroys the Markov
    /// property of the augmented chain, so it is only useful for states that
    /// are already discrete.
    #[serde(default)]
    pub estimator: Estimator,
    /// Equal-frequency bins per state coordinate applied before estimation.
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub permutations: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AugmentationOptions {
    fn default() -> Self {
        AugmentationOptions {
            estimator: Estimator::Gaussian,
            bins: None,
            alpha: default_alpha(),
            permutations: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovTest {
    pub cmi: f64,
    pub threshold: f64,
    pub p_value: f64,
    pub markov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub order: usize,
    pub samples: usize,
    /// Test on `(X_t, U_t)`.
    pub augmented: MarkovTest,
    /// Test on `X_t` alone.
    pub raw: MarkovTest,
}

fn quantize(rows: &mut [Vec<f64>], bins: usize) {
    if rows.is_empty() {
        return;
    }
    for c in 0..rows[0].len() {
        let mut vals: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        vals.sort_by(f64::total_cmp);
        let edges: Vec<f64> = (1..bins).map(|b| vals[(b * vals.len() / bins).min(vals.len() - 1)]).collect();
        for r in rows.iter_mut() {
            r[c] = edges.iter().filter(|e| r[c] >= **e).count() as f64;
        }
    }
}

fn markov_test(seqs: &[Vec<Vec<f64>>], order: usize, opts: &AugmentationOptions, seed: u64) -> Result<(MarkovTest, usize)> {
    let (mut x, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for s in seqs {
        for t in order + 1..s.len() {
            x.push(s[t].clone());
            y.push(s[t - order - 1].clone());
            z.push((1..=order).rev().flat_map(|k| s[t - k].clone()).collect::<Vec<f64>>());
        }
    }
    if x.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let n = x.len();
    let perms = opts.permutations.unwrap_or_else(|| default_permutations(opts.alpha));
    let r = permutation_test(opts.estimator, &Blocks { x: &x, y: &y, z: &z, weights: None }, opts.alpha, perms, seed)?;
    Ok((
        MarkovTest {
            cmi: r.statistic,
            threshold: r.threshold,
            p_value: r.p_value,
            markov: !r.dependent,
        },
        n,
    ))
}

/// Tests `I(V_t; V_{t-m-1} | V_{t-1}, ..., V_{t-m}) = 0` for the augmented
/// state `V = (X, U)` and for `V = X`.
pub fn markov_augmentation_test(trajectories: &[Trajectory], order: usize, opts: &AugmentationOptions) -> Result<AugmentationReport> {
    if order == 0 {
        return invalid("Markov order must be at least 1");
    }
    if trajectories.iter().any(|t| t.states.len() != t.inputs.len()) {
        return shape_err("trajectory states and inputs differ in length");
    }
    let mut raw: Vec<Vec<f64>> = trajectories.iter().flat_map(|t| t.states.clone()).collect();
    let mut aug: Vec<Vec<f64>> = trajectories
        .iter()
        .flat_map(|t| t.states.iter().zip(&t.inputs).map(|(x, u)| x.iter().chain(u).copied().collect::<Vec<f64>>()))
        .collect();
    if let Some(b) = opts.bins {
        if b < 2 {
            return invalid("quantization needs at least 2 bins");
        }
        quantize(&mut raw, b);
        let dx = trajectories.first().and_then(|t| t.states.first()).map(Vec::len).unwrap_or(0);
        // only the state coordinates of the augmented vector are quantized
        let mut xs: Vec<Vec<f64>> = aug.iter().map(|v| v[..dx].to_vec()).collect();
        quantize(&mut xs, b);
        for (v, q) in aug.iter_mut().zip(xs) {
            v[..dx].copy_from_slice(&q);
        }
    }
    let split = |flat: Vec<Vec<f64>>| -> Vec<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        let mut it = flat.into_iter();
        for t in trajectories {
            out.push(it.by_ref().take(t.states.len()).collect());
        }
        out
    };
    let (augmented, samples) = markov_test(&split(aug), order, opts, derive_seed(opts.seed, streams::PERMUTATION, 1))?;
    let (raw, _) = markov_test(&split(raw), order, opts, derive_seed(opts.seed, streams::PERMUTATION, 2))?;
    Ok(AugmentationReport {
        order,
        samples,
        augmented,
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input_law::BaseDist;
    use crate::measures::{pullback_measure, StochConfig};
    use nalgebra::DMatrix;

    fn scalar_linear(a: f64, b: f64) -> SystemInstance {
        SystemInstance::linear(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap()
    }

    fn bernoulli() -> InputLawSpec {
        InputLawSpec::Iid {
            base: BaseDist::Discrete { values: vec![vec![0.0], vec![1.0]], probs: vec![0.5, 0.5] },
        }
    }

    #[test]
    fn conditional_sampler_examples() {
        let dirac = InputLawSpec::Iid { base: BaseDist::Dirac { value: vec![0.7] } };
        let d = conditional_future_sampler(&dirac, &Window::scalar(&[1.0]).unwrap(), 5, 0).unwrap();
        assert_eq!(d.future, vec![vec![0.7]; 5]);
        let chain = InputLawSpec::MarkovChain {
            alphabet: vec![vec![-1.0], vec![1.0], vec![2.0]],
            transition: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            init: None,
        };
        let d = conditional_future_sampler(&chain, &Window::scalar(&[-1.0, 2.0]).unwrap(), 6, 3).unwrap();
        assert_eq!(d.future, vec![vec![2.0]; 6]);
        let ar = InputLawSpec::GaussianAr1 { a: 0.9, sigma: 1.0, dim: 1, mean: 0.0 };
        let past = Window::scalar(&[0.0, 2.0]).unwrap();
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|s| conditional_future_sampler(&ar, &past, 1, s).unwrap().future[0][0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.8).abs() < 0.03, "{mean}");
        let per = InputLawSpec::Periodic { cycle: vec![vec![0.0], vec![1.0], vec![0.0]], weights: vec![0.5, 0.25, 0.25] };
        let d = conditional_future_sampler(&per, &Window::scalar(&[1.0, 0.0]).unwrap(), 3, 0).unwrap();
        assert_eq!((d.future, d.ambiguous), (vec![vec![0.0], vec![1.0], vec![0.0]], false));
        let d = conditional_future_sampler(&per, &Window::scalar(&[0.0]).unwrap(), 3, 0).unwrap();
        assert!(d.ambiguous);
        assert!(conditional_future_sampler(&per, &Window::scalar(&[5.0]).unwrap(), 1, 0).is_err());
    }

    #[test]
    fn sampler_joint_law_matches_direct_draw() {
        let ar = InputLawSpec::GaussianAr1 { a: 0.6, sigma: 0.5, dim: 1, mean: 1.0 };
        let n = 400;
        let opts = WassersteinOptions::default().with_projection(Projection::Inputs);
        let coupled = |s: u64| {
            let past = sample_input_law(&ar, 3, 0, n, s)?;
            Ok::<_, Error>(causal_extension(&past, &ar, 2, derive_seed(s, 1, 1), None)?.measure)
        };
        let direct = |s: u64| sample_input_law(&ar, 3, 2, n, s);
        let env = two_sample_envelope(10, 5, direct, |a, b| wasserstein(a, b, &opts)).unwrap();
        let d = wasserstein(&coupled(100).unwrap(), &direct(200).unwrap(), &opts).unwrap();
        assert!(d <= 1.5 * env.threshold, "{d} vs {env:?}");
    }

    fn pulled(spec: &InputLawSpec, n: usize, seed: u64) -> ParticleMeasure {
        let cfg = StochConfig {
            particles: n,
            horizon: 30,
            window: 4,
            n_future: 0,
            seed,
            init: BaseDist::Dirac { value: vec![0.0] },
        };
        pullback_measure(&scalar_linear(0.5, 1.0), spec, &cfg).unwrap().measure
    }

    #[test]
    fn extension_is_right_inverse_of_truncation() {
        let spec = InputLawSpec::Iid { base: BaseDist::Normal { mean: vec![0.0], std: vec![1.0] } };
        let mu = pulled(&spec, 200, 3);
        let ext = causal_extension(&mu, &spec, 3, 8, Some(&MarginalCheck::default())).unwrap();
        assert_eq!(ext.measure.truncate().particles(), mu.particles());
        assert!(ext.marginal_distance.unwrap() <= MarginalCheck::default().error_factor * ext.marginal_threshold.unwrap());
        let again = causal_extension(&mu, &spec, 3, 8, None).unwrap();
        assert_eq!(again.measure, ext.measure);
        let other = causal_extension(&mu, &spec, 3, 9, None).unwrap();
        assert_eq!(other.measure.truncate().particles(), ext.measure.truncate().particles());
        assert_ne!(other.measure, ext.measure);
        let dirac = InputLawSpec::Iid { base: BaseDist::Dirac { value: vec![1.0] } };
        let mu = pulled(&dirac, 5, 0);
        let ext = causal_extension(&mu, &dirac, 2, 1, None).unwrap();
        assert!(ext.measure.particles().iter().all(|p| p.input.future() == vec![vec![1.0]; 2]));
        let wrong = InputLawSpec::Iid { base: BaseDist::Normal { mean: vec![5.0], std: vec![1.0] } };
        let mu = pulled(&wrong, 200, 0);
        assert!(matches!(
            causal_extension(&mu, &spec, 2, 1, Some(&MarginalCheck::default())),
            Err(Error::InconsistentMarginal { .. })
        ));
    }

    /// `f(x, u) = x` with `X_t = U_0`: states carry the time-0 input.
    fn anti_causal(n: usize, seed: u64) -> ParticleMeasure {
        let inputs = sample_input_law(&bernoulli(), 3, 0, n, seed).unwrap();
        let ps = inputs
            .particles()
            .iter()
            .map(|p| Particle {
                state: Some(Window::constant(p.input.past.newest(), 3).unwrap()),
                input: p.input.clone(),
            })
            .collect();
        ParticleMeasure::uniform(ps).unwrap()
    }

    #[test]
    fn anti_causal_construction() {
        let ident = SystemInstance::linear(DMatrix::identity(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let mu = anti_causal(2000, 1);
        assert!(crate::measures::check_stochastic_solution(&ident, &mu, 1e-12).unwrap().is_solution);
        let opts = CmiOptions { estimator: Estimator::Discrete, ..Default::default() };
        let report = is_causal_report(&mu, &opts).unwrap();
        assert!(!report.causal);
        let lag = report.lags.iter().find(|l| l.t == -1).unwrap();
        // plug-in on a balanced sample of the 8-point law
        assert!((lag.cmi - 2f64.ln()).abs() < 0.01, "{lag:?}");
        assert_eq!(lag.verdict, Verdict::Dependent);
    }

    #[test]
    fn causal_reports() {
        let spec = InputLawSpec::Iid { base: BaseDist::Normal { mean: vec![0.0], std: vec![1.0] } };
        let mu = pulled(&spec, 1000, 2);
        let ext = causal_extension(&mu, &spec, 2, 4, None).unwrap().measure;
        let report = is_causal_report(&ext, &CmiOptions { seed: 5, ..CmiOptions::for_spec(&spec) }).unwrap();
        assert!(report.causal, "{report:?}");
        assert_eq!(report.lags.last().unwrap().t, 0);
        let dirac = InputLawSpec::Iid { base: BaseDist::Dirac { value: vec![1.0] } };
        let mu = pulled(&dirac, 50, 0);
        let r = is_causal_report(&mu, &CmiOptions { estimator: Estimator::Discrete, ..Default::default() }).unwrap();
        assert!(r.causal && r.lags.iter().all(|l| l.cmi.abs() < 1e-15));
    }

    #[test]
    fn knn_permutation_on_extension() {
        let spec = InputLawSpec::GaussianAr1 { a: 0.5, sigma: 1.0, dim: 1, mean: 0.0 };
        let mu = pulled(&spec, 600, 1);
        let ext = causal_extension(&mu, &spec, 1, 4, None).unwrap().measure;
        let samples: Vec<CmiSample> = ext.particles().iter().map(|p| CmiSample::from_particle(p).unwrap()).collect();
        let opts = CmiOptions { estimator: Estimator::Knn { k: 5 }, permutations: Some(39), ..Default::default() };
        let lag = cmi_test(&samples, None, 0, &opts).unwrap();
        assert_eq!(lag.verdict, Verdict::Independent, "{lag:?}");
    }

    #[test]
    fn markov_augmentation_examples() {
        let sys = scalar_linear(0.5, 1.0);
        let iid = InputLawSpec::Iid { base: BaseDist::Normal { mean: vec![0.0], std: vec![1.0] } };
        let trajs = simulate_trajectories(&sys, &iid, &[0.0], 20, 200, 50, 1).unwrap();
        let gauss = AugmentationOptions { estimator: Estimator::Gaussian, ..Default::default() };
        let r = markov_augmentation_test(&trajs, 1, &gauss).unwrap();
        assert!(r.raw.markov && r.augmented.markov, "{r:?}");

        let chain = InputLawSpec::MarkovChain {
            alphabet: vec![vec![-1.0], vec![1.0]],
            transition: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            init: None,
        };
        let trajs = simulate_trajectories(&sys, &chain, &[0.0], 20, 200, 50, 2).unwrap();
        let r = markov_augmentation_test(&trajs, 1, &gauss).unwrap();
        assert!(r.augmented.markov && !r.raw.markov, "{r:?}");

        let dirac = InputLawSpec::Iid { base: BaseDist::Dirac { value: vec![1.0] } };
        let trajs = simulate_trajectories(&sys, &dirac, &[0.0], 2, 50, 60, 0).unwrap();
        let discrete = AugmentationOptions { estimator: Estimator::Discrete, ..Default::default() };
        let r = markov_augmentation_test(&trajs, 1, &discrete).unwrap();
        assert!(r.raw.markov && r.augmented.markov);
    }
}
