//! Particle measures on (state window, input window) pairs.
//!
//! Laws are always finitely supported: weighted particles whose state part
//! may be absent (input-only measures). Push-forwards act particle-wise, so
//! they are exact on atoms.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::det_solver::{solution_fibers, PullbackConfig};
use crate::error::{invalid, shape_err, Error, Result};
use crate::input_law::{BaseDist, InputLawSpec};
use crate::lowdisc::radical_inverse;
use crate::seed::{derive_seed, rng_for, streams};
use crate::sequences::{ExtendedInput, Metric, WeightSeq, Window};
use crate::systems::SystemInstance;
use crate::transport::{wasserstein_exact, wasserstein_sliced, Discrete, EXACT_LIMIT};

const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Smallest envelope returned by [`two_sample_envelope`]; keeps comparisons
/// against exactly reproducible laws meaningful.
pub const ENVELOPE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    #[serde(default)]
    pub state: Option<Window>,
    pub input: ExtendedInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleMeasure {
    particles: Vec<Particle>,
    weights: Vec<f64>,
    #[serde(default)]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ParticleMeasure {
    pub fn new(particles: Vec<Particle>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() {
            return invalid("particle measure has no particles");
        }
        if particles.len() != weights.len() {
            return shape_err(format!("{} particles but {} weights", particles.len(), weights.len()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("particle weights must be finite and nonnegative");
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > WEIGHT_SUM_TOL * (weights.len() as f64).max(1.0) {
            return invalid(format!("particle weights sum to {s}"));
        }
        let first = &particles[0];
        let shape = |p: &Particle| {
            (
                p.state.as_ref().map(|s| (s.len(), s.dim())),
                p.input.past.len(),
                p.input.dim(),
                p.input.future_len(),
            )
        };
        let s0 = shape(first);
        if let Some(i) = particles.iter().position(|p| shape(p) != s0) {
            return shape_err(format!("particle {i} differs in shape from particle 0"));
        }
        Ok(ParticleMeasure {
            particles,
            weights,
            horizon: 0,
            seed: 0,
        })
    }

    pub fn uniform(particles: Vec<Particle>) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dirac(state: Option<Window>, input: ExtendedInput) -> Result<Self> {
        Self::new(vec![Particle { state, input }], vec![1.0])
    }

    pub fn with_meta(mut self, horizon: usize, seed: u64) -> Self {
        self.horizon = horizon;
        self.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn has_states(&self) -> bool {
        self.particles[0].state.is_some()
    }

    /// Drops the future part of every input.
    pub fn truncate(&self) -> ParticleMeasure {
        let particles = self
            .particles
            .iter()
            .map(|p| Particle {
                state: p.state.clone(),
                input: ExtendedInput::without_future(p.input.past.clone()),
            })
            .collect();
        ParticleMeasure {
            particles,
            ..self.clone()
        }
    }

    /// Weighted mean and variance of coordinate `c` of the time-0 state.
    pub fn state_moments(&self, c: usize) -> Result<(f64, f64)> {
        if !self.has_states() {
            return invalid("measure has no states");
        }
        let mut m = 0.0;
        for (p, w) in self.particles.iter().zip(&self.weights) {
            m += w * p.state.as_ref().expect("states").newest()[c];
        }
        let mut v = 0.0;
        for (p, w) in self.particles.iter().zip(&self.weights) {
            v += w * (p.state.as_ref().expect("states").newest()[c] - m).powi(2);
        }
        Ok((m, v))
    }

    /// One row per particle: weight, state entries (oldest first), input
    /// past entries, future entries.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let p0 = &self.particles[0];
        let mut header = vec!["weight".to_string()];
        if let Some(s) = &p0.state {
            for k in (0..s.len()).rev() {
                for c in 0..s.dim() {
                    header.push(format!("x_m{k}_{c}"));
                }
            }
        }
        let past = &p0.input.past;
        for k in (0..past.len()).rev() {
            for c in 0..past.dim() {
                header.push(format!("u_m{k}_{c}"));
            }
        }
        for k in 1..=p0.input.future_len() {
            for c in 0..past.dim() {
                header.push(format!("u_p{k}_{c}"));
            }
        }
        w.write_record(&header)?;
        for (p, wt) in self.particles.iter().zip(&self.weights) {
            let mut row = vec![format!("{wt:e}")];
            if let Some(s) = &p.state {
                row.extend(s.as_flat().iter().map(|v| format!("{v:e}")));
            }
            row.extend(p.input.full_window().as_flat().iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<ParticleMeasure> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("weight") {
            return invalid("particle CSV must start with a weight column");
        }
        let parse = |name: &str, prefix: &str| -> Option<(usize, usize)> {
            let rest = name.strip_prefix(prefix)?;
            let (k, c) = rest.split_once('_')?;
            Some((k.parse().ok()?, c.parse().ok()?))
        };
        let count = |prefix: &str| -> (usize, usize) {
            let cols: Vec<(usize, usize)> = header.iter().filter_map(|h| parse(h, prefix)).collect();
            let lags = cols.iter().map(|x| x.0).max().map(|m| m + 1).unwrap_or(0);
            let dim = cols.iter().map(|x| x.1).max().map(|m| m + 1).unwrap_or(0);
            (lags, dim)
        };
        let (xs_len, xs_dim) = count("x_m");
        let (u_len, u_dim) = count("u_m");
        let (f_len, _) = count("u_p");
        let f_len = if f_len > 0 { f_len - 1 } else { 0 };
        if u_len == 0 {
            return invalid("particle CSV has no input columns");
        }
        let expected = 1 + xs_len * xs_dim + (u_len + f_len) * u_dim;
        if header.len() != expected {
            return shape_err(format!("particle CSV has {} columns, expected {expected}", header.len()));
        }
        let mut particles = Vec::new();
        let mut weights = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != expected {
                return shape_err("particle CSV row has the wrong number of columns");
            }
            weights.push(vals[0]);
            let mut at = 1;
            let state = if xs_len > 0 {
                let s = Window::from_flat(xs_dim, vals[at..at + xs_len * xs_dim].to_vec())?;
                at += xs_len * xs_dim;
                Some(s)
            } else {
                None
            };
            let past = Window::from_flat(u_dim, vals[at..at + u_len * u_dim].to_vec())?;
            at += u_len * u_dim;
            let future = vals[at..].chunks(u_dim).map(<[f64]>::to_vec).collect();
            particles.push(Particle {
                state,
                input: ExtendedInput::new(past, future)?,
            });
        }
        ParticleMeasure::new(particles, weights)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<ParticleMeasure> {
        let m: ParticleMeasure = serde_json::from_str(s)?;
        let (h, seed) = (m.horizon, m.seed);
        Ok(ParticleMeasure::new(m.particles, m.weights)?.with_meta(h, seed))
    }
}

/// `n` input paths of length `len`. Periodic laws get their phases from a
/// randomly rotated van der Corput sequence, so phase frequencies match the
/// cycle weights up to `1/n`; other laws draw each path from its own stream.
pub fn sample_input_paths(spec: &InputLawSpec, len: usize, n: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    spec.validate()?;
    if len == 0 {
        return invalid("input paths must have positive length");
    }
    if let InputLawSpec::Periodic { .. } = spec {
        let rot: f64 = rng_for(seed, streams::LOW_DISCREPANCY, 1).random();
        return (0..n)
            .map(|i| {
                let v = (radical_inverse(i as u64, 2) + rot).fract();
                spec.periodic_path(len, spec.phase_for(v).expect("periodic"))
            })
            .collect();
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, streams::INPUTS, i as u64);
            spec.sample_path(len, &mut rng)
        })
        .collect())
}

fn split_path(path: Vec<Vec<f64>>, past_len: usize, dim: usize) -> Result<ExtendedInput> {
    let mut past: Vec<f64> = Vec::with_capacity(past_len * dim);
    let mut future = Vec::new();
    for (i, v) in path.into_iter().enumerate() {
        if i < past_len {
            past.extend(v);
        } else {
            future.push(v);
        }
    }
    ExtendedInput::new(Window::from_flat(dim, past)?, future)
}

/// Input-only measure with `n` uniformly weighted particles.
pub fn sample_input_law(spec: &InputLawSpec, len: usize, n_future: usize, n: usize, seed: u64) -> Result<ParticleMeasure> {
    let d = spec.validate()?;
    if n == 0 {
        return invalid("need at least one particle");
    }
    let paths = sample_input_paths(spec, len + n_future, n, seed)?;
    let particles = paths
        .into_iter()
        .map(|p| {
            Ok(Particle {
                state: None,
                input: split_path(p, len, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleMeasure::uniform(particles)?.with_meta(0, seed))
}

/// Particle-wise `phi_step`; weights are unchanged.
pub fn pushforward_phi_star(sys: &SystemInstance, mu: &ParticleMeasure) -> Result<ParticleMeasure> {
    if !mu.has_states() {
        return invalid("push-forward needs particles with states");
    }
    let particles = mu
        .particles
        .par_iter()
        .map(|p| {
            let (state, input) = sys.phi_step(p.state.clone().expect("states"), p.input.clone())?;
            Ok(Particle {
                state: Some(state),
                input,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleMeasure {
        particles,
        weights: mu.weights.clone(),
        horizon: mu.horizon,
        seed: mu.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochConfig {
    pub particles: usize,
    /// Pullback steps before the oldest kept state.
    pub horizon: usize,
    /// Length of the kept state and input windows.
    pub window: usize,
    #[serde(default)]
    pub n_future: usize,
    #[serde(default)]
    pub seed: u64,
    /// Law of the initial states of the pullback.
    pub init: BaseDist,
}

impl StochConfig {
    pub fn validate(&self, sys: &SystemInstance) -> Result<()> {
        if self.particles == 0 {
            return invalid("particles must be positive");
        }
        if self.horizon == 0 {
            return invalid("horizon must be at least 1");
        }
        if self.window == 0 {
            return invalid("window must be at least 1");
        }
        if self.init.dim()? != sys.dims().state {
            return shape_err("initial state law does not match the state dimension");
        }
        Ok(())
    }

    fn path_len(&self) -> usize {
        self.horizon + self.window + self.n_future
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PullbackOutcome {
    pub measure: ParticleMeasure,
    /// Indices of particles dropped because their state left the reals.
    pub diverged: Vec<usize>,
}

/// `phi_*^n` applied to (initial state ⊗ input path) particles: each particle
/// draws an input path and an initial state, runs the state equation for
/// `horizon + window - 1` steps and keeps the last `window` states and inputs.
pub fn pullback_measure(sys: &SystemInstance, spec: &InputLawSpec, cfg: &StochConfig) -> Result<PullbackOutcome> {
    cfg.validate(sys)?;
    let d = spec.validate()?;
    if d != sys.dims().input {
        return shape_err("input law dimension does not match the system");
    }
    let paths = sample_input_paths(spec, cfg.path_len(), cfg.particles, cfg.seed)?;
    let past_len = cfg.horizon + cfg.window;
    let outcomes: Vec<Option<Particle>> = paths
        .into_par_iter()
        .enumerate()
        .map(|(i, path)| {
            let mut rng = rng_for(cfg.seed, streams::INIT_STATES, i as u64);
            let mut x = cfg.init.sample(&mut rng);
            let mut states = Vec::with_capacity(cfg.window * x.len());
            for (t, u) in path[1..past_len].iter().enumerate() {
                x = sys.eval_f(&x, u).ok()?;
                if t + 1 >= past_len - cfg.window {
                    states.extend_from_slice(&x);
                }
            }
            let input = split_path(path, past_len, d).ok()?;
            let past = input.past.take_recent(cfg.window).ok()?;
            Some(Particle {
                state: Some(Window::from_flat(x.len(), states).ok()?),
                input: ExtendedInput::new(past, input.future()).ok()?,
            })
        })
        .collect();
    let diverged: Vec<usize> = outcomes.iter().enumerate().filter(|(_, p)| p.is_none()).map(|(i, _)| i).collect();
    let particles: Vec<Particle> = outcomes.into_iter().flatten().collect();
    if particles.is_empty() {
        return Err(Error::Divergence("every pullback particle diverged".into()));
    }
    Ok(PullbackOutcome {
        measure: ParticleMeasure::uniform(particles)?.with_meta(cfg.horizon, cfg.seed),
        diverged,
    })
}

/// Pairs each sampled input with its unique solution. The input paths are
/// the ones [`pullback_measure`] draws for the same config, so the two
/// measures are coupled by common random numbers.
pub fn pushforward_solution_map(
    sys: &SystemInstance,
    spec: &InputLawSpec,
    cfg: &StochConfig,
    solver: &PullbackConfig,
) -> Result<ParticleMeasure> {
    cfg.validate(sys)?;
    let d = spec.validate()?;
    if d != sys.dims().input {
        return shape_err("input law dimension does not match the system");
    }
    let paths = sample_input_paths(spec, cfg.path_len(), cfg.particles, cfg.seed)?;
    let past_len = cfg.horizon + cfg.window;
    let particles = paths
        .into_par_iter()
        .enumerate()
        .map(|(i, path)| {
            let input = split_path(path, past_len, d)?;
            let member = PullbackConfig {
                horizon: past_len - 1,
                seed: derive_seed(solver.seed, streams::INIT_STATES, i as u64),
                ..solver.clone()
            };
            let fiber = solution_fibers(sys, &input.past, &member).map_err(|e| match e {
                Error::Unresolved(_) => Error::EspFailure {
                    index: i,
                    diameter: f64::INFINITY,
                },
                other => other,
            })?;
            if fiber.index() != 1 || fiber.diverged > 0 {
                return Err(Error::EspFailure {
                    index: i,
                    diameter: fiber.max_diameter,
                });
            }
            Ok(Particle {
                state: Some(fiber.representatives[0].take_recent(cfg.window)?),
                input: ExtendedInput::new(input.past.take_recent(cfg.window)?, input.future())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleMeasure::uniform(particles)?.with_meta(cfg.horizon, cfg.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// States and inputs; ground distance `d_X + d_U`.
    #[default]
    Full,
    States,
    /// Input past and future as one window.
    Inputs,
    InputPast,
    StateAt0,
    InputAt0,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransportMode {
    Exact,
    Sliced {
        projections: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Exact when the cost matrix fits, sliced with 128 projections otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WassersteinOptions {
    #[serde(default = "one")]
    pub p: f64,
    #[serde(default)]
    pub projection: Projection,
    #[serde(default)]
    pub mode: TransportMode,
    /// Ground metric on each window part.
    #[serde(default)]
    pub metric: Metric,
}

fn one() -> f64 {
    1.0
}

impl Default for WassersteinOptions {
    fn default() -> Self {
        WassersteinOptions {
            p: 1.0,
            projection: Projection::Full,
            mode: TransportMode::Auto,
            metric: Metric::default(),
        }
    }
}

impl WassersteinOptions {
    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    pub fn with_mode(mut self, mode: TransportMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }
}

/// Projected particles as flat vectors made of `(dim, len)` window parts.
struct Projected {
    points: Vec<Vec<f64>>,
    parts: Vec<(usize, usize)>,
}

fn project(mu: &ParticleMeasure, proj: Projection) -> Result<Projected> {
    let need_states = || {
        if mu.has_states() {
            Ok(())
        } else {
            invalid("projection needs states but the measure is input-only")
        }
    };
    let p0 = &mu.particles[0];
    let parts = match proj {
        Projection::Full => {
            let mut v = Vec::new();
            if let Some(s) = &p0.state {
                v.push((s.dim(), s.len()));
            }
            v.push((p0.input.dim(), p0.input.past.len() + p0.input.future_len()));
            v
        }
        Projection::States => {
            need_states()?;
            let s = p0.state.as_ref().expect("states");
            vec![(s.dim(), s.len())]
        }
        Projection::Inputs => vec![(p0.input.dim(), p0.input.past.len() + p0.input.future_len())],
        Projection::InputPast => vec![(p0.input.dim(), p0.input.past.len())],
        Projection::StateAt0 => {
            need_states()?;
            vec![(p0.state.as_ref().expect("states").dim(), 1)]
        }
        Projection::InputAt0 => vec![(p0.input.dim(), 1)],
    };
    let points = mu
        .particles
        .iter()
        .map(|p| match proj {
            Projection::Full => {
                let mut v = p.state.as_ref().map(|s| s.as_flat().to_vec()).unwrap_or_default();
                v.extend_from_slice(p.input.full_window().as_flat());
                v
            }
            Projection::States => p.state.as_ref().expect("states").as_flat().to_vec(),
            Projection::Inputs => p.input.full_window().as_flat().to_vec(),
            Projection::InputPast => p.input.past.as_flat().to_vec(),
            Projection::StateAt0 => p.state.as_ref().expect("states").newest().to_vec(),
            Projection::InputAt0 => p.input.past.newest().to_vec(),
        })
        .collect();
    Ok(Projected { points, parts })
}

fn ground(metric: &Metric, parts: &[(usize, usize)], a: &[f64], b: &[f64]) -> f64 {
    let mut at = 0;
    let mut total = 0.0;
    for &(dim, len) in parts {
        let n = dim * len;
        total += metric.dist_flat(&a[at..at + n], &b[at..at + n], dim);
        at += n;
    }
    total
}

/// Euclidean embedding for sliced transport: entry at lag `k` scaled by the
/// metric weight of that lag.
fn embed(metric: &Metric, parts: &[(usize, usize)], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut at = 0;
    for &(dim, len) in parts {
        for j in 0..len {
            let lag = (len - 1 - j) as i32;
            let w = match metric.weights {
                WeightSeq::Geometric { rate } => rate.powi(lag),
                WeightSeq::Product => 0.5f64.powi(lag),
            };
            out.extend(x[at + j * dim..at + (j + 1) * dim].iter().map(|v| w * v));
        }
        at += dim * len;
    }
    out
}

/// Wasserstein-`p` distance between two particle measures.
pub fn wasserstein(mu: &ParticleMeasure, nu: &ParticleMeasure, opts: &WassersteinOptions) -> Result<f64> {
    opts.metric.validate()?;
    let a = project(mu, opts.projection)?;
    let b = project(nu, opts.projection)?;
    if a.parts != b.parts {
        return shape_err(format!("measures project to different shapes {:?} and {:?}", a.parts, b.parts));
    }
    let exact = match opts.mode {
        TransportMode::Exact => true,
        TransportMode::Sliced { .. } => false,
        TransportMode::Auto => mu.len().saturating_mul(nu.len()) <= EXACT_LIMIT,
    };
    if exact {
        let parts = a.parts.clone();
        let metric = opts.metric;
        wasserstein_exact(
            &Discrete { points: &a.points, weights: &mu.weights },
            &Discrete { points: &b.points, weights: &nu.weights },
            opts.p,
            move |x, y| ground(&metric, &parts, x, y),
        )
    } else {
        let (projections, seed) = match opts.mode {
            TransportMode::Sliced { projections, seed } => (projections, seed),
            _ => (128, 0),
        };
        let ea: Vec<Vec<f64>> = a.points.iter().map(|x| embed(&opts.metric, &a.parts, x)).collect();
        let eb: Vec<Vec<f64>> = b.points.iter().map(|x| embed(&opts.metric, &b.parts, x)).collect();
        wasserstein_sliced(
            &Discrete { points: &ea, weights: &mu.weights },
            &Discrete { points: &eb, weights: &nu.weights },
            opts.p,
            projections,
            seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionCheck {
    pub is_solution: bool,
    pub max_residual: f64,
    pub worst_particle: Option<usize>,
}

fn covered(p: &Particle) -> Option<(Window, Window)> {
    let s = p.state.as_ref()?;
    let m = s.len().min(p.input.past.len());
    if m < 2 {
        return None;
    }
    Some((s.take_recent(m).ok()?, p.input.past.take_recent(m).ok()?))
}

/// Largest state-equation defect over particles and covered times.
pub fn check_stochastic_solution(sys: &SystemInstance, mu: &ParticleMeasure, tol: f64) -> Result<SolutionCheck> {
    if !mu.has_states() {
        return invalid("check needs particles with states");
    }
    let residuals = mu
        .particles
        .par_iter()
        .map(|p| match covered(p) {
            Some((x, u)) => sys.residual(&x, &u),
            None => Ok(0.0),
        })
        .collect::<Result<Vec<f64>>>()?;
    let (worst, max_residual) = residuals
        .iter()
        .copied()
        .enumerate()
        .fold((None, 0.0), |acc, (i, r)| if r > acc.1 || r.is_nan() { (Some(i), r) } else { acc });
    Ok(SolutionCheck {
        is_solution: max_residual <= tol,
        max_residual,
        worst_particle: worst,
    })
}

/// Transport distance between the images of `μ` under `F` and under the
/// inclusion, both truncated to the common window.
pub fn fixedpoint_residual(sys: &SystemInstance, mu: &ParticleMeasure, opts: &WassersteinOptions) -> Result<f64> {
    if !mu.has_states() {
        return invalid("fixed-point residual needs particles with states");
    }
    let pairs = mu
        .particles
        .par_iter()
        .map(|p| {
            let (x, u) = covered(p).ok_or_else(|| Error::InvalidArgument("windows shorter than 2 entries".into()))?;
            let m = x.len() - 1;
            let image = sys.eval_F(&x, &u, None)?;
            let u_t = ExtendedInput::without_future(u.take_recent(m)?);
            Ok((
                Particle {
                    state: Some(image),
                    input: u_t.clone(),
                },
                Particle {
                    state: Some(x.take_recent(m)?),
                    input: u_t,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (img, inc): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let a = ParticleMeasure::new(img, mu.weights.clone())?;
    let b = ParticleMeasure::new(inc, mu.weights.clone())?;
    wasserstein(&a, &b, opts)
}

/// `n` particles whose state windows of length `len` have iid uniform ±1
/// entries and whose inputs are 0. Under the identity map this law is
/// shift invariant, so it satisfies the state equation in distribution,
/// while almost no realization is a solution.
pub fn product_sign_measure(n: usize, len: usize, seed: u64) -> Result<ParticleMeasure> {
    if n == 0 || len == 0 {
        return invalid("product measure needs positive size and length");
    }
    let particles = (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, streams::INIT_STATES, i as u64);
            let x: Vec<f64> = (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            Ok(Particle {
                state: Some(Window::scalar(&x)?),
                input: ExtendedInput::without_future(Window::constant(&[0.0], len)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleMeasure::uniform(particles)?.with_meta(0, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// 95th percentile of the double-draw distances, at least [`ENVELOPE_FLOOR`].
    pub threshold: f64,
    pub mean: f64,
    pub max: f64,
    pub samples: Vec<f64>,
}

/// Calibrates the Monte-Carlo noise of a distance by drawing the same law
/// twice with independent seeds, `pairs` times.
pub fn two_sample_envelope<D, M>(pairs: usize, seed: u64, draw: D, dist: M) -> Result<Envelope>
where
    D: Fn(u64) -> Result<ParticleMeasure> + Sync,
    M: Fn(&ParticleMeasure, &ParticleMeasure) -> Result<f64> + Sync,
{
    if pairs == 0 {
        return invalid("envelope needs at least one pair");
    }
    let mut samples = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let a = draw(derive_seed(seed, streams::ENVELOPE, 2 * i as u64))?;
            let b = draw(derive_seed(seed, streams::ENVELOPE, 2 * i as u64 + 1))?;
            dist(&a, &b)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = samples.iter().sum::<f64>() / pairs as f64;
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let pos = 0.95 * (pairs - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let q = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    let max = *sorted.last().expect("nonempty");
    samples.shrink_to_fit();
    Ok(Envelope {
        threshold: q.max(ENVELOPE_FLOOR),
        mean,
        max,
        samples,
    })
}

/// `μ` and its `k`-step shift, both truncated to the overlapping windows.
fn shifted_pair(mu: &ParticleMeasure, k: usize) -> Result<(ParticleMeasure, ParticleMeasure)> {
    let p0 = &mu.particles[0];
    let len = p0.state.as_ref().map(|s| s.len()).unwrap_or(usize::MAX).min(p0.input.past.len());
    if k >= len {
        return invalid(format!("windows of length {len} have no overlap under a {k}-step shift"));
    }
    let keep = len - k;
    let mut orig = Vec::with_capacity(mu.len());
    let mut shifted = Vec::with_capacity(mu.len());
    for p in &mu.particles {
        let u = p.input.past.take_recent(len)?;
        let s = p.state.as_ref().map(|s| s.take_recent(len)).transpose()?;
        orig.push(Particle {
            state: s.as_ref().map(|s| s.take_recent(keep)).transpose()?,
            input: ExtendedInput::without_future(u.take_recent(keep)?),
        });
        let drop = |w: &Window| if k == 0 { Ok(w.clone()) } else { w.drop_right(k) };
        shifted.push(Particle {
            state: s.as_ref().map(drop).transpose()?,
            input: ExtendedInput::without_future(drop(&u)?),
        });
    }
    Ok((
        ParticleMeasure::new(orig, mu.weights.clone())?,
        ParticleMeasure::new(shifted, mu.weights.clone())?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicityReport {
    pub period: usize,
    pub distance: f64,
    /// Distances at the proper divisors of the period.
    pub divisors: Vec<(usize, f64)>,
}

/// Distance between `μ` and `T_*^k μ`, with the same check at every proper
/// divisor of `k`.
pub fn periodicity_check(mu: &ParticleMeasure, k: usize, opts: &WassersteinOptions) -> Result<PeriodicityReport> {
    let dist_at = |j: usize| -> Result<f64> {
        if j == 0 {
            return Ok(0.0);
        }
        let (a, b) = shifted_pair(mu, j)?;
        wasserstein(&a, &b, opts)
    };
    let distance = dist_at(k)?;
    let divisors = (1..k)
        .filter(|d| k.is_multiple_of(*d))
        .map(|d| Ok((d, dist_at(d)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PeriodicityReport {
        period: k,
        distance,
        divisors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochFmpRow {
    pub input_dist: f64,
    pub solution_dist: f64,
    /// `solution_dist / input_dist`; `None` when the inputs coincide.
    pub ratio: Option<f64>,
}

/// Pullback measures for two input laws under common random numbers and
/// the transport distances between their input and state marginals.
pub fn stoch_fmp_probe(
    sys: &SystemInstance,
    spec: &InputLawSpec,
    perturbed: &InputLawSpec,
    cfg: &StochConfig,
    opts: &WassersteinOptions,
) -> Result<StochFmpRow> {
    let a = pullback_measure(sys, spec, cfg)?.measure;
    let b = pullback_measure(sys, perturbed, cfg)?.measure;
    let input_dist = wasserstein(&a, &b, &opts.clone().with_projection(Projection::Inputs))?;
    let solution_dist = wasserstein(&a, &b, &opts.clone().with_projection(Projection::States))?;
    Ok(StochFmpRow {
        input_dist,
        solution_dist,
        ratio: (input_dist > 0.0).then(|| solution_dist / input_dist),
    })
}
