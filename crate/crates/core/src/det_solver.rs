//! Deterministic solution sets approximated by pullback ensembles.
//!
//! A solution of the state equation for an input window is recovered by
//! starting `M` trajectories at time `-n` from points of an initial box and
//! feeding them the input suffix `u_{-n+1}, ..., u_0`. The time-0 end of the
//! ensemble approximates the set of solutions; single-linkage clustering at
//! tolerance `cluster_tol` turns it into a finite [`SolutionFiber`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::input_law::InputLawSpec;
use crate::linalg::{norm_inf, spectral_radius};
use crate::lowdisc::box_ensemble;
use crate::seed::{derive_seed, rng_for, streams};
use crate::sequences::{sup_dist, ExtendedInput, Metric, NormOrder, WeightSeq, Window};
use crate::systems::SystemInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PullbackConfig {
    pub horizon: usize,
    pub ensemble_size: usize,
    /// Per-coordinate `[low, high]` bounds for initial states.
    pub init_box: Vec<[f64; 2]>,
    #[serde(default = "default_cluster_tol")]
    pub cluster_tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Metric on state windows used for clustering and distances.
    #[serde(default)]
    pub metric: Metric,
}

fn default_cluster_tol() -> f64 {
    1e-4
}

impl PullbackConfig {
    pub fn new(horizon: usize, ensemble_size: usize, init_box: Vec<[f64; 2]>) -> Self {
        PullbackConfig {
            horizon,
            ensemble_size,
            init_box,
            cluster_tol: default_cluster_tol(),
            seed: 0,
            metric: Metric::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cluster_tol(mut self, tol: f64) -> Self {
        self.cluster_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return invalid("horizon must be at least 1");
        }
        if self.ensemble_size < 2 {
            return invalid("ensemble_size must be at least 2");
        }
        if !(self.cluster_tol > 0.0) {
            return invalid("cluster_tol must be positive");
        }
        if self.init_box.is_empty() {
            return invalid("init_box must be nonempty");
        }
        if self.init_box.iter().any(|[lo, hi]| !(lo <= hi)) {
            return invalid("init_box bounds must satisfy low <= high");
        }
        self.metric.validate()
    }

    /// The refinement used for stability checks: doubled ensemble and horizon.
    pub fn refined(&self) -> Self {
        PullbackConfig {
            horizon: 2 * self.horizon,
            ensemble_size: 2 * self.ensemble_size,
            ..self.clone()
        }
    }
}

/// Terminal segments of a pullback ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PullbackEnsemble {
    /// Trajectory windows `x_{-n}, ..., x_0` of members that stayed finite,
    /// with their ensemble index.
    pub members: Vec<(usize, Window)>,
    /// `(member index, step)` of members that produced non-finite states.
    pub diverged: Vec<(usize, usize)>,
    pub horizon: usize,
}

fn check_input(sys: &SystemInstance, input: &Window, horizon: usize) -> Result<()> {
    if input.dim() != sys.dims().input {
        return shape_err(format!(
            "input dimension {} does not match system input dimension {}",
            input.dim(),
            sys.dims().input
        ));
    }
    if input.len() < horizon {
        return invalid(format!("input window of length {} is shorter than horizon {horizon}", input.len()));
    }
    Ok(())
}

/// Runs the state equation from `x_init` at time `-n` with the `n` most
/// recent inputs. Returns the trajectory or the failing step.
fn pull_one(sys: &SystemInstance, input: &Window, n: usize, x_init: &[f64]) -> std::result::Result<Window, usize> {
    let mut traj = Window::from_flat(x_init.len(), x_init.to_vec()).map_err(|_| 0usize)?;
    let mut x = x_init.to_vec();
    for step in 1..=n {
        x = sys.eval_f(&x, input.lag(n - step)).map_err(|_| step)?;
        traj.push(&x).map_err(|_| step)?;
    }
    Ok(traj)
}

pub fn pullback_ensemble(sys: &SystemInstance, input: &Window, cfg: &PullbackConfig) -> Result<PullbackEnsemble> {
    cfg.validate()?;
    check_input(sys, input, cfg.horizon)?;
    if cfg.init_box.len() != sys.dims().state {
        return shape_err(format!(
            "init_box has {} coordinates, state dimension is {}",
            cfg.init_box.len(),
            sys.dims().state
        ));
    }
    let inits = box_ensemble(&cfg.init_box, cfg.ensemble_size, cfg.seed)?;
    let outcomes: Vec<_> = inits
        .par_iter()
        .map(|x0| pull_one(sys, input, cfg.horizon, x0))
        .collect();
    let mut members = Vec::with_capacity(outcomes.len());
    let mut diverged = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(w) => members.push((i, w)),
            Err(step) => diverged.push((i, step)),
        }
    }
    Ok(PullbackEnsemble {
        members,
        diverged,
        horizon: cfg.horizon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionFiber {
    /// One genuine trajectory window per cluster (the member nearest the
    /// cluster mean), sorted lexicographically by time-0 state.
    pub representatives: Vec<Window>,
    /// Cluster index per ensemble member; `None` for diverged members.
    pub memberships: Vec<Option<usize>>,
    pub cluster_sizes: Vec<usize>,
    pub diameters: Vec<f64>,
    pub max_diameter: f64,
    pub horizon: usize,
    pub diverged: usize,
    /// False when some cluster is wider than the tolerance.
    pub resolved: bool,
}

impl SolutionFiber {
    pub fn index(&self) -> usize {
        self.representatives.len()
    }

    pub fn time_zero_states(&self) -> Vec<Vec<f64>> {
        self.representatives.iter().map(|w| w.newest().to_vec()).collect()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Largest pairwise distance within a group of windows. Sup-type metrics
/// commute with the pairwise max, so their diameter is a max of
/// per-coordinate ranges.
fn group_diameter(metric: &Metric, windows: &[&Window]) -> f64 {
    if windows.len() < 2 {
        return 0.0;
    }
    match (metric.weights, metric.p) {
        (WeightSeq::Geometric { rate }, NormOrder::Infinity) => {
            let w0 = windows[0];
            let (len, dim) = (w0.len() - 1, w0.dim());
            let mut best: f64 = 0.0;
            let mut weight = 1.0;
            for k in 0..len {
                for c in 0..dim {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for w in windows {
                        let v = w.lag(k)[c];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    best = best.max(weight * (hi - lo));
                }
                weight *= rate;
            }
            best
        }
        _ => {
            let mut best: f64 = 0.0;
            for i in 0..windows.len() {
                for j in 0..i {
                    best = best.max(metric.dist_flat(solved(windows[i]), solved(windows[j]), windows[i].dim()));
                }
            }
            best
        }
    }
}

/// The arbitrary starting point `x_{-n}` is not part of the solution
/// estimate; distances use `x_{-n+1}, ..., x_0` only.
fn solved(w: &Window) -> &[f64] {
    &w.as_flat()[w.dim()..]
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Single-linkage clustering of an ensemble at tolerance `tol`.
pub fn cluster_ensemble(ens: &PullbackEnsemble, metric: &Metric, tol: f64, total_members: usize) -> SolutionFiber {
    let m = ens.members.len();
    let mut uf = UnionFind((0..m).collect());
    for i in 0..m {
        for j in 0..i {
            if uf.find(i) == uf.find(j) {
                continue;
            }
            let (a, b) = (&ens.members[i].1, &ens.members[j].1);
            // Every supported metric is at least min(1, |Δ_0|) at lag 0.
            if sup_dist(a.newest(), b.newest()).min(1.0) > tol {
                continue;
            }
            if metric.dist_flat(solved(a), solved(b), a.dim()) <= tol {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..m {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    struct Cluster {
        rep: Window,
        members: Vec<usize>,
        diameter: f64,
    }
    let mut clusters: Vec<Cluster> = groups
        .into_values()
        .map(|idx| {
            let ws: Vec<&Window> = idx.iter().map(|&i| &ens.members[i].1).collect();
            let dim = solved(ws[0]).len();
            let mut mean = vec![0.0; dim];
            for w in &ws {
                for (m, v) in mean.iter_mut().zip(solved(w)) {
                    *m += v / ws.len() as f64;
                }
            }
            let rep = ws
                .iter()
                .min_by(|a, b| {
                    metric
                        .dist_flat(solved(a), &mean, a.dim())
                        .total_cmp(&metric.dist_flat(solved(b), &mean, b.dim()))
                })
                .map(|w| (*w).clone())
                .expect("nonempty group");
            Cluster {
                diameter: group_diameter(metric, &ws),
                rep,
                members: idx,
            }
        })
        .collect();
    clusters.sort_by(|a, b| lex_cmp(a.rep.newest(), b.rep.newest()));
    let mut memberships = vec![None; total_members];
    for (c, cl) in clusters.iter().enumerate() {
        for &i in &cl.members {
            memberships[ens.members[i].0] = Some(c);
        }
    }
    let diameters: Vec<f64> = clusters.iter().map(|c| c.diameter).collect();
    let max_diameter = diameters.iter().copied().fold(0.0, f64::max);
    SolutionFiber {
        resolved: !clusters.is_empty() && max_diameter <= tol,
        cluster_sizes: clusters.iter().map(|c| c.members.len()).collect(),
        representatives: clusters.into_iter().map(|c| c.rep).collect(),
        memberships,
        diameters,
        max_diameter,
        horizon: ens.horizon,
        diverged: ens.diverged.len(),
    }
}

fn fibers_unchecked(sys: &SystemInstance, input: &Window, cfg: &PullbackConfig) -> Result<SolutionFiber> {
    let ens = pullback_ensemble(sys, input, cfg)?;
    Ok(cluster_ensemble(&ens, &cfg.metric, cfg.cluster_tol, cfg.ensemble_size))
}

/// Clustered pullback ensemble; fails with [`Error::Unresolved`] when a
/// cluster is wider than the tolerance.
pub fn solution_fibers(sys: &SystemInstance, input: &Window, cfg: &PullbackConfig) -> Result<SolutionFiber> {
    let fiber = fibers_unchecked(sys, input, cfg)?;
    if !fiber.resolved {
        return Err(Error::Unresolved(format!(
            "max cluster diameter {:e} exceeds tolerance {:e} ({} clusters, {} diverged)",
            fiber.max_diameter,
            cfg.cluster_tol,
            fiber.index(),
            fiber.diverged
        )));
    }
    Ok(fiber)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EspReport {
    pub holds: bool,
    /// Sup-norm diameter of the time-0 ensemble after `k` steps, `k = 0..=n`.
    pub diameter_curve: Vec<f64>,
    pub monotone: bool,
    pub final_diameter: f64,
    pub clusters: usize,
    pub diverged: usize,
}

/// Sup-norm diameter of the ensemble at each pullback step.
pub fn diameter_curve(ens: &PullbackEnsemble) -> Vec<f64> {
    let Some((_, first)) = ens.members.first() else {
        return Vec::new();
    };
    let (steps, dim) = (first.len(), first.dim());
    (0..steps)
        .map(|k| {
            let lag = steps - 1 - k;
            (0..dim)
                .map(|c| {
                    let (lo, hi) = ens.members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, w)| {
                        let v = w.lag(lag)[c];
                        (lo.min(v), hi.max(v))
                    });
                    hi - lo
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn esp_check(sys: &SystemInstance, input: &Window, cfg: &PullbackConfig) -> Result<EspReport> {
    let ens = pullback_ensemble(sys, input, cfg)?;
    let curve = diameter_curve(&ens);
    let fiber = cluster_ensemble(&ens, &cfg.metric, cfg.cluster_tol, cfg.ensemble_size);
    let final_diameter = curve.last().copied().unwrap_or(f64::INFINITY);
    Ok(EspReport {
        holds: fiber.resolved && fiber.index() == 1 && final_diameter < cfg.cluster_tol && ens.diverged.is_empty(),
        monotone: curve.windows(2).all(|w| w[1] <= w[0]),
        final_diameter,
        clusters: fiber.index(),
        diverged: ens.diverged.len(),
        diameter_curve: curve,
    })
}

/// Geometric contraction rate fitted to a diameter curve: `exp` of the
/// least-squares slope of `ln d_k` over the second half of the steps where
/// `d_k` is above `floor`.
pub fn contraction_rate(curve: &[f64], floor: f64) -> Option<f64> {
    let valid = curve.iter().take_while(|d| **d > floor).count();
    if valid < 4 {
        return None;
    }
    let start = valid / 2;
    let pts: Vec<(f64, f64)> = (start..valid).map(|k| (k as f64, curve[k].ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EchoIndexReport {
    pub index: usize,
    /// Same index under doubled ensemble and horizon, both runs resolved.
    pub stable: bool,
    pub resolved: bool,
    pub refined_index: usize,
    pub refined_resolved: bool,
    pub diameters: Vec<f64>,
    pub representatives: Vec<Vec<f64>>,
    pub cluster_sizes: Vec<usize>,
    pub diverged: usize,
    pub horizon: usize,
    pub ensemble_size: usize,
}

/// Echo index with a refinement check; needs `input.len() >= 2 * horizon`.
pub fn echo_index(sys: &SystemInstance, input: &Window, cfg: &PullbackConfig) -> Result<EchoIndexReport> {
    let refined_cfg = cfg.refined();
    check_input(sys, input, refined_cfg.horizon)?;
    let base = fibers_unchecked(sys, input, cfg)?;
    let refined = fibers_unchecked(sys, input, &refined_cfg)?;
    Ok(EchoIndexReport {
        index: base.index(),
        stable: base.resolved && refined.resolved && base.index() == refined.index(),
        resolved: base.resolved,
        refined_index: refined.index(),
        refined_resolved: refined.resolved,
        representatives: base.time_zero_states(),
        diameters: base.diameters.clone(),
        cluster_sizes: base.cluster_sizes.clone(),
        diverged: base.diverged,
        horizon: cfg.horizon,
        ensemble_size: cfg.ensemble_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub lag: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmpRow {
    pub lag: usize,
    pub magnitude: f64,
    /// Hausdorff distance between representative windows in the metric.
    pub response: f64,
    /// Hausdorff distance between time-0 representatives (sup norm).
    pub final_state_response: f64,
    pub base_index: usize,
    pub perturbed_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmpReport {
    pub rows: Vec<FmpRow>,
}

/// Hausdorff distance between two finite sets under `d`.
pub fn hausdorff<T>(a: &[T], b: &[T], d: impl Fn(&T, &T) -> f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { f64::INFINITY };
    }
    let directed = |x: &[T], y: &[T]| {
        x.iter()
            .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// Adds `magnitude` to every component of the input at `lag`.
pub fn perturb_input(input: &Window, p: Perturbation) -> Result<Window> {
    if p.lag >= input.len() {
        return invalid(format!("perturbation lag {} outside window of length {}", p.lag, input.len()));
    }
    let mut data = input.as_flat().to_vec();
    let d = input.dim();
    let i = (input.len() - 1 - p.lag) * d;
    for v in &mut data[i..i + d] {
        *v += p.magnitude;
    }
    Window::from_flat(d, data)
}

pub fn fmp_probe(
    sys: &SystemInstance,
    input: &Window,
    perturbations: &[Perturbation],
    cfg: &PullbackConfig,
    metric: &Metric,
) -> Result<FmpReport> {
    let base = solution_fibers(sys, input, cfg)?;
    let rows = perturbations
        .iter()
        .map(|&p| {
            let pert = solution_fibers(sys, &perturb_input(input, p)?, cfg)?;
            let response = hausdorff(&base.representatives, &pert.representatives, |a, b| {
                metric.dist(a, b).unwrap_or(f64::INFINITY)
            });
            let final_state_response = hausdorff(&base.time_zero_states(), &pert.time_zero_states(), |a, b| sup_dist(a, b));
            Ok(FmpRow {
                lag: p.lag,
                magnitude: p.magnitude,
                response,
                final_state_response,
                base_index: base.index(),
                perturbed_index: pert.index(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FmpReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    /// Echo index -> number of resolved samples with that index.
    pub histogram: BTreeMap<usize, usize>,
    pub unresolved: usize,
    /// Resolved samples whose index changed under refinement.
    pub unstable: usize,
    pub samples: usize,
    pub dominant: Option<usize>,
}

/// Echo-index histogram over `n_samples` inputs of length `2 * horizon`
/// drawn from `law`.
pub fn generic_constancy_scan(
    sys: &SystemInstance,
    law: &InputLawSpec,
    n_samples: usize,
    cfg: &PullbackConfig,
) -> Result<ScanReport> {
    let d = law.validate()?;
    if d != sys.dims().input {
        return shape_err("input law dimension does not match the system");
    }
    let len = 2 * cfg.horizon;
    let reports: Vec<EchoIndexReport> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(cfg.seed, streams::SCAN, i as u64);
            let input = Window::new(d, law.sample_path(len, &mut rng))?;
            let member_cfg = PullbackConfig {
                seed: derive_seed(cfg.seed, streams::INIT_STATES, i as u64),
                ..cfg.clone()
            };
            echo_index(sys, &input, &member_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut histogram = BTreeMap::new();
    let (mut unresolved, mut unstable) = (0, 0);
    for r in &reports {
        if !r.resolved {
            unresolved += 1;
            continue;
        }
        if !r.stable {
            unstable += 1;
        }
        *histogram.entry(r.index).or_insert(0) += 1;
    }
    let dominant = histogram.iter().max_by_key(|(_, c)| **c).map(|(k, _)| *k);
    Ok(ScanReport {
        histogram,
        unresolved,
        unstable,
        samples: n_samples,
        dominant,
    })
}

/// States `x_1, ..., x_T` obtained by running forward from `x_init` (the
/// state at time 0) on the future part of `input`.
pub fn forward_trajectory(
    sys: &SystemInstance,
    input: &ExtendedInput,
    x_init: &[f64],
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if input.future_len() < steps {
        return invalid(format!("{} future inputs available, {steps} steps requested", input.future_len()));
    }
    let mut x = x_init.to_vec();
    let mut path = Vec::with_capacity(steps);
    for t in 1..=steps {
        x = sys.eval_f(&x, input.future_at(t)).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence(format!("forward trajectory left the reals at step {t}")),
            other => other,
        })?;
        path.push(x.clone());
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedForm {
    pub states: Window,
    /// Bound on the neglected terms of the series at every time.
    pub tail_bound: f64,
    pub spectral_radius: f64,
    pub terms: usize,
}

const CLOSED_FORM_TAIL: f64 = 1e-12;
const MAX_TERMS: usize = 1_000_000;

/// `x_t = sum_{s >= 0} A^s B u_{t-s}`, with the input extended into the
/// unseen past by repeating its oldest entry. The series is cut once the
/// remaining terms are provably below `1e-12`.
pub fn linear_closed_form(a: &DMatrix<f64>, b: &DMatrix<f64>, input: &Window) -> Result<ClosedForm> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != input.dim() {
        return shape_err("A must be n x n and B n x d with d the input dimension");
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::SpectralRadius(rho));
    }
    // Some power A^m is a strict contraction in the infinity norm.
    let mut am = a.clone();
    let mut m = 1;
    while norm_inf(&am) >= 1.0 {
        am = &am * a;
        m += 1;
        if m > MAX_TERMS {
            return Err(Error::SpectralRadius(rho));
        }
    }
    let q = norm_inf(&am);
    let umax = input.as_flat().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    // Terms P_s = A^s B; keep going until the block bound on the tail
    // sum_{s >= K} ||A^s B|| <= (sum_{r < m} ||A^{K+r} B||) / (1 - q) is small.
    let mut powers: Vec<DMatrix<f64>> = vec![b.clone()];
    let mut block: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    block.push_back(norm_inf(b));
    let mut tail;
    loop {
        let next = a * powers.last().expect("nonempty");
        let nn = norm_inf(&next);
        powers.push(next);
        block.push_back(nn);
        if block.len() > m {
            block.pop_front();
        }
        tail = block.iter().sum::<f64>() / (1.0 - q) * umax;
        // The bound covers terms from index powers.len() - m onwards; require
        // the newest m terms to be part of the tail estimate.
        if block.len() == m && tail <= CLOSED_FORM_TAIL {
            break;
        }
        if powers.len() > MAX_TERMS {
            return invalid("closed form series did not reach its tail bound");
        }
    }
    let keep = powers.len() - m;
    let len = input.len();
    let d = input.dim();
    let mut data = Vec::with_capacity(len * n);
    for k in (0..len).rev() {
        // time -k
        let mut x = DVector::zeros(n);
        for (s, p) in powers.iter().take(keep).enumerate() {
            let lag = (k + s).min(len - 1);
            x += p * DVector::from_column_slice(input.lag(lag));
        }
        data.extend(x.iter());
    }
    let _ = d;
    Ok(ClosedForm {
        states: Window::from_flat(n, data)?,
        tail_bound: tail,
        spectral_radius: rho,
        terms: keep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_linear(a: f64, b: f64) -> SystemInstance {
        SystemInstance::linear(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap()
    }

    fn box3() -> Vec<[f64; 2]> {
        vec![[-3.0, 3.0]]
    }

    #[test]
    fn pullback_linear_constant_input() {
        let sys = scalar_linear(0.5, 1.0);
        let input = Window::constant(&[1.0], 60).unwrap();
        let ens = pullback_ensemble(&sys, &input, &PullbackConfig::new(60, 16, box3())).unwrap();
        assert_eq!(ens.members.len(), 16);
        for (_, w) in &ens.members {
            assert_eq!(w.len(), 61);
            assert!((w.newest()[0] - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn pullback_kloeden_contracting_and_three_branches() {
        let k = SystemInstance::kloeden();
        let ens = pullback_ensemble(&k, &Window::constant(&[0.5], 80).unwrap(), &PullbackConfig::new(80, 32, box3())).unwrap();
        assert!(ens.members.iter().all(|(_, w)| w.newest()[0].abs() < 1e-8));
        let ens = pullback_ensemble(&k, &Window::constant(&[1.5], 200).unwrap(), &PullbackConfig::new(200, 64, box3())).unwrap();
        for (_, w) in &ens.members {
            let x = w.newest()[0];
            assert!([-0.5, 0.0, 0.5].iter().any(|c| (x - c).abs() < 1e-8), "{x}");
        }
    }

    #[test]
    fn pullback_is_deterministic_and_validates() {
        let k = SystemInstance::kloeden();
        let input = Window::constant(&[1.5], 50).unwrap();
        let cfg = PullbackConfig::new(50, 20, box3()).with_seed(4);
        assert_eq!(pullback_ensemble(&k, &input, &cfg).unwrap(), pullback_ensemble(&k, &input, &cfg).unwrap());
        assert!(pullback_ensemble(&k, &input, &PullbackConfig::new(51, 20, box3())).is_err());
        assert!(pullback_ensemble(&k, &input, &PullbackConfig::new(0, 20, box3())).is_err());
        assert!(pullback_ensemble(&k, &input, &PullbackConfig::new(10, 1, box3())).is_err());
        assert!(pullback_ensemble(&k, &input, &PullbackConfig::new(10, 4, vec![[0.0, 1.0], [0.0, 1.0]])).is_err());
    }

    #[test]
    fn divergent_members_are_counted() {
        // x -> 10 x + u blows up from every start except the fixed point.
        let sys = scalar_linear(1e3, 0.0);
        let input = Window::constant(&[0.0], 200).unwrap();
        let ens = pullback_ensemble(&sys, &input, &PullbackConfig::new(200, 8, vec![[-1.0, 1.0]])).unwrap();
        // only the center (exactly 0) survives
        assert_eq!(ens.members.len(), 1);
        assert_eq!(ens.diverged.len(), 7);
    }

    #[test]
    fn fibers_kloeden() {
        let k = SystemInstance::kloeden();
        let f = solution_fibers(&k, &Window::constant(&[1.5], 200).unwrap(), &PullbackConfig::new(200, 64, box3())).unwrap();
        assert_eq!(f.index(), 3);
        let xs: Vec<f64> = f.time_zero_states().iter().map(|v| v[0]).collect();
        for (x, e) in xs.iter().zip([-0.5, 0.0, 0.5]) {
            assert!((x - e).abs() < 1e-8);
        }
        assert!(f.max_diameter <= 1e-4);
        assert_eq!(f.memberships.iter().flatten().count(), 64);
        let f = solution_fibers(&k, &Window::constant(&[0.5], 80).unwrap(), &PullbackConfig::new(80, 64, box3())).unwrap();
        assert_eq!(f.index(), 1);
        assert!(f.time_zero_states()[0][0].abs() < 1e-8);
    }

    #[test]
    fn unresolved_when_not_converged() {
        // identity map never forgets: the ensemble stays spread out
        let sys = scalar_linear(1.0, 0.0);
        let input = Window::constant(&[0.0], 10).unwrap();
        let cfg = PullbackConfig::new(10, 16, vec![[0.0, 1e-4 * 15.0 * 0.5]]);
        // points closer than the tolerance but spanning more than it chain together
        let r = solution_fibers(&sys, &input, &cfg);
        assert!(matches!(r, Err(Error::Unresolved(_))), "{r:?}");
    }

    #[test]
    fn reps_are_genuine_solutions() {
        let k = SystemInstance::kloeden();
        let input = Window::constant(&[1.5], 200).unwrap();
        let f = solution_fibers(&k, &input, &PullbackConfig::new(200, 32, box3())).unwrap();
        for rep in &f.representatives {
            let u = input.take_recent(rep.len() - 1).unwrap();
            let mut x = rep.oldest().to_vec();
            for (t, ut) in u.iter().enumerate() {
                x = k.eval_f(&x, ut).unwrap();
                assert!((x[0] - rep.lag(rep.len() - 2 - t)[0]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn esp_examples() {
        let lin = scalar_linear(0.5, 1.0);
        let input = Window::constant(&[1.0], 60).unwrap();
        let r = esp_check(&lin, &input, &PullbackConfig::new(60, 16, box3())).unwrap();
        assert!(r.holds);
        assert_eq!(r.diameter_curve.len(), 61);
        assert!((r.diameter_curve[0] - 6.0).abs() < 1e-12);
        for k in 1..30 {
            let ratio = r.diameter_curve[k] / r.diameter_curve[k - 1];
            assert!((ratio - 0.5).abs() < 1e-9);
        }
        let k = SystemInstance::kloeden();
        let r = esp_check(&k, &Window::constant(&[1.5], 200).unwrap(), &PullbackConfig::new(200, 64, box3())).unwrap();
        assert!(!r.holds);
        let nil = scalar_linear(0.0, 1.0);
        let r = esp_check(&nil, &Window::scalar(&[0.3, -0.2, 0.9]).unwrap(), &PullbackConfig::new(3, 8, box3())).unwrap();
        assert!(r.diameter_curve[0] > 0.0);
        assert!(r.diameter_curve[1..].iter().all(|d| *d == 0.0));
        assert!(r.holds);
    }

    #[test]
    fn echo_index_examples() {
        let k = SystemInstance::kloeden();
        let cfg = PullbackConfig::new(200, 64, box3());
        let r = echo_index(&k, &Window::constant(&[1.5], 400).unwrap(), &cfg).unwrap();
        assert_eq!((r.index, r.stable), (3, true));
        let r = echo_index(&k, &Window::constant(&[0.5], 400).unwrap(), &cfg).unwrap();
        assert_eq!((r.index, r.stable), (1, true));
        assert!(echo_index(&k, &Window::constant(&[0.5], 399).unwrap(), &cfg).is_err());
    }

    #[test]
    fn echo_index_switching_input() {
        // u = 0.5 for 50 steps, then 1.5 for the last 150 steps; pullback from
        // before the switch. Brute force: the ensemble contracts towards 0
        // (factor <= 0.5 per step), then the positive and negative members
        // escape (growth ~1.5 and then convergence to +-0.5); only the exact
        // zero start stays at 0.
        let k = SystemInstance::kloeden();
        let mut vals = vec![0.5; 250];
        vals.extend(vec![1.5; 150]);
        let input = Window::scalar(&vals).unwrap();
        let r = echo_index(&k, &input, &PullbackConfig::new(200, 64, box3())).unwrap();
        assert_eq!(r.index, 3);
        // brute-force oracle on the same start points
        let mut starts = box_ensemble(&box3(), 64, 0).unwrap();
        for x in starts.iter_mut() {
            for t in 0..200 {
                x[0] = k.eval_f(x, &[vals[200 + t]]).unwrap()[0];
            }
        }
        let mut distinct: Vec<f64> = Vec::new();
        for x in starts {
            if !distinct.iter().any(|d| (d - x[0]).abs() < 1e-6) {
                distinct.push(x[0]);
            }
        }
        assert_eq!(distinct.len(), 3);
        // with twice the horizon the members never escape from 0.5^250
        assert_ne!(r.refined_index, 3);
        assert!(!r.stable);
    }

    #[test]
    fn fmp_linear_response() {
        let sys = scalar_linear(0.5, 1.0);
        let input = Window::constant(&[1.0], 80).unwrap();
        let cfg = PullbackConfig::new(80, 8, box3());
        let perts: Vec<Perturbation> = (0..6)
            .flat_map(|lag| [0.1, 0.0].map(|m| Perturbation { lag, magnitude: m }))
            .collect();
        let r = fmp_probe(&sys, &input, &perts, &cfg, &Metric::default()).unwrap();
        for row in &r.rows {
            let expect = 0.5f64.powi(row.lag as i32) * row.magnitude;
            assert!((row.final_state_response - expect).abs() < 1e-12, "{row:?}");
            // with weight rate 0.5 every entry after the lag contributes equally
            assert!((row.response - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fmp_kloeden_hyperbolic_branches() {
        let k = SystemInstance::kloeden();
        let input = Window::constant(&[1.5], 200).unwrap();
        let cfg = PullbackConfig::new(200, 32, box3());
        let mut finite_diff = Vec::new();
        for delta in [1e-3, 1e-4] {
            let r = fmp_probe(&k, &input, &[Perturbation { lag: 0, magnitude: delta }], &cfg, &Metric::default()).unwrap();
            let row = &r.rows[0];
            assert_eq!((row.base_index, row.perturbed_index), (3, 3));
            finite_diff.push(row.final_state_response / delta);
        }
        // d f / d u at x = 0.5 is 0.5 / 1.5
        for s in finite_diff {
            assert!((s - 1.0 / 3.0).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn scan_examples() {
        use crate::input_law::BaseDist;
        let k = SystemInstance::kloeden();
        let cfg = PullbackConfig::new(200, 32, box3()).with_seed(11);
        let law = InputLawSpec::Iid { base: BaseDist::Uniform { low: vec![1.1], high: vec![1.9] } };
        let r = generic_constancy_scan(&k, &law, 20, &cfg).unwrap();
        assert_eq!(r.histogram.keys().copied().collect::<Vec<_>>(), vec![3]);
        let law = InputLawSpec::Iid { base: BaseDist::Uniform { low: vec![0.1], high: vec![0.9] } };
        let r = generic_constancy_scan(&k, &law, 20, &cfg).unwrap();
        assert_eq!(r.histogram.get(&1), Some(&20));
        assert_eq!(r.dominant, Some(1));
    }

    #[test]
    fn forward_examples() {
        let k = SystemInstance::kloeden();
        let input = ExtendedInput::new(Window::constant(&[0.5], 10).unwrap(), vec![vec![1.5]; 150]).unwrap();
        let up = forward_trajectory(&k, &input, &[1e-6], 150).unwrap();
        let first = up.iter().position(|x| (x[0] - 0.5).abs() < 1e-3).unwrap();
        assert!(up[first..].iter().all(|x| (x[0] - 0.5).abs() < 1e-3));
        let zero = forward_trajectory(&k, &input, &[0.0], 150).unwrap();
        assert!(zero.iter().all(|x| x[0] == 0.0));
        let down = forward_trajectory(&k, &input, &[-1e-6], 150).unwrap();
        assert!((down.last().unwrap()[0] + 0.5).abs() < 1e-9);
        for (a, b) in up.iter().zip(&down) {
            assert_eq!(a[0], -b[0]);
        }
        assert!(forward_trajectory(&k, &input, &[0.1], 151).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let half = DMatrix::from_element(1, 1, 0.5);
        let input = Window::constant(&[1.0], 5).unwrap();
        let cf = linear_closed_form(&half, &one, &input).unwrap();
        assert!(cf.states.iter().all(|x| (x[0] - 2.0).abs() < 1e-11));
        assert!(cf.tail_bound <= 1e-12);
        let cf = linear_closed_form(&half, &DMatrix::zeros(1, 1), &input).unwrap();
        assert!(cf.states.iter().all(|x| x[0] == 0.0));
        let u = Window::scalar(&[0.3, -1.0, 2.0]).unwrap();
        let cf = linear_closed_form(&DMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 3.0), &u).unwrap();
        for (x, e) in cf.states.iter().zip([0.9, -3.0, 6.0]) {
            assert!((x[0] - e).abs() < 1e-15);
        }
        assert!(matches!(linear_closed_form(&one, &one, &u), Err(Error::SpectralRadius(_))));
    }

    #[test]
    fn contraction_rate_of_geometric_curve() {
        let curve: Vec<f64> = (0..50).map(|k| 3.0 * 0.7f64.powi(k)).collect();
        assert!((contraction_rate(&curve, 1e-12).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(contraction_rate(&[1.0, 0.0], 1e-12), None);
    }
}
