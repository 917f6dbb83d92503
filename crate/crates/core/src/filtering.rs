//! Bayesian state inference: Kalman filters for linear-Gaussian models
//! (plain and input-augmented), a bootstrap particle filter driven by the
//! conditional input samplers, and an exact forward recursion on grids.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::causality::ConditionalSampler;
use crate::error::{invalid, shape_err, Error, Result};
use crate::input_law::{stationary_distribution, BaseDist, InputLawSpec};
use crate::linalg::{discrete_lyapunov, matrix_to_rows, min_eigenvalue, symmetrize};
use crate::seed::{derive_seed, rng_for, streams};
use crate::sequences::{read_numeric_rows, Window};
use crate::systems::SystemInstance;

const PSD_TOL: f64 = 1e-10;
const SYM_TOL: f64 = 1e-12;
/// Largest grid accepted by [`grid_bayes_oracle`].
pub const MAX_GRID_STATES: usize = 10_000;
/// Tolerance of the indicator likelihood used for noiseless observations.
pub const EXACT_OBS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<Vec<f64>>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        GaussianBelief {
            mean: mean.as_slice().to_vec(),
            cov: matrix_to_rows(cov),
        }
    }

    pub fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov_mat(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        DMatrix::from_fn(n, n, |i, j| self.cov[i][j])
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.cov[i][i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if n == 0 || self.cov.len() != n || self.cov.iter().any(|r| r.len() != n) {
            return shape_err("belief covariance must be square and match the mean");
        }
        check_psd(&self.cov_mat(), 0)
    }
}

fn check_psd(p: &DMatrix<f64>, step: usize) -> Result<()> {
    let scale = 1.0 + p.abs().max();
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::CovarianceNotPsd(step));
    }
    for i in 0..p.nrows() {
        for j in 0..i {
            if (p[(i, j)] - p[(j, i)]).abs() > SYM_TOL * scale {
                return Err(Error::CovarianceNotPsd(step));
            }
        }
    }
    if min_eigenvalue(p) < -PSD_TOL * scale {
        return Err(Error::CovarianceNotPsd(step));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrace {
    /// Filtered beliefs after each observation; entry 0 is the prior.
    pub beliefs: Vec<GaussianBelief>,
    pub log_likelihood: f64,
    /// Effective sample size after weighting, per step (particle filters).
    #[serde(default)]
    pub ess: Vec<f64>,
    #[serde(default)]
    pub resampled: Vec<bool>,
}

impl FilterTrace {
    pub fn means(&self, c: usize) -> Vec<f64> {
        self.beliefs.iter().map(|b| b.mean[c]).collect()
    }

    /// Columns: time, means, covariance diagonal, ESS (empty for Kalman traces).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.beliefs[0].mean.len();
        let mut header = vec!["time".to_string()];
        header.extend((0..n).map(|i| format!("mean_{i}")));
        header.extend((0..n).map(|i| format!("var_{i}")));
        header.push("ess".into());
        w.write_record(&header)?;
        for (t, b) in self.beliefs.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(b.mean.iter().map(|v| format!("{v:e}")));
            row.extend(b.variances().iter().map(|v| format!("{v:e}")));
            let ess = if t == 0 { None } else { self.ess.get(t - 1) };
            row.push(ess.map(|e| format!("{e:e}")).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Observation rows `time, y_0, y_1, ...` with an optional header; rows are
/// sorted by time and the time column dropped.
pub fn read_observations_csv<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut rows = read_numeric_rows(reader)?;
    if rows.iter().any(|r| r.len() < 2) {
        return shape_err("observation rows need a time and at least one component");
    }
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    Ok(rows.into_iter().map(|r| r[1..].to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Additive noise with covariance `R`.
    #[default]
    Noisy,
    /// The `R → ∞` limit: observations are ignored.
    Unobserved,
    /// The `R → 0` limit: `W x_t = y_t` holds exactly.
    Exact,
}

/// `x_t = A x_{t-1} + B u_t`, `u_t ~ N(0, Q)`; `y_t = W x_t + v_t`, `v_t ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn scalar(a: f64, b: f64, w: f64, q: f64, r: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        LinearGaussianModel {
            a: m(a),
            b: m(b),
            w: m(w),
            q: m(q),
            r: m(r),
        }
    }

    fn validate(&self, mode: ObservationMode) -> Result<()> {
        let n = self.a.nrows();
        let d = self.b.ncols();
        let k = self.w.nrows();
        if self.a.ncols() != n || self.b.nrows() != n || self.w.ncols() != n {
            return shape_err("A must be n x n, B n x d and W k x n");
        }
        if self.q.shape() != (d, d) || self.r.shape() != (k, k) {
            return shape_err("Q must be d x d and R k x k");
        }
        check_psd(&self.q, 0).map_err(|_| Error::InvalidArgument("Q is not positive semi-definite".into()))?;
        if mode == ObservationMode::Noisy && self.r.clone().cholesky().is_none() {
            return invalid("R must be positive definite in noisy mode");
        }
        Ok(())
    }

    /// Stationary state law when the spectral radius of `A` is below 1.
    pub fn stationary_belief(&self) -> Result<GaussianBelief> {
        let p = discrete_lyapunov(&self.a, &(&self.b * &self.q * self.b.transpose()))?;
        Ok(GaussianBelief::new(DVector::zeros(self.a.nrows()), &p))
    }
}

/// Predict/update recursion with Joseph-form covariance updates. Missing
/// observations (`None`) skip the update.
pub fn kalman_filter(
    model: &LinearGaussianModel,
    prior: &GaussianBelief,
    observations: &[Option<Vec<f64>>],
    mode: ObservationMode,
) -> Result<FilterTrace> {
    model.validate(mode)?;
    prior.validate()?;
    let n = model.a.nrows();
    if prior.mean.len() != n {
        return shape_err("prior dimension does not match the model");
    }
    let k = model.w.nrows();
    let qx = &model.b * &model.q * model.b.transpose();
    let r = if mode == ObservationMode::Exact { DMatrix::zeros(k, k) } else { model.r.clone() };
    let mut m = prior.mean_vec();
    let mut p = prior.cov_mat();
    let mut beliefs = vec![prior.clone()];
    let mut loglik = 0.0;
    let eye = DMatrix::<f64>::identity(n, n);
    for (t, y) in observations.iter().enumerate() {
        let step = t + 1;
        m = &model.a * &m;
        p = &model.a * &p * model.a.transpose() + &qx;
        symmetrize(&mut p);
        if let (Some(y), false) = (y, mode == ObservationMode::Unobserved) {
            if y.len() != k {
                return shape_err(format!("observation {step} has dimension {}, expected {k}", y.len()));
            }
            let s = &model.w * &p * model.w.transpose() + &r;
            let chol = s.clone().cholesky().ok_or(Error::SingularInnovation(step))?;
            let e = DVector::from_column_slice(y) - &model.w * &m;
            let gain = &p * model.w.transpose() * chol.inverse();
            m += &gain * &e;
            let ikw = &eye - &gain * &model.w;
            p = &ikw * &p * ikw.transpose() + &gain * &r * gain.transpose();
            symmetrize(&mut p);
            let sol = chol.solve(&e);
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            loglik += -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + e.dot(&sol));
        }
        check_psd(&p, step)?;
        beliefs.push(GaussianBelief::new(m.clone(), &p));
    }
    Ok(FilterTrace {
        beliefs,
        log_likelihood: loglik,
        ess: Vec::new(),
        resampled: Vec::new(),
    })
}

/// Input-augmented linear-Gaussian model on `(x_t, u_t)` for inputs
/// `u_t = a_u u_{t-1} + e_t`, `e_t ~ N(0, Q_u)`.
pub fn augmented_model(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    a_u: &DMatrix<f64>,
    q_u: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LinearGaussianModel> {
    let (n, d) = (a.nrows(), b.ncols());
    if a_u.shape() != (d, d) || q_u.shape() != (d, d) || b.nrows() != n || w.ncols() != n {
        return shape_err("augmented model blocks have inconsistent shapes");
    }
    let rho = crate::linalg::spectral_radius(a_u)?;
    if rho >= 1.0 {
        return Err(Error::SpectralRadius(rho));
    }
    let mut big_a = DMatrix::zeros(n + d, n + d);
    big_a.view_mut((0, 0), (n, n)).copy_from(a);
    big_a.view_mut((0, n), (n, d)).copy_from(&(b * a_u));
    big_a.view_mut((n, n), (d, d)).copy_from(a_u);
    let mut g = DMatrix::zeros(n + d, d);
    g.view_mut((0, 0), (n, d)).copy_from(b);
    g.view_mut((n, 0), (d, d)).copy_from(&DMatrix::identity(d, d));
    let mut big_w = DMatrix::zeros(w.nrows(), n + d);
    big_w.view_mut((0, 0), (w.nrows(), n)).copy_from(w);
    Ok(LinearGaussianModel {
        a: big_a,
        b: g,
        w: big_w,
        q: q_u.clone(),
        r: r.clone(),
    })
}

/// Kalman filter on the augmented state; the prior on `u_0` is the
/// stationary input law. Beliefs cover `(x, u)`.
pub fn augmented_kalman(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    a_u: &DMatrix<f64>,
    q_u: &DMatrix<f64>,
    r: &DMatrix<f64>,
    prior_x: &GaussianBelief,
    observations: &[Option<Vec<f64>>],
    mode: ObservationMode,
) -> Result<FilterTrace> {
    let model = augmented_model(a, b, w, a_u, q_u, r)?;
    let (n, d) = (a.nrows(), b.ncols());
    prior_x.validate()?;
    if prior_x.mean.len() != n {
        return shape_err("prior dimension does not match the state");
    }
    let pu = discrete_lyapunov(a_u, q_u)?;
    let mut p = DMatrix::zeros(n + d, n + d);
    p.view_mut((0, 0), (n, n)).copy_from(&prior_x.cov_mat());
    p.view_mut((n, n), (d, d)).copy_from(&pu);
    let mut m = DVector::zeros(n + d);
    m.rows_mut(0, n).copy_from(&prior_x.mean_vec());
    kalman_filter(&model, &GaussianBelief::new(m, &p), observations, mode)
}

/// Additive observation noise on `h(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObsModel {
    /// `y = h(x) + N(0, sigma^2 I)`; `sigma = 0` means `|y - h(x)| <= 1e-9`.
    Gaussian { sigma: f64 },
    /// `y = step * round((h(x) + N(0, sigma^2 I)) / step)` per coordinate.
    Quantized { step: f64, sigma: f64 },
}

impl ObsModel {
    fn validate(&self) -> Result<()> {
        match *self {
            ObsModel::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            ObsModel::Quantized { step, sigma } if step > 0.0 && sigma > 0.0 => Ok(()),
            _ => invalid("observation noise must be nonnegative (quantized: step and sigma positive)"),
        }
    }

    pub fn log_likelihood(&self, hx: &[f64], y: &[f64]) -> f64 {
        match *self {
            ObsModel::Gaussian { sigma: 0.0 } => {
                if hx.iter().zip(y).all(|(a, b)| (a - b).abs() <= EXACT_OBS_TOL) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            ObsModel::Gaussian { sigma } => hx
                .iter()
                .zip(y)
                .map(|(a, b)| -0.5 * ((b - a) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
                .sum(),
            ObsModel::Quantized { step, sigma } => {
                let nd = Normal::new(0.0, sigma).expect("positive sigma");
                hx.iter()
                    .zip(y)
                    .map(|(a, b)| {
                        let p = nd.cdf(b + 0.5 * step - a) - nd.cdf(b - 0.5 * step - a);
                        p.max(0.0).ln()
                    })
                    .sum()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, hx: &[f64], rng: &mut R) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        match *self {
            ObsModel::Gaussian { sigma } => hx
                .iter()
                .map(|a| {
                    let z: f64 = StandardNormal.sample(rng);
                    a + sigma * z
                })
                .collect(),
            ObsModel::Quantized { step, sigma } => hx
                .iter()
                .map(|a| {
                    let z: f64 = StandardNormal.sample(rng);
                    step * ((a + sigma * z) / step).round()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleFilterConfig {
    pub particles: usize,
    #[serde(default)]
    pub seed: u64,
    /// Law of `x_0`.
    pub init_state: BaseDist,
    /// Length of the input past carried by each particle; defaults to the
    /// Markov order of the input law (at least 1).
    #[serde(default)]
    pub input_memory: Option<usize>,
}

struct PfParticle {
    x: Vec<f64>,
    past: Window,
}

/// Bootstrap filter on augmented particles `(x_t, input past)`, propagated
/// with the conditional input sampler and resampled systematically when the
/// effective sample size drops below `N/2`.
pub fn bootstrap_particle_filter(
    sys: &SystemInstance,
    spec: &InputLawSpec,
    obs: &ObsModel,
    observations: &[Option<Vec<f64>>],
    cfg: &ParticleFilterConfig,
) -> Result<FilterTrace> {
    let n = cfg.particles;
    if n < 100 {
        return invalid(format!("particle filter needs at least 100 particles, got {n}"));
    }
    obs.validate()?;
    let d = spec.validate()?;
    if d != sys.dims().input {
        return shape_err("input law dimension does not match the system");
    }
    if cfg.init_state.dim()? != sys.dims().state {
        return shape_err("initial state law does not match the state dimension");
    }
    let sampler = ConditionalSampler::new(spec.clone())?;
    let memory = cfg.input_memory.unwrap_or(spec.markov_order()).max(1);
    let mut cloud: Vec<PfParticle> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(cfg.seed, streams::INIT_STATES, i as u64);
            let x = cfg.init_state.sample(&mut rng);
            let mut rng = rng_for(cfg.seed, streams::INPUTS, i as u64);
            let past = Window::new(d, spec.sample_path(memory, &mut rng))?;
            Ok(PfParticle { x, past })
        })
        .collect::<Result<_>>()?;
    let mut logw = vec![-(n as f64).ln(); n];
    let summarize = |cloud: &[PfParticle], w: &[f64]| {
        let dim = cloud[0].x.len();
        let mut mean = DVector::zeros(dim);
        for (p, wi) in cloud.iter().zip(w) {
            mean += *wi * DVector::from_column_slice(&p.x);
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for (p, wi) in cloud.iter().zip(w) {
            let c = DVector::from_column_slice(&p.x) - &mean;
            cov += *wi * &c * c.transpose();
        }
        GaussianBelief::new(mean, &cov)
    };
    let uniform = vec![1.0 / n as f64; n];
    let mut beliefs = vec![summarize(&cloud, &uniform)];
    let mut ess_trace = Vec::with_capacity(observations.len());
    let mut resampled = Vec::with_capacity(observations.len());
    let mut loglik = 0.0;
    for (t, y) in observations.iter().enumerate() {
        let step = t + 1;
        let step_seed = derive_seed(cfg.seed, streams::PARTICLE_FILTER, step as u64);
        cloud = cloud
            .into_par_iter()
            .enumerate()
            .map(|(i, p)| {
                let u = sampler.draw(&p.past, 1, derive_seed(step_seed, streams::CONDITIONAL, i as u64))?.future;
                let x = sys.eval_f(&p.x, &u[0]).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Divergence(format!("particle {i} left the reals at step {step}")),
                    other => other,
                })?;
                Ok(PfParticle {
                    past: p.past.shift_append(&u[0])?,
                    x,
                })
            })
            .collect::<Result<_>>()?;
        if let Some(y) = y {
            let incr: Vec<f64> = cloud
                .par_iter()
                .map(|p| Ok(obs.log_likelihood(&sys.eval_h(&p.x)?, y)))
                .collect::<Result<_>>()?;
            for (lw, li) in logw.iter_mut().zip(&incr) {
                *lw += li;
            }
            let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if top == f64::NEG_INFINITY {
                return Err(Error::WeightCollapse { step, ess: 0.0 });
            }
            let total: f64 = logw.iter().map(|l| (l - top).exp()).sum();
            // logw was normalised before this step, so this is log p(y_t | y_{1:t-1})
            loglik += top + total.ln();
            for lw in logw.iter_mut() {
                *lw -= top + total.ln();
            }
        }
        let w: Vec<f64> = logw.iter().map(|l| l.exp()).collect();
        let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
        if ess < 2.0 {
            return Err(Error::WeightCollapse { step, ess });
        }
        beliefs.push(summarize(&cloud, &w));
        ess_trace.push(ess);
        let resample = ess < n as f64 / 2.0;
        resampled.push(resample);
        if resample {
            let mut rng = rng_for(cfg.seed, streams::RESAMPLE, step as u64);
            let idx = systematic_resample(&w, rng.random::<f64>());
            cloud = idx
                .iter()
                .map(|&j| PfParticle {
                    x: cloud[j].x.clone(),
                    past: cloud[j].past.clone(),
                })
                .collect();
            logw = vec![-(n as f64).ln(); n];
        }
    }
    Ok(FilterTrace {
        beliefs,
        log_likelihood: loglik,
        ess: ess_trace,
        resampled,
    })
}

/// Indices of systematic resampling with offset `u ∈ [0, 1)`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut acc = weights[0];
    let mut j = 0;
    for i in 0..n {
        let target = (i as f64 + u) / n as f64;
        while target > acc && j + 1 < n {
            j += 1;
            acc += weights[j];
        }
        out.push(j);
    }
    out
}

/// Finite-state hidden Markov model on grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    /// State coordinates of each grid point (fed to the readout).
    pub points: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
    /// Sparse rows `(target, probability)`.
    pub transition: Vec<Vec<(usize, f64)>>,
}

impl GridModel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridInput {
    Iid { values: Vec<Vec<f64>>, probs: Vec<f64> },
    Markov { values: Vec<Vec<f64>>, transition: Vec<Vec<f64>> },
}

/// Mass deposited on the two neighbouring grid points of `v`.
fn deposit(grid: &[f64], v: f64) -> [(usize, f64); 2] {
    let n = grid.len();
    if v <= grid[0] {
        return [(0, 1.0), (0, 0.0)];
    }
    if v >= grid[n - 1] {
        return [(n - 1, 1.0), (n - 1, 0.0)];
    }
    let j = grid.partition_point(|g| *g <= v) - 1;
    let t = (v - grid[j]) / (grid[j + 1] - grid[j]);
    [(j, 1.0 - t), (j + 1, t)]
}

fn push_mass(row: &mut Vec<(usize, f64)>, idx: usize, p: f64) {
    if p <= 0.0 {
        return;
    }
    match row.iter_mut().find(|e| e.0 == idx) {
        Some(e) => e.1 += p,
        None => row.push((idx, p)),
    }
}

/// Discretizes a scalar-state system on `x_grid` (increasing). Iid inputs
/// are integrated out; Markov inputs become part of the grid state
/// `(x_i, u_k)` with index `i * K + k`. Images `f(x, u)` are split between
/// the two nearest grid points.
pub fn discretize_system(sys: &SystemInstance, x_grid: &[f64], input: &GridInput, prior_x: &[f64]) -> Result<GridModel> {
    if sys.dims().state != 1 {
        return invalid("grid discretization supports scalar states");
    }
    if x_grid.len() < 2 || x_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return invalid("x grid must be strictly increasing with at least 2 points");
    }
    if prior_x.len() != x_grid.len() {
        return shape_err("prior must have one weight per grid point");
    }
    let nx = x_grid.len();
    match input {
        GridInput::Iid { values, probs } => {
            if values.len() != probs.len() {
                return shape_err("input values and probabilities differ in length");
            }
            let transition = x_grid
                .par_iter()
                .map(|&x| {
                    let mut row = Vec::new();
                    for (u, p) in values.iter().zip(probs) {
                        let fx = sys.eval_f(&[x], u)?[0];
                        for (j, m) in deposit(x_grid, fx) {
                            push_mass(&mut row, j, p * m);
                        }
                    }
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GridModel {
                points: x_grid.iter().map(|x| vec![*x]).collect(),
                prior: prior_x.to_vec(),
                transition,
            })
        }
        GridInput::Markov { values, transition } => {
            let k = values.len();
            if transition.len() != k || transition.iter().any(|r| r.len() != k) {
                return shape_err("input transition must be K x K");
            }
            if nx * k > MAX_GRID_STATES {
                return Err(Error::TooLarge(format!("{} grid states exceed {MAX_GRID_STATES}", nx * k)));
            }
            let pi = stationary_distribution(transition);
            let rows = (0..nx * k)
                .into_par_iter()
                .map(|s| {
                    let (i, kk) = (s / k, s % k);
                    let mut row = Vec::new();
                    for (k2, p) in transition[kk].iter().enumerate() {
                        if *p == 0.0 {
                            continue;
                        }
                        let fx = sys.eval_f(&[x_grid[i]], &values[k2])?[0];
                        for (j, m) in deposit(x_grid, fx) {
                            push_mass(&mut row, j * k + k2, p * m);
                        }
                    }
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut points = Vec::with_capacity(nx * k);
            let mut prior = Vec::with_capacity(nx * k);
            for (x, px) in x_grid.iter().zip(prior_x) {
                for p in &pi {
                    points.push(vec![*x]);
                    prior.push(px * p);
                }
            }
            Ok(GridModel {
                points,
                prior,
                transition: rows,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPosterior {
    /// Filtered distributions; entry 0 is the prior.
    pub posteriors: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

impl GridPosterior {
    /// Mean and variance of coordinate `c` of the grid points at step `t`.
    pub fn moments(&self, model: &GridModel, t: usize, c: usize) -> (f64, f64) {
        let p = &self.posteriors[t];
        let m: f64 = p.iter().zip(&model.points).map(|(w, x)| w * x[c]).sum();
        let v: f64 = p.iter().zip(&model.points).map(|(w, x)| w * (x[c] - m).powi(2)).sum();
        (m, v)
    }

    /// Posterior mass of grid points satisfying `pred` at step `t`.
    pub fn mass(&self, model: &GridModel, t: usize, pred: impl Fn(&[f64]) -> bool) -> f64 {
        self.posteriors[t].iter().zip(&model.points).filter(|(_, x)| pred(x)).map(|(w, _)| w).sum()
    }
}

/// Exact forward recursion of the grid HMM.
pub fn grid_bayes_oracle(
    sys: &SystemInstance,
    model: &GridModel,
    obs: &ObsModel,
    observations: &[Option<Vec<f64>>],
) -> Result<GridPosterior> {
    obs.validate()?;
    let n = model.len();
    if n > MAX_GRID_STATES {
        return Err(Error::TooLarge(format!("{n} grid states exceed {MAX_GRID_STATES}")));
    }
    if model.prior.len() != n || model.transition.len() != n {
        return shape_err("grid prior and transition must cover every grid point");
    }
    let s: f64 = model.prior.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return invalid("grid prior must sum to 1");
    }
    let h: Vec<Vec<f64>> = model.points.iter().map(|x| sys.eval_h(x)).collect::<Result<_>>()?;
    let mut p = model.prior.clone();
    let mut out = vec![p.clone()];
    let mut loglik = 0.0;
    for (t, y) in observations.iter().enumerate() {
        let mut next = vec![0.0; n];
        for (i, row) in model.transition.iter().enumerate() {
            if p[i] == 0.0 {
                continue;
            }
            for &(j, q) in row {
                next[j] += p[i] * q;
            }
        }
        if let Some(y) = y {
            let lik: Vec<f64> = h.iter().map(|hx| obs.log_likelihood(hx, y)).collect();
            let top = lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (v, l) in next.iter_mut().zip(&lik) {
                *v *= (l - top).exp();
                z += *v;
            }
            if !(z > 0.0) {
                return Err(Error::WeightCollapse { step: t + 1, ess: 0.0 });
            }
            next.iter_mut().for_each(|v| *v /= z);
            loglik += top + z.ln();
        }
        out.push(next.clone());
        p = next;
    }
    Ok(GridPosterior {
        posteriors: out,
        log_likelihood: loglik,
    })
}

/// Samples states and observations `y_1..y_T` of a system driven by inputs
/// drawn from `spec`, starting from `x0`.
pub fn simulate_observations(
    sys: &SystemInstance,
    spec: &InputLawSpec,
    obs: &ObsModel,
    x0: &[f64],
    steps: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    obs.validate()?;
    let mut rng = rng_for(seed, streams::INPUTS, 0);
    let path = spec.sample_path(steps, &mut rng);
    let mut orng = rng_for(seed, streams::PARTICLE_FILTER, 0);
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(steps);
    let mut ys = Vec::with_capacity(steps);
    for u in &path {
        x = sys.eval_f(&x, u)?;
        ys.push(obs.sample(&sys.eval_h(&x)?, &mut orng));
        states.push(x.clone());
    }
    Ok((states, ys))
}
