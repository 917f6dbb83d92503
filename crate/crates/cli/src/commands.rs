//! Subcommand bodies. Each returns the `result` part of its report and
//! writes its CSV data into the output directory.

use std::fs::File;

use esplab::causality::{causal_extension, is_causal_report, CmiOptions};
use esplab::det_solver::{
    contraction_rate, echo_index, esp_check, fmp_probe, forward_trajectory, generic_constancy_scan, linear_closed_form,
    solution_fibers, PullbackConfig,
};
use esplab::filtering::{
    augmented_kalman, bootstrap_particle_filter, discretize_system, grid_bayes_oracle, kalman_filter, read_observations_csv,
    simulate_observations, FilterTrace, GridInput, LinearGaussianModel, ObsModel, ObservationMode, ParticleFilterConfig,
};
use esplab::input_law::{BaseDist, InputLawSpec};
use esplab::linalg::spectral_radius;
use esplab::measures::{
    check_stochastic_solution, fixedpoint_residual, periodicity_check, pullback_measure, pushforward_solution_map,
    product_sign_measure, stoch_fmp_probe, two_sample_envelope, wasserstein, ParticleMeasure, Projection, StochConfig,
    WassersteinOptions,
};
use esplab::seed::{derive_seed, streams};
use esplab::systems::Readout;
use esplab::{ExtendedInput, SystemInstance, Window};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{resolve, ExampleSection, MeasureSource, FilterMethod, FilterSection, GridAxis, Loaded, ObservationSource};
use crate::report::Output;
use crate::{CliError, Command};

type Res = Result<Value, CliError>;

pub fn dispatch(cmd: Command, l: &Loaded, out: &mut Output) -> Res {
    match cmd {
        Command::Simulate => simulate(l, out),
        Command::Esp => esp(l, out),
        Command::EchoIndex => echo(l, out),
        Command::Fmp => fmp(l, out),
        Command::Scan => scan(l, out),
        Command::Forward => forward(l, out),
        Command::StochSolve => stoch_solve(l, out),
        Command::StochFmp => stoch_fmp(l, out),
        Command::Causality => causality(l, out),
        Command::Periodicity => periodicity(l, out),
        Command::Filter => filter(l, out),
        Command::ExampleKloeden => example_kloeden(l, out),
        Command::ExampleLinear => example_linear(l, out),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Res {
    serde_json::to_value(v).map_err(|e| CliError::Output(e.to_string()))
}

fn input_window(l: &Loaded) -> Result<Window, CliError> {
    l.config.input()?.window(&l.base_dir, l.config.seed.unwrap_or(0))
}

fn columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn simulate(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sys = c.system()?;
    let sec = c.section(&c.simulate, "simulate")?;
    let input = input_window(l)?;
    let dims = sys.dims();
    let mut x = sec.x_init.clone();
    if x.len() != dims.state {
        return Err(CliError::Config(format!("simulate.x_init: expected {} components", dims.state)));
    }
    let mut rows = Vec::with_capacity(input.len());
    for (t, u) in input.iter().enumerate() {
        x = sys.eval_f(&x, u)?;
        let y = sys.eval_h(&x)?;
        let mut row = vec![t as f64];
        row.extend_from_slice(u);
        row.extend_from_slice(&x);
        row.extend(y);
        rows.push(row);
    }
    let mut header = vec!["t".to_string()];
    header.extend(columns("u", dims.input));
    header.extend(columns("x", dims.state));
    header.extend(columns("y", dims.output));
    out.csv("states.csv", &header, rows)?;
    Ok(json!({"steps": input.len(), "final_state": x}))
}

fn esp(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sys = c.system()?;
    let cfg = c.solver()?;
    let input = input_window(l)?;
    let rep = esp_check(sys, &input, &cfg)?;
    out.csv(
        "diameters.csv",
        &["step".into(), "diameter".into()],
        rep.diameter_curve.iter().enumerate().map(|(k, d)| vec![k as f64, *d]),
    )?;
    let rate = contraction_rate(&rep.diameter_curve, 1e-13);
    let mut v = to_value(&rep)?;
    v["contraction_rate"] = json!(rate);
    if let Some((a, _)) = sys.linear_parts() {
        v["spectral_radius"] = json!(spectral_radius(a)?);
    }
    if rep.diverged > 0 {
        v["numerical_failure"] = json!(format!("{} ensemble paths diverged", rep.diverged));
    }
    Ok(v)
}

fn representatives_csv(out: &mut Output, reps: &[Vec<f64>], sizes: &[usize]) -> Result<(), CliError> {
    let n = reps.first().map(Vec::len).unwrap_or(0);
    let mut header = vec!["cluster".to_string(), "size".to_string()];
    header.extend(columns("x", n));
    out.csv(
        "representatives.csv",
        &header,
        reps.iter().zip(sizes).enumerate().map(|(i, (r, s))| {
            let mut row = vec![i as f64, *s as f64];
            row.extend_from_slice(r);
            row
        }),
    )
}

fn echo(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let rep = echo_index(c.system()?, &input_window(l)?, &c.solver()?)?;
    representatives_csv(out, &rep.representatives, &rep.cluster_sizes)?;
    let mut v = to_value(&rep)?;
    if !rep.stable {
        v["numerical_failure"] = json!(format!(
            "echo index not resolved: {} clusters at M, {} at 2M (resolved {}, {})",
            rep.index, rep.refined_index, rep.resolved, rep.refined_resolved
        ));
    }
    Ok(v)
}

fn fmp(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sec = c.section(&c.fmp, "fmp")?;
    let rep = fmp_probe(c.system()?, &input_window(l)?, &sec.perturbations, &c.solver()?, &c.metric)?;
    out.csv(
        "fmp.csv",
        &["lag", "magnitude", "response", "final_state_response", "base_index", "perturbed_index"].map(String::from),
        rep.rows.iter().map(|r| {
            vec![
                r.lag as f64,
                r.magnitude,
                r.response,
                r.final_state_response,
                r.base_index as f64,
                r.perturbed_index as f64,
            ]
        }),
    )?;
    to_value(&rep)
}

fn scan(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sec = c.section(&c.scan, "scan")?;
    c.require_seed()?;
    sec.law.validate().map_err(|e| CliError::Config(format!("scan.law: {e}")))?;
    let rep = generic_constancy_scan(c.system()?, &sec.law, sec.samples, &c.solver()?)?;
    out.csv(
        "histogram.csv",
        &["index".into(), "count".into()],
        rep.histogram.iter().map(|(k, v)| vec![*k as f64, *v as f64]),
    )?;
    to_value(&rep)
}

fn forward(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sys = c.system()?;
    let sec = c.section(&c.forward, "forward")?;
    let fut = sec.future.window(&l.base_dir, c.seed.unwrap_or(0))?;
    let steps = sec.steps.unwrap_or(fut.len());
    let input = ExtendedInput::new(Window::constant(fut.lag(0), 1)?, fut.values())?;
    let paths = sec
        .x_init
        .iter()
        .map(|x0| forward_trajectory(sys, &input, x0, steps))
        .collect::<esplab::Result<Vec<_>>>()?;
    let n = sys.dims().state;
    let mut header = vec!["start".to_string(), "t".to_string()];
    header.extend(columns("x", n));
    out.csv(
        "trajectories.csv",
        &header,
        paths.iter().enumerate().flat_map(|(i, p)| {
            p.iter().enumerate().map(move |(t, x)| {
                let mut row = vec![i as f64, (t + 1) as f64];
                row.extend_from_slice(x);
                row
            })
        }),
    )?;
    let finals: Vec<&Vec<f64>> = paths.iter().filter_map(|p| p.last()).collect();
    Ok(json!({"steps": steps, "final_states": finals}))
}

fn measure_summary(mu: &ParticleMeasure) -> Value {
    let moments = mu.state_moments(0).ok();
    json!({
        "particles": mu.len(),
        "state_mean_at_0": moments.map(|m| m.0),
        "state_var_at_0": moments.map(|m| m.1),
    })
}

fn stoch_solve(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sys = c.system()?;
    let seed = c.require_seed()?;
    let sec = c.stoch_solve.clone().unwrap_or_default();
    let mut opts = WassersteinOptions {
        metric: c.metric,
        ..WassersteinOptions::default()
    };
    if let Some(mode) = sec.transport {
        opts = opts.with_mode(mode);
    }
    // `shrink` shortens the windows by one entry, matching the windows the
    // fixed-point residual compares.
    let draw = |s: u64, shrink: usize| -> esplab::Result<ParticleMeasure> {
        match &sec.measure {
            MeasureSource::Pullback => {
                let cfg = c.stoch().map_err(|e| esplab::Error::InvalidArgument(e.to_string()))?;
                let law = c.law().map_err(|e| esplab::Error::InvalidArgument(e.to_string()))?;
                let cfg = StochConfig {
                    seed: s,
                    window: cfg.window - shrink.min(cfg.window - 1),
                    ..cfg
                };
                Ok(pullback_measure(sys, law, &cfg)?.measure)
            }
            MeasureSource::ProductSign { particles, length } => product_sign_measure(*particles, length - shrink.min(length - 1), s),
        }
    };
    let (mu, diverged) = match &sec.measure {
        MeasureSource::Pullback => {
            let outcome = pullback_measure(sys, c.law()?, &c.stoch()?)?;
            (outcome.measure, outcome.diverged.len())
        }
        MeasureSource::ProductSign { particles, length } => {
            if *particles == 0 || *length < 2 {
                return Err(CliError::Config("stoch_solve.measure: need particles > 0 and length >= 2".into()));
            }
            (product_sign_measure(*particles, *length, seed)?, 0)
        }
    };
    mu.write_csv(out.file("measure.csv")?)?;
    let check = check_stochastic_solution(sys, &mu, sec.solution_tol)?;
    let fixed = fixedpoint_residual(sys, &mu, &opts)?;
    let fixed_env = two_sample_envelope(sec.envelope_pairs, seed, |s| draw(s, 1), |a, b| wasserstein(a, b, &opts))?;
    let mut v = json!({
        "measure": measure_summary(&mu),
        "diverged": diverged,
        "solution_check": to_value(&check)?,
        "fixedpoint_residual": fixed,
        "fixedpoint_envelope": to_value(&fixed_env)?,
        "fixed_point_solution": fixed <= fixed_env.threshold,
    });
    if sec.compare_solution_map {
        let cfg = c.stoch()?;
        let solver = c.solver()?;
        let at0 = opts.clone().with_projection(Projection::StateAt0);
        let indep = StochConfig {
            seed: derive_seed(cfg.seed, streams::ENVELOPE, u64::MAX),
            ..cfg.clone()
        };
        let sm = pushforward_solution_map(sys, c.law()?, &indep, &solver)?;
        let d = wasserstein(&mu, &sm, &at0)?;
        let env = two_sample_envelope(sec.envelope_pairs, cfg.seed, |s| draw(s, 0), |a, b| wasserstein(a, b, &at0))?;
        v["solution_map"] = json!({
            "distance": d,
            "envelope": to_value(&env)?,
            "within_3_envelopes": d <= 3.0 * env.threshold,
        });
    }
    Ok(v)
}

fn stoch_fmp(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sec = c.section(&c.stoch_fmp, "stoch_fmp")?;
    c.require_seed()?;
    let opts = WassersteinOptions {
        metric: c.metric,
        ..WassersteinOptions::default()
    };
    let row = stoch_fmp_probe(c.system()?, c.law()?, &sec.perturbed, &c.stoch()?, &opts)?;
    out.csv(
        "stoch_fmp.csv",
        &["input_dist".into(), "solution_dist".into(), "ratio".into()],
        [vec![row.input_dist, row.solution_dist, row.ratio.unwrap_or(f64::NAN)]],
    )?;
    to_value(&row)
}

fn causality(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sec = c.section(&c.causality, "causality")?;
    let seed = c.require_seed()?;
    let law = c.law()?;
    let mu_minus = match &sec.measure_csv {
        Some(p) => {
            let p = resolve(&l.base_dir, p);
            let f = File::open(&p).map_err(|e| CliError::Config(format!("causality.measure_csv {}: {e}", p.display())))?;
            ParticleMeasure::read_csv(f)?.truncate()
        }
        None => {
            let cfg = StochConfig {
                n_future: 0,
                ..c.stoch()?
            };
            pullback_measure(c.system()?, law, &cfg)?.measure
        }
    };
    let ext = causal_extension(&mu_minus, law, sec.n_future, seed, sec.marginal_check.as_ref())?;
    let opts = sec.cmi.clone().unwrap_or_else(|| CmiOptions {
        seed,
        ..CmiOptions::for_spec(law)
    });
    let rep = is_causal_report(&ext.measure, &opts)?;
    out.csv(
        "cmi.csv",
        &["t", "cmi", "threshold", "p_value", "dependent"].map(String::from),
        rep.lags.iter().map(|g| {
            vec![
                g.t as f64,
                g.cmi,
                g.threshold,
                g.p_value,
                f64::from(u8::from(g.verdict == esplab::causality::Verdict::Dependent)),
            ]
        }),
    )?;
    ext.measure.write_csv(out.file("extension.csv")?)?;
    Ok(json!({
        "report": to_value(&rep)?,
        "marginal_distance": ext.marginal_distance,
        "marginal_threshold": ext.marginal_threshold,
        "ambiguous_particles": ext.ambiguous_particles,
    }))
}

fn periodicity(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sec = c.section(&c.periodicity, "periodicity")?;
    c.require_seed()?;
    let sys = c.system()?;
    let law = c.law()?;
    let cfg = c.stoch()?;
    let opts = WassersteinOptions {
        metric: c.metric,
        ..WassersteinOptions::default()
    };
    let mu = pullback_measure(sys, law, &cfg)?.measure;
    let rep = periodicity_check(&mu, sec.period, &opts)?;
    let env = two_sample_envelope(
        sec.envelope_pairs,
        cfg.seed,
        |s| Ok(pullback_measure(sys, law, &StochConfig { seed: s, ..cfg.clone() })?.measure),
        |a, b| wasserstein(a, b, &opts),
    )?;
    let mut rows = vec![vec![rep.period as f64, rep.distance]];
    rows.extend(rep.divisors.iter().map(|(k, d)| vec![*k as f64, *d]));
    out.csv("periodicity.csv", &["k".into(), "distance".into()], rows)?;
    Ok(json!({
        "periodicity": to_value(&rep)?,
        "envelope": to_value(&env)?,
        "periodic": rep.distance <= env.threshold,
        "minimal": rep.divisors.iter().all(|(_, d)| *d > env.threshold),
    }))
}

/// `(a_u, Q_u)` of a zero-mean Gaussian input law.
fn gaussian_input(law: &InputLawSpec) -> Result<(DMatrix<f64>, DMatrix<f64>), CliError> {
    match law {
        InputLawSpec::Iid {
            base: BaseDist::Normal { mean, std },
        } if mean.iter().all(|m| *m == 0.0) => {
            let d = std.len();
            Ok((DMatrix::zeros(d, d), DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, std.iter().map(|s| s * s)))))
        }
        InputLawSpec::GaussianAr1 { a, sigma, dim, mean } if *mean == 0.0 => Ok((
            DMatrix::identity(*dim, *dim) * *a,
            DMatrix::identity(*dim, *dim) * (sigma * sigma),
        )),
        _ => Err(CliError::Config(
            "input.law: Kalman methods need zero-mean iid normal or gaussian_ar1 inputs".into(),
        )),
    }
}

fn readout_matrix(sys: &SystemInstance) -> DMatrix<f64> {
    match sys.readout() {
        Readout::Identity => DMatrix::identity(sys.dims().state, sys.dims().state),
        Readout::Linear { w } => w.0.clone(),
    }
}

fn axis(a: &GridAxis, name: &str) -> Result<Vec<f64>, CliError> {
    // written to reject NaN bounds
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if a.points < 2 || !(a.low < a.high) {
        return Err(CliError::Config(format!("filter.{name}: need low < high and at least 2 points")));
    }
    Ok((0..a.points)
        .map(|i| a.low + (a.high - a.low) * i as f64 / (a.points - 1) as f64)
        .collect())
}

fn grid_input(law: &InputLawSpec, sec: &FilterSection) -> Result<GridInput, CliError> {
    match law {
        InputLawSpec::Iid {
            base: BaseDist::Discrete { values, probs },
        } => Ok(GridInput::Iid {
            values: values.clone(),
            probs: probs.clone(),
        }),
        InputLawSpec::Iid {
            base: BaseDist::Dirac { value },
        } => Ok(GridInput::Iid {
            values: vec![value.clone()],
            probs: vec![1.0],
        }),
        InputLawSpec::Iid {
            base: BaseDist::Normal { mean, std },
        } if mean.len() == 1 => {
            use statrs::distribution::{ContinuousCDF, Normal};
            let u = sec
                .u_grid
                .as_ref()
                .ok_or_else(|| CliError::Config("filter.u_grid: required for normal inputs".into()))?;
            let nd = Normal::new(mean[0], std[0]).map_err(|e| CliError::Config(format!("input.law: {e}")))?;
            let h = (u.high - u.low) / u.points as f64;
            let centres: Vec<f64> = (0..u.points).map(|i| u.low + (i as f64 + 0.5) * h).collect();
            let mut probs: Vec<f64> = centres.iter().map(|c| nd.cdf(c + h / 2.0) - nd.cdf(c - h / 2.0)).collect();
            let s: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= s);
            Ok(GridInput::Iid {
                values: centres.into_iter().map(|c| vec![c]).collect(),
                probs,
            })
        }
        InputLawSpec::MarkovChain { alphabet, transition, .. } => Ok(GridInput::Markov {
            values: alphabet.clone(),
            transition: transition.clone(),
        }),
        _ => Err(CliError::Config(
            "input.law: the grid method supports discrete, dirac, scalar normal iid and Markov chain inputs".into(),
        )),
    }
}

fn trace_rows(trace: &FilterTrace) -> Vec<Vec<f64>> {
    trace
        .beliefs
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let mut row = vec![t as f64];
            row.extend_from_slice(&b.mean);
            row.extend(b.variances());
            row.push(if t == 0 { f64::NAN } else { trace.ess.get(t - 1).copied().unwrap_or(f64::NAN) });
            row
        })
        .collect()
}

fn filter(l: &Loaded, out: &mut Output) -> Res {
    let c = &l.config;
    let sys = c.system()?;
    let sec = c.section(&c.filter, "filter")?;
    let law = c.law()?;
    sec.prior.validate().map_err(|e| CliError::Config(format!("filter.prior: {e}")))?;
    let (truth, ys) = match &sec.observations {
        ObservationSource::Csv { path } => {
            let p = resolve(&l.base_dir, path);
            let f = File::open(&p).map_err(|e| CliError::Config(format!("filter.observations.path {}: {e}", p.display())))?;
            (None, read_observations_csv(f)?)
        }
        ObservationSource::Simulate { steps, x0 } => {
            let seed = c.require_seed()?;
            let (s, y) = simulate_observations(sys, law, &sec.noise, x0, *steps, seed)?;
            (Some(s), y)
        }
    };
    let obs: Vec<Option<Vec<f64>>> = ys.iter().cloned().map(Some).collect();
    let kalman_r = |k: usize| -> Result<DMatrix<f64>, CliError> {
        match sec.noise {
            ObsModel::Gaussian { sigma } => Ok(DMatrix::identity(k, k) * (sigma * sigma)),
            _ => Err(CliError::Config("filter.noise: Kalman methods need gaussian observation noise".into())),
        }
    };
    let lin = || {
        sys.linear_parts()
            .ok_or_else(|| CliError::Config("system: Kalman methods need a linear state map".into()))
    };
    let n = sys.dims().state;
    let trace = match sec.method {
        FilterMethod::Kalman => {
            let (a, b) = lin()?;
            let (a_u, q_u) = gaussian_input(law)?;
            // iid input assumption: the stationary input covariance
            let q = esplab::linalg::discrete_lyapunov(&a_u, &q_u)?;
            let w = readout_matrix(sys);
            let model = LinearGaussianModel {
                a: a.clone(),
                b: b.clone(),
                r: kalman_r(w.nrows())?,
                w,
                q,
            };
            Some(kalman_filter(&model, &sec.prior, &obs, sec.mode)?)
        }
        FilterMethod::AugmentedKalman => {
            let (a, b) = lin()?;
            let (a_u, q_u) = gaussian_input(law)?;
            let w = readout_matrix(sys);
            let r = kalman_r(w.nrows())?;
            Some(augmented_kalman(a, b, &w, &a_u, &q_u, &r, &sec.prior, &obs, sec.mode)?)
        }
        FilterMethod::Particle => {
            let cfg = ParticleFilterConfig {
                particles: sec.particles,
                seed: c.require_seed()?,
                init_state: crate::config::prior_dist(&sec.prior),
                input_memory: None,
            };
            Some(bootstrap_particle_filter(sys, law, &sec.noise, &obs, &cfg)?)
        }
        FilterMethod::Grid => None,
    };
    let mut result = json!({"method": sec.method, "steps": ys.len()});
    let means: Vec<Vec<f64>>;
    if let Some(trace) = &trace {
        let mut header = vec!["time".to_string()];
        let m = trace.beliefs[0].mean.len();
        header.extend(columns("mean_", m));
        header.extend(columns("var_", m));
        header.push("ess".into());
        out.csv("trace.csv", &header, trace_rows(trace))?;
        std::io::Write::write_all(
            &mut out.file("trace.json")?,
            serde_json::to_string(trace).map_err(|e| CliError::Output(e.to_string()))?.as_bytes(),
        )
        .map_err(|e| CliError::Output(e.to_string()))?;
        result["log_likelihood"] = json!(trace.log_likelihood);
        result["final"] = to_value(trace.beliefs.last().expect("prior is always present"))?;
        result["resampled_steps"] = json!(trace.resampled.iter().filter(|r| **r).count());
        means = trace.beliefs[1..].iter().map(|b| b.mean[..n].to_vec()).collect();
    } else {
        let xa = sec
            .x_grid
            .as_ref()
            .ok_or_else(|| CliError::Config("filter.x_grid: required for the grid method".into()))?;
        let xs = axis(xa, "x_grid")?;
        let (m0, v0) = (sec.prior.mean[0], sec.prior.cov[0][0]);
        let mut prior: Vec<f64> = if v0 > 0.0 {
            xs.iter().map(|x| (-0.5 * (x - m0).powi(2) / v0).exp()).collect()
        } else {
            let j = xs
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - m0).abs().total_cmp(&(b.1 - m0).abs()))
                .map(|p| p.0)
                .unwrap_or(0);
            (0..xs.len()).map(|i| f64::from(u8::from(i == j))).collect()
        };
        let s: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= s);
        let model = discretize_system(sys, &xs, &grid_input(law, sec)?, &prior)?;
        let post = grid_bayes_oracle(sys, &model, &sec.noise, &obs)?;
        let rows: Vec<Vec<f64>> = (0..post.posteriors.len())
            .map(|t| {
                let (m, v) = post.moments(&model, t, 0);
                vec![t as f64, m, v, post.mass(&model, t, |x| x[0] > 0.0)]
            })
            .collect();
        out.csv("trace.csv", &["time", "mean_0", "var_0", "mass_positive"].map(String::from), rows.clone())?;
        result["log_likelihood"] = json!(post.log_likelihood);
        result["final"] = json!({"mean": rows.last().map(|r| r[1]), "var": rows.last().map(|r| r[2])});
        result["grid_states"] = json!(model.len());
        means = rows[1..].iter().map(|r| vec![r[1]]).collect();
    }
    if let Some(truth) = truth {
        let se: f64 = truth
            .iter()
            .zip(&means)
            .map(|(x, m)| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        result["rmse"] = json!((se / truth.len().max(1) as f64).sqrt());
    }
    if sec.mode != ObservationMode::Noisy {
        result["mode"] = json!(sec.mode);
    }
    Ok(result)
}

#[derive(serde::Serialize)]
struct KloedenCase {
    input: f64,
    echo_index: usize,
    stable: bool,
    representatives: Vec<f64>,
    fixed_points: Vec<f64>,
    max_fixed_point_error: f64,
}

/// Echo index of constant input `u` and the distance of its representatives
/// to the fixed points of `x -> u x / (1 + |x|)`.
fn kloeden_case(sys: &SystemInstance, u: f64, ex: &ExampleSection, seed: u64) -> Result<KloedenCase, CliError> {
    let cfg = PullbackConfig::new(ex.horizon, ex.ensemble_size, vec![[-3.0, 3.0]]).with_seed(seed);
    let rep = echo_index(sys, &Window::constant(&[u], 2 * ex.horizon)?, &cfg)?;
    let mut reps: Vec<f64> = rep.representatives.iter().map(|r| r[0]).collect();
    reps.sort_by(f64::total_cmp);
    let fixed_points = if u.abs() > 1.0 {
        vec![-(u.abs() - 1.0), 0.0, u.abs() - 1.0]
    } else {
        vec![0.0]
    };
    let max_fixed_point_error = reps
        .iter()
        .map(|r| fixed_points.iter().map(|f| (r - f).abs()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    Ok(KloedenCase {
        input: u,
        echo_index: rep.index,
        stable: rep.stable,
        representatives: reps,
        fixed_points,
        max_fixed_point_error,
    })
}

fn example_kloeden(l: &Loaded, out: &mut Output) -> Res {
    let ex = l.config.example.clone().unwrap_or_default();
    let sys = SystemInstance::kloeden();
    let seed = l.config.seed.unwrap_or(0);
    let plus = kloeden_case(&sys, ex.u_plus, &ex, seed)?;
    let minus = kloeden_case(&sys, ex.u_minus, &ex, seed)?;
    // forward runs: u_minus up to time 0, then u_plus
    let k = ex.post_switch_steps;
    let input = ExtendedInput::new(Window::constant(&[ex.u_minus], 1)?, vec![vec![ex.u_plus]; k])?;
    let target = ex.u_plus.abs() - 1.0;
    let mut paths = Vec::new();
    let mut forward = Vec::new();
    for sign in [1.0, -1.0] {
        let path = forward_trajectory(&sys, &input, &[sign * ex.start_offset], k)?;
        let xs: Vec<f64> = path.iter().map(|x| x[0]).collect();
        let near = |x: &f64| (x - sign * target).abs() < 1e-3;
        let entry = xs.iter().position(near).filter(|&i| xs[i..].iter().all(near));
        forward.push(json!({
            "start": sign * ex.start_offset,
            "target": sign * target,
            "entry_step": entry.map(|i| i + 1),
            "final_state": xs.last(),
        }));
        paths.push(xs);
    }
    out.csv(
        "kloeden_forward.csv",
        &["t".into(), "x_from_positive".into(), "x_from_negative".into()],
        (0..k).map(|t| vec![(t + 1) as f64, paths[0][t], paths[1][t]]),
    )?;
    let mut reps = Vec::new();
    for case in [&plus, &minus] {
        for r in &case.representatives {
            reps.push(vec![case.input, *r]);
        }
    }
    out.csv("kloeden_representatives.csv", &["input".into(), "x".into()], reps)?;
    Ok(json!({
        "u_plus": to_value(&plus)?,
        "u_minus": to_value(&minus)?,
        "forward": forward,
    }))
}

fn example_linear(l: &Loaded, out: &mut Output) -> Res {
    let seed = l.config.seed.unwrap_or(0);
    let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, -0.4]);
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
    let sys = SystemInstance::linear(a.clone(), b.clone())?;
    let horizon = 80;
    let law = InputLawSpec::Iid {
        base: BaseDist::Uniform {
            low: vec![-1.0],
            high: vec![1.0],
        },
    };
    let mut rng = esplab::seed::rng_for(seed, streams::INPUTS, 0);
    let input = Window::new(1, law.sample_path(2 * horizon, &mut rng))?;
    let cfg = PullbackConfig::new(horizon, 64, vec![[-5.0, 5.0]; 2]).with_seed(seed);
    let esp = esp_check(&sys, &input, &cfg)?;
    let fiber = solution_fibers(&sys, &input, &cfg)?;
    let closed = linear_closed_form(&a, &b, &input)?;
    // the older half of the window still remembers the initial box
    let rep = &fiber.representatives[0];
    let recent = closed.states.take_recent(rep.len() / 2)?;
    let solved = rep.take_recent(rep.len() / 2)?;
    let max_error = recent
        .iter()
        .zip(solved.iter())
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let rho = spectral_radius(&a)?;
    let rate = contraction_rate(&esp.diameter_curve, 1e-13);
    out.csv(
        "linear_diameters.csv",
        &["step".into(), "diameter".into(), "rho_power".into()],
        esp.diameter_curve
            .iter()
            .enumerate()
            .map(|(k, d)| vec![k as f64, *d, esp.diameter_curve[0] * rho.powi(k as i32)]),
    )?;
    Ok(json!({
        "spectral_radius": rho,
        "esp_holds": esp.holds,
        "contraction_rate": rate,
        "closed_form_max_error": max_error,
        "closed_form_tail_bound": closed.tail_bound,
        "echo_index": fiber.index(),
    }))
}
