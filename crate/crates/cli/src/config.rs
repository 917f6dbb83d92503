//! Experiment configuration: JSON documents, dotted-path overrides and the
//! typed schema every subcommand reads from.

use std::path::{Path, PathBuf};

use esplab::causality::{CmiOptions, MarginalCheck};
use esplab::det_solver::{Perturbation, PullbackConfig};
use esplab::filtering::{GaussianBelief, ObsModel, ObservationMode};
use esplab::input_law::{BaseDist, InputLawSpec};
use esplab::measures::{StochConfig, TransportMode};
use esplab::{Metric, SystemInstance, Window};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: Option<SystemInstance>,
    #[serde(default)]
    pub input: Option<InputSource>,
    #[serde(default)]
    pub solver: Option<PullbackConfig>,
    #[serde(default)]
    pub stoch: Option<StochConfig>,
    #[serde(default)]
    pub metric: Metric,
    /// Root seed; when set it replaces every nested seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub forward: Option<ForwardSection>,
    #[serde(default)]
    pub fmp: Option<FmpSection>,
    #[serde(default)]
    pub scan: Option<ScanSection>,
    #[serde(default)]
    pub stoch_solve: Option<StochSolveSection>,
    #[serde(default)]
    pub stoch_fmp: Option<StochFmpSection>,
    #[serde(default)]
    pub causality: Option<CausalitySection>,
    #[serde(default)]
    pub periodicity: Option<PeriodicitySection>,
    #[serde(default)]
    pub filter: Option<FilterSection>,
    #[serde(default)]
    pub example: Option<ExampleSection>,
}

/// Deterministic inputs, or one path sampled from a law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSource {
    /// Entries oldest first; the last one is time 0.
    Window { values: Vec<Vec<f64>> },
    Constant { value: Vec<f64>, length: usize },
    /// `before` for all but the last `after_steps` entries, then `after`.
    Switching {
        before: Vec<f64>,
        after: Vec<f64>,
        length: usize,
        after_steps: usize,
    },
    Csv { path: PathBuf },
    Law { law: InputLawSpec, length: usize },
}

impl InputSource {
    pub fn law(&self) -> Option<&InputLawSpec> {
        match self {
            InputSource::Law { law, .. } => Some(law),
            _ => None,
        }
    }

    pub fn window(&self, base: &Path, seed: u64) -> Result<Window, CliError> {
        let w = match self {
            InputSource::Window { values } => {
                let d = values.first().map(Vec::len).unwrap_or(0);
                Window::new(d, values.clone())?
            }
            InputSource::Constant { value, length } => Window::constant(value, *length)?,
            InputSource::Switching {
                before,
                after,
                length,
                after_steps,
            } => {
                if after_steps > length || before.len() != after.len() {
                    return Err(CliError::Config(
                        "input: after_steps must not exceed length and both values must share a dimension".into(),
                    ));
                }
                let mut v = vec![before.clone(); length - after_steps];
                v.extend(std::iter::repeat_n(after.clone(), *after_steps));
                Window::new(before.len(), v)?
            }
            InputSource::Csv { path } => {
                let p = resolve(base, path);
                let f = std::fs::File::open(&p).map_err(|e| CliError::Config(format!("input.path {}: {e}", p.display())))?;
                Window::read_csv(f)?
            }
            InputSource::Law { law, length } => {
                let d = law.validate()?;
                let mut rng = esplab::seed::rng_for(seed, esplab::seed::streams::INPUTS, 0);
                Window::new(d, law.sample_path(*length, &mut rng))?
            }
        };
        Ok(w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub x_init: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSection {
    /// Starting states at time 0, one trajectory each.
    pub x_init: Vec<Vec<f64>>,
    /// Future inputs `u_1, u_2, ...`.
    pub future: InputSource,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmpSection {
    pub perturbations: Vec<Perturbation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub law: InputLawSpec,
    pub samples: usize,
}

/// Where the measure checked by `stoch-solve` comes from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSource {
    /// Pullback of the input law under `stoch`.
    #[default]
    Pullback,
    /// Iid ±1 state windows with zero inputs.
    ProductSign { particles: usize, length: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochSolveSection {
    #[serde(default)]
    pub measure: MeasureSource,
    /// Also build the solution-map measure and compare the two.
    #[serde(default)]
    pub compare_solution_map: bool,
    #[serde(default = "default_pairs")]
    pub envelope_pairs: usize,
    #[serde(default = "default_tol")]
    pub solution_tol: f64,
    #[serde(default)]
    pub transport: Option<TransportMode>,
}

impl Default for StochSolveSection {
    fn default() -> Self {
        StochSolveSection {
            measure: MeasureSource::Pullback,
            compare_solution_map: false,
            envelope_pairs: default_pairs(),
            solution_tol: default_tol(),
            transport: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochFmpSection {
    pub perturbed: InputLawSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalitySection {
    pub n_future: usize,
    #[serde(default)]
    pub cmi: Option<CmiOptions>,
    #[serde(default)]
    pub marginal_check: Option<MarginalCheck>,
    /// Test this measure instead of extending a pullback measure.
    #[serde(default)]
    pub measure_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicitySection {
    pub period: usize,
    #[serde(default = "default_pairs")]
    pub envelope_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    Kalman,
    AugmentedKalman,
    Particle,
    Grid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservationSource {
    /// Rows `time, y_0, ...`.
    Csv { path: PathBuf },
    Simulate { steps: usize, x0: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub low: f64,
    pub high: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub method: FilterMethod,
    pub observations: ObservationSource,
    pub noise: ObsModel,
    #[serde(default)]
    pub mode: ObservationMode,
    /// Prior on `x_0`; the particle filter samples it coordinatewise.
    pub prior: GaussianBelief,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub x_grid: Option<GridAxis>,
    /// Discretization of Gaussian iid inputs for the grid method.
    #[serde(default)]
    pub u_grid: Option<GridAxis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleSection {
    #[serde(default = "u_plus")]
    pub u_plus: f64,
    #[serde(default = "u_minus")]
    pub u_minus: f64,
    #[serde(default = "example_horizon")]
    pub horizon: usize,
    #[serde(default = "example_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "post_switch")]
    pub post_switch_steps: usize,
    #[serde(default = "start_offset")]
    pub start_offset: f64,
}

impl Default for ExampleSection {
    fn default() -> Self {
        ExampleSection {
            u_plus: u_plus(),
            u_minus: u_minus(),
            horizon: example_horizon(),
            ensemble_size: example_ensemble(),
            post_switch_steps: post_switch(),
            start_offset: start_offset(),
        }
    }
}

fn default_pairs() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-10
}
fn default_particles() -> usize {
    1000
}
fn u_plus() -> f64 {
    1.5
}
fn u_minus() -> f64 {
    0.5
}
fn example_horizon() -> usize {
    200
}
fn example_ensemble() -> usize {
    256
}
fn post_switch() -> usize {
    100
}
fn start_offset() -> f64 {
    1e-6
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Sets `path` (dot separated) in `doc` to `raw`, parsed as JSON when
/// possible and kept as a string otherwise. Missing objects are created.
pub fn set_dotted(doc: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("--set: malformed key `{path}`")));
    }
    let mut cur = doc;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| CliError::Config(format!("--set {path}: `{key}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("--set {path}: index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Config(format!(
                    "--set {path}: `{}` is not an object",
                    keys[..i].join(".")
                )))
            }
        };
    }
    Ok(())
}

/// Replaces every `seed` key below the root with the root seed.
pub(crate) fn propagate_seed(doc: &mut Value, seed: u64) {
    match doc {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if k == "seed" && v.is_u64() {
                    *v = Value::from(seed);
                } else {
                    propagate_seed(v, seed);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| propagate_seed(v, seed)),
        _ => {}
    }
}

/// The resolved JSON document and its typed view.
pub struct Loaded {
    pub doc: Value,
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

pub fn load(path: Option<&Path>, seed: Option<u64>, sets: &[String]) -> Result<Loaded, CliError> {
    let (mut doc, base_dir) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let doc: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: invalid JSON: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (doc, base)
        }
        None => (Value::Object(Default::default()), PathBuf::from(".")),
    };
    if !doc.is_object() {
        return Err(CliError::Config("config root must be a JSON object".into()));
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{s}`")))?;
        set_dotted(&mut doc, k.trim(), v.trim())?;
    }
    if let Some(seed) = seed {
        doc["seed"] = Value::from(seed);
    }
    if let Some(root) = doc.get("seed").and_then(Value::as_u64) {
        if let Value::Object(map) = &mut doc {
            for (k, v) in map.iter_mut() {
                if k != "seed" {
                    propagate_seed(v, root);
                }
            }
        }
    }
    let config = parse(&doc)?;
    Ok(Loaded { doc, config, base_dir })
}

/// Typed view with a field path in every schema error.
pub fn parse(doc: &Value) -> Result<ExperimentConfig, CliError> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("{path}: {inner}"))
        }
    })
}

impl ExperimentConfig {
    pub fn system(&self) -> Result<&SystemInstance, CliError> {
        self.system.as_ref().ok_or_else(|| CliError::Config("system: missing field".into()))
    }

    pub fn input(&self) -> Result<&InputSource, CliError> {
        self.input.as_ref().ok_or_else(|| CliError::Config("input: missing field".into()))
    }

    pub fn solver(&self) -> Result<PullbackConfig, CliError> {
        let mut s = self.solver.clone().ok_or_else(|| CliError::Config("solver: missing field".into()))?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s.validate().map_err(|e| CliError::Config(format!("solver: {e}")))?;
        Ok(s)
    }

    pub fn stoch(&self) -> Result<StochConfig, CliError> {
        let mut s = self.stoch.clone().ok_or_else(|| CliError::Config("stoch: missing field".into()))?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s.validate(self.system()?).map_err(|e| CliError::Config(format!("stoch: {e}")))?;
        Ok(s)
    }

    /// Seed required by stochastic subcommands.
    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("seed: required for stochastic runs (set it in the config or pass --seed)".into()))
    }

    pub fn law(&self) -> Result<&InputLawSpec, CliError> {
        let law = self
            .input()?
            .law()
            .ok_or_else(|| CliError::Config("input: stochastic subcommands need `kind: law`".into()))?;
        law.validate().map_err(|e| CliError::Config(format!("input.law: {e}")))?;
        Ok(law)
    }

    pub fn section<'a, T>(&self, v: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        v.as_ref().ok_or_else(|| CliError::Config(format!("{name}: missing field")))
    }
}

/// Gaussian law of the prior as a product distribution (diagonal).
pub fn prior_dist(prior: &GaussianBelief) -> BaseDist {
    BaseDist::Normal {
        mean: prior.mean.clone(),
        std: prior.variances().iter().map(|v| v.max(0.0).sqrt()).collect(),
    }
}
