//! Concrete state-space systems `x_t = f(x_{t-1}, u_t)`, `y_t = h(x_t)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{matrix_from_rows, matrix_to_rows};
use crate::sequences::{ExtendedInput, Window};

/// Matrix that (de)serializes as row-major nested arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat(pub DMatrix<f64>);

impl Serialize for Mat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_rows(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        matrix_from_rows(&rows).map(Mat).map_err(serde::de::Error::custom)
    }
}

impl From<DMatrix<f64>> for Mat {
    fn from(m: DMatrix<f64>) -> Self {
        Mat(m)
    }
}

/// Post-processing layer applied componentwise after a builtin state map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Tanh,
    /// `z -> M z + c`
    Affine { matrix: Mat, offset: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateMap {
    /// `A x + B u`
    Linear { a: Mat, b: Mat },
    /// `(1 - leak) x + leak * tanh(A x + B u + bias)`
    LeakyTanhEsn {
        a: Mat,
        b: Mat,
        leak: f64,
        bias: Vec<f64>,
    },
    /// Scalar map `u x / (1 + |x|)`.
    Kloeden,
    /// A builtin map followed by a chain of layers.
    Layered { base: Box<StateMap>, layers: Vec<Layer> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Readout {
    #[default]
    Identity,
    Linear { w: Mat },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub input: usize,
    pub output: usize,
}

/// Serialized form: `{state_map: {kind, ...}, readout: {kind, ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub state_map: StateMap,
    #[serde(default)]
    pub readout: Readout,
}

/// Validated, immutable system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemSpec", into = "SystemSpec")]
pub struct SystemInstance {
    state_map: StateMap,
    readout: Readout,
    dims: Dims,
}

impl TryFrom<SystemSpec> for SystemInstance {
    type Error = Error;

    fn try_from(s: SystemSpec) -> Result<Self> {
        SystemInstance::new(s.state_map, s.readout)
    }
}

impl From<SystemInstance> for SystemSpec {
    fn from(s: SystemInstance) -> Self {
        SystemSpec {
            state_map: s.state_map,
            readout: s.readout,
        }
    }
}

fn map_dims(map: &StateMap) -> Result<(usize, usize)> {
    match map {
        StateMap::Linear { a, b } => {
            let (a, b) = (&a.0, &b.0);
            if a.nrows() != a.ncols() || a.nrows() == 0 {
                return shape_err(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols()));
            }
            if b.nrows() != a.nrows() || b.ncols() == 0 {
                return shape_err(format!("B must be {}xd, got {}x{}", a.nrows(), b.nrows(), b.ncols()));
            }
            Ok((a.nrows(), b.ncols()))
        }
        StateMap::LeakyTanhEsn { a, b, leak, bias } => {
            let (n, d) = map_dims(&StateMap::Linear { a: a.clone(), b: b.clone() })?;
            if !(*leak > 0.0 && *leak <= 1.0) {
                return invalid(format!("leak rate {leak} not in (0,1]"));
            }
            if bias.len() != n {
                return shape_err(format!("bias has length {}, expected {n}", bias.len()));
            }
            Ok((n, d))
        }
        StateMap::Kloeden => Ok((1, 1)),
        StateMap::Layered { base, layers } => {
            let (n, d) = map_dims(base)?;
            for layer in layers {
                if let Layer::Affine { matrix, offset } = layer {
                    if matrix.0.nrows() != n || matrix.0.ncols() != n || offset.len() != n {
                        return shape_err(format!("affine layer must be {n}x{n} with offset of length {n}"));
                    }
                }
            }
            Ok((n, d))
        }
    }
}

fn apply_map(map: &StateMap, x: &[f64], u: &[f64]) -> Vec<f64> {
    match map {
        StateMap::Linear { a, b } => {
            let y = &a.0 * DVector::from_column_slice(x) + &b.0 * DVector::from_column_slice(u);
            y.as_slice().to_vec()
        }
        StateMap::LeakyTanhEsn { a, b, leak, bias } => {
            let pre = &a.0 * DVector::from_column_slice(x) + &b.0 * DVector::from_column_slice(u);
            x.iter()
                .zip(pre.iter().zip(bias))
                .map(|(xi, (p, c))| (1.0 - leak) * xi + leak * (p + c).tanh())
                .collect()
        }
        StateMap::Kloeden => vec![u[0] * x[0] / (1.0 + x[0].abs())],
        StateMap::Layered { base, layers } => {
            let mut z = apply_map(base, x, u);
            for layer in layers {
                z = match layer {
                    Layer::Tanh => z.iter().map(|v| v.tanh()).collect(),
                    Layer::Affine { matrix, offset } => {
                        let y = &matrix.0 * DVector::from_column_slice(&z);
                        y.iter().zip(offset).map(|(a, c)| a + c).collect()
                    }
                };
            }
            z
        }
    }
}

/// Pair of solution windows driven by the same input, for
/// [`SystemInstance::distinguishes_check`].
#[derive(Debug, Clone)]
pub struct SolutionPair {
    pub first: (Window, Window),
    pub second: (Window, Window),
}

#[derive(Debug, Clone, Serialize)]
pub struct DistinguishReport {
    /// `(pair index, time)` where equal previous outputs led to different outputs.
    pub violations: Vec<(usize, isize)>,
    /// `A ker(W) ⊆ ker(W)`; present for linear maps with linear readout.
    pub kernel_invariant: Option<bool>,
}

impl SystemInstance {
    pub fn new(state_map: StateMap, readout: Readout) -> Result<Self> {
        let (n, d) = map_dims(&state_map)?;
        let m = match &readout {
            Readout::Identity => n,
            Readout::Linear { w } => {
                if w.0.ncols() != n || w.0.nrows() == 0 {
                    return shape_err(format!("readout W must be mxn with n = {n}"));
                }
                w.0.nrows()
            }
        };
        Ok(SystemInstance {
            state_map,
            readout,
            dims: Dims { state: n, input: d, output: m },
        })
    }

    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        Self::new(StateMap::Linear { a: Mat(a), b: Mat(b) }, Readout::Identity)
    }

    pub fn kloeden() -> Self {
        Self::new(StateMap::Kloeden, Readout::Identity).expect("kloeden is well-formed")
    }

    pub fn with_readout(self, readout: Readout) -> Result<Self> {
        Self::new(self.state_map, readout)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn state_map(&self) -> &StateMap {
        &self.state_map
    }

    pub fn readout(&self) -> &Readout {
        &self.readout
    }

    /// `(A, B)` when the state map is linear.
    pub fn linear_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.state_map {
            StateMap::Linear { a, b } => Some((&a.0, &b.0)),
            _ => None,
        }
    }

    pub fn eval_f(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.state || u.len() != self.dims.input {
            return shape_err(format!(
                "f expects ({}, {}) but got ({}, {})",
                self.dims.state,
                self.dims.input,
                x.len(),
                u.len()
            ));
        }
        if !x.iter().chain(u).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("state map arguments".into()));
        }
        let y = apply_map(&self.state_map, x, u);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("state map output".into()));
        }
        Ok(y)
    }

    pub fn eval_h(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.state {
            return shape_err(format!("h expects dimension {}, got {}", self.dims.state, x.len()));
        }
        Ok(match &self.readout {
            Readout::Identity => x.to_vec(),
            Readout::Linear { w } => (&w.0 * DVector::from_column_slice(x)).as_slice().to_vec(),
        })
    }

    /// One step of the extended system: the state window gains
    /// `f(x_0, u_1)` and the input is shifted so that `u_1` becomes `u_0`.
    pub fn phi_step(&self, mut state: Window, mut input: ExtendedInput) -> Result<(Window, ExtendedInput)> {
        if input.future_len() == 0 {
            return Err(Error::ExhaustedFuture);
        }
        let next = self.eval_f(state.newest(), input.future_at(1))?;
        state.push(&next)?;
        input.shift_left()?;
        Ok((state, input))
    }

    /// Applies `F(x, u)_t = (f(x_{t-1}, u_t), u_t)` to a window pair and
    /// returns the state part. Without `pre_pad` (the state at time `-len`)
    /// the first output has no predecessor and is dropped.
    #[allow(non_snake_case)]
    pub fn eval_F(&self, x: &Window, u: &Window, pre_pad: Option<&[f64]>) -> Result<Window> {
        if x.len() != u.len() {
            return shape_err(format!("state window length {} != input window length {}", x.len(), u.len()));
        }
        let n = x.len();
        let mut out = Vec::with_capacity(n * self.dims.state);
        if let Some(p) = pre_pad {
            out.extend(self.eval_f(p, u.lag(n - 1))?);
        } else if n == 1 {
            return invalid("a length-1 window without pre-pad state has no F image");
        }
        for k in (0..n - 1).rev() {
            out.extend(self.eval_f(x.lag(k + 1), u.lag(k))?);
        }
        Window::from_flat(self.dims.state, out)
    }

    /// Largest `|x_t - f(x_{t-1}, u_t)|` (sup norm) over the window.
    pub fn residual(&self, x: &Window, u: &Window) -> Result<f64> {
        let image = self.eval_F(x, u, None)?;
        let tail = x.take_recent(x.len() - 1)?;
        Ok(crate::sequences::sup_dist(image.as_flat(), tail.as_flat()))
    }

    /// Checks `h(x_{t-1}) = h(x'_{t-1}) ⇒ h(x_t) = h(x'_t)` on sample pairs.
    pub fn distinguishes_check(&self, pairs: &[SolutionPair], tol: f64) -> Result<DistinguishReport> {
        let mut violations = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            let ((x1, u1), (x2, u2)) = (&p.first, &p.second);
            if u1 != u2 {
                return invalid(format!("pair {i} has mismatched inputs"));
            }
            if x1.len() != x2.len() {
                return shape_err(format!("pair {i} has state windows of different lengths"));
            }
            for k in (0..x1.len() - 1).rev() {
                let prev_eq = crate::sequences::sup_dist(&self.eval_h(x1.lag(k + 1))?, &self.eval_h(x2.lag(k + 1))?) <= tol;
                let now_eq = crate::sequences::sup_dist(&self.eval_h(x1.lag(k))?, &self.eval_h(x2.lag(k))?) <= tol;
                if prev_eq && !now_eq {
                    violations.push((i, -(k as isize)));
                }
            }
        }
        let kernel_invariant = match (&self.state_map, &self.readout) {
            (StateMap::Linear { a, .. }, Readout::Linear { w }) => Some(kernel_invariant(&a.0, &w.0, 1e-10)),
            _ => None,
        };
        Ok(DistinguishReport { violations, kernel_invariant })
    }
}

/// Whether `A` maps `ker(W)` into `ker(W)`.
pub fn kernel_invariant(a: &DMatrix<f64>, w: &DMatrix<f64>, tol: f64) -> bool {
    // ker(W) = ker(W^T W), spanned by eigenvectors with (numerically) zero eigenvalue.
    let gram = w.transpose() * w;
    let eig = gram.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    eig.eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, l)| l.abs() <= tol * scale)
        .all(|(i, _)| {
            let k = eig.eigenvectors.column(i).into_owned();
            (w * (a * k)).amax() <= tol.sqrt() * scale.sqrt() * (1.0 + a.amax())
        })
}
