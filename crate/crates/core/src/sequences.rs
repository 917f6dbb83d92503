//! Finite windows of left-infinite sequences and the metrics between them.
//!
//! A [`Window`] of length `n` stores the entries at times `-n+1, ..., 0`,
//! oldest first. Time `0` is always the most recent entry. Operators that act
//! on sequences (shift, concatenation, truncation) act on windows by
//! dropping or appending entries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WindowRepr", into = "WindowRepr")]
pub struct Window {
    dim: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WindowRepr {
    dim: usize,
    values: Vec<Vec<f64>>,
}

impl TryFrom<WindowRepr> for Window {
    type Error = Error;

    fn try_from(r: WindowRepr) -> Result<Self> {
        Window::new(r.dim, r.values)
    }
}

impl From<Window> for WindowRepr {
    fn from(w: Window) -> Self {
        WindowRepr {
            dim: w.dim,
            values: w.values(),
        }
    }
}

impl Window {
    pub fn new(dim: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return invalid("window dimension must be positive");
        }
        if values.is_empty() {
            return invalid("window length must be at least 1");
        }
        let mut data = Vec::with_capacity(dim * values.len());
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return shape_err(format!(
                    "entry {i} has dimension {}, expected {dim}",
                    v.len()
                ));
            }
            data.extend_from_slice(v);
        }
        Ok(Window { dim, data })
    }

    /// Builds a window from row-major storage, oldest entry first.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return shape_err(format!(
                "flat storage of length {} does not hold whole entries of dimension {dim}",
                data.len()
            ));
        }
        Ok(Window { dim, data })
    }

    /// Scalar window from values listed oldest first.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::from_flat(1, values.to_vec())
    }

    pub fn constant(value: &[f64], len: usize) -> Result<Self> {
        if len == 0 {
            return invalid("window length must be at least 1");
        }
        Self::from_flat(value.len(), value.repeat(len))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Windows are never empty; provided for clippy's sake.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Entry `k` steps into the past (`k = 0` is the newest).
    pub fn lag(&self, k: usize) -> &[f64] {
        let i = self.len() - 1 - k;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Entry at time `t <= 0`.
    pub fn at(&self, t: isize) -> &[f64] {
        assert!(t <= 0, "window times are non-positive");
        self.lag((-t) as usize)
    }

    pub fn newest(&self) -> &[f64] {
        self.lag(0)
    }

    pub fn oldest(&self) -> &[f64] {
        &self.data[..self.dim]
    }

    /// Iterates entries from oldest to newest.
    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.iter().map(<[f64]>::to_vec).collect()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return shape_err(format!(
                "vector of dimension {} does not match window dimension {}",
                v.len(),
                self.dim
            ));
        }
        Ok(())
    }

    /// Appends `v` as the new time-0 entry and drops the oldest one.
    pub fn shift_append(&self, v: &[f64]) -> Result<Window> {
        self.check_dim(v)?;
        let mut data = Vec::with_capacity(self.data.len());
        data.extend_from_slice(&self.data[self.dim..]);
        data.extend_from_slice(v);
        Ok(Window { dim: self.dim, data })
    }

    /// Appends `v` as the new time-0 entry, growing the window by one.
    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        self.check_dim(v)?;
        self.data.extend_from_slice(v);
        Ok(())
    }

    /// Discards the `k` most recent entries (the window analogue of `T^k`).
    pub fn drop_right(&self, k: usize) -> Result<Window> {
        if k >= self.len() {
            return invalid(format!(
                "cannot drop {k} entries from a window of length {}",
                self.len()
            ));
        }
        Ok(Window {
            dim: self.dim,
            data: self.data[..self.data.len() - k * self.dim].to_vec(),
        })
    }

    /// Keeps the `n` most recent entries.
    pub fn take_recent(&self, n: usize) -> Result<Window> {
        if n == 0 || n > self.len() {
            return invalid(format!(
                "cannot keep {n} entries of a window of length {}",
                self.len()
            ));
        }
        Ok(Window {
            dim: self.dim,
            data: self.data[self.data.len() - n * self.dim..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Writes one row per time index (oldest first), one column per component.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.dim).map(|c| format!("c{c}")))?;
        for entry in self.iter() {
            w.write_record(entry.iter().map(|x| format!("{x:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format of [`Window::write_csv`]; a header row is optional.
    pub fn read_csv<R: Read>(reader: R) -> Result<Window> {
        let rows = read_numeric_rows(reader)?;
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        Window::new(dim, rows)
    }
}

/// Parses a CSV of numbers, skipping a leading header row if it does not parse.
pub(crate) fn read_numeric_rows<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|s| s.parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return invalid(format!("csv row {i}: {e}")),
        }
    }
    Ok(rows)
}

/// Window whose past part is followed by finitely many future entries
/// `u_1, u_2, ...`; the finite stand-in for an element of the two-sided
/// input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedInput {
    pub past: Window,
    future: Vec<f64>,
}

impl ExtendedInput {
    pub fn new(past: Window, future: Vec<Vec<f64>>) -> Result<Self> {
        let dim = past.dim();
        let mut flat = Vec::with_capacity(future.len() * dim);
        for (i, v) in future.iter().enumerate() {
            if v.len() != dim {
                return shape_err(format!("future entry {} has dimension {}", i + 1, v.len()));
            }
            flat.extend_from_slice(v);
        }
        Ok(ExtendedInput { past, future: flat })
    }

    pub fn without_future(past: Window) -> Self {
        ExtendedInput {
            past,
            future: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.past.dim()
    }

    pub fn future_len(&self) -> usize {
        self.future.len() / self.dim()
    }

    /// Future entry `u_k` for `k >= 1`.
    pub fn future_at(&self, k: usize) -> &[f64] {
        assert!(k >= 1 && k <= self.future_len());
        let d = self.dim();
        &self.future[(k - 1) * d..k * d]
    }

    pub fn future(&self) -> Vec<Vec<f64>> {
        self.future.chunks_exact(self.dim()).map(<[f64]>::to_vec).collect()
    }

    /// Left shift: `u_1` becomes the new time-0 entry of the past.
    pub fn shift_left(&mut self) -> Result<()> {
        if self.future.is_empty() {
            return Err(Error::ExhaustedFuture);
        }
        let d = self.dim();
        let next: Vec<f64> = self.future.drain(..d).collect();
        self.past.push(&next)
    }

    /// Replaces the future part.
    pub fn set_future(&mut self, future: Vec<Vec<f64>>) -> Result<()> {
        *self = ExtendedInput::new(self.past.clone(), future)?;
        Ok(())
    }

    /// Past and future spliced into one window ending at the last future entry.
    pub fn full_window(&self) -> Window {
        let mut data = self.past.as_flat().to_vec();
        data.extend_from_slice(&self.future);
        Window {
            dim: self.dim(),
            data,
        }
    }
}

/// Source of future inputs for the sampler-driven extension policy.
pub trait FutureSampler {
    fn sample_future(&self, past: &Window, n_future: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
}

/// A right-inverse of truncation: how to invent a future for a past window.
pub enum FuturePolicy<'a> {
    RepeatLast,
    Zeros,
    Sampler {
        sampler: &'a dyn FutureSampler,
        seed: u64,
    },
}

pub fn extend_right(u: &Window, policy: &FuturePolicy<'_>, n_future: usize) -> Result<ExtendedInput> {
    let future = match policy {
        FuturePolicy::RepeatLast => vec![u.newest().to_vec(); n_future],
        FuturePolicy::Zeros => vec![vec![0.0; u.dim()]; n_future],
        FuturePolicy::Sampler { sampler, seed } => sampler.sample_future(u, n_future, *seed)?,
    };
    ExtendedInput::new(u.clone(), future)
}

/// `(..., u'_{-1}, u'_0, u_{-n}, ..., u_0)` truncated to `out_len` entries
/// (default `w.len()`).
pub fn concat_n(w_prime: &Window, w: &Window, n: usize, out_len: Option<usize>) -> Result<Window> {
    if w_prime.dim() != w.dim() {
        return shape_err("concatenated windows have different dimensions");
    }
    if n + 1 > w.len() {
        return invalid(format!("n + 1 = {} exceeds window length {}", n + 1, w.len()));
    }
    let out_len = out_len.unwrap_or(w.len());
    if out_len == 0 {
        return invalid("output length must be at least 1");
    }
    let from_w = (n + 1).min(out_len);
    let from_prime = out_len - from_w;
    if from_prime > w_prime.len() {
        return invalid(format!(
            "prefix window of length {} is too short for {from_prime} entries",
            w_prime.len()
        ));
    }
    let d = w.dim();
    let mut data = Vec::with_capacity(out_len * d);
    if from_prime > 0 {
        data.extend_from_slice(&w_prime.as_flat()[(w_prime.len() - from_prime) * d..]);
    }
    data.extend_from_slice(&w.as_flat()[(w.len() - from_w) * d..]);
    Window::from_flat(d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSeq {
    /// Weight `rate^k` on lag `k`.
    Geometric { rate: f64 },
    /// `sum_k 2^{-k} min(1, |Δ_k|)`, a metric for the product topology.
    Product,
}

impl Default for WeightSeq {
    fn default() -> Self {
        WeightSeq::Geometric { rate: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormOrder {
    Finite(f64),
    Infinity,
}

impl Serialize for NormOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NormOrder::Finite(p) => s.serialize_f64(*p),
            NormOrder::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for NormOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) if p >= 1.0 && p.is_finite() => Ok(NormOrder::Finite(p)),
            Raw::Str(s) if s == "inf" || s == "infinity" => Ok(NormOrder::Infinity),
            _ => Err(serde::de::Error::custom("norm order must be a number >= 1 or \"inf\"")),
        }
    }
}

/// Metric on windows of equal shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metric {
    #[serde(default)]
    pub weights: WeightSeq,
    #[serde(default = "default_order")]
    pub p: NormOrder,
}

fn default_order() -> NormOrder {
    NormOrder::Infinity
}

impl Default for Metric {
    fn default() -> Self {
        Metric {
            weights: WeightSeq::default(),
            p: NormOrder::Infinity,
        }
    }
}

impl Metric {
    pub fn geometric_sup(rate: f64) -> Self {
        Metric {
            weights: WeightSeq::Geometric { rate },
            p: NormOrder::Infinity,
        }
    }

    pub fn product() -> Self {
        Metric {
            weights: WeightSeq::Product,
            p: NormOrder::Infinity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let WeightSeq::Geometric { rate } = self.weights {
            if !(rate > 0.0 && rate < 1.0) {
                return invalid(format!("geometric weight rate {rate} not in (0,1)"));
            }
        }
        if let NormOrder::Finite(p) = self.p {
            if !(p >= 1.0) {
                return invalid(format!("norm order {p} below 1"));
            }
        }
        Ok(())
    }

    /// Distance between flat buffers holding `len` entries of dimension `dim`,
    /// oldest first.
    pub(crate) fn dist_flat(&self, a: &[f64], b: &[f64], dim: usize) -> f64 {
        let len = a.len() / dim;
        let entry = |k: usize| {
            let i = (len - 1 - k) * dim;
            (&a[i..i + dim], &b[i..i + dim])
        };
        match self.weights {
            WeightSeq::Product => {
                // The product metric uses the sup-norm on entries regardless of p.
                let mut s = 0.0;
                let mut w = 1.0;
                for k in 0..len {
                    let (x, y) = entry(k);
                    let d = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    s += w * d.min(1.0);
                    w *= 0.5;
                }
                s
            }
            WeightSeq::Geometric { rate } => match self.p {
                NormOrder::Infinity => {
                    let mut m: f64 = 0.0;
                    let mut w = 1.0;
                    for k in 0..len {
                        let (x, y) = entry(k);
                        for (p, q) in x.iter().zip(y) {
                            m = m.max(w * (p - q).abs());
                        }
                        w *= rate;
                    }
                    m
                }
                NormOrder::Finite(p) => {
                    let mut s = 0.0;
                    let mut w = 1.0;
                    for k in 0..len {
                        let (x, y) = entry(k);
                        for (u, v) in x.iter().zip(y) {
                            s += (w * (u - v).abs()).powf(p);
                        }
                        w *= rate;
                    }
                    s.powf(1.0 / p)
                }
            },
        }
    }

    pub fn dist(&self, w1: &Window, w2: &Window) -> Result<f64> {
        if w1.dim() != w2.dim() || w1.len() != w2.len() {
            return shape_err(format!(
                "windows {}x{} and {}x{} differ in shape",
                w1.len(),
                w1.dim(),
                w2.len(),
                w2.dim()
            ));
        }
        Ok(self.dist_flat(w1.as_flat(), w2.as_flat(), w1.dim()))
    }
}

/// Distance between two windows; see [`Metric`].
pub fn dist(w1: &Window, w2: &Window, weights: WeightSeq, p: NormOrder) -> Result<f64> {
    Metric { weights, p }.dist(w1, w2)
}

/// Sup-norm distance between two vectors.
pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
