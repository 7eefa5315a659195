//! Numeric substrate: flat parameter vectors with named segments, log-space
//! primitives, the Gaussian-CDF gelu, and a central finite-difference checker
//! that every analytic gradient in the crate is validated against.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RiffError};

/// A named contiguous range of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat `f64` storage partitioned into named segments.
///
/// Segments are laid out back to back in declaration order, so they never
/// overlap and always cover the whole vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

/// Gradients share the layout of the parameters they differentiate.
pub type GradientAccumulator = ParamVector;

impl ParamVector {
    /// Zero-filled vector with the given `(name, len)` segments.
    pub fn zeros(segments: &[(&str, usize)]) -> Self {
        let mut layout = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for (name, len) in segments {
            layout.push(Segment { name: (*name).to_string(), offset, len: *len });
            offset += len;
        }
        Self { values: vec![0.0; offset], layout }
    }

    /// Rebuild from raw values and a layout, validating coverage and finiteness.
    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for seg in &layout {
            if seg.offset != expected {
                return Err(RiffError::Shape(format!(
                    "segment `{}` starts at {} but {} was expected",
                    seg.name, seg.offset, expected
                )));
            }
            expected += seg.len;
        }
        if expected != values.len() {
            return Err(RiffError::Shape(format!(
                "layout covers {expected} values but {} were given",
                values.len()
            )));
        }
        let v = Self { values, layout };
        v.check_finite()?;
        Ok(v)
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment_info(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    /// Panics if the segment does not exist; segment names are fixed by the
    /// owning model type.
    pub fn segment(&self, name: &str) -> &[f64] {
        let s = self.segment_info(name).unwrap_or_else(|| panic!("no segment `{name}`"));
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let s = self.segment_info(name).unwrap_or_else(|| panic!("no segment `{name}`")).clone();
        &mut self.values[s.offset..s.offset + s.len]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(RiffError::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(RiffError::NonFinite { index, value: self.values[index] }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// A natural-log probability. Never NaN.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogProb(f64);

impl LogProb {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(RiffError::NonFinite { index: 0, value });
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

impl From<LogProb> for f64 {
    fn from(lp: LogProb) -> f64 {
        lp.0
    }
}

fn first_non_finite(xs: &[f64]) -> Option<(usize, f64)> {
    xs.iter().copied().enumerate().find(|(_, v)| !v.is_finite())
}

/// Stable `log Σ exp(x_i)`. `-inf` entries are allowed and contribute nothing.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(RiffError::Empty("logsumexp input"));
    }
    if let Some((index, value)) = xs.iter().copied().enumerate().find(|(_, v)| v.is_nan() || *v == f64::INFINITY) {
        return Err(RiffError::NonFinite { index, value });
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `log_softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid("temperature", format!("must be positive and finite, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(RiffError::Empty("logits"));
    }
    if let Some((index, value)) = first_non_finite(logits) {
        return Err(RiffError::NonFinite { index, value });
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let lse = logsumexp(&scaled)?;
    Ok(scaled.into_iter().map(|s| s - lse).collect())
}

/// Softmax probabilities at temperature 1, for internal use on finite logits.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Gaussian-error linear unit in its exact CDF form, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx [x Φ(x)] = Φ(x) + x φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(f: F, theta: &ParamVector, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("h", format!("step must be positive, got {h}")));
    }
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let plus = f(&probe);
        probe.values[i] = orig - h;
        let minus = f(&probe);
        probe.values[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(RiffError::FiniteDiff { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Richardson-extrapolated central differences, `(4 D(h) − D(2h)) / 3`.
/// Fourth-order accurate, so a larger `h` keeps cancellation error down on
/// tiny components.
pub fn finite_diff_grad_richardson<F>(f: F, theta: &ParamVector, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> f64,
{
    let fine = finite_diff_grad(&f, theta, h)?;
    let coarse = finite_diff_grad(&f, theta, 2.0 * h)?;
    Ok(fine.iter().zip(&coarse).map(|(a, b)| (4.0 * a - b) / 3.0).collect())
}

/// Largest componentwise relative error between an analytic and a numeric
/// gradient, skipping components where both are below `floor` in magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs() >= floor || n.abs() >= floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

// Small dense helpers over row-major slices.

/// `out = M v` for an `rows × cols` row-major matrix.
pub(crate) fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `out = Mᵀ v` for an `rows × cols` row-major matrix.
pub(crate) fn matvec_t(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(v.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let vr = v[r];
        if vr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += a * vr;
        }
    }
    out
}

/// `M += scale · u vᵀ`.
pub(crate) fn add_outer(m: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    let cols = v.len();
    for (r, ur) in u.iter().enumerate() {
        let s = scale * ur;
        if s == 0.0 {
            continue;
        }
        for (a, b) in m[r * cols..(r + 1) * cols].iter_mut().zip(v) {
            *a += s * b;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
