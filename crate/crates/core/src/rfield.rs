//! Learnable depth receptive fields.
//!
//! A layer with `K` kernels classifies every neighbor pixel into `K + 2`
//! classes by its relative depth difference `d`: the `K` kernels plus two
//! "outside" classes (0 = in front of, `K + 1` = behind every kernel).
//!
//! ```text
//! h_k     = -(d - a_k)^2 / t                      k = 1..K
//! h_0     = -sgn(d - a_0) (d - a_0)^2 / t
//! h_{K+1} = +sgn(d - a_{K+1}) (d - a_{K+1})^2 / t
//! g       = softmax(h)          over all K + 2 classes
//! s       = softmax(b)          per-kernel rebalancing, K entries
//! ```

use std::fmt;

use thiserror::Error;

use crate::geometry::DepthDiffField;
use crate::kvfile::{KvError, KvFile};

/// Lower bound for the temperature, enforced at construction and after
/// every optimizer step.
pub const T_MIN: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RFieldError {
    #[error("need at least one kernel")]
    NoKernels,
    #[error("expected {expected} class centers for {kernels} kernels, got {got}")]
    CenterCount {
        kernels: usize,
        expected: usize,
        got: usize,
    },
    #[error("temperature {0} is below the minimum {T_MIN}")]
    Temperature(f64),
    #[error("non-finite receptive-field parameter")]
    NonFinite,
    #[error("gradient buffer has {got} entries, expected {expected}")]
    GradLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RFieldParams {
    /// Class centers/borders `a_0..a_{K+1}`.
    pub a: Vec<f64>,
    /// Softmax temperature.
    pub t: f64,
    /// Rebalancing logits `b_1..b_K`.
    pub b: Vec<f64>,
}

impl RFieldParams {
    pub fn new(a: Vec<f64>, t: f64, b: Vec<f64>) -> Result<Self, RFieldError> {
        let p = Self { a, t, b };
        p.validate()?;
        Ok(p)
    }

    /// Default initialization: centers evenly spaced one unit apart around
    /// zero (`[-1, 0, 1]` for one kernel, `[-2, -1, 0, 1, 2]` for three),
    /// `t = 1`, `b = 0`.
    pub fn init(kernels: usize) -> Result<Self, RFieldError> {
        if kernels == 0 {
            return Err(RFieldError::NoKernels);
        }
        let half = (kernels + 1) as f64 / 2.0;
        let a = (0..kernels + 2).map(|m| m as f64 - half).collect();
        Self::new(a, 1.0, vec![0.0; kernels])
    }

    pub fn validate(&self) -> Result<(), RFieldError> {
        let k = self.b.len();
        if k == 0 {
            return Err(RFieldError::NoKernels);
        }
        if self.a.len() != k + 2 {
            return Err(RFieldError::CenterCount {
                kernels: k,
                expected: k + 2,
                got: self.a.len(),
            });
        }
        if !self.t.is_finite() || self.a.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(RFieldError::NonFinite);
        }
        if self.t < T_MIN {
            return Err(RFieldError::Temperature(self.t));
        }
        Ok(())
    }

    pub fn kernels(&self) -> usize {
        self.b.len()
    }

    pub fn classes(&self) -> usize {
        self.b.len() + 2
    }

    /// Number of scalars these parameters add to a layer: `2K + 3`.
    pub fn count(&self) -> usize {
        self.a.len() + 1 + self.b.len()
    }

    pub fn clamp_temperature(&mut self) {
        if self.t < T_MIN || self.t.is_nan() {
            self.t = T_MIN;
        }
    }

    /// Indices `m` where `a_m >= a_{m+1}`.
    pub fn ordering_violations(&self) -> Vec<usize> {
        self.a
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] >= w[1])
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_kv(&self, kv: &mut KvFile, prefix: &str) {
        kv.set_list(&format!("{prefix}a"), &self.a);
        kv.set(&format!("{prefix}t"), self.t);
        kv.set_list(&format!("{prefix}b"), &self.b);
    }

    pub fn read_kv(kv: &KvFile, prefix: &str) -> Result<Self, RFieldIoError> {
        let a = kv.parse_list(&format!("{prefix}a"))?;
        let t = kv.parse_value(&format!("{prefix}t"))?;
        let b = kv.parse_list(&format!("{prefix}b"))?;
        Ok(Self::new(a, t, b)?)
    }
}

impl fmt::Display for RFieldParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a={:?} t={} s={:?}", self.a, self.t, rebalance(&self.b))
    }
}

#[derive(Debug, Error)]
pub enum RFieldIoError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Params(#[from] RFieldError),
}

#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Writes `h_0..h_{K+1}` for relative difference `d` into `out`.
#[inline]
pub fn h_values_into(d: f64, params: &RFieldParams, out: &mut [f64]) {
    let last = params.a.len() - 1;
    for (o, &a) in out.iter_mut().zip(&params.a) {
        let u = d - a;
        *o = -u * u / params.t;
    }
    let u0 = d - params.a[0];
    out[0] = -sgn(u0) * u0 * u0 / params.t;
    let ul = d - params.a[last];
    out[last] = sgn(ul) * ul * ul / params.t;
}

pub fn h_values(d: f64, params: &RFieldParams) -> Vec<f64> {
    let mut out = vec![0.0; params.classes()];
    h_values_into(d, params, &mut out);
    out
}

/// Max-subtracted softmax, in place.
#[inline]
pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Assignment weights `g_0..g_{K+1}` for a single relative difference.
pub fn assignment_weights(d: f64, params: &RFieldParams) -> Vec<f64> {
    let mut g = h_values(d, params);
    softmax_inplace(&mut g);
    g
}

/// Kernel rebalancing factors `s = softmax(b)`.
pub fn rebalance(b: &[f64]) -> Vec<f64> {
    let mut s = b.to_vec();
    softmax_inplace(&mut s);
    s
}

/// Soft assignment of every (position, offset) of a relative-difference
/// field to the `K + 2` classes, plus the rebalancing factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentField {
    pub classes: usize,
    /// `[position * offsets + offset][class]`, zero for out-of-image taps.
    pub g: Vec<f64>,
    pub s: Vec<f64>,
}

impl AssignmentField {
    pub fn kernels(&self) -> usize {
        self.s.len()
    }

    /// Class weights of one flat (position, offset) index.
    pub fn at(&self, i: usize) -> &[f64] {
        &self.g[i * self.classes..(i + 1) * self.classes]
    }
}

pub fn assign(field: &DepthDiffField, params: &RFieldParams) -> AssignmentField {
    let classes = params.classes();
    let mut g = vec![0.0; field.len() * classes];
    for (i, chunk) in g.chunks_exact_mut(classes).enumerate() {
        if field.inside[i] {
            h_values_into(field.values[i], params, chunk);
            softmax_inplace(chunk);
        }
    }
    AssignmentField {
        classes,
        g,
        s: rebalance(&params.b),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RFieldGrads {
    pub a: Vec<f64>,
    pub t: f64,
    pub b: Vec<f64>,
}

impl RFieldGrads {
    pub fn zeros(kernels: usize) -> Self {
        Self {
            a: vec![0.0; kernels + 2],
            t: 0.0,
            b: vec![0.0; kernels],
        }
    }

    pub fn accumulate(&mut self, other: &RFieldGrads) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
        self.t += other.t;
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += y;
        }
    }
}

/// Reverse-mode derivatives of [`assign`] given upstream `dL/dg` (same
/// layout as `AssignmentField::g`) and `dL/ds`. Depth gets no gradient.
pub fn assign_backward(
    field: &DepthDiffField,
    params: &RFieldParams,
    assignment: &AssignmentField,
    grad_g: &[f64],
    grad_s: &[f64],
) -> Result<RFieldGrads, RFieldError> {
    let classes = params.classes();
    let k = params.kernels();
    if grad_g.len() != assignment.g.len() {
        return Err(RFieldError::GradLength {
            expected: assignment.g.len(),
            got: grad_g.len(),
        });
    }
    if grad_s.len() != k {
        return Err(RFieldError::GradLength {
            expected: k,
            got: grad_s.len(),
        });
    }
    let mut grads = RFieldGrads::zeros(k);
    let last = classes - 1;
    let t = params.t;
    let mut h = vec![0.0; classes];
    for i in 0..field.len() {
        if !field.inside[i] {
            continue;
        }
        let g = assignment.at(i);
        let dg = &grad_g[i * classes..(i + 1) * classes];
        let dot: f64 = g.iter().zip(dg).map(|(a, b)| a * b).sum();
        let d = field.values[i];
        h_values_into(d, params, &mut h);
        for m in 0..classes {
            // dL/dh_m through the softmax Jacobian
            let dh = g[m] * (dg[m] - dot);
            if dh == 0.0 {
                continue;
            }
            let u = d - params.a[m];
            let dh_da = if m == 0 {
                2.0 * u.abs() / t
            } else if m == last {
                -2.0 * u.abs() / t
            } else {
                2.0 * u / t
            };
            grads.a[m] += dh * dh_da;
            grads.t += dh * (-h[m] / t);
        }
    }
    let s = &assignment.s;
    let dot: f64 = s.iter().zip(grad_s).map(|(a, b)| a * b).sum();
    for j in 0..k {
        grads.b[j] = s[j] * (grad_s[j] - dot);
    }
    Ok(grads)
}
