//! Convolution operators: standard 2D, malleable 2.5D, Depth-aware and
//! hard 2.5D, with forward and reverse-mode passes.
//!
//! Every operator is a cross-correlation (no kernel flip) with zero
//! padding. The depth-conditioned operators weight each tap by a
//! coefficient computed from the depth window:
//!
//! | operator    | kernels | coefficient of kernel `k` at a tap          |
//! |-------------|---------|---------------------------------------------|
//! | standard    | 1       | 1                                           |
//! | malleable   | K       | `s_k * g_k(rel)` (soft, learnable)          |
//! | depth-aware | 1       | `exp(-alpha * |abs depth difference|)`      |
//! | hard 2.5D   | K       | 1 if `k-1-K/2 <= rel < k-K/2`, else 0        |
//!
//! Taps outside the image contribute nothing. A bias, when present, is
//! added once per output channel after the kernel sum.

mod budget;
mod engine;

pub use budget::{count_params, estimate_flops, Budget, LayerDescriptor, LayerKind};

use thiserror::Error;

use crate::geometry::{
    absolute_depth_differences, relative_depth_differences, CameraIntrinsics, DepthDiffField, DepthField,
    GeometryError, RfSpec,
};
use crate::rfield::{self, AssignmentField, RFieldError, RFieldGrads, RFieldParams};
use crate::tensor::{Tensor4, TensorError};

/// Default `alpha` for the Depth-aware baseline (the original operator's
/// published default).
pub const DEFAULT_DEPTH_AWARE_ALPHA: f64 = 8.3;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("an operator needs at least one kernel bank")]
    NoKernels,
    #[error("kernel banks disagree in shape: {0:?} vs {1:?}")]
    BankShape([usize; 4], [usize; 4]),
    #[error("weights are {weights:?} but the layer spec says {spec:?}")]
    KernelSize {
        weights: (usize, usize),
        spec: (usize, usize),
    },
    #[error("input has {input} channels, weights expect {weights}")]
    Channels { input: usize, weights: usize },
    #[error("input {h}x{w} is smaller than the dilated kernel")]
    TooSmall { h: usize, w: usize },
    #[error("bias has {got} entries, expected {expected}")]
    Bias { expected: usize, got: usize },
    #[error("coefficient buffer has {got} entries, expected {expected}")]
    Coefficients { expected: usize, got: usize },
    #[error("output gradient has dims {got:?}, expected {expected:?}")]
    GradShape { expected: [usize; 4], got: [usize; 4] },
    #[error("alpha must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("source weights {source_dims:?} do not fit banks of {expected:?}")]
    SourceShape {
        source_dims: [usize; 4],
        expected: [usize; 4],
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    RField(#[from] RFieldError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub x: Tensor4,
    pub weights: Vec<Tensor4>,
    pub bias: Vec<f64>,
}

fn check_banks(weights: &[Tensor4], spec: &RfSpec) -> Result<(), ConvError> {
    spec.validate()?;
    let first = weights.first().ok_or(ConvError::NoKernels)?;
    for w in weights {
        if w.dims() != first.dims() {
            return Err(ConvError::BankShape(first.dims(), w.dims()));
        }
    }
    if (first.h(), first.w()) != spec.kernel {
        return Err(ConvError::KernelSize {
            weights: (first.h(), first.w()),
            spec: spec.kernel,
        });
    }
    Ok(())
}

fn check_bias(bias: &Option<Vec<f64>>, cout: usize) -> Result<(), ConvError> {
    match bias {
        Some(b) if b.len() != cout => Err(ConvError::Bias {
            expected: cout,
            got: b.len(),
        }),
        _ => Ok(()),
    }
}

fn refs(banks: &[Tensor4]) -> Vec<&Tensor4> {
    banks.iter().collect()
}

// ---------------------------------------------------------------------------
// standard

pub fn conv2d_forward(x: &Tensor4, weights: &Tensor4, bias: Option<&[f64]>, spec: &RfSpec) -> Result<Tensor4, ConvError> {
    engine::forward(x, &[weights], bias, spec, None)
}

pub fn conv2d_backward(x: &Tensor4, weights: &Tensor4, spec: &RfSpec, grad_y: &Tensor4) -> Result<ConvGrads, ConvError> {
    let g = engine::backward(x, &[weights], spec, None, grad_y, false)?;
    Ok(ConvGrads {
        x: g.x,
        weights: g.banks,
        bias: g.bias,
    })
}

// ---------------------------------------------------------------------------
// malleable 2.5D

#[derive(Debug, Clone, PartialEq)]
pub struct MalleableParams {
    /// `K` banks of `(c_out, c_in, kh, kw)`.
    pub weights: Vec<Tensor4>,
    pub bias: Option<Vec<f64>>,
    pub rfield: RFieldParams,
    pub spec: RfSpec,
}

impl MalleableParams {
    pub fn new(
        weights: Vec<Tensor4>,
        bias: Option<Vec<f64>>,
        rfield: RFieldParams,
        spec: RfSpec,
    ) -> Result<Self, ConvError> {
        check_banks(&weights, &spec)?;
        rfield.validate()?;
        if rfield.kernels() != weights.len() {
            return Err(RFieldError::CenterCount {
                kernels: weights.len(),
                expected: weights.len() + 2,
                got: rfield.a.len(),
            }
            .into());
        }
        check_bias(&bias, weights[0].n())?;
        Ok(Self {
            weights,
            bias,
            rfield,
            spec,
        })
    }

    pub fn kernels(&self) -> usize {
        self.weights.len()
    }

    /// Scalars added on top of the `K` kernel banks: `2K + 3`.
    pub fn introduced_param_count(&self) -> usize {
        self.rfield.count()
    }

    /// `sum_k s_k * g_k(rel) * w_k`: the single kernel the layer reduces to
    /// when every tap sees relative difference `rel`.
    pub fn merged_kernel(&self, rel: f64) -> Tensor4 {
        let g = rfield::assignment_weights(rel, &self.rfield);
        let s = rfield::rebalance(&self.rfield.b);
        let mut out = Tensor4::zeros(self.weights[0].dims()).expect("bank dims are valid");
        for (k, w) in self.weights.iter().enumerate() {
            out.axpy_inplace(s[k] * g[k + 1], w).expect("banks share dims");
        }
        out
    }
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct MalleableTape {
    pub x: Tensor4,
    pub diffs: DepthDiffField,
    pub assignment: AssignmentField,
    coef: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalleableGrads {
    pub x: Tensor4,
    pub weights: Vec<Tensor4>,
    pub bias: Vec<f64>,
    pub rfield: RFieldGrads,
}

/// `coef[i * K + k] = s_k * g_{k+1}(i)` for every flat (position, offset).
fn malleable_coef(a: &AssignmentField) -> Vec<f64> {
    let k = a.kernels();
    let mut coef = vec![0.0; (a.g.len() / a.classes) * k];
    for (i, c) in coef.chunks_exact_mut(k).enumerate() {
        let g = a.at(i);
        for j in 0..k {
            c[j] = a.s[j] * g[j + 1];
        }
    }
    coef
}

pub fn malleable_forward(
    x: &Tensor4,
    depth: &DepthField,
    camera: &CameraIntrinsics,
    params: &MalleableParams,
) -> Result<Tensor4, ConvError> {
    malleable_forward_with_tape(x, depth, camera, params).map(|(y, _)| y)
}

pub fn malleable_forward_with_tape(
    x: &Tensor4,
    depth: &DepthField,
    camera: &CameraIntrinsics,
    params: &MalleableParams,
) -> Result<(Tensor4, MalleableTape), ConvError> {
    depth.check_compatible(&params.spec, x.n(), x.h(), x.w())?;
    let diffs = relative_depth_differences(depth, camera, &params.spec)?;
    let assignment = rfield::assign(&diffs, &params.rfield);
    let coef = malleable_coef(&assignment);
    let y = engine::forward(
        x,
        &refs(&params.weights),
        params.bias.as_deref(),
        &params.spec,
        Some(&coef),
    )?;
    Ok((
        y,
        MalleableTape {
            x: x.clone(),
            diffs,
            assignment,
            coef,
        },
    ))
}

pub fn malleable_backward(
    grad_y: &Tensor4,
    tape: &MalleableTape,
    params: &MalleableParams,
) -> Result<MalleableGrads, ConvError> {
    let eg = engine::backward(
        &tape.x,
        &refs(&params.weights),
        &params.spec,
        Some(&tape.coef),
        grad_y,
        true,
    )?;
    let k = params.kernels();
    let a = &tape.assignment;
    let classes = a.classes;
    let mut grad_g = vec![0.0; a.g.len()];
    let mut grad_s = vec![0.0; k];
    for (i, dc) in eg.coef.chunks_exact(k).enumerate() {
        let g = a.at(i);
        for j in 0..k {
            grad_g[i * classes + j + 1] = a.s[j] * dc[j];
            grad_s[j] += g[j + 1] * dc[j];
        }
    }
    let rfield = rfield::assign_backward(&tape.diffs, &params.rfield, a, &grad_g, &grad_s)?;
    Ok(MalleableGrads {
        x: eg.x,
        weights: eg.banks,
        bias: eg.bias,
        rfield,
    })
}

/// The `K` per-kernel partial outputs `s_k * sum_p g_k * w_k * x` before
/// aggregation (no bias). Their sum plus the bias is the layer output.
pub fn malleable_kernel_outputs(
    x: &Tensor4,
    depth: &DepthField,
    camera: &CameraIntrinsics,
    params: &MalleableParams,
) -> Result<Vec<Tensor4>, ConvError> {
    depth.check_compatible(&params.spec, x.n(), x.h(), x.w())?;
    let diffs = relative_depth_differences(depth, camera, &params.spec)?;
    let assignment = rfield::assign(&diffs, &params.rfield);
    let coef = malleable_coef(&assignment);
    let k = params.kernels();
    (0..k)
        .map(|j| {
            let single: Vec<f64> = coef.iter().skip(j).step_by(k).copied().collect();
            engine::forward(x, &[&params.weights[j]], None, &params.spec, Some(&single))
        })
        .collect()
}

/// Builds malleable parameters by copying one pretrained bank into each of
/// the `K` kernels.
pub fn duplicate_pretrained(
    source: &Tensor4,
    bias: Option<Vec<f64>>,
    rfield: RFieldParams,
    spec: RfSpec,
) -> Result<MalleableParams, ConvError> {
    let [_, _, kh, kw] = source.dims();
    if (kh, kw) != spec.kernel {
        return Err(ConvError::SourceShape {
            source_dims: source.dims(),
            expected: [source.n(), source.c(), spec.kernel.0, spec.kernel.1],
        });
    }
    let weights = vec![source.clone(); rfield.kernels()];
    MalleableParams::new(weights, bias, rfield, spec)
}

// ---------------------------------------------------------------------------
// depth-aware

#[derive(Debug, Clone, PartialEq)]
pub struct DepthAwareParams {
    pub weights: Tensor4,
    pub bias: Option<Vec<f64>>,
    pub alpha: f64,
    pub spec: RfSpec,
}

impl DepthAwareParams {
    pub fn new(weights: Tensor4, bias: Option<Vec<f64>>, alpha: f64, spec: RfSpec) -> Result<Self, ConvError> {
        check_banks(std::slice::from_ref(&weights), &spec)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ConvError::Alpha(alpha));
        }
        check_bias(&bias, weights.n())?;
        Ok(Self {
            weights,
            bias,
            alpha,
            spec,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CoefTape {
    pub x: Tensor4,
    coef: Vec<f64>,
}

fn depthaware_coef(depth: &DepthField, params: &DepthAwareParams) -> Result<Vec<f64>, ConvError> {
    let diffs = absolute_depth_differences(depth, &params.spec)?;
    Ok(diffs
        .values
        .iter()
        .zip(&diffs.inside)
        .map(|(&d, &inside)| if inside { (-params.alpha * d.abs()).exp() } else { 0.0 })
        .collect())
}

pub fn depthaware_forward(x: &Tensor4, depth: &DepthField, params: &DepthAwareParams) -> Result<Tensor4, ConvError> {
    depthaware_forward_with_tape(x, depth, params).map(|(y, _)| y)
}

pub fn depthaware_forward_with_tape(
    x: &Tensor4,
    depth: &DepthField,
    params: &DepthAwareParams,
) -> Result<(Tensor4, CoefTape), ConvError> {
    depth.check_compatible(&params.spec, x.n(), x.h(), x.w())?;
    let coef = depthaware_coef(depth, params)?;
    let y = engine::forward(x, &[&params.weights], params.bias.as_deref(), &params.spec, Some(&coef))?;
    Ok((y, CoefTape { x: x.clone(), coef }))
}

pub fn depthaware_backward(grad_y: &Tensor4, tape: &CoefTape, params: &DepthAwareParams) -> Result<ConvGrads, ConvError> {
    let g = engine::backward(&tape.x, &[&params.weights], &params.spec, Some(&tape.coef), grad_y, false)?;
    Ok(ConvGrads {
        x: g.x,
        weights: g.banks,
        bias: g.bias,
    })
}

// ---------------------------------------------------------------------------
// hard 2.5D

#[derive(Debug, Clone, PartialEq)]
pub struct Hard25DParams {
    pub weights: Vec<Tensor4>,
    pub bias: Option<Vec<f64>>,
    pub spec: RfSpec,
}

impl Hard25DParams {
    pub fn new(weights: Vec<Tensor4>, bias: Option<Vec<f64>>, spec: RfSpec) -> Result<Self, ConvError> {
        check_banks(&weights, &spec)?;
        check_bias(&bias, weights[0].n())?;
        Ok(Self { weights, bias, spec })
    }

    pub fn kernels(&self) -> usize {
        self.weights.len()
    }
}

/// Zero-based kernel whose half-open bin `[k - K/2, k + 1 - K/2)` holds
/// `rel`, if any.
pub fn hard25d_bin(rel: f64, kernels: usize) -> Option<usize> {
    let shifted = (rel + kernels as f64 / 2.0).floor();
    (shifted >= 0.0 && shifted < kernels as f64).then_some(shifted as usize)
}

fn hard_coef(diffs: &DepthDiffField, kernels: usize) -> Vec<f64> {
    let mut coef = vec![0.0; diffs.len() * kernels];
    for i in 0..diffs.len() {
        if diffs.inside[i] {
            if let Some(k) = hard25d_bin(diffs.values[i], kernels) {
                coef[i * kernels + k] = 1.0;
            }
        }
    }
    coef
}

pub fn hard25d_forward(
    x: &Tensor4,
    depth: &DepthField,
    camera: &CameraIntrinsics,
    params: &Hard25DParams,
) -> Result<Tensor4, ConvError> {
    hard25d_forward_with_tape(x, depth, camera, params).map(|(y, _)| y)
}

pub fn hard25d_forward_with_tape(
    x: &Tensor4,
    depth: &DepthField,
    camera: &CameraIntrinsics,
    params: &Hard25DParams,
) -> Result<(Tensor4, CoefTape), ConvError> {
    depth.check_compatible(&params.spec, x.n(), x.h(), x.w())?;
    let diffs = relative_depth_differences(depth, camera, &params.spec)?;
    let coef = hard_coef(&diffs, params.kernels());
    let y = engine::forward(
        x,
        &refs(&params.weights),
        params.bias.as_deref(),
        &params.spec,
        Some(&coef),
    )?;
    Ok((y, CoefTape { x: x.clone(), coef }))
}

pub fn hard25d_backward(grad_y: &Tensor4, tape: &CoefTape, params: &Hard25DParams) -> Result<ConvGrads, ConvError> {
    let g = engine::backward(
        &tape.x,
        &refs(&params.weights),
        &params.spec,
        Some(&tape.coef),
        grad_y,
        false,
    )?;
    Ok(ConvGrads {
        x: g.x,
        weights: g.banks,
        bias: g.bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_depth(n: usize, h: usize, w: usize, d: f64, rate: usize) -> DepthField {
        DepthField::new(Tensor4::full([n, 1, h, w], d).unwrap(), rate).unwrap()
    }

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 4.0, 4.0).unwrap()
    }

    #[test]
    fn identity_1x1() {
        let x = Tensor4::randn([2, 3, 4, 5], 1).unwrap();
        let mut w = Tensor4::zeros([3, 3, 1, 1]).unwrap();
        for c in 0..3 {
            w.set(c, c, 0, 0, 1.0);
        }
        let y = conv2d_forward(&x, &w, None, &RfSpec::same(1, 1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_interior_sum() {
        let x = Tensor4::full([1, 1, 5, 5], 1.0).unwrap();
        let w = Tensor4::full([1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d_forward(&x, &w, None, &RfSpec::same(3, 1, 1, 1)).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor4::zeros([1, 2, 5, 5]).unwrap();
        let w = Tensor4::zeros([1, 3, 3, 3]).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, None, &RfSpec::same(3, 1, 1, 1)),
            Err(ConvError::Channels { .. })
        ));
        let w = Tensor4::zeros([4, 2, 3, 3]).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, Some(&[0.0; 3]), &RfSpec::same(3, 1, 1, 1)),
            Err(ConvError::Bias { .. })
        ));
        assert!(matches!(
            conv2d_forward(&x, &w, None, &RfSpec::same(5, 1, 1, 1)),
            Err(ConvError::KernelSize { .. })
        ));
        let depth = constant_depth(1, 5, 5, 2.0, 2);
        let p = MalleableParams::new(
            vec![w.clone(); 3],
            None,
            RFieldParams::init(3).unwrap(),
            RfSpec::same(3, 1, 1, 1),
        )
        .unwrap();
        assert!(matches!(
            malleable_forward(&x, &depth, &cam(), &p),
            Err(ConvError::Geometry(GeometryError::RateMismatch { .. }))
        ));
        let depth = constant_depth(1, 4, 5, 2.0, 1);
        assert!(matches!(
            malleable_forward(&x, &depth, &cam(), &p),
            Err(ConvError::Geometry(GeometryError::ResolutionMismatch { .. }))
        ));
    }

    #[test]
    fn constant_depth_collapses() {
        let x = Tensor4::randn([2, 3, 6, 7], 3).unwrap();
        let spec = RfSpec::same(3, 1, 1, 1);
        let banks: Vec<Tensor4> = (0..3).map(|k| Tensor4::randn([4, 3, 3, 3], 10 + k).unwrap()).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let mut rf = RFieldParams::init(3).unwrap();
        rf.b = vec![0.3, -0.1, 0.5];
        rf.t = 0.7;
        let p = MalleableParams::new(banks.clone(), Some(bias.clone()), rf, spec).unwrap();
        let depth = constant_depth(2, 6, 7, 3.2, 1);
        let y = malleable_forward(&x, &depth, &cam(), &p).unwrap();
        let merged = conv2d_forward(&x, &p.merged_kernel(0.0), Some(&bias), &spec).unwrap();
        assert!(y.max_abs_diff(&merged).unwrap() < 1e-10);

        let hard = Hard25DParams::new(banks.clone(), None, spec).unwrap();
        let yh = hard25d_forward(&x, &depth, &cam(), &hard).unwrap();
        let mid = conv2d_forward(&x, &banks[1], None, &spec).unwrap();
        assert!(yh.max_abs_diff(&mid).unwrap() < 1e-10);

        let da = DepthAwareParams::new(banks[0].clone(), None, 8.3, spec).unwrap();
        let yd = depthaware_forward(&x, &depth, &da).unwrap();
        let std = conv2d_forward(&x, &banks[0], None, &spec).unwrap();
        assert!(yd.max_abs_diff(&std).unwrap() < 1e-10);
    }

    #[test]
    fn single_kernel_is_proportional() {
        let x = Tensor4::randn([1, 2, 5, 5], 4).unwrap();
        let spec = RfSpec::same(3, 1, 1, 1);
        let w = Tensor4::randn([3, 2, 3, 3], 5).unwrap();
        let rf = RFieldParams::init(1).unwrap();
        assert_eq!(rf.a, vec![-1.0, 0.0, 1.0]);
        let g1 = rfield::assignment_weights(0.0, &rf)[1];
        let p = duplicate_pretrained(&w, None, rf, spec).unwrap();
        let y = malleable_forward(&x, &constant_depth(1, 5, 5, 1.5, 1), &cam(), &p).unwrap();
        let std = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert!(y.max_abs_diff(&std.scale(g1)).unwrap() < 1e-12);
    }

    #[test]
    fn duplicated_banks() {
        let w = Tensor4::randn([2, 2, 3, 3], 9).unwrap();
        let p = duplicate_pretrained(&w, None, RFieldParams::init(3).unwrap(), RfSpec::same(3, 1, 1, 1)).unwrap();
        assert_eq!(p.kernels(), 3);
        assert!(p.weights.iter().all(|b| b == &w));
        assert!(matches!(
            duplicate_pretrained(&w, None, RFieldParams::init(3).unwrap(), RfSpec::same(5, 1, 1, 1)),
            Err(ConvError::SourceShape { .. })
        ));
    }

    #[test]
    fn hard_bins_are_half_open() {
        assert_eq!(hard25d_bin(0.0, 3), Some(1));
        assert_eq!(hard25d_bin(-0.5, 3), Some(1));
        assert_eq!(hard25d_bin(0.5, 3), Some(2));
        assert_eq!(hard25d_bin(-1.5, 3), Some(0));
        assert_eq!(hard25d_bin(1.5, 3), None);
        assert_eq!(hard25d_bin(-1.5000001, 3), None);
        assert_eq!(hard25d_bin(0.0, 2), Some(1));
        assert_eq!(hard25d_bin(-1.0, 2), Some(0));
        assert_eq!(hard25d_bin(0.0, 1), Some(0));
        assert_eq!(hard25d_bin(0.5, 1), None);
    }

    #[test]
    fn kernel_outputs_sum_to_forward() {
        let x = Tensor4::randn([1, 2, 6, 6], 21).unwrap();
        let depth = DepthField::new(Tensor4::randn([1, 1, 6, 6], 22).unwrap().map(|v| 2.0 + 0.1 * v), 1).unwrap();
        let spec = RfSpec::same(3, 1, 1, 1);
        let banks: Vec<Tensor4> = (0..3).map(|k| Tensor4::randn([2, 2, 3, 3], 30 + k).unwrap()).collect();
        let p = MalleableParams::new(banks, Some(vec![0.5, -0.5]), RFieldParams::init(3).unwrap(), spec).unwrap();
        let y = malleable_forward(&x, &depth, &cam(), &p).unwrap();
        let parts = malleable_kernel_outputs(&x, &depth, &cam(), &p).unwrap();
        let mut sum = parts[0].add(&parts[1]).unwrap().add(&parts[2]).unwrap();
        for co in 0..2 {
            for i in 0..36 {
                sum.data_mut()[co * 36 + i] += p.bias.as_ref().unwrap()[co];
            }
        }
        assert!(sum.max_abs_diff(&y).unwrap() < 1e-10);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = Tensor4::randn([1, 2, 5, 5], 1).unwrap();
        let depth = DepthField::new(Tensor4::randn([1, 1, 5, 5], 2).unwrap().map(|v| 3.0 + v), 1).unwrap();
        let spec = RfSpec::same(3, 1, 1, 1);
        let p = MalleableParams::new(
            vec![Tensor4::randn([2, 2, 3, 3], 3).unwrap(); 3],
            Some(vec![0.0; 2]),
            RFieldParams::init(3).unwrap(),
            spec,
        )
        .unwrap();
        let (y, tape) = malleable_forward_with_tape(&x, &depth, &cam(), &p).unwrap();
        let g = malleable_backward(&Tensor4::zeros(y.dims()).unwrap(), &tape, &p).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert_eq!(g.rfield, RFieldGrads::zeros(3));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_banks_get_proportional_grads() {
        // constant depth: dL/dw_k = s_k g_k(0) * dL/dw_merged, so the ratios
        // between banks are the ratios of s_k g_k(0)
        let x = Tensor4::randn([1, 2, 5, 5], 7).unwrap();
        let depth = constant_depth(1, 5, 5, 2.0, 1);
        let spec = RfSpec::same(3, 1, 1, 1);
        let mut rf = RFieldParams::init(3).unwrap();
        rf.b = vec![0.2, 0.0, -0.4];
        let p = duplicate_pretrained(&Tensor4::randn([2, 2, 3, 3], 8).unwrap(), None, rf.clone(), spec).unwrap();
        let (y, tape) = malleable_forward_with_tape(&x, &depth, &cam(), &p).unwrap();
        let g = malleable_backward(&Tensor4::randn(y.dims(), 9).unwrap(), &tape, &p).unwrap();
        let gw = rfield::assignment_weights(0.0, &rf);
        let s = rfield::rebalance(&rf.b);
        let base = g.weights[1].scale(1.0 / (s[1] * gw[2]));
        for k in [0, 2] {
            let scaled = g.weights[k].scale(1.0 / (s[k] * gw[k + 1]));
            assert!(scaled.max_abs_diff(&base).unwrap() < 1e-9);
        }
    }
}
