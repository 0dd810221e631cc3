//! Brute-force reference implementations and finite differences.
//!
//! Nothing here calls into `convops`, `rfield` or the window machinery in
//! `geometry`: every output element is evaluated by a direct loop over
//! kernels, channels and taps, with depth differences, receptive-field
//! functions and softmaxes recomputed per tap. It is slow on purpose.

pub mod gradcheck;

use thiserror::Error;

use crate::convops::{DepthAwareParams, Hard25DParams, MalleableParams};
use crate::geometry::{CameraIntrinsics, DepthField, RfSpec};
use crate::tensor::{Tensor4, TensorError};

/// Largest instance the oracle accepts, in multiply-accumulates.
pub const MAX_ORACLE_MACS: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance needs {macs} MACs, above the oracle limit of {MAX_ORACLE_MACS}")]
    TooLarge { macs: usize },
    #[error("oracle input mismatch: {0}")]
    Mismatch(String),
    #[error("loss is not finite ({value}) at coordinate {coord}")]
    NonFiniteLoss { coord: usize, value: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Operator plus all of its non-feature inputs.
#[derive(Debug, Clone, Copy)]
pub enum OracleOp<'a> {
    Standard {
        weights: &'a Tensor4,
        bias: Option<&'a [f64]>,
        spec: &'a RfSpec,
    },
    Malleable {
        params: &'a MalleableParams,
        depth: &'a DepthField,
        camera: &'a CameraIntrinsics,
    },
    DepthAware {
        params: &'a DepthAwareParams,
        depth: &'a DepthField,
    },
    Hard25D {
        params: &'a Hard25DParams,
        depth: &'a DepthField,
        camera: &'a CameraIntrinsics,
    },
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Soft assignment of one tap evaluated straight from the definitions.
fn malleable_tap_weights(rel: f64, a: &[f64], t: f64) -> Vec<f64> {
    let classes = a.len();
    let h: Vec<f64> = (0..classes)
        .map(|m| {
            let u = rel - a[m];
            if m == 0 {
                -signum0(u) * u * u / t
            } else if m == classes - 1 {
                signum0(u) * u * u / t
            } else {
                -(u * u) / t
            }
        })
        .collect();
    let top = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = h.iter().map(|v| (v - top).exp()).sum();
    h.iter().map(|v| (v - top).exp() / denom).collect()
}

fn coord(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, extent: usize) -> Option<usize> {
    let p = o as i64 * stride as i64 + k as i64 * dilation as i64 - pad as i64;
    if p >= 0 && (p as usize) < extent {
        Some(p as usize)
    } else {
        None
    }
}

fn depth_at(depth: &DepthField, b: usize, y: usize, x: usize) -> Option<f64> {
    let v = depth.depth().at(b, 0, y, x);
    let i = depth.depth().index(b, 0, y, x);
    if depth.valid()[i] {
        Some(v)
    } else {
        None
    }
}

/// Direct-loop evaluation of `op` on features `x`.
pub fn naive_forward(op: OracleOp<'_>, x: &Tensor4) -> Result<Tensor4, OracleError> {
    let (banks, bias, spec): (Vec<&Tensor4>, Option<&[f64]>, &RfSpec) = match op {
        OracleOp::Standard { weights, bias, spec } => (vec![weights], bias, spec),
        OracleOp::Malleable { params, .. } => (params.weights.iter().collect(), params.bias.as_deref(), &params.spec),
        OracleOp::DepthAware { params, .. } => (vec![&params.weights], params.bias.as_deref(), &params.spec),
        OracleOp::Hard25D { params, .. } => (params.weights.iter().collect(), params.bias.as_deref(), &params.spec),
    };
    let depth = match op {
        OracleOp::Standard { .. } => None,
        OracleOp::Malleable { depth, .. } | OracleOp::DepthAware { depth, .. } | OracleOp::Hard25D { depth, .. } => {
            Some(depth)
        }
    };
    let [cout, cin, kh, kw] = banks[0].dims();
    let [n, xc, h, w] = x.dims();
    if xc != cin {
        return Err(OracleError::Mismatch(format!("input channels {xc} vs weights {cin}")));
    }
    if let Some(d) = depth {
        if [d.n(), d.h(), d.w()] != [n, h, w] || d.rate() != spec.r_down {
            return Err(OracleError::Mismatch("depth field does not match features".into()));
        }
    }
    let (sh, sw) = (spec.stride, spec.stride);
    let dil = spec.dilation;
    let (ph, pw) = spec.padding;
    let oh = (h + 2 * ph - dil * (kh - 1) - 1) / sh + 1;
    let ow = (w + 2 * pw - dil * (kw - 1) - 1) / sw + 1;
    let macs = n * cout * oh * ow * banks.len() * cin * kh * kw;
    if macs > MAX_ORACLE_MACS {
        return Err(OracleError::TooLarge { macs });
    }
    let kernels = banks.len();
    let mut y = Tensor4::zeros([n, cout, oh, ow])?;
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let cy = coord(oy, kh / 2, sh, dil, ph, h);
                    let cx = coord(ox, kw / 2, sw, dil, pw, w);
                    let center = match (depth, cy, cx) {
                        (Some(d), Some(cy), Some(cx)) => depth_at(d, b, cy, cx),
                        _ => None,
                    };
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for k in 0..kernels {
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let (Some(iy), Some(ix)) =
                                        (coord(oy, ky, sh, dil, ph, h), coord(ox, kx, sw, dil, pw, w))
                                    else {
                                        continue;
                                    };
                                    // neighbor depth falls back to the center; an
                                    // invalid center means no depth difference at all
                                    let (dc, dn) = match center {
                                        Some(dc) => {
                                            let dn = depth_at(depth.unwrap(), b, iy, ix).unwrap_or(dc);
                                            (dc, dn)
                                        }
                                        None => (1.0, 1.0),
                                    };
                                    let weight = match op {
                                        OracleOp::Standard { .. } => 1.0,
                                        OracleOp::Malleable { params, camera, .. } => {
                                            let f = (camera.fx() + camera.fy()) / 2.0;
                                            let unit = (spec.r_down * dil) as f64 * dc / f;
                                            let rel = (dc - dn) / unit;
                                            let rf = &params.rfield;
                                            let g = malleable_tap_weights(rel, &rf.a, rf.t);
                                            let zb: f64 = rf.b.iter().map(|v| v.exp()).sum();
                                            let s = rf.b[k].exp() / zb;
                                            s * g[k + 1]
                                        }
                                        OracleOp::DepthAware { params, .. } => (-params.alpha * (dc - dn).abs()).exp(),
                                        OracleOp::Hard25D { camera, .. } => {
                                            let f = (camera.fx() + camera.fy()) / 2.0;
                                            let unit = (spec.r_down * dil) as f64 * dc / f;
                                            let rel = (dc - dn) / unit;
                                            // kernel k (1-based) covers [k-1-K/2, k-K/2)
                                            let kk = (k + 1) as f64;
                                            let half = kernels as f64 / 2.0;
                                            if kk - 1.0 - half <= rel && rel < kk - half {
                                                1.0
                                            } else {
                                                0.0
                                            }
                                        }
                                    };
                                    acc += weight * banks[k].at(co, ci, ky, kx) * x.at(b, ci, iy, ix);
                                }
                            }
                        }
                    }
                    y.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Central differences `(L(θ + h e_i) - L(θ - h e_i)) / 2h` for each
/// selected coordinate `i` of `theta`.
pub fn fd_gradient<F>(mut loss: F, theta: &[f64], coords: &[usize], step: f64) -> Result<Vec<f64>, OracleError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(OracleError::Step(step));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        probe[i] = theta[i] + step;
        let hi = loss(&probe);
        probe[i] = theta[i] - step;
        let lo = loss(&probe);
        probe[i] = theta[i];
        for v in [hi, lo] {
            if !v.is_finite() {
                return Err(OracleError::NonFiniteLoss { coord: i, value: v });
            }
        }
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// Relative error with a floor on the denominator so that gradients
/// near zero are compared in absolute terms.
pub fn relative_error(analytical: f64, numerical: f64, floor: f64) -> f64 {
    (analytical - numerical).abs() / analytical.abs().max(numerical.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfield::RFieldParams;

    #[test]
    fn fd_of_quadratic_and_constant() {
        let g = fd_gradient(|t| t[0] * t[0], &[3.0], &[0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = fd_gradient(|_| 4.0, &[1.0, 2.0], &[0, 1], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(matches!(
            fd_gradient(|t| 1.0 / (t[0] - 1.0).abs().min(0.0), &[1.0], &[0], 1e-5),
            Err(OracleError::NonFiniteLoss { .. })
        ));
        assert!(matches!(fd_gradient(|t| t[0], &[1.0], &[0], 0.0), Err(OracleError::Step(_))));
    }

    #[test]
    fn fd_error_decays_quadratically() {
        let f = |t: &[f64]| (1.3 * t[0]).sin() * t[0].exp();
        let exact = |x: f64| 1.3 * (1.3 * x).cos() * x.exp() + (1.3 * x).sin() * x.exp();
        let e4 = (fd_gradient(f, &[0.7], &[0], 1e-3).unwrap()[0] - exact(0.7)).abs();
        let e5 = (fd_gradient(f, &[0.7], &[0], 1e-4).unwrap()[0] - exact(0.7)).abs();
        // h shrinks 10x, error should shrink ~100x
        assert!(e5 < e4 / 50.0, "{e4} {e5}");
    }

    #[test]
    fn zero_input_zero_output() {
        let x = Tensor4::zeros([1, 2, 4, 4]).unwrap();
        let w = Tensor4::randn([3, 2, 3, 3], 1).unwrap();
        let spec = RfSpec::same(3, 1, 1, 1);
        let y = naive_forward(
            OracleOp::Standard {
                weights: &w,
                bias: None,
                spec: &spec,
            },
            &x,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_single_term() {
        // 1x1 image, 1x1 kernels: y = sum_k s_k g_k(0) w_k x
        let x = Tensor4::full([1, 1, 1, 1], 2.0).unwrap();
        let depth = DepthField::new(Tensor4::full([1, 1, 1, 1], 1.5).unwrap(), 1).unwrap();
        let cam = CameraIntrinsics::new(10.0, 10.0, 0.0, 0.0).unwrap();
        let spec = RfSpec::same(1, 1, 1, 1);
        let ws = [0.5, -1.0, 3.0];
        let weights: Vec<Tensor4> = ws.iter().map(|&v| Tensor4::full([1, 1, 1, 1], v).unwrap()).collect();
        let params = MalleableParams::new(weights, None, RFieldParams::init(3).unwrap(), spec).unwrap();
        let y = naive_forward(
            OracleOp::Malleable {
                params: &params,
                depth: &depth,
                camera: &cam,
            },
            &x,
        )
        .unwrap();
        let g = malleable_tap_weights(0.0, &params.rfield.a, 1.0);
        let expected: f64 = (0..3).map(|k| g[k + 1] / 3.0 * ws[k] * 2.0).sum();
        assert!((y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn size_guard() {
        let x = Tensor4::zeros([4, 64, 64, 64]).unwrap();
        let w = Tensor4::zeros([64, 64, 3, 3]).unwrap();
        let spec = RfSpec::same(3, 1, 1, 1);
        assert!(matches!(
            naive_forward(
                OracleOp::Standard {
                    weights: &w,
                    bias: None,
                    spec: &spec
                },
                &x
            ),
            Err(OracleError::TooLarge { .. })
        ));
    }
}
