//! Camera model, depth fields and per-window depth differences.
//!
//! The relative depth difference between a window center `c_i` and a
//! neighbor `c_j` is measured in units of the 3D spacing between adjacent
//! convolution samples projected to the center's depth:
//!
//! ```text
//! unit(c_i)  = spacing * depth(c_i) / f,   spacing = r_down * r_dilate
//! rel(c_i,j) = (depth(c_i) - depth(c_j)) / unit(c_i)
//! ```

use std::path::Path;

use thiserror::Error;

use crate::kvfile::{KvError, KvFile};
use crate::tensor::{Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: focal lengths must be positive and finite (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("invalid receptive-field spec: {0}")]
    InvalidSpec(String),
    #[error("depth field must have one channel, got dims {0:?}")]
    DepthChannels([usize; 4]),
    #[error("validity mask length {mask} does not match depth length {depth}")]
    MaskLength { mask: usize, depth: usize },
    #[error("target rate {target} is not a positive integer multiple of source rate {source_rate}")]
    RateRatio { source_rate: usize, target: usize },
    #[error("depth rate {depth} does not match the layer's downsampling rate {layer}")]
    RateMismatch { depth: usize, layer: usize },
    #[error("depth resolution {depth:?} does not match feature resolution {features:?}")]
    ResolutionMismatch {
        depth: [usize; 3],
        features: [usize; 3],
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    /// Single focal length used for depth units: the mean of `fx` and `fy`.
    pub fn effective_focal(&self) -> f64 {
        (self.fx + self.fy) / 2.0
    }
}

/// Camera file: `fx`, `fy`, `cx`, `cy` and the depth map's `rate`.
pub fn read_camera_file(path: impl AsRef<Path>) -> Result<(CameraIntrinsics, usize), GeometryError> {
    let kv = KvFile::read(path)?;
    camera_from_kv(&kv)
}

pub fn camera_from_kv(kv: &KvFile) -> Result<(CameraIntrinsics, usize), GeometryError> {
    for key in kv.keys() {
        if !matches!(key, "fx" | "fy" | "cx" | "cy" | "rate") {
            return Err(KvError::Unknown(key.to_string()).into());
        }
    }
    let cam = CameraIntrinsics::new(
        kv.parse_value("fx")?,
        kv.parse_value("fy")?,
        kv.parse_value("cx")?,
        kv.parse_value("cy")?,
    )?;
    let rate = match kv.get("rate") {
        Some(_) => kv.parse_value("rate")?,
        None => 1,
    };
    Ok((cam, rate))
}

pub fn camera_to_kv(cam: &CameraIntrinsics, rate: usize) -> KvFile {
    let mut kv = KvFile::new();
    kv.set("fx", cam.fx);
    kv.set("fy", cam.fy);
    kv.set("cx", cam.cx);
    kv.set("cy", cam.cy);
    kv.set("rate", rate);
    kv
}

pub fn write_camera_file(
    path: impl AsRef<Path>,
    cam: &CameraIntrinsics,
    rate: usize,
) -> Result<(), GeometryError> {
    camera_to_kv(cam, rate).write(path)?;
    Ok(())
}

/// Sampling geometry of one convolution: kernel size, dilation, stride,
/// zero padding and the feature map's downsampling rate w.r.t. the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfSpec {
    pub kernel: (usize, usize),
    pub dilation: usize,
    pub stride: usize,
    pub padding: (usize, usize),
    pub r_down: usize,
}

impl RfSpec {
    /// Odd `k x k` kernel with "same" padding for the given dilation.
    pub fn same(k: usize, dilation: usize, stride: usize, r_down: usize) -> Self {
        let pad = dilation * (k.saturating_sub(1)) / 2;
        Self {
            kernel: (k, k),
            dilation,
            stride,
            padding: (pad, pad),
            r_down,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(GeometryError::InvalidSpec(format!(
                "kernel {kh}x{kw} must be odd and positive"
            )));
        }
        if self.dilation == 0 || self.stride == 0 || self.r_down == 0 {
            return Err(GeometryError::InvalidSpec(
                "dilation, stride and r_down must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn offsets(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn center_offset(&self) -> usize {
        (self.kernel.0 / 2) * self.kernel.1 + self.kernel.1 / 2
    }

    /// Planar distance between adjacent samples on the original image.
    pub fn sample_spacing(&self) -> f64 {
        (self.r_down * self.dilation) as f64
    }

    /// Output spatial size for an `h x w` input, if any window fits.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = |k: usize| self.dilation * (k - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < span(self.kernel.0) || pw < span(self.kernel.1) {
            return None;
        }
        Some((
            (ph - span(self.kernel.0)) / self.stride + 1,
            (pw - span(self.kernel.1)) / self.stride + 1,
        ))
    }

    /// Input row/column of window tap `k` for output coordinate `o`, along
    /// one axis, or `None` when it falls in the padding.
    #[inline]
    pub fn input_coord(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Image coordinate of the window center for output `(oy, ox)`.
    pub fn center(&self, oy: usize, ox: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let y = self.input_coord(oy, self.kernel.0 / 2, self.padding.0, h)?;
        let x = self.input_coord(ox, self.kernel.1 / 2, self.padding.1, w)?;
        Some((y, x))
    }
}

/// Metric depth (meters) with a validity mask, at downsampling `rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    depth: Tensor4,
    valid: Vec<bool>,
    rate: usize,
}

impl DepthField {
    /// Validity is derived from the values: positive and finite.
    pub fn new(depth: Tensor4, rate: usize) -> Result<Self, GeometryError> {
        let valid = depth.data().iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Self::with_mask(depth, valid, rate)
    }

    /// Uses `mask` but still forces invalid wherever depth is non-positive
    /// or non-finite.
    pub fn with_mask(depth: Tensor4, mask: Vec<bool>, rate: usize) -> Result<Self, GeometryError> {
        if depth.c() != 1 {
            return Err(GeometryError::DepthChannels(depth.dims()));
        }
        if mask.len() != depth.len() {
            return Err(GeometryError::MaskLength {
                mask: mask.len(),
                depth: depth.len(),
            });
        }
        if rate == 0 {
            return Err(GeometryError::RateRatio {
                source_rate: 0,
                target: 0,
            });
        }
        let valid = mask
            .iter()
            .zip(depth.data())
            .map(|(&m, &d)| m && d.is_finite() && d > 0.0)
            .collect();
        Ok(Self { depth, valid, rate })
    }

    pub fn depth(&self) -> &Tensor4 {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn rate(&self) -> usize {
        self.rate
    }

    pub fn n(&self) -> usize {
        self.depth.n()
    }

    pub fn h(&self) -> usize {
        self.depth.h()
    }

    pub fn w(&self) -> usize {
        self.depth.w()
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize) -> Option<f64> {
        let i = self.depth.index(n, 0, y, x);
        self.valid[i].then(|| self.depth.data()[i])
    }

    /// Mask tensor (1.0 valid, 0.0 invalid) for storage.
    pub fn mask_tensor(&self) -> Tensor4 {
        let data = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor4::from_vec(self.depth.dims(), data).expect("same dims as depth")
    }

    /// Nearest-neighbor resampling to `target_rate`, picking the top-left
    /// pixel of each `ratio x ratio` cell. The output has
    /// `ceil(h / ratio) x ceil(w / ratio)` pixels.
    pub fn downsample(&self, target_rate: usize) -> Result<Self, GeometryError> {
        if target_rate == 0 || target_rate % self.rate != 0 {
            return Err(GeometryError::RateRatio {
                source_rate: self.rate,
                target: target_rate,
            });
        }
        let ratio = target_rate / self.rate;
        if ratio == 1 {
            return Ok(self.clone());
        }
        let [n, _, h, w] = self.depth.dims();
        let (oh, ow) = (h.div_ceil(ratio), w.div_ceil(ratio));
        let mut depth = Tensor4::zeros([n, 1, oh, ow])?;
        let mut valid = Vec::with_capacity(n * oh * ow);
        for b in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let i = self.depth.index(b, 0, y * ratio, x * ratio);
                    depth.set(b, 0, y, x, self.depth.data()[i]);
                    valid.push(self.valid[i]);
                }
            }
        }
        Ok(Self {
            depth,
            valid,
            rate: target_rate,
        })
    }

    /// Ensures this field can drive a layer with `spec` over an
    /// `n x h x w` feature map.
    pub fn check_compatible(&self, spec: &RfSpec, n: usize, h: usize, w: usize) -> Result<(), GeometryError> {
        if self.rate != spec.r_down {
            return Err(GeometryError::RateMismatch {
                depth: self.rate,
                layer: spec.r_down,
            });
        }
        if [self.n(), self.h(), self.w()] != [n, h, w] {
            return Err(GeometryError::ResolutionMismatch {
                depth: [self.n(), self.h(), self.w()],
                features: [n, h, w],
            });
        }
        Ok(())
    }
}

/// Free-function form of [`DepthField::downsample`].
pub fn downsample_depth(field: &DepthField, target_rate: usize) -> Result<DepthField, GeometryError> {
    field.downsample(target_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffUnit {
    /// Dimensionless, in units of the projected sample spacing.
    Relative,
    /// Meters.
    Absolute,
}

/// Per `(batch, output position, window offset)` depth difference between
/// the window center and the neighbor, with a mask of which offsets fall
/// inside the image.
///
/// Invalid neighbor depth is replaced by the center depth and an invalid
/// center zeroes the whole window, so in both cases the value is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDiffField {
    pub unit: DiffUnit,
    pub n: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub offsets: usize,
    pub values: Vec<f64>,
    pub inside: Vec<bool>,
}

pub type RelDiffField = DepthDiffField;

impl DepthDiffField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, oy: usize, ox: usize, off: usize) -> usize {
        ((n * self.out_h + oy) * self.out_w + ox) * self.offsets + off
    }

    pub fn positions(&self) -> usize {
        self.n * self.out_h * self.out_w
    }
}

fn depth_differences(
    field: &DepthField,
    spec: &RfSpec,
    unit: DiffUnit,
    focal: f64,
) -> Result<DepthDiffField, GeometryError> {
    spec.validate()?;
    if field.rate() != spec.r_down {
        return Err(GeometryError::RateMismatch {
            depth: field.rate(),
            layer: spec.r_down,
        });
    }
    let (n, h, w) = (field.n(), field.h(), field.w());
    let (oh, ow) = spec.output_size(h, w).ok_or_else(|| {
        GeometryError::InvalidSpec(format!("kernel does not fit a {h}x{w} map"))
    })?;
    let (kh, kw) = spec.kernel;
    let offsets = kh * kw;
    let spacing = spec.sample_spacing();
    let mut values = vec![0.0; n * oh * ow * offsets];
    let mut inside = vec![false; values.len()];
    let mut i = 0;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let center = spec
                    .center(oy, ox, h, w)
                    .and_then(|(cy, cx)| field.get(b, cy, cx));
                for ky in 0..kh {
                    let iy = spec.input_coord(oy, ky, spec.padding.0, h);
                    for kx in 0..kw {
                        let ix = spec.input_coord(ox, kx, spec.padding.1, w);
                        if let (Some(iy), Some(ix)) = (iy, ix) {
                            inside[i] = true;
                            if let Some(di) = center {
                                let dj = field.get(b, iy, ix).unwrap_or(di);
                                values[i] = match unit {
                                    DiffUnit::Relative => (di - dj) / (spacing * di / focal),
                                    DiffUnit::Absolute => di - dj,
                                };
                            }
                        }
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(DepthDiffField {
        unit,
        n,
        out_h: oh,
        out_w: ow,
        offsets,
        values,
        inside,
    })
}

/// Relative depth differences for every window of a convolution with
/// `spec` over `field`.
pub fn relative_depth_differences(
    field: &DepthField,
    camera: &CameraIntrinsics,
    spec: &RfSpec,
) -> Result<RelDiffField, GeometryError> {
    depth_differences(field, spec, DiffUnit::Relative, camera.effective_focal())
}

/// Absolute (meters) depth differences with the same window layout and
/// invalid-depth substitution as [`relative_depth_differences`].
pub fn absolute_depth_differences(field: &DepthField, spec: &RfSpec) -> Result<DepthDiffField, GeometryError> {
    depth_differences(field, spec, DiffUnit::Absolute, 1.0)
}
