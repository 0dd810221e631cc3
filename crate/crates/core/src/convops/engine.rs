//! Modulated im2col convolution shared by every operator.
//!
//! All four operators have the form
//!
//! ```text
//! y[co, p] = bias[co] + sum_k sum_ci sum_off coef[p, off, k] * w_k[co, ci, off] * x[ci, p + off]
//! ```
//!
//! where `coef` is 1 for a standard convolution and a depth-derived weight
//! otherwise. Each sample is lowered to a `(K * c_in * offsets) x positions`
//! column matrix with the coefficients folded in, then multiplied by the
//! concatenated kernel banks.

use crate::geometry::RfSpec;
use crate::tensor::Tensor4;

use super::ConvError;

pub(crate) struct Layout {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub kernels: usize,
    pub spec: RfSpec,
}

impl Layout {
    pub fn new(x: &Tensor4, banks: &[&Tensor4], spec: &RfSpec) -> Result<Self, ConvError> {
        spec.validate()?;
        let first = banks.first().ok_or(ConvError::NoKernels)?;
        let [cout, cin, kh, kw] = first.dims();
        for b in banks {
            if b.dims() != first.dims() {
                return Err(ConvError::BankShape(first.dims(), b.dims()));
            }
        }
        if (kh, kw) != spec.kernel {
            return Err(ConvError::KernelSize {
                weights: (kh, kw),
                spec: spec.kernel,
            });
        }
        if x.c() != cin {
            return Err(ConvError::Channels {
                input: x.c(),
                weights: cin,
            });
        }
        let (oh, ow) = spec
            .output_size(x.h(), x.w())
            .ok_or(ConvError::TooSmall { h: x.h(), w: x.w() })?;
        Ok(Self {
            n: x.n(),
            cin,
            h: x.h(),
            w: x.w(),
            cout,
            oh,
            ow,
            kernels: banks.len(),
            spec: *spec,
        })
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn offsets(&self) -> usize {
        self.spec.kernel.0 * self.spec.kernel.1
    }

    pub fn rows(&self) -> usize {
        self.kernels * self.cin * self.offsets()
    }

    pub fn coef_len(&self) -> usize {
        self.n * self.positions() * self.offsets() * self.kernels
    }

    pub fn check_bias(&self, bias: Option<&[f64]>) -> Result<(), ConvError> {
        match bias {
            Some(b) if b.len() != self.cout => Err(ConvError::Bias {
                expected: self.cout,
                got: b.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn check_coef(&self, coef: Option<&[f64]>) -> Result<(), ConvError> {
        match coef {
            Some(c) if c.len() != self.coef_len() => Err(ConvError::Coefficients {
                expected: self.coef_len(),
                got: c.len(),
            }),
            _ => Ok(()),
        }
    }

    /// `cout x rows` matrix: row `co` is the concatenation of `w_k[co]`.
    fn weight_matrix(&self, banks: &[&Tensor4]) -> Vec<f64> {
        let per = self.cin * self.offsets();
        let mut m = vec![0.0; self.cout * self.rows()];
        for co in 0..self.cout {
            for (k, bank) in banks.iter().enumerate() {
                let src = &bank.data()[co * per..(co + 1) * per];
                let dst = co * self.rows() + k * per;
                m[dst..dst + per].copy_from_slice(src);
            }
        }
        m
    }

    /// Output column range `[lo, hi)` whose tap `k` lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
        let shift = (k * self.spec.dilation) as isize - pad as isize;
        let s = self.spec.stride as isize;
        // smallest o with o*s + shift >= 0, largest with o*s + shift < extent
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = ((extent as isize - shift) + s - 1).div_euclid(s).clamp(0, out as isize);
        (lo.min(out as isize) as usize, hi.max(lo.min(out as isize)) as usize)
    }

    /// Coefficients of sample `b` regrouped as `[k][off][p]`.
    fn coef_planes(&self, coef: &[f64], b: usize) -> Vec<f64> {
        let p_count = self.positions();
        let offsets = self.offsets();
        let kk = self.kernels;
        let base = b * p_count * offsets * kk;
        let mut out = vec![0.0; kk * offsets * p_count];
        for p in 0..p_count {
            for off in 0..offsets {
                let src = &coef[base + (p * offsets + off) * kk..base + (p * offsets + off + 1) * kk];
                for (k, &c) in src.iter().enumerate() {
                    out[(k * offsets + off) * p_count + p] = c;
                }
            }
        }
        out
    }

    /// Fills `cols` (`rows x positions`) for sample `b`; `planes` are the
    /// regrouped coefficients of that sample.
    fn lower(&self, x: &Tensor4, planes: Option<&[f64]>, b: usize, cols: &mut [f64]) {
        let p_count = self.positions();
        let offsets = self.offsets();
        let (kh, kw) = self.spec.kernel;
        let (st, dil) = (self.spec.stride, self.spec.dilation);
        let xs = x.sample(b);
        for k in 0..self.kernels {
            for ci in 0..self.cin {
                let plane = &xs[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..kh {
                    let (ylo, yhi) = self.valid_range(ky, self.spec.padding.0, self.h, self.oh);
                    for kx in 0..kw {
                        let (xlo, xhi) = self.valid_range(kx, self.spec.padding.1, self.w, self.ow);
                        let off = ky * kw + kx;
                        let r = (k * self.cin + ci) * offsets + off;
                        let row = &mut cols[r * p_count..(r + 1) * p_count];
                        row.fill(0.0);
                        let cplane = planes.map(|c| &c[(k * offsets + off) * p_count..(k * offsets + off + 1) * p_count]);
                        for oy in ylo..yhi {
                            let iy = oy * st + ky * dil - self.spec.padding.0;
                            let src = &plane[iy * self.w..(iy + 1) * self.w];
                            let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                            let ix0 = xlo * st + kx * dil - self.spec.padding.1;
                            match cplane {
                                Some(c) => {
                                    let c = &c[oy * self.ow..(oy + 1) * self.ow];
                                    for ox in xlo..xhi {
                                        dst[ox] = c[ox] * src[ix0 + (ox - xlo) * st];
                                    }
                                }
                                None => {
                                    for ox in xlo..xhi {
                                        dst[ox] = src[ix0 + (ox - xlo) * st];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn forward(
    x: &Tensor4,
    banks: &[&Tensor4],
    bias: Option<&[f64]>,
    spec: &RfSpec,
    coef: Option<&[f64]>,
) -> Result<Tensor4, ConvError> {
    let lay = Layout::new(x, banks, spec)?;
    lay.check_bias(bias)?;
    lay.check_coef(coef)?;
    let p_count = lay.positions();
    let rows = lay.rows();
    let wm = lay.weight_matrix(banks);
    let mut y = Tensor4::zeros([lay.n, lay.cout, lay.oh, lay.ow])?;
    let mut cols = vec![0.0; rows * p_count];
    for b in 0..lay.n {
        let planes = coef.map(|c| lay.coef_planes(c, b));
        lay.lower(x, planes.as_deref(), b, &mut cols);
        let ys = y.sample_mut(b);
        for co in 0..lay.cout {
            let out = &mut ys[co * p_count..(co + 1) * p_count];
            if let Some(bias) = bias {
                out.fill(bias[co]);
            }
            let wrow = &wm[co * rows..(co + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let col = &cols[r * p_count..(r + 1) * p_count];
                for (o, &c) in out.iter_mut().zip(col) {
                    *o += wv * c;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) struct EngineGrads {
    pub x: Tensor4,
    pub banks: Vec<Tensor4>,
    pub bias: Vec<f64>,
    /// Same layout as the forward coefficients; empty when not requested.
    pub coef: Vec<f64>,
}

pub(crate) fn backward(
    x: &Tensor4,
    banks: &[&Tensor4],
    spec: &RfSpec,
    coef: Option<&[f64]>,
    dy: &Tensor4,
    want_coef: bool,
) -> Result<EngineGrads, ConvError> {
    let lay = Layout::new(x, banks, spec)?;
    lay.check_coef(coef)?;
    let expected = [lay.n, lay.cout, lay.oh, lay.ow];
    if dy.dims() != expected {
        return Err(ConvError::GradShape {
            expected,
            got: dy.dims(),
        });
    }
    let p_count = lay.positions();
    let rows = lay.rows();
    let offsets = lay.offsets();
    let (kh, kw) = spec.kernel;
    let wm = lay.weight_matrix(banks);
    let mut dwm = vec![0.0; lay.cout * rows];
    let mut dbias = vec![0.0; lay.cout];
    let mut dx = Tensor4::zeros(x.dims())?;
    let mut dcoef = if want_coef { vec![0.0; lay.coef_len()] } else { Vec::new() };
    let mut cols = vec![0.0; rows * p_count];
    let mut dcols = vec![0.0; rows * p_count];
    for b in 0..lay.n {
        let planes = coef.map(|c| lay.coef_planes(c, b));
        lay.lower(x, planes.as_deref(), b, &mut cols);
        dcols.fill(0.0);
        let dys = dy.sample(b);
        for co in 0..lay.cout {
            let g = &dys[co * p_count..(co + 1) * p_count];
            dbias[co] += g.iter().sum::<f64>();
            let wrow = &wm[co * rows..(co + 1) * rows];
            let dwrow = &mut dwm[co * rows..(co + 1) * rows];
            for r in 0..rows {
                let col = &cols[r * p_count..(r + 1) * p_count];
                dwrow[r] += dot(col, g);
                let wv = wrow[r];
                if wv != 0.0 {
                    let dcol = &mut dcols[r * p_count..(r + 1) * p_count];
                    for (d, &gv) in dcol.iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
        // scatter column gradients back to the input and the coefficients
        let xs = x.sample(b);
        let dxs = dx.sample_mut(b);
        let (st, dil) = (spec.stride, spec.dilation);
        let mut dplanes = if want_coef { vec![0.0; lay.kernels * offsets * p_count] } else { Vec::new() };
        for k in 0..lay.kernels {
            for ci in 0..lay.cin {
                let plane = ci * lay.h * lay.w;
                for ky in 0..kh {
                    let (ylo, yhi) = lay.valid_range(ky, spec.padding.0, lay.h, lay.oh);
                    for kx in 0..kw {
                        let (xlo, xhi) = lay.valid_range(kx, spec.padding.1, lay.w, lay.ow);
                        let off = ky * kw + kx;
                        let r = (k * lay.cin + ci) * offsets + off;
                        let dcol = &dcols[r * p_count..(r + 1) * p_count];
                        let pl = (k * offsets + off) * p_count;
                        for oy in ylo..yhi {
                            let iy = oy * st + ky * dil - spec.padding.0;
                            let row0 = plane + iy * lay.w + xlo * st + kx * dil - spec.padding.1;
                            let p0 = oy * lay.ow;
                            match planes.as_deref() {
                                Some(c) => {
                                    for ox in xlo..xhi {
                                        let xi = row0 + (ox - xlo) * st;
                                        dxs[xi] += c[pl + p0 + ox] * dcol[p0 + ox];
                                    }
                                }
                                None => {
                                    for ox in xlo..xhi {
                                        dxs[row0 + (ox - xlo) * st] += dcol[p0 + ox];
                                    }
                                }
                            }
                            if want_coef {
                                for ox in xlo..xhi {
                                    dplanes[pl + p0 + ox] += dcol[p0 + ox] * xs[row0 + (ox - xlo) * st];
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_coef {
            let base = b * p_count * offsets * lay.kernels;
            for k in 0..lay.kernels {
                for off in 0..offsets {
                    let src = &dplanes[(k * offsets + off) * p_count..(k * offsets + off + 1) * p_count];
                    for (p, &v) in src.iter().enumerate() {
                        dcoef[base + (p * offsets + off) * lay.kernels + k] += v;
                    }
                }
            }
        }
    }
    let per = lay.cin * offsets;
    let mut dbanks = Vec::with_capacity(lay.kernels);
    for k in 0..lay.kernels {
        let mut t = Tensor4::zeros(banks[k].dims())?;
        for co in 0..lay.cout {
            let src = &dwm[co * rows + k * per..co * rows + (k + 1) * per];
            t.data_mut()[co * per..(co + 1) * per].copy_from_slice(src);
        }
        dbanks.push(t);
    }
    Ok(EngineGrads {
        x: dx,
        banks: dbanks,
        bias: dbias,
        coef: dcoef,
    })
}
