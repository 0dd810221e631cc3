use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NetConfig, TrainError};
use crate::convops::{
    self, CoefTape, DepthAwareParams, Hard25DParams, LayerKind, MalleableParams, MalleableTape,
};
use crate::geometry::{CameraIntrinsics, DepthField, RfSpec};
use crate::rfield::{RFieldGrads, RFieldParams};
use crate::tensor::Tensor4;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    RFieldA,
    RFieldT,
    RFieldB,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer {
    Standard(Tensor4),
    Malleable(MalleableParams),
    DepthAware(DepthAwareParams),
    Hard25D(Hard25DParams),
}

impl ConvLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            ConvLayer::Standard(_) => LayerKind::Standard,
            ConvLayer::Malleable(_) => LayerKind::Malleable,
            ConvLayer::DepthAware(_) => LayerKind::DepthAware,
            ConvLayer::Hard25D(_) => LayerKind::Hard25D,
        }
    }

    pub fn banks(&self) -> Vec<&Tensor4> {
        match self {
            ConvLayer::Standard(w) => vec![w],
            ConvLayer::Malleable(p) => p.weights.iter().collect(),
            ConvLayer::DepthAware(p) => vec![&p.weights],
            ConvLayer::Hard25D(p) => p.weights.iter().collect(),
        }
    }

    fn banks_mut(&mut self) -> Vec<&mut Tensor4> {
        match self {
            ConvLayer::Standard(w) => vec![w],
            ConvLayer::Malleable(p) => p.weights.iter_mut().collect(),
            ConvLayer::DepthAware(p) => vec![&mut p.weights],
            ConvLayer::Hard25D(p) => p.weights.iter_mut().collect(),
        }
    }

    pub fn rfield(&self) -> Option<&RFieldParams> {
        match self {
            ConvLayer::Malleable(p) => Some(&p.rfield),
            _ => None,
        }
    }

    pub fn rfield_mut(&mut self) -> Option<&mut RFieldParams> {
        match self {
            ConvLayer::Malleable(p) => Some(&mut p.rfield),
            _ => None,
        }
    }
}

/// Per-channel batch normalization with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn forward(&mut self, x: &Tensor4, mode: Mode) -> (Tensor4, BnCache) {
        let [n, c, h, w] = x.dims();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut xhat = Tensor4::zeros(x.dims()).expect("same dims");
        let mut y = Tensor4::zeros(x.dims()).expect("same dims");
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        sum += x.data()[o..o + hw].iter().sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let o = (b * c + ch) * hw;
                        sq += x.data()[o..o + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / m;
                    let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                    self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean;
                    self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            let (g, bt) = (self.gamma[ch], self.beta[ch]);
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    let v = (x.data()[i] - mean) * is;
                    xhat.data_mut()[i] = v;
                    y.data_mut()[i] = g * v + bt;
                }
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Backward through the training-mode transform.
    fn backward(&self, dy: &Tensor4, cache: &BnCache) -> (Tensor4, Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = dy.dims();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dx = Tensor4::zeros(dy.dims()).expect("same dims");
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let (mut sb, mut sg) = (0.0, 0.0);
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    sb += dy.data()[i];
                    sg += dy.data()[i] * cache.xhat.data()[i];
                }
            }
            dbeta[ch] = sb;
            dgamma[ch] = sg;
            let scale = self.gamma[ch] * cache.inv_std[ch] / m;
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    dx.data_mut()[i] = scale * (m * dy.data()[i] - sb - cache.xhat.data()[i] * sg);
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

/// Conv, batch norm, rectifier. `spec.r_down` is the input rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub spec: RfSpec,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
enum ConvTape {
    Standard(Tensor4),
    Malleable(MalleableTape),
    Coef(CoefTape),
}

#[derive(Debug, Clone)]
struct BlockTape {
    conv: ConvTape,
    bn: BnCache,
    /// Post-rectifier output.
    out: Tensor4,
}

/// Intermediate values kept by a forward pass for [`ToyNet::backward`].
#[derive(Debug, Clone)]
pub struct NetTape {
    blocks: Vec<BlockTape>,
    head_in: Tensor4,
    out_hw: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub banks: Vec<Tensor4>,
    pub rfield: Option<RFieldGrads>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub blocks: Vec<BlockGrads>,
    pub head_w: Tensor4,
    pub head_b: Vec<f64>,
}

impl NetGrads {
    /// Flattened in the same order as [`ToyNet::params`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.extend(b.banks.iter().map(|t| t.data()));
            if let Some(r) = &b.rfield {
                out.push(&r.a);
                out.push(std::slice::from_ref(&r.t));
                out.push(&r.b);
            }
            out.push(&b.gamma);
            out.push(&b.beta);
        }
        out.push(self.head_w.data());
        out.push(&self.head_b);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub config: NetConfig,
    pub blocks: Vec<ConvBlock>,
    /// `(classes, channels, 1, 1)`.
    pub head_w: Tensor4,
    pub head_b: Vec<f64>,
}

fn kaiming(rng: &mut ChaCha8Rng, dims: [usize; 4], gain: f64) -> Tensor4 {
    let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
    let std = (gain / fan_in).sqrt();
    let data = (0..dims.iter().product::<usize>())
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor4::from_vec(dims, data).expect("dims")
}

impl ToyNet {
    /// Builds and initializes a network. Conv banks use Kaiming-normal
    /// initialization (`std = sqrt(2 / fan_in)`), the head `sqrt(1 / fan_in)`
    /// with zero bias, all drawn in parameter order from one seeded stream.
    pub fn build(config: &NetConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut rate = 1;
        let mut cin = config.in_channels;
        let ch = config.channels;
        for i in 0..config.blocks {
            let stride = if config.strided.contains(&i) { 2 } else { 1 };
            let spec = RfSpec::same(config.kernel_size, config.dilation, stride, rate);
            let dims = [ch, cin, config.kernel_size, config.kernel_size];
            let k = config.kind.effective_kernels(config.kernels);
            let banks: Vec<Tensor4> = if config.duplicate_banks {
                vec![kaiming(&mut rng, dims, 2.0); k]
            } else {
                (0..k).map(|_| kaiming(&mut rng, dims, 2.0)).collect()
            };
            let conv = match config.kind {
                LayerKind::Standard => ConvLayer::Standard(banks.into_iter().next().expect("one bank")),
                LayerKind::Malleable => {
                    let mut rf = RFieldParams::init(k).map_err(convops::ConvError::from)?;
                    rf.t = config.init_t;
                    ConvLayer::Malleable(MalleableParams::new(banks, None, rf, spec)?)
                }
                LayerKind::DepthAware => ConvLayer::DepthAware(DepthAwareParams::new(
                    banks.into_iter().next().expect("one bank"),
                    None,
                    config.alpha,
                    spec,
                )?),
                LayerKind::Hard25D => ConvLayer::Hard25D(Hard25DParams::new(banks, None, spec)?),
            };
            blocks.push(ConvBlock {
                conv,
                spec,
                bn: BatchNorm::new(ch),
            });
            rate *= stride;
            cin = ch;
        }
        let head_w = kaiming(&mut rng, [config.classes, ch, 1, 1], 1.0);
        Ok(Self {
            config: config.clone(),
            blocks,
            head_w,
            head_b: vec![0.0; config.classes],
        })
    }

    pub fn output_rate(&self) -> usize {
        self.config.output_rate()
    }

    pub fn malleable_blocks(&self) -> Vec<(usize, &RFieldParams)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.conv.rfield().map(|r| (i, r)))
            .collect()
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (k, w) in b.conv.banks().into_iter().enumerate() {
                out.push(ParamRef {
                    name: format!("block{i}.w{k}"),
                    kind: ParamKind::Weight,
                    data: w.data(),
                });
            }
            if let Some(r) = b.conv.rfield() {
                out.push(ParamRef {
                    name: format!("block{i}.a"),
                    kind: ParamKind::RFieldA,
                    data: &r.a,
                });
                out.push(ParamRef {
                    name: format!("block{i}.t"),
                    kind: ParamKind::RFieldT,
                    data: std::slice::from_ref(&r.t),
                });
                out.push(ParamRef {
                    name: format!("block{i}.b"),
                    kind: ParamKind::RFieldB,
                    data: &r.b,
                });
            }
            out.push(ParamRef {
                name: format!("block{i}.bn_gamma"),
                kind: ParamKind::Norm,
                data: &b.bn.gamma,
            });
            out.push(ParamRef {
                name: format!("block{i}.bn_beta"),
                kind: ParamKind::Norm,
                data: &b.bn.beta,
            });
        }
        out.push(ParamRef {
            name: "head.w".into(),
            kind: ParamKind::Weight,
            data: self.head_w.data(),
        });
        out.push(ParamRef {
            name: "head.b".into(),
            kind: ParamKind::Bias,
            data: &self.head_b,
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let ConvBlock { conv, bn, .. } = b;
            let mut rf = None;
            let banks = match conv {
                ConvLayer::Malleable(p) => {
                    rf = Some(&mut p.rfield);
                    p.weights.iter_mut().collect()
                }
                other => other.banks_mut(),
            };
            for (k, w) in banks.into_iter().enumerate() {
                out.push(ParamMut {
                    name: format!("block{i}.w{k}"),
                    kind: ParamKind::Weight,
                    data: w.data_mut(),
                });
            }
            if let Some(r) = rf {
                out.push(ParamMut {
                    name: format!("block{i}.a"),
                    kind: ParamKind::RFieldA,
                    data: &mut r.a,
                });
                out.push(ParamMut {
                    name: format!("block{i}.t"),
                    kind: ParamKind::RFieldT,
                    data: std::slice::from_mut(&mut r.t),
                });
                out.push(ParamMut {
                    name: format!("block{i}.b"),
                    kind: ParamKind::RFieldB,
                    data: &mut r.b,
                });
            }
            out.push(ParamMut {
                name: format!("block{i}.bn_gamma"),
                kind: ParamKind::Norm,
                data: &mut bn.gamma,
            });
            out.push(ParamMut {
                name: format!("block{i}.bn_beta"),
                kind: ParamKind::Norm,
                data: &mut bn.beta,
            });
        }
        out.push(ParamMut {
            name: "head.w".into(),
            kind: ParamKind::Weight,
            data: self.head_w.data_mut(),
        });
        out.push(ParamMut {
            name: "head.b".into(),
            kind: ParamKind::Bias,
            data: &mut self.head_b,
        });
        out
    }

    /// Depth fields at every rate a block consumes, keyed by rate.
    pub fn depth_pyramid(&self, depth: &DepthField) -> Result<Vec<(usize, DepthField)>, TrainError> {
        if depth.rate() != 1 {
            return Err(TrainError::Shape(format!("network input depth must be at rate 1, got {}", depth.rate())));
        }
        let mut out: Vec<(usize, DepthField)> = Vec::new();
        for b in &self.blocks {
            let r = b.spec.r_down;
            if b.conv.kind().uses_depth() && !out.iter().any(|(q, _)| *q == r) {
                out.push((r, depth.downsample(r)?));
            }
        }
        Ok(out)
    }

    /// Logits at input resolution, `(n, classes, h, w)`.
    pub fn forward(
        &mut self,
        x: &Tensor4,
        depth: &DepthField,
        camera: &CameraIntrinsics,
        mode: Mode,
    ) -> Result<(Tensor4, NetTape), TrainError> {
        if x.c() != self.config.in_channels {
            return Err(TrainError::Shape(format!(
                "expected {} input channels, got {}",
                self.config.in_channels,
                x.c()
            )));
        }
        if [depth.n(), depth.h(), depth.w()] != [x.n(), x.h(), x.w()] {
            return Err(TrainError::Shape("depth and features differ in size".into()));
        }
        let pyramid = self.depth_pyramid(depth)?;
        let at = |r: usize| &pyramid.iter().find(|(q, _)| *q == r).expect("rate in pyramid").1;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &mut self.blocks {
            let (y, conv_tape) = match &b.conv {
                ConvLayer::Standard(w) => (
                    convops::conv2d_forward(&cur, w, None, &b.spec)?,
                    ConvTape::Standard(cur.clone()),
                ),
                ConvLayer::Malleable(p) => {
                    let (y, t) = convops::malleable_forward_with_tape(&cur, at(b.spec.r_down), camera, p)?;
                    (y, ConvTape::Malleable(t))
                }
                ConvLayer::DepthAware(p) => {
                    let (y, t) = convops::depthaware_forward_with_tape(&cur, at(b.spec.r_down), p)?;
                    (y, ConvTape::Coef(t))
                }
                ConvLayer::Hard25D(p) => {
                    let (y, t) = convops::hard25d_forward_with_tape(&cur, at(b.spec.r_down), camera, p)?;
                    (y, ConvTape::Coef(t))
                }
            };
            let (z, bn) = b.bn.forward(&y, mode);
            let out = z.map(|v| v.max(0.0));
            cur = out.clone();
            tapes.push(BlockTape {
                conv: conv_tape,
                bn,
                out,
            });
        }
        let head_spec = RfSpec::same(1, 1, 1, self.output_rate());
        let low = convops::conv2d_forward(&cur, &self.head_w, Some(&self.head_b), &head_spec)?;
        let logits = upsample_nearest(&low, self.output_rate(), x.h(), x.w());
        Ok((
            logits,
            NetTape {
                blocks: tapes,
                head_in: cur,
                out_hw: (x.h(), x.w()),
            },
        ))
    }

    /// Gradients of every parameter given the gradient of the logits. The
    /// tape must come from a training-mode forward pass.
    pub fn backward(&self, tape: &NetTape, grad_logits: &Tensor4) -> Result<NetGrads, TrainError> {
        let r = self.output_rate();
        let low = downsample_sum(grad_logits, r, tape.head_in.h(), tape.head_in.w());
        debug_assert_eq!(tape.out_hw, (grad_logits.h(), grad_logits.w()));
        let head_spec = RfSpec::same(1, 1, 1, r);
        let hg = convops::conv2d_backward(&tape.head_in, &self.head_w, &head_spec, &low)?;
        let mut dcur = hg.x;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, t) in self.blocks.iter().zip(&tape.blocks).rev() {
            let mut dz = dcur;
            for (g, &o) in dz.data_mut().iter_mut().zip(t.out.data()) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let (dy, gamma, beta) = b.bn.backward(&dz, &t.bn);
            let (dx, banks, rfield) = match (&b.conv, &t.conv) {
                (ConvLayer::Standard(w), ConvTape::Standard(x)) => {
                    let g = convops::conv2d_backward(x, w, &b.spec, &dy)?;
                    (g.x, g.weights, None)
                }
                (ConvLayer::Malleable(p), ConvTape::Malleable(tp)) => {
                    let g = convops::malleable_backward(&dy, tp, p)?;
                    (g.x, g.weights, Some(g.rfield))
                }
                (ConvLayer::DepthAware(p), ConvTape::Coef(tp)) => {
                    let g = convops::depthaware_backward(&dy, tp, p)?;
                    (g.x, g.weights, None)
                }
                (ConvLayer::Hard25D(p), ConvTape::Coef(tp)) => {
                    let g = convops::hard25d_backward(&dy, tp, p)?;
                    (g.x, g.weights, None)
                }
                _ => unreachable!("tape recorded by this network"),
            };
            blocks.push(BlockGrads {
                banks,
                rfield,
                gamma,
                beta,
            });
            dcur = dx;
        }
        blocks.reverse();
        Ok(NetGrads {
            blocks,
            head_w: hg.weights.into_iter().next().expect("one bank"),
            head_b: hg.bias,
        })
    }

    /// Input feature map of block `index` for a batch, evaluated in eval mode.
    pub fn block_input(
        &self,
        index: usize,
        x: &Tensor4,
        depth: &DepthField,
        camera: &CameraIntrinsics,
    ) -> Result<Tensor4, TrainError> {
        let mut prefix = self.clone();
        prefix.blocks.truncate(index);
        prefix.config.strided.retain(|&s| s < index);
        if index == 0 {
            return Ok(x.clone());
        }
        let (_, tape) = prefix.forward(x, depth, camera, Mode::Eval)?;
        Ok(tape.head_in)
    }

    /// Depth field at the input rate of block `index`.
    pub fn block_depth(&self, index: usize, depth: &DepthField) -> Result<DepthField, TrainError> {
        Ok(depth.downsample(self.blocks[index].spec.r_down)?)
    }
}

/// Repeats each pixel into an `r x r` cell, cropped to `h x w`.
pub(crate) fn upsample_nearest(x: &Tensor4, r: usize, h: usize, w: usize) -> Tensor4 {
    if r == 1 {
        return x.clone();
    }
    let [n, c, lh, lw] = x.dims();
    let mut out = Tensor4::zeros([n, c, h, w]).expect("dims");
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.set(b, ch, y, xx, x.at(b, ch, (y / r).min(lh - 1), (xx / r).min(lw - 1)));
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`].
pub(crate) fn downsample_sum(g: &Tensor4, r: usize, lh: usize, lw: usize) -> Tensor4 {
    if r == 1 {
        return g.clone();
    }
    let [n, c, h, w] = g.dims();
    let mut out = Tensor4::zeros([n, c, lh, lw]).expect("dims");
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = out.index(b, ch, (y / r).min(lh - 1), (xx / r).min(lw - 1));
                    out.data_mut()[i] += g.at(b, ch, y, xx);
                }
            }
        }
    }
    out
}
