//! Toy segmentation network and momentum-SGD training.
//!
//! [`ToyNet`] stacks conv blocks (any of the four operators, each followed
//! by batch normalization and a rectifier) with optional stride-2 stages and
//! a 1x1 classifier head whose logits are upsampled back to label
//! resolution. Each depth-consuming block reads the depth field resampled to
//! its input rate.

mod checkpoint;
mod fit;
mod loss;
mod net;
mod optim;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::convops::{ConvError, LayerKind};
use crate::geometry::GeometryError;
use crate::kvfile::{KvError, KvFile};
use crate::synth::SynthError;
use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use fit::{evaluate, fit, fit_from, write_log_csv, EvalReport, FitResult, LogRow};
pub use loss::{loss_and_grad, LossMode, LossOutput};
pub use net::{BatchNorm, ConvBlock, ConvLayer, Mode, NetGrads, ParamKind, ParamMut, ParamRef, ToyNet};
pub use optim::{poly_lr, sgd_step, OptimState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("every pixel in the batch is ignored")]
    AllIgnored,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub kind: LayerKind,
    /// Kernel banks per depth-conditioned block (ignored by single-bank kinds).
    pub kernels: usize,
    pub blocks: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    /// Zero-based indices of blocks that use stride 2.
    pub strided: Vec<usize>,
    /// Depth-aware similarity coefficient.
    pub alpha: f64,
    /// Initial softmax temperature of malleable blocks.
    pub init_t: f64,
    /// Start every bank of a block from the same draw.
    pub duplicate_banks: bool,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            kind: LayerKind::Malleable,
            kernels: 3,
            blocks: 5,
            channels: 8,
            in_channels: 3,
            classes: 3,
            kernel_size: 3,
            dilation: 1,
            strided: vec![2],
            alpha: crate::convops::DEFAULT_DEPTH_AWARE_ALPHA,
            init_t: 1.0,
            duplicate_banks: false,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.blocks == 0 || self.channels == 0 || self.in_channels == 0 || self.kernels == 0 {
            return err("blocks, channels, in_channels and kernels must be >= 1".into());
        }
        if self.classes < 2 {
            return err("classes must be >= 2".into());
        }
        if self.kernel_size % 2 == 0 || self.dilation == 0 {
            return err("kernel_size must be odd and dilation >= 1".into());
        }
        let mut seen = self.strided.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.strided.len() || seen.iter().any(|&b| b >= self.blocks) {
            return err(format!("strided blocks {:?} must be distinct and < {}", self.strided, self.blocks));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return err("alpha must be >= 0".into());
        }
        if !(self.init_t.is_finite() && self.init_t >= crate::rfield::T_MIN) {
            return err("init_t must be >= t_min".into());
        }
        Ok(())
    }

    /// Total downsampling factor between the input and the head.
    pub fn output_rate(&self) -> usize {
        1 << self.strided.len()
    }

    pub fn write_kv(&self, kv: &mut KvFile, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.set(&k("kind"), self.kind);
        kv.set(&k("kernels"), self.kernels);
        kv.set(&k("blocks"), self.blocks);
        kv.set(&k("channels"), self.channels);
        kv.set(&k("in_channels"), self.in_channels);
        kv.set(&k("classes"), self.classes);
        kv.set(&k("kernel_size"), self.kernel_size);
        kv.set(&k("dilation"), self.dilation);
        kv.set_list(&k("strided"), &self.strided);
        kv.set(&k("alpha"), self.alpha);
        kv.set(&k("init_t"), self.init_t);
        kv.set(&k("duplicate_banks"), self.duplicate_banks);
        kv.set(&k("seed"), self.seed);
    }

    pub fn read_kv(kv: &KvFile, prefix: &str) -> Result<Self, TrainError> {
        let d = Self::default();
        let k = |s: &str| format!("{prefix}{s}");
        let kind_key = k("kind");
        let kind = match kv.get(&kind_key) {
            Some(v) => v.parse().map_err(|_| KvError::BadValue {
                key: kind_key.clone(),
                value: v.to_string(),
            })?,
            None => d.kind,
        };
        let cfg = Self {
            kind,
            kernels: kv.parse_or(&k("kernels"), d.kernels)?,
            blocks: kv.parse_or(&k("blocks"), d.blocks)?,
            channels: kv.parse_or(&k("channels"), d.channels)?,
            in_channels: kv.parse_or(&k("in_channels"), d.in_channels)?,
            classes: kv.parse_or(&k("classes"), d.classes)?,
            kernel_size: kv.parse_or(&k("kernel_size"), d.kernel_size)?,
            dilation: kv.parse_or(&k("dilation"), d.dilation)?,
            strided: kv.parse_list_or(&k("strided"), d.strided)?,
            alpha: kv.parse_or(&k("alpha"), d.alpha)?,
            init_t: kv.parse_or(&k("init_t"), d.init_t)?,
            duplicate_banks: kv.parse_or(&k("duplicate_banks"), d.duplicate_banks)?,
            seed: kv.parse_or(&k("seed"), d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which receptive-field parameters of malleable blocks stay fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreezeSet {
    pub a: bool,
    pub t: bool,
    pub b: bool,
}

impl FreezeSet {
    pub const NONE: Self = Self {
        a: false,
        t: false,
        b: false,
    };
    pub const ALL: Self = Self {
        a: true,
        t: true,
        b: true,
    };

    pub fn freezes(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::RFieldA => self.a,
            ParamKind::RFieldT => self.t,
            ParamKind::RFieldB => self.b,
            _ => false,
        }
    }
}

impl fmt::Display for FreezeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.a, "a"), (self.t, "t"), (self.b, "b")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for FreezeSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = Self::NONE;
        for part in s.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "a" => set.a = true,
                "t" => set.t = true,
                "b" => set.b = true,
                other => return Err(format!("cannot freeze `{other}` (choose from a, t, b, none)")),
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    /// Learning-rate multiplier for the receptive-field parameters.
    pub rfield_lr_mult: f64,
    pub loss: LossMode,
    pub freeze: FreezeSet,
    /// Log one row every this many iterations (and after the last one).
    pub log_every: usize,
    /// Batch sampling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            rfield_lr_mult: 1.0,
            loss: LossMode::CrossEntropy,
            freeze: FreezeSet::NONE,
            log_every: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch == 0 || self.log_every == 0 {
            return err("batch and log_every must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.rfield_lr_mult.is_finite() && self.rfield_lr_mult >= 0.0) {
            return err("learning rates must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must be in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) || !(self.power.is_finite() && self.power >= 0.0) {
            return err("weight_decay and power must be >= 0");
        }
        if let LossMode::Bootstrapped(f) = self.loss {
            if !(f > 0.0 && f <= 1.0) {
                return err("bootstrap fraction must be in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvFile, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.set(&k("iterations"), self.iterations);
        kv.set(&k("batch"), self.batch);
        kv.set(&k("lr"), self.lr);
        kv.set(&k("momentum"), self.momentum);
        kv.set(&k("weight_decay"), self.weight_decay);
        kv.set(&k("power"), self.power);
        kv.set(&k("rfield_lr_mult"), self.rfield_lr_mult);
        let (mode, fraction) = match self.loss {
            LossMode::CrossEntropy => ("ce", 1.0),
            LossMode::Bootstrapped(f) => ("bootstrap", f),
        };
        kv.set(&k("loss"), mode);
        kv.set(&k("bootstrap_fraction"), fraction);
        kv.set(&k("freeze"), self.freeze);
        kv.set(&k("log_every"), self.log_every);
        kv.set(&k("seed"), self.seed);
    }

    pub fn read_kv(kv: &KvFile, prefix: &str) -> Result<Self, TrainError> {
        let d = Self::default();
        let k = |s: &str| format!("{prefix}{s}");
        let bad = |key: String, value: &str| KvError::BadValue {
            key,
            value: value.to_string(),
        };
        let fraction: f64 = kv.parse_or(&k("bootstrap_fraction"), 1.0)?;
        let loss = match kv.get(&k("loss")) {
            None | Some("ce") => LossMode::CrossEntropy,
            Some("bootstrap") => LossMode::Bootstrapped(fraction),
            Some(v) => return Err(bad(k("loss"), v).into()),
        };
        let freeze = match kv.get(&k("freeze")) {
            Some(v) => v.parse().map_err(|_| bad(k("freeze"), v))?,
            None => d.freeze,
        };
        let cfg = Self {
            iterations: kv.parse_or(&k("iterations"), d.iterations)?,
            batch: kv.parse_or(&k("batch"), d.batch)?,
            lr: kv.parse_or(&k("lr"), d.lr)?,
            momentum: kv.parse_or(&k("momentum"), d.momentum)?,
            weight_decay: kv.parse_or(&k("weight_decay"), d.weight_decay)?,
            power: kv.parse_or(&k("power"), d.power)?,
            rfield_lr_mult: kv.parse_or(&k("rfield_lr_mult"), d.rfield_lr_mult)?,
            loss,
            freeze,
            log_every: kv.parse_or(&k("log_every"), d.log_every)?,
            seed: kv.parse_or(&k("seed"), d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
