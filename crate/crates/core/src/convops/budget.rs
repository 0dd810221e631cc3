//! Per-layer parameter and arithmetic budgets.
//!
//! Convolution work is counted in multiply-accumulates (MACs). Depth and
//! assignment arithmetic is counted in elementary operations (add, mul,
//! div, exp, compare each count as one) and reported separately, so the
//! relative overhead of the depth-conditioned operators is visible next to
//! the convolution cost they ride on.
//!
//! Per output position and window tap:
//!
//! | operator    | depth ops | assignment ops      | modulation ops |
//! |-------------|-----------|---------------------|----------------|
//! | standard    | 0         | 0                   | 0              |
//! | depth-aware | 2         | 2                   | `c_in`         |
//! | hard 2.5D   | 2         | 2                   | `K * c_in`     |
//! | malleable   | 2         | `7(K+2) + K`        | `K * c_in`     |
//!
//! Relative differences additionally cost 2 ops per output position (the
//! depth unit), and the malleable rebalancing softmax costs `3K` once per
//! layer.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Standard,
    Malleable,
    DepthAware,
    Hard25D,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Standard => "standard",
            LayerKind::Malleable => "malleable",
            LayerKind::DepthAware => "depthaware",
            LayerKind::Hard25D => "hard25d",
        }
    }

    pub fn uses_depth(self) -> bool {
        self != LayerKind::Standard
    }

    /// Kernel count this kind actually uses for a requested `K`.
    pub fn effective_kernels(self, requested: usize) -> usize {
        match self {
            LayerKind::Standard | LayerKind::DepthAware => 1,
            LayerKind::Malleable | LayerKind::Hard25D => requested,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "conv" | "conv2d" => Ok(LayerKind::Standard),
            "malleable" => Ok(LayerKind::Malleable),
            "depthaware" | "depth-aware" => Ok(LayerKind::DepthAware),
            "hard25d" | "hard-2.5d" | "2.5d" => Ok(LayerKind::Hard25D),
            other => Err(format!("unknown layer kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub kind: LayerKind,
    pub kernels: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Budget {
    pub weight_params: u64,
    pub bias_params: u64,
    pub introduced_params: u64,
    pub conv_macs: u64,
    pub depth_ops: u64,
    pub assignment_ops: u64,
    pub modulation_ops: u64,
}

impl Budget {
    pub fn params(&self) -> u64 {
        self.weight_params + self.bias_params + self.introduced_params
    }

    /// Convolution MACs plus all overhead operations.
    pub fn total_ops(&self) -> u64 {
        self.conv_macs + self.depth_ops + self.assignment_ops + self.modulation_ops
    }
}

pub fn count_params(desc: &LayerDescriptor) -> u64 {
    estimate_flops(desc).params()
}

pub fn estimate_flops(desc: &LayerDescriptor) -> Budget {
    let k = desc.kind.effective_kernels(desc.kernels) as u64;
    let taps = (desc.kh * desc.kw) as u64;
    let positions = (desc.out_h * desc.out_w) as u64;
    let c_in = desc.c_in as u64;
    let c_out = desc.c_out as u64;
    let per_tap = positions * taps;

    let mut b = Budget {
        weight_params: k * c_out * c_in * taps,
        bias_params: if desc.bias { c_out } else { 0 },
        conv_macs: k * c_out * c_in * taps * positions,
        ..Budget::default()
    };
    match desc.kind {
        LayerKind::Standard => {}
        LayerKind::DepthAware => {
            b.depth_ops = 2 * per_tap;
            b.assignment_ops = 2 * per_tap;
            b.modulation_ops = c_in * per_tap;
        }
        LayerKind::Hard25D => {
            b.depth_ops = 2 * per_tap + 2 * positions;
            b.assignment_ops = 2 * per_tap;
            b.modulation_ops = k * c_in * per_tap;
        }
        LayerKind::Malleable => {
            b.introduced_params = 2 * k + 3;
            b.depth_ops = 2 * per_tap + 2 * positions;
            b.assignment_ops = (7 * (k + 2) + k) * per_tap + 3 * k;
            b.modulation_ops = k * c_in * per_tap;
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(kind: LayerKind, kernels: usize) -> LayerDescriptor {
        LayerDescriptor {
            kind,
            kernels,
            c_in: 256,
            c_out: 256,
            kh: 3,
            kw: 3,
            out_h: 96,
            out_w: 96,
            bias: false,
        }
    }

    #[test]
    fn overhead_is_2k_plus_3() {
        for k in 1..=8 {
            let m = count_params(&desc(LayerKind::Malleable, k));
            let h = count_params(&desc(LayerKind::Hard25D, k));
            assert_eq!(m - h, 2 * k as u64 + 3);
        }
        let m1 = count_params(&desc(LayerKind::Malleable, 1));
        let s = count_params(&desc(LayerKind::Standard, 1));
        assert_eq!(m1 - s, 5);
        assert_eq!(count_params(&desc(LayerKind::DepthAware, 1)), s);
    }

    #[test]
    fn flops_overhead_is_small() {
        let m = estimate_flops(&desc(LayerKind::Malleable, 3)).total_ops() as f64;
        let h = estimate_flops(&desc(LayerKind::Hard25D, 3)).total_ops() as f64;
        assert!(m > h);
        assert!((m - h) / h < 1e-3);
    }

    #[test]
    fn kind_names_parse() {
        for k in [LayerKind::Standard, LayerKind::Malleable, LayerKind::DepthAware, LayerKind::Hard25D] {
            assert_eq!(k.name().parse::<LayerKind>().unwrap(), k);
        }
        assert!("bogus".parse::<LayerKind>().is_err());
    }
}
