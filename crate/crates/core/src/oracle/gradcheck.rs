//! Finite-difference gradient suite over every operator and every
//! learnable input, on seeded random instances.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convops::{
    conv2d_backward, conv2d_forward, depthaware_backward, depthaware_forward, depthaware_forward_with_tape,
    hard25d_backward, hard25d_forward, hard25d_forward_with_tape, malleable_backward, malleable_forward,
    malleable_forward_with_tape, ConvError, DepthAwareParams, Hard25DParams, MalleableParams,
};
use crate::geometry::{CameraIntrinsics, DepthField, RfSpec};
use crate::rfield::RFieldParams;
use crate::tensor::Tensor4;

use super::{fd_gradient, relative_error, OracleError};

/// A random operator instance: features, depth, camera and weights.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub x: Tensor4,
    pub depth: DepthField,
    pub camera: CameraIntrinsics,
    pub spec: RfSpec,
    pub banks: Vec<Tensor4>,
    pub bias: Vec<f64>,
    pub rfield: RFieldParams,
}

impl RandomInstance {
    /// Draws an instance with `n <= max_batch`, channels `<= max_channels`,
    /// spatial extent in `3..=max_spatial` and `kernels` banks. Depth is a
    /// tilted plane with random steps and noise, and roughly 5% of pixels
    /// carry no depth.
    pub fn draw(rng: &mut ChaCha8Rng, kernels: usize, max_batch: usize, max_channels: usize, max_spatial: usize) -> Self {
        let n = rng.gen_range(1..=max_batch.max(1));
        let cin = rng.gen_range(1..=max_channels.max(1));
        let cout = rng.gen_range(1..=max_channels.max(1));
        let max_spatial = max_spatial.max(3);
        let (spec, h, w) = loop {
            let k = if rng.gen_bool(0.85) { 3 } else { 1 };
            let dilation = rng.gen_range(1..=2);
            let stride = rng.gen_range(1..=2);
            let r_down = rng.gen_range(1..=2);
            let spec = RfSpec::same(k, dilation, stride, r_down);
            let h = rng.gen_range(3..=max_spatial);
            let w = rng.gen_range(3..=max_spatial);
            if spec.output_size(h, w).is_some() {
                break (spec, h, w);
            }
        };
        let x = Tensor4::randn([n, cin, h, w], rng.gen()).expect("small dims");
        let base = rng.gen_range(1.5..6.0);
        let (gy, gx) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let step_at = rng.gen_range(0..w);
        let step = rng.gen_range(-0.4..0.4);
        let mut d = Vec::with_capacity(n * h * w);
        for _ in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut v = base + gy * y as f64 + gx * xx as f64 + rng.gen_range(-0.08..0.08);
                    if xx >= step_at {
                        v += step;
                    }
                    if rng.gen_bool(0.05) {
                        v = 0.0;
                    }
                    d.push(v);
                }
            }
        }
        let depth = DepthField::new(Tensor4::from_vec([n, 1, h, w], d).expect("dims"), spec.r_down).expect("one channel");
        let f = rng.gen_range(25.0..90.0);
        let camera = CameraIntrinsics::new(f * rng.gen_range(0.98..1.02), f, w as f64 / 2.0, h as f64 / 2.0)
            .expect("positive focal");
        let (kh, kw) = spec.kernel;
        let banks = (0..kernels)
            .map(|_| Tensor4::randn([cout, cin, kh, kw], rng.gen()).expect("dims").scale(0.5))
            .collect();
        let bias = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut rfield = RFieldParams::init(kernels).expect("kernels >= 1");
        for a in &mut rfield.a {
            *a += rng.gen_range(-0.3..0.3);
        }
        rfield.t = rng.gen_range(0.5..2.0);
        for b in &mut rfield.b {
            *b = rng.gen_range(-1.0..1.0);
        }
        Self {
            x,
            depth,
            camera,
            spec,
            banks,
            bias,
            rfield,
        }
    }

    pub fn malleable(&self) -> MalleableParams {
        MalleableParams::new(self.banks.clone(), Some(self.bias.clone()), self.rfield.clone(), self.spec)
            .expect("consistent instance")
    }

    pub fn hard25d(&self) -> Hard25DParams {
        Hard25DParams::new(self.banks.clone(), Some(self.bias.clone()), self.spec).expect("consistent instance")
    }

    pub fn depthaware(&self, alpha: f64) -> DepthAwareParams {
        DepthAwareParams::new(self.banks[0].clone(), Some(self.bias.clone()), alpha, self.spec)
            .expect("consistent instance")
    }
}

/// Deliberate corruption of an analytical gradient, for testing that the
/// suite actually fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipRFieldA,
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_batch: usize,
    pub max_channels: usize,
    pub max_spatial: usize,
    pub kernels: Vec<usize>,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for [`relative_error`].
    pub floor: f64,
    /// Random coordinates checked per feature/weight tensor; bias and
    /// receptive-field parameters are always checked in full.
    pub coords_per_tensor: usize,
    pub alpha: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            max_batch: 2,
            max_channels: 4,
            max_spatial: 9,
            kernels: vec![1, 3, 5],
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-2,
            coords_per_tensor: usize::MAX,
            alpha: 1.0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub op: &'static str,
    pub param: &'static str,
    pub checked: usize,
    pub worst: f64,
    pub worst_trial: usize,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub trials: usize,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.worst < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().filter(|g| g.worst >= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst).fold(0.0, f64::max)
    }

    fn record(&mut self, op: &'static str, param: &'static str, trial: usize, errs: &[(usize, f64)]) {
        let idx = match self.groups.iter().position(|g| g.op == op && g.param == param) {
            Some(i) => i,
            None => {
                self.groups.push(GroupResult {
                    op,
                    param,
                    checked: 0,
                    worst: 0.0,
                    worst_trial: 0,
                    worst_index: 0,
                });
                self.groups.len() - 1
            }
        };
        let g = &mut self.groups[idx];
        for &(i, e) in errs {
            g.checked += 1;
            // NaN counts as worst
            if !(e <= g.worst) {
                g.worst = e;
                g.worst_trial = trial;
                g.worst_index = i;
            }
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:<8} {:>8} {:>12}  worst at", "op", "param", "checked", "max rel err")?;
        for g in &self.groups {
            let flag = if g.worst < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<12} {:<8} {:>8} {:>12.3e}  trial {} index {}  {}",
                g.op, g.param, g.checked, g.worst, g.worst_trial, g.worst_index, flag
            )?;
        }
        write!(
            f,
            "{} trials, tolerance {:.1e}: {}",
            self.trials,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("kernel list is empty or contains 0")]
    Kernels,
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

fn pick(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, count).into_vec();
        v.sort_unstable();
        v
    }
}

fn compare(
    analytical: &[f64],
    theta: &[f64],
    coords: &[usize],
    cfg: &GradcheckConfig,
    loss: impl FnMut(&[f64]) -> f64,
) -> Result<Vec<(usize, f64)>, OracleError> {
    let fd = fd_gradient(loss, theta, coords, cfg.step)?;
    Ok(coords
        .iter()
        .zip(fd)
        .map(|(&i, n)| (i, relative_error(analytical[i], n, cfg.floor)))
        .collect())
}

fn project(y: &Tensor4, r: &Tensor4) -> f64 {
    y.dot(r).expect("same dims")
}

fn with_data(t: &Tensor4, data: &[f64]) -> Tensor4 {
    Tensor4::from_vec(t.dims(), data.to_vec()).expect("same length")
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    if cfg.trials == 0 {
        return Err(GradcheckError::NoTrials);
    }
    if cfg.kernels.is_empty() || cfg.kernels.contains(&0) {
        return Err(GradcheckError::Kernels);
    }
    let mut report = GradcheckReport {
        tolerance: cfg.tolerance,
        trials: cfg.trials,
        groups: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for trial in 0..cfg.trials {
        let k = cfg.kernels[trial % cfg.kernels.len()];
        let inst = RandomInstance::draw(&mut rng, k, cfg.max_batch, cfg.max_channels, cfg.max_spatial);
        check_malleable(&inst, cfg, trial, &mut rng, &mut report)?;
        check_baselines(&inst, cfg, trial, &mut rng, &mut report)?;
    }
    Ok(report)
}

fn check_malleable(
    inst: &RandomInstance,
    cfg: &GradcheckConfig,
    trial: usize,
    rng: &mut ChaCha8Rng,
    report: &mut GradcheckReport,
) -> Result<(), GradcheckError> {
    const OP: &str = "malleable";
    let params = inst.malleable();
    let (y, tape) = malleable_forward_with_tape(&inst.x, &inst.depth, &inst.camera, &params)?;
    let r = Tensor4::randn(y.dims(), rng.gen())?;
    let mut g = malleable_backward(&r, &tape, &params)?;
    if cfg.fault == Some(Fault::FlipRFieldA) {
        for v in &mut g.rfield.a {
            *v = -*v;
        }
    }
    let eval = |p: &MalleableParams, x: &Tensor4| -> f64 {
        malleable_forward(x, &inst.depth, &inst.camera, p).map_or(f64::NAN, |y| project(&y, &r))
    };

    let coords = pick(rng, inst.x.len(), cfg.coords_per_tensor);
    let errs = compare(g.x.data(), inst.x.data(), &coords, cfg, |th| eval(&params, &with_data(&inst.x, th)))?;
    report.record(OP, "x", trial, &errs);

    for kk in 0..params.kernels() {
        let bank = &params.weights[kk];
        let coords = pick(rng, bank.len(), cfg.coords_per_tensor);
        let errs = compare(g.weights[kk].data(), bank.data(), &coords, cfg, |th| {
            let mut p = params.clone();
            p.weights[kk] = with_data(bank, th);
            eval(&p, &inst.x)
        })?;
        report.record(OP, "w", trial, &errs);
    }

    let bias = params.bias.clone().unwrap_or_default();
    let all: Vec<usize> = (0..bias.len()).collect();
    let errs = compare(&g.bias, &bias, &all, cfg, |th| {
        let mut p = params.clone();
        p.bias = Some(th.to_vec());
        eval(&p, &inst.x)
    })?;
    report.record(OP, "bias", trial, &errs);

    let a = params.rfield.a.clone();
    let all: Vec<usize> = (0..a.len()).collect();
    let errs = compare(&g.rfield.a, &a, &all, cfg, |th| {
        let mut p = params.clone();
        p.rfield.a = th.to_vec();
        eval(&p, &inst.x)
    })?;
    report.record(OP, "a", trial, &errs);

    let errs = compare(&[g.rfield.t], &[params.rfield.t], &[0], cfg, |th| {
        let mut p = params.clone();
        p.rfield.t = th[0];
        eval(&p, &inst.x)
    })?;
    report.record(OP, "t", trial, &errs);

    let b = params.rfield.b.clone();
    let all: Vec<usize> = (0..b.len()).collect();
    let errs = compare(&g.rfield.b, &b, &all, cfg, |th| {
        let mut p = params.clone();
        p.rfield.b = th.to_vec();
        eval(&p, &inst.x)
    })?;
    report.record(OP, "b", trial, &errs);
    Ok(())
}

fn check_baselines(
    inst: &RandomInstance,
    cfg: &GradcheckConfig,
    trial: usize,
    rng: &mut ChaCha8Rng,
    report: &mut GradcheckReport,
) -> Result<(), GradcheckError> {
    // standard
    {
        const OP: &str = "standard";
        let w = &inst.banks[0];
        let y = conv2d_forward(&inst.x, w, Some(&inst.bias), &inst.spec)?;
        let r = Tensor4::randn(y.dims(), rng.gen())?;
        let g = conv2d_backward(&inst.x, w, &inst.spec, &r)?;
        let eval = |x: &Tensor4, w: &Tensor4, b: &[f64]| {
            conv2d_forward(x, w, Some(b), &inst.spec).map_or(f64::NAN, |y| project(&y, &r))
        };
        let coords = pick(rng, inst.x.len(), cfg.coords_per_tensor);
        let errs = compare(g.x.data(), inst.x.data(), &coords, cfg, |th| {
            eval(&with_data(&inst.x, th), w, &inst.bias)
        })?;
        report.record(OP, "x", trial, &errs);
        let coords = pick(rng, w.len(), cfg.coords_per_tensor);
        let errs = compare(g.weights[0].data(), w.data(), &coords, cfg, |th| {
            eval(&inst.x, &with_data(w, th), &inst.bias)
        })?;
        report.record(OP, "w", trial, &errs);
        let all: Vec<usize> = (0..inst.bias.len()).collect();
        let errs = compare(&g.bias, &inst.bias, &all, cfg, |th| eval(&inst.x, w, th))?;
        report.record(OP, "bias", trial, &errs);
    }
    // depth-aware
    {
        const OP: &str = "depthaware";
        let params = inst.depthaware(cfg.alpha);
        let (y, tape) = depthaware_forward_with_tape(&inst.x, &inst.depth, &params)?;
        let r = Tensor4::randn(y.dims(), rng.gen())?;
        let g = depthaware_backward(&r, &tape, &params)?;
        let eval = |p: &DepthAwareParams, x: &Tensor4| {
            depthaware_forward(x, &inst.depth, p).map_or(f64::NAN, |y| project(&y, &r))
        };
        let coords = pick(rng, inst.x.len(), cfg.coords_per_tensor);
        let errs = compare(g.x.data(), inst.x.data(), &coords, cfg, |th| eval(&params, &with_data(&inst.x, th)))?;
        report.record(OP, "x", trial, &errs);
        let coords = pick(rng, params.weights.len(), cfg.coords_per_tensor);
        let errs = compare(g.weights[0].data(), params.weights.data(), &coords, cfg, |th| {
            let mut p = params.clone();
            p.weights = with_data(&params.weights, th);
            eval(&p, &inst.x)
        })?;
        report.record(OP, "w", trial, &errs);
        let all: Vec<usize> = (0..inst.bias.len()).collect();
        let errs = compare(&g.bias, &inst.bias, &all, cfg, |th| {
            let mut p = params.clone();
            p.bias = Some(th.to_vec());
            eval(&p, &inst.x)
        })?;
        report.record(OP, "bias", trial, &errs);
    }
    // hard 2.5D
    {
        const OP: &str = "hard25d";
        let params = inst.hard25d();
        let (y, tape) = hard25d_forward_with_tape(&inst.x, &inst.depth, &inst.camera, &params)?;
        let r = Tensor4::randn(y.dims(), rng.gen())?;
        let g = hard25d_backward(&r, &tape, &params)?;
        let eval = |p: &Hard25DParams, x: &Tensor4| {
            hard25d_forward(x, &inst.depth, &inst.camera, p).map_or(f64::NAN, |y| project(&y, &r))
        };
        let coords = pick(rng, inst.x.len(), cfg.coords_per_tensor);
        let errs = compare(g.x.data(), inst.x.data(), &coords, cfg, |th| eval(&params, &with_data(&inst.x, th)))?;
        report.record(OP, "x", trial, &errs);
        for kk in 0..params.kernels() {
            let bank = &params.weights[kk];
            let coords = pick(rng, bank.len(), cfg.coords_per_tensor);
            let errs = compare(g.weights[kk].data(), bank.data(), &coords, cfg, |th| {
                let mut p = params.clone();
                p.weights[kk] = with_data(bank, th);
                eval(&p, &inst.x)
            })?;
            report.record(OP, "w", trial, &errs);
        }
        let all: Vec<usize> = (0..inst.bias.len()).collect();
        let errs = compare(&g.bias, &inst.bias, &all, cfg, |th| {
            let mut p = params.clone();
            p.bias = Some(th.to_vec());
            eval(&p, &inst.x)
        })?;
        report.record(OP, "bias", trial, &errs);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = GradcheckConfig {
            trials: 6,
            seed: 3,
            ..GradcheckConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert!(report.passed(), "{report}");
        for p in ["x", "w", "bias", "a", "t", "b"] {
            assert!(report.groups.iter().any(|g| g.op == "malleable" && g.param == p));
        }
    }

    #[test]
    fn flipped_a_is_caught() {
        let cfg = GradcheckConfig {
            trials: 3,
            seed: 3,
            fault: Some(Fault::FlipRFieldA),
            ..GradcheckConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|g| (g.op, g.param)).collect();
        assert_eq!(failed, vec![("malleable", "a")]);
    }

    #[test]
    fn zero_trials_rejected() {
        let cfg = GradcheckConfig {
            trials: 0,
            ..GradcheckConfig::default()
        };
        assert!(matches!(run(&cfg), Err(GradcheckError::NoTrials)));
    }
}
