use super::{FreezeSet, ParamKind, ParamMut, TrainConfig, TrainError};
use crate::rfield::T_MIN;

/// `base * (1 - iter / max_iter)^power`, zero from `max_iter` on.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rfield_lr_mult: f64,
    /// Steps taken so far.
    pub iter: usize,
    /// One buffer per parameter, in parameter order; created on first step.
    pub buffers: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            base_lr: cfg.lr,
            power: cfg.power,
            max_iter: cfg.iterations,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            rfield_lr_mult: cfg.rfield_lr_mult,
            iter: 0,
            buffers: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        poly_lr(self.base_lr, self.iter, self.max_iter, self.power)
    }
}

/// One momentum-SGD step:
/// `buf = momentum * buf + grad + wd * theta` (decay on conv weights only),
/// `theta -= lr * buf`. Frozen parameters are left untouched, temperatures
/// are clamped to `T_MIN` afterwards, and the iteration counter advances.
pub fn sgd_step(
    params: &mut [ParamMut<'_>],
    grads: &[&[f64]],
    state: &mut OptimState,
    freeze: FreezeSet,
) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.data.len() != g.len() {
            return Err(TrainError::Shape(format!("gradient for `{}` has {} entries, expected {}", p.name, g.len(), p.data.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGrad(p.name.clone()));
        }
    }
    if state.buffers.is_empty() {
        state.buffers = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    }
    if state.buffers.len() != params.len() {
        return Err(TrainError::Shape("momentum buffers do not match parameters".into()));
    }
    let lr = state.lr();
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        if freeze.freezes(p.kind) {
            continue;
        }
        let decay = if p.kind == ParamKind::Weight { state.weight_decay } else { 0.0 };
        let step = match p.kind {
            ParamKind::RFieldA | ParamKind::RFieldT | ParamKind::RFieldB => lr * state.rfield_lr_mult,
            _ => lr,
        };
        for ((theta, &gi), bi) in p.data.iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
            *bi = state.momentum * *bi + gi + decay * *theta;
            *theta -= step * *bi;
        }
        if p.kind == ParamKind::RFieldT {
            for t in p.data.iter_mut() {
                if *t < T_MIN || t.is_nan() {
                    *t = T_MIN;
                }
            }
        }
    }
    state.iter += 1;
    Ok(())
}
