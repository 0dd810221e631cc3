use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss_and_grad, sgd_step, Mode, OptimState, ToyNet, TrainConfig, TrainError};
use crate::geometry::DepthField;
use crate::rfield::{rebalance, RFieldParams};
use crate::synth::{Dataset, SceneSample, Split, IGNORE_LABEL};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Steps completed.
    pub iter: usize,
    /// Learning rate used by the last step.
    pub lr: f64,
    pub loss: f64,
    pub pixel_acc: f64,
    /// Receptive-field parameters of each malleable block after the step.
    pub rfields: Vec<(usize, RFieldParams)>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub net: ToyNet,
    pub optim: OptimState,
    pub log: Vec<LogRow>,
}

/// Stacks samples into one batch: features, rate-1 depth, labels.
pub(crate) fn assemble(samples: &[&SceneSample]) -> Result<(Tensor4, DepthField, Vec<u8>), TrainError> {
    let first = samples
        .first()
        .ok_or_else(|| TrainError::Shape("empty batch".into()))?;
    let [_, c, h, w] = first.features.dims();
    let mut feats = Vec::with_capacity(samples.len() * c * h * w);
    let mut depth = Vec::with_capacity(samples.len() * h * w);
    let mut valid = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.features.dims() != [1, c, h, w] || [s.depth.n(), s.depth.h(), s.depth.w()] != [1, h, w] || s.depth.rate() != 1 {
            return Err(TrainError::Shape("samples in a batch must share one size at rate 1".into()));
        }
        if (s.labels.height, s.labels.width) != (h, w) {
            return Err(TrainError::Shape("label map size differs from features".into()));
        }
        feats.extend_from_slice(s.features.data());
        depth.extend_from_slice(s.depth.depth().data());
        valid.extend_from_slice(s.depth.valid());
        labels.extend_from_slice(&s.labels.data);
    }
    let n = samples.len();
    let depth = DepthField::with_mask(Tensor4::from_vec([n, 1, h, w], depth)?, valid, 1)?;
    Ok((Tensor4::from_vec([n, c, h, w], feats)?, depth, labels))
}

/// Sample indices for step `iter`, drawn without replacement from a stream
/// determined by `(seed, iter)` alone.
fn batch_indices(seed: u64, iter: usize, len: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rand::seq::index::sample(&mut rng, len, batch.min(len)).into_vec()
}

/// Trains a freshly initialized optimizer for `cfg.iterations` steps.
pub fn fit(net: ToyNet, data: &Dataset, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_from(net, OptimState::new(cfg), data, cfg, |_| {})
}

/// Continues training from `optim.iter` up to `cfg.iterations`, calling
/// `observe` for every logged row.
pub fn fit_from(
    mut net: ToyNet,
    mut optim: OptimState,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&LogRow),
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if net.config.classes != data.classes {
        return Err(TrainError::Config(format!(
            "network predicts {} classes, dataset has {}",
            net.config.classes, data.classes
        )));
    }
    let train = data.split(Split::Train);
    if train.is_empty() && optim.iter < cfg.iterations {
        return Err(TrainError::Config("dataset has no training samples".into()));
    }
    let mut log = Vec::new();
    while optim.iter < cfg.iterations {
        let iter = optim.iter;
        let picked: Vec<&SceneSample> = batch_indices(cfg.seed, iter, train.len(), cfg.batch)
            .into_iter()
            .map(|i| train[i])
            .collect();
        let (x, depth, labels) = assemble(&picked)?;
        let (logits, tape) = net.forward(&x, &depth, &data.camera, Mode::Train)?;
        let out = loss_and_grad(&logits, &labels, cfg.loss)?;
        if !out.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(iter));
        }
        let grads = net.backward(&tape, &out.grad)?;
        let lr = optim.lr();
        sgd_step(&mut net.params_mut(), &grads.flat(), &mut optim, cfg.freeze)?;
        if optim.iter % cfg.log_every == 0 || optim.iter == cfg.iterations {
            let row = LogRow {
                iter: optim.iter,
                lr,
                loss: out.loss,
                pixel_acc: out.pixel_acc,
                rfields: net.malleable_blocks().into_iter().map(|(i, r)| (i, r.clone())).collect(),
            };
            observe(&row);
            log.push(row);
        }
    }
    Ok(FitResult { net, optim, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pixel_acc: f64,
    pub mean_iou: f64,
    pub class_iou: Vec<f64>,
    /// `confusion[label][prediction]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

/// Eval-mode accuracy and IoU over one split, processed `batch` samples at a
/// time.
pub fn evaluate(net: &ToyNet, data: &Dataset, split: Split, batch: usize) -> Result<EvalReport, TrainError> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(TrainError::Config(format!("dataset has no {split} samples")));
    }
    let mut net = net.clone();
    let c = net.config.classes;
    let mut confusion = vec![vec![0u64; c]; c];
    for chunk in samples.chunks(batch.max(1)) {
        let (x, depth, labels) = assemble(chunk)?;
        let (logits, _) = net.forward(&x, &depth, &data.camera, Mode::Eval)?;
        let [n, _, h, w] = logits.dims();
        let hw = h * w;
        for b in 0..n {
            for p in 0..hw {
                let label = labels[b * hw + p];
                if label == IGNORE_LABEL {
                    continue;
                }
                let pred = (0..c)
                    .max_by(|&i, &j| {
                        logits.data()[(b * c + i) * hw + p]
                            .total_cmp(&logits.data()[(b * c + j) * hw + p])
                            .then(j.cmp(&i))
                    })
                    .expect("classes >= 2");
                confusion[label as usize][pred] += 1;
            }
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..c).map(|k| confusion[k][k]).sum();
    let class_iou: Vec<f64> = (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let fn_: u64 = confusion[k].iter().sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|l| confusion[l][k]).sum::<u64>() - tp;
            let denom = tp + fn_ + fp;
            if denom == 0 {
                f64::NAN
            } else {
                tp as f64 / denom as f64
            }
        })
        .collect();
    let present: Vec<f64> = class_iou.iter().copied().filter(|v| !v.is_nan()).collect();
    Ok(EvalReport {
        pixel_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        mean_iou: present.iter().sum::<f64>() / present.len().max(1) as f64,
        class_iou,
        confusion,
    })
}

/// CSV with columns `iter, lr, loss, pixel_acc` followed by
/// `block{i}_a{m}`, `block{i}_t`, `block{i}_s{k}` for each malleable block.
pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow], blocks: &[(usize, RFieldParams)]) -> Result<(), TrainError> {
    let mut out = String::from("iter,lr,loss,pixel_acc");
    for (i, r) in blocks {
        for m in 0..r.a.len() {
            out.push_str(&format!(",block{i}_a{m}"));
        }
        out.push_str(&format!(",block{i}_t"));
        for k in 0..r.b.len() {
            out.push_str(&format!(",block{i}_s{k}"));
        }
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{},{},{}", row.iter, row.lr, row.loss, row.pixel_acc));
        for (_, r) in &row.rfields {
            for v in r.a.iter().chain(std::iter::once(&r.t)).chain(&rebalance(&r.b)) {
                out.push_str(&format!(",{v}"));
            }
        }
        out.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
