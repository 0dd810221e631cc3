use super::TrainError;
use crate::synth::IGNORE_LABEL;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    CrossEntropy,
    /// Cross-entropy averaged over the hardest `ceil(fraction * N)` pixels.
    Bootstrapped(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient w.r.t. the logits.
    pub grad: Tensor4,
    /// Fraction of non-ignored pixels whose arg-max matches the label.
    pub pixel_acc: f64,
    /// Pixels entering the loss.
    pub counted: usize,
}

/// Softmax cross-entropy over `(n, C, h, w)` logits and `n * h * w` labels
/// in `[n][y][x]` order; `IGNORE_LABEL` pixels are excluded.
pub fn loss_and_grad(logits: &Tensor4, labels: &[u8], mode: LossMode) -> Result<LossOutput, TrainError> {
    let [n, c, h, w] = logits.dims();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(TrainError::Shape(format!("{} labels for {} pixels", labels.len(), n * hw)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
        return Err(TrainError::Shape(format!("label {bad} out of range for {c} classes")));
    }
    let mut probs = vec![0.0; c];
    let mut per_pixel: Vec<(f64, usize)> = Vec::new();
    let mut softmax = Tensor4::zeros(logits.dims())?;
    let mut correct = 0usize;
    for b in 0..n {
        for p in 0..hw {
            let label = labels[b * hw + p];
            if label == IGNORE_LABEL {
                continue;
            }
            let idx = |k: usize| (b * c + k) * hw + p;
            let mut best = 0;
            let mut max = f64::NEG_INFINITY;
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = logits.data()[idx(k)];
                if *pr > max {
                    max = *pr;
                    best = k;
                }
            }
            let mut z = 0.0;
            for pr in probs.iter_mut() {
                *pr = (*pr - max).exp();
                z += *pr;
            }
            for (k, pr) in probs.iter().enumerate() {
                softmax.data_mut()[idx(k)] = pr / z;
            }
            let nll = z.ln() - (logits.data()[idx(label as usize)] - max);
            per_pixel.push((nll, b * hw + p));
            if best == label as usize {
                correct += 1;
            }
        }
    }
    if per_pixel.is_empty() {
        return Err(TrainError::AllIgnored);
    }
    let valid = per_pixel.len();
    let selected: &[(f64, usize)] = match mode {
        LossMode::CrossEntropy => &per_pixel,
        LossMode::Bootstrapped(fraction) => {
            let keep = ((fraction * valid as f64).ceil() as usize).clamp(1, valid);
            // hardest first; ties keep pixel order
            per_pixel.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            &per_pixel[..keep]
        }
    };
    let count = selected.len();
    let loss = selected.iter().map(|(l, _)| l).sum::<f64>() / count as f64;
    let mut grad = Tensor4::zeros(logits.dims())?;
    let inv = 1.0 / count as f64;
    for &(_, pix) in selected {
        let (b, p) = (pix / hw, pix % hw);
        let label = labels[pix] as usize;
        for k in 0..c {
            let i = (b * c + k) * hw + p;
            let target = if k == label { 1.0 } else { 0.0 };
            grad.data_mut()[i] = (softmax.data()[i] - target) * inv;
        }
    }
    Ok(LossOutput {
        loss,
        grad,
        pixel_acc: correct as f64 / valid as f64,
        counted: count,
    })
}
