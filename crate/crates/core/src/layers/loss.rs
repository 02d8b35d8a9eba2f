use crate::error::{Error, Result};
use crate::numerics::{BackwardCtx, BackwardOp, Tape, Tensor, Var};

use super::dims4;

struct SoftmaxCeOp {
    probs: Vec<f64>,
    targets: Vec<usize>,
}

impl BackwardOp for SoftmaxCeOp {
    fn name(&self) -> &'static str {
        "softmax_ce_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let logits = ctx.inputs[0];
        let (b, k, h, w) = dims4(logits)?;
        let hw = h * w;
        let scale = ctx.grad.item()? / (b * hw) as f64;
        let mut d: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for bi in 0..b {
            for i in 0..hw {
                let t = self.targets[bi * hw + i];
                d[(bi * k + t) * hw + i] -= scale;
            }
        }
        Ok(vec![Some(Tensor::new(logits.shape(), d)?)])
    }
}

/// Converts a `[B, H, W]` (or `[H, W]`) tensor of class ids into indices,
/// rejecting anything that is not an integer in `[0, classes)`.
pub fn class_ids(target: &Tensor, classes: usize) -> Result<Vec<usize>> {
    target
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::Data(format!(
                    "target value {v} at index {i} is not a class id below {classes}"
                )))
            }
        })
        .collect()
}

/// Pixel-wise softmax cross-entropy averaged over every pixel of the batch.
///
/// `logits: [B, K, H, W]`, `target: [B, H, W]` of class ids.
pub fn softmax_ce_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let (b, k, h, w) = dims4(tape.value(logits))?;
    if target.shape() != [b, h, w] {
        return Err(Error::shape(format!(
            "softmax_ce_loss: target {:?} for logits {:?}",
            target.shape(),
            tape.shape(logits)
        )));
    }
    let targets = class_ids(target, k)?;
    let hw = h * w;
    let ld = tape.value(logits).data();
    let mut probs = vec![0.0; ld.len()];
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..hw {
            let at = |c: usize| (bi * k + c) * hw + i;
            let max = (0..k).map(|c| ld[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (ld[at(c)] - max).exp()).sum();
            let log_z = max + z.ln();
            for c in 0..k {
                probs[at(c)] = (ld[at(c)] - log_z).exp();
            }
            total += log_z - ld[at(targets[bi * hw + i])];
        }
    }
    let value = Tensor::scalar(total / (b * hw) as f64);
    Ok(tape.push(SoftmaxCeOp { probs, targets }, &[logits], value))
}

/// Per-pixel class probabilities `[B, K, H, W]` (no tape).
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = dims4(logits)?;
    let hw = h * w;
    let ld = logits.data();
    let mut out = vec![0.0; ld.len()];
    for bi in 0..b {
        for i in 0..hw {
            let at = |c: usize| (bi * k + c) * hw + i;
            let max = (0..k).map(|c| ld[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (ld[at(c)] - max).exp()).sum();
            for c in 0..k {
                out[at(c)] = (ld[at(c)] - max).exp() / z;
            }
        }
    }
    Tensor::new(logits.shape(), out)
}
