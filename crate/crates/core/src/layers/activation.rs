use std::hash::Hasher;

use crate::error::Result;
use crate::numerics::{BackwardCtx, BackwardOp, Tape, Tensor, Var};

struct ReluOp;
struct SigmoidOp;
struct TanhOp;

impl BackwardOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        // subgradient at 0 is 0
        let dx = ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })?;
        Ok(vec![Some(dx)])
    }

    fn signature(&self, inputs: &[&Tensor], h: &mut dyn Hasher) {
        for chunk in inputs[0].data().chunks(64) {
            let bits = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
            h.write_u64(bits);
        }
    }
}

impl BackwardOp for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let dx = ctx.grad.zip_map(ctx.output, |g, s| g * s * (1.0 - s))?;
        Ok(vec![Some(dx)])
    }
}

impl BackwardOp for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let dx = ctx.grad.zip_map(ctx.output, |g, t| g * (1.0 - t * t))?;
        Ok(vec![Some(dx)])
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let v = tape.value(x).map(|a| a.max(0.0));
    tape.push(ReluOp, &[x], v)
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Var {
    let v = tape.value(x).map(sigmoid_scalar);
    tape.push(SigmoidOp, &[x], v)
}

pub fn tanh_act(tape: &mut Tape, x: Var) -> Var {
    let v = tape.value(x).map(f64::tanh);
    tape.push(TanhOp, &[x], v)
}
