//! Channel concatenation and the two broadcasting products used by the
//! SE gate and the ConvLSTM peepholes.

use crate::error::{Error, Result};
use crate::numerics::{BackwardCtx, BackwardOp, Tape, Tensor, Var};

use super::dims4;

struct ConcatOp {
    channels: Vec<usize>,
}

impl BackwardOp for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (b, total, h, w) = dims4(ctx.grad)?;
        let hw = h * w;
        let g = ctx.grad.data();
        let mut out = Vec::with_capacity(self.channels.len());
        let mut offset = 0;
        for (i, &c) in self.channels.iter().enumerate() {
            if ctx.needs[i] {
                let mut d = Vec::with_capacity(b * c * hw);
                for bi in 0..b {
                    let start = (bi * total + offset) * hw;
                    d.extend_from_slice(&g[start..start + c * hw]);
                }
                out.push(Some(Tensor::new(&[b, c, h, w], d)?));
            } else {
                out.push(None);
            }
            offset += c;
        }
        Ok(out)
    }
}

/// Stacks `[B, F_i, H, W]` tensors along the channel axis in argument order.
pub fn concat_channels(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Contract("concat_channels of an empty list".into()))?;
    let (b, _, h, w) = dims4(tape.value(*first))?;
    let mut channels = Vec::with_capacity(xs.len());
    for &x in xs {
        let (bx, c, hx, wx) = dims4(tape.value(x))?;
        if (bx, hx, wx) != (b, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} does not match batch/spatial extents of {:?}",
                tape.shape(x),
                tape.shape(*first)
            )));
        }
        channels.push(c);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for (&x, &c) in xs.iter().zip(&channels) {
            out.extend_from_slice(&tape.value(x).data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    let value = Tensor::new(&[b, total, h, w], out)?;
    Ok(tape.push(ConcatOp { channels }, xs, value))
}

struct ChannelScaleOp;

impl BackwardOp for ChannelScaleOp {
    fn name(&self) -> &'static str {
        "channel_scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, s) = (ctx.inputs[0], ctx.inputs[1]);
        let (_, _, h, w) = dims4(x)?;
        let hw = h * w;
        let g = ctx.grad.data();
        let dx = if ctx.needs[0] {
            let mut d = vec![0.0; x.len()];
            for (plane, &sv) in s.data().iter().enumerate() {
                for i in plane * hw..(plane + 1) * hw {
                    d[i] = g[i] * sv;
                }
            }
            Some(Tensor::new(x.shape(), d)?)
        } else {
            None
        };
        let ds = if ctx.needs[1] {
            let d: Vec<f64> = (0..s.len())
                .map(|plane| (plane * hw..(plane + 1) * hw).map(|i| g[i] * x.data()[i]).sum())
                .collect();
            Some(Tensor::new(s.shape(), d)?)
        } else {
            None
        };
        Ok(vec![dx, ds])
    }
}

/// Multiplies every channel map `x[b, f]` by the scalar `s[b, f]`.
pub fn channel_scale(tape: &mut Tape, x: Var, s: Var) -> Result<Var> {
    let (b, f, h, w) = dims4(tape.value(x))?;
    if tape.shape(s) != [b, f] {
        return Err(Error::shape(format!(
            "channel_scale: gate {:?} for input {:?}",
            tape.shape(s),
            tape.shape(x)
        )));
    }
    let hw = h * w;
    let mut out = tape.value(x).data().to_vec();
    for (plane, &sv) in tape.value(s).data().iter().enumerate() {
        out[plane * hw..(plane + 1) * hw].iter_mut().for_each(|v| *v *= sv);
    }
    let value = Tensor::new(tape.shape(x), out)?;
    Ok(tape.push(ChannelScaleOp, &[x, s], value))
}

struct SharedHadamardOp;

impl BackwardOp for SharedHadamardOp {
    fn name(&self) -> &'static str {
        "shared_hadamard"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, wt) = (ctx.inputs[0], ctx.inputs[1]);
        let n = wt.len();
        let g = ctx.grad.data();
        let dx = if ctx.needs[0] {
            let d: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * wt.data()[i % n]).collect();
            Some(Tensor::new(x.shape(), d)?)
        } else {
            None
        };
        let dw = if ctx.needs[1] {
            let mut d = vec![0.0; n];
            for (gb, xb) in g.chunks(n).zip(x.data().chunks(n)) {
                for ((acc, gv), xv) in d.iter_mut().zip(gb).zip(xb) {
                    *acc += gv * xv;
                }
            }
            Some(Tensor::new(wt.shape(), d)?)
        } else {
            None
        };
        Ok(vec![dx, dw])
    }
}

/// Hadamard product of a batch `x: [B, F, H, W]` with one weight map
/// `w: [F, H, W]` shared across the batch.
pub fn shared_hadamard(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let (_, f, h, wd) = dims4(tape.value(x))?;
    if tape.shape(w) != [f, h, wd] {
        return Err(Error::shape(format!(
            "shared_hadamard: weights {:?} for input {:?}",
            tape.shape(w),
            tape.shape(x)
        )));
    }
    let wv = tape.value(w).data();
    let n = wv.len();
    let out: Vec<f64> = tape
        .value(x)
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * wv[i % n])
        .collect();
    let value = Tensor::new(tape.shape(x), out)?;
    Ok(tape.push(SharedHadamardOp, &[x, w], value))
}
