use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::numerics::{BackwardCtx, BackwardOp, Tape, Tensor, Var};

use super::dims4;

struct MaxPoolOp {
    /// Flat input offset of the winner of every output cell.
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut dx = ctx.inputs[0].zeros_like();
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            d[src] += g;
        }
        Ok(vec![Some(dx)])
    }

    fn signature(&self, _inputs: &[&Tensor], h: &mut dyn Hasher) {
        for &a in &self.argmax {
            h.write_usize(a);
        }
    }
}

/// Non-overlapping 2×2 max pooling. Ties go to the first element in
/// row-major order within the window.
pub fn maxpool2(tape: &mut Tape, x: Var) -> Result<Var> {
    let (b, c, h, w) = dims4(tape.value(x))?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2 needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = tape.value(x).data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for off in [1, w, w + 1] {
                    let cand = base + 2 * oy * w + 2 * ox + off;
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::new(&[b, c, oh, ow], out)?;
    Ok(tape.push(MaxPoolOp { argmax }, &[x], value))
}

struct UpsampleOp;

impl BackwardOp for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let (_, _, h, w) = dims4(x)?;
        let g = ctx.grad.data();
        let mut dx = x.zeros_like();
        let ow = 2 * w;
        for (plane, d) in dx.data_mut().chunks_mut(h * w).enumerate() {
            let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let o = 2 * y * ow + 2 * xx;
                    d[y * w + xx] = gp[o] + gp[o + 1] + gp[o + ow] + gp[o + ow + 1];
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Nearest-neighbour ×2 upsampling: every input pixel becomes a 2×2 block.
pub fn upsample2(tape: &mut Tape, x: Var) -> Result<Var> {
    let (b, c, h, w) = dims4(tape.value(x))?;
    let xd = tape.value(x).data();
    let ow = 2 * w;
    let mut out = vec![0.0; b * c * 4 * h * w];
    for (plane, o) in out.chunks_mut(4 * h * w).enumerate() {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..ow {
                o[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    let value = Tensor::new(&[b, c, 2 * h, 2 * w], out)?;
    Ok(tape.push(UpsampleOp, &[x], value))
}

struct GapOp;

impl BackwardOp for GapOp {
    fn name(&self) -> &'static str {
        "gap"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let (_, _, h, w) = dims4(x)?;
        let inv = 1.0 / (h * w) as f64;
        let mut dx = x.zeros_like();
        for (d, &g) in dx.data_mut().chunks_mut(h * w).zip(ctx.grad.data()) {
            d.iter_mut().for_each(|v| *v = g * inv);
        }
        Ok(vec![Some(dx)])
    }
}

/// Global average pooling `[B, F, H, W] → [B, F]`:
/// `z_f = (1 / HW) Σ_i Σ_j x_f(i, j)`.
pub fn gap(tape: &mut Tape, x: Var) -> Result<Var> {
    let (b, f, h, w) = dims4(tape.value(x))?;
    let inv = 1.0 / (h * w) as f64;
    let out: Vec<f64> = tape
        .value(x)
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    let value = Tensor::new(&[b, f], out)?;
    Ok(tape.push(GapOp, &[x], value))
}
