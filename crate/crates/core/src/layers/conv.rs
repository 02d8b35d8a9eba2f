use crate::error::{Error, Result};
use crate::numerics::{mm, BackwardCtx, BackwardOp, ParamId, ParamStore, Rng, Tape, Tensor, Var};

use super::{dims4, pool::upsample2};

/// Zero padding placed before and after each spatial axis so that a
/// stride-1 `k×k` cross-correlation preserves the extent. Even kernels pad
/// the bottom/right side only.
pub fn same_padding(k: usize) -> (usize, usize) {
    let before = (k - 1) / 2;
    (before, k - 1 - before)
}

/// Unfolds one `[C, H, W]` plane into `[C·k·k, H·W]` columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let (pb, _) = same_padding(k);
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                // valid output columns: 0 <= x + kx - pb < w
                let x_lo = pb.saturating_sub(kx);
                let x_hi = (w + pb).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pb || sy - pb >= h || x_lo >= x_hi {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[(sy - pb) * w..(sy - pb + 1) * w];
                    out[..x_lo].iter_mut().for_each(|v| *v = 0.0);
                    let sx0 = x_lo + kx - pb;
                    out[x_lo..x_hi].copy_from_slice(&src[sx0..sx0 + (x_hi - x_lo)]);
                    out[x_hi..].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a plane.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let (pb, _) = same_padding(k);
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = pb.saturating_sub(kx);
                let x_hi = (w + pb).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pb || sy - pb >= h {
                        continue;
                    }
                    let dst = &mut plane[(sy - pb) * w..(sy - pb + 1) * w];
                    let sx0 = x_lo + kx - pb;
                    for (d, s) in dst[sx0..sx0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    k: usize,
}

impl BackwardOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let kernel = ctx.inputs[1];
        let (b, c_in, h, w) = dims4(x)?;
        let c_out = kernel.shape()[0];
        let k = self.k;
        let hw = h * w;
        let ckk = c_in * k * k;
        let g = ctx.grad.data();

        let mut dx = ctx.needs[0].then(|| vec![0.0; x.len()]);
        let mut dk = ctx.needs[1].then(|| vec![0.0; kernel.len()]);
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
        let mut dcols = if k == 1 || dx.is_none() {
            Vec::new()
        } else {
            vec![0.0; ckk * hw]
        };

        for bi in 0..b {
            let xb = &x.data()[bi * c_in * hw..(bi + 1) * c_in * hw];
            let gb = &g[bi * c_out * hw..(bi + 1) * c_out * hw];
            if let Some(dk) = dk.as_mut() {
                let src = if k == 1 {
                    xb
                } else {
                    im2col(xb, c_in, h, w, k, &mut cols);
                    &cols
                };
                // dK += G_b · colsᵀ
                mm(c_out, hw, ckk, gb, false, src, true, dk, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[bi * c_in * hw..(bi + 1) * c_in * hw];
                if k == 1 {
                    mm(ckk, c_out, hw, kernel.data(), true, gb, false, dxb, 0.0);
                } else {
                    mm(ckk, c_out, hw, kernel.data(), true, gb, false, &mut dcols, 0.0);
                    col2im(&dcols, c_in, h, w, k, dxb);
                }
            }
        }

        let mut out = vec![
            dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
            dk.map(|d| Tensor::new(kernel.shape(), d)).transpose()?,
        ];
        if ctx.inputs.len() == 3 {
            let db = if ctx.needs[2] {
                let mut db = vec![0.0; c_out];
                for bi in 0..b {
                    for (co, acc) in db.iter_mut().enumerate() {
                        *acc += g[(bi * c_out + co) * hw..(bi * c_out + co + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                }
                Some(Tensor::new(&[c_out], db)?)
            } else {
                None
            };
            out.push(db);
        }
        Ok(out)
    }
}

/// Stride-1 cross-correlation with "same" zero padding.
///
/// `x: [B, C_in, H, W]`, `kernel: [C_out, C_in, k, k]`, optional
/// `bias: [C_out]`; returns `[B, C_out, H, W]`.
pub fn conv2d(tape: &mut Tape, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let (b, c_in, h, w) = dims4(tape.value(x))?;
    let (c_out, k) = match *tape.shape(kernel) {
        [co, ci, k1, k2] if ci == c_in && k1 == k2 && (1..=3).contains(&k1) => (co, k1),
        ref s => {
            return Err(Error::shape(format!(
                "conv2d: kernel {s:?} does not fit input with {c_in} channels"
            )))
        }
    };
    if let Some(bv) = bias {
        if tape.shape(bv) != [c_out] {
            return Err(Error::shape(format!(
                "conv2d: bias {:?} for {c_out} output channels",
                tape.shape(bv)
            )));
        }
    }
    let hw = h * w;
    let ckk = c_in * k * k;
    let mut out = vec![0.0; b * c_out * hw];
    {
        let xd = tape.value(x).data();
        let kd = tape.value(kernel).data();
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
        for bi in 0..b {
            let xb = &xd[bi * c_in * hw..(bi + 1) * c_in * hw];
            let ob = &mut out[bi * c_out * hw..(bi + 1) * c_out * hw];
            let src = if k == 1 {
                xb
            } else {
                im2col(xb, c_in, h, w, k, &mut cols);
                &cols
            };
            mm(c_out, ckk, hw, kd, false, src, false, ob, 0.0);
            if let Some(bv) = bias {
                for (co, &bval) in tape.value(bv).data().iter().enumerate() {
                    ob[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bval);
                }
            }
        }
    }
    let value = Tensor::new(&[b, c_out, h, w], out)?;
    let inputs: Vec<Var> = match bias {
        Some(bv) => vec![x, kernel, bv],
        None => vec![x, kernel],
    };
    Ok(tape.push(Conv2dOp { k }, &inputs, value))
}

/// A convolution layer whose kernel and optional bias live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    /// Glorot-uniform kernel (fan-in `C_in·k·k`, fan-out `C_out·k·k`), zero
    /// bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(1..=3).contains(&k) {
            return Err(Error::Contract(format!("kernel size {k} not in 1..=3")));
        }
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::glorot(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng)?,
        )?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])?)?)
        } else {
            None
        };
        Ok(Conv2d {
            kernel,
            bias,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let kernel = tape.param(store, self.kernel);
        let bias = self.bias.map(|b| tape.param(store, b));
        conv2d(tape, x, kernel, bias)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + if self.bias.is_some() { self.c_out } else { 0 }
    }
}

/// Nearest-neighbour ×2 upsampling followed by a 2×2 "same" convolution
/// (the up-convolution of the decoder).
pub fn up_conv(tape: &mut Tape, store: &ParamStore, x: Var, conv: &Conv2d) -> Result<Var> {
    if conv.k != 2 {
        return Err(Error::Contract(format!("up_conv expects a 2x2 kernel, got {}", conv.k)));
    }
    let up = upsample2(tape, x)?;
    conv.forward(tape, store, up)
}
