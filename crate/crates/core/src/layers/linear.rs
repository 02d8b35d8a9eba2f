use crate::error::{Error, Result};
use crate::numerics::{mm, BackwardCtx, BackwardOp, ParamId, ParamStore, Rng, Tape, Tensor, Var};

struct FcOp;

impl BackwardOp for FcOp {
    fn name(&self) -> &'static str {
        "fc"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let m = w.shape()[0];
        let g = ctx.grad.data();
        let dx = if ctx.needs[0] {
            let mut d = vec![0.0; b * n];
            mm(b, m, n, g, false, w.data(), false, &mut d, 0.0);
            Some(Tensor::new(&[b, n], d)?)
        } else {
            None
        };
        let dw = if ctx.needs[1] {
            let mut d = vec![0.0; m * n];
            mm(m, b, n, g, true, x.data(), false, &mut d, 0.0);
            Some(Tensor::new(&[m, n], d)?)
        } else {
            None
        };
        let db = if ctx.needs[2] {
            let mut d = vec![0.0; m];
            for row in g.chunks(m) {
                d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            Some(Tensor::new(&[m], d)?)
        } else {
            None
        };
        Ok(vec![dx, dw, db])
    }
}

/// Fully connected map `[B, n] → [B, m]`: `x Wᵀ + b` with `W: [m, n]`.
pub fn fc(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (b, n, m) = match (tape.shape(x), tape.shape(weight), tape.shape(bias)) {
        ([b, n], [m, n2], [m2]) if n == n2 && m == m2 => (*b, *n, *m),
        (xs, ws, bs) => {
            return Err(Error::shape(format!("fc: x {xs:?}, W {ws:?}, b {bs:?}")));
        }
    };
    let mut out = vec![0.0; b * m];
    mm(
        b,
        n,
        m,
        tape.value(x).data(),
        false,
        tape.value(weight).data(),
        true,
        &mut out,
        0.0,
    );
    for row in out.chunks_mut(m) {
        row.iter_mut().zip(tape.value(bias).data()).for_each(|(o, bv)| *o += bv);
    }
    let value = Tensor::new(&[b, m], out)?;
    Ok(tape.push(FcOp, &[x, weight, bias], value))
}

/// Fully connected layer with parameters in a store.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::glorot(&[n_out, n_in], n_in, n_out, rng)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n_out])?)?;
        Ok(Linear {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        fc(tape, x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.n_out * self.n_in + self.n_out
    }
}
