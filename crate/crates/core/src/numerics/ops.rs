//! Differentiable elementwise arithmetic, matrix product and reductions.

use super::gemm;
use super::tape::{BackwardCtx, BackwardOp, Tape, Var};
use super::tensor::{as_matrix, Tensor};
use crate::error::{Error, Result};

struct AddOp;
struct SubOp;
struct MulOp;
struct ScaleOp(f64);
struct ShiftOp;
struct MatMulOp;
struct SumOp;
struct ReshapeOp;

impl BackwardOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
    }
}

impl BackwardOp for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))])
    }
}

impl BackwardOp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let da = ctx.needs[0].then(|| ctx.grad.mul(b)).transpose()?;
        let db = ctx.needs[1].then(|| ctx.grad.mul(a)).transpose()?;
        Ok(vec![da, db])
    }
}

impl BackwardOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.scale(self.0))])
    }
}

impl BackwardOp for ShiftOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.clone())])
    }
}

impl BackwardOp for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k) = as_matrix(a)?;
        let (_, n) = as_matrix(b)?;
        let g = ctx.grad.data();
        let da = if ctx.needs[0] {
            // dA = dC · Bᵀ
            let mut out = vec![0.0; m * k];
            gemm::mm(m, n, k, g, false, b.data(), true, &mut out, 0.0);
            Some(Tensor::new(&[m, k], out)?)
        } else {
            None
        };
        let db = if ctx.needs[1] {
            // dB = Aᵀ · dC
            let mut out = vec![0.0; k * n];
            gemm::mm(k, m, n, a.data(), true, g, false, &mut out, 0.0);
            Some(Tensor::new(&[k, n], out)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

impl BackwardOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.item()?;
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g)?)])
    }
}

impl BackwardOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape())?)])
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(AddOp, &[a, b], v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(SubOp, &[a, b], v))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(MulOp, &[a, b], v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(ScaleOp(c), &[a], v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(ShiftOp, &[a], v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(MatMulOp, &[a, b], v))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(SumOp, &[a], v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(ReshapeOp, &[a], v))
    }

    /// `sum(a ∘ w)` for a constant weight tensor; the usual way to reduce a
    /// non-scalar output to a loss in gradient checks.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(a) != weights.shape() {
            return Err(Error::shape(format!(
                "weighted_sum: {:?} vs weights {:?}",
                self.shape(a),
                weights.shape()
            )));
        }
        let w = self.constant(weights.clone());
        let prod = self.mul(a, w)?;
        Ok(self.sum(prod))
    }
}
