use crate::error::{Error, Result};
use crate::numerics::{BackwardCtx, BackwardOp, ParamId, ParamStore, Tape, Tensor, Var};

use super::{dims4, Mode};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel sums over `(B, H, W)` of `f(channel, flat index)`.
fn channel_sums(shape: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize) -> f64) -> Vec<f64> {
    let (b, c, h, w) = shape;
    let hw = h * w;
    let mut sums = vec![0.0; c];
    for bi in 0..b {
        for (ci, s) in sums.iter_mut().enumerate() {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                *s += f(ci, i);
            }
        }
    }
    sums
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Train mode differentiates through the batch statistics.
    batch_stats: bool,
}

impl BackwardOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let dims = dims4(x)?;
        let (b, c, h, w) = dims;
        let hw = h * w;
        let g = ctx.grad.data();
        let n = (b * hw) as f64;
        let sum_g = channel_sums(dims, |_, i| g[i]);
        let sum_gx = channel_sums(dims, |_, i| g[i] * self.xhat[i]);

        let dx = if ctx.needs[0] {
            let mut d = vec![0.0; x.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let scale = gamma[ci] * self.inv_std[ci];
                    for i in base..base + hw {
                        d[i] = if self.batch_stats {
                            scale * (g[i] - sum_g[ci] / n - self.xhat[i] * sum_gx[ci] / n)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            Some(Tensor::new(x.shape(), d)?)
        } else {
            None
        };
        let dgamma = ctx.needs[1].then(|| Tensor::new(&[c], sum_gx)).transpose()?;
        let dbeta = ctx.needs[2].then(|| Tensor::new(&[c], sum_g)).transpose()?;
        Ok(vec![dx, dgamma, dbeta])
    }
}

/// Batch normalisation over `[B, C, H, W]` with per-channel affine
/// parameters and running statistics.
///
/// Running statistics are updated as `new = (1 - m)·old + m·batch` during
/// training; the running variance tracks the unbiased batch variance.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    /// `γ = 1`, `β = 0`, running mean 0 and running variance 1.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])?)?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])?)?,
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let dims = dims4(tape.value(x))?;
        let (b, c, h, w) = dims;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batchnorm over {} channels got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let count = b * hw;
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::Contract(format!(
                        "batchnorm train mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let xd = tape.value(x).data();
                let n = count as f64;
                let mean: Vec<f64> = channel_sums(dims, |_, i| xd[i]).into_iter().map(|s| s / n).collect();
                let var: Vec<f64> = channel_sums(dims, |ci, i| (xd[i] - mean[ci]).powi(2))
                    .into_iter()
                    .map(|s| s / n)
                    .collect();
                let m = self.momentum;
                let unbias = n / (n - 1.0);
                for (r, &bm) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * bm;
                }
                for (r, &bv) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * bv * unbias;
                }
                (mean, var)
            }
            Mode::Infer => (
                store.get(self.running_mean).data().to_vec(),
                store.get(self.running_var).data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let xd = tape.value(x).data();
        let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                    out[i] = gd[ci] * xhat[i] + bd[ci];
                }
            }
        }
        let value = Tensor::new(tape.shape(x), out)?;
        let op = BatchNormOp {
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok(tape.push(op, &[x, gamma, beta], value))
    }
}
