use crate::error::{Error, Result};
use crate::layers::{channel_scale, gap, relu, sigmoid, Linear};
use crate::numerics::{ParamStore, Rng, Tape, Var};

/// Squeeze-and-excitation channel gate.
///
/// Squeeze: `z = GAP(x)`. Excitation: `s = σ(W₂ δ(W₁ z + b₁) + b₂)` with
/// `W₁: [F/r, F]`, `W₂: [F, F/r]`. Scale: channel `f` of the output is
/// `s_f · x_f`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
    pub ratio: usize,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Contract(format!(
                "reduction ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(SeBlock {
            reduce: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng)?,
            expand: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng)?,
            channels,
            ratio,
        })
    }

    pub fn num_params(&self) -> usize {
        self.reduce.num_params() + self.expand.num_params()
    }

    /// The gate vector `s: [B, F]`.
    pub fn excitation(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape(format!(
                "SE block over {} channels got input {:?}",
                self.channels,
                tape.shape(x)
            )));
        }
        let z = gap(tape, x)?;
        let hidden = self.reduce.forward(tape, store, z)?;
        let hidden = relu(tape, hidden);
        let logits = self.expand.forward(tape, store, hidden)?;
        Ok(sigmoid(tape, logits))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.excitation(tape, store, x)?;
        channel_scale(tape, x, s)
    }
}
