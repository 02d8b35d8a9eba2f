//! Convolutional LSTM with peephole connections, and the bidirectional
//! fusion of an encoder skip with the decoder's up-sampled features.

use crate::error::{Error, Result};
use crate::layers::{conv2d, dims4, shared_hadamard, sigmoid, tanh_act, Conv2d};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Kernel size of every input-to-state and state-to-state convolution.
pub const LSTM_KERNEL: usize = 3;

/// Recurrent state. `None` stands for the all-zero initial state, which lets
/// the first step skip the state-to-state terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct LstmState {
    pub hidden: Option<Var>,
    pub cell: Option<Var>,
}

/// One ConvLSTM cell on `F`-channel maps of a fixed `H×W` extent.
///
/// Gates use the order input, forget, candidate, output. The biases
/// `b_i, b_f, b_c, b_o` are carried by the input-to-state convolutions; the
/// state-to-state convolutions are bias-free.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub input_kernels: [Conv2d; 4],
    pub hidden_kernels: [Conv2d; 4],
    /// `W_ci`, `W_cf`, `W_co`, each `[F, H, W]`.
    pub peepholes: [ParamId; 3],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Peephole term `W_c• ∘ 𝒞`. The only place the peephole operator is
/// chosen; a convolutional peephole would replace this body.
pub fn peephole(tape: &mut Tape, store: &ParamStore, weight: ParamId, cell: Var) -> Result<Var> {
    let w = tape.param(store, weight);
    shared_hadamard(tape, cell, w)
}

fn add_opt(tape: &mut Tape, acc: Var, term: Option<Var>) -> Result<Var> {
    match term {
        Some(t) => tape.add(acc, t),
        None => Ok(acc),
    }
}

impl ConvLstmCell {
    /// Glorot kernels, zero biases and zero peephole weights.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut conv = |kind: &str, gate: &str, bias: bool| {
            Conv2d::new(
                store,
                &format!("{name}.w_{kind}{gate}"),
                channels,
                channels,
                LSTM_KERNEL,
                bias,
                rng,
            )
        };
        let input_kernels = [
            conv("x", "i", true)?,
            conv("x", "f", true)?,
            conv("x", "c", true)?,
            conv("x", "o", true)?,
        ];
        let hidden_kernels = [
            conv("h", "i", false)?,
            conv("h", "f", false)?,
            conv("h", "c", false)?,
            conv("h", "o", false)?,
        ];
        let mut peep = |gate: &str| store.add(format!("{name}.w_c{gate}"), Tensor::zeros(&[channels, height, width])?);
        let peepholes = [peep("i")?, peep("f")?, peep("o")?];
        Ok(ConvLstmCell {
            input_kernels,
            hidden_kernels,
            peepholes,
            channels,
            height,
            width,
        })
    }

    pub fn num_params(&self) -> usize {
        let f = self.channels;
        self.input_kernels.iter().map(Conv2d::num_params).sum::<usize>()
            + self.hidden_kernels.iter().map(Conv2d::num_params).sum::<usize>()
            + 3 * f * self.height * self.width
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let (_, c, h, w) = dims4(tape.value(x))?;
        if (c, h, w) != (self.channels, self.height, self.width) {
            return Err(Error::shape(format!(
                "ConvLSTM cell expects [B, {}, {}, {}], got {:?}",
                self.channels,
                self.height,
                self.width,
                tape.shape(x)
            )));
        }
        Ok(())
    }

    /// `W_x• * x + b_• [+ W_h• * h]`.
    fn gate_input(&self, tape: &mut Tape, store: &ParamStore, gate: usize, x: Var, hidden: Option<Var>) -> Result<Var> {
        let acc = self.input_kernels[gate].forward(tape, store, x)?;
        let rec = match hidden {
            Some(h) => Some(self.hidden_kernels[gate].forward(tape, store, h)?),
            None => None,
        };
        add_opt(tape, acc, rec)
    }

    /// One time step:
    ///
    /// ```text
    /// i = σ(W_xi * x + W_hi * h + W_ci ∘ c + b_i)
    /// f = σ(W_xf * x + W_hf * h + W_cf ∘ c + b_f)
    /// c' = f ∘ c + i ∘ tanh(W_xc * x + W_hc * h + b_c)
    /// o = σ(W_xo * x + W_ho * h + W_co ∘ c' + b_o)
    /// h' = o ∘ tanh(c')
    /// ```
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: LstmState) -> Result<LstmState> {
        self.check_input(tape, x)?;
        for s in [state.hidden, state.cell].into_iter().flatten() {
            if tape.shape(s) != tape.shape(x) {
                return Err(Error::shape(format!(
                    "ConvLSTM state {:?} vs input {:?}",
                    tape.shape(s),
                    tape.shape(x)
                )));
            }
        }
        let [w_ci, w_cf, w_co] = self.peepholes;

        let mut pre_i = self.gate_input(tape, store, 0, x, state.hidden)?;
        let mut pre_f = self.gate_input(tape, store, 1, x, state.hidden)?;
        if let Some(c) = state.cell {
            let pi = peephole(tape, store, w_ci, c)?;
            pre_i = tape.add(pre_i, pi)?;
            let pf = peephole(tape, store, w_cf, c)?;
            pre_f = tape.add(pre_f, pf)?;
        }
        let input_gate = sigmoid(tape, pre_i);
        let forget_gate = sigmoid(tape, pre_f);

        let pre_c = self.gate_input(tape, store, 2, x, state.hidden)?;
        let candidate = tanh_act(tape, pre_c);
        let written = tape.mul(input_gate, candidate)?;
        let cell = match state.cell {
            Some(c) => {
                let kept = tape.mul(forget_gate, c)?;
                tape.add(kept, written)?
            }
            None => written,
        };

        let pre_o = self.gate_input(tape, store, 3, x, state.hidden)?;
        let po = peephole(tape, store, w_co, cell)?;
        let pre_o = tape.add(pre_o, po)?;
        let output_gate = sigmoid(tape, pre_o);
        let squashed = tanh_act(tape, cell);
        let hidden = tape.mul(output_gate, squashed)?;
        Ok(LstmState {
            hidden: Some(hidden),
            cell: Some(cell),
        })
    }

    /// Runs the cell over a sequence from the zero state and returns the
    /// final state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var]) -> Result<LstmState> {
        xs.iter()
            .try_fold(LstmState::default(), |state, &x| self.step(tape, store, x, state))
    }
}

/// Bidirectional ConvLSTM over the length-two sequence
/// `(encoder skip, decoder features)`:
///
/// `Y = tanh(W_y→ * →ℋ + W_y← * ←ℋ + b)` with 1×1 output kernels, where →ℋ
/// is the forward cell's final hidden state over `(x_enc, x_dec)` and ←ℋ is
/// the backward cell's final hidden state over `(x_dec, x_enc)`.
#[derive(Clone, Debug)]
pub struct BConvLstm {
    pub forward_cell: ConvLstmCell,
    pub backward_cell: ConvLstmCell,
    pub out_forward: Conv2d,
    pub out_backward: Conv2d,
    pub bias: ParamId,
    pub channels: usize,
}

impl BConvLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let forward_cell = ConvLstmCell::new(store, &format!("{name}.fwd"), channels, height, width, rng)?;
        let backward_cell = ConvLstmCell::new(store, &format!("{name}.bwd"), channels, height, width, rng)?;
        let out_forward = Conv2d::new(store, &format!("{name}.w_y_fwd"), channels, channels, 1, false, rng)?;
        let out_backward = Conv2d::new(store, &format!("{name}.w_y_bwd"), channels, channels, 1, false, rng)?;
        let bias = store.add(format!("{name}.b_y"), Tensor::zeros(&[channels])?)?;
        Ok(BConvLstm {
            forward_cell,
            backward_cell,
            out_forward,
            out_backward,
            bias,
            channels,
        })
    }

    pub fn num_params(&self) -> usize {
        self.forward_cell.num_params()
            + self.backward_cell.num_params()
            + self.out_forward.num_params()
            + self.out_backward.num_params()
            + self.channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_enc: Var, x_dec: Var) -> Result<Var> {
        if tape.shape(x_enc) != tape.shape(x_dec) {
            return Err(Error::shape(format!(
                "BConvLSTM inputs differ: {:?} vs {:?}",
                tape.shape(x_enc),
                tape.shape(x_dec)
            )));
        }
        let fwd = self.forward_cell.run(tape, store, &[x_enc, x_dec])?;
        let bwd = self.backward_cell.run(tape, store, &[x_dec, x_enc])?;
        let (hf, hb) = match (fwd.hidden, bwd.hidden) {
            (Some(a), Some(b)) => (a, b),
            _ => unreachable!("a two-step run always yields a hidden state"),
        };
        let kf = tape.param(store, self.out_forward.kernel);
        let bias = tape.param(store, self.bias);
        let yf = conv2d(tape, hf, kf, Some(bias))?;
        let yb = self.out_backward.forward(tape, store, hb)?;
        let sum = tape.add(yf, yb)?;
        Ok(tanh_act(tape, sum))
    }
}
