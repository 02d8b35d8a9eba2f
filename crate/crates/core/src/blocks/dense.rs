use crate::error::{Error, Result};
use crate::layers::{concat_channels, relu, Conv2d};
use crate::numerics::{ParamStore, Rng, Tape, Var};

/// Two 3×3 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ConvBlock {
            first: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, true, rng)?,
            second: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.first.forward(tape, store, x)?;
        let y = relu(tape, y);
        let y = self.second.forward(tape, store, y)?;
        Ok(relu(tape, y))
    }

    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.second.num_params()
    }
}

/// Densely connected bottleneck of `N` conv blocks, each emitting `F_l`
/// channels.
///
/// Block 1 reads the stage input; block `i ≥ 2` reads the concatenation
/// `[𝒳¹, …, 𝒳^{i-1}]` of all previous block outputs, so its input has
/// `(i - 1)·F_l` channels. The output is the last block's `𝒳^N`.
#[derive(Clone, Debug)]
pub struct DenseBottleneck {
    pub blocks: Vec<ConvBlock>,
    pub width: usize,
}

impl DenseBottleneck {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        width: usize,
        n_blocks: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Contract("dense bottleneck needs at least one block".into()));
        }
        let blocks = (1..=n_blocks)
            .map(|i| {
                let input = if i == 1 { c_in } else { (i - 1) * width };
                ConvBlock::new(store, &format!("{name}.block{i}"), input, width, rng)
            })
            .collect::<Result<_>>()?;
        Ok(DenseBottleneck { blocks, width })
    }

    /// Input channel count of block `i` (1-based).
    pub fn block_input_channels(&self, i: usize) -> usize {
        self.blocks[i - 1].first.c_in
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(ConvBlock::num_params).sum()
    }

    /// Returns every block output in order; the last one is the bottleneck
    /// result.
    pub fn forward_all(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let mut outputs: Vec<Var> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let input = match i {
                0 => x,
                1 => outputs[0],
                _ => concat_channels(tape, &outputs)?,
            };
            outputs.push(block.forward(tape, store, input)?);
        }
        Ok(outputs)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(*self.forward_all(tape, store, x)?.last().expect("at least one block"))
    }
}
