//! Composite units: squeeze-and-excitation, ConvLSTM and its bidirectional
//! fusion, the dense bottleneck, encoder and decoder stages, and the full
//! network.

mod convlstm;
mod dense;
mod model;
mod se;

pub use convlstm::{peephole, BConvLstm, ConvLstmCell, LstmState, LSTM_KERNEL};
pub use dense::{ConvBlock, DenseBottleneck};
pub use model::{DecoderStage, Encoder, EncoderOutput, Mcgu, ModelConfig};
pub use se::SeBlock;
