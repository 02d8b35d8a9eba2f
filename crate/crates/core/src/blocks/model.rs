use crate::error::{Error, Result};
use crate::layers::{maxpool2, relu, softmax_channels, up_conv, BatchNorm, Conv2d, Mode};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};

use super::convlstm::{BConvLstm, LSTM_KERNEL};
use super::dense::{ConvBlock, DenseBottleneck};
use super::se::SeBlock;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width `F₀` of the first encoder stage.
    pub base_filters: usize,
    /// Number of densely connected bottleneck blocks `d`.
    pub dense_blocks: usize,
    /// SE reduction ratio `r`.
    pub reduction_ratio: usize,
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_filters: 8,
            dense_blocks: 3,
            reduction_ratio: 2,
            input_channels: 1,
            height: 64,
            width: 64,
            classes: 2,
        }
    }
}

fn conv_params(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in * c_out + c_out
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.base_filters == 0 {
            return bad("base_filters must be positive".into());
        }
        if self.dense_blocks == 0 {
            return bad("dense_blocks must be at least 1".into());
        }
        if self.reduction_ratio == 0 || !self.base_filters.is_multiple_of(self.reduction_ratio) {
            return bad(format!(
                "reduction_ratio {} must divide base_filters {}",
                self.reduction_ratio, self.base_filters
            ));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return bad(format!("input_channels must be 1 or 3, got {}", self.input_channels));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return bad(format!(
                "input extents {}x{} must be positive multiples of 8",
                self.height, self.width
            ));
        }
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        Ok(())
    }

    /// Encoder stage widths `F₀, 2F₀, 4F₀` and the bottleneck width `8F₀`.
    pub fn widths(&self) -> [usize; 4] {
        let f = self.base_filters;
        [f, 2 * f, 4 * f, 8 * f]
    }

    /// Trainable parameter count, in closed form.
    ///
    /// With `c(k, a, b) = k²ab + b` (kernel plus bias), widths `F₀..` and
    /// `F_l = 8F₀`:
    ///
    /// * encoder: `c(3,C,F₀) + c(3,F₀,F₀) + c(3,F₀,2F₀) + c(3,2F₀,2F₀)
    ///   + c(3,2F₀,4F₀) + 2·c(3,4F₀,4F₀)`
    /// * bottleneck: `c(3,4F₀,F_l) + Σ_{i=2..d} c(3,(i−1)F_l,F_l) + d·c(3,F_l,F_l)`
    /// * each decoder stage of width `F` at `h×w`: up-conv `c(2,2F,F)`;
    ///   two SE blocks `2·(2F²/r + F/r + F)`; BN `2F`; BConvLSTM
    ///   `2·(8·9F² + 4F + 3Fhw) + 2F² + F`; three `c(3,F,F)`
    /// * head: `c(1,F₀,K)`
    pub fn param_count(&self) -> usize {
        let [f0, f1, f2, fl] = self.widths();
        let r = self.reduction_ratio;
        let encoder = conv_params(3, self.input_channels, f0)
            + conv_params(3, f0, f0)
            + conv_params(3, f0, f1)
            + conv_params(3, f1, f1)
            + conv_params(3, f1, f2)
            + 2 * conv_params(3, f2, f2);
        let bottleneck = conv_params(3, f2, fl)
            + (2..=self.dense_blocks)
                .map(|i| conv_params(3, (i - 1) * fl, fl))
                .sum::<usize>()
            + self.dense_blocks * conv_params(3, fl, fl);
        let k2 = LSTM_KERNEL * LSTM_KERNEL;
        let decoder = |f: usize, hw: usize| {
            conv_params(2, 2 * f, f)
                + 2 * (2 * f * f / r + f / r + f)
                + 2 * f
                + 2 * (8 * k2 * f * f + 4 * f + 3 * f * hw)
                + 2 * f * f
                + f
                + 3 * conv_params(3, f, f)
        };
        let (h, w) = (self.height, self.width);
        encoder
            + bottleneck
            + decoder(f2, h / 4 * w / 4)
            + decoder(f1, h / 2 * w / 2)
            + decoder(f0, h * w)
            + conv_params(1, f0, self.classes)
    }
}

/// Encoder activations kept for the decoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Pre-pool activations of the three stages, full resolution first.
    pub skips: [Var; 3],
    pub bottleneck: Var,
}

/// VGG-style contracting path: conv-conv (F₀) → pool → conv-conv (2F₀) →
/// pool → conv-conv-conv (4F₀) → pool → dense bottleneck (8F₀).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: [Vec<Conv2d>; 3],
    pub bottleneck: DenseBottleneck,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let [f0, f1, f2, fl] = cfg.widths();
        let mut stage = |name: &str, c_in: usize, c_out: usize, n: usize| -> Result<Vec<Conv2d>> {
            (0..n)
                .map(|i| {
                    let input = if i == 0 { c_in } else { c_out };
                    Conv2d::new(store, &format!("enc.{name}.conv{}", i + 1), input, c_out, 3, true, rng)
                })
                .collect()
        };
        let stages = [
            stage("stage1", cfg.input_channels, f0, 2)?,
            stage("stage2", f0, f1, 2)?,
            stage("stage3", f1, f2, 3)?,
        ];
        let bottleneck = DenseBottleneck::new(store, "enc.dense", f2, fl, cfg.dense_blocks, rng)?;
        Ok(Encoder { stages, bottleneck })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<EncoderOutput> {
        let (_, _, h, w) = crate::layers::dims4(tape.value(x))?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!("encoder input {h}x{w} is not divisible by 8")));
        }
        let mut skips = Vec::with_capacity(3);
        let mut y = x;
        for stage in &self.stages {
            for conv in stage {
                y = conv.forward(tape, store, y)?;
                y = relu(tape, y);
            }
            skips.push(y);
            y = maxpool2(tape, y)?;
        }
        let bottleneck = self.bottleneck.forward(tape, store, y)?;
        Ok(EncoderOutput {
            skips: [skips[0], skips[1], skips[2]],
            bottleneck,
        })
    }
}

/// One expanding-path stage at width `F`:
/// up-conv(2F→F) → SE → BN → BConvLSTM(skip, ·) → conv+ReLU → conv+ReLU →
/// SE → conv+ReLU.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: Conv2d,
    pub se_up: SeBlock,
    pub bn: BatchNorm,
    pub fusion: BConvLstm,
    pub convs: ConvBlock,
    pub se_out: SeBlock,
    pub out: Conv2d,
    pub channels: usize,
}

impl DecoderStage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(DecoderStage {
            up: Conv2d::new(store, &format!("{name}.up"), 2 * channels, channels, 2, true, rng)?,
            se_up: SeBlock::new(store, &format!("{name}.se1"), channels, ratio, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels)?,
            fusion: BConvLstm::new(store, &format!("{name}.bclstm"), channels, height, width, rng)?,
            convs: ConvBlock::new(store, name, channels, channels, rng)?,
            se_out: SeBlock::new(store, &format!("{name}.se2"), channels, ratio, rng)?,
            out: Conv2d::new(store, &format!("{name}.conv3"), channels, channels, 3, true, rng)?,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x_dec: Var, x_skip: Var, mode: Mode) -> Result<Var> {
        let (bd, cd, hd, wd) = crate::layers::dims4(tape.value(x_dec))?;
        let (bs, cs, hs, ws) = crate::layers::dims4(tape.value(x_skip))?;
        if bd != bs || cd != 2 * self.channels || cs != self.channels || hs != 2 * hd || ws != 2 * wd {
            return Err(Error::shape(format!(
                "decoder stage of width {}: decoder input {:?}, skip {:?}",
                self.channels,
                tape.shape(x_dec),
                tape.shape(x_skip)
            )));
        }
        let up = up_conv(tape, store, x_dec, &self.up)?;
        let gated = self.se_up.forward(tape, store, up)?;
        let normed = self.bn.forward(tape, store, gated, mode)?;
        let fused = self.fusion.forward(tape, store, x_skip, normed)?;
        let y = self.convs.forward(tape, store, fused)?;
        let y = self.se_out.forward(tape, store, y)?;
        let y = self.out.forward(tape, store, y)?;
        Ok(relu(tape, y))
    }
}

/// The full network. Owns its parameters.
#[derive(Clone, Debug)]
pub struct Mcgu {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// Deepest stage first: widths 4F₀, 2F₀, F₀.
    pub decoders: [DecoderStage; 3],
    pub head: Conv2d,
}

impl Mcgu {
    /// Builds a freshly initialised model; parameter creation order (and so
    /// checkpoint record order) is a function of the config alone.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let [f0, f1, f2, _] = config.widths();
        let (h, w, r) = (config.height, config.width, config.reduction_ratio);
        let decoders = [
            DecoderStage::new(&mut store, "dec3", f2, h / 4, w / 4, r, &mut rng)?,
            DecoderStage::new(&mut store, "dec2", f1, h / 2, w / 2, r, &mut rng)?,
            DecoderStage::new(&mut store, "dec1", f0, h, w, r, &mut rng)?,
        ];
        let head = Conv2d::new(&mut store, "head", f0, config.classes, 1, true, &mut rng)?;
        Ok(Mcgu {
            config,
            store,
            encoder,
            decoders,
            head,
        })
    }

    /// Per-pixel class logits `[B, K, H, W]`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let mut store = std::mem::take(&mut self.store);
        let out = self.forward_with(tape, &mut store, x, mode);
        self.store = store;
        out
    }

    /// [`Self::forward`] reading parameters from `store` instead of the
    /// model's own, which must have the same layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [cfg.input_channels, cfg.height, cfg.width] {
            return Err(Error::shape(format!(
                "model expects [B, {}, {}, {}], got {:?}",
                cfg.input_channels, cfg.height, cfg.width, shape
            )));
        }
        let enc = self.encoder.forward(tape, store, x)?;
        let mut y = enc.bottleneck;
        for (stage, &skip) in self.decoders.iter().zip(enc.skips.iter().rev()) {
            y = stage.forward(tape, store, y, skip, mode)?;
        }
        self.head.forward(tape, store, y)
    }

    /// Class probabilities for a batch, using frozen batch-norm statistics.
    pub fn predict_proba(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let logits = self.forward(&mut tape, x, Mode::Infer)?;
        softmax_channels(tape.value(logits))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }
}
