//! Minibatch optimization with early stopping, and checkpoints.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load, save, FORMAT_VERSION, MAGIC};

use std::fmt::Write as _;

use crate::blocks::Mcgu;
use crate::data::{stack, SampleSource};
use crate::error::{Error, Result};
use crate::layers::{softmax_ce_loss, Conv2d, Mode};
use crate::numerics::{Gradients, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Anything that maps `[B, C, H, W]` images to `[B, K, H, W]` logits with
/// parameters in one store.
pub trait Segmenter {
    fn logits(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var>;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Segmenter for Mcgu {
    fn logits(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        self.forward(tape, x, mode)
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Per-pixel logistic regression: a single 1×1 convolution.
#[derive(Clone, Debug)]
pub struct PixelClassifier {
    pub store: ParamStore,
    pub conv: Conv2d,
}

impl PixelClassifier {
    pub fn new(channels: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "pixel", channels, classes, 1, true, &mut Rng::new(seed))?;
        Ok(PixelClassifier { store, conv })
    }
}

impl Segmenter for PixelClassifier {
    fn logits(&mut self, tape: &mut Tape, x: Var, _mode: Mode) -> Result<Var> {
        self.conv.forward(tape, &self.store, x)
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer with per-parameter moment buffers, allocated on first use.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl OptimState {
    pub fn new(kind: OptimKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {lr} must be finite and non-negative"
            )));
        }
        Ok(OptimState {
            kind,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            steps: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.steps += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.steps as f64;
        let correct1 = 1.0 - self.beta1.powf(t);
        let correct2 = 1.0 - self.beta2.powf(t);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let g = match grads.param(id) {
                Some(g) => g,
                None => continue,
            };
            let p = store.get_mut(id);
            match self.kind {
                OptimKind::Sgd => {
                    for (w, dw) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * dw;
                    }
                }
                OptimKind::Adam => {
                    let (m, v) = self.moments[id.index()].get_or_insert_with(|| (g.zeros_like(), g.zeros_like()));
                    let (b1, b2) = (self.beta1, self.beta2);
                    for (((w, &dw), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * dw;
                        *vi = b2 * *vi + (1.0 - b2) * dw * dw;
                        let m_hat = *mi / correct1;
                        let v_hat = *vi / correct2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Patience rule on the validation loss. An epoch counts as an
/// improvement only when it beats the best loss so far by more than
/// `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    pub best_val_loss: f64,
    pub epochs_since_improve: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop::new(10, 1e-6)
    }
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStop {
            patience,
            min_delta,
            best_val_loss: f64::INFINITY,
            epochs_since_improve: 0,
        }
    }

    /// Records one epoch; returns whether it improved.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best_val_loss - self.min_delta {
            self.best_val_loss = val_loss;
            self.epochs_since_improve = 0;
            true
        } else {
            self.epochs_since_improve += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improve >= self.patience
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub optimizer: OptimKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            optimizer: OptimKind::Adam,
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Pixel accuracy of the train-mode predictions seen during the epoch.
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored at the end.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    /// `epoch,train_loss,val_loss,train_acc,val_acc` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
            );
        }
        out
    }
}

/// What an epoch hook asks the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Number of pixels whose arg-max class equals the target.
fn correct_pixels(logits: &Tensor, target: &Tensor) -> usize {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let (z, t) = (logits.data(), target.data());
    let mut correct = 0;
    for bi in 0..b {
        for i in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if z[(bi * k + c) * hw + i] > z[(bi * k + best) * hw + i] {
                    best = c;
                }
            }
            correct += (best as f64 == t[bi * hw + i]) as usize;
        }
    }
    correct
}

struct Pass {
    loss: f64,
    acc: f64,
}

fn check_finite(loss: f64, epoch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            epoch,
            reason: format!("{what} loss is {loss}"),
        })
    }
}

/// Mean loss and accuracy in inference mode, batch by batch in order.
pub fn evaluate<M, S>(model: &mut M, data: &S, batch_size: usize) -> Result<(f64, f64)>
where
    M: Segmenter + ?Sized,
    S: SampleSource + ?Sized,
{
    let p = eval_pass(model, data, batch_size)?;
    Ok((p.loss, p.acc))
}

fn eval_pass<M, S>(model: &mut M, data: &S, batch_size: usize) -> Result<Pass>
where
    M: Segmenter + ?Sized,
    S: SampleSource + ?Sized,
{
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut correct, mut pixels) = (0.0, 0usize, 0usize);
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = stack(data, chunk)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let logits = model.logits(&mut tape, xv, Mode::Infer)?;
        let loss = softmax_ce_loss(&mut tape, logits, &y)?;
        loss_sum += tape.value(loss).item()? * y.len() as f64;
        correct += correct_pixels(tape.value(logits), &y);
        pixels += y.len();
    }
    Ok(Pass {
        loss: loss_sum / pixels as f64,
        acc: correct as f64 / pixels as f64,
    })
}

/// Trains until `max_epochs` or early stop, then restores the parameters of
/// the best validation epoch.
pub fn train<M, S, V>(model: &mut M, train_set: &S, val_set: &V, opts: &TrainOptions) -> Result<History>
where
    M: Segmenter + ?Sized,
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
{
    train_with_hook(model, train_set, val_set, opts, |_, _| Ok(Control::Continue))
}

/// [`train`] with a callback after every epoch, which may end training
/// early. The callback sees the model with the current epoch's parameters.
pub fn train_with_hook<M, S, V, H>(
    model: &mut M,
    train_set: &S,
    val_set: &V,
    opts: &TrainOptions,
    mut hook: H,
) -> Result<History>
where
    M: Segmenter + ?Sized,
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
    H: FnMut(&EpochRecord, &mut M) -> Result<Control>,
{
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract(
            "training and validation sets need at least one sample".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut optim = OptimState::new(opts.optimizer, opts.lr)?;
    let mut stopper = EarlyStop::new(opts.patience, opts.min_delta);
    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_store = model.store().clone();

    for epoch in 1..=opts.max_epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut pixels) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let (x, y) = stack(train_set, chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = model.logits(&mut tape, xv, Mode::Train)?;
            let loss = softmax_ce_loss(&mut tape, logits, &y)?;
            let value = tape.value(loss).item()?;
            check_finite(value, epoch, "training")?;
            loss_sum += value * y.len() as f64;
            correct += correct_pixels(tape.value(logits), &y);
            pixels += y.len();
            let grads = tape.backward(loss)?;
            drop(tape);
            optim.step(model.store_mut(), &grads)?;
        }
        let val = eval_pass(model, val_set, opts.batch_size)?;
        check_finite(val.loss, epoch, "validation")?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / pixels as f64,
            val_loss: val.loss,
            train_acc: correct as f64 / pixels as f64,
            val_acc: val.acc,
        };
        history.epochs.push(record);
        if stopper.observe(val.loss) {
            history.best_epoch = epoch;
            best_store = model.store().clone();
        }
        if hook(&record, model)? == Control::Stop {
            break;
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    *model.store_mut() = best_store;
    Ok(history)
}
