//! Central-difference checks of every differentiable op and block, run by
//! the `gradcheck` subcommand.
//!
//! Each check draws small random inputs and parameters from its seed,
//! reduces the output to a scalar with fixed random weights, and compares
//! gradients for every input and for a sample of entries of every
//! parameter tensor.

use crate::blocks::{BConvLstm, ConvLstmCell, DecoderStage, DenseBottleneck, LstmState, Mcgu, ModelConfig, SeBlock};
use crate::error::Result;
use crate::layers::{
    channel_scale, concat_channels, conv2d, fc, gap, maxpool2, relu, shared_hadamard, sigmoid, softmax_ce_loss,
    tanh_act, upsample2, BatchNorm, Mode,
};
use crate::numerics::{gradcheck, gradcheck_param, GradcheckReport, ParamStore, Rng, Tape, Tensor, Var};

/// Parameter entries sampled per tensor.
const PER_TENSOR: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
}

impl CheckResult {
    /// `name max_rel_err PASS|FAIL`.
    pub fn line(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        format!("{} {:.3e} {}", self.name, self.max_rel_error, verdict)
    }

    fn merge(name: &'static str, tol: f64, reports: &[GradcheckReport]) -> CheckResult {
        let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let checked = reports.iter().map(|r| r.checked).sum();
        CheckResult {
            name,
            max_rel_error,
            checked,
            skipped: reports.iter().map(|r| r.skipped).sum(),
            pass: checked > 0 && max_rel_error < tol,
        }
    }
}

fn rand(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Overwrites every trainable entry with uniform(−bound, bound) draws, so
/// zero-initialised weights (peepholes, biases) are exercised too.
pub fn randomize(store: &mut ParamStore, bound: f64, rng: &mut Rng) -> Result<()> {
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(&shape, bound, rng)?)?;
    }
    Ok(())
}

/// One report per input: input `i` is checked while the others stay fixed.
fn input_checks<F>(inputs: &[Tensor], tol: f64, mut f: F) -> Result<Vec<GradcheckReport>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    (0..inputs.len())
        .map(|i| {
            gradcheck(
                |tape, xi| {
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| if j == i { xi } else { tape.variable(t.clone()) })
                        .collect();
                    f(tape, &vars)
                },
                &inputs[i],
                tol,
            )
        })
        .collect()
}

/// One report per trainable tensor, on up to [`PER_TENSOR`] random entries.
fn param_checks<F>(store: &mut ParamStore, rng: &mut Rng, tol: f64, mut f: F) -> Result<Vec<GradcheckReport>>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let ids: Vec<_> = store.trainable_ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let indices: Vec<usize> = if n <= PER_TENSOR {
            (0..n).collect()
        } else {
            (0..PER_TENSOR).map(|_| rng.below(n)).collect()
        };
        reports.push(gradcheck_param(store, id, Some(&indices), tol, &mut f)?);
    }
    Ok(reports)
}

/// Weighted sum of `y` with fixed weights, to give every output entry a
/// distinct influence on the loss.
struct Projector {
    weights: Tensor,
}

impl Projector {
    fn new(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        Ok(Projector {
            weights: rand(shape, rng)?,
        })
    }

    fn apply(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        tape.weighted_sum(y, &self.weights)
    }
}

fn op_check<F>(
    name: &'static str,
    seed: u64,
    tol: f64,
    shapes: &[&[usize]],
    out: &[usize],
    mut f: F,
) -> Result<CheckResult>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let inputs = shapes.iter().map(|s| rand(s, &mut rng)).collect::<Result<Vec<_>>>()?;
    let proj = Projector::new(out, &mut rng)?;
    let reports = input_checks(&inputs, tol, |tape, v| {
        let y = f(tape, v)?;
        proj.apply(tape, y)
    })?;
    Ok(CheckResult::merge(name, tol, &reports))
}

/// All primitive ops, each over its inputs.
pub fn layer_checks(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let s = seed;
    let mut out = vec![
        op_check("add", s, tol, &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.add(v[0], v[1]))?,
        op_check("sub", s, tol, &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.sub(v[0], v[1]))?,
        op_check("mul", s, tol, &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.mul(v[0], v[1]))?,
        op_check("scale", s, tol, &[&[4]], &[4], |t, v| Ok(t.scale(v[0], -1.7)))?,
        op_check("matmul", s, tol, &[&[3, 4], &[4, 2]], &[3, 2], |t, v| {
            t.matmul(v[0], v[1])
        })?,
        op_check("sum", s, tol, &[&[5]], &[1], |t, v| Ok(t.sum(v[0])))?,
    ];
    for k in 1..=3 {
        let name = ["conv2d_k1", "conv2d_k2", "conv2d_k3"][k - 1];
        out.push(op_check(
            name,
            s,
            tol,
            &[&[2, 2, 5, 4], &[3, 2, k, k], &[3]],
            &[2, 3, 5, 4],
            |t, v| conv2d(t, v[0], v[1], Some(v[2])),
        )?);
    }
    out.extend([
        op_check(
            "up_conv",
            s,
            tol,
            &[&[1, 4, 3, 3], &[2, 4, 2, 2], &[2]],
            &[1, 2, 6, 6],
            |t, v| {
                let up = upsample2(t, v[0])?;
                conv2d(t, up, v[1], Some(v[2]))
            },
        )?,
        op_check("maxpool2", s, tol, &[&[2, 2, 4, 6]], &[2, 2, 2, 3], |t, v| {
            maxpool2(t, v[0])
        })?,
        op_check("upsample2", s, tol, &[&[1, 2, 3, 2]], &[1, 2, 6, 4], |t, v| {
            upsample2(t, v[0])
        })?,
        op_check("gap", s, tol, &[&[2, 3, 4, 4]], &[2, 3], |t, v| gap(t, v[0]))?,
        op_check("fc", s, tol, &[&[2, 5], &[3, 5], &[3]], &[2, 3], |t, v| {
            fc(t, v[0], v[1], v[2])
        })?,
        op_check("relu", s, tol, &[&[3, 4]], &[3, 4], |t, v| Ok(relu(t, v[0])))?,
        op_check("sigmoid", s, tol, &[&[3, 4]], &[3, 4], |t, v| Ok(sigmoid(t, v[0])))?,
        op_check("tanh", s, tol, &[&[3, 4]], &[3, 4], |t, v| Ok(tanh_act(t, v[0])))?,
        op_check(
            "concat_channels",
            s,
            tol,
            &[&[2, 1, 3, 3], &[2, 2, 3, 3]],
            &[2, 3, 3, 3],
            concat_channels,
        )?,
        op_check(
            "channel_scale",
            s,
            tol,
            &[&[2, 3, 2, 2], &[2, 3]],
            &[2, 3, 2, 2],
            |t, v| channel_scale(t, v[0], v[1]),
        )?,
        op_check(
            "shared_hadamard",
            s,
            tol,
            &[&[2, 3, 2, 2], &[3, 2, 2]],
            &[2, 3, 2, 2],
            |t, v| shared_hadamard(t, v[0], v[1]),
        )?,
    ]);
    out.push(softmax_ce_check(seed, tol)?);
    out.push(batchnorm_check("batchnorm_train", Mode::Train, seed, tol)?);
    out.push(batchnorm_check("batchnorm_infer", Mode::Infer, seed, tol)?);
    Ok(out)
}

fn softmax_ce_check(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let logits = rand(&[2, 3, 2, 2], &mut rng)?;
    let target = Tensor::from_fn(&[2, 2, 2], |_| rng.below(3) as f64)?;
    let reports = input_checks(&[logits], tol, |t, v| softmax_ce_loss(t, v[0], &target))?;
    Ok(CheckResult::merge("softmax_ce_loss", tol, &reports))
}

fn batchnorm_check(name: &'static str, mode: Mode, seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3)?;
    randomize(&mut store, 1.0, &mut rng)?;
    store.set(bn.running_mean, rand(&[3], &mut rng)?)?;
    store.set(bn.running_var, rand(&[3], &mut rng)?.map(|v| v.abs() + 0.5))?;
    let x = rand(&[2, 3, 3, 2], &mut rng)?;
    let proj = Projector::new(&[2, 3, 3, 2], &mut rng)?;
    // Running statistics do not feed train-mode outputs, and infer mode
    // never updates them, so repeated evaluations see the same function.
    let mut reports = {
        let store = &mut store;
        input_checks(std::slice::from_ref(&x), tol, |t, v| {
            let y = bn.forward(t, store, v[0], mode)?;
            proj.apply(t, y)
        })?
    };
    reports.extend(param_checks(&mut store, &mut rng, tol, |t, st| {
        let xv = t.constant(x.clone());
        let y = bn.forward(t, st, xv, mode)?;
        proj.apply(t, y)
    })?);
    Ok(CheckResult::merge(name, tol, &reports))
}

/// SE block on `[2, 4, 3, 3]`, ratio 2.
pub fn se_check(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 4, 2, &mut rng)?;
    randomize(&mut store, 1.0, &mut rng)?;
    let x = rand(&[2, 4, 3, 3], &mut rng)?;
    let proj = Projector::new(&[2, 4, 3, 3], &mut rng)?;
    let mut reports = input_checks(std::slice::from_ref(&x), tol, |t, v| {
        let y = se.forward(t, &store, v[0])?;
        proj.apply(t, y)
    })?;
    reports.extend(param_checks(&mut store, &mut rng, tol, |t, st| {
        let xv = t.constant(x.clone());
        let y = se.forward(t, st, xv)?;
        proj.apply(t, y)
    })?);
    Ok(CheckResult::merge("se_block", tol, &reports))
}

/// One ConvLSTM step from a non-zero state, over `x`, `ℋ` and `𝒞`.
pub fn convlstm_step_check(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let cell = ConvLstmCell::new(&mut store, "lstm", 2, 3, 4, &mut rng)?;
    randomize(&mut store, 0.5, &mut rng)?;
    let shape = [2, 2, 3, 4];
    let inputs = [
        rand(&shape, &mut rng)?,
        rand(&shape, &mut rng)?,
        rand(&shape, &mut rng)?,
    ];
    let ph = Projector::new(&shape, &mut rng)?;
    let pc = Projector::new(&shape, &mut rng)?;
    let step = |t: &mut Tape, st: &ParamStore, v: &[Var]| -> Result<Var> {
        let state = LstmState {
            hidden: Some(v[1]),
            cell: Some(v[2]),
        };
        let next = cell.step(t, st, v[0], state)?;
        let a = ph.apply(t, next.hidden.expect("step yields a state"))?;
        let b = pc.apply(t, next.cell.expect("step yields a state"))?;
        t.add(a, b)
    };
    let mut reports = input_checks(&inputs, tol, |t, v| step(t, &store, v))?;
    reports.extend(param_checks(&mut store, &mut rng, tol, |t, st| {
        let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        step(t, st, &v)
    })?);
    Ok(CheckResult::merge("convlstm_step", tol, &reports))
}

/// Bidirectional fusion of two `[2, 2, 4, 3]` maps.
pub fn bconvlstm_check(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let fusion = BConvLstm::new(&mut store, "bcl", 2, 4, 3, &mut rng)?;
    randomize(&mut store, 0.5, &mut rng)?;
    let shape = [2, 2, 4, 3];
    let inputs = [rand(&shape, &mut rng)?, rand(&shape, &mut rng)?];
    let proj = Projector::new(&shape, &mut rng)?;
    let mut reports = input_checks(&inputs, tol, |t, v| {
        let y = fusion.forward(t, &store, v[0], v[1])?;
        proj.apply(t, y)
    })?;
    reports.extend(param_checks(&mut store, &mut rng, tol, |t, st| {
        let a = t.constant(inputs[0].clone());
        let b = t.constant(inputs[1].clone());
        let y = fusion.forward(t, st, a, b)?;
        proj.apply(t, y)
    })?);
    Ok(CheckResult::merge("bconvlstm", tol, &reports))
}

/// Dense bottleneck with three blocks of width 2 on a 2-channel 4×4 input.
pub fn dense_check(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let dense = DenseBottleneck::new(&mut store, "dense", 2, 2, 3, &mut rng)?;
    randomize(&mut store, 0.7, &mut rng)?;
    let x = rand(&[2, 2, 4, 4], &mut rng)?;
    let proj = Projector::new(&[2, 2, 4, 4], &mut rng)?;
    let mut reports = input_checks(std::slice::from_ref(&x), tol, |t, v| {
        let y = dense.forward(t, &store, v[0])?;
        proj.apply(t, y)
    })?;
    reports.extend(param_checks(&mut store, &mut rng, tol, |t, st| {
        let xv = t.constant(x.clone());
        let y = dense.forward(t, st, xv)?;
        proj.apply(t, y)
    })?);
    Ok(CheckResult::merge("dense_bottleneck_d3", tol, &reports))
}

/// Decoder stage of width 4 producing an 8×8 map, batch-norm in train mode.
pub fn decoder_stage_check(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let stage = DecoderStage::new(&mut store, "dec", 4, 8, 8, 2, &mut rng)?;
    randomize(&mut store, 0.5, &mut rng)?;
    let inputs = [rand(&[2, 8, 4, 4], &mut rng)?, rand(&[2, 4, 8, 8], &mut rng)?];
    let proj = Projector::new(&[2, 4, 8, 8], &mut rng)?;
    let mut reports = {
        let st = &mut store;
        input_checks(&inputs, tol, |t, v| {
            let y = stage.forward(t, st, v[0], v[1], Mode::Train)?;
            proj.apply(t, y)
        })?
    };
    reports.extend(param_checks(&mut store, &mut rng, tol, |t, st| {
        let a = t.constant(inputs[0].clone());
        let b = t.constant(inputs[1].clone());
        let y = stage.forward(t, st, a, b, Mode::Train)?;
        proj.apply(t, y)
    })?);
    Ok(CheckResult::merge("decoder_stage", tol, &reports))
}

/// The complete network with `F₀ = 2`, `d = 1` on a 16×16 input, through
/// the cross-entropy loss.
pub fn full_model_check(seed: u64, tol: f64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        base_filters: 2,
        dense_blocks: 1,
        reduction_ratio: 2,
        input_channels: 1,
        height: 16,
        width: 16,
        classes: 2,
    };
    let mut rng = Rng::new(seed);
    let model = Mcgu::new(cfg, seed)?;
    let mut store = model.store.clone();
    randomize(&mut store, 0.5, &mut rng)?;
    let x = rand(&[2, 1, 16, 16], &mut rng)?;
    let target = Tensor::from_fn(&[2, 16, 16], |_| rng.below(2) as f64)?;
    let mut reports = {
        let st = &mut store;
        input_checks(std::slice::from_ref(&x), tol, |t, v| {
            let logits = model.forward_with(t, st, v[0], Mode::Train)?;
            softmax_ce_loss(t, logits, &target)
        })?
    };
    reports.extend(param_checks(&mut store, &mut rng, tol, |t, st| {
        let xv = t.constant(x.clone());
        let logits = model.forward_with(t, st, xv, Mode::Train)?;
        softmax_ce_loss(t, logits, &target)
    })?);
    Ok(CheckResult::merge("full_model", tol, &reports))
}

pub fn block_checks(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        se_check(seed, tol)?,
        convlstm_step_check(seed, tol)?,
        bconvlstm_check(seed, tol)?,
        dense_check(seed, tol)?,
        decoder_stage_check(seed, tol)?,
        full_model_check(seed, tol)?,
    ])
}

/// Layer checks followed by block checks.
pub fn run_suite(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut out = layer_checks(seed, tol)?;
    out.extend(block_checks(seed, tol)?);
    Ok(out)
}
