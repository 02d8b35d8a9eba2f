//! Acceptance criteria, one PASS/FAIL line each. Runs without the test
//! harness so the lines always reach the output; exits non-zero if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{bconvlstm_ref, lstm_step_ref, mann_whitney, max_abs_diff, random_ct_slice, se_ref};
use mcgu::blocks::{BConvLstm, ConvLstmCell, LstmState, Mcgu, ModelConfig, SeBlock};
use mcgu::checks::{randomize, run_suite};
use mcgu::data::{
    clamp_hu, lung_preprocess, normalize_slice, sample_patches, synth_dataset, PatchSpec, Sample, SampleSource, Task,
};
use mcgu::error::{Error, PersistError};
use mcgu::layers::{softmax_ce_loss, Mode};
use mcgu::metrics::{binarize, confusion, roc_auc, ConfusionCounts};
use mcgu::numerics::{ParamStore, Rng, Tape, Tensor};
use mcgu::training::{
    decode_checkpoint, encode_checkpoint, load, save, train, train_with_hook, Control, EarlyStop, History,
    PixelClassifier, TrainOptions,
};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let results = run_suite(1, 1e-4).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    if let Some(bad) = results.iter().find(|r| !r.pass || r.checked == 0) {
        return Err(format!("{} (checked {})", bad.line(), bad.checked));
    }
    for name in [
        "se_block",
        "convlstm_step",
        "bconvlstm",
        "dense_bottleneck_d3",
        "decoder_stage",
        "full_model",
    ] {
        ensure(results.iter().any(|r| r.name == name), || format!("{name} not checked"))?;
    }
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst rel. error {worst:.2e}, {elapsed:.1?}",
        results.len()
    ))
}

fn forward_oracles() -> Outcome {
    let mut rng = Rng::new(100);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let ratio = 1 + rng.below(2);
        let f = ratio * (1 + rng.below(3));
        let shape = [1 + rng.below(2), f, 1 + rng.below(4), 1 + rng.below(4)];
        let mut store = ParamStore::new();
        let se = SeBlock::new(&mut store, "se", f, ratio, &mut rng).map_err(err)?;
        randomize(&mut store, 1.5, &mut rng).map_err(err)?;
        let x = Tensor::uniform(&shape, 2.0, &mut rng).map_err(err)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = se.forward(&mut tape, &store, xv).map_err(err)?;
        worst[0] = worst[0].max(max_abs_diff(tape.value(y), &se_ref(&se, &store, &x)));
    }
    for trial in 0..50 {
        let (f, h, w) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let shape = [1 + rng.below(2), f, h, w];
        let mut store = ParamStore::new();
        let cell = ConvLstmCell::new(&mut store, "c", f, h, w, &mut rng).map_err(err)?;
        let fusion = BConvLstm::new(&mut store, "b", f, h, w, &mut rng).map_err(err)?;
        randomize(&mut store, 0.8, &mut rng).map_err(err)?;
        let [x, h0, c0] = [(); 3].map(|_| Tensor::uniform(&shape, 1.0, &mut rng).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let from_zero = trial % 2 == 0;
        let state = if from_zero {
            LstmState::default()
        } else {
            LstmState {
                hidden: Some(tape.constant(h0.clone())),
                cell: Some(tape.constant(c0.clone())),
            }
        };
        let next = cell.step(&mut tape, &store, xv, state).map_err(err)?;
        let (h_ref, c_ref) = lstm_step_ref(&cell, &store, &x, (!from_zero).then_some((&h0, &c0)));
        worst[1] = worst[1]
            .max(max_abs_diff(tape.value(next.hidden.unwrap()), &h_ref))
            .max(max_abs_diff(tape.value(next.cell.unwrap()), &c_ref));
        let dv = tape.constant(h0.clone());
        let y = fusion.forward(&mut tape, &store, xv, dv).map_err(err)?;
        worst[2] = worst[2].max(max_abs_diff(tape.value(y), &bconvlstm_ref(&fusion, &store, &x, &h0)));
    }
    ensure(worst.iter().all(|&e| e < 1e-12), || {
        format!("max |Δ| se/lstm/bconvlstm = {worst:?}")
    })?;
    Ok(format!(
        "max |Δ| se {:.1e}, lstm {:.1e}, bconvlstm {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn closed_forms() -> Outcome {
    let mut rng = Rng::new(200);
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 4, 2, &mut rng).map_err(err)?;
    let cell = ConvLstmCell::new(&mut store, "c", 4, 3, 5, &mut rng).map_err(err)?;
    let fusion = BConvLstm::new(&mut store, "b", 4, 3, 5, &mut rng).map_err(err)?;
    store.fill_all(0.0);
    let x = Tensor::uniform(&[2, 4, 3, 5], 10.0, &mut rng).map_err(err)?;
    let other = Tensor::uniform(&[2, 4, 3, 5], 10.0, &mut rng).map_err(err)?;
    let mut tape = Tape::new();
    let (xv, ov) = (tape.constant(x.clone()), tape.constant(other));

    let y = se.forward(&mut tape, &store, xv).map_err(err)?;
    let halved = tape
        .value(y)
        .data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| a.to_bits() == (0.5 * b).to_bits());
    ensure(halved, || "zero SE is not exactly 0.5·x".into())?;

    let s = cell.step(&mut tape, &store, xv, LstmState::default()).map_err(err)?;
    let zero = |v| tape.value(v).data().iter().all(|&t: &f64| t == 0.0);
    ensure(zero(s.hidden.unwrap()) && zero(s.cell.unwrap()), || {
        "zero ConvLSTM state is not zero".into()
    })?;

    let y = fusion.forward(&mut tape, &store, xv, ov).map_err(err)?;
    ensure(tape.value(y).data().iter().all(|&t| t == 0.0), || {
        "zero BConvLSTM output is not zero".into()
    })?;

    let mut worst = 0.0f64;
    for k in 2..=6 {
        let logits = tape.constant(Tensor::full(&[2, k, 3, 3], -1.25).map_err(err)?);
        let target = Tensor::from_fn(&[2, 3, 3], |i| (i % k) as f64).map_err(err)?;
        let loss = softmax_ce_loss(&mut tape, logits, &target).map_err(err)?;
        worst = worst.max((tape.value(loss).item().map_err(err)? - (k as f64).ln()).abs());
    }
    ensure(worst < 1e-12, || format!("uniform-logit loss off ln K by {worst:e}"))?;
    Ok(format!("uniform-logit |loss − ln K| ≤ {worst:.1e} for K = 2..6"))
}

fn structure() -> Outcome {
    for f0 in [2, 4] {
        for d in [1, 3] {
            let s = 32;
            let cfg = ModelConfig {
                base_filters: f0,
                dense_blocks: d,
                reduction_ratio: 2,
                input_channels: 1,
                height: s,
                width: s,
                classes: 2,
            };
            let mut model = Mcgu::new(cfg, 0).map_err(err)?;
            let tag = format!("F0={f0} d={d}");
            let mut tape = Tape::inference();
            let x = tape.constant(Tensor::zeros(&[1, 1, s, s]).map_err(err)?);
            let enc = model.encoder.forward(&mut tape, &model.store, x).map_err(err)?;
            let want_skips = [[1, f0, s, s], [1, 2 * f0, s / 2, s / 2], [1, 4 * f0, s / 4, s / 4]];
            for (skip, want) in enc.skips.iter().zip(want_skips) {
                ensure(tape.shape(*skip) == want, || {
                    format!("{tag}: skip {:?}", tape.shape(*skip))
                })?;
            }
            ensure(tape.shape(enc.bottleneck) == [1, 8 * f0, s / 8, s / 8], || {
                format!("{tag}: bottleneck")
            })?;
            let mut store = std::mem::take(&mut model.store);
            let mut y = enc.bottleneck;
            let want_dec = [[1, 4 * f0, s / 4, s / 4], [1, 2 * f0, s / 2, s / 2], [1, f0, s, s]];
            for ((stage, &skip), want) in model.decoders.iter().zip(enc.skips.iter().rev()).zip(want_dec) {
                y = stage
                    .forward(&mut tape, &mut store, y, skip, Mode::Infer)
                    .map_err(err)?;
                ensure(tape.shape(y) == want, || format!("{tag}: decoder {:?}", tape.shape(y)))?;
            }
            model.store = store;
            let dense = &model.encoder.bottleneck;
            for i in 2..=d {
                let c = model.store.get(dense.blocks[i - 1].first.kernel).shape()[1];
                ensure(c == (i - 1) * 8 * f0, || {
                    format!("{tag}: dense block {i} reads {c} channels")
                })?;
            }
            let counted = model.num_params();
            ensure(counted == cfg.param_count(), || {
                format!("{tag}: store {counted} vs formula {}", cfg.param_count())
            })?;
        }
    }
    let tiny = Mcgu::new(
        ModelConfig {
            base_filters: 2,
            dense_blocks: 1,
            reduction_ratio: 2,
            input_channels: 1,
            height: 16,
            width: 16,
            classes: 2,
        },
        0,
    )
    .map_err(err)?;
    ensure(tiny.num_params() == 26_240, || {
        format!("tiny model has {} params", tiny.num_params())
    })?;
    Ok("4 configurations traced; tiny model 26240 params".into())
}

fn training_dice(model: &mut Mcgu, data: &[Sample]) -> mcgu::Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let (images, masks) = mcgu::data::stack(data, &indices)?;
    let probs = model.predict_proba(&images)?;
    let (b, k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2], probs.shape()[3]);
    let fg = Tensor::from_fn(&[b, h, w], |i| {
        let (bi, p) = (i / (h * w), i % (h * w));
        1.0 - probs.data()[bi * k * h * w + p]
    })?;
    Ok(confusion(&binarize(&fg), &masks)?.f1())
}

fn learn(dense_blocks: usize, target: f64, data: &[Sample]) -> std::result::Result<(usize, f64), String> {
    let cfg = ModelConfig {
        base_filters: 8,
        dense_blocks,
        reduction_ratio: 2,
        input_channels: 1,
        height: 64,
        width: 64,
        classes: 2,
    };
    let mut model = Mcgu::new(cfg, 0).map_err(err)?;
    let opts = TrainOptions {
        max_epochs: 200,
        patience: 200,
        ..TrainOptions::default()
    };
    let mut best = (0, 0.0);
    train_with_hook(&mut model, data, data, &opts, |rec, m| {
        let dice = training_dice(m, data)?;
        if dice > best.1 {
            best = (rec.epoch, dice);
        }
        Ok(if dice >= target {
            Control::Stop
        } else {
            Control::Continue
        })
    })
    .map_err(err)?;
    Ok(best)
}

fn learning_check() -> Outcome {
    let start = Instant::now();
    let data = synth_dataset(Task::Circles, 8, 64, &mut Rng::new(11)).map_err(err)?;
    let (e3, d3) = learn(3, 0.95, &data)?;
    let (e1, d1) = learn(1, 0.90, &data)?;
    let elapsed = start.elapsed();
    ensure(d3 >= 0.95, || format!("d=3 best Dice {d3:.4} (epoch {e3})"))?;
    ensure(d1 >= 0.90, || format!("d=1 best Dice {d1:.4} (epoch {e1})"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "d=3 Dice {d3:.4} at epoch {e3}; d=1 Dice {d1:.4} at epoch {e1}; {elapsed:.1?}"
    ))
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(600);
    for trial in 0..1000 {
        // Every tenth draw allows zero counts to reach the degenerate rules.
        let lo = if trial % 10 == 0 { 0 } else { 1 };
        let mut draw = || (lo + rng.below(5000 - lo as usize) as u64) as f64;
        let (tp, fp, tn, fn_) = (draw(), draw(), draw(), draw());
        let c = ConfusionCounts {
            tp: tp as u64,
            fp: fp as u64,
            tn: tn as u64,
            fn_: fn_ as u64,
        };
        let m = c.metrics();
        let div = |a: f64, b: f64, vacuous: f64| if b == 0.0 { vacuous } else { a / b };
        let pos_empty = tp + fp + fn_ == 0.0;
        let neg_empty = tn + fp + fn_ == 0.0;
        let want = [
            div(tp + tn, tp + tn + fp + fn_, 1.0),
            div(tp, tp + fn_, pos_empty as u8 as f64),
            div(tn, tn + fp, neg_empty as u8 as f64),
            div(tp, tp + fp, pos_empty as u8 as f64),
            div(2.0 * tp, 2.0 * tp + fp + fn_, 1.0),
            div(tp, tp + fp + fn_, 1.0),
            div(2.0 * tp, 2.0 * tp + fp + fn_, 1.0),
        ];
        let got = [m.ac, m.se, m.sp, m.pc, m.f1, m.js, m.dic];
        ensure(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("{c:?}: {got:?} vs {want:?}")
        })?;
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 2 + rng.below(9_999);
        let levels = 1 + rng.below(200);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels + 1) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.unit() < 0.4).collect();
        labels[0] = true;
        labels[1] = false;
        let s = Tensor::new(&[n], scores.clone()).map_err(err)?;
        let g = Tensor::new(&[n], labels.iter().map(|&b| b as u8 as f64).collect()).map_err(err)?;
        let (_, auc) = roc_auc(&s, &g).map_err(err)?;
        worst = worst.max((auc - mann_whitney(&scores, &labels)).abs());
    }
    ensure(worst < 1e-9, || format!("AUC off the pairwise statistic by {worst:e}"))?;
    let s = Tensor::new(&[4], vec![0.1, 0.4, 0.35, 0.8]).map_err(err)?;
    let g = Tensor::new(&[4], vec![0.0, 0.0, 1.0, 1.0]).map_err(err)?;
    let (_, auc) = roc_auc(&s, &g).map_err(err)?;
    ensure(auc == 0.75, || format!("worked example AUC {auc}"))?;
    Ok(format!(
        "1000 counts exact; AUC max |Δ| {worst:.1e}; worked example 0.75"
    ))
}

fn protocol() -> Outcome {
    let mut stop = EarlyStop::default();
    ensure(stop.observe(0.5), || "first epoch must improve".into())?;
    for i in 1..=10 {
        ensure(!stop.should_stop(), || {
            format!("stopped after {} stagnant epochs", i - 1)
        })?;
        stop.observe(0.5);
    }
    ensure(stop.should_stop(), || "still running after 10 stagnant epochs".into())?;

    let data = synth_dataset(Task::Circles, 2, 8, &mut Rng::new(7)).map_err(err)?;
    let mut frozen = PixelClassifier::new(1, 2, 0).map_err(err)?;
    let opts = TrainOptions {
        lr: 0.0,
        max_epochs: 100,
        ..TrainOptions::default()
    };
    let h = train(&mut frozen, &data, &data, &opts).map_err(err)?;
    ensure(h.stopped_early && h.epochs.len() == 11, || {
        format!("frozen run: {} epochs, early stop {}", h.epochs.len(), h.stopped_early)
    })?;

    let images: Vec<Sample> = (0..20)
        .map(|i| {
            let image = Tensor::full(&[1, 584, 565], i as f64 / 20.0)?;
            Sample::new(image, Tensor::zeros(&[584, 565])?)
        })
        .collect::<mcgu::Result<_>>()
        .map_err(err)?;
    let (train_set, val_set) = sample_patches(&images, &PatchSpec::default()).map_err(err)?;
    ensure(train_set.len() == 171_000 && val_set.len() == 19_000, || {
        format!("{}/{} patches", train_set.len(), val_set.len())
    })?;
    let p = train_set.sample(170_999);
    ensure(p.image.shape() == [1, 64, 64] && p.mask.shape() == [64, 64], || {
        "patch shape".into()
    })?;

    let mut rng = Rng::new(700);
    for i in 0..50 {
        let slice = random_ct_slice(&mut rng);
        let out = lung_preprocess(&slice).map_err(err)?;
        let ok = out
            .data()
            .iter()
            .zip(slice.gt.data())
            .all(|(&o, &g)| (o == 0.0 || o == 1.0) && !(o == 1.0 && g == 1.0));
        ensure(ok, || format!("slice {i}: output not binary or overlaps the lung mask"))?;
    }
    let raw = Tensor::new(&[3], vec![600.0, 512.0, -2000.0]).map_err(err)?;
    let clamped = clamp_hu(&raw);
    ensure(clamped.data() == [512.0, 512.0, -512.0], || {
        format!("clamped {:?}", clamped.data())
    })?;
    let normed = normalize_slice(&raw).map_err(err)?;
    ensure(normed.data()[0] == normed.data()[1], || {
        "600 and 512 normalize differently".into()
    })?;
    Ok("early stop at 11 epochs; 171000/19000 patches; 50 CT slices binary and disjoint; 600 → 512".into())
}

fn bitwise(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn history_bits(h: &History) -> Vec<u64> {
    h.epochs
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss, r.train_acc, r.val_acc].map(f64::to_bits))
        .collect()
}

fn persistence() -> Outcome {
    let cfg = ModelConfig {
        base_filters: 2,
        dense_blocks: 1,
        reduction_ratio: 2,
        input_channels: 1,
        height: 16,
        width: 16,
        classes: 2,
    };
    let data = synth_dataset(Task::Circles, 6, 16, &mut Rng::new(800)).map_err(err)?;
    let (train_set, val_set) = (&data[..4], &data[4..]);
    let opts = TrainOptions {
        max_epochs: 3,
        seed: 5,
        ..TrainOptions::default()
    };
    let run = || -> mcgu::Result<(Mcgu, History)> {
        let mut m = Mcgu::new(cfg, 5)?;
        let h = train(&mut m, train_set, val_set, &opts)?;
        Ok((m, h))
    };
    let (mut first, h1) = run().map_err(err)?;
    let (second, h2) = run().map_err(err)?;
    let (b1, b2) = (encode_checkpoint(&first), encode_checkpoint(&second));
    ensure(
        history_bits(&h1) == history_bits(&h2) && h1.to_csv() == h2.to_csv(),
        || "seeded runs logged different histories".into(),
    )?;
    ensure(b1 == b2, || "seeded runs produced different checkpoints".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    save(&first, &path).map_err(err)?;
    let mut back = load(&path).map_err(err)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let (images, _) = mcgu::data::stack(&data[..], &indices).map_err(err)?;
    for mode in [Mode::Infer, Mode::Train] {
        let mut out = Vec::new();
        for m in [&mut first, &mut back] {
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let y = m.forward(&mut tape, x, mode).map_err(err)?;
            out.push(tape.value(y).clone());
        }
        ensure(bitwise(&out[0], &out[1]), || {
            format!("{mode:?} forward differs after reload")
        })?;
    }

    let mut rng = Rng::new(801);
    let trials = 200;
    for _ in 0..trials {
        let i = rng.below(b1.len());
        let mut bad = b1.clone();
        bad[i] ^= 1 << rng.below(8);
        match decode_checkpoint(&bad) {
            Err(Error::Persist(PersistError::Crc { .. })) => {}
            Err(Error::Persist(_)) if i < 16 => {}
            other => return Err(format!("flip at byte {i}: {:?}", other.map(|_| "decoded"))),
        }
    }
    Ok(format!(
        "reload bitwise; {trials} single-byte flips rejected; two seeded runs identical"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("forward oracles", forward_oracles),
        ("closed-form cases", closed_forms),
        ("structural arithmetic", structure),
        ("learning check", learning_check),
        ("metric oracles", metric_oracles),
        ("protocol conformance", protocol),
        ("persistence", persistence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
