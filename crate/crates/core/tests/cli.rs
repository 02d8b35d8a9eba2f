//! End-to-end runs of the `mcgu` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mcgu::data::{encode_pgm, read_image, read_pgm_levels, write_mask, PgmLevels};
use mcgu::numerics::Tensor;

fn mcgu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcgu"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mcgu(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "base_filters = 2\ndense_blocks = 1\npatch_size = 16\nmax_epochs = 2\nbatch_size = 4\n";

/// Synthesizes `n` circle images of `size` into `dir/data` and trains a
/// tiny checkpoint on them.
fn trained(dir: &Path, n: usize, size: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let (n, size) = (n.to_string(), size.to_string());
    ok(&[
        "synth",
        "--task",
        "circles",
        "--n",
        &n,
        "--size",
        &size,
        "--out",
        path(&data),
    ]);
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let ckpt = dir.join("model.ckpt");
    ok(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--out",
        path(&ckpt),
    ]);
    (data, ckpt)
}

#[test]
fn gradcheck_prints_one_passing_line_per_check() {
    let out = ok(&["gradcheck", "--seed", "1", "--tol", "1e-4"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() >= 25, "{text}");
    for line in &lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert!(fields[1].parse::<f64>().unwrap() < 1e-4);
        assert_eq!(fields[2], "PASS");
    }
    for name in [
        "se_block",
        "convlstm_step",
        "bconvlstm",
        "dense_bottleneck_d3",
        "decoder_stage",
        "full_model",
    ] {
        assert!(
            lines.iter().any(|l| l.starts_with(&format!("{name} "))),
            "{name} missing"
        );
    }
}

#[test]
fn synth_train_predict_eval_roc() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), 3, 32);
    let history = fs::read_to_string(dir.path().join("model.ckpt.history.csv")).unwrap();
    assert_eq!(
        history.lines().next().unwrap(),
        "epoch,train_loss,val_loss,train_acc,val_acc"
    );
    assert_eq!(history.lines().count(), 3);

    // A 32×32 image through a 16×16 model is tiled back to full extent.
    let mask = dir.path().join("pred.pgm");
    let image = data.join("images").join("0000.pgm");
    ok(&[
        "predict",
        "--ckpt",
        path(&ckpt),
        "--image",
        path(&image),
        "--out",
        path(&mask),
    ]);
    let levels = read_pgm_levels(&mask).unwrap();
    assert_eq!((levels.height, levels.width), (32, 32));
    assert!(levels.levels.iter().all(|&v| v == 0 || v == 255));

    let metrics = dir.path().join("metrics.csv");
    ok(&[
        "eval",
        "--ckpt",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&metrics),
    ]);
    let text = fs::read_to_string(&metrics).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "image,AC,SE,SP,PC,F1,JS,DIC");
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("aggregate,"));
    for row in &rows[1..] {
        let vals: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 7);
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(vals[4], vals[6]);
    }

    let roc = dir.path().join("roc.csv");
    ok(&["roc", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(&roc)]);
    let text = fs::read_to_string(&roc).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "threshold,fpr,tpr");
    assert_eq!(rows[1], "inf,0,0");
    let last: Vec<f64> = rows.last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(&last[1..], [1.0, 1.0]);
}

#[test]
fn zero_learning_rate_stops_after_eleven_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--task",
        "circles",
        "--n",
        "2",
        "--size",
        "16",
        "--out",
        path(&data),
    ]);
    let cfg = dir.path().join("frozen.cfg");
    fs::write(
        &cfg,
        "base_filters = 2\ndense_blocks = 1\npatch_size = 16\nlr = 0\nmax_epochs = 50\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let history = dir.path().join("h.csv");
    ok(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--out",
        path(&ckpt),
        "--history",
        path(&history),
    ]);
    let text = fs::read_to_string(&history).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().last().unwrap().starts_with("11,"));
}

#[test]
fn lung_prep_writes_binary_masks_disjoint_from_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (raw_dir, gt_dir, out_dir) = (dir.path().join("raw"), dir.path().join("gt"), dir.path().join("out"));
    fs::create_dir_all(&raw_dir).unwrap();
    fs::create_dir_all(&gt_dir).unwrap();
    let (h, w) = (12, 14);
    // HU = level − 1024: air 24 (−1000), tissue 1064 (40), lung 224 (−800),
    // one bone pixel 2124 (1100).
    let mut levels = vec![24u16; h * w];
    let mut gt = Tensor::zeros(&[h, w]).unwrap();
    for y in 2..10 {
        for x in 2..12 {
            levels[y * w + x] = 1064;
        }
    }
    for y in 4..8 {
        for x in 4..7 {
            levels[y * w + x] = 224;
            gt.set(&[y, x], 1.0);
        }
    }
    levels[3 * w + 9] = 2124;
    let pgm = PgmLevels {
        width: w,
        height: h,
        maxval: 4095,
        levels,
    };
    fs::write(raw_dir.join("s0.pgm"), encode_pgm(&pgm)).unwrap();
    write_mask(&gt_dir.join("s0.pgm"), &gt).unwrap();
    ok(&[
        "lung-prep",
        "--in",
        path(&raw_dir),
        "--gt",
        path(&gt_dir),
        "--out",
        path(&out_dir),
    ]);
    let mask = read_image(&out_dir.join("s0.pgm")).unwrap();
    assert_eq!(mask.shape(), [h, w]);
    let mut surrounding = 0;
    for (&m, &g) in mask.data().iter().zip(gt.data()) {
        assert!(m == 0.0 || m == 1.0);
        assert!(!(m == 1.0 && g == 1.0));
        surrounding += (m == 1.0) as usize;
    }
    assert!(surrounding > 0);
}

#[test]
fn usage_errors_exit_one_and_runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mcgu(&[]).status.code(), Some(1));
    assert_eq!(mcgu(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mcgu(&["eval", "--ckpt", "x"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(
        mcgu(&["train", "--config", path(&cfg), "--out", path(&ckpt)])
            .status
            .code(),
        Some(1)
    );

    let missing = dir.path().join("missing.ckpt");
    let out = mcgu(&[
        "predict",
        "--ckpt",
        path(&missing),
        "--image",
        "x.pgm",
        "--out",
        "y.pgm",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"MCGU not really a checkpoint").unwrap();
    let out = mcgu(&[
        "predict",
        "--ckpt",
        path(&garbage),
        "--image",
        "x.pgm",
        "--out",
        "y.pgm",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
