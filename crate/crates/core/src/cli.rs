//! The `mcgu` command line.
//!
//! Exit status is 0 on success, 1 on a usage or configuration error and 2
//! on a data, model or numeric failure. Diagnostics go to stderr; results
//! go to the files named on the command line (`gradcheck` prints its
//! report to stdout).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::blocks::{Mcgu, ModelConfig};
use crate::checks::run_suite;
use crate::data::{
    label_map_to_ids, load_dataset, read_image, read_pgm_levels, sample_patches, synth_dataset, write_dataset,
    write_label_map, write_mask, CtSlice, PatchSpec, Sample, Task, HU_OFFSET,
};
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion, metrics_csv, roc_auc, roc_csv, ConfusionCounts};
use crate::numerics::{Rng, Tensor};
use crate::training::{self, OptimKind, TrainOptions};

/// Synthetic images drawn by `train` when no data directory is given; the
/// last [`SYNTH_VAL`] of them are held out.
pub const SYNTH_TRAIN: usize = 8;
pub const SYNTH_VAL: usize = 2;
/// Patches drawn per source image when training images exceed the patch
/// size.
pub const TRAIN_PATCHES_PER_IMAGE: usize = 32;
pub const VAL_PATCHES_PER_IMAGE: usize = 4;

#[derive(Parser, Debug)]
#[command(
    name = "mcgu",
    version,
    about = "Segmentation with BConvLSTM skip fusion and SE gating"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write its checkpoint and per-epoch history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory with images/ and masks/; synthesized from the
        /// config's task when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// History CSV path; defaults to OUT.history.csv.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Per-image and pooled metrics on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one PGM image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Pooled foreground ROC curve on a dataset.
    Roc {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build surrounding-tissue masks from CT slices and lung masks.
    LungPrep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flat `key = value` run configuration; `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub base_filters: usize,
    pub dense_blocks: usize,
    pub reduction_ratio: usize,
    pub classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub task: Task,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_filters: 8,
            dense_blocks: 3,
            reduction_ratio: 2,
            classes: 2,
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            patch_size: 64,
            task: Task::Circles,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {line}: {key} given twice")));
            }
            match key {
                "base_filters" => cfg.base_filters = parse_value(key, value, line)?,
                "dense_blocks" => cfg.dense_blocks = parse_value(key, value, line)?,
                "reduction_ratio" => cfg.reduction_ratio = parse_value(key, value, line)?,
                "classes" => cfg.classes = parse_value(key, value, line)?,
                "lr" => cfg.lr = parse_value(key, value, line)?,
                "batch_size" => cfg.batch_size = parse_value(key, value, line)?,
                "max_epochs" => cfg.max_epochs = parse_value(key, value, line)?,
                "patience" => cfg.patience = parse_value(key, value, line)?,
                "seed" => cfg.seed = parse_value(key, value, line)?,
                "patch_size" => cfg.patch_size = parse_value(key, value, line)?,
                "task" => cfg.task = value.parse()?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
            seen.push(key.to_string());
        }
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", cfg.lr)));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        cfg.model_config().validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base_filters: self.base_filters,
            dense_blocks: self.dense_blocks,
            reduction_ratio: self.reduction_ratio,
            input_channels: 1,
            height: self.patch_size,
            width: self.patch_size,
            classes: self.classes,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            optimizer: OptimKind::Adam,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: TrainOptions::default().min_delta,
            seed: self.seed,
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            data,
            out,
            history,
        } => {
            let cfg = RunConfig::parse(&read_text(&config)?)?;
            let history_path = history.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".history.csv");
                PathBuf::from(s)
            });
            train_command(&cfg, data.as_deref(), &out, &history_path)
        }
        Command::Eval { ckpt, data, out } => {
            let mut model = training::load(&ckpt)?;
            let rows = evaluate_dir(&mut model, &data)?;
            write_text(&out, &metrics_csv(&rows))
        }
        Command::Predict { ckpt, image, out } => {
            let mut model = training::load(&ckpt)?;
            let img = read_image(&image)?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let probs = predict_image(&mut model, &img.reshape(&[1, h, w])?)?;
            write_label_map(&out, &labels(&probs)?, model.config.classes)
        }
        Command::Gradcheck { seed, tol } => {
            let results = run_suite(seed, tol)?;
            let mut failed = Vec::new();
            for r in &results {
                println!("{}", r.line());
                if !r.pass {
                    failed.push(r.name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric {
                    index: 0,
                    context: format!("gradient check failed for {}", failed.join(", ")),
                })
            }
        }
        Command::Roc { ckpt, data, out } => {
            let mut model = training::load(&ckpt)?;
            let (scores, gt) = pooled_scores(&mut model, &data)?;
            let (curve, auc) = roc_auc(&scores, &gt)?;
            eprintln!("auc {auc}");
            write_text(&out, &roc_csv(&curve))
        }
        Command::Synth {
            task,
            n,
            size,
            out,
            seed,
        } => {
            let task: Task = task.parse()?;
            let samples = synth_dataset(task, n, size, &mut Rng::new(seed))?;
            write_dataset(&out, &samples, task.classes())
        }
        Command::LungPrep { input, gt, out } => lung_prep_dir(&input, &gt, &out),
    }
}

/// Training and validation samples for `train`: images already at the
/// patch size are split with every tenth image held out; larger images are
/// patch-sampled.
fn training_sets(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let p = cfg.patch_size;
    let samples: Vec<Sample> = match data {
        None => {
            if cfg.task.classes() != cfg.classes {
                return Err(Error::Config(format!(
                    "task {} has {} classes but classes = {}",
                    cfg.task,
                    cfg.task.classes(),
                    cfg.classes
                )));
            }
            let mut all = synth_dataset(cfg.task, SYNTH_TRAIN + SYNTH_VAL, p, &mut Rng::new(cfg.seed))?;
            let val = all.split_off(SYNTH_TRAIN);
            return Ok((all, val));
        }
        Some(dir) => load_dataset(dir, cfg.classes)?.into_iter().map(|(_, s)| s).collect(),
    };
    if samples.iter().all(|s| s.height() == p && s.width() == p) {
        if samples.len() == 1 {
            return Ok((samples.clone(), samples));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in samples.into_iter().enumerate() {
            if i % 10 == 9 {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        if val.is_empty() {
            val.push(train.pop().expect("at least two samples"));
        }
        return Ok((train, val));
    }
    let spec = PatchSpec {
        patch_size: p,
        n_train: TRAIN_PATCHES_PER_IMAGE * samples.len(),
        n_val: VAL_PATCHES_PER_IMAGE * samples.len(),
        seed: cfg.seed,
    };
    let (train, val) = sample_patches(&samples, &spec)?;
    Ok((
        (0..train.corners.len()).map(|i| train.get(i)).collect(),
        (0..val.corners.len()).map(|i| val.get(i)).collect(),
    ))
}

fn train_command(cfg: &RunConfig, data: Option<&Path>, out: &Path, history_path: &Path) -> Result<()> {
    let (train_set, val_set) = training_sets(cfg, data)?;
    let mut model = Mcgu::new(cfg.model_config(), cfg.seed)?;
    let history = training::train(&mut model, &train_set, &val_set, &cfg.train_options())?;
    training::save(&model, out)?;
    write_text(history_path, &history.to_csv())?;
    eprintln!(
        "trained {} epochs, best epoch {}{}",
        history.epochs.len(),
        history.best_epoch,
        if history.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn tile_starts(extent: usize, tile: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..extent - tile + 1).step_by(tile).collect();
    if starts.last() != Some(&(extent - tile)) {
        starts.push(extent - tile);
    }
    starts
}

/// Class probabilities `[K, H, W]` for one `[C, H, W]` image at least as
/// large as the model's input. Larger images are covered by model-sized
/// tiles, the last row and column of tiles flush with the far edges; where
/// tiles overlap the later tile wins.
pub fn predict_image(model: &mut Mcgu, image: &Tensor) -> Result<Tensor> {
    let cfg = model.config;
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("expected a [C, H, W] image, got {s:?}"))),
    };
    if c != cfg.input_channels {
        return Err(Error::Data(format!(
            "image has {c} channels, model expects {}",
            cfg.input_channels
        )));
    }
    let (th, tw) = (cfg.height, cfg.width);
    if h < th || w < tw {
        return Err(Error::Data(format!(
            "{h}×{w} image is smaller than the model input {th}×{tw}"
        )));
    }
    if let Some(i) = image.first_non_finite() {
        return Err(Error::Numeric {
            index: i,
            context: "input image".into(),
        });
    }
    let k = cfg.classes;
    let mut out = Tensor::zeros(&[k, h, w])?;
    for &y in &tile_starts(h, th) {
        for &x in &tile_starts(w, tw) {
            let mut tile = Vec::with_capacity(c * th * tw);
            for ch in 0..c {
                for row in y..y + th {
                    let start = (ch * h + row) * w + x;
                    tile.extend_from_slice(&image.data()[start..start + tw]);
                }
            }
            let probs = model.predict_proba(&Tensor::new(&[1, c, th, tw], tile)?)?;
            for cls in 0..k {
                for row in 0..th {
                    for col in 0..tw {
                        out.set(&[cls, y + row, x + col], probs.at(&[0, cls, row, col]));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Foreground score `1 − p(background)` per pixel of `[K, H, W]`
/// probabilities.
fn foreground_scores(probs: &Tensor) -> Result<Tensor> {
    let (h, w) = (probs.shape()[1], probs.shape()[2]);
    let bg = &probs.data()[..h * w];
    Tensor::new(&[h, w], bg.iter().map(|p| (1.0 - p).clamp(0.0, 1.0)).collect())
}

/// Hard labels: the 0.5 threshold on the foreground score for two
/// classes, arg-max otherwise.
pub fn labels(probs: &Tensor) -> Result<Tensor> {
    let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    if k == 2 {
        return Ok(binarize(&foreground_scores(probs)?));
    }
    let hw = h * w;
    let p = probs.data();
    Tensor::from_fn(&[h, w], |i| {
        let mut best = 0;
        for c in 1..k {
            if p[c * hw + i] > p[best * hw + i] {
                best = c;
            }
        }
        best as f64
    })
}

fn foreground(mask: &Tensor) -> Tensor {
    mask.map(|v| (v != 0.0) as u8 as f64)
}

fn evaluate_dir(model: &mut Mcgu, dir: &Path) -> Result<Vec<(String, ConfusionCounts)>> {
    let mut rows = Vec::new();
    for (name, sample) in load_dataset(dir, model.config.classes)? {
        let probs = predict_image(model, &sample.image)?;
        let pred = foreground(&labels(&probs)?);
        rows.push((name, confusion(&pred, &foreground(&sample.mask))?));
    }
    Ok(rows)
}

fn pooled_scores(model: &mut Mcgu, dir: &Path) -> Result<(Tensor, Tensor)> {
    let (mut scores, mut gt) = (Vec::new(), Vec::new());
    for (_, sample) in load_dataset(dir, model.config.classes)? {
        let probs = predict_image(model, &sample.image)?;
        scores.extend_from_slice(foreground_scores(&probs)?.data());
        gt.extend_from_slice(foreground(&sample.mask).data());
    }
    let n = scores.len();
    Ok((Tensor::new(&[n], scores)?, Tensor::new(&[n], gt)?))
}

fn lung_prep_dir(input: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut names: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no .pgm slices in {}", input.display())));
    }
    for path in names {
        let file = path.file_name().expect("listed files have names");
        let levels = read_pgm_levels(&path)?;
        let raw = Tensor::new(
            &[levels.height, levels.width],
            levels.levels.iter().map(|&v| v as f64 - HU_OFFSET).collect(),
        )?;
        let gt = label_map_to_ids(&read_image(&gt_dir.join(file))?, 2)?;
        let surrounding = crate::data::lung_preprocess(&CtSlice::new(raw, gt)?)?;
        write_mask(&out.join(file), &surrounding)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::parse("# tiny\nbase_filters = 4\nlr=0.01 # faster\n\ntask = rings\n").unwrap();
        assert_eq!(cfg.base_filters, 4);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.task, Task::Rings);
        assert_eq!(cfg.patience, 10);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn config_rejections_are_usage_errors() {
        for text in [
            "colour = red",
            "lr = fast",
            "base_filters",
            "seed = 1\nseed = 2",
            "patch_size = 20",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.is_usage(), "{text}: {err}");
        }
    }

    #[test]
    fn tiles_cover_extent() {
        assert_eq!(tile_starts(16, 16), vec![0]);
        assert_eq!(tile_starts(40, 16), vec![0, 16, 24]);
        assert_eq!(tile_starts(32, 16), vec![0, 16]);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mcgu", "frobnicate"]), 1);
        assert_eq!(run(["mcgu", "synth", "--task", "circles"]), 1);
        assert_eq!(
            run([
                "mcgu",
                "synth",
                "--task",
                "cubes",
                "--n",
                "1",
                "--size",
                "8",
                "--out",
                "/nonexistent"
            ]),
            1
        );
    }
}
