//! The five subcommands. Each returns the process exit code on success and an
//! error (exit 1) for usage or I/O problems.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use instanseg_core::gradcheck::run_standard_suite;
use instanseg_core::labelmap::{load_label_png, save_label_png, LabelMap};
use instanseg_core::model::{load_model, save_model};
use instanseg_core::synth::{gen_dataset, load_image_png, load_manifest, load_sample};
use instanseg_core::tiling::{infer_tiled_with, PngProvider};
use instanseg_core::{
    evaluate_dataset, infer_tiled, tta_infer, ArchitectureConfig, ModelParams, SynthConfig,
    Tensor, TileConfig,
};

use crate::config::RunConfig;

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Preset {
    /// Well-spaced ellipses.
    Default,
    /// Touching instances with minimal spacing.
    Crowded,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed (overrides the synth config section).
    #[arg(long)]
    seed: Option<u64>,
    /// Training images.
    #[arg(long, default_value_t = 20)]
    n_train: usize,
    /// Validation images.
    #[arg(long, default_value_t = 5)]
    n_val: usize,
    /// Test images.
    #[arg(long, default_value_t = 5)]
    n_test: usize,
    /// Scene preset; `crowded` replaces the synth config section.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
}

pub fn gen(args: GenArgs, mut cfg: RunConfig) -> Result<u8> {
    if matches!(args.preset, Preset::Crowded) {
        cfg.synth = SynthConfig::crowded();
    }
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    cfg.write_in(&args.out)?;
    let manifest = gen_dataset(&cfg.synth, args.n_train, args.n_val, args.n_test, &args.out)?;
    println!(
        "wrote {} train / {} val / {} test images to {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        args.out.display()
    );
    Ok(0)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory produced by `gen` (or matching its layout).
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained model container.
    #[arg(long)]
    out_model: PathBuf,
    /// Epochs after the warm-up phase.
    #[arg(long)]
    epochs: Option<usize>,
    /// Warm-up epochs with the binary objectives.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Images per optimization step.
    #[arg(long)]
    batch: Option<usize>,
    /// Square augmentation crop, clamped to the image size.
    #[arg(long)]
    crop: Option<usize>,
    /// Seed for weight init, shuffling, and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the existing container at --out-model.
    #[arg(long)]
    resume: bool,
}

pub fn train(args: TrainArgs, mut cfg: RunConfig) -> Result<u8> {
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.pretrain_epochs {
        cfg.train.pretrain_epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.crop {
        cfg.train.crop = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
        if !args.resume {
            cfg.architecture.seed = v;
        }
    }
    cfg.train.pipeline = cfg.pipeline.clone();

    let manifest = load_manifest(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let train_set = load_split(&args.data, &manifest.train)?;
    let val_set = load_split(&args.data, &manifest.val)?;

    let params = if args.resume {
        let loaded = load_model(&args.out_model)?;
        if !same_architecture(&loaded.config, &cfg.architecture) {
            bail!(
                "--resume: {} was trained with a different architecture than requested",
                args.out_model.display()
            );
        }
        cfg.architecture = loaded.config.clone();
        loaded
    } else {
        ModelParams::build(cfg.architecture.clone())?
    };

    if let Some(parent) = nonempty_parent(&args.out_model) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    cfg.train.log_path = Some(args.out_model.with_extension("metrics.jsonl"));
    cfg.write_beside(&args.out_model)?;

    let outcome = instanseg_core::train(&train_set, &val_set, params, &cfg.train)?;
    save_model(&outcome.params, &args.out_model)?;
    match outcome.best_epoch {
        Some(epoch) => println!(
            "saved best checkpoint (epoch {epoch}, val mean F1 {:.4}) to {}",
            outcome.best_f1_mu,
            args.out_model.display()
        ),
        None => println!("saved final state to {}", args.out_model.display()),
    }
    Ok(0)
}

/// Architecture identity ignores the init seed: resuming only needs matching
/// tensor shapes, and the seed no longer matters once weights exist.
fn same_architecture(a: &ArchitectureConfig, b: &ArchitectureConfig) -> bool {
    let mut b_with_a_seed = b.clone();
    b_with_a_seed.seed = a.seed;
    *a == b_with_a_seed
}

fn load_split(dir: &Path, indices: &[usize]) -> Result<Vec<(Tensor, LabelMap)>> {
    indices
        .iter()
        .map(|&i| Ok(load_sample(dir, i)?))
        .collect()
}

fn nonempty_parent(path: &Path) -> Option<&Path> {
    path.parent().filter(|p| !p.as_os_str().is_empty())
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Trained model container.
    #[arg(long)]
    model: PathBuf,
    /// Input image (PNG).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output label map (16-bit PNG).
    #[arg(long)]
    out: PathBuf,
    /// Median-combine predictions over all eight flips and rotations.
    #[arg(long)]
    tta: bool,
    /// Process in square tiles of this size; 0 runs the whole image at once.
    #[arg(long, default_value_t = 0)]
    tile_size: usize,
    /// Tile overlap in pixels.
    #[arg(long)]
    overlap: Option<usize>,
}

pub fn infer(args: InferArgs, mut cfg: RunConfig) -> Result<u8> {
    cfg.pipeline.tta = args.tta;
    let params = load_model(&args.model)?;

    let labels = if args.tile_size == 0 {
        let image = load_image_png(&args.input)?;
        if args.tta {
            tta_infer(&image, &params, &cfg.pipeline)?
        } else {
            instanseg_core::infer(&image, &params, &cfg.pipeline)?
        }
    } else {
        let tiles = TileConfig {
            tile_size: args.tile_size,
            overlap: args.overlap.unwrap_or_else(|| TileConfig::default().overlap),
        };
        let mut source = PngProvider::open(&args.input)?;
        if args.tta {
            let mut segment = |block: &Tensor| tta_infer(block, &params, &cfg.pipeline);
            infer_tiled_with(&mut source, &tiles, &mut segment)?
        } else {
            infer_tiled(&mut source, &params, &cfg.pipeline, &tiles)?
        }
    };

    if let Some(parent) = nonempty_parent(&args.out) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    cfg.write_beside(&args.out)?;
    save_label_png(&args.out, &labels)?;
    println!("{}", labels.instance_ids().len());
    Ok(0)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted label maps (16-bit PNG).
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of ground-truth label maps with the same file names.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    report: PathBuf,
}

pub fn eval(args: EvalArgs, cfg: RunConfig) -> Result<u8> {
    let pred_names = png_names(&args.pred_dir)?;
    let gt_names = png_names(&args.gt_dir)?;
    if pred_names.is_empty() {
        bail!("no .png label maps in {}", args.pred_dir.display());
    }
    if pred_names != gt_names {
        let only_pred = pred_names.iter().find(|n| !gt_names.contains(n));
        let only_gt = gt_names.iter().find(|n| !pred_names.contains(n));
        let example = only_pred.or(only_gt).map(String::as_str).unwrap_or("");
        bail!(
            "file sets differ between {} ({} files) and {} ({} files), e.g. {example:?}",
            args.pred_dir.display(),
            pred_names.len(),
            args.gt_dir.display(),
            gt_names.len()
        );
    }
    let preds = load_maps(&args.pred_dir, &pred_names)?;
    let gts = load_maps(&args.gt_dir, &gt_names)?;
    let report = evaluate_dataset(&preds, &gts)?;

    if let Some(parent) = nonempty_parent(&args.report) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    cfg.write_beside(&args.report)?;
    let mut text = serde_json::to_string_pretty(&report).context("encoding report")?;
    text.push('\n');
    fs::write(&args.report, text)
        .with_context(|| format!("writing report {}", args.report.display()))?;
    println!(
        "{} images  F1@0.5 {:.4}  mean F1 {:.4}",
        preds.len(),
        report.pooled.f1_05,
        report.pooled.f1_mu
    );
    Ok(0)
}

/// Sorted .png file names directly inside `dir`.
fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("reading {}", dir.display()))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if name.ends_with(".png") && entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

fn load_maps(dir: &Path, names: &[String]) -> Result<Vec<LabelMap>> {
    names
        .iter()
        .map(|n| Ok(load_label_png(&dir.join(n))?))
        .collect()
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random tensors per op.
    #[arg(long, default_value_t = 50)]
    cases: usize,
    /// Base seed for case generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<u8> {
    let reports = run_standard_suite(args.cases, args.seed, args.inject_fault)?;
    let mut first_failure = None;
    for report in &reports {
        let status = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<16} {:>4} cases  max rel err {:.3e}  {status}",
            report.op, report.cases, report.max_rel_err
        );
        if !report.passed() && first_failure.is_none() {
            first_failure = Some(report);
        }
    }
    if let Some(report) = first_failure {
        eprintln!(
            "gradient check failed for {} (max rel err {:.3e})",
            report.op, report.max_rel_err
        );
        return Ok(2);
    }
    Ok(0)
}
