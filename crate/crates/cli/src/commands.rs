//! The `masklab` command-line surface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input. Every command
//! is a pure function of its inputs and declared seeds: running it twice
//! produces byte-identical files and byte-identical stdout.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use masklab_core::assembly::{assemble_instance, BoundingBox};
use masklab_core::metrics::{best_dice, BestDiceReport, LabelImage};
use masklab_core::refine::{binarize, refine_mask, PointPredictor};
use masklab_core::Tensor;
use serde::Serialize;

use crate::boxes::{read_boxes, write_boxes};
use crate::config::ToolConfig;
use crate::error::{CliError, Result};
use crate::lmt::{lookup, read_lmt, typed_lookup, write_lmt, LmtScalar, LmtTensor, NamedTensor};
use crate::params::predictor_from_records;
use crate::raster::{read_labels, write_labels};
use crate::synth::{generate, SynthParams};
use crate::train::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "masklab",
    about = "Instance mask assembly, point refinement, scoring, and toy training",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Combine shared basis maps with per-instance coefficients into masks
    Assemble(AssembleArgs),
    /// Sharpen a coarse logit map by re-classifying its most uncertain points
    Refine(RefineArgs),
    /// Score a predicted label raster against ground truth
    Bestdice(BestdiceArgs),
    /// Generate a seeded synthetic rosette scene
    Synth(SynthArgs),
    /// Train the toy end-to-end model on synthetic scenes
    Traintoy(TraintoyArgs),
    /// Check every analytic gradient against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct AssembleArgs {
    /// Tensor pack holding a "bases" record, shape (K, H, W)
    #[arg(long)]
    bases: PathBuf,
    /// Tensor pack holding a "coefficients" record, shape (P, K, Rc, Rc)
    #[arg(long)]
    coeffs: PathBuf,
    /// CSV of P boxes in the bases coordinate frame
    #[arg(long)]
    boxes: PathBuf,
    /// JSON config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, one logit pack and one mask raster per instance
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    /// Tensor pack holding a "logits" record, shape (H, W)
    #[arg(long)]
    coarse: PathBuf,
    /// Tensor pack holding a "features" record, shape (C, Hf, Wf)
    #[arg(long)]
    features: PathBuf,
    /// Parameter pack with predictor.layer{i} records
    #[arg(long)]
    params: PathBuf,
    /// JSON config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for refined.lmt and refined.png
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BestdiceArgs {
    /// Predicted label raster (.png or .pgm)
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label raster (.png or .pgm)
    #[arg(long)]
    gt: PathBuf,
    /// Score both directions and report the minimum
    #[arg(long)]
    symmetric: bool,
    /// Also write the JSON report to this path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    leaves: usize,
    /// Canvas side length in pixels, a multiple of 4
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// 0 keeps leaves pairwise disjoint; up to 1 widens them into each other
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    /// Output directory for labels.png, boxes.csv, features.lmt
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraintoyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Fixed gradient-descent step size
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Where to save the trained parameter pack
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds per target
    #[arg(long, default_value_t = 4)]
    seeds: u64,
}

/// Parses `argv` and runs the selected command; returns the process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Assemble(args) => cmd_assemble(&args, &mut out),
        Command::Refine(args) => cmd_refine(&args, &mut out),
        Command::Bestdice(args) => cmd_bestdice(&args, &mut out),
        Command::Synth(args) => cmd_synth(&args, &mut out),
        Command::Traintoy(args) => cmd_traintoy(&args, &mut out),
        Command::Gradcheck(args) => cmd_gradcheck(&args, &mut out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_assemble(args: &AssembleArgs, out: &mut dyn IoWrite) -> Result<()> {
    let cfg = ToolConfig::load(args.config.as_deref())?.assembly()?;
    let boxes = read_boxes(&args.boxes)?;
    std::fs::create_dir_all(&args.out)?;
    if boxes.is_empty() {
        writeln!(out, "wrote 0 instances to {}", args.out.display())?;
        return Ok(());
    }
    let bases_records = read_lmt(&args.bases)?;
    match lookup(&bases_records, "bases", &args.bases)? {
        LmtTensor::F32(_) => assemble_typed::<f32>(args, &cfg, &bases_records, &boxes, out),
        LmtTensor::F64(_) => assemble_typed::<f64>(args, &cfg, &bases_records, &boxes, out),
    }
}

fn assemble_typed<T: LmtScalar>(
    args: &AssembleArgs,
    cfg: &masklab_core::assembly::AssemblyConfig,
    bases_records: &[NamedTensor],
    boxes: &[BoundingBox],
    out: &mut dyn IoWrite,
) -> Result<()> {
    let bases = typed_lookup::<T>(bases_records, "bases", &args.bases)?;
    let (kb, _, _) = bases.dims3()?;
    if kb != cfg.num_bases {
        return Err(CliError::input(format!(
            "K mismatch: bases record has K={kb}, config expects K={}",
            cfg.num_bases
        )));
    }
    let coeff_records = read_lmt(&args.coeffs)?;
    let coeffs = typed_lookup::<T>(&coeff_records, "coefficients", &args.coeffs)?;
    let (p, kc, rh, rw) = coeffs.dims4()?;
    if kc != cfg.num_bases {
        return Err(CliError::input(format!(
            "K mismatch: coefficients record has K={kc}, config expects K={}",
            cfg.num_bases
        )));
    }
    if rh != cfg.coeff_resolution || rw != cfg.coeff_resolution {
        return Err(CliError::input(format!(
            "coefficient resolution mismatch: record is {rh}x{rw}, config expects {r}x{r}",
            r = cfg.coeff_resolution
        )));
    }
    if p != boxes.len() {
        return Err(CliError::input(format!(
            "instance count mismatch: {p} coefficient stacks vs {} boxes",
            boxes.len()
        )));
    }

    let stride = kc * rh * rw;
    for (i, bbox) in boxes.iter().enumerate() {
        let slice = coeffs.data()[i * stride..(i + 1) * stride].to_vec();
        let coeff = Tensor::new(vec![kc, rh, rw], slice)?;
        let logits = assemble_instance(bases, &coeff, bbox, cfg)?;
        write_instance(&args.out, i, &logits)?;
    }
    writeln!(out, "wrote {} instances to {}", boxes.len(), args.out.display())?;
    Ok(())
}

fn write_instance<T: LmtScalar>(dir: &Path, index: usize, logits: &Tensor<T>) -> Result<()> {
    let pack = dir.join(format!("instance_{index:03}.lmt"));
    write_lmt(&pack, &[NamedTensor::new("logits", T::wrap(logits.clone()))])?;
    let mask = binarize(logits)?;
    let ids = mask.data().iter().map(|&b| u32::from(b)).collect();
    let labels = LabelImage::new(mask.width(), mask.height(), ids)?;
    write_labels(dir.join(format!("instance_{index:03}.png")), &labels)
}

fn cmd_refine(args: &RefineArgs, out: &mut dyn IoWrite) -> Result<()> {
    let cfg = ToolConfig::load(args.config.as_deref())?.refine()?;
    let coarse_records = read_lmt(&args.coarse)?;
    match lookup(&coarse_records, "logits", &args.coarse)? {
        LmtTensor::F32(_) => refine_typed::<f32>(args, &cfg, &coarse_records, out),
        LmtTensor::F64(_) => refine_typed::<f64>(args, &cfg, &coarse_records, out),
    }
}

fn refine_typed<T: LmtScalar>(
    args: &RefineArgs,
    cfg: &masklab_core::refine::RefineConfig,
    coarse_records: &[NamedTensor],
    out: &mut dyn IoWrite,
) -> Result<()> {
    let coarse = typed_lookup::<T>(coarse_records, "logits", &args.coarse)?;
    let feature_records = read_lmt(&args.features)?;
    let features = typed_lookup::<T>(&feature_records, "features", &args.features)?;
    let param_records = read_lmt(&args.params)?;
    let predictor: PointPredictor<T> = predictor_from_records(&param_records, &args.params)?;
    let (c, _, _) = features.dims3()?;
    if predictor.feature_channels() != c {
        return Err(CliError::input(format!(
            "feature channel mismatch: predictor expects {}, features record has {c}",
            predictor.feature_channels()
        )));
    }

    let refined = refine_mask(coarse, features, &predictor, cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let pack = args.out.join("refined.lmt");
    write_lmt(&pack, &[NamedTensor::new("logits", T::wrap(refined.clone()))])?;
    let mask = binarize(&refined)?;
    let ids = mask.data().iter().map(|&b| u32::from(b)).collect();
    let labels = LabelImage::new(mask.width(), mask.height(), ids)?;
    write_labels(args.out.join("refined.png"), &labels)?;
    let (h, w) = refined.dims2()?;
    writeln!(out, "refined to {h}x{w} in {}", args.out.display())?;
    Ok(())
}

#[derive(Serialize)]
struct MatchJson {
    gt_id: u32,
    best_pred_id: Option<u32>,
    dice: f64,
}

#[derive(Serialize)]
struct DirectionJson {
    score: f64,
    pred_instances: usize,
    gt_instances: usize,
    per_instance: Vec<MatchJson>,
}

#[derive(Serialize)]
struct ScoreJson {
    symmetric: bool,
    score: f64,
    forward: DirectionJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    reverse: Option<DirectionJson>,
}

fn direction_json(report: &BestDiceReport) -> DirectionJson {
    DirectionJson {
        score: report.score,
        pred_instances: report.pred_instances,
        gt_instances: report.gt_instances,
        per_instance: report
            .per_instance
            .iter()
            .map(|m| MatchJson {
                gt_id: m.gt_id,
                best_pred_id: m.best_pred_id,
                dice: m.dice,
            })
            .collect(),
    }
}

fn cmd_bestdice(args: &BestdiceArgs, out: &mut dyn IoWrite) -> Result<()> {
    let pred = read_labels(&args.pred)?;
    let gt = read_labels(&args.gt)?;
    let forward = best_dice(&pred, &gt)?;
    let json = if args.symmetric {
        let reverse = best_dice(&gt, &pred)?;
        let score = forward.score.min(reverse.score);
        writeln!(out, "SymmetricBestDice {score:.2}")?;
        ScoreJson {
            symmetric: true,
            score,
            forward: direction_json(&forward),
            reverse: Some(direction_json(&reverse)),
        }
    } else {
        writeln!(out, "BestDice {:.2}", forward.score)?;
        ScoreJson {
            symmetric: false,
            score: forward.score,
            forward: direction_json(&forward),
            reverse: None,
        }
    };
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| CliError::runtime(format!("report serialization: {e}")))?;
    writeln!(out, "{text}")?;
    if let Some(path) = &args.report {
        std::fs::write(path, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn IoWrite) -> Result<()> {
    let scene = generate(&SynthParams {
        seed: args.seed,
        leaves: args.leaves,
        size: args.size,
        overlap: args.overlap,
    })?;
    std::fs::create_dir_all(&args.out)?;
    write_labels(args.out.join("labels.png"), &scene.labels)?;
    write_boxes(args.out.join("boxes.csv"), &scene.boxes)?;
    write_lmt(
        args.out.join("features.lmt"),
        &[NamedTensor::new("features", scene.features.clone())],
    )?;
    writeln!(
        out,
        "scene seed {}: {} boxes, {} contested pixels",
        args.seed,
        scene.boxes.len(),
        scene.contested_pixels
    )?;
    Ok(())
}

fn gradcheck_pass(seeds: &[u64], out: &mut dyn IoWrite, verbose: bool) -> Result<()> {
    let reports = masklab_core::gradcheck::run_all(seeds)?;
    let mut worst = 0.0f64;
    for r in &reports {
        worst = worst.max(r.max_rel_err);
        if verbose {
            writeln!(out, "{}: max rel err {:.3e} over {} coords", r.name, r.max_rel_err, r.coords)?;
        }
    }
    if worst >= masklab_core::gradcheck::GRADCHECK_TOL {
        return Err(CliError::runtime(format!(
            "gradient check failed: worst relative error {worst:.3e}"
        )));
    }
    writeln!(
        out,
        "gradient check: {} targets x {} seeds, max relative error {worst:.3e}",
        reports.len(),
        seeds.len()
    )?;
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn IoWrite) -> Result<()> {
    if args.seeds == 0 || args.seeds > 1000 {
        return Err(CliError::input(format!(
            "seeds must be 1..=1000, got {}",
            args.seeds
        )));
    }
    let seeds: Vec<u64> = (0..args.seeds).collect();
    gradcheck_pass(&seeds, out, true)
}

fn cmd_traintoy(args: &TraintoyArgs, out: &mut dyn IoWrite) -> Result<()> {
    gradcheck_pass(&[0, 1], out, false)?;
    train::run(
        &TrainConfig {
            seed: args.seed,
            iters: args.iters,
            lr: args.lr,
            out: args.out.clone(),
        },
        out,
    )?;
    Ok(())
}
