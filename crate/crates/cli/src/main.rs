mod render;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use hierkit_core::annotation::{self, GroundTruthSet, Level, RasterGrid};
use hierkit_core::container::{self, LoadError, ManifestImage};
use hierkit_core::decoder::{self, DecodeParams, ImagePredictions, PredictionFile};
use hierkit_core::geometry::SoftMask;
use hierkit_core::losses::{self, Balancing, GradCheckOptions, GradCheckReport, LossBreakdown, LossConfig, LossParts};
use hierkit_core::matching::{self, PredictionSlot};
use hierkit_core::metrics::{self, EvalOptions, Resolution};

/// Nearest-neighbour factor from model output to image resolution.
const UPSAMPLE_FACTOR: usize = 4;

#[derive(Parser)]
#[command(name = "hierkit", version, about = "Hierarchical text detection and layout analysis toolkit")]
struct Cli {
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true, env = "HIERKIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a ground-truth file and list every violation.
    Validate { gt: PathBuf },
    /// Dataset statistics as JSON plus a one-line summary.
    Stats {
        gt: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Decode detection tensors into prediction JSON.
    Decode {
        manifest: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        params: DecodeArgs,
        /// Upsample masks x4 to image resolution before writing.
        #[arg(long)]
        upsample: bool,
    },
    /// Score predictions against ground truth with panoptic quality.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "line")]
        level: Level,
        /// Score illegible entities instead of treating them as don't-care.
        #[arg(long)]
        include_illegible: bool,
        /// Rasterize ground truth at 1/FACTOR resolution.
        #[arg(long, value_name = "FACTOR")]
        downsample: Option<usize>,
    },
    /// Match queries to ground truth and report the training losses.
    Loss {
        #[command(flatten)]
        inputs: LossInputs,
        #[command(flatten)]
        cfg: LossArgs,
        /// Externally computed segmentation loss.
        #[arg(long, default_value_t = 0.0)]
        l_seg: f64,
        /// Externally computed instance loss.
        #[arg(long, default_value_t = 0.0)]
        l_ins: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare analytic loss gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        inputs: LossInputs,
        #[command(flatten)]
        cfg: LossArgs,
        /// Write the per-image reports as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Overlay predicted masks on an image, colored by cluster.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Defaults to the image file stem.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        opacity: f64,
    },
}

#[derive(Args)]
struct DecodeArgs {
    /// Mask probability threshold.
    #[arg(long, default_value_t = 0.4)]
    tm: f64,
    /// Textness threshold.
    #[arg(long, default_value_t = 0.5)]
    tc: f64,
    /// Affinity threshold for paragraph linking.
    #[arg(long, default_value_t = 0.5)]
    ta: f64,
    #[arg(long, default_value_t = 32)]
    min_pixels: usize,
}

#[derive(Args)]
struct LossInputs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Entity granularity of the targets.
    #[arg(long, default_value = "line")]
    level: Level,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, default_value = "alpha")]
    balancing: Balancing,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha_l: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Loss weights for detection, layout, segmentation and instance terms.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [3.0, 1.0, 1.0, 1.0])]
    lambdas: Vec<f64>,
    /// Leave self-pairs out of the layout loss.
    #[arg(long)]
    exclude_diagonal: bool,
}

impl LossArgs {
    fn config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            alpha_l: self.alpha_l,
            balancing: self.balancing,
            focal_gamma: self.gamma,
            lambdas: [self.lambdas[0], self.lambdas[1], self.lambdas[2], self.lambdas[3]],
            include_diagonal: !self.exclude_diagonal,
        }
    }
}

/// Failure classes with stable exit codes.
enum Failure {
    /// Invalid content or a failed check: exit 1.
    Domain(anyhow::Error),
    /// Unreadable input, unwritable output or bad arguments: exit 2.
    Usage(anyhow::Error),
}

type CmdResult<T = ()> = Result<T, Failure>;

fn domain(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Domain(e.into())
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Validate { gt } => cmd_validate(&gt),
        Command::Stats { gt, output } => cmd_stats(&gt, output.as_deref()),
        Command::Decode {
            manifest,
            output,
            params,
            upsample,
        } => cmd_decode(&manifest, &params, upsample, output.as_deref()),
        Command::Evaluate {
            gt,
            predictions,
            level,
            include_illegible,
            downsample,
        } => {
            let resolution = match downsample {
                Some(0) => return Err(usage(anyhow!("--downsample must be at least 1"))),
                Some(f) => Resolution::Downsampled(f),
                None => Resolution::Full,
            };
            let opts = EvalOptions {
                include_illegible,
                resolution,
            };
            cmd_evaluate(&gt, &predictions, level, &opts)
        }
        Command::Loss {
            inputs,
            cfg,
            l_seg,
            l_ins,
            output,
        } => cmd_loss(&inputs, &cfg.config(), l_seg, l_ins, output.as_deref()),
        Command::GradCheck { inputs, cfg, output } => cmd_grad_check(&inputs, &cfg.config(), output.as_deref()),
        Command::Render {
            image,
            predictions,
            output,
            image_id,
            opacity,
        } => cmd_render(&image, &predictions, &output, image_id, opacity),
    }
}

fn read(path: &Path) -> CmdResult<Vec<u8>> {
    fs::read(path).map_err(|e| usage(anyhow!("{}: {e}", path.display())))
}

/// Writes to `path`, or stdout when absent, with a trailing newline.
fn emit(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => fs::write(p, format!("{text}\n")).map_err(|e| usage(anyhow!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(usage)
        }
    }
}

fn load_gt(path: &Path) -> CmdResult<GroundTruthSet> {
    let bytes = read(path)?;
    annotation::parse_ground_truth(&bytes).map_err(|e| {
        let diags = e.diagnostics();
        domain(anyhow!("{}: {}", path.display(), diags.join("; ")))
    })
}

fn load_manifest(path: &Path) -> CmdResult<Vec<ManifestImage>> {
    container::load_manifest(path).map_err(|e: LoadError| if e.is_io() { usage(e) } else { domain(e) })
}

fn load_predictions(path: &Path) -> CmdResult<PredictionFile> {
    let bytes = read(path)?;
    PredictionFile::from_json(&bytes).map_err(|e| domain(anyhow!("{}: {e}", path.display())))
}

fn cmd_validate(path: &Path) -> CmdResult {
    let bytes = read(path)?;
    match annotation::parse_ground_truth(&bytes) {
        Ok(_) => {
            println!("0 errors");
            Ok(())
        }
        Err(e) => {
            let diags = e.diagnostics();
            for d in &diags {
                println!("{d}");
            }
            let noun = if diags.len() == 1 { "error" } else { "errors" };
            Err(domain(anyhow!("{}: {} {noun}", path.display(), diags.len())))
        }
    }
}

fn cmd_stats(path: &Path, output: Option<&Path>) -> CmdResult {
    let gt = load_gt(path)?;
    let report = annotation::dataset_stats(&gt);
    let json = serde_json::to_string(&report).map_err(domain)?;
    emit(output, &json)?;
    if output.is_some() {
        println!("{}", report.summary());
    } else {
        eprintln!("{}", report.summary());
    }
    Ok(())
}

fn cmd_decode(manifest: &Path, args: &DecodeArgs, upsample: bool, output: Option<&Path>) -> CmdResult {
    let params = DecodeParams {
        t_m: args.tm,
        t_c: args.tc,
        t_a: args.ta,
        min_pixels: args.min_pixels,
    };
    params.validate().map_err(usage)?;
    let images = load_manifest(manifest)?;
    let predictions = images
        .par_iter()
        .map(|img| {
            let mut entities = decoder::decode(&img.tensors, &params)
                .map_err(|e| domain(anyhow!("image {}: {e}", img.image_id)))?;
            if upsample {
                entities = entities.upsampled(UPSAMPLE_FACTOR, img.image_size);
            }
            Ok(ImagePredictions {
                image_id: img.image_id.clone(),
                entities,
            })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let mut file = PredictionFile { predictions };
    file.canonicalize();
    emit(output, &file.to_json())
}

fn cmd_evaluate(gt: &Path, predictions: &Path, level: Level, opts: &EvalOptions) -> CmdResult {
    let gt = load_gt(gt)?;
    let preds = load_predictions(predictions)?;
    let report = metrics::evaluate_dataset(&preds, &gt, level, opts).map_err(domain)?;
    emit(None, &report.to_json())
}

/// One manifest image paired with its matched targets.
struct LossInstance {
    image_id: String,
    preds: Vec<PredictionSlot>,
    targets: Vec<matching::TargetSlot>,
    sigma: matching::Assignment,
    affinity: Vec<f64>,
}

fn loss_instances(inputs: &LossInputs) -> CmdResult<Vec<LossInstance>> {
    let gt = load_gt(&inputs.gt)?;
    let images = load_manifest(&inputs.manifest)?;
    images
        .par_iter()
        .map(|img| {
            let ctx = |e: anyhow::Error| domain(anyhow!("image {}: {e:#}", img.image_id));
            let a = gt
                .get(&img.image_id)
                .ok_or_else(|| domain(anyhow!("image {} is not in the ground truth", img.image_id)))?;
            let t = &img.tensors;
            let (w, h) = t.dims();
            let real = matching::targets_from_annotation(a, inputs.level, RasterGrid::for_output(a, w, h))
                .map_err(|e| ctx(e.into()))?;
            let targets = matching::pad_targets(real, t.n(), w, h).map_err(|e| ctx(e.into()))?;
            let preds = (0..t.n())
                .map(|i| {
                    let mask = SoftMask::new(w, h, t.mask(i).to_vec())?;
                    Ok(PredictionSlot::new(mask, t.textness()[i])?)
                })
                .collect::<anyhow::Result<Vec<_>>>()
                .map_err(ctx)?;
            let sigma = matching::match_slots(&preds, &targets).map_err(|e| ctx(e.into()))?;
            let affinity = t.affinity().map_err(|e| ctx(e.into()))?;
            Ok(LossInstance {
                image_id: img.image_id.clone(),
                preds,
                targets,
                sigma,
                affinity,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ImageLoss {
    image_id: String,
    sigma: Vec<usize>,
    #[serde(flatten)]
    losses: LossBreakdown,
}

#[derive(Serialize)]
struct LossReport {
    images: Vec<ImageLoss>,
    mean: LossBreakdown,
}

fn cmd_loss(inputs: &LossInputs, cfg: &LossConfig, l_seg: f64, l_ins: f64, output: Option<&Path>) -> CmdResult {
    cfg.validate().map_err(usage)?;
    let instances = loss_instances(inputs)?;
    let images = instances
        .iter()
        .map(|inst| {
            let ctx = |e: losses::LossError| domain(anyhow!("image {}: {e}", inst.image_id));
            let l_det = losses::detection_loss(&inst.preds, &inst.targets, &inst.sigma, cfg).map_err(ctx)?;
            let l_lay = losses::layout_loss(&inst.affinity, &inst.targets, &inst.sigma, cfg).map_err(ctx)?;
            let parts = LossParts {
                l_det,
                l_lay,
                l_seg,
                l_ins,
            };
            Ok(ImageLoss {
                image_id: inst.image_id.clone(),
                sigma: inst.sigma.sigma.clone(),
                losses: losses::total_loss(parts, cfg).map_err(ctx)?,
            })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let count = images.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| images.iter().map(|i| f(&i.losses)).sum::<f64>() / count;
    let mean = LossBreakdown {
        l_det: sum(|l| l.l_det),
        l_lay: sum(|l| l.l_lay),
        l_seg: sum(|l| l.l_seg),
        l_ins: sum(|l| l.l_ins),
        total: sum(|l| l.total),
    };
    let json = serde_json::to_string(&LossReport { images, mean }).map_err(domain)?;
    emit(output, &json)
}

#[derive(Serialize)]
struct ImageGradCheck {
    image_id: String,
    reports: Vec<GradCheckReport>,
}

fn cmd_grad_check(inputs: &LossInputs, cfg: &LossConfig, output: Option<&Path>) -> CmdResult {
    cfg.validate().map_err(usage)?;
    let opts = GradCheckOptions::default();
    let instances = loss_instances(inputs)?;
    let results = instances
        .par_iter()
        .map(|inst| {
            let ctx = |e: losses::LossError| domain(anyhow!("image {}: {e}", inst.image_id));
            let det = losses::grad_check_detection(&inst.preds, &inst.targets, &inst.sigma, cfg, &opts).map_err(ctx)?;
            let lay = losses::grad_check_layout(&inst.affinity, &inst.targets, &inst.sigma, cfg, &opts).map_err(ctx)?;
            Ok(ImageGradCheck {
                image_id: inst.image_id.clone(),
                reports: vec![det, lay],
            })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let mut worst = 0.0f64;
    for r in &results {
        for rep in &r.reports {
            println!(
                "{} {}: max rel err {:.3e} at {} ({} checked)",
                r.image_id, rep.loss, rep.max_rel_error, rep.worst, rep.checked
            );
            worst = worst.max(rep.max_rel_error);
        }
    }
    if let Some(path) = output {
        emit(Some(path), &serde_json::to_string(&results).map_err(domain)?)?;
    }
    if worst < opts.tolerance {
        println!("PASS (max rel err < {:.0e})", opts.tolerance);
        Ok(())
    } else {
        println!("FAIL (max rel err {worst:.3e} >= {:.0e})", opts.tolerance);
        Err(domain(anyhow!("gradient check failed")))
    }
}

fn cmd_render(image: &Path, predictions: &Path, output: &Path, image_id: Option<String>, opacity: f64) -> CmdResult {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(usage(anyhow!("--opacity must lie in [0, 1]")));
    }
    let preds = load_predictions(predictions)?;
    let id = image_id.unwrap_or_else(|| image.file_stem().unwrap_or_default().to_string_lossy().into_owned());
    let entry = preds
        .predictions
        .iter()
        .find(|p| p.image_id == id)
        .ok_or_else(|| domain(anyhow!("no predictions for image `{id}` in {}", predictions.display())))?;
    let bytes = read(image)?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| domain(anyhow!("{}: {e}", image.display())))?;
    if entry.entities.entities.is_empty() {
        return fs::write(output, &bytes).map_err(|e| usage(anyhow!("{}: {e}", output.display())));
    }
    let mut rgba = decoded.to_rgba8();
    render::overlay(&mut rgba, &entry.entities.entities, opacity);
    rgba.save_with_format(output, image::ImageFormat::Png)
        .map_err(|e| usage(anyhow!("{}: {e}", output.display())))
}
