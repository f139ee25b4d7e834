use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdk_core::cost::{analyze, sram_check, AnalyzeOptions};
use cdk_core::energy::{energy_report, fps_from_count, parse_trace_file, DEFAULT_THRESHOLD_W};
use cdk_core::harness::{
    dataset_recall, detect, format_detections, gen_dataset, load_dataset, read_image, train, write_log, TrainConfig,
    DEFAULT_NMS_IOU, DEFAULT_TOP_N,
};
use cdk_core::network::{bundled, init_weights, load_weights, save_weights, ModelSpec, WeightStore};
use cdk_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cdk", version, about = "ConvDet detection toolkit: data, training, detection, cost and energy analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of colored rectangles.
    GenData(GenDataArgs),
    /// Write freshly initialized (or all-zero) weights for a spec.
    Init(InitArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Detect objects in one image.
    Detect(DetectArgs),
    /// Static cost report for a spec.
    Analyze(AnalyzeArgs),
    /// Energy per frame from a power trace.
    Energy(EnergyArgs),
    /// Recall against the number of kept boxes over a dataset.
    RecallSweep(RecallArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Args)]
struct SpecArg {
    /// Spec file, or the name of a bundled spec (squeezedet, squeezedet_plus, toy).
    #[arg(long, default_value = "toy")]
    spec: String,
}

impl SpecArg {
    fn load(&self) -> Result<ModelSpec> {
        match bundled::by_name(&self.spec) {
            Some(text) if !Path::new(&self.spec).exists() => ModelSpec::parse(text),
            _ => ModelSpec::from_file(&self.spec),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 384)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    spec: SpecArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// All parameters zero instead of random.
    #[arg(long)]
    zero: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArg,
    #[arg(long)]
    data: PathBuf,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start from these weights instead of a seeded initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr0: f64,
    #[arg(long, default_value_t = 0.5)]
    decay_factor: f64,
    #[arg(long, default_value_t = 10_000)]
    decay_step: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Gradient L2-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    max_grad_norm: f64,
    /// Random horizontal flips.
    #[arg(long)]
    flip: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    spec: SpecArg,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Defaults to the image file stem.
    #[arg(long)]
    image_id: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top_n: usize,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    spec: SpecArg,
    /// Input resolution WxH; defaults to the spec's.
    #[arg(long)]
    input: Option<String>,
    #[arg(long, default_value_t = 1)]
    batch: u64,
    /// Store pooled outputs for a conv followed by a max-pool.
    #[arg(long)]
    fuse: bool,
    #[arg(long, default_value_t = 2)]
    flops_per_mac: u64,
    #[arg(long, default_value_t = 16.0)]
    sram_mb: f64,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct EnergyArgs {
    /// CSV with rows `t_s,power_w`.
    trace: PathBuf,
    #[arg(long, conflicts_with_all = ["frames", "seconds"])]
    fps: Option<f64>,
    #[arg(long, requires = "seconds")]
    frames: Option<u64>,
    #[arg(long, requires = "frames")]
    seconds: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_W)]
    threshold: f64,
    /// Let dips of up to 2 samples below threshold stay inside the working period.
    #[arg(long)]
    hysteresis: bool,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct RecallArgs {
    #[command(flatten)]
    spec: SpecArg,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Ascending comma-separated box counts; `all` means every anchor.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256,512,1024,all")]
    n_values: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("resolution must look like 1242x375, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let files = gen_dataset(&a.out, a.n, a.height, a.width, a.seed)?;
            eprintln!("wrote {} images to {}", files.len(), a.out.display());
            Ok(())
        }
        Command::Init(a) => {
            let model = a.spec.load()?;
            let store = if a.zero {
                WeightStore::zeros(&model)
            } else {
                init_weights(&model, a.seed)
            };
            save_weights(&store, &a.out)
        }
        Command::Train(a) => {
            let model = a.spec.load()?;
            let data = load_dataset(&a.data, &model.detector.class_names)?;
            let init = a.init.as_ref().map(|p| load_weights(&model, p)).transpose()?;
            let config = TrainConfig {
                seed: a.seed,
                batch_size: a.batch,
                max_steps: a.steps,
                lr0: a.lr0,
                decay_factor: a.decay_factor,
                decay_step: a.decay_step,
                momentum: a.momentum,
                loss_weights: model.loss,
                flip: a.flip,
                max_grad_norm: (a.max_grad_norm > 0.0).then_some(a.max_grad_norm),
            };
            let every = (a.steps / 20).max(1);
            let outcome = train(&model, &data, &config, init, |row| {
                if !a.quiet && (row.step % every == 0 || row.step + 1 == a.steps) {
                    eprintln!("step {:>6}  lr {:.5}  loss {:.6}", row.step, row.lr, row.loss.total);
                }
            })?;
            save_weights(&outcome.weights, &a.out)?;
            if let Some(path) = &a.log {
                let mut buf = Vec::new();
                write_log(&outcome.log, &mut buf).expect("in-memory write");
                fs::write(path, buf).map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        }
        Command::Detect(a) => {
            let model = a.spec.load()?;
            let weights = load_weights(&model, &a.weights)?;
            let image = read_image(&a.image)?;
            let dets = detect(&model, &weights, &image, a.top_n, a.nms_iou)?;
            let id = a.image_id.clone().unwrap_or_else(|| {
                a.image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            write_output(a.out.as_deref(), &format_detections(&id, &dets, &model.detector.class_names))
        }
        Command::Analyze(a) => {
            let model = a.spec.load()?;
            let (w, h) = match &a.input {
                Some(s) => parse_resolution(s)?,
                None => (model.input.w, model.input.h),
            };
            let opts = AnalyzeOptions {
                batch: a.batch,
                fuse_conv_pool: a.fuse,
                flops_per_mac: a.flops_per_mac,
            };
            let report = analyze(&model, h, w, &opts)?;
            let verdict = sram_check(&report, a.sram_mb);
            let text = match a.format {
                Format::Text => format!("{}{}", report.to_table(), verdict.to_text()),
                Format::Json => {
                    let v = serde_json::json!({ "report": report, "sram": verdict });
                    format!("{}\n", serde_json::to_string_pretty(&v)?)
                }
            };
            write_output(None, &text)
        }
        Command::Energy(a) => {
            let fps = match (a.fps, a.frames, a.seconds) {
                (Some(f), _, _) => f,
                (None, Some(n), Some(s)) => fps_from_count(n, s)?,
                _ => return Err(Error::InvalidArgument("give --fps or both --frames and --seconds".into())),
            };
            let trace = parse_trace_file(&a.trace)?;
            let report = energy_report(&trace, a.threshold, if a.hysteresis { 2 } else { 0 }, fps)?;
            let text = match a.format {
                Format::Text => report.to_text(),
                Format::Json => format!("{}\n", report.to_json()),
            };
            write_output(None, &text)
        }
        Command::RecallSweep(a) => {
            let model = a.spec.load()?;
            let weights = load_weights(&model, &a.weights)?;
            let data = load_dataset(&a.data, &model.detector.class_names)?;
            let [_, _, h, w] = data[0].image.dims4()?;
            let (gw, gh) = model.grid_size(h, w)?;
            let all = gw * gh * model.detector.k();
            let n_values = a
                .n_values
                .iter()
                .map(|s| match s.trim() {
                    "all" => Ok(all),
                    v => v
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad n value {v:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let curve = dataset_recall(&model, &weights, &data, &n_values, a.iou)?;
            write_output(a.out.as_deref(), &curve.to_csv())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
