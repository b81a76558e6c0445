//! `siamtrack` command line: synthetic data, training, tracking,
//! evaluation, gradient checks and timing.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use siamtrack::config::{Config, Precision};
use siamtrack::data::{load_tracklets, write_tracklets, Split, Tracklet, DATA_ROOT_ENV};
use siamtrack::experiment::{bench, samples_from, toy_data};
use siamtrack::metrics::{EvalReport, FrameRecord};
use siamtrack::model::{Model, StageTimings};
use siamtrack::numeric::Scalar;
use siamtrack::tracker::{one_pass_eval, track_all, ConstantPredictor, ModelPredictor, OraclePredictor, Predictor};
use siamtrack::train::{train, TrainOptions};
use siamtrack::{gradsuite, Error};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "siamtrack", version, about = "Single object tracking on LiDAR point clouds")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Object category; overrides the configuration.
    #[arg(long, global = true)]
    category: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic car tracklets in the KITTI tracking layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        tracklets: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
    /// Train on a dataset; writes a checkpoint, the config and a loss curve.
    Train {
        /// Dataset root; defaults to $SIAMTRACK_DATA_ROOT.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every tracklet of a split; writes one JSON record per frame.
    Track {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add per-stage timings to each record.
        #[arg(long)]
        record_timing: bool,
    },
    /// Success and Precision from a result file, or end to end on a split.
    Eval {
        /// Result file written by `track`.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
        predictor: PredictorKind,
        /// Also write the reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print IoU and distance of every scored frame.
        #[arg(long)]
        per_frame: bool,
    },
    /// Finite-difference check of every differentiable operation and the loss.
    Gradcheck {
        /// Parameter entries probed per tensor.
        #[arg(long, default_value_t = 8)]
        entries: usize,
    },
    /// Per-stage forward timings at the configured sizes, 32-bit.
    Bench {
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorKind {
    Model,
    Constant,
    Oracle,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::UnknownConfigKeys(_) => USAGE,
            _ => DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<u8> {
    let seed = cli.seed;
    let config = |fallback: Option<PathBuf>, default: Config| -> CliResult<Config> {
        let mut c = match cli.config.clone().or(fallback.filter(|p| p.is_file())) {
            Some(p) => Config::load(&p)?,
            None => default,
        };
        if let Some(cat) = &cli.category {
            c.category = cat.clone();
        }
        c.validate()?;
        Ok(c)
    };
    match cli.command {
        Command::Synth { out, tracklets, frames } => {
            let data = toy_data(tracklets, 0, frames, seed)?;
            write_tracklets(&out, &data.train)?;
            println!("wrote {} tracklets of {} frames to {}", tracklets, frames, out.display());
        }
        Command::Train { data, split, out } => {
            let cfg = config(None, Config::default())?;
            let tracklets = load(data, &split, &cfg.category)?;
            match cfg.precision {
                Precision::F32 => train_at::<f32>(&cfg, &tracklets, seed, &out)?,
                Precision::F64 => train_at::<f64>(&cfg, &tracklets, seed, &out)?,
            }
        }
        Command::Track {
            data,
            split,
            checkpoint,
            out,
            record_timing,
        } => {
            let cfg = config(sibling_config(&checkpoint), Config::default())?;
            let tracklets = load(data, &split, &cfg.category)?;
            let records = match cfg.precision {
                Precision::F32 => {
                    let m: Model<f32> = Model::load(&cfg, &checkpoint)?;
                    track_all(&mut ModelPredictor::new(&m, record_timing), &tracklets, seed)?
                }
                Precision::F64 => {
                    let m: Model<f64> = Model::load(&cfg, &checkpoint)?;
                    track_all(&mut ModelPredictor::new(&m, record_timing), &tracklets, seed)?
                }
            };
            write_jsonl(&out, &records)?;
            for r in EvalReport::by_category(&records)? {
                println!("{}", r.summary_line());
            }
        }
        Command::Eval {
            results,
            data,
            split,
            checkpoint,
            predictor,
            out,
            per_frame,
        } => {
            let reports = match results {
                Some(path) => EvalReport::by_category(&read_records(&path)?)?,
                None => {
                    let fallback = checkpoint.as_deref().and_then(sibling_config);
                    let cfg = config(fallback, Config::default())?;
                    let tracklets = load(data, &split, &cfg.category)?;
                    evaluate(&cfg, &tracklets, predictor, checkpoint.as_deref(), seed)?
                }
            };
            for r in &reports {
                println!("{}", r.summary_line());
                if per_frame {
                    print!("{}", r.per_frame_table());
                }
            }
            if let Some(out) = out {
                write_json(&out, &reports)?;
            }
        }
        Command::Gradcheck { entries } => {
            let results = gradsuite::run(seed, entries)?;
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.report.passed()).count();
            println!("{} checks, {} failed", results.len(), failed);
            if failed > 0 {
                return Ok(CHECK);
            }
        }
        Command::Bench { repeats, out } => {
            if repeats == 0 {
                return Err(usage("--repeats must be positive"));
            }
            let cfg = config(None, Config::published())?;
            let timings = bench(&cfg, repeats, seed)?;
            println!("run\tbackbone_ms\tcorrelation_ms\thead_ms\ttotal_ms");
            for (i, t) in timings.iter().enumerate() {
                println!("{}", timing_row(&i.to_string(), t));
            }
            println!("{}", timing_row("mean", &mean_timings(&timings)));
            if let Some(out) = out {
                write_json(&out, &timings)?;
            }
        }
    }
    Ok(0)
}

fn timing_row(label: &str, t: &StageTimings) -> String {
    format!(
        "{label}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
        t.backbone_ms,
        t.correlation_ms,
        t.head_ms,
        t.total_ms()
    )
}

fn mean_timings(ts: &[StageTimings]) -> StageTimings {
    let n = ts.len() as f64;
    StageTimings {
        backbone_ms: ts.iter().map(|t| t.backbone_ms).sum::<f64>() / n,
        correlation_ms: ts.iter().map(|t| t.correlation_ms).sum::<f64>() / n,
        head_ms: ts.iter().map(|t| t.head_ms).sum::<f64>() / n,
    }
}

fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join("config.toml"))
}

fn load(data: Option<PathBuf>, split: &str, category: &str) -> CliResult<Vec<Tracklet>> {
    let root = data
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| usage(format!("no dataset: pass --data or set {DATA_ROOT_ENV}")))?;
    let split = Split::parse(split)?;
    let tracklets = load_tracklets(&root, split, category)?;
    if tracklets.is_empty() {
        return Err(Failure {
            code: DATA,
            message: format!("{}: no {category} tracklets in split {split:?}", root.display()),
        });
    }
    Ok(tracklets)
}

fn train_at<T: Scalar>(cfg: &Config, tracklets: &[Tracklet], seed: u64, out: &Path) -> CliResult<()> {
    let samples = samples_from(tracklets, cfg, seed)?;
    let mut model: Model<T> = Model::new(cfg, seed)?;
    let opts = TrainOptions::from_config(cfg, seed);
    eprintln!("training on {} samples for {} steps", samples.len(), opts.steps);
    let outcome = train(&mut model, &samples, &opts, |step, loss| {
        if (step + 1) % 100 == 0 {
            eprintln!("step {:>6}  loss {loss:.5}", step + 1);
        }
    })?;
    create_dir(out)?;
    model.save(&out.join("model.skpt"))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    #[derive(Serialize)]
    struct Point {
        step: usize,
        loss: f64,
    }
    let curve: Vec<Point> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| Point { step, loss })
        .collect();
    write_jsonl(&out.join("loss.jsonl"), &curve)?;
    if outcome.skipped > 0 {
        eprintln!("{} samples had targets outside the grid", outcome.skipped);
    }
    println!("checkpoint written to {}", out.join("model.skpt").display());
    Ok(())
}

fn evaluate(
    cfg: &Config,
    tracklets: &[Tracklet],
    kind: PredictorKind,
    checkpoint: Option<&Path>,
    seed: u64,
) -> CliResult<Vec<EvalReport>> {
    let run = |p: &mut dyn Predictor| one_pass_eval(p, tracklets, seed);
    let reports = match kind {
        PredictorKind::Oracle => run(&mut OraclePredictor)?,
        PredictorKind::Constant => run(&mut ConstantPredictor::default())?,
        PredictorKind::Model => {
            let path = checkpoint.ok_or_else(|| usage("--checkpoint is required for the model predictor"))?;
            match cfg.precision {
                Precision::F32 => run(&mut ModelPredictor::new(&Model::<f32>::load(cfg, path)?, false))?,
                Precision::F64 => run(&mut ModelPredictor::new(&Model::<f64>::load(cfg, path)?, false))?,
            }
        }
    };
    Ok(reports)
}

fn io_error(path: &Path, source: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::Serde(e.to_string())))?;
    write_text(path, &(text + "\n"))
}

/// One JSON document per line.
fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> CliResult<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Failure::from(Error::Serde(e.to_string())))?;
        w.write_all(b"\n").map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn read_records(path: &Path) -> CliResult<Vec<FrameRecord>> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| {
            Failure::from(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })?;
        out.push(r);
    }
    Ok(out)
}
