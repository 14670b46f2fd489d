//! `startstop`: generate synthetic sessions, calibrate the onset and offset
//! decoders, replay streams frame by frame and summarize the logs.
//!
//! Typed failures exit with status 1 and print `{"error": {"code", "message"}}`
//! on stderr.

mod analyze;
mod files;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use startstop_core::config::ExperimentConfig;
use startstop_core::formats::{self, FileHeader, StreamSidecar, BUNDLE_KIND, SIDECAR_KIND};
use startstop_core::pipeline::{self, ModelBundle};
use startstop_core::synth::{self, BrainPhase};
use startstop_core::{DecoderId, Error};

#[derive(Parser)]
#[command(name = "startstop", version, about = "Start/stop motor-imagery decoding experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` config file; keys it leaves out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to the matching `paths.*` key.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Recentering reference: identity, task or fixation.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Extra config override, applied last. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print every config key with its default value.
    Defaults,
    /// Generate a synthetic session as `<name>.eegs` plus `<name>.truth.json`.
    Synth {
        #[arg(long, default_value = "session")]
        name: String,
        /// Session drift strength.
        #[arg(long)]
        drift: Option<f64>,
        #[arg(long)]
        drift_seed: Option<u64>,
        /// Keep only one class: every task phase carries this phase's gains.
        #[arg(long, value_name = "PHASE")]
        positive_only: Option<String>,
    },
    /// Fit both decoders on labeled sessions and write a model bundle.
    Calibrate {
        #[arg(required = true)]
        streams: Vec<PathBuf>,
        #[arg(long, default_value = "model.json")]
        output: String,
    },
    /// Replay streams through a model and write a session log.
    Replay {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        streams: Vec<PathBuf>,
        /// Defaults to `log_<mode>.json`.
        #[arg(long)]
        output: Option<String>,
    },
    /// Write run metrics, per-run AUC, bias, spectrogram and paired-test reports.
    Analyze {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Spectrogram channels (indices); all channels if omitted.
        #[arg(long = "channel")]
        channels: Vec<usize>,
    },
}

/// A failure with a stable code for the error report.
#[derive(Debug)]
pub struct Failure {
    code: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: e.code(), message: e.to_string() }
    }
}

impl Failure {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

fn resolve_config(g: &Global) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
        cfg.apply(&text)?;
    }
    if let Some(seed) = g.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(mode) = &g.mode {
        cfg.set("replay.mode", mode)?;
    }
    for kv in &g.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::new("argument", format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn out_dir(g: &Global, fallback: &str) -> CliResult<PathBuf> {
    let dir = g.out_dir.clone().unwrap_or_else(|| PathBuf::from(fallback));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Writes to stdout, ignoring a reader that went away.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(value: &serde_json::Value) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("summary serializes")));
}

fn cmd_synth(
    cfg: &ExperimentConfig,
    dir: &Path,
    name: &str,
    drift: Option<f64>,
    drift_seed: Option<u64>,
    positive_only: Option<&str>,
) -> CliResult<()> {
    let mut spec = cfg.synth.clone();
    if let Some(d) = drift {
        spec.drift_strength = d;
    }
    if let Some(s) = drift_seed {
        spec.drift_seed = s;
    }
    if let Some(p) = positive_only {
        spec = spec.positive_only(BrainPhase::parse(p)?);
    }
    let (rec, truth) = synth::generate_session(&spec)?;
    let stream_path = dir.join(format!("{name}.eegs"));
    let sidecar_path = files::sidecar_path(&stream_path);
    formats::write_stream(&stream_path, &rec)?;
    let sidecar = StreamSidecar {
        header: FileHeader::new(SIDECAR_KIND, &cfg.hash(), &rec.channel_names),
        stream: format!("{name}.eegs"),
        fs: rec.fs,
        n_frames: rec.n_frames(),
        ground_truth: truth,
        spec: Some(spec.clone()),
    };
    formats::write_json(&sidecar_path, &sidecar)?;
    let bytes = std::fs::metadata(&stream_path).map(|m| m.len()).unwrap_or(0);
    print_json(&json!({
        "stream": stream_path.display().to_string(),
        "sidecar": sidecar_path.display().to_string(),
        "fs": rec.fs,
        "channels": rec.channels(),
        "n_frames": rec.n_frames(),
        "duration_s": rec.n_frames() as f64 / rec.fs,
        "n_trials": spec.n_trials,
        "n_runs": spec.n_runs(),
        "bytes": bytes,
        "config_hash": cfg.hash(),
    }));
    Ok(())
}

fn cmd_calibrate(cfg: &ExperimentConfig, dir: &Path, streams: &[PathBuf], output: &str) -> CliResult<()> {
    let sessions = streams
        .iter()
        .map(|p| files::load_session(p, &cfg.pipeline.stream))
        .collect::<CliResult<Vec<_>>>()?;
    let mut bundle = pipeline::calibrate(&sessions, &cfg.pipeline)?;
    bundle.header.config_hash = cfg.hash();
    let path = dir.join(output);
    formats::write_json(&path, &bundle)?;
    let decoder = |id: DecoderId| {
        let m = bundle.decoder(id);
        json!({
            "cv_auc": m.cv_auc,
            "cv_folds": m.cv_folds,
            "threshold": m.threshold.theta,
            "tpr": m.threshold.tpr,
            "fpr": m.threshold.fpr,
            "median_latency": m.threshold.median_latency,
            "threshold_note": m.threshold_note,
            "temperature": m.temperature,
            "n_positive": m.n_positive,
            "n_negative": m.n_negative,
            "mean_iterations": m.mean_iterations,
        })
    };
    print_json(&json!({
        "model": path.display().to_string(),
        "onset": decoder(DecoderId::Onset),
        "offset": decoder(DecoderId::Offset),
        "fixation_windows": bundle.fixation_windows,
        "config_hash": cfg.hash(),
    }));
    Ok(())
}

fn cmd_replay(cfg: &ExperimentConfig, dir: &Path, model: &Path, streams: &[PathBuf], output: Option<&str>) -> CliResult<()> {
    let bundle: ModelBundle = formats::read_json(model, BUNDLE_KIND)?;
    if bundle.stream != cfg.pipeline.stream {
        return Err(Failure::new(
            "argument",
            format!("{} was calibrated with different stream settings than the current config", model.display()),
        ));
    }
    let sessions = streams
        .iter()
        .map(|p| files::load_session(p, &bundle.stream))
        .collect::<CliResult<Vec<_>>>()?;
    let mut log = pipeline::replay(&bundle, &sessions, &cfg.pipeline)?;
    log.header.config_hash = cfg.hash();
    log.sources = streams.iter().map(|p| p.display().to_string()).collect();
    let mode = cfg.pipeline.replay.mode.as_str();
    let path = dir.join(output.map_or_else(|| format!("log_{mode}.json"), str::to_string));
    formats::write_json(&path, &log)?;
    let runs: Vec<serde_json::Value> = log
        .run_metrics()?
        .iter()
        .map(|m| {
            json!({
                "run": m.run_id,
                "auc_onset": m.auc_onset,
                "auc_offset": m.auc_offset,
                "onset_hit": m.onset.hit,
                "offset_hit": m.offset.map(|o| o.hit),
            })
        })
        .collect();
    print_json(&json!({
        "log": path.display().to_string(),
        "mode": mode,
        "trials": log.trials.len(),
        "frames": log.frames.len(),
        "runs": runs,
        "config_hash": cfg.hash(),
    }));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Defaults => {
            emit(&cfg.to_text());
            Ok(())
        }
        Command::Synth { name, drift, drift_seed, positive_only } => {
            let dir = out_dir(&cli.global, &cfg.paths.data)?;
            cmd_synth(&cfg, &dir, name, *drift, *drift_seed, positive_only.as_deref())
        }
        Command::Calibrate { streams, output } => {
            let dir = out_dir(&cli.global, &cfg.paths.models)?;
            cmd_calibrate(&cfg, &dir, streams, output)
        }
        Command::Replay { model, streams, output } => {
            let dir = out_dir(&cli.global, &cfg.paths.reports)?;
            cmd_replay(&cfg, &dir, model, streams, output.as_deref())
        }
        Command::Analyze { logs, channels } => {
            let dir = out_dir(&cli.global, &cfg.paths.reports)?;
            let written = analyze::run(&cfg, &dir, logs, channels)?;
            print_json(&json!({
                "reports": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                "config_hash": cfg.hash(),
            }));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": { "code": f.code, "message": f.message } }));
            ExitCode::from(1)
        }
    }
}
