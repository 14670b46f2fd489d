//! Report files written by `startstop analyze`.
//!
//! CSV reports start with a `#` line carrying the report kind, format
//! version and config hash; JSON reports carry the usual file header.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use startstop_core::analysis::{average_spectrograms, margin_shift, welch_spectrogram, wilcoxon_signed_rank_exact};
use startstop_core::config::ExperimentConfig;
use startstop_core::formats::{self, FileHeader, FORMAT_VERSION, SESSION_LOG_KIND};
use startstop_core::pipeline::SessionLog;
use startstop_core::recenter::ReferenceKind;
use startstop_core::DecoderId;

use crate::files;
use crate::{CliResult, Failure};

const DECODERS: [DecoderId; 2] = [DecoderId::Onset, DecoderId::Offset];

struct NamedLog {
    name: String,
    path: PathBuf,
    log: SessionLog,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_report(kind: &str, hash: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let preamble = format!("# kind={kind} format_version={FORMAT_VERSION} config_hash={hash}\n");
    let mut w = csv::Writer::from_writer(preamble.into_bytes());
    let io = |e: csv::Error| Failure::new("io", e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Failure::new("io", e.to_string()))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn pooled_margins(log: &SessionLog, id: DecoderId) -> Vec<(f64, bool)> {
    log.runs.iter().flat_map(|r| log.run_margins(r.session, r.run, id)).collect()
}

fn run_metrics(logs: &[NamedLog], hash: &str) -> CliResult<Vec<u8>> {
    let header = [
        "log", "mode", "run", "auc_onset", "auc_offset", "onset_n", "onset_hit", "onset_miss", "onset_timeout",
        "offset_n", "offset_hit", "offset_miss", "offset_timeout", "onset_latency_n", "onset_latency_mean",
        "onset_latency_sd", "offset_latency_n", "offset_latency_mean", "offset_latency_sd",
    ];
    let mut rows = Vec::new();
    for l in logs {
        for m in l.log.run_metrics()? {
            let off = m.offset;
            rows.push(vec![
                l.name.clone(),
                l.log.mode.as_str().into(),
                m.run_id.clone(),
                opt(m.auc_onset),
                opt(m.auc_offset),
                m.onset.n.to_string(),
                m.onset.hit.to_string(),
                m.onset.miss.to_string(),
                m.onset.timeout.to_string(),
                off.map_or(0, |o| o.n).to_string(),
                opt(off.map(|o| o.hit)),
                opt(off.map(|o| o.miss)),
                opt(off.map(|o| o.timeout)),
                m.onset_latency.n.to_string(),
                opt(m.onset_latency.mean),
                opt(m.onset_latency.sd),
                m.offset_latency.n.to_string(),
                opt(m.offset_latency.mean),
                opt(m.offset_latency.sd),
            ]);
        }
    }
    csv_report("run_metrics", hash, &header, &rows)
}

fn auc_per_run(logs: &[NamedLog], hash: &str) -> CliResult<Vec<u8>> {
    let mut rows = Vec::new();
    for l in logs {
        for r in &l.log.runs {
            for id in DECODERS {
                let margins = l.log.run_margins(r.session, r.run, id);
                let n_pos = margins.iter().filter(|m| m.1).count();
                rows.push(vec![
                    l.name.clone(),
                    l.log.mode.as_str().into(),
                    r.session.to_string(),
                    r.run.to_string(),
                    id.as_str().into(),
                    opt(l.log.run_auc(r.session, r.run, id).ok()),
                    n_pos.to_string(),
                    (margins.len() - n_pos).to_string(),
                ]);
            }
        }
    }
    csv_report("auc_per_run", hash, &["log", "mode", "session", "run", "decoder", "auc", "n_pos", "n_neg"], &rows)
}

fn bias_report(logs: &[NamedLog], baseline: usize, header: &FileHeader) -> Value {
    let mut summaries = Vec::new();
    for l in logs {
        for id in DECODERS {
            let m = pooled_margins(&l.log, id);
            let class = |pos: bool| m.iter().filter(|x| x.1 == pos).map(|x| x.0).collect::<Vec<_>>();
            summaries.push(json!({
                "log": l.name,
                "mode": l.log.mode.as_str(),
                "decoder": id.as_str(),
                "median_margin_pos": median(class(true)),
                "median_margin_neg": median(class(false)),
                "n_pos": class(true).len(),
                "n_neg": class(false).len(),
            }));
        }
    }
    let base = &logs[baseline];
    let mut comparisons = Vec::new();
    for (i, l) in logs.iter().enumerate() {
        if i == baseline {
            continue;
        }
        for id in DECODERS {
            let outcome = margin_shift(&pooled_margins(&l.log, id), &pooled_margins(&base.log, id), (&l.name, &base.name));
            let mut entry = json!({ "treatment": l.name, "baseline": base.name, "decoder": id.as_str() });
            match outcome {
                Ok(r) => entry["report"] = serde_json::to_value(r).expect("report serializes"),
                Err(e) => entry["error"] = json!({ "code": e.code(), "message": e.to_string() }),
            }
            comparisons.push(entry);
        }
    }
    json!({
        "header": header,
        "baseline": base.name,
        "class_summaries": summaries,
        "comparisons": comparisons,
    })
}

fn wilcoxon_report(logs: &[NamedLog], baseline: usize, header: &FileHeader) -> Value {
    let base = &logs[baseline];
    let mut pairs = Vec::new();
    for (i, l) in logs.iter().enumerate() {
        if i == baseline {
            continue;
        }
        for id in DECODERS {
            let mut runs = Vec::new();
            let mut diffs = Vec::new();
            for r in &l.log.runs {
                if !base.log.runs.iter().any(|b| (b.session, b.run) == (r.session, r.run)) {
                    continue;
                }
                if let (Ok(t), Ok(b)) = (l.log.run_auc(r.session, r.run, id), base.log.run_auc(r.session, r.run, id)) {
                    runs.push(format!("s{}r{}", r.session, r.run));
                    diffs.push(t - b);
                }
            }
            let mut entry = json!({
                "treatment": l.name,
                "baseline": base.name,
                "decoder": id.as_str(),
                "statistic": "auc_treatment_minus_baseline",
                "n_pairs": diffs.len(),
                "runs": runs,
                "differences": diffs,
            });
            match wilcoxon_signed_rank_exact(&diffs) {
                Ok(r) => entry["result"] = serde_json::to_value(r).expect("result serializes"),
                Err(e) => entry["error"] = json!({ "code": e.code(), "message": e.to_string() }),
            }
            pairs.push(entry);
        }
    }
    json!({ "header": header, "baseline": base.name, "pairs": pairs })
}

fn resolve_source(source: &str, log_path: &Path) -> PathBuf {
    let p = PathBuf::from(source);
    if p.is_absolute() || p.exists() {
        return p;
    }
    log_path.parent().map_or(p.clone(), |d| d.join(&p))
}

fn spectrogram(cfg: &ExperimentConfig, logs: &[NamedLog], channels: &[usize], hash: &str) -> CliResult<Vec<u8>> {
    let header = ["channel", "channel_name", "time_s", "freq_hz", "value"];
    let Some((l, source)) = logs.iter().find_map(|l| l.log.sources.first().map(|s| (l, s))) else {
        return csv_report("spectrogram", hash, &header, &[]);
    };
    let (rec, sidecar) = files::load_stream(&resolve_source(source, &l.path))?;
    let c = rec.channels();
    let chans: Vec<usize> = if channels.is_empty() { (0..c).collect() } else { channels.to_vec() };
    let trials = &sidecar.ground_truth.trials;
    let len = trials
        .iter()
        .map(|t| t.end_frame - t.start_frame)
        .min()
        .ok_or_else(|| Failure::new("argument", format!("{source} has no trials")))?;
    let mut per_channel = vec![Vec::new(); chans.len()];
    for t in trials {
        let seg = &rec.data[t.start_frame * c..(t.start_frame + len) * c];
        let maps = welch_spectrogram(seg, c, rec.fs, &chans, (0.0, cfg.pipeline.protocol.rest), &cfg.spectrogram)?;
        for (acc, m) in per_channel.iter_mut().zip(maps) {
            acc.push(m);
        }
    }
    let mut rows = Vec::new();
    for (ch, maps) in chans.iter().zip(&per_channel) {
        let avg = average_spectrograms(maps)?;
        for (fi, f) in avg.freqs.iter().enumerate() {
            for (ti, t) in avg.times.iter().enumerate() {
                rows.push(vec![
                    ch.to_string(),
                    rec.channel_names[*ch].clone(),
                    t.to_string(),
                    f.to_string(),
                    opt(avg.values[fi][ti]),
                ]);
            }
        }
    }
    csv_report("spectrogram", hash, &header, &rows)
}

/// Writes every report into `dir` and returns the paths in a fixed order.
pub fn run(cfg: &ExperimentConfig, dir: &Path, paths: &[PathBuf], channels: &[usize]) -> CliResult<Vec<PathBuf>> {
    let logs = paths
        .iter()
        .map(|p| {
            let log: SessionLog = formats::read_json(p, SESSION_LOG_KIND)?;
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok(NamedLog { name, path: p.clone(), log })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut names: Vec<&str> = logs.iter().map(|l| l.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Failure::new("argument", "log file names must be distinct"));
    }
    let hash = cfg.hash();
    let montage = logs[0].log.header.montage.clone();
    let baseline = logs.iter().position(|l| l.log.mode == ReferenceKind::Identity).unwrap_or(0);

    let mut written = Vec::new();
    let mut emit = |file: &str, bytes: Vec<u8>| -> CliResult<()> {
        let path = dir.join(file);
        files::write_bytes(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    emit("run_metrics.csv", run_metrics(&logs, &hash)?)?;
    emit("auc_per_run.csv", auc_per_run(&logs, &hash)?)?;
    let json_text = |v: Value| formats::to_json(&v).map(String::into_bytes);
    emit("bias_report.json", json_text(bias_report(&logs, baseline, &FileHeader::new("bias_report", &hash, &montage)))?)?;
    emit("wilcoxon.json", json_text(wilcoxon_report(&logs, baseline, &FileHeader::new("wilcoxon_report", &hash, &montage)))?)?;
    emit("spectrogram.csv", spectrogram(cfg, &logs, channels, &hash)?)?;
    Ok(written)
}
