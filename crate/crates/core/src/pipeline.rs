//! Experiment steps on labeled recordings: windowing, calibration with
//! leave-one-run-out thresholds, pseudo-online replay under a recentering
//! mode, and per-run summaries of replayed sessions.

use serde::{Deserialize, Serialize};

use crate::analysis::{auc_from_scores, outcome_latency_stats, RunMetrics};
use crate::decoder::{
    operating_point, select_threshold, ClassPrototypes, DecoderConfig, DecoderId, EmaState, LabeledTrace, Posterior,
    Scorer, ThresholdSelection,
};
use crate::error::{Error, Result};
use crate::formats::{sha256_hex, FileHeader, BUNDLE_KIND, SESSION_LOG_KIND};
use crate::preprocess::{CovarianceWindow, Preprocessor, StreamConfig};
use crate::recenter::{
    fit_fixation_reference, recenter_prototypes, task_reference_update_windowed, FixationConfig, RecenterReference,
    ReferenceKind,
};
use crate::session::{ProtocolConfig, TrialPhase, TrialRecord, TrialStateMachine};
use crate::spd::{frechet_mean_detailed, FrechetConfig, SpdMatrix};
use crate::synth::{BrainPhase, GroundTruth, PhaseSegment, Recording};

/// Positive and negative brain phase of each decoder.
pub fn class_phases(id: DecoderId) -> (BrainPhase, BrainPhase) {
    match id {
        DecoderId::Onset => (BrainPhase::StartMi, BrainPhase::Rest),
        DecoderId::Offset => (BrainPhase::StopMi, BrainPhase::Maintain),
    }
}

/// Covariance windows of one recording with its ground truth.
#[derive(Clone, Debug)]
pub struct SessionWindows {
    pub windows: Vec<CovarianceWindow>,
    pub truth: GroundTruth,
    pub channel_names: Vec<String>,
    pub fs: f64,
    pub window_frames: usize,
}

impl SessionWindows {
    pub fn from_recording(rec: &Recording, truth: &GroundTruth, cfg: &StreamConfig) -> Result<Self> {
        if rec.channels() != cfg.channels {
            return Err(Error::shape(format!("{} channels", cfg.channels), rec.channels()));
        }
        if (rec.fs - cfg.fs).abs() > 1e-9 || (truth.fs - rec.fs).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "sampling rates disagree: stream {} Hz, ground truth {} Hz, config {} Hz",
                rec.fs, truth.fs, cfg.fs
            )));
        }
        if truth.n_frames != rec.n_frames() {
            return Err(Error::Format(format!(
                "ground truth covers {} frames, stream has {}",
                truth.n_frames,
                rec.n_frames()
            )));
        }
        truth.validate()?;
        Ok(Self {
            windows: Preprocessor::process_all(cfg, &rec.data)?,
            truth: truth.clone(),
            channel_names: rec.channel_names.clone(),
            fs: rec.fs,
            window_frames: cfg.window_frames(),
        })
    }

    /// First frame covered by window `i`.
    pub fn start_frame(&self, i: usize) -> usize {
        self.windows[i].end_index as usize + 1 - self.window_frames
    }

    /// Stream time at the end of window `i`.
    pub fn end_time(&self, i: usize) -> f64 {
        (self.windows[i].end_index + 1) as f64 / self.fs
    }

    /// The phase segment containing window `i` entirely.
    pub fn label(&self, i: usize) -> Option<&PhaseSegment> {
        self.truth
            .segment_covering(self.start_frame(i), self.windows[i].end_index as usize + 1)
    }

    /// Windows lying entirely in `phase`, with their runs.
    pub fn labeled(&self, phase: BrainPhase) -> impl Iterator<Item = (usize, &PhaseSegment)> + '_ {
        (0..self.windows.len()).filter_map(move |i| self.label(i).filter(|s| s.phase == phase).map(|s| (i, s)))
    }

    /// Indices of windows ending inside trial `trial` (end frame in `(start, end]`).
    pub fn trial_windows(&self, trial: usize) -> std::ops::Range<usize> {
        let t = &self.truth.trials[trial];
        let lo = self.windows.partition_point(|w| (w.end_index as usize) < t.start_frame);
        let hi = self.windows.partition_point(|w| (w.end_index as usize) < t.end_frame);
        lo..hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub frechet: FrechetConfig,
    /// Cap on the median cue-to-crossing latency of selected thresholds.
    pub latency_cap: f64,
    /// Fewest labeled windows per class and decoder.
    pub min_class_windows: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            frechet: FrechetConfig::default(),
            latency_cap: 3.0,
            min_class_windows: 8,
        }
    }
}

/// When the fixation reference is refit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixationSchedule {
    /// At each run start, from the fixation windows of that run.
    CurrentRun,
    /// At each run start, from the fixation windows of the run before; the
    /// first run uses the training fixation reference.
    PreviousRun,
}

impl FixationSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            FixationSchedule::CurrentRun => "current_run",
            FixationSchedule::PreviousRun => "previous_run",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "current_run" => Ok(Self::CurrentRun),
            "previous_run" => Ok(Self::PreviousRun),
            _ => Err(Error::Argument(format!(
                "unknown fixation schedule {s:?} (expected current_run or previous_run)"
            ))),
        }
    }
}

/// When the task running mean restarts from identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskReset {
    Run,
    Session,
    Never,
}

impl TaskReset {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskReset::Run => "run",
            TaskReset::Session => "session",
            TaskReset::Never => "never",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "run" => Ok(Self::Run),
            "session" => Ok(Self::Session),
            "never" => Ok(Self::Never),
            _ => Err(Error::Argument(format!("unknown task reset {s:?} (expected run, session or never)"))),
        }
    }
}

/// Which windows feed the task running mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSamples {
    /// Every window of the trial up to the return phase.
    Trial,
    /// Every window from the start cue to the end of the trial.
    PostCue,
    /// Only windows inside an open decision window.
    Decoding,
}

impl TaskSamples {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskSamples::Trial => "trial",
            TaskSamples::PostCue => "post_cue",
            TaskSamples::Decoding => "decoding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trial" => Ok(Self::Trial),
            "post_cue" => Ok(Self::PostCue),
            "decoding" => Ok(Self::Decoding),
            _ => Err(Error::Argument(format!(
                "unknown task samples {s:?} (expected trial, post_cue or decoding)"
            ))),
        }
    }

    fn feeds(self, phase: TrialPhase) -> bool {
        match self {
            TaskSamples::Trial => matches!(
                phase,
                TrialPhase::Rest | TrialPhase::Countdown | TrialPhase::StartCue | TrialPhase::Moving
            ),
            TaskSamples::PostCue => !matches!(phase, TrialPhase::Rest | TrialPhase::Countdown),
            TaskSamples::Decoding => matches!(phase, TrialPhase::StartCue | TrialPhase::Moving),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub mode: ReferenceKind,
    pub fixation_schedule: FixationSchedule,
    /// Memory of the task running mean in windows; `None` keeps every window.
    pub task_window: Option<usize>,
    pub task_reset: TaskReset,
    pub task_samples: TaskSamples,
    /// Blend the first fixation reference of a session with the last one of
    /// the session before. The previous-run schedule always carries.
    pub fixation_carry: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mode: ReferenceKind::Fixation,
            fixation_schedule: FixationSchedule::CurrentRun,
            task_window: None,
            task_reset: TaskReset::Session,
            task_samples: TaskSamples::PostCue,
            fixation_carry: false,
        }
    }
}

/// Everything the processing steps need besides file paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stream: StreamConfig,
    pub protocol: ProtocolConfig,
    pub fixation: FixationConfig,
    pub calibration: CalibrationConfig,
    pub replay: ReplayConfig,
}

impl PipelineConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            stream: StreamConfig::new(channels),
            protocol: ProtocolConfig::default(),
            fixation: FixationConfig::default(),
            calibration: CalibrationConfig::default(),
            replay: ReplayConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.protocol.validate()?;
        self.fixation.validate()?;
        self.calibration.frechet.validate()?;
        if !(self.calibration.latency_cap > 0.0) {
            return Err(Error::Argument(format!(
                "latency cap must be positive, got {}",
                self.calibration.latency_cap
            )));
        }
        if self.calibration.min_class_windows < 2 {
            return Err(Error::Argument("min_class_windows must be at least 2".into()));
        }
        if self.replay.task_window == Some(0) {
            return Err(Error::Argument("task window must be at least 1".into()));
        }
        if (self.protocol.hop - self.stream.hop).abs() > 1e-12 {
            return Err(Error::Argument(format!(
                "protocol hop {} s differs from stream hop {} s",
                self.protocol.hop, self.stream.hop
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderModel {
    /// Whitened by the pooled training mean.
    pub prototypes: ClassPrototypes,
    pub temperature: f64,
    pub threshold: ThresholdSelection,
    /// Set when the latency cap could not be met and the unconstrained optimum was used.
    pub threshold_note: Option<String>,
    /// Held-out AUC of window margins; in-sample with a single run.
    pub cv_auc: f64,
    /// Folds used for the thresholds and AUC; 0 means in-sample.
    pub cv_folds: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Mean Karcher iterations over the three means.
    pub mean_iterations: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub header: FileHeader,
    pub stream: StreamConfig,
    pub onset: DecoderModel,
    pub offset: DecoderModel,
    /// Fixation reference of the training data, if it had fixation windows.
    pub fixation_reference: Option<SpdMatrix>,
    pub fixation_windows: usize,
}

impl ModelBundle {
    pub fn decoder(&self, id: DecoderId) -> &DecoderModel {
        match id {
            DecoderId::Onset => &self.onset,
            DecoderId::Offset => &self.offset,
        }
    }

    pub fn channels(&self) -> usize {
        self.stream.channels
    }
}

/// Run key across sessions: `(session, run)`.
type RunKey = (usize, usize);

fn run_keys(sessions: &[SessionWindows]) -> Vec<RunKey> {
    sessions
        .iter()
        .enumerate()
        .flat_map(|(s, w)| (0..w.truth.n_runs()).map(move |r| (s, r)))
        .collect()
}

struct ClassSamples<'a> {
    /// `(run, session index, window index)` per sample.
    pos: Vec<(RunKey, &'a SpdMatrix)>,
    neg: Vec<(RunKey, &'a SpdMatrix)>,
}

fn class_samples(sessions: &[SessionWindows], id: DecoderId) -> ClassSamples<'_> {
    let (p, n) = class_phases(id);
    let collect = |phase| {
        sessions
            .iter()
            .enumerate()
            .flat_map(|(s, w)| w.labeled(phase).map(move |(i, seg)| ((s, seg.run), &w.windows[i].cov)))
            .collect()
    };
    ClassSamples { pos: collect(p), neg: collect(n) }
}

fn select<'a>(set: &[(RunKey, &'a SpdMatrix)], keep: impl Fn(RunKey) -> bool) -> Vec<SpdMatrix> {
    set.iter().filter(|(k, _)| keep(*k)).map(|(_, m)| (*m).clone()).collect()
}

/// Smoothed posterior trace over the windows of `[from, to]` seconds, EMA seeded afresh.
fn trace_over(
    w: &SessionWindows,
    range: std::ops::Range<usize>,
    from: f64,
    to: f64,
    scorer: &Scorer,
    beta: f64,
    positive: bool,
) -> Result<Option<LabeledTrace>> {
    let mut ema = EmaState::new(beta);
    let (mut times, mut p_hat) = (Vec::new(), Vec::new());
    for i in range {
        let t = w.end_time(i);
        if t < from - 1e-9 || t > to + 1e-9 {
            continue;
        }
        let p = scorer.score(&w.windows[i].cov, None)?.p_pos;
        times.push(t - from);
        p_hat.push(ema.update(p));
    }
    Ok((!times.is_empty()).then_some(LabeledTrace { positive, times, p_hat }))
}

/// Traces and labeled margins of one held-out run.
fn held_out_scores(
    w: &SessionWindows,
    run: usize,
    id: DecoderId,
    scorer: &Scorer,
    dcfg: &DecoderConfig,
    traces: &mut Vec<LabeledTrace>,
    margins: (&mut Vec<f64>, &mut Vec<f64>),
) -> Result<()> {
    let (pos_phase, neg_phase) = class_phases(id);
    let win_s = w.window_frames as f64 / w.fs;
    for seg in w.truth.segments.iter().filter(|s| s.run == run) {
        let a = seg.start_frame as f64 / w.fs;
        let b = seg.end_frame as f64 / w.fs;
        let range = w.trial_windows(seg.trial);
        if seg.phase == pos_phase {
            let to = b.min(a + dcfg.decision_window);
            if let Some(tr) = trace_over(w, range, a, to, scorer, dcfg.ema_beta, true)? {
                traces.push(tr);
            }
        } else if seg.phase == neg_phase && b - a >= win_s {
            if let Some(tr) = trace_over(w, range, a + win_s, b, scorer, dcfg.ema_beta, false)? {
                traces.push(tr);
            }
        }
    }
    for (phase, out) in [(pos_phase, margins.0), (neg_phase, margins.1)] {
        for (i, seg) in w.labeled(phase) {
            if seg.run == run {
                out.push(scorer.score(&w.windows[i].cov, None)?.margin());
            }
        }
    }
    Ok(())
}

fn calibrate_decoder(sessions: &[SessionWindows], id: DecoderId, cfg: &PipelineConfig) -> Result<DecoderModel> {
    let ccfg = &cfg.calibration;
    let dcfg = cfg.protocol.decoder(id);
    let samples = class_samples(sessions, id);
    let (pos_phase, neg_phase) = class_phases(id);
    for (phase, set) in [(pos_phase, &samples.pos), (neg_phase, &samples.neg)] {
        if set.len() < ccfg.min_class_windows {
            return Err(Error::ClassStarvation {
                decoder: id.to_string(),
                detail: format!(
                    "{} windows labeled {}, at least {} required",
                    set.len(),
                    phase.as_str(),
                    ccfg.min_class_windows
                ),
            });
        }
    }
    let all = |_| true;
    let pos = select(&samples.pos, all);
    let neg = select(&samples.neg, all);
    let pos_fit = frechet_mean_detailed(&pos, &ccfg.frechet)?;
    let neg_fit = frechet_mean_detailed(&neg, &ccfg.frechet)?;
    let pooled: Vec<SpdMatrix> = pos.iter().chain(&neg).cloned().collect();
    let pooled_fit = frechet_mean_detailed(&pooled, &ccfg.frechet)?;
    let raw = ClassPrototypes::unwhitened(id, pos_fit.mean, neg_fit.mean)?;
    let prototypes = recenter_prototypes(&pooled_fit.mean, &raw)?;
    let temperature = dcfg.resolve_temperature(&prototypes)?;

    let keys = run_keys(sessions);
    let mut traces = Vec::new();
    let (mut m_pos, mut m_neg) = (Vec::new(), Vec::new());
    let mut folds = 0;
    if keys.len() >= 2 {
        for &key in &keys {
            let train_pos = select(&samples.pos, |k| k != key);
            let train_neg = select(&samples.neg, |k| k != key);
            if train_pos.len() < 2 || train_neg.len() < 2 {
                continue;
            }
            let fold = ClassPrototypes::unwhitened(
                id,
                frechet_mean_detailed(&train_pos, &ccfg.frechet)?.mean,
                frechet_mean_detailed(&train_neg, &ccfg.frechet)?.mean,
            )?;
            let alpha = dcfg.resolve_temperature(&fold)?;
            let scorer = Scorer::new(fold, alpha)?;
            held_out_scores(&sessions[key.0], key.1, id, &scorer, dcfg, &mut traces, (&mut m_pos, &mut m_neg))?;
            folds += 1;
        }
    }
    if folds == 0 {
        let scorer = Scorer::new(raw, temperature)?;
        for &(s, r) in &keys {
            held_out_scores(&sessions[s], r, id, &scorer, dcfg, &mut traces, (&mut m_pos, &mut m_neg))?;
        }
    }
    let cv_auc = auc_from_scores(&m_pos, &m_neg)?;
    let (threshold, threshold_note) = match select_threshold(&traces, ccfg.latency_cap) {
        Ok(sel) => (sel, None),
        Err(Error::ConstraintInfeasible { cap, fallback_theta }) => {
            let (tpr, fpr, median_latency) = operating_point(&traces, fallback_theta);
            (
                ThresholdSelection {
                    theta: fallback_theta,
                    tpr,
                    fpr,
                    median_latency,
                    degenerate: false,
                },
                Some(format!(
                    "no threshold with positive Youden J meets the {cap} s latency cap; using the unconstrained optimum"
                )),
            )
        }
        Err(e) => return Err(e),
    };
    Ok(DecoderModel {
        prototypes,
        temperature,
        threshold,
        threshold_note,
        cv_auc,
        cv_folds: folds,
        n_positive: pos.len(),
        n_negative: neg.len(),
        mean_iterations: (pos_fit.iterations + neg_fit.iterations + pooled_fit.iterations) as f64 / 3.0,
    })
}

/// Fixation windows of one run.
fn fixation_windows(w: &SessionWindows, run: usize) -> Vec<SpdMatrix> {
    w.labeled(BrainPhase::Countdown)
        .filter(|(_, seg)| seg.run == run)
        .map(|(i, _)| w.windows[i].cov.clone())
        .collect()
}

/// Fits both decoders, their thresholds, and the training fixation reference.
pub fn calibrate(sessions: &[SessionWindows], cfg: &PipelineConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let first = sessions
        .first()
        .ok_or_else(|| Error::Argument("calibration needs at least one session".into()))?;
    if let Some(bad) = sessions.iter().find(|s| s.channel_names.len() != cfg.stream.channels) {
        return Err(Error::shape(cfg.stream.channels, bad.channel_names.len()));
    }
    let onset = calibrate_decoder(sessions, DecoderId::Onset, cfg)?;
    let offset = calibrate_decoder(sessions, DecoderId::Offset, cfg)?;
    let mut reference: Option<RecenterReference> = None;
    let mut n_fix = 0;
    for (s, r) in run_keys(sessions) {
        let fix = fixation_windows(&sessions[s], r);
        n_fix += fix.len();
        if fix.len() >= cfg.fixation.n_min {
            reference = Some(fit_fixation_reference(&fix, &cfg.fixation, reference.as_ref())?);
        }
    }
    Ok(ModelBundle {
        header: FileHeader::new(BUNDLE_KIND, &cfg.hash(), &first.channel_names),
        stream: cfg.stream.clone(),
        onset,
        offset,
        fixation_reference: reference.map(|r| r.matrix().clone()),
        fixation_windows: n_fix,
    })
}

/// Both decoders' view of one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindow {
    pub d_pos: f64,
    pub d_neg: f64,
    pub p_pos: f64,
}

impl From<Posterior> for ScoredWindow {
    fn from(p: Posterior) -> Self {
        Self { d_pos: p.d_pos, d_neg: p.d_neg, p_pos: p.p_pos }
    }
}

impl ScoredWindow {
    pub fn margin(&self) -> f64 {
        self.d_neg - self.d_pos
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub session: usize,
    pub run: usize,
    pub trial: usize,
    pub k: usize,
    /// Trial-relative time at the window end.
    pub t: f64,
    /// Brain phase if the window lies entirely inside one.
    pub label: Option<BrainPhase>,
    /// Whether the window fed the task reference.
    pub task_update: bool,
    pub onset: ScoredWindow,
    pub offset: ScoredWindow,
}

impl FrameRecord {
    pub fn scored(&self, id: DecoderId) -> &ScoredWindow {
        match id {
            DecoderId::Onset => &self.onset,
            DecoderId::Offset => &self.offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub session: usize,
    pub run: usize,
    pub n_trials: usize,
    /// Fixation windows consumed to set this run's reference.
    pub fixation_windows: usize,
    /// Reference at the start of the run (fixation mode) or end (task mode).
    pub reference: Option<SpdMatrix>,
    /// Task mode: stream time of the bootstrap window, when it fell in this run.
    pub task_bootstrap_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub session: usize,
    pub run: usize,
    pub record: TrialRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub header: FileHeader,
    pub mode: ReferenceKind,
    pub bundle_hash: String,
    pub thresholds: (f64, f64),
    pub temperatures: (f64, f64),
    pub runs: Vec<RunInfo>,
    pub trials: Vec<TrialEntry>,
    pub frames: Vec<FrameRecord>,
    /// Stream files the sessions were read from, when known.
    #[serde(default)]
    pub sources: Vec<String>,
}

impl SessionLog {
    /// Labeled windows of one run as `(margin, is_positive)` for a decoder.
    pub fn run_margins(&self, session: usize, run: usize, id: DecoderId) -> Vec<(f64, bool)> {
        let (p, n) = class_phases(id);
        self.frames
            .iter()
            .filter(|f| f.session == session && f.run == run)
            .filter_map(|f| match f.label {
                Some(l) if l == p => Some((f.scored(id).margin(), true)),
                Some(l) if l == n => Some((f.scored(id).margin(), false)),
                _ => None,
            })
            .collect()
    }

    pub fn run_auc(&self, session: usize, run: usize, id: DecoderId) -> Result<f64> {
        crate::analysis::run_auc(&self.run_margins(session, run, id))
    }

    /// Per-run outcome statistics and AUCs, in run order.
    pub fn run_metrics(&self) -> Result<Vec<RunMetrics>> {
        self.runs
            .iter()
            .map(|ri| {
                let records: Vec<TrialRecord> = self
                    .trials
                    .iter()
                    .filter(|t| t.session == ri.session && t.run == ri.run)
                    .map(|t| t.record.clone())
                    .collect();
                let mut m = outcome_latency_stats(&format!("s{}r{}", ri.session, ri.run), &records)?;
                m.auc_onset = self.run_auc(ri.session, ri.run, DecoderId::Onset).ok();
                m.auc_offset = self.run_auc(ri.session, ri.run, DecoderId::Offset).ok();
                Ok(m)
            })
            .collect()
    }
}

fn mode_scorers(bundle: &ModelBundle, mode: ReferenceKind) -> Result<(Scorer, Scorer)> {
    let make = |m: &DecoderModel| -> Result<Scorer> {
        let protos = match mode {
            ReferenceKind::Identity => m.prototypes.raw(),
            ReferenceKind::Task => m.prototypes.clone(),
            ReferenceKind::Fixation => {
                let s_fix = bundle.fixation_reference.as_ref().ok_or_else(|| {
                    Error::NoReference("model bundle has no training fixation reference".into())
                })?;
                recenter_prototypes(s_fix, &m.prototypes.raw())?
            }
        };
        Scorer::new(protos, m.temperature)
    };
    Ok((make(&bundle.onset)?, make(&bundle.offset)?))
}

/// Frame-by-frame replay of sessions in order through recentering, both
/// decoders and the trial state machine.
///
/// The task reference restarts from identity as `task_reset` says; the
/// fixation reference carries across runs and sessions.
pub fn replay(bundle: &ModelBundle, sessions: &[SessionWindows], cfg: &PipelineConfig) -> Result<SessionLog> {
    cfg.validate()?;
    let mode = cfg.replay.mode;
    let dim = bundle.channels();
    for s in sessions {
        if s.channel_names.len() != dim {
            return Err(Error::shape(format!("{dim} channels (model bundle)"), s.channel_names.len()));
        }
    }
    let (onset_scorer, offset_scorer) = mode_scorers(bundle, mode)?;
    let mut protocol = cfg.protocol.clone();
    protocol.onset.threshold = bundle.onset.threshold.theta;
    protocol.offset.threshold = bundle.offset.threshold.theta;
    protocol.onset.temperature = Some(bundle.onset.temperature);
    protocol.offset.temperature = Some(bundle.offset.temperature);

    let mut fix_ref: Option<RecenterReference> = None;
    let mut pending_fix: Option<Vec<SpdMatrix>> = None;
    let mut runs = Vec::new();
    let mut trials = Vec::new();
    let mut frames = Vec::new();
    let mut task_ref = RecenterReference::identity(dim);
    for (s, w) in sessions.iter().enumerate() {
        if cfg.replay.task_reset == TaskReset::Session {
            task_ref = RecenterReference::identity(dim);
        }
        if s > 0 && !cfg.replay.fixation_carry && cfg.replay.fixation_schedule == FixationSchedule::CurrentRun {
            fix_ref = None;
        }
        for run in 0..w.truth.n_runs() {
            if cfg.replay.task_reset == TaskReset::Run {
                task_ref = RecenterReference::identity(dim);
            }
            let mut info = RunInfo {
                session: s,
                run,
                n_trials: 0,
                fixation_windows: 0,
                reference: None,
                task_bootstrap_time: None,
            };
            if mode == ReferenceKind::Fixation {
                let source = match cfg.replay.fixation_schedule {
                    FixationSchedule::CurrentRun => Some(fixation_windows(w, run)),
                    FixationSchedule::PreviousRun => {
                        if fix_ref.is_none() {
                            let s_fix = bundle.fixation_reference.clone().ok_or_else(|| {
                                Error::NoReference("model bundle has no training fixation reference".into())
                            })?;
                            fix_ref = Some(RecenterReference::new(ReferenceKind::Fixation, s_fix, 0, 0));
                        }
                        pending_fix.replace(fixation_windows(w, run))
                    }
                };
                if let Some(fix) = source {
                    info.fixation_windows = fix.len();
                    fix_ref = Some(fit_fixation_reference(&fix, &cfg.fixation, fix_ref.as_ref()).map_err(|e| match e {
                        Error::NoReference(d) => Error::NoReference(format!("session {s} run {run}: {d}")),
                        other => other,
                    })?);
                }
                info.reference = fix_ref.as_ref().map(|r| r.matrix().clone());
            }
            for (ti, truth) in w.truth.trials.iter().enumerate().filter(|(_, t)| t.run == run) {
                let trial_start = truth.start_frame as f64 / w.fs;
                let duration = (truth.end_frame - truth.start_frame) as f64 / w.fs;
                let cue = truth.start_time - trial_start;
                if (cue - protocol.cue_time()).abs() > 1e-9 {
                    return Err(Error::Protocol(format!(
                        "trial {} cues at {cue} s but the protocol expects {} s",
                        truth.trial_id,
                        protocol.cue_time()
                    )));
                }
                let mut machine = TrialStateMachine::new(protocol.clone(), truth.trial_id, truth.target_id)?;
                for i in w.trial_windows(ti) {
                    let cov = &w.windows[i].cov;
                    let t = w.end_time(i) - trial_start;
                    let task_update = mode == ReferenceKind::Task && cfg.replay.task_samples.feeds(machine.phase());
                    if task_update {
                        if task_ref.kind() == ReferenceKind::Identity {
                            info.task_bootstrap_time = Some(w.end_time(i));
                        }
                        task_ref = task_reference_update_windowed(&task_ref, cov, cfg.replay.task_window)?;
                    }
                    let whitener = match mode {
                        ReferenceKind::Identity => None,
                        ReferenceKind::Task => task_ref.whitener(),
                        ReferenceKind::Fixation => fix_ref.as_ref().and_then(|r| r.whitener()),
                    };
                    let onset = onset_scorer.score(cov, whitener)?;
                    let offset = offset_scorer.score(cov, whitener)?;
                    machine.advance(t, &onset, &offset)?;
                    frames.push(FrameRecord {
                        session: s,
                        run,
                        trial: truth.trial_id,
                        k: w.windows[i].k,
                        t,
                        label: w.label(i).map(|seg| seg.phase),
                        task_update,
                        onset: onset.into(),
                        offset: offset.into(),
                    });
                }
                trials.push(TrialEntry {
                    session: s,
                    run,
                    record: machine.finish(duration)?,
                });
                info.n_trials += 1;
            }
            if mode == ReferenceKind::Task && task_ref.kind() == ReferenceKind::Task {
                info.reference = Some(task_ref.matrix().clone());
            }
            runs.push(info);
        }
    }
    let montage = sessions.first().map(|s| s.channel_names.clone()).unwrap_or_default();
    Ok(SessionLog {
        header: FileHeader::new(SESSION_LOG_KIND, &cfg.hash(), &montage),
        mode,
        bundle_hash: sha256_hex(&serde_json::to_vec(bundle).expect("bundle serializes")),
        thresholds: (protocol.onset.threshold, protocol.offset.threshold),
        temperatures: (bundle.onset.temperature, bundle.offset.temperature),
        runs,
        trials,
        frames,
        sources: Vec::new(),
    })
}
