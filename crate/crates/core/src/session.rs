//! Online trial state machine: cue timeline, start/stop arbitration, the
//! assistance gate and trajectory progress.
//!
//! The machine runs on a trial-relative clock (seconds since trial start)
//! and receives one pair of decoder posteriors per hop. Smoothing happens
//! here, so the raw posterior stream fully determines every decision.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderId, EmaState, Posterior, PosteriorFrame};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialPhase {
    Rest,
    Countdown,
    StartCue,
    Moving,
    StopHandling,
    ReturnHome,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Hit,
    Miss,
    Timeout,
    NotAttempted,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Hit => "hit",
            Outcome::Miss => "miss",
            Outcome::Timeout => "timeout",
            Outcome::NotAttempted => "not_attempted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub g_bci: bool,
    pub last_transition_time: Option<f64>,
}

/// Assisted torque: `g * tau`.
pub fn gate_torque(g: &GateState, tau_task: f64) -> f64 {
    if g.g_bci {
        tau_task
    } else {
        0.0
    }
}

/// Timing of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Seconds between posterior frames.
    pub hop: f64,
    pub rest: f64,
    pub countdown: f64,
    pub onset: DecoderConfig,
    pub offset: DecoderConfig,
    /// Pre-programmed completion after an offset timeout or miss.
    pub overtravel: f64,
    pub post_stop_rest: f64,
    pub return_duration: f64,
    /// Seconds for the trajectory to go from progress 0 to 1.
    pub nominal_duration: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            hop: 0.0625,
            rest: 3.0,
            countdown: 3.0,
            onset: DecoderConfig::onset(),
            offset: DecoderConfig::offset(),
            overtravel: 5.0,
            post_stop_rest: 2.0,
            return_duration: 3.0,
            nominal_duration: 6.4,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.onset.validate()?;
        self.offset.validate()?;
        for (name, v) in [
            ("hop", self.hop),
            ("nominal_duration", self.nominal_duration),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("rest", self.rest),
            ("countdown", self.countdown),
            ("overtravel", self.overtravel),
            ("post_stop_rest", self.post_stop_rest),
            ("return_duration", self.return_duration),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Cue onset, seconds after trial start.
    pub fn cue_time(&self) -> f64 {
        self.rest + self.countdown
    }

    pub fn decoder(&self, id: DecoderId) -> &DecoderConfig {
        match id {
            DecoderId::Onset => &self.onset,
            DecoderId::Offset => &self.offset,
        }
    }

    /// Consecutive supra-threshold frames needed for a decision.
    pub fn hold_frames(&self, id: DecoderId) -> usize {
        hold_frames(self.decoder(id).hold_time, self.hop)
    }
}

/// `ceil(hold_time / hop)`, at least one frame.
pub fn hold_frames(hold_time: f64, hop: f64) -> usize {
    ((hold_time / hop - 1e-9).ceil() as usize).max(1)
}

/// What a [`HoldDetector`] concluded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Detection {
    /// The target posterior held above threshold; decision at `t`.
    Hit(f64),
    /// The complementary posterior held first.
    Miss(f64),
}

/// Threshold-and-hold rule for one decoder, applied to `p_hat` and to `1 - p_hat`.
///
/// A run of `hold` consecutive frames starting at `t_first` yields a decision
/// at `t_first + hold * hop`. If both rules complete on the same frame the
/// hit wins.
#[derive(Clone, Debug)]
pub struct HoldDetector {
    theta: f64,
    hold: usize,
    hop: f64,
    pos_run: Option<(f64, usize)>,
    neg_run: Option<(f64, usize)>,
}

impl HoldDetector {
    pub fn new(theta: f64, hold: usize, hop: f64) -> Self {
        Self {
            theta,
            hold,
            hop,
            pos_run: None,
            neg_run: None,
        }
    }

    fn extend(run: &mut Option<(f64, usize)>, t: f64, on: bool) {
        *run = match (*run, on) {
            (_, false) => None,
            (None, true) => Some((t, 1)),
            (Some((t0, n)), true) => Some((t0, n + 1)),
        };
    }

    pub fn push(&mut self, t: f64, p_hat: f64) -> Option<Detection> {
        Self::extend(&mut self.pos_run, t, p_hat >= self.theta);
        Self::extend(&mut self.neg_run, t, 1.0 - p_hat >= self.theta);
        let done = |run: Option<(f64, usize)>| match run {
            Some((t0, n)) if n >= self.hold => Some(t0 + self.hold as f64 * self.hop),
            _ => None,
        };
        if let Some(td) = done(self.pos_run) {
            return Some(Detection::Hit(td));
        }
        done(self.neg_run).map(Detection::Miss)
    }
}

/// One decision or timeout, with the time it took effect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub decoder: DecoderId,
    pub outcome: Outcome,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SessionEvent {
    Phase { t: f64, phase: TrialPhase },
    Decision(Decision),
    Gate { t: f64, g_bci: bool },
}

/// Everything logged about one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub target_id: u8,
    pub cue_time: f64,
    /// Phase entry times, trial-relative.
    pub phases: Vec<(TrialPhase, f64)>,
    /// Onset decoder frames from trial start until its decision or timeout.
    pub onset_trace: Vec<PosteriorFrame>,
    /// Offset decoder frames from movement onset until its decision or timeout.
    pub offset_trace: Vec<PosteriorFrame>,
    pub decisions: Vec<Decision>,
    pub gate_transitions: Vec<(f64, bool)>,
    pub outcome_onset: Outcome,
    pub outcome_offset: Outcome,
    /// Cue-locked, hits only.
    pub onset_latency: Option<f64>,
    /// Movement-locked, hits only.
    pub offset_latency: Option<f64>,
    pub movement_onset: Option<f64>,
    pub stop_progress: Option<f64>,
}

/// Live state of one trial.
#[derive(Clone, Debug)]
pub struct TrialStateMachine {
    cfg: ProtocolConfig,
    phase: TrialPhase,
    phase_started: f64,
    clock: Option<f64>,
    gate: GateState,
    onset_ema: EmaState,
    offset_ema: EmaState,
    onset_detector: HoldDetector,
    offset_detector: HoldDetector,
    record: TrialRecord,
}

impl TrialStateMachine {
    pub fn new(cfg: ProtocolConfig, trial_id: usize, target_id: u8) -> Result<Self> {
        cfg.validate()?;
        let onset_detector = HoldDetector::new(cfg.onset.threshold, cfg.hold_frames(DecoderId::Onset), cfg.hop);
        let offset_detector = HoldDetector::new(cfg.offset.threshold, cfg.hold_frames(DecoderId::Offset), cfg.hop);
        let record = TrialRecord {
            trial_id,
            target_id,
            cue_time: cfg.cue_time(),
            phases: vec![(TrialPhase::Rest, 0.0)],
            onset_trace: Vec::new(),
            offset_trace: Vec::new(),
            decisions: Vec::new(),
            gate_transitions: Vec::new(),
            outcome_onset: Outcome::Timeout,
            outcome_offset: Outcome::NotAttempted,
            onset_latency: None,
            offset_latency: None,
            movement_onset: None,
            stop_progress: None,
        };
        Ok(Self {
            onset_ema: EmaState::new(cfg.onset.ema_beta),
            offset_ema: EmaState::new(cfg.offset.ema_beta),
            onset_detector,
            offset_detector,
            cfg,
            phase: TrialPhase::Rest,
            phase_started: 0.0,
            clock: None,
            gate: GateState {
                g_bci: false,
                last_transition_time: None,
            },
            record,
        })
    }

    pub fn phase(&self) -> TrialPhase {
        self.phase
    }

    pub fn gate(&self) -> GateState {
        self.gate
    }

    pub fn record(&self) -> &TrialRecord {
        &self.record
    }

    pub fn is_done(&self) -> bool {
        self.phase == TrialPhase::Done
    }

    /// Trajectory progress at time `t`, in units of the nominal path.
    pub fn progress_at(&self, t: f64) -> f64 {
        match (self.record.movement_onset, self.gate.g_bci) {
            (Some(t0), true) => ((t - t0) / self.cfg.nominal_duration).max(0.0),
            _ => self.record.stop_progress.unwrap_or(0.0),
        }
    }

    fn enter(&mut self, t: f64, phase: TrialPhase, events: &mut Vec<SessionEvent>) {
        self.phase = phase;
        self.phase_started = t;
        self.record.phases.push((phase, t));
        events.push(SessionEvent::Phase { t, phase });
    }

    fn set_gate(&mut self, t: f64, on: bool, events: &mut Vec<SessionEvent>) {
        self.gate = GateState {
            g_bci: on,
            last_transition_time: Some(t),
        };
        self.record.gate_transitions.push((t, on));
        events.push(SessionEvent::Gate { t, g_bci: on });
    }

    fn decide(&mut self, decision: Decision, events: &mut Vec<SessionEvent>) {
        self.record.decisions.push(decision);
        events.push(SessionEvent::Decision(decision));
    }

    fn frame(t: f64, post: &Posterior, p_hat: f64) -> PosteriorFrame {
        PosteriorFrame {
            t,
            d_pos: post.d_pos,
            d_neg: post.d_neg,
            p_pos: post.p_pos,
            p_hat,
            margin: post.margin(),
        }
    }

    /// Moves phases forward whose timers expire at or before `t`.
    fn run_timers(&mut self, t: f64, events: &mut Vec<SessionEvent>) {
        loop {
            let cue = self.cfg.cue_time();
            match self.phase {
                TrialPhase::Rest if t >= self.cfg.rest => {
                    self.enter(self.cfg.rest, TrialPhase::Countdown, events);
                    self.onset_ema.reset();
                }
                TrialPhase::Countdown if t >= cue => {
                    self.enter(cue, TrialPhase::StartCue, events);
                    self.onset_ema.reset();
                }
                TrialPhase::StartCue if t >= cue + self.cfg.onset.decision_window => {
                    let te = cue + self.cfg.onset.decision_window;
                    self.record.outcome_onset = Outcome::Timeout;
                    self.decide(Decision { decoder: DecoderId::Onset, outcome: Outcome::Timeout, t: te }, events);
                    self.enter(te, TrialPhase::Done, events);
                }
                TrialPhase::Moving => {
                    let t0 = self.record.movement_onset.expect("moving implies a start decision");
                    let te = t0 + self.cfg.offset.decision_window;
                    if t < te {
                        return;
                    }
                    self.record.outcome_offset = Outcome::Timeout;
                    self.decide(Decision { decoder: DecoderId::Offset, outcome: Outcome::Timeout, t: te }, events);
                    self.finish_movement(te, true, events);
                }
                TrialPhase::StopHandling => {
                    let overtravel = if self.record.outcome_offset == Outcome::Hit { 0.0 } else { self.cfg.overtravel };
                    let te = self.phase_started + overtravel + self.cfg.post_stop_rest;
                    if t < te {
                        return;
                    }
                    self.enter(te, TrialPhase::ReturnHome, events);
                }
                TrialPhase::ReturnHome => {
                    let te = self.phase_started + self.cfg.return_duration;
                    if t < te {
                        return;
                    }
                    self.enter(te, TrialPhase::Done, events);
                }
                _ => return,
            }
        }
    }

    fn finish_movement(&mut self, t: f64, overtravel: bool, events: &mut Vec<SessionEvent>) {
        let t0 = self.record.movement_onset.expect("moving implies a start decision");
        let mut progress = (t - t0) / self.cfg.nominal_duration;
        if overtravel {
            progress += self.cfg.overtravel / self.cfg.nominal_duration;
        }
        self.record.stop_progress = Some(progress);
        self.set_gate(t, false, events);
        self.enter(t, TrialPhase::StopHandling, events);
    }

    /// Consumes one frame of posteriors at trial time `t`.
    pub fn advance(&mut self, t: f64, onset: &Posterior, offset: &Posterior) -> Result<Vec<SessionEvent>> {
        if !t.is_finite() {
            return Err(Error::Protocol(format!("non-finite clock {t}")));
        }
        if let Some(prev) = self.clock {
            if t <= prev {
                return Err(Error::Protocol(format!("clock went from {prev} s to {t} s")));
            }
        }
        self.clock = Some(t);
        let mut events = Vec::new();
        self.run_timers(t, &mut events);

        match self.phase {
            TrialPhase::Rest | TrialPhase::Countdown => {
                let p_hat = self.onset_ema.update(onset.p_pos);
                self.record.onset_trace.push(Self::frame(t, onset, p_hat));
            }
            TrialPhase::StartCue => {
                let p_hat = self.onset_ema.update(onset.p_pos);
                self.record.onset_trace.push(Self::frame(t, onset, p_hat));
                let cue = self.cfg.cue_time();
                match self.onset_detector.push(t, p_hat) {
                    Some(Detection::Hit(td)) => {
                        self.record.outcome_onset = Outcome::Hit;
                        self.record.onset_latency = Some(td - cue);
                        self.record.movement_onset = Some(td);
                        self.record.outcome_offset = Outcome::Timeout;
                        self.decide(Decision { decoder: DecoderId::Onset, outcome: Outcome::Hit, t: td }, &mut events);
                        self.set_gate(td, true, &mut events);
                        self.enter(td, TrialPhase::Moving, &mut events);
                        self.offset_ema.reset();
                    }
                    Some(Detection::Miss(td)) => {
                        self.record.outcome_onset = Outcome::Miss;
                        self.decide(Decision { decoder: DecoderId::Onset, outcome: Outcome::Miss, t: td }, &mut events);
                        self.enter(td, TrialPhase::Done, &mut events);
                    }
                    None => {}
                }
            }
            TrialPhase::Moving => {
                let p_hat = self.offset_ema.update(offset.p_pos);
                self.record.offset_trace.push(Self::frame(t, offset, p_hat));
                let t0 = self.record.movement_onset.expect("moving implies a start decision");
                if t >= t0 + self.cfg.offset.refractory {
                    match self.offset_detector.push(t, p_hat) {
                        Some(Detection::Hit(td)) => {
                            self.record.outcome_offset = Outcome::Hit;
                            self.record.offset_latency = Some(td - t0);
                            self.decide(Decision { decoder: DecoderId::Offset, outcome: Outcome::Hit, t: td }, &mut events);
                            self.finish_movement(td, false, &mut events);
                        }
                        Some(Detection::Miss(td)) => {
                            self.record.outcome_offset = Outcome::Miss;
                            self.decide(Decision { decoder: DecoderId::Offset, outcome: Outcome::Miss, t: td }, &mut events);
                            self.finish_movement(td, true, &mut events);
                        }
                        None => {}
                    }
                }
            }
            TrialPhase::StopHandling | TrialPhase::ReturnHome | TrialPhase::Done => {}
        }
        Ok(events)
    }

    /// Closes the trial at time `t_end`: expires pending windows and returns the record.
    ///
    /// Fails if a decision window is still open at `t_end`.
    pub fn finish(mut self, t_end: f64) -> Result<TrialRecord> {
        let mut events = Vec::new();
        self.run_timers(t_end, &mut events);
        if matches!(
            self.phase,
            TrialPhase::Rest | TrialPhase::Countdown | TrialPhase::StartCue | TrialPhase::Moving
        ) {
            return Err(Error::Protocol(format!(
                "trial {} ended at {t_end} s with a decision window still open ({:?})",
                self.record.trial_id, self.phase
            )));
        }
        Ok(self.record)
    }
}

/// Pure transition: returns the successor state and the events it emitted.
pub fn advance(
    state: &TrialStateMachine,
    t: f64,
    onset: &Posterior,
    offset: &Posterior,
) -> Result<(TrialStateMachine, Vec<SessionEvent>)> {
    let mut next = state.clone();
    let events = next.advance(t, onset, offset)?;
    Ok((next, events))
}

fn check_contiguous(trace: &[PosteriorFrame], hop: f64, what: &str) -> Result<()> {
    for w in trace.windows(2) {
        if ((w[1].t - w[0].t) - hop).abs() > 1e-6 {
            return Err(Error::Argument(format!(
                "{what} trace has a gap between {} s and {} s",
                w[0].t, w[1].t
            )));
        }
    }
    Ok(())
}

/// Re-derives both outcomes from the logged smoothed traces.
pub fn classify_outcomes(record: &TrialRecord, cfg: &ProtocolConfig) -> Result<(Outcome, Outcome)> {
    check_contiguous(&record.onset_trace, cfg.hop, "onset")?;
    check_contiguous(&record.offset_trace, cfg.hop, "offset")?;
    let cue = record.cue_time;
    let onset_end = cue + cfg.onset.decision_window;
    let mut det = HoldDetector::new(cfg.onset.threshold, cfg.hold_frames(DecoderId::Onset), cfg.hop);
    let mut onset = None;
    for f in record.onset_trace.iter().filter(|f| f.t >= cue && f.t < onset_end) {
        if let Some(d) = det.push(f.t, f.p_hat) {
            onset = Some(d);
            break;
        }
    }
    let t0 = match onset {
        Some(Detection::Hit(t0)) => t0,
        Some(Detection::Miss(_)) => return Ok((Outcome::Miss, Outcome::NotAttempted)),
        None => {
            let covered = record.onset_trace.last().is_some_and(|f| f.t + cfg.hop >= onset_end);
            if !covered {
                return Err(Error::Argument("onset trace ends before its decision window".into()));
            }
            return Ok((Outcome::Timeout, Outcome::NotAttempted));
        }
    };
    let offset_end = t0 + cfg.offset.decision_window;
    let mut det = HoldDetector::new(cfg.offset.threshold, cfg.hold_frames(DecoderId::Offset), cfg.hop);
    for f in record
        .offset_trace
        .iter()
        .filter(|f| f.t >= t0 + cfg.offset.refractory && f.t < offset_end)
    {
        match det.push(f.t, f.p_hat) {
            Some(Detection::Hit(_)) => return Ok((Outcome::Hit, Outcome::Hit)),
            Some(Detection::Miss(_)) => return Ok((Outcome::Hit, Outcome::Miss)),
            None => {}
        }
    }
    let covered = record.offset_trace.last().is_some_and(|f| f.t + cfg.hop >= offset_end);
    if !covered {
        return Err(Error::Argument("offset trace ends before its decision window".into()));
    }
    Ok((Outcome::Hit, Outcome::Timeout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::softmax_posterior;
    use proptest::prelude::*;

    const HOP: f64 = 0.0625;

    /// A posterior whose smoothed value can be steered: `p_pos` given directly.
    fn post(p: f64) -> Posterior {
        Posterior { d_pos: 1.0 - p, d_neg: p, p_pos: p }
    }

    fn cfg() -> ProtocolConfig {
        let mut c = ProtocolConfig::default();
        c.onset.threshold = 0.7;
        c.offset.threshold = 0.7;
        // No smoothing lag: with beta close to 1 the smoothed value follows the input.
        c.onset.ema_beta = 0.999_999;
        c.offset.ema_beta = 0.999_999;
        c
    }

    /// Runs a trial with per-frame raw posteriors chosen by the closures.
    fn run(c: &ProtocolConfig, onset: impl Fn(f64) -> f64, offset: impl Fn(f64) -> f64) -> TrialRecord {
        let mut m = TrialStateMachine::new(c.clone(), 0, 1).unwrap();
        let mut k = 1;
        while !m.is_done() && k < 16 * 40 {
            let t = k as f64 * HOP;
            m.advance(t, &post(onset(t)), &post(offset(t))).unwrap();
            k += 1;
        }
        m.finish(k as f64 * HOP).unwrap()
    }

    #[test]
    fn four_frame_hold_at_half_second_decides_at_three_quarters() {
        let c = cfg();
        let cue = c.cue_time();
        let on = |t: f64| if t >= cue + 0.5 && t < cue + 0.5 + 4.0 * HOP { 0.9 } else { 0.5 };
        let rec = run(&c, on, |_| 0.5);
        assert_eq!(rec.outcome_onset, Outcome::Hit);
        assert!((rec.onset_latency.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(rec.movement_onset, Some(cue + 0.75));
        assert_eq!(rec.gate_transitions[0], (cue + 0.75, true));
    }

    #[test]
    fn three_frames_never_fire() {
        let c = cfg();
        let cue = c.cue_time();
        let on = |t: f64| {
            let rel = t - cue;
            // Bursts of three frames separated by one neutral frame.
            if rel >= 0.0 && ((rel / HOP).round() as i64) % 4 != 3 { 0.9 } else { 0.5 }
        };
        let rec = run(&c, on, |_| 0.5);
        assert_eq!(rec.outcome_onset, Outcome::Timeout);
        assert_eq!(rec.outcome_offset, Outcome::NotAttempted);
    }

    #[test]
    fn onset_timeout_and_miss() {
        let c = cfg();
        let rec = run(&c, |_| 0.5, |_| 0.5);
        assert_eq!((rec.outcome_onset, rec.outcome_offset), (Outcome::Timeout, Outcome::NotAttempted));
        assert!(rec.onset_latency.is_none());
        assert_eq!(rec.decisions.last().unwrap().t, c.cue_time() + 5.0);

        let cue = c.cue_time();
        let rec = run(&c, |t| if t >= cue + 1.0 { 0.1 } else { 0.5 }, |_| 0.5);
        assert_eq!((rec.outcome_onset, rec.outcome_offset), (Outcome::Miss, Outcome::NotAttempted));
        assert!(rec.gate_transitions.is_empty());
    }

    #[test]
    fn crossings_before_the_cue_are_ignored() {
        let c = cfg();
        let rec = run(&c, |t| if t < c.cue_time() { 0.95 } else { 0.5 }, |_| 0.5);
        assert_eq!(rec.outcome_onset, Outcome::Timeout);
    }

    #[test]
    fn decision_exactly_at_window_end_counts() {
        let c = cfg();
        let cue = c.cue_time();
        let first = cue + 5.0 - 4.0 * HOP;
        let rec = run(&c, |t| if t >= first { 0.9 } else { 0.5 }, |_| 0.5);
        assert_eq!(rec.outcome_onset, Outcome::Hit);
        assert_eq!(rec.onset_latency, Some(5.0));
        let rec = run(&c, |t| if t >= first + HOP { 0.9 } else { 0.5 }, |_| 0.5);
        assert_eq!(rec.outcome_onset, Outcome::Timeout);
    }

    #[test]
    fn full_trial_hit_hit() {
        let c = cfg();
        let cue = c.cue_time();
        let t_start = cue + 1.0;
        let rec = run(
            &c,
            |t| if t >= cue + 1.0 - 4.0 * HOP { 0.9 } else { 0.5 },
            |t| if t >= t_start + 3.4 - 4.0 * HOP { 0.9 } else { 0.5 },
        );
        assert_eq!((rec.outcome_onset, rec.outcome_offset), (Outcome::Hit, Outcome::Hit));
        assert!((rec.onset_latency.unwrap() - 1.0).abs() < 1e-12);
        // 3.4 s is off the 1/16 s frame grid; the decision lands on the next frame.
        let lat = rec.offset_latency.unwrap();
        assert!(lat >= 3.4 && lat < 3.4 + HOP, "{lat}");
        assert!((rec.stop_progress.unwrap() - lat / 6.4).abs() < 1e-12);
        assert_eq!(rec.gate_transitions.len(), 2);
        let phases: Vec<_> = rec.phases.iter().map(|p| p.0).collect();
        assert_eq!(
            phases,
            vec![
                TrialPhase::Rest,
                TrialPhase::Countdown,
                TrialPhase::StartCue,
                TrialPhase::Moving,
                TrialPhase::StopHandling,
                TrialPhase::ReturnHome,
                TrialPhase::Done
            ]
        );
        assert_eq!(classify_outcomes(&rec, &c).unwrap(), (Outcome::Hit, Outcome::Hit));
    }

    #[test]
    fn offset_timeout_completes_overtravel() {
        let c = cfg();
        let cue = c.cue_time();
        let rec = run(&c, |t| if t >= cue { 0.9 } else { 0.5 }, |_| 0.5);
        assert_eq!((rec.outcome_onset, rec.outcome_offset), (Outcome::Hit, Outcome::Timeout));
        assert!(rec.offset_latency.is_none());
        assert!((rec.stop_progress.unwrap() - 11.0 / 6.4).abs() < 1e-12);
        assert_eq!(classify_outcomes(&rec, &c).unwrap(), (Outcome::Hit, Outcome::Timeout));
    }

    #[test]
    fn refractory_mutes_early_stop() {
        let c = cfg();
        let cue = c.cue_time();
        // Stop intent from the very first moving frame: earliest decision is
        // refractory + hold after movement onset.
        let rec = run(&c, |t| if t >= cue { 0.9 } else { 0.5 }, |_| 0.9);
        assert_eq!(rec.outcome_offset, Outcome::Hit);
        let lat = rec.offset_latency.unwrap();
        assert!(lat >= 1.0 + 0.25 - 1e-12 && lat <= 1.0 + 0.25 + HOP, "{lat}");
    }

    #[test]
    fn clock_must_increase() {
        let mut m = TrialStateMachine::new(cfg(), 0, 1).unwrap();
        m.advance(1.0, &post(0.5), &post(0.5)).unwrap();
        assert!(matches!(m.advance(1.0, &post(0.5), &post(0.5)), Err(Error::Protocol(_))));
        assert!(matches!(m.advance(0.5, &post(0.5), &post(0.5)), Err(Error::Protocol(_))));
    }

    #[test]
    fn finish_rejects_open_window() {
        let mut m = TrialStateMachine::new(cfg(), 0, 1).unwrap();
        m.advance(7.0, &post(0.5), &post(0.5)).unwrap();
        assert!(matches!(m.clone().finish(7.5), Err(Error::Protocol(_))));
        assert!(m.finish(11.0).is_ok());
    }

    #[test]
    fn gate_torque_examples() {
        let off = GateState { g_bci: false, last_transition_time: None };
        let on = GateState { g_bci: true, last_transition_time: Some(1.0) };
        assert_eq!(gate_torque(&off, 3.0), 0.0);
        assert_eq!(gate_torque(&on, 2.5), 2.5);
        let taus = [1.0, -2.0, 3.5, 0.25];
        let gates = [on, off, on, off];
        let out: Vec<f64> = gates.iter().zip(taus).map(|(g, t)| gate_torque(g, t)).collect();
        assert_eq!(out, vec![1.0, 0.0, 3.5, 0.0]);
    }

    #[test]
    fn classify_requires_complete_traces() {
        let c = cfg();
        let mut rec = run(&c, |_| 0.5, |_| 0.5);
        rec.onset_trace.truncate(100);
        assert!(matches!(classify_outcomes(&rec, &c), Err(Error::Argument(_))));
        let mut rec = run(&c, |_| 0.5, |_| 0.5);
        rec.onset_trace.remove(50);
        assert!(matches!(classify_outcomes(&rec, &c), Err(Error::Argument(_))));
    }

    #[test]
    fn pure_advance_matches_mutating_advance() {
        let m = TrialStateMachine::new(cfg(), 0, 1).unwrap();
        let (next, events) = advance(&m, 3.0, &post(0.5), &post(0.5)).unwrap();
        assert_eq!(m.phase(), TrialPhase::Rest);
        assert_eq!(next.phase(), TrialPhase::Countdown);
        assert_eq!(events, vec![SessionEvent::Phase { t: 3.0, phase: TrialPhase::Countdown }]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn prop_trial_invariants(
            onset in proptest::collection::vec(0.0f64..1.0, 320),
            offset in proptest::collection::vec(0.0f64..1.0, 320),
            theta in 0.3f64..0.9,
            beta in 0.1f64..0.9,
        ) {
            let mut c = ProtocolConfig::default();
            c.onset.threshold = theta;
            c.offset.threshold = theta;
            c.onset.ema_beta = beta;
            c.offset.ema_beta = beta;
            let mut m = TrialStateMachine::new(c.clone(), 0, 1).unwrap();
            let alpha = 2.0;
            let mut replay_events = Vec::new();
            for k in 0..320 {
                let t = (k + 1) as f64 * HOP;
                let mk = |p: f64| {
                    let d_pos = 1.0 - p;
                    let d_neg = p;
                    Posterior { d_pos, d_neg, p_pos: softmax_posterior(d_pos, d_neg, alpha) }
                };
                replay_events.push(m.advance(t, &mk(onset[k]), &mk(offset[k])).unwrap());
            }
            let rec = m.finish(20.0 + HOP).unwrap();

            // Gate discipline.
            let ups = rec.gate_transitions.iter().filter(|g| g.1).count();
            let downs = rec.gate_transitions.iter().filter(|g| !g.1).count();
            prop_assert!(ups <= 1 && downs <= 1);

            // Attempt gating and latency bounds.
            if rec.outcome_onset != Outcome::Hit {
                prop_assert_eq!(rec.outcome_offset, Outcome::NotAttempted);
                prop_assert!(rec.offset_latency.is_none());
            }
            if let Some(l) = rec.onset_latency { prop_assert!(l > 0.0 && l <= 5.0); }
            if let Some(l) = rec.offset_latency { prop_assert!(l > 0.0 && l <= 6.0); }
            prop_assert_eq!(rec.onset_latency.is_some(), rec.outcome_onset == Outcome::Hit);
            prop_assert_eq!(rec.offset_latency.is_some(), rec.outcome_offset == Outcome::Hit);

            // Re-derivation from the logged traces agrees with the live labels.
            let derived = classify_outcomes(&rec, &c).unwrap();
            prop_assert_eq!(derived, (rec.outcome_onset, rec.outcome_offset));

            // Smoothed values stay in [0, 1].
            for f in rec.onset_trace.iter().chain(&rec.offset_trace) {
                prop_assert!((0.0..=1.0).contains(&f.p_hat));
            }
        }
    }
}
