//! Synthetic EEG with known class structure and session drift.
//!
//! Each trial follows a fixed brain-state timeline. Narrowband sources
//! (band-pass filtered white noise) are projected through unit-norm spatial
//! patterns with a per-phase power gain; broadband sensor noise and
//! movement-related broadband activity are added on top, and the whole
//! stream is finally mixed by a congruence drift `W`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::{spd_exp, SymMatrix};

/// Brain state of the simulated subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrainPhase {
    Rest,
    /// Pre-cue fixation.
    Countdown,
    StartMi,
    /// Sustained movement with ongoing imagery.
    Maintain,
    StopMi,
    PostStop,
    ReturnHome,
}

impl BrainPhase {
    pub const ALL: [BrainPhase; 7] = [
        BrainPhase::Rest,
        BrainPhase::Countdown,
        BrainPhase::StartMi,
        BrainPhase::Maintain,
        BrainPhase::StopMi,
        BrainPhase::PostStop,
        BrainPhase::ReturnHome,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BrainPhase::Rest => "rest",
            BrainPhase::Countdown => "countdown",
            BrainPhase::StartMi => "start_mi",
            BrainPhase::Maintain => "maintain",
            BrainPhase::StopMi => "stop_mi",
            BrainPhase::PostStop => "post_stop",
            BrainPhase::ReturnHome => "return_home",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown phase {s:?}")))
    }

    /// Whether the arm is moving (adds movement broadband activity).
    pub fn is_moving(self) -> bool {
        matches!(self, BrainPhase::Maintain | BrainPhase::StopMi | BrainPhase::ReturnHome)
    }
}

/// One value per [`BrainPhase`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    pub rest: f64,
    pub countdown: f64,
    pub start_mi: f64,
    pub maintain: f64,
    pub stop_mi: f64,
    pub post_stop: f64,
    pub return_home: f64,
}

impl PhaseMap {
    pub const fn uniform(v: f64) -> Self {
        Self {
            rest: v,
            countdown: v,
            start_mi: v,
            maintain: v,
            stop_mi: v,
            post_stop: v,
            return_home: v,
        }
    }

    pub fn get(&self, phase: BrainPhase) -> f64 {
        match phase {
            BrainPhase::Rest => self.rest,
            BrainPhase::Countdown => self.countdown,
            BrainPhase::StartMi => self.start_mi,
            BrainPhase::Maintain => self.maintain,
            BrainPhase::StopMi => self.stop_mi,
            BrainPhase::PostStop => self.post_stop,
            BrainPhase::ReturnHome => self.return_home,
        }
    }

    pub fn get_mut(&mut self, phase: BrainPhase) -> &mut f64 {
        match phase {
            BrainPhase::Rest => &mut self.rest,
            BrainPhase::Countdown => &mut self.countdown,
            BrainPhase::StartMi => &mut self.start_mi,
            BrainPhase::Maintain => &mut self.maintain,
            BrainPhase::StopMi => &mut self.stop_mi,
            BrainPhase::PostStop => &mut self.post_stop,
            BrainPhase::ReturnHome => &mut self.return_home,
        }
    }

    pub fn total(&self) -> f64 {
        BrainPhase::ALL.iter().map(|&p| self.get(p)).sum()
    }
}

/// A narrowband rhythm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub freq: f64,
    pub bandwidth: f64,
    /// Power at gain 1.
    pub power: f64,
    /// Spatial pattern; normalized to unit norm on use.
    pub pattern: Vec<f64>,
    /// Power gain per phase.
    pub gains: PhaseMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSessionSpec {
    pub fs: f64,
    pub channels: usize,
    pub n_trials: usize,
    pub trials_per_run: usize,
    /// Seconds per phase.
    pub schedule: PhaseMap,
    pub sources: Vec<SourceSpec>,
    /// Per-channel power of the broadband sensor noise.
    pub noise_floor: f64,
    /// Share of the noise power carried by spatially mixed components, in [0, 1].
    pub noise_correlation: f64,
    /// Power of broadband activity added while the arm moves.
    pub movement_broadband: f64,
    /// Strength of the session-wide congruence drift.
    pub drift_strength: f64,
    /// Extra drift drawn independently for every run.
    pub run_drift_strength: f64,
    /// Seeds the subject's anatomy: noise mixing and movement pattern.
    pub structure_seed: u64,
    /// Seeds the session drift.
    pub drift_seed: u64,
    /// Seeds the signal realization.
    pub seed: u64,
}

/// Row-major positions of the default montage on a 4 x 4 grid.
fn grid_pos(ch: usize) -> (f64, f64) {
    ((ch % 4) as f64, (ch / 4) as f64)
}

/// Gaussian blob on the channel grid centred on `center`, unit norm.
pub fn blob_pattern(channels: usize, center: usize, width: f64) -> Vec<f64> {
    let (cx, cy) = grid_pos(center);
    let v: Vec<f64> = (0..channels)
        .map(|ch| {
            let (x, y) = grid_pos(ch);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * width * width)).exp()
        })
        .collect();
    normalize(&v)
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

impl SyntheticSessionSpec {
    /// Desk-scale default: 16 channels, two sensorimotor mu sources with
    /// desynchronization during imagery and movement, two beta sources with
    /// a rebound at Stop MI, and a class-neutral occipital alpha source.
    pub fn default_spec() -> Self {
        let channels = 16;
        let mu_gains = PhaseMap {
            rest: 1.0,
            countdown: 1.0,
            start_mi: 0.5,
            maintain: 0.5,
            stop_mi: 0.8,
            post_stop: 1.0,
            return_home: 0.6,
        };
        let beta_gains = PhaseMap {
            rest: 1.0,
            countdown: 1.0,
            start_mi: 0.6,
            maintain: 0.6,
            stop_mi: 2.0,
            post_stop: 1.4,
            return_home: 0.7,
        };
        let source = |name: &str, freq: f64, bandwidth: f64, power: f64, center: usize, gains: PhaseMap| SourceSpec {
            name: name.into(),
            freq,
            bandwidth,
            power,
            pattern: blob_pattern(channels, center, 0.8),
            gains,
        };
        Self {
            fs: 512.0,
            channels,
            n_trials: 20,
            trials_per_run: 10,
            schedule: PhaseMap::uniform(3.0),
            sources: vec![
                source("mu_left", 10.0, 2.0, 0.1, 5, mu_gains),
                source("mu_right", 11.0, 2.0, 0.1, 6, mu_gains),
                source("beta_left", 20.0, 4.0, 0.05, 9, beta_gains),
                source("beta_right", 22.0, 4.0, 0.05, 10, beta_gains),
                source("alpha_occipital", 10.0, 2.0, 1.0, 13, PhaseMap::uniform(1.0)),
            ],
            noise_floor: 2.0,
            noise_correlation: 0.5,
            movement_broadband: 2.0,
            drift_strength: 0.0,
            run_drift_strength: 0.0,
            structure_seed: 1,
            drift_seed: 2,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Argument(format!("fs must be positive, got {}", self.fs)));
        }
        if self.channels < 2 {
            return Err(Error::Argument("synthetic montage needs at least 2 channels".into()));
        }
        if self.n_trials == 0 {
            return Err(Error::Argument("empty session: n_trials is 0".into()));
        }
        if self.trials_per_run == 0 {
            return Err(Error::Argument("trials_per_run must be at least 1".into()));
        }
        for p in BrainPhase::ALL {
            let d = self.schedule.get(p);
            if !(d >= 0.0 && d.is_finite()) || ((d * self.fs) - (d * self.fs).round()).abs() > 1e-9 {
                return Err(Error::Argument(format!(
                    "phase {} lasts {d} s, not a whole number of samples",
                    p.as_str()
                )));
            }
        }
        if self.schedule.total() <= 0.0 {
            return Err(Error::Argument("trial timeline has zero length".into()));
        }
        for s in &self.sources {
            if s.pattern.len() != self.channels {
                return Err(Error::shape(
                    format!("pattern of {} channels for source {}", self.channels, s.name),
                    s.pattern.len(),
                ));
            }
            if s.pattern.iter().all(|&v| v == 0.0) || s.pattern.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("source {} has a degenerate pattern", s.name)));
            }
            if !(s.freq > 0.0 && s.freq < self.fs / 2.0) || !(s.bandwidth > 0.0) || s.freq - s.bandwidth / 2.0 <= 0.0 {
                return Err(Error::Argument(format!(
                    "source {} band {} +/- {} Hz is invalid at fs = {}",
                    s.name,
                    s.freq,
                    s.bandwidth / 2.0,
                    self.fs
                )));
            }
            if !(s.power >= 0.0) || BrainPhase::ALL.iter().any(|&p| !(s.gains.get(p) >= 0.0)) {
                return Err(Error::Argument(format!("source {} has a negative power or gain", s.name)));
            }
        }
        for (name, v) in [
            ("noise_floor", self.noise_floor),
            ("movement_broadband", self.movement_broadband),
            ("drift_strength", self.drift_strength),
            ("run_drift_strength", self.run_drift_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_correlation) {
            return Err(Error::Argument(format!(
                "noise_correlation must lie in [0, 1], got {}",
                self.noise_correlation
            )));
        }
        Ok(())
    }

    pub fn trial_frames(&self) -> usize {
        BrainPhase::ALL
            .iter()
            .map(|&p| (self.schedule.get(p) * self.fs).round() as usize)
            .sum()
    }

    pub fn total_frames(&self) -> usize {
        self.trial_frames() * self.n_trials
    }

    pub fn n_runs(&self) -> usize {
        self.n_trials.div_ceil(self.trials_per_run)
    }

    /// Copy in which every phase carries the gains of `phase`, so the whole
    /// stream belongs to one class.
    pub fn with_constant_phase(&self, phase: BrainPhase) -> Self {
        let mut spec = self.clone();
        for s in &mut spec.sources {
            s.gains = PhaseMap::uniform(s.gains.get(phase));
        }
        spec
    }

    /// Copy in which every phase except the fixation countdown carries the
    /// gains of `phase`. Movement activity is kept only if `phase` moves the arm.
    pub fn positive_only(&self, phase: BrainPhase) -> Self {
        let mut spec = self.clone();
        for s in &mut spec.sources {
            let fixation = s.gains.countdown;
            s.gains = PhaseMap::uniform(s.gains.get(phase));
            s.gains.countdown = fixation;
        }
        if !phase.is_moving() {
            spec.movement_broadband = 0.0;
        }
        spec
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.channels).map(|i| format!("ch{:02}", i + 1)).collect()
    }
}

/// A contiguous stretch of frames in one brain phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub phase: BrainPhase,
    pub trial: usize,
    pub run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialTruth {
    pub trial_id: usize,
    pub run: usize,
    pub target_id: u8,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Intended Start MI onset, seconds from the stream start.
    pub start_time: f64,
    /// Intended Stop MI onset, seconds from the stream start.
    pub stop_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub fs: f64,
    pub n_frames: usize,
    pub channels: usize,
    /// Phase labels, run-length encoded in frame order.
    pub segments: Vec<PhaseSegment>,
    pub trials: Vec<TrialTruth>,
    /// Session drift, row-major.
    pub drift: Vec<f64>,
    /// Per-run drift actually applied (session drift times run drift), row-major.
    pub run_drifts: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn n_runs(&self) -> usize {
        self.trials.iter().map(|t| t.run + 1).max().unwrap_or(0)
    }

    /// Phase of every frame.
    pub fn frame_phases(&self) -> Vec<BrainPhase> {
        let mut out = Vec::with_capacity(self.n_frames);
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.phase, s.end_frame - s.start_frame));
        }
        out
    }

    /// The segment containing frames `[start, end)` entirely, if any.
    pub fn segment_covering(&self, start: usize, end: usize) -> Option<&PhaseSegment> {
        let i = self.segments.partition_point(|s| s.end_frame <= start);
        self.segments
            .get(i)
            .filter(|s| s.start_frame <= start && end <= s.end_frame)
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.segments {
            if s.start_frame != next || s.end_frame < s.start_frame {
                return Err(Error::Format(format!(
                    "ground-truth segments are not contiguous at frame {}",
                    s.start_frame
                )));
            }
            next = s.end_frame;
        }
        if next != self.n_frames {
            return Err(Error::Format(format!(
                "ground truth covers {next} frames, stream has {}",
                self.n_frames
            )));
        }
        Ok(())
    }
}

/// Frame-major multichannel recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub fs: f64,
    pub channel_names: Vec<String>,
    /// `n_frames * channels` samples, frame-major.
    pub data: Vec<f32>,
}

impl Recording {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.channels().max(1)
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.data[i * c..(i + 1) * c]
    }
}

/// `spd_exp(strength * D)` for a random symmetric `D` of unit Frobenius norm.
pub fn make_drift(dim: usize, strength: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !strength.is_finite() {
        return Err(Error::Argument(format!("drift strength must be finite, got {strength}")));
    }
    if strength == 0.0 {
        return Ok(DMatrix::identity(dim, dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sym = (&g + g.transpose()) * 0.5;
    let dir = &sym / sym.norm();
    Ok(spd_exp(&SymMatrix::new(dir * strength)?)?.into_matrix())
}

/// Second-order resonator with unit peak gain at `freq` and -3 dB bandwidth `bw`.
#[derive(Clone, Copy, Debug)]
struct Resonator {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    s1: f64,
    s2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * freq / fs;
        let q = freq / bw;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            s1: 0.0,
            s2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.s1;
        self.s1 = -self.a1 * y + self.s2;
        self.s2 = self.b2 * x - self.a2 * y;
        y
    }

    /// Output variance for unit-variance white input: sum of the squared impulse response.
    fn noise_gain(&self) -> f64 {
        let mut probe = Resonator { s1: 0.0, s2: 0.0, ..*self };
        let mut acc = probe.step(1.0).powi(2);
        for _ in 0..200_000 {
            let y = probe.step(0.0);
            acc += y * y;
            if y.abs() < 1e-14 && probe.s1.abs() < 1e-14 && probe.s2.abs() < 1e-14 {
                break;
            }
        }
        acc
    }
}

/// Noise mixing of the subject: `noise = L z` with `diag(L L^T)` equal to the floor.
fn noise_mixing(spec: &SyntheticSessionSpec) -> DMatrix<f64> {
    let c = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed ^ 0x6e6f_6973_65);
    let g = DMatrix::from_fn(c, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut l = DMatrix::<f64>::zeros(c, c);
    for i in 0..c {
        let row_norm = g.row(i).norm();
        for j in 0..c {
            l[(i, j)] = spec.noise_correlation.sqrt() * g[(i, j)] / row_norm;
        }
        l[(i, i)] += (1.0 - spec.noise_correlation).sqrt();
    }
    // Rescale rows so every channel carries exactly the noise floor.
    for i in 0..c {
        let n = l.row(i).norm();
        for j in 0..c {
            l[(i, j)] *= spec.noise_floor.sqrt() / n;
        }
    }
    l
}

fn movement_pattern(spec: &SyntheticSessionSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed ^ 0x6d6f_7665);
    let v: Vec<f64> = (0..spec.channels).map(|_| 0.5 + rng.random::<f64>()).collect();
    normalize(&v)
}

/// Timeline of a session without generating samples.
pub fn session_timeline(spec: &SyntheticSessionSpec) -> Result<(Vec<PhaseSegment>, Vec<TrialTruth>)> {
    spec.validate()?;
    let mut segments = Vec::new();
    let mut trials = Vec::new();
    let mut frame = 0usize;
    for trial in 0..spec.n_trials {
        let run = trial / spec.trials_per_run;
        let start = frame;
        let mut start_time = f64::NAN;
        let mut stop_time = f64::NAN;
        for phase in BrainPhase::ALL {
            let n = (spec.schedule.get(phase) * spec.fs).round() as usize;
            if phase == BrainPhase::StartMi {
                start_time = frame as f64 / spec.fs;
            }
            if phase == BrainPhase::StopMi {
                stop_time = frame as f64 / spec.fs;
            }
            if n > 0 {
                segments.push(PhaseSegment {
                    start_frame: frame,
                    end_frame: frame + n,
                    phase,
                    trial,
                    run,
                });
            }
            frame += n;
        }
        trials.push(TrialTruth {
            trial_id: trial,
            run,
            target_id: (trial % 3) as u8 + 1,
            start_frame: start,
            end_frame: frame,
            start_time,
            stop_time,
        });
    }
    Ok((segments, trials))
}

/// Generates one session.
pub fn generate_session(spec: &SyntheticSessionSpec) -> Result<(Recording, GroundTruth)> {
    let (segments, trials) = session_timeline(spec)?;
    let c = spec.channels;
    let n_frames = spec.total_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let patterns: Vec<Vec<f64>> = spec.sources.iter().map(|s| normalize(&s.pattern)).collect();
    let mut resonators: Vec<Resonator> = spec
        .sources
        .iter()
        .map(|s| Resonator::new(s.freq, s.bandwidth, spec.fs))
        .collect();
    let input_scale: Vec<f64> = resonators.iter().map(|r| 1.0 / r.noise_gain().sqrt()).collect();
    let mixing = noise_mixing(spec);
    let move_pattern = movement_pattern(spec);

    let session_w = make_drift(c, spec.drift_strength, spec.drift_seed)?;
    let run_ws: Vec<DMatrix<f64>> = (0..spec.n_runs())
        .map(|r| {
            let seed = spec.drift_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(r as u64 + 1);
            make_drift(c, spec.run_drift_strength, seed).map(|w| w * &session_w)
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(n_frames * c);
    let mut x = DVector::<f64>::zeros(c);
    let mut z = DVector::<f64>::zeros(c);
    for seg in &segments {
        let w = &run_ws[seg.run];
        let amps: Vec<f64> = spec
            .sources
            .iter()
            .map(|s| (s.power * s.gains.get(seg.phase)).sqrt())
            .collect();
        let move_amp = if seg.phase.is_moving() { spec.movement_broadband.sqrt() } else { 0.0 };
        for _ in seg.start_frame..seg.end_frame {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            x.gemv(1.0, &mixing, &z, 0.0);
            for (k, res) in resonators.iter_mut().enumerate() {
                let v = res.step(rng.sample::<f64, _>(StandardNormal) * input_scale[k]) * amps[k];
                for (xi, p) in x.iter_mut().zip(&patterns[k]) {
                    *xi += v * p;
                }
            }
            // Drawn every frame so phase changes do not shift the random stream.
            let m: f64 = rng.sample(StandardNormal);
            for (xi, p) in x.iter_mut().zip(&move_pattern) {
                *xi += move_amp * m * p;
            }
            let y = w * &x;
            data.extend(y.iter().map(|&v| v as f32));
        }
    }
    let truth = GroundTruth {
        fs: spec.fs,
        n_frames,
        channels: c,
        segments,
        trials,
        drift: session_w.transpose().iter().copied().collect(),
        run_drifts: run_ws.iter().map(|w| w.transpose().iter().copied().collect()).collect(),
    };
    let rec = Recording {
        fs: spec.fs,
        channel_names: spec.channel_names(),
        data,
    };
    Ok((rec, truth))
}
