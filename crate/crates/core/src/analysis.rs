//! Offline analytics over replayed sessions: AUC, margin-shift bias, exact
//! Wilcoxon tests, outcome statistics and ERD/ERS spectrograms.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::decoder::median;
use crate::error::{Error, Result};
use crate::session::{Outcome, TrialRecord};

/// Largest sample size for the exact signed-rank enumeration.
pub const WILCOXON_MAX_N: usize = 20;

/// Rank-based (Mann-Whitney) AUC of `m` as a score for the positive class.
///
/// Ties between classes count one half.
pub fn run_auc(margins: &[(f64, bool)]) -> Result<f64> {
    if let Some((m, _)) = margins.iter().find(|(m, _)| m.is_nan()) {
        return Err(Error::NumericDomain(format!("margin {m} is not a number")));
    }
    let n_pos = margins.iter().filter(|(_, l)| *l).count();
    let n_neg = margins.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative samples"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = margins.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * sorted[i..=j].iter().filter(|(_, l)| *l).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// [`run_auc`] over separate score lists.
pub fn auc_from_scores(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    let labeled: Vec<(f64, bool)> = positives
        .iter()
        .map(|&m| (m, true))
        .chain(negatives.iter().map(|&m| (m, false)))
        .collect();
    run_auc(&labeled)
}

/// How the two per-class summaries of a [`BiasReport`] were formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftBasis {
    /// Median margin of each labeled class.
    ClassMargin,
    /// Median distance to each prototype over one set of samples.
    PrototypeDistance,
}

/// Change of class separation between a treatment and a baseline reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub basis: ShiftBasis,
    pub treatment: String,
    pub baseline: String,
    /// Per-class summary under the treatment reference.
    pub pos_treatment: f64,
    pub neg_treatment: f64,
    /// Per-class summary under the baseline reference.
    pub pos_baseline: f64,
    pub neg_baseline: f64,
    pub delta_pos: f64,
    pub delta_neg: f64,
    /// Always `delta_pos - delta_neg`.
    pub delta_sep: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl BiasReport {
    fn new(
        basis: ShiftBasis,
        names: (&str, &str),
        treatment: (f64, f64),
        baseline: (f64, f64),
        delta_pos: f64,
        delta_neg: f64,
        counts: (usize, usize),
    ) -> Self {
        Self {
            basis,
            treatment: names.0.into(),
            baseline: names.1.into(),
            pos_treatment: treatment.0,
            neg_treatment: treatment.1,
            pos_baseline: baseline.0,
            neg_baseline: baseline.1,
            delta_pos,
            delta_neg,
            delta_sep: delta_pos - delta_neg,
            n_pos: counts.0,
            n_neg: counts.1,
        }
    }
}

/// Median-margin shift per class: `delta_pos = med m_pos(treatment) - med m_pos(baseline)`,
/// likewise for negatives.
///
/// Both inputs must score the same samples in the same order.
pub fn margin_shift(
    treatment: &[(f64, bool)],
    baseline: &[(f64, bool)],
    names: (&str, &str),
) -> Result<BiasReport> {
    if treatment.len() != baseline.len() {
        return Err(Error::Argument(format!(
            "margin sets differ in size ({} vs {})",
            treatment.len(),
            baseline.len()
        )));
    }
    if treatment.iter().zip(baseline).any(|(a, b)| a.1 != b.1) {
        return Err(Error::Argument("margin sets label different samples".into()));
    }
    let class = |set: &[(f64, bool)], label: bool| -> Vec<f64> {
        set.iter().filter(|(_, l)| *l == label).map(|(m, _)| *m).collect()
    };
    let mut summaries = [0.0; 4];
    for (slot, (set, label)) in [(treatment, true), (treatment, false), (baseline, true), (baseline, false)]
        .into_iter()
        .enumerate()
    {
        let mut v = class(set, label);
        if v.is_empty() {
            return Err(Error::Argument(format!(
                "no {} samples to compare",
                if label { "positive" } else { "negative" }
            )));
        }
        summaries[slot] = median(&mut v);
    }
    let n_pos = treatment.iter().filter(|(_, l)| *l).count();
    Ok(BiasReport::new(
        ShiftBasis::ClassMargin,
        names,
        (summaries[0], summaries[1]),
        (summaries[2], summaries[3]),
        summaries[0] - summaries[2],
        summaries[1] - summaries[3],
        (n_pos, treatment.len() - n_pos),
    ))
}

/// Prototype-distance decomposition of the shift on one sample set.
///
/// Inputs are `(d_pos, d_neg)` per sample. `delta_pos = med d_pos(baseline) -
/// med d_pos(treatment)` is positive when the treatment moves samples towards
/// the positive prototype, `delta_neg` likewise for the negative prototype, so
/// `delta_sep` equals the change of the median-distance margin.
pub fn distance_shift(
    treatment: &[(f64, f64)],
    baseline: &[(f64, f64)],
    names: (&str, &str),
) -> Result<BiasReport> {
    if treatment.len() != baseline.len() {
        return Err(Error::Argument(format!(
            "distance sets differ in size ({} vs {})",
            treatment.len(),
            baseline.len()
        )));
    }
    if treatment.is_empty() {
        return Err(Error::Argument("no samples to compare".into()));
    }
    let med = |set: &[(f64, f64)], pick: fn(&(f64, f64)) -> f64| median(&mut set.iter().map(pick).collect::<Vec<_>>());
    let tp = med(treatment, |d| d.0);
    let tn = med(treatment, |d| d.1);
    let bp = med(baseline, |d| d.0);
    let bn = med(baseline, |d| d.1);
    Ok(BiasReport::new(
        ShiftBasis::PrototypeDistance,
        names,
        (tp, tn),
        (bp, bn),
        bp - tp,
        bn - tn,
        (treatment.len(), treatment.len()),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    pub p_two_sided: f64,
}

/// Midranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        // Doubled midrank of positions i..=j (1-based): i + j + 2.
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Null distribution of the doubled `W+` over all `2^n` sign assignments:
/// entry `s` is the probability that the doubled positive rank sum equals `s`.
pub fn signed_rank_null(doubled: &[u64]) -> Vec<f64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in doubled {
        for s in (r as usize..counts.len()).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let denom = 2f64.powi(doubled.len() as i32);
    counts.into_iter().map(|c| c as f64 / denom).collect()
}

/// Exact paired signed-rank test. Zero differences are dropped; tied
/// magnitudes get midranks.
pub fn wilcoxon_signed_rank_exact(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NumericDomain("non-finite paired difference".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::UndefinedTest(format!(
            "all {} paired differences are zero",
            diffs.len()
        )));
    }
    if nz.len() > WILCOXON_MAX_N {
        return Err(Error::Argument(format!(
            "exact enumeration supports at most {WILCOXON_MAX_N} non-zero pairs, got {}",
            nz.len()
        )));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w_plus2: u64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = ranks.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let stat2 = w_plus2.min(w_minus2);
    let null = signed_rank_null(&ranks);
    // Symmetric null: P(min <= stat) = 2 P(W+ <= stat), capped at 1.
    let tail: f64 = null[..=stat2 as usize].iter().sum();
    Ok(WilcoxonResult {
        n: nz.len(),
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        statistic: stat2 as f64 / 2.0,
        p_two_sided: (2.0 * tail).min(1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProportions {
    pub n: usize,
    pub hit: f64,
    pub miss: f64,
    pub timeout: f64,
}

impl OutcomeProportions {
    fn from_outcomes(outcomes: &[Outcome]) -> Option<Self> {
        if outcomes.is_empty() {
            return None;
        }
        let n = outcomes.len();
        let share = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count() as f64 / n as f64;
        Some(Self {
            n,
            hit: share(Outcome::Hit),
            miss: share(Outcome::Miss),
            timeout: share(Outcome::Timeout),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single value.
    pub sd: Option<f64>,
}

impl LatencyStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { n: 0, mean: None, sd: None };
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { n, mean: Some(mean), sd: Some(sd) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub auc_onset: Option<f64>,
    pub auc_offset: Option<f64>,
    /// Over all trials.
    pub onset: OutcomeProportions,
    /// Over onset hits only; `None` when no trial reached movement.
    pub offset: Option<OutcomeProportions>,
    pub onset_latency: LatencyStats,
    pub offset_latency: LatencyStats,
}

/// Outcome proportions and hit latencies of one run. AUCs are left empty.
pub fn outcome_latency_stats(run_id: &str, records: &[TrialRecord]) -> Result<RunMetrics> {
    if records.is_empty() {
        return Err(Error::Argument(format!("run {run_id} has no trials")));
    }
    let onset: Vec<Outcome> = records.iter().map(|r| r.outcome_onset).collect();
    let attempted: Vec<&TrialRecord> = records.iter().filter(|r| r.outcome_onset == Outcome::Hit).collect();
    let offset: Vec<Outcome> = attempted.iter().map(|r| r.outcome_offset).collect();
    if offset.contains(&Outcome::NotAttempted) {
        return Err(Error::Argument(format!(
            "run {run_id}: an onset hit has no offset outcome"
        )));
    }
    let onset_lat: Vec<f64> = records
        .iter()
        .filter(|r| r.outcome_onset == Outcome::Hit)
        .filter_map(|r| r.onset_latency)
        .collect();
    let offset_lat: Vec<f64> = attempted
        .iter()
        .filter(|r| r.outcome_offset == Outcome::Hit)
        .filter_map(|r| r.offset_latency)
        .collect();
    Ok(RunMetrics {
        run_id: run_id.into(),
        auc_onset: None,
        auc_offset: None,
        onset: OutcomeProportions::from_outcomes(&onset).expect("records are non-empty"),
        offset: OutcomeProportions::from_outcomes(&offset),
        onset_latency: LatencyStats::of(&onset_lat),
        offset_latency: LatencyStats::of(&offset_lat),
    })
}

/// Percentile bootstrap confidence interval of the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Argument("bootstrap of an empty sample".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!(
            "bootstrap needs resamples > 0 and level in (0, 1), got {resamples} and {level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| {
        let pos = p * (resamples - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        means[lo] + (means[hi] - means[lo]) * (pos - lo as f64)
    };
    let tail = (1.0 - level) / 2.0;
    Ok((q(tail), q(1.0 - tail)))
}

/// Whether spectrogram values are log ratios of power or of its square root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralScale {
    Power,
    Amplitude,
}

impl SpectralScale {
    pub fn as_str(self) -> &'static str {
        match self {
            SpectralScale::Power => "power",
            SpectralScale::Amplitude => "amplitude",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    /// Sliding window, seconds.
    pub window: f64,
    pub hop: f64,
    /// Welch sub-segment, seconds; sub-segments overlap by half.
    pub segment: f64,
    pub nfft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub scale: SpectralScale,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            window: 0.5,
            hop: 0.0625,
            segment: 0.25,
            nfft: 256,
            fmin: 4.0,
            fmax: 40.0,
            scale: SpectralScale::Power,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        let frames = |s: f64| s * fs;
        for (name, v) in [("window", self.window), ("hop", self.hop), ("segment", self.segment)] {
            let f = frames(v);
            if !(f >= 1.0) || (f - f.round()).abs() > 1e-9 {
                return Err(Error::Argument(format!(
                    "spectrogram {name} of {v} s is not a positive whole number of samples"
                )));
            }
        }
        let seg = frames(self.segment).round() as usize;
        if seg < 2 || seg % 2 != 0 || self.segment > self.window || self.nfft < seg {
            return Err(Error::Argument(format!(
                "segment of {seg} samples must be even, fit the window and not exceed nfft {}",
                self.nfft
            )));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::Argument(format!("bad band {}-{} Hz", self.fmin, self.fmax)));
        }
        Ok(())
    }
}

/// One channel of a baseline-normalized spectrogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramResult {
    pub channel: usize,
    pub freqs: Vec<f64>,
    /// Window centres, seconds from the segment start.
    pub times: Vec<f64>,
    /// `values[f][t]`; `None` where the baseline is zero.
    pub values: Vec<Vec<Option<f64>>>,
    /// Baseline spectrum on the chosen scale.
    pub baseline: Vec<f64>,
    pub scale: SpectralScale,
}

impl SpectrogramResult {
    pub fn freq_index(&self, f: f64) -> Option<usize> {
        self.freqs
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f).abs().total_cmp(&(b.1 - f).abs()))
            .map(|(i, _)| i)
    }

    /// Mean over windows whose centre lies in `[t0, t1)`, skipping undefined cells.
    pub fn mean_over(&self, f_idx: usize, t0: f64, t1: f64) -> Option<f64> {
        let cells: Vec<f64> = self
            .times
            .iter()
            .zip(&self.values[f_idx])
            .filter(|(t, _)| **t >= t0 && **t < t1)
            .filter_map(|(_, v)| *v)
            .collect();
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    }
}

struct Welch {
    seg: usize,
    nfft: usize,
    taper: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bins: Vec<usize>,
}

impl Welch {
    fn new(cfg: &SpectrogramConfig, fs: f64) -> Self {
        let seg = (cfg.segment * fs).round() as usize;
        let taper = (0..seg)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / seg as f64).cos())
            .collect();
        let bins = (0..=cfg.nfft / 2)
            .filter(|&b| {
                let f = b as f64 * fs / cfg.nfft as f64;
                f >= cfg.fmin - 1e-9 && f <= cfg.fmax + 1e-9
            })
            .collect();
        Self {
            seg,
            nfft: cfg.nfft,
            taper,
            fft: FftPlanner::new().plan_fft_forward(cfg.nfft),
            bins,
        }
    }

    /// Averaged periodogram of `x` over half-overlapping Hann segments.
    fn power(&self, x: &[f64]) -> Vec<f64> {
        let step = self.seg / 2;
        let mut acc = vec![0.0; self.bins.len()];
        let mut count = 0;
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        let mut start = 0;
        while start + self.seg <= x.len() {
            let s = &x[start..start + self.seg];
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (&v, &w)) in s.iter().zip(&self.taper).enumerate() {
                buf[i] = Complex::new((v - mean) * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (a, &b) in acc.iter_mut().zip(&self.bins) {
                *a += buf[b].norm_sqr();
            }
            count += 1;
            start += step;
        }
        acc.iter().map(|a| a / count as f64).collect()
    }
}

/// Sliding-window Welch spectrogram of `channels` in a frame-major segment,
/// normalized by the baseline spectrum `B(f)`: `values = log10(A(f, t) / B(f))`.
///
/// `B(f)` is the log-domain mean over windows lying entirely in
/// `baseline = [start, end)` seconds from the segment start, so a stationary
/// stretch averages to zero whatever the estimator's spread.
pub fn welch_spectrogram(
    data: &[f32],
    n_channels: usize,
    fs: f64,
    channels: &[usize],
    baseline: (f64, f64),
    cfg: &SpectrogramConfig,
) -> Result<Vec<SpectrogramResult>> {
    cfg.validate(fs)?;
    if n_channels == 0 || data.len() % n_channels != 0 {
        return Err(Error::shape(format!("a multiple of {n_channels} samples"), data.len()));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= n_channels) {
        return Err(Error::Argument(format!("channel {bad} out of range 0..{n_channels}")));
    }
    let n_frames = data.len() / n_channels;
    let win = (cfg.window * fs).round() as usize;
    let hop = (cfg.hop * fs).round() as usize;
    if n_frames < win {
        return Err(Error::Argument(format!(
            "segment of {n_frames} frames is shorter than one {win}-frame window"
        )));
    }
    let n_win = (n_frames - win) / hop + 1;
    let times: Vec<f64> = (0..n_win).map(|k| (k * hop) as f64 / fs + cfg.window / 2.0).collect();
    let in_baseline: Vec<usize> = (0..n_win)
        .filter(|&k| {
            let s = (k * hop) as f64 / fs;
            s >= baseline.0 - 1e-9 && s + cfg.window <= baseline.1 + 1e-9
        })
        .collect();
    if in_baseline.is_empty() {
        return Err(Error::Argument(format!(
            "no full {} s window inside the baseline {:?}",
            cfg.window, baseline
        )));
    }
    let welch = Welch::new(cfg, fs);
    let freqs: Vec<f64> = welch.bins.iter().map(|&b| b as f64 * fs / cfg.nfft as f64).collect();
    let exponent = match cfg.scale {
        SpectralScale::Power => 1.0,
        SpectralScale::Amplitude => 0.5,
    };
    let mut out = Vec::with_capacity(channels.len());
    let mut x = vec![0.0; win];
    for &ch in channels {
        let spectra: Vec<Vec<f64>> = (0..n_win)
            .map(|k| {
                for (i, v) in x.iter_mut().enumerate() {
                    *v = data[(k * hop + i) * n_channels + ch] as f64;
                }
                welch.power(&x).into_iter().map(|p| p.powf(exponent)).collect()
            })
            .collect();
        let baseline_spec: Vec<f64> = (0..freqs.len())
            .map(|f| {
                let logs: Vec<f64> = in_baseline.iter().map(|&k| spectra[k][f].log10()).collect();
                if logs.iter().any(|l| !l.is_finite()) {
                    0.0
                } else {
                    10f64.powf(logs.iter().sum::<f64>() / logs.len() as f64)
                }
            })
            .collect();
        let values = (0..freqs.len())
            .map(|f| {
                (0..n_win)
                    .map(|k| {
                        let b = baseline_spec[f];
                        let a = spectra[k][f];
                        (b > 0.0 && a > 0.0).then(|| (a / b).log10())
                    })
                    .collect()
            })
            .collect();
        out.push(SpectrogramResult {
            channel: ch,
            freqs: freqs.clone(),
            times: times.clone(),
            values,
            baseline: baseline_spec,
            scale: cfg.scale,
        });
    }
    Ok(out)
}

/// Cell-wise mean of per-trial spectrograms sharing a grid.
pub fn average_spectrograms(trials: &[SpectrogramResult]) -> Result<SpectrogramResult> {
    let first = trials
        .first()
        .ok_or_else(|| Error::Argument("no spectrograms to average".into()))?;
    if trials
        .iter()
        .any(|s| s.freqs != first.freqs || s.times.len() != first.times.len() || s.channel != first.channel)
    {
        return Err(Error::Argument("spectrograms do not share a grid".into()));
    }
    let values = (0..first.freqs.len())
        .map(|f| {
            (0..first.times.len())
                .map(|t| {
                    let cells: Option<Vec<f64>> = trials.iter().map(|s| s.values[f][t]).collect();
                    cells.map(|c| c.iter().sum::<f64>() / c.len() as f64)
                })
                .collect()
        })
        .collect();
    let baseline = (0..first.freqs.len())
        .map(|f| trials.iter().map(|s| s.baseline[f]).sum::<f64>() / trials.len() as f64)
        .collect();
    Ok(SpectrogramResult {
        channel: first.channel,
        freqs: first.freqs.clone(),
        times: first.times.clone(),
        values,
        baseline,
        scale: first.scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn brute_force_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_from_scores(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc_from_scores(&[1.0; 3], &[1.0; 4]).unwrap(), 0.5);
        // Pairwise count: 11 wins out of 16.
        let pos = [2.0, 3.0, 5.0, 7.0];
        let neg = [1.0, 4.0, 6.0, 0.0];
        assert_eq!(brute_force_auc(&pos, &neg), 11.0 / 16.0);
        assert_eq!(auc_from_scores(&pos, &neg).unwrap(), 0.6875);
        assert!(matches!(auc_from_scores(&[1.0], &[]), Err(Error::UndefinedAuc(_))));
        assert!(matches!(run_auc(&[]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn auc_matches_pair_count_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let np = rng.random_range(1..15);
            let nn = rng.random_range(1..15);
            // Coarse grid to force ties.
            let mut draw = || (rng.random_range(0..8) as f64) * 0.5;
            let pos: Vec<f64> = (0..np).map(|_| draw()).collect();
            let neg: Vec<f64> = (0..nn).map(|_| draw()).collect();
            assert_eq!(auc_from_scores(&pos, &neg).unwrap(), brute_force_auc(&pos, &neg));
        }
    }

    proptest! {
        #[test]
        fn auc_monotone_invariance_and_complement(
            pos in prop::collection::vec(-3.0f64..3.0, 1..20),
            neg in prop::collection::vec(-3.0f64..3.0, 1..20),
        ) {
            let base = auc_from_scores(&pos, &neg).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let lin = |v: &[f64]| v.iter().map(|m| 2.0 * m + 1.0).collect::<Vec<_>>();
            let th = |v: &[f64]| v.iter().map(|m| m.tanh()).collect::<Vec<_>>();
            prop_assert_eq!(auc_from_scores(&lin(&pos), &lin(&neg)).unwrap(), base);
            prop_assert_eq!(auc_from_scores(&th(&pos), &th(&neg)).unwrap(), base);
            let flipped = auc_from_scores(&neg, &pos).unwrap();
            prop_assert!((flipped - (1.0 - base)).abs() < 1e-12);
        }

        #[test]
        fn delta_sep_is_delta_pos_minus_delta_neg(
            a in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..30),
            shift in -1.0f64..1.0,
        ) {
            prop_assume!(a.iter().any(|x| x.1) && a.iter().any(|x| !x.1));
            let b: Vec<(f64, bool)> = a.iter().map(|&(m, l)| (m * 0.7 + shift, l)).collect();
            let r = margin_shift(&a, &b, ("task", "identity")).unwrap();
            prop_assert_eq!(r.delta_sep, r.delta_pos - r.delta_neg);
            let d: Vec<(f64, f64)> = a.iter().map(|&(m, _)| (m.abs(), (m + shift).abs())).collect();
            let r = distance_shift(&d, &d.iter().rev().copied().collect::<Vec<_>>(), ("x", "y")).unwrap();
            prop_assert_eq!(r.delta_sep, r.delta_pos - r.delta_neg);
        }

        #[test]
        fn wilcoxon_p_in_unit_interval(d in prop::collection::vec(-5.0f64..5.0, 1..14)) {
            prop_assume!(d.iter().any(|&x| x != 0.0));
            let r = wilcoxon_signed_rank_exact(&d).unwrap();
            prop_assert!(r.p_two_sided > 0.0 && r.p_two_sided <= 1.0);
            prop_assert!((r.w_plus + r.w_minus - (r.n * (r.n + 1)) as f64 / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn margin_shift_examples() {
        let a = vec![(1.0, true), (2.0, true), (-1.0, false), (-3.0, false)];
        let r = margin_shift(&a, &a, ("task", "identity")).unwrap();
        assert_eq!((r.delta_pos, r.delta_neg, r.delta_sep), (0.0, 0.0, 0.0));
        let squeezed: Vec<(f64, bool)> = a.iter().map(|&(m, l)| (m * 0.5, l)).collect();
        let r = margin_shift(&squeezed, &a, ("task", "identity")).unwrap();
        assert_eq!(r.delta_pos, 0.75 - 1.5);
        assert_eq!(r.delta_neg, -1.0 - (-2.0));
        assert!(r.delta_sep < 0.0);
        let only_pos = vec![(1.0, true)];
        assert!(matches!(margin_shift(&only_pos, &only_pos, ("a", "b")), Err(Error::Argument(_))));
        // Moving samples from the positive prototype towards the negative one.
        let base = vec![(0.5, 2.0), (0.7, 2.2)];
        let treat = vec![(1.2, 1.3), (1.3, 1.5)];
        let r = distance_shift(&treat, &base, ("task", "identity")).unwrap();
        assert!(r.delta_pos < 0.0 && r.delta_neg > 0.0 && r.delta_sep < 0.0);
    }

    /// Signed-rank p-value by listing all sign assignments with ordinary float ranks.
    fn wilcoxon_oracle(d: &[f64]) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
        let n = nz.len();
        let ranks: Vec<f64> = (0..n)
            .map(|i| {
                let a = nz[i].abs();
                let less = nz.iter().filter(|x| x.abs() < a).count() as f64;
                let equal = nz.iter().filter(|x| x.abs() == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect();
        let total: f64 = ranks.iter().sum();
        let obs_plus: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let obs = obs_plus.min(total - obs_plus);
        let mut extreme = 0usize;
        for mask in 0u32..(1 << n) {
            let wp: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if wp.min(total - wp) <= obs + 1e-9 {
                extreme += 1;
            }
        }
        (extreme as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank_exact(&[0.3, 0.1, 0.5, 0.2, 0.8, 0.4, 0.6, 0.7]).unwrap();
        assert_eq!(r.p_two_sided, 0.0078125);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(wilcoxon_signed_rank_exact(&[-2.5]).unwrap().p_two_sided, 1.0);
        // The smallest magnitude negative: W- = 1; subsets of 1..=8 with sum <= 1 are {} and {1}.
        let r = wilcoxon_signed_rank_exact(&[-0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        assert_eq!(r.w_minus, 1.0);
        assert_eq!(r.p_two_sided, 2.0 * 2.0 / 256.0);
        assert!(matches!(wilcoxon_signed_rank_exact(&[0.0, 0.0]), Err(Error::UndefinedTest(_))));
        assert!(matches!(wilcoxon_signed_rank_exact(&[1.0; 21]), Err(Error::Argument(_))));
        let null = signed_rank_null(&doubled_ranks(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        assert!((null.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_matches_enumeration_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-4..5) as f64 * 0.5).collect();
            if d.iter().all(|&x| x == 0.0) {
                continue;
            }
            let r = wilcoxon_signed_rank_exact(&d).unwrap();
            assert!((r.p_two_sided - wilcoxon_oracle(&d)).abs() < 1e-12, "{d:?}");
        }
    }

    fn record(onset: Outcome, offset: Outcome, lat: Option<f64>) -> TrialRecord {
        TrialRecord {
            trial_id: 0,
            target_id: 1,
            cue_time: 6.0,
            phases: vec![],
            onset_trace: vec![],
            offset_trace: vec![],
            decisions: vec![],
            gate_transitions: vec![],
            outcome_onset: onset,
            outcome_offset: offset,
            onset_latency: lat,
            offset_latency: (offset == Outcome::Hit).then_some(2.0),
            movement_onset: lat.map(|l| 6.0 + l),
            stop_progress: None,
        }
    }

    #[test]
    fn outcome_stats_examples() {
        let mut recs = Vec::new();
        for i in 0..6 {
            let off = match i {
                0..=3 => Outcome::Hit,
                4 => Outcome::Miss,
                _ => Outcome::Timeout,
            };
            recs.push(record(Outcome::Hit, off, Some(1.0)));
        }
        for _ in 0..3 {
            recs.push(record(Outcome::Miss, Outcome::NotAttempted, None));
        }
        recs.push(record(Outcome::Timeout, Outcome::NotAttempted, None));
        let m = outcome_latency_stats("r0", &recs).unwrap();
        assert_eq!((m.onset.hit, m.onset.miss, m.onset.timeout), (0.6, 0.3, 0.1));
        let off = m.offset.unwrap();
        assert_eq!(off.n, 6);
        assert_eq!((off.hit, off.miss, off.timeout), (4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0));
        assert_eq!(m.onset_latency.mean, Some(1.0));
        assert_eq!(m.onset_latency.sd, Some(0.0));
        assert!(outcome_latency_stats("e", &[]).is_err());
    }

    #[test]
    fn bootstrap_is_seeded_and_brackets_mean() {
        let v: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let a = bootstrap_mean_ci(&v, 2000, 0.95, 3).unwrap();
        assert_eq!(a, bootstrap_mean_ci(&v, 2000, 0.95, 3).unwrap());
        assert!(a.0 < 14.5 && a.1 > 14.5);
        // Normal-theory half width 1.96 * sd / sqrt(n).
        let sd = (v.iter().map(|x| (x - 14.5f64).powi(2)).sum::<f64>() / 29.0).sqrt();
        let half = 1.96 * sd / 30f64.sqrt();
        assert!(((a.1 - a.0) / 2.0 - half).abs() / half < 0.15);
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn stationary_signal_averages_to_zero() {
        let fs = 512.0;
        let x: Vec<f32> = noise(512 * 20, 1).iter().map(|&v| v as f32).collect();
        let s = &welch_spectrogram(&x, 1, fs, &[0], (0.0, 1.0), &SpectrogramConfig::default()).unwrap()[0];
        assert_eq!(s.freqs.first(), Some(&4.0));
        assert_eq!(s.freqs[1] - s.freqs[0], 2.0);
        assert_eq!(s.times[1] - s.times[0], 0.0625);
        let cells: Vec<f64> = s.values.iter().flatten().map(|v| v.unwrap()).collect();
        let mean_abs = cells.iter().sum::<f64>().abs() / cells.len() as f64;
        assert!(mean_abs < 0.05, "{mean_abs}");
    }

    #[test]
    fn tenfold_power_drop_reads_minus_one() {
        let fs = 512.0;
        // White noise; second half scaled to a tenth of the power.
        let n = 512 * 200;
        let x: Vec<f32> = noise(n, 2)
            .iter()
            .enumerate()
            .map(|(i, &v)| (if i < n / 2 { v } else { v / 10f64.sqrt() }) as f32)
            .collect();
        let s = &welch_spectrogram(&x, 1, fs, &[0], (0.0, 100.0), &SpectrogramConfig::default()).unwrap()[0];
        for f in 0..s.freqs.len() {
            let late = s.mean_over(f, 101.0, 200.0).unwrap();
            assert!((late + 1.0).abs() < 0.06, "{} Hz: {late}", s.freqs[f]);
        }
        let amp = SpectrogramConfig { scale: SpectralScale::Amplitude, ..Default::default() };
        let s = &welch_spectrogram(&x, 1, fs, &[0], (0.0, 100.0), &amp).unwrap()[0];
        let late = s.mean_over(s.freq_index(20.0).unwrap(), 101.0, 200.0).unwrap();
        assert!((late + 0.5).abs() < 0.05);
    }

    #[test]
    fn zero_baseline_is_flagged_not_nan() {
        let x = vec![0f32; 512 * 4];
        let s = &welch_spectrogram(&x, 1, 512.0, &[0], (0.0, 1.0), &SpectrogramConfig::default()).unwrap()[0];
        assert!(s.values.iter().flatten().all(|v| v.is_none()));
        assert!(welch_spectrogram(&x, 1, 512.0, &[0], (3.8, 4.0), &SpectrogramConfig::default()).is_err());
    }
}
