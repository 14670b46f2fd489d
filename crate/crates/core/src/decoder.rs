//! Minimum-distance-to-mean decoding with softmax posteriors, exponential
//! smoothing and ROC-based threshold selection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recenter::recenter_prototypes;
use crate::spd::{airm_distance, congruence_unchecked, frechet_mean, FrechetConfig, SpdMatrix};

/// Which transition a decoder detects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderId {
    /// Rest -> Start MI.
    Onset,
    /// Sustained movement -> Stop MI.
    Offset,
}

impl DecoderId {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderId::Onset => "onset",
            DecoderId::Offset => "offset",
        }
    }
}

impl std::fmt::Display for DecoderId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Positive and negative class means of one decoder.
///
/// `positive` and `negative` live in the frame whitened by `s_train`; with
/// `s_train = I` they are in the raw sensor frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub decoder: DecoderId,
    pub positive: SpdMatrix,
    pub negative: SpdMatrix,
    pub s_train: SpdMatrix,
}

impl ClassPrototypes {
    /// Prototypes given directly in the raw frame (`s_train = I`).
    pub fn unwhitened(decoder: DecoderId, positive: SpdMatrix, negative: SpdMatrix) -> Result<Self> {
        if positive.dim() != negative.dim() {
            return Err(Error::shape(positive.dim(), negative.dim()));
        }
        let dim = positive.dim();
        Ok(Self {
            decoder,
            positive,
            negative,
            s_train: SpdMatrix::identity(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.positive.dim()
    }

    /// Undoes the whitening, returning the class means in the sensor frame.
    pub fn raw(&self) -> ClassPrototypes {
        let sqrt = self.s_train.powf(0.5);
        let unwhiten = |s: &SpdMatrix| {
            congruence_unchecked(s, sqrt.matrix()).expect("congruence by an SPD square root stays SPD")
        };
        ClassPrototypes {
            decoder: self.decoder,
            positive: unwhiten(&self.positive),
            negative: unwhiten(&self.negative),
            s_train: SpdMatrix::identity(self.dim()),
        }
    }

    /// AIRM distance between the two prototypes.
    pub fn separation(&self) -> f64 {
        airm_distance(&self.positive, &self.negative).expect("prototypes share a dimension")
    }
}

/// Per-class Fréchet means plus the pooled mean, prototypes whitened by the latter.
///
/// Each class needs at least two samples.
pub fn fit_prototypes(
    decoder: DecoderId,
    positives: &[SpdMatrix],
    negatives: &[SpdMatrix],
    cfg: &FrechetConfig,
) -> Result<ClassPrototypes> {
    for (name, set) in [("positive", positives), ("negative", negatives)] {
        if set.len() < 2 {
            return Err(Error::Argument(format!(
                "{decoder} decoder needs at least 2 {name} samples, got {}",
                set.len()
            )));
        }
    }
    let pos = frechet_mean(positives, cfg)?;
    let neg = frechet_mean(negatives, cfg)?;
    let pooled: Vec<SpdMatrix> = positives.iter().chain(negatives).cloned().collect();
    let s_train = frechet_mean(&pooled, cfg)?;
    recenter_prototypes(&s_train, &ClassPrototypes::unwhitened(decoder, pos, neg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Softmax temperature; `None` derives it from the prototypes
    /// (see [`default_temperature`]).
    pub temperature: Option<f64>,
    pub ema_beta: f64,
    pub threshold: f64,
    /// Seconds a supra-threshold posterior must persist before a decision.
    pub hold_time: f64,
    /// Seconds after movement onset during which the offset decoder is muted.
    pub refractory: f64,
    /// Seconds after the reference event within which a decision counts.
    pub decision_window: f64,
}

impl DecoderConfig {
    pub fn onset() -> Self {
        Self {
            temperature: None,
            ema_beta: 0.2,
            threshold: 0.5,
            hold_time: 0.25,
            refractory: 1.0,
            decision_window: 5.0,
        }
    }

    pub fn offset() -> Self {
        Self {
            decision_window: 6.0,
            ..Self::onset()
        }
    }

    pub fn for_decoder(id: DecoderId) -> Self {
        match id {
            DecoderId::Onset => Self::onset(),
            DecoderId::Offset => Self::offset(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Argument(format!("temperature must be > 0, got {t}")));
            }
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return Err(Error::Argument(format!("ema_beta must lie in (0, 1), got {}", self.ema_beta)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Argument(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        for (name, v) in [
            ("hold_time", self.hold_time),
            ("refractory", self.refractory),
            ("decision_window", self.decision_window),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be a finite non-negative duration, got {v}")));
            }
        }
        if self.decision_window == 0.0 {
            return Err(Error::Argument("decision_window must be positive".into()));
        }
        Ok(())
    }

    /// The configured temperature or the prototype-derived default.
    pub fn resolve_temperature(&self, protos: &ClassPrototypes) -> Result<f64> {
        match self.temperature {
            Some(t) => Ok(t),
            None => default_temperature(protos),
        }
    }
}

/// `ln 9 / d(P, N)`: a sample sitting on the positive prototype gets `p_pos = 0.9`.
pub fn default_temperature(protos: &ClassPrototypes) -> Result<f64> {
    let d = protos.separation();
    if !(d > 1e-12) {
        return Err(Error::DegenerateInput(format!(
            "{} prototypes coincide (distance {d:.3e}); temperature undefined",
            protos.decoder
        )));
    }
    Ok(9f64.ln() / d)
}

/// Distances to both prototypes and the positive-class posterior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub d_pos: f64,
    pub d_neg: f64,
    pub p_pos: f64,
}

impl Posterior {
    pub fn margin(&self) -> f64 {
        margin(self.d_neg, self.d_pos)
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-class softmax over negative distances, given a temperature.
pub fn softmax_posterior(d_pos: f64, d_neg: f64, alpha: f64) -> f64 {
    logistic(alpha * (d_neg - d_pos))
}

/// Classifies an already recentered covariance.
pub fn mdm_posteriors(sigma_hat: &SpdMatrix, protos: &ClassPrototypes, alpha: f64) -> Result<Posterior> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!("temperature must be > 0, got {alpha}")));
    }
    let d_pos = airm_distance(&protos.positive, sigma_hat)?;
    let d_neg = airm_distance(&protos.negative, sigma_hat)?;
    Ok(Posterior {
        d_pos,
        d_neg,
        p_pos: softmax_posterior(d_pos, d_neg, alpha),
    })
}

/// Prototypes with cached inverse square roots, for scoring many windows.
#[derive(Clone, Debug)]
pub struct Scorer {
    protos: ClassPrototypes,
    alpha: f64,
    pos_inv_sqrt: DMatrix<f64>,
    neg_inv_sqrt: DMatrix<f64>,
}

impl Scorer {
    pub fn new(protos: ClassPrototypes, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("temperature must be > 0, got {alpha}")));
        }
        Ok(Self {
            pos_inv_sqrt: protos.positive.powf(-0.5).into_matrix(),
            neg_inv_sqrt: protos.negative.powf(-0.5).into_matrix(),
            protos,
            alpha,
        })
    }

    pub fn prototypes(&self) -> &ClassPrototypes {
        &self.protos
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Posterior of `W sigma W^T` (or of `sigma` when `whitener` is `None`)
    /// without forming the whitened matrix.
    pub fn score(&self, sigma: &SpdMatrix, whitener: Option<&DMatrix<f64>>) -> Result<Posterior> {
        if sigma.dim() != self.protos.dim() || whitener.is_some_and(|w| w.nrows() != sigma.dim()) {
            return Err(Error::shape(self.protos.dim(), sigma.dim()));
        }
        let dist = |inv_sqrt: &DMatrix<f64>| {
            let a = match whitener {
                Some(w) => inv_sqrt * w,
                None => inv_sqrt.clone(),
            };
            let m = &a * sigma.matrix() * a.transpose();
            let m = (&m + m.transpose()) * 0.5;
            m.symmetric_eigenvalues()
                .iter()
                .map(|&l| l.max(f64::MIN_POSITIVE).ln().powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d_pos = dist(&self.pos_inv_sqrt);
        let d_neg = dist(&self.neg_inv_sqrt);
        Ok(Posterior {
            d_pos,
            d_neg,
            p_pos: softmax_posterior(d_pos, d_neg, self.alpha),
        })
    }
}

/// `(1 - beta) * prev + beta * p`.
pub fn ema_update(p_hat_prev: f64, p: f64, beta: f64) -> f64 {
    (1.0 - beta) * p_hat_prev + beta * p
}

/// `d_neg - d_pos`: positive when the sample is closer to the positive prototype.
pub fn margin(d_neg: f64, d_pos: f64) -> f64 {
    d_neg - d_pos
}

/// Everything the decoder knows about one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFrame {
    pub t: f64,
    pub d_pos: f64,
    pub d_neg: f64,
    pub p_pos: f64,
    pub p_hat: f64,
    pub margin: f64,
}

/// A smoothed posterior trace from offline cross-validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrace {
    pub positive: bool,
    /// Seconds since the trace's reference cue, one per frame.
    pub times: Vec<f64>,
    pub p_hat: Vec<f64>,
}

impl LabeledTrace {
    pub fn max(&self) -> f64 {
        self.p_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Time of the first frame with `p_hat >= theta`.
    pub fn first_crossing(&self, theta: f64) -> Option<f64> {
        self.p_hat
            .iter()
            .position(|&p| p >= theta)
            .map(|i| self.times[i])
    }
}

/// Operating point chosen by [`select_threshold`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSelection {
    pub theta: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Median first-crossing time over detected positive traces.
    pub median_latency: f64,
    /// Youden's J was not positive anywhere: the traces carry no class information.
    pub degenerate: bool,
}

impl ThresholdSelection {
    pub fn youden_j(&self) -> f64 {
        self.tpr - self.fpr
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// TPR, FPR and median positive latency of detecting with threshold `theta`.
///
/// A trace is detected when its maximum reaches `theta`. Latency is the median
/// first-crossing time over detected positive traces (infinite if none).
pub fn operating_point(traces: &[LabeledTrace], theta: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut np, mut nn) = (0usize, 0usize, 0usize, 0usize);
    let mut latencies = Vec::new();
    for tr in traces {
        if tr.positive {
            np += 1;
            if let Some(t) = tr.first_crossing(theta) {
                tp += 1;
                latencies.push(t);
            }
        } else {
            nn += 1;
            if tr.max() >= theta {
                fp += 1;
            }
        }
    }
    let latency = if latencies.is_empty() {
        f64::INFINITY
    } else {
        median(&mut latencies)
    };
    (tp as f64 / np as f64, fp as f64 / nn as f64, latency)
}

/// Youden-optimal threshold on trace maxima under a median-latency cap.
///
/// Thresholds between consecutive distinct maxima detect the same traces.
/// Inside such an interval the median latency can only grow with the
/// threshold, so its admissible part is an interval `(lower, u]` where `u` is
/// the largest observed posterior value still meeting the cap. The returned
/// threshold is the midpoint of that part for the best interval. The lowest
/// interval starts at 0.
///
/// Fails with [`Error::ConstraintInfeasible`] when some threshold separates
/// the classes (J > 0) but none of those meets the cap.
pub fn select_threshold(traces: &[LabeledTrace], latency_cap: f64) -> Result<ThresholdSelection> {
    if traces.iter().any(|t| t.times.len() != t.p_hat.len() || t.p_hat.is_empty()) {
        return Err(Error::Argument("every trace needs matching, non-empty times and posteriors".into()));
    }
    if traces.iter().any(|t| t.p_hat.iter().any(|p| !p.is_finite())) {
        return Err(Error::NumericDomain("non-finite posterior in trace".into()));
    }
    let np = traces.iter().filter(|t| t.positive).count();
    if np == 0 || np == traces.len() {
        return Err(Error::Argument("threshold selection needs positive and negative traces".into()));
    }
    let sorted_unique = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
        v
    };
    let maxima = sorted_unique(traces.iter().map(LabeledTrace::max).collect());
    let observed = sorted_unique(traces.iter().flat_map(|t| t.p_hat.iter().copied()).collect());

    let mut best: Option<ThresholdSelection> = None;
    let mut best_any: Option<ThresholdSelection> = None;
    let mut lower = 0.0;
    for &upper in &maxima {
        let (tpr, fpr, latency) = operating_point(traces, upper);
        let j = tpr - fpr;
        let improves = |cur: &Option<ThresholdSelection>| cur.map_or(true, |c| j > c.youden_j());
        if improves(&best_any) {
            best_any = Some(ThresholdSelection {
                theta: 0.5 * (lower + upper),
                tpr,
                fpr,
                median_latency: latency,
                degenerate: false,
            });
        }
        if improves(&best) {
            let admissible_top = if latency <= latency_cap {
                Some((upper, latency))
            } else {
                let inside = &observed[observed.partition_point(|&v| v <= lower)..observed.partition_point(|&v| v < upper)];
                let n_ok = inside.partition_point(|&v| operating_point(traces, v).2 <= latency_cap);
                (n_ok > 0).then(|| (inside[n_ok - 1], operating_point(traces, inside[n_ok - 1]).2))
            };
            if let Some((top, lat)) = admissible_top {
                best = Some(ThresholdSelection {
                    theta: 0.5 * (lower + top),
                    tpr,
                    fpr,
                    median_latency: lat,
                    degenerate: false,
                });
            }
        }
        lower = upper;
    }
    // Very low thresholds always cross immediately, so "admissible" alone is
    // cheap; the cap is infeasible when it rules out every informative threshold.
    let informative = best_any.is_some_and(|s| s.youden_j() > 0.0);
    match best {
        Some(mut sel) if sel.youden_j() > 0.0 || !informative => {
            sel.degenerate = sel.youden_j() <= 0.0;
            Ok(sel)
        }
        _ => Err(Error::ConstraintInfeasible {
            cap: latency_cap,
            fallback_theta: best_any.map_or(0.5, |s| s.theta),
        }),
    }
}

/// Exponentially smoothed posterior with a neutral seed.
#[derive(Clone, Copy, Debug)]
pub struct EmaState {
    beta: f64,
    value: f64,
}

impl EmaState {
    pub const SEED: f64 = 0.5;

    pub fn new(beta: f64) -> Self {
        Self { beta, value: Self::SEED }
    }

    pub fn reset(&mut self) {
        self.value = Self::SEED;
    }

    pub fn update(&mut self, p: f64) -> f64 {
        self.value = ema_update(self.value, p, self.beta);
        self.value
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}
