//! Whitening references: identity, task running mean and the class-agnostic
//! fixation reference.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decoder::ClassPrototypes;
use crate::error::{Error, Result};
use crate::spd::{
    airm_distance, congruence_unchecked, eigenvalue_shrink, geodesic, identity_shrink,
    log_euclidean_mean, spd_exp, spd_log, SpdMatrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Identity,
    Task,
    Fixation,
}

impl ReferenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceKind::Identity => "identity",
            ReferenceKind::Task => "task",
            ReferenceKind::Fixation => "fixation",
        }
    }
}

impl std::fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ReferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ReferenceKind::Identity),
            "task" => Ok(ReferenceKind::Task),
            "fixation" => Ok(ReferenceKind::Fixation),
            other => Err(Error::Argument(format!(
                "unknown recentering mode {other:?} (expected identity, task or fixation)"
            ))),
        }
    }
}

/// A whitening reference and where it came from.
#[derive(Clone, Debug)]
pub struct RecenterReference {
    kind: ReferenceKind,
    s_ref: SpdMatrix,
    inv_sqrt: DMatrix<f64>,
    n_samples: usize,
    run_index: usize,
}

impl PartialEq for RecenterReference {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.s_ref == other.s_ref
            && self.n_samples == other.n_samples
            && self.run_index == other.run_index
    }
}

impl RecenterReference {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: ReferenceKind::Identity,
            s_ref: SpdMatrix::identity(dim),
            inv_sqrt: DMatrix::identity(dim, dim),
            n_samples: 0,
            run_index: 0,
        }
    }

    pub fn new(kind: ReferenceKind, s_ref: SpdMatrix, n_samples: usize, run_index: usize) -> Self {
        if kind == ReferenceKind::Identity {
            let mut id = Self::identity(s_ref.dim());
            id.run_index = run_index;
            return id;
        }
        let inv_sqrt = s_ref.powf(-0.5).into_matrix();
        Self {
            kind,
            s_ref,
            inv_sqrt,
            n_samples,
            run_index,
        }
    }

    /// `S_ref^{-1/2}`, or `None` for the identity reference.
    pub fn whitener(&self) -> Option<&DMatrix<f64>> {
        (self.kind != ReferenceKind::Identity).then_some(&self.inv_sqrt)
    }

    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }

    pub fn matrix(&self) -> &SpdMatrix {
        &self.s_ref
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn run_index(&self) -> usize {
        self.run_index
    }

    pub fn dim(&self) -> usize {
        self.s_ref.dim()
    }
}

/// Geodesic running mean: `S' = geodesic(S, sigma, 1 / (n + 1))`.
///
/// An identity reference bootstraps: the first sample becomes the reference.
pub fn task_reference_update(prev: &RecenterReference, sigma: &SpdMatrix) -> Result<RecenterReference> {
    task_reference_update_windowed(prev, sigma, None)
}

/// Like [`task_reference_update`], but once `window` samples have been seen
/// the step stays at `1 / (window + 1)`, so old samples are forgotten
/// geometrically.
pub fn task_reference_update_windowed(
    prev: &RecenterReference,
    sigma: &SpdMatrix,
    window: Option<usize>,
) -> Result<RecenterReference> {
    if prev.dim() != sigma.dim() {
        return Err(Error::shape(
            format!("{0}x{0}", prev.dim()),
            format!("{0}x{0}", sigma.dim()),
        ));
    }
    if window == Some(0) {
        return Err(Error::Argument("task reference window must be at least 1".into()));
    }
    match prev.kind {
        ReferenceKind::Fixation => Err(Error::Argument(
            "task reference cannot be updated from a fixation reference".into(),
        )),
        ReferenceKind::Identity => Ok(RecenterReference::new(
            ReferenceKind::Task,
            sigma.clone(),
            1,
            prev.run_index,
        )),
        ReferenceKind::Task => {
            let n = prev.n_samples;
            let effective = window.map_or(n, |w| n.min(w));
            let t = 1.0 / (effective as f64 + 1.0);
            let s = geodesic(&prev.s_ref, sigma, t)?;
            Ok(RecenterReference::new(ReferenceKind::Task, s, n + 1, prev.run_index))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationConfig {
    pub trim_frac: f64,
    pub alpha_id: f64,
    pub lambda_eig: f64,
    pub beta_run: f64,
    pub n_min: usize,
}

impl Default for FixationConfig {
    fn default() -> Self {
        Self {
            trim_frac: 0.20,
            alpha_id: 0.25,
            lambda_eig: 0.05,
            beta_run: 0.30,
            n_min: 8,
        }
    }
}

impl FixationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64, range: &str| {
            Err(Error::Argument(format!("fixation {name} must lie in {range}, got {v}")))
        };
        if !(0.0..1.0).contains(&self.trim_frac) {
            return bad("trim_frac", self.trim_frac, "[0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha_id) {
            return bad("alpha_id", self.alpha_id, "[0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda_eig) {
            return bad("lambda_eig", self.lambda_eig, "[0, 1]");
        }
        if !(self.beta_run > 0.0 && self.beta_run <= 1.0) {
            return bad("beta_run", self.beta_run, "(0, 1]");
        }
        if self.n_min == 0 {
            return Err(Error::Argument("fixation n_min must be at least 1".into()));
        }
        Ok(())
    }
}

/// Drops the `ceil(frac * n)` samples farthest (AIRM) from the log-Euclidean
/// mean, keeping the others in their original order.
pub fn trim_outliers(covs: &[SpdMatrix], frac: f64) -> Result<Vec<SpdMatrix>> {
    if covs.is_empty() {
        return Err(Error::Argument("cannot trim an empty set".into()));
    }
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Argument(format!("trim fraction must lie in [0, 1), got {frac}")));
    }
    let n = covs.len();
    // Guard against 0.2 * 10 landing a hair above 2.
    let remove = (frac * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if remove == 0 {
        return Ok(covs.to_vec());
    }
    if remove >= n {
        return Err(Error::Argument(format!(
            "trimming {remove} of {n} samples would leave none"
        )));
    }
    let center = log_euclidean_mean(covs)?;
    let mut dist: Vec<(usize, f64)> = covs
        .iter()
        .enumerate()
        .map(|(i, s)| airm_distance(&center, s).map(|d| (i, d)))
        .collect::<Result<_>>()?;
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = vec![true; n];
    for &(i, _) in dist.iter().take(remove) {
        keep[i] = false;
    }
    Ok(covs
        .iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then(|| s.clone()))
        .collect())
}

/// Trim, average, shrink twice, then blend with the previous fixation
/// reference in the log domain.
///
/// With fewer than `n_min` samples the previous reference is reused as is.
pub fn fit_fixation_reference(
    fix_covs: &[SpdMatrix],
    cfg: &FixationConfig,
    prev: Option<&RecenterReference>,
) -> Result<RecenterReference> {
    cfg.validate()?;
    if fix_covs.len() < cfg.n_min {
        return prev.cloned().ok_or_else(|| {
            Error::NoReference(format!(
                "{} fixation windows, {} required, and no earlier reference",
                fix_covs.len(),
                cfg.n_min
            ))
        });
    }
    if let Some(p) = prev {
        if p.dim() != fix_covs[0].dim() {
            return Err(Error::shape(p.dim(), fix_covs[0].dim()));
        }
    }
    let trimmed = trim_outliers(fix_covs, cfg.trim_frac)?;
    let mean = log_euclidean_mean(&trimmed)?;
    let shrunk = eigenvalue_shrink(&identity_shrink(&mean, cfg.alpha_id)?, cfg.lambda_eig)?;
    let (s_ref, run_index) = match prev {
        Some(p) if p.kind == ReferenceKind::Fixation => {
            let blended = spd_log(&p.s_ref)
                .scaled(1.0 - cfg.beta_run)
                .add(&spd_log(&shrunk).scaled(cfg.beta_run))?;
            (spd_exp(&blended)?, p.run_index + 1)
        }
        Some(p) => (shrunk, p.run_index + 1),
        None => (shrunk, 0),
    };
    Ok(RecenterReference::new(
        ReferenceKind::Fixation,
        s_ref,
        trimmed.len(),
        run_index,
    ))
}

/// `S_ref^{-1/2} sigma S_ref^{-1/2}`.
pub fn apply_recenter(reference: &RecenterReference, sigma: &SpdMatrix) -> Result<SpdMatrix> {
    if reference.dim() != sigma.dim() {
        return Err(Error::shape(
            format!("{0}x{0}", reference.dim()),
            format!("{0}x{0}", sigma.dim()),
        ));
    }
    if reference.kind == ReferenceKind::Identity {
        return Ok(sigma.clone());
    }
    congruence_unchecked(sigma, &reference.inv_sqrt)
}

/// Whitens both class means by `s_train`.
///
/// `prototypes` must be in the raw frame (`s_train = I`); use
/// [`ClassPrototypes::raw`] first otherwise.
pub fn recenter_prototypes(s_train: &SpdMatrix, prototypes: &ClassPrototypes) -> Result<ClassPrototypes> {
    if s_train.dim() != prototypes.dim() {
        return Err(Error::shape(prototypes.dim(), s_train.dim()));
    }
    let reference = RecenterReference::new(ReferenceKind::Fixation, s_train.clone(), 0, 0);
    Ok(ClassPrototypes {
        decoder: prototypes.decoder,
        positive: apply_recenter(&reference, &prototypes.positive)?,
        negative: apply_recenter(&reference, &prototypes.negative)?,
        s_train: s_train.clone(),
    })
}
