//! Estimators of the M, DID and DIDM estimands of the ATT.
//!
//! All three share one counterfactual engine, [`counterfactual_fit`], which
//! predicts a control-group conditional mean at treated units' matching
//! vectors. The outer expectation over the treated group is the unweighted
//! treated-sample mean.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, CanonicalDataset, DatasetError, Group, SupportTrimReport, Target, UnitRecord};
use crate::linalg;
use crate::par;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid method: {0}")]
    InvalidMethod(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    MeanDifference,
    NearestNeighbor,
    LocalLinear,
    LocalLinearRegressionAdjusted,
}

/// How the control-group conditional mean is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Number of neighbors (nearest-neighbor only).
    pub k: usize,
    /// Gaussian kernel bandwidth in `y_lag` units (local linear only).
    pub bandwidth: f64,
    /// Trim treated units outside the control `y_lag` range first.
    pub enforce_support: bool,
}

impl MethodSpec {
    pub fn mean() -> Self {
        MethodSpec {
            kind: MethodKind::MeanDifference,
            k: 1,
            bandwidth: 1.0,
            enforce_support: false,
        }
    }

    pub fn nearest_neighbor(k: usize) -> Self {
        MethodSpec {
            kind: MethodKind::NearestNeighbor,
            k,
            ..Self::mean()
        }
    }

    pub fn local_linear(bandwidth: f64) -> Self {
        MethodSpec {
            kind: MethodKind::LocalLinear,
            bandwidth,
            ..Self::mean()
        }
    }

    pub fn local_linear_adjusted(bandwidth: f64) -> Self {
        MethodSpec {
            kind: MethodKind::LocalLinearRegressionAdjusted,
            bandwidth,
            ..Self::mean()
        }
    }

    pub fn with_support(mut self, enforce: bool) -> Self {
        self.enforce_support = enforce;
        self
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        match self.kind {
            MethodKind::NearestNeighbor if self.k == 0 => {
                Err(EstimationError::InvalidMethod("nearest neighbor needs k >= 1".into()))
            }
            MethodKind::LocalLinear | MethodKind::LocalLinearRegressionAdjusted
                if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) =>
            {
                Err(EstimationError::InvalidMethod(format!(
                    "bandwidth must be positive and finite, got {}",
                    self.bandwidth
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MethodKind::MeanDifference => write!(f, "mean difference")?,
            MethodKind::NearestNeighbor => write!(f, "{}-nearest neighbor", self.k)?,
            MethodKind::LocalLinear => write!(f, "local linear (bw = {})", self.bandwidth)?,
            MethodKind::LocalLinearRegressionAdjusted => {
                write!(f, "local linear regression adjusted (bw = {})", self.bandwidth)?
            }
        }
        if self.enforce_support {
            write!(f, " with support")?;
        }
        Ok(())
    }
}

/// The nine method variants of the classic job-training comparison, labeled
/// I through IX.
pub fn standard_methods() -> Vec<(&'static str, MethodSpec)> {
    vec![
        ("I", MethodSpec::mean()),
        ("II", MethodSpec::nearest_neighbor(1)),
        ("III", MethodSpec::nearest_neighbor(10)),
        ("IV", MethodSpec::nearest_neighbor(1).with_support(true)),
        ("V", MethodSpec::nearest_neighbor(10).with_support(true)),
        ("VI", MethodSpec::local_linear(1.0)),
        ("VII", MethodSpec::local_linear(4.0)),
        ("VIII", MethodSpec::local_linear_adjusted(1.0)),
        ("IX", MethodSpec::local_linear_adjusted(4.0)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimand {
    M,
    #[serde(rename = "DID")]
    Did,
    #[serde(rename = "DIDM")]
    Didm,
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimand::M => "M",
            Estimand::Did => "DID",
            Estimand::Didm => "DIDM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttEstimate {
    pub estimand: Estimand,
    pub value: f64,
    pub n_treated_used: usize,
    pub method: MethodSpec,
}

/// Point estimates of the three estimands on one sample and the two gaps
/// whose signs make up the bracketing order `M <= DIDM <= DID`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketReport {
    pub m: AttEstimate,
    pub didm: AttEstimate,
    pub did: AttEstimate,
    pub gap_didm_m: f64,
    pub gap_did_didm: f64,
    /// Both gaps are nonnegative.
    pub ordering_holds: bool,
    pub support: Option<SupportTrimReport>,
    /// Treated units at which a local-linear fit fell back to a weighted mean.
    pub n_degenerate_targets: usize,
}

impl BracketReport {
    pub fn from_estimates(m: AttEstimate, didm: AttEstimate, did: AttEstimate) -> Self {
        let gap_didm_m = didm.value - m.value;
        let gap_did_didm = did.value - didm.value;
        BracketReport {
            m,
            didm,
            did,
            gap_didm_m,
            gap_did_didm,
            ordering_holds: gap_didm_m >= 0.0 && gap_did_didm >= 0.0,
            support: None,
            n_degenerate_targets: 0,
        }
    }

    pub fn estimate(&self, e: Estimand) -> &AttEstimate {
        match e {
            Estimand::M => &self.m,
            Estimand::Didm => &self.didm,
            Estimand::Did => &self.did,
        }
    }
}

/// Predictions of a control-group conditional mean at target points.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualFit {
    pub predictions: Vec<f64>,
    /// Targets where the local-linear design was singular and the locally
    /// weighted mean was used instead.
    pub degenerate: Vec<usize>,
}

/// Predicts `E[y | x = x*]` from control pairs `(x, y)` at every target `x*`.
///
/// Sums run over the controls in the order given, so callers that need
/// permutation invariance pass controls in a canonical order.
pub fn counterfactual_fit(
    controls: &[(Vec<f64>, f64)],
    targets: &[Vec<f64>],
    method: &MethodSpec,
) -> Result<CounterfactualFit, EstimationError> {
    method.validate()?;
    if controls.is_empty() {
        return Err(EstimationError::Precondition("no control observations".into()));
    }
    let dim = controls[0].0.len();
    if controls.iter().any(|(x, _)| x.len() != dim) || targets.iter().any(|x| x.len() != dim) {
        return Err(EstimationError::Precondition("matching vectors differ in length".into()));
    }
    let xs: Vec<Vec<f64>> = controls.iter().map(|(x, _)| x.clone()).collect();
    let ys = vec![controls.iter().map(|(_, y)| *y).collect::<Vec<_>>()];
    let (mut preds, degenerate) = fit_responses(&Design::new(xs), &ys, targets, method)?;
    Ok(CounterfactualFit {
        predictions: preds.pop().expect("one response"),
        degenerate,
    })
}

/// Control matching vectors with a sorted index for the scalar case.
pub(crate) struct Design {
    pub(crate) xs: Vec<Vec<f64>>,
    /// Positions of `xs` sorted by value (scalar designs only); ties keep
    /// their input order.
    order: Option<Vec<usize>>,
}

impl Design {
    fn new(xs: Vec<Vec<f64>>) -> Self {
        let order = (xs.first().map_or(0, Vec::len) == 1).then(|| {
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.sort_by(|&a, &b| xs[a][0].total_cmp(&xs[b][0]).then(a.cmp(&b)));
            idx
        });
        Design { xs, order }
    }

    fn len(&self) -> usize {
        self.xs.len()
    }
}

/// Fits several responses that share one design; returns one prediction
/// vector per response plus the degenerate targets.
fn fit_responses(
    design: &Design,
    ys: &[Vec<f64>],
    targets: &[Vec<f64>],
    method: &MethodSpec,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), EstimationError> {
    let n = design.len();
    if method.kind == MethodKind::NearestNeighbor && method.k > n {
        return Err(EstimationError::Precondition(format!(
            "k = {} exceeds the {n} available controls",
            method.k
        )));
    }
    let per_target: Vec<(Vec<f64>, bool)> = match method.kind {
        MethodKind::MeanDifference => {
            let means: Vec<f64> = ys.iter().map(|y| linalg::mean(y)).collect();
            vec![(means, false); targets.len()]
        }
        MethodKind::NearestNeighbor => par::map_slice(targets, |t| {
            let idx = nearest_set(design, t, method.k);
            let preds = ys
                .iter()
                .map(|y| idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64)
                .collect();
            (preds, false)
        }),
        MethodKind::LocalLinear | MethodKind::LocalLinearRegressionAdjusted => match &design.order {
            Some(order) => {
                let xs: Vec<f64> = order.iter().map(|&i| design.xs[i][0]).collect();
                let ys: Vec<Vec<f64>> = ys.iter().map(|y| order.iter().map(|&i| y[i]).collect()).collect();
                par::map_slice(targets, |t| local_linear_sorted(&xs, &ys, t[0], method.bandwidth))
            }
            None => par::map_slice(targets, |t| local_linear_at(design, ys, t, method.bandwidth)),
        },
    };
    let degenerate = per_target
        .iter()
        .enumerate()
        .filter_map(|(i, (_, d))| d.then_some(i))
        .collect();
    let preds = (0..ys.len())
        .map(|r| per_target.iter().map(|(p, _)| p[r]).collect())
        .collect();
    Ok((preds, degenerate))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest controls plus every control tied with the
/// `k`-th distance, in ascending index order of the summation sequence.
fn nearest_set(design: &Design, target: &[f64], k: usize) -> Vec<usize> {
    match &design.order {
        Some(order) => {
            let t = target[0];
            let xs = &design.xs;
            let dist = |pos: usize| (xs[order[pos]][0] - t).abs();
            let n = order.len();
            let start = order.partition_point(|&i| xs[i][0] < t);
            let (mut lo, mut hi) = (start, start);
            let mut kth = 0.0f64;
            for _ in 0..k {
                let take_left = match (lo > 0, hi < n) {
                    (true, true) => dist(lo - 1) <= dist(hi),
                    (true, false) => true,
                    (false, true) => false,
                    (false, false) => unreachable!("k <= n"),
                };
                if take_left {
                    lo -= 1;
                    kth = kth.max(dist(lo));
                } else {
                    kth = kth.max(dist(hi));
                    hi += 1;
                }
            }
            while lo > 0 && dist(lo - 1) == kth {
                lo -= 1;
            }
            while hi < n && dist(hi) == kth {
                hi += 1;
            }
            order[lo..hi].to_vec()
        }
        None => {
            let d: Vec<f64> = design.xs.iter().map(|x| sq_dist(x, target)).collect();
            let mut sorted = d.clone();
            let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            let kth = *kth;
            (0..d.len()).filter(|&i| d[i] <= kth).collect()
        }
    }
}

/// Gaussian weights `exp(-(d^2 - d_min^2) / (2 h^2))` over the controls in
/// summation order. Shifting by the smallest distance leaves the local-linear
/// solution unchanged and keeps the largest weight at one.
fn kernel_weights(design: &Design, target: &[f64], bandwidth: f64) -> (Vec<usize>, Vec<f64>) {
    let two_h2 = 2.0 * bandwidth * bandwidth;
    match &design.order {
        Some(order) => {
            let t = target[0];
            let d2: Vec<f64> = order.iter().map(|&i| (design.xs[i][0] - t).powi(2)).collect();
            let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let (idx, w): (Vec<usize>, Vec<f64>) = order
                .iter()
                .zip(&d2)
                .filter_map(|(&i, &d)| {
                    let w = (-(d - dmin) / two_h2).exp();
                    (w > 0.0).then_some((i, w))
                })
                .unzip();
            (idx, w)
        }
        None => {
            let d2: Vec<f64> = design.xs.iter().map(|x| sq_dist(x, target)).collect();
            let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
            (0..d2.len())
                .filter_map(|i| {
                    let w = (-(d2[i] - dmin) / two_h2).exp();
                    (w > 0.0).then_some((i, w))
                })
                .unzip()
        }
    }
}

/// Relative determinant threshold for the scalar local-linear normal equations.
const LL_DEGENERACY_TOL: f64 = 1e-10;

/// Scalar local-linear fit on controls sorted by `x`, with responses in the
/// same order. Uses the two-pass centered form: the slope term vanishes
/// exactly for a response that is constant on the kernel's support.
fn local_linear_sorted(xs: &[f64], ys: &[Vec<f64>], t: f64, bandwidth: f64) -> (Vec<f64>, bool) {
    let two_h2 = 2.0 * bandwidth * bandwidth;
    let start = xs.partition_point(|&x| x < t);
    let dmin = [start.checked_sub(1), (start < xs.len()).then_some(start)]
        .into_iter()
        .flatten()
        .map(|p| (xs[p] - t).powi(2))
        .fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = xs.iter().map(|&x| (-((x - t).powi(2) - dmin) / two_h2).exp()).collect();
    let s0: f64 = w.iter().sum();
    let xbar = xs.iter().zip(&w).map(|(&x, wi)| wi * (x - t)).sum::<f64>() / s0;
    let ybars: Vec<f64> = ys
        .iter()
        .map(|y| y.iter().zip(&w).map(|(yi, wi)| wi * yi).sum::<f64>() / s0)
        .collect();
    let (mut sxx, mut s2) = (0.0, 0.0);
    for (&x, wi) in xs.iter().zip(&w) {
        let d = x - t;
        sxx += wi * (d - xbar) * (d - xbar);
        s2 += wi * d * d;
    }
    if !(s2 > 0.0) || sxx <= LL_DEGENERACY_TOL * s2 {
        return (ybars, true);
    }
    let preds = ys
        .iter()
        .zip(&ybars)
        .map(|(y, &ybar)| {
            let sxy: f64 = xs
                .iter()
                .zip(y)
                .zip(&w)
                .map(|((&x, yi), wi)| wi * (x - t - xbar) * (yi - ybar))
                .sum();
            ybar - xbar * sxy / sxx
        })
        .collect();
    (preds, false)
}

/// Multivariate local-linear fit through the equivalent kernel.
fn local_linear_at(design: &Design, ys: &[Vec<f64>], target: &[f64], bandwidth: f64) -> (Vec<f64>, bool) {
    let (idx, w) = kernel_weights(design, target, bandwidth);
    let s0: f64 = w.iter().sum();
    let weighted_mean = |y: &Vec<f64>| idx.iter().zip(&w).map(|(&i, wi)| wi * y[i]).sum::<f64>() / s0;

    match equivalent_kernel(design, &idx, &w, target) {
        Some(l) => (
            ys.iter()
                .map(|y| idx.iter().zip(&l).map(|(&i, li)| li * y[i]).sum())
                .collect(),
            false,
        ),
        None => (ys.iter().map(weighted_mean).collect(), true),
    }
}

/// Local-linear equivalent-kernel weights `l_i` such that the fit at the
/// target is `sum_i l_i y_i`; `None` when the weighted design is singular.
fn equivalent_kernel(design: &Design, idx: &[usize], w: &[f64], target: &[f64]) -> Option<Vec<f64>> {
    let p = target.len();
    let m = idx.len();
    let rows = DMatrix::from_fn(m, p + 1, |r, c| {
        let sw = w[r].sqrt();
        if c == 0 {
            sw
        } else {
            sw * (design.xs[idx[r]][c - 1] - target[c - 1])
        }
    });
    let fit = linalg::least_squares(&rows, &vec![0.0; m]).ok()?;
    let inv = &fit.xtx_inv;
    Some(
        idx.iter()
            .zip(w)
            .map(|(&i, wi)| {
                let mut v = inv[(0, 0)];
                for c in 0..p {
                    v += inv[(0, c + 1)] * (design.xs[i][c] - target[c]);
                }
                wi * v
            })
            .collect(),
    )
}

/// Local-linear fit at each target with pointwise equivalent-kernel weights,
/// used by the multivariate diagnostics for standard errors.
pub(crate) fn local_linear_with_weights(
    xs: &[Vec<f64>],
    targets: &[Vec<f64>],
    bandwidth: f64,
) -> Vec<Option<(Vec<usize>, Vec<f64>)>> {
    let design = Design {
        xs: xs.to_vec(),
        order: None,
    };
    par::map_slice(targets, |t| {
        let (idx, w) = kernel_weights(&design, t, bandwidth);
        equivalent_kernel(&design, &idx, &w, t).map(|l| (idx, l))
    })
}

/// Matching inputs for one dataset: controls in canonical (unit id) order and
/// treated units in dataset order.
pub(crate) struct Prepared<'a> {
    pub(crate) controls: Vec<&'a UnitRecord>,
    pub(crate) treated: Vec<&'a UnitRecord>,
    pub(crate) design: Design,
    pub(crate) targets: Vec<Vec<f64>>,
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(ds: &'a CanonicalDataset) -> Self {
        let mut controls: Vec<&UnitRecord> = ds.group(Group::Control).collect();
        controls.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        let treated: Vec<&UnitRecord> = ds.group(Group::Treated).collect();
        let scale = covariate_scales(&controls);
        let vector = |r: &UnitRecord| {
            let mut x = Vec::with_capacity(1 + scale.len());
            x.push(r.y_lag);
            x.extend(r.covariates.iter().zip(&scale).map(|(v, s)| v * s));
            x
        };
        let design = Design::new(controls.iter().map(|r| vector(r)).collect());
        let targets = treated.iter().map(|r| vector(r)).collect();
        Prepared {
            controls,
            treated,
            design,
            targets,
        }
    }
}

/// Rescales each covariate so that its control-sample standard deviation
/// equals that of `y_lag`. Distances are then those of fully standardized
/// coordinates up to a common factor, and bandwidths stay in `y_lag` units.
fn covariate_scales(controls: &[&UnitRecord]) -> Vec<f64> {
    let arity = controls.first().map_or(0, |r| r.covariates.len());
    if arity == 0 {
        return Vec::new();
    }
    let lag: Vec<f64> = controls.iter().map(|r| r.y_lag).collect();
    let s_lag = linalg::variance(&lag).sqrt();
    let s_lag = if s_lag > 0.0 { s_lag } else { 1.0 };
    (0..arity)
        .map(|j| {
            let col: Vec<f64> = controls.iter().map(|r| r.covariates[j]).collect();
            let s = linalg::variance(&col).sqrt();
            if s > 0.0 {
                s_lag / s
            } else {
                1.0
            }
        })
        .collect()
}

fn check_inputs(ds: &CanonicalDataset, method: &MethodSpec) -> Result<(), EstimationError> {
    method.validate()?;
    ds.require_both_groups()?;
    Ok(())
}

fn trimmed<'a>(
    ds: &'a CanonicalDataset,
    method: &MethodSpec,
) -> Result<(Cow<'a, CanonicalDataset>, Option<SupportTrimReport>), EstimationError> {
    if method.enforce_support {
        let (out, rep) = dataset::common_support(ds)?;
        Ok((Cow::Owned(out), Some(rep)))
    } else {
        Ok((Cow::Borrowed(ds), None))
    }
}

/// Applies the regression adjustment of the adjusted local-linear variant:
/// pooled partial-linear residualization of `y_lag`, `y0` and `y1` when
/// covariates are present.
fn adjusted<'a>(ds: Cow<'a, CanonicalDataset>, method: &MethodSpec) -> Result<Cow<'a, CanonicalDataset>, EstimationError> {
    if method.kind == MethodKind::LocalLinearRegressionAdjusted && ds.covariate_arity() > 0 {
        Ok(Cow::Owned(dataset::residualize(&ds, &Target::ALL)?))
    } else {
        Ok(ds)
    }
}

fn did_value(ds: &CanonicalDataset) -> f64 {
    let t: Vec<f64> = ds.group(Group::Treated).map(UnitRecord::trend).collect();
    let c: Vec<f64> = ds.group(Group::Control).map(UnitRecord::trend).collect();
    linalg::mean(&t) - linalg::mean(&c)
}

/// `mean(y1 - y0 | treated) - mean(y1 - y0 | control)`.
pub fn estimate_did(ds: &CanonicalDataset) -> Result<AttEstimate, EstimationError> {
    estimate_did_with(ds, &MethodSpec::mean())
}

fn estimate_did_with(ds: &CanonicalDataset, method: &MethodSpec) -> Result<AttEstimate, EstimationError> {
    check_inputs(ds, method)?;
    let (ds, _) = trimmed(ds, method)?;
    Ok(AttEstimate {
        estimand: Estimand::Did,
        value: did_value(&ds),
        n_treated_used: ds.n_group(Group::Treated),
        method: MethodSpec::mean().with_support(method.enforce_support),
    })
}

/// Treated mean of `y1` minus the treated mean of the matched control
/// counterfactual of `y1`.
pub fn estimate_m(ds: &CanonicalDataset, method: &MethodSpec) -> Result<AttEstimate, EstimationError> {
    Ok(matching_estimates(ds, method, &[Estimand::M])?.0[0])
}

/// Treated mean of `y1 - y0` minus the treated mean of the matched control
/// counterfactual of `y1 - y0`.
pub fn estimate_didm(ds: &CanonicalDataset, method: &MethodSpec) -> Result<AttEstimate, EstimationError> {
    Ok(matching_estimates(ds, method, &[Estimand::Didm])?.0[0])
}

fn matching_estimates(
    ds: &CanonicalDataset,
    method: &MethodSpec,
    which: &[Estimand],
) -> Result<(Vec<AttEstimate>, usize), EstimationError> {
    check_inputs(ds, method)?;
    let (ds, _) = trimmed(ds, method)?;
    let adj = adjusted(ds, method)?;
    matching_on(&adj, method, which)
}

fn matching_on(
    ds: &CanonicalDataset,
    method: &MethodSpec,
    which: &[Estimand],
) -> Result<(Vec<AttEstimate>, usize), EstimationError> {
    let prep = Prepared::new(ds);
    let response = |e: Estimand, r: &UnitRecord| match e {
        Estimand::M => r.y1,
        _ => r.trend(),
    };
    let ys: Vec<Vec<f64>> = which
        .iter()
        .map(|&e| prep.controls.iter().map(|r| response(e, r)).collect())
        .collect();
    let (preds, degenerate) = fit_responses(&prep.design, &ys, &prep.targets, method)?;
    let n_t = prep.treated.len();
    let estimates = which
        .iter()
        .zip(&preds)
        .map(|(&e, cf)| {
            let total: f64 = prep.treated.iter().zip(cf).map(|(r, c)| response(e, r) - c).sum();
            AttEstimate {
                estimand: e,
                value: total / n_t as f64,
                n_treated_used: n_t,
                method: *method,
            }
        })
        .collect();
    Ok((estimates, degenerate.len()))
}

/// Runs the three estimators on one (possibly support-trimmed) sample.
pub fn estimate_all(ds: &CanonicalDataset, method: &MethodSpec) -> Result<BracketReport, EstimationError> {
    check_inputs(ds, method)?;
    let (trimmed_ds, support) = trimmed(ds, method)?;
    let did = AttEstimate {
        estimand: Estimand::Did,
        value: did_value(&trimmed_ds),
        n_treated_used: trimmed_ds.n_group(Group::Treated),
        method: MethodSpec::mean().with_support(method.enforce_support),
    };
    let adj = adjusted(trimmed_ds, method)?;
    let (est, n_degenerate) = matching_on(&adj, method, &[Estimand::M, Estimand::Didm])?;
    let mut report = BracketReport::from_estimates(est[0], est[1], did);
    report.support = support;
    report.n_degenerate_targets = n_degenerate;
    Ok(report)
}

/// Orders two estimates by value.
pub fn compare(a: &AttEstimate, b: &AttEstimate) -> Ordering {
    a.value.total_cmp(&b.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn dataset(records: Vec<UnitRecord>) -> CanonicalDataset {
        CanonicalDataset::new(records, DatasetMeta::default()).unwrap()
    }

    fn t(id: &str, y_lag: f64, y0: f64, y1: f64) -> UnitRecord {
        UnitRecord::new(id, Group::Treated, y_lag, y0, y1)
    }

    fn c(id: &str, y_lag: f64, y0: f64, y1: f64) -> UnitRecord {
        UnitRecord::new(id, Group::Control, y_lag, y0, y1)
    }

    #[test]
    fn did_hand_example() {
        let ds = dataset(vec![
            t("a", 0.0, 1.0, 3.0),
            t("b", 0.0, 2.0, 4.0),
            c("c", 0.0, 0.0, 1.0),
            c("d", 0.0, 1.0, 2.0),
        ]);
        let est = estimate_did(&ds).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.method.kind, MethodKind::MeanDifference);
    }

    #[test]
    fn did_symmetric_groups_is_zero() {
        let ds = dataset(vec![
            t("a", 0.0, 1.0, 3.0),
            t("b", 5.0, 2.0, 7.0),
            c("c", 1.0, 2.0, 7.0),
            c("d", 2.0, 1.0, 3.0),
        ]);
        assert_eq!(estimate_did(&ds).unwrap().value, 0.0);
    }

    #[test]
    fn did_needs_both_groups() {
        let ds = dataset(vec![t("a", 0.0, 1.0, 3.0)]);
        assert!(matches!(estimate_did(&ds), Err(EstimationError::Dataset(DatasetError::EmptyGroup(Group::Control)))));
    }

    #[test]
    fn nearest_neighbor_single_match() {
        let controls = vec![(vec![0.9], 3.0), (vec![5.0], 10.0)];
        let fit = counterfactual_fit(&controls, &[vec![1.0]], &MethodSpec::nearest_neighbor(1)).unwrap();
        assert_eq!(fit.predictions, vec![3.0]);
    }

    #[test]
    fn k_larger_than_controls_is_rejected() {
        let controls = vec![(vec![0.9], 3.0)];
        assert!(matches!(
            counterfactual_fit(&controls, &[vec![1.0]], &MethodSpec::nearest_neighbor(2)),
            Err(EstimationError::Precondition(_))
        ));
    }

    #[test]
    fn constant_response_is_reproduced_by_every_method() {
        let controls: Vec<(Vec<f64>, f64)> = (0..30).map(|i| (vec![i as f64 * 0.3], 4.25)).collect();
        let targets: Vec<Vec<f64>> = vec![vec![-1.0], vec![2.2], vec![20.0]];
        for m in [
            MethodSpec::mean(),
            MethodSpec::nearest_neighbor(3),
            MethodSpec::local_linear(1.0),
            MethodSpec::local_linear_adjusted(0.5),
        ] {
            let fit = counterfactual_fit(&controls, &targets, &m).unwrap();
            for p in fit.predictions {
                assert!((p - 4.25).abs() < 1e-12, "{m}: {p}");
            }
        }
    }

    #[test]
    fn nearest_neighbor_ties_are_averaged() {
        let controls = vec![(vec![0.0], 1.0), (vec![2.0], 3.0), (vec![5.0], 100.0)];
        let fit = counterfactual_fit(&controls, &[vec![1.0]], &MethodSpec::nearest_neighbor(1)).unwrap();
        assert_eq!(fit.predictions, vec![2.0]);
        let multi = vec![(vec![0.0, 0.0], 1.0), (vec![2.0, 0.0], 3.0), (vec![5.0, 0.0], 100.0)];
        let fit = counterfactual_fit(&multi, &[vec![1.0, 0.0]], &MethodSpec::nearest_neighbor(1)).unwrap();
        assert_eq!(fit.predictions, vec![2.0]);
    }

    #[test]
    fn local_linear_on_noisy_line() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let controls: Vec<(Vec<f64>, f64)> = (0..500)
            .map(|_| {
                let x: f64 = rng.gen_range(0.0..10.0);
                let e: f64 = rng.sample(StandardNormal);
                (vec![x], 2.0 * x + 0.01 * e)
            })
            .collect();
        let fit = counterfactual_fit(&controls, &[vec![5.0]], &MethodSpec::local_linear(1.0)).unwrap();

        // Independent oracle: weighted least squares via explicit 2x2
        // normal equations with unshifted kernel weights.
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (x, y) in &controls {
            let d = x[0] - 5.0;
            let w = (-(d * d) / 2.0).exp();
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0 += w * y;
            t1 += w * d * y;
        }
        let oracle = (s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1);
        assert!((fit.predictions[0] - oracle).abs() < 1e-9);
        assert!((fit.predictions[0] - 10.0).abs() < 0.1);
    }

    #[test]
    fn scalar_and_general_local_linear_paths_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-2.0..2.0)]).collect();
        let ys = vec![xs.iter().map(|x| x[0].sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()];
        let targets: Vec<Vec<f64>> = (0..9).map(|i| vec![-2.0 + 0.5 * i as f64]).collect();
        let scalar = Design::new(xs.clone());
        let general = Design { xs, order: None };
        let m = MethodSpec::local_linear(0.4);
        let (a, _) = fit_responses(&scalar, &ys, &targets, &m).unwrap();
        let (b, _) = fit_responses(&general, &ys, &targets, &m).unwrap();
        for (p, q) in a[0].iter().zip(&b[0]) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }

    #[test]
    fn singular_local_linear_falls_back_and_flags() {
        // All controls share one x, so no slope is identified.
        let controls = vec![(vec![1.0], 2.0), (vec![1.0], 4.0)];
        let fit = counterfactual_fit(&controls, &[vec![0.0], vec![3.0]], &MethodSpec::local_linear(1.0)).unwrap();
        assert_eq!(fit.degenerate, vec![0, 1]);
        assert_eq!(fit.predictions, vec![3.0, 3.0]);
    }

    #[test]
    fn invalid_methods_rejected() {
        assert!(MethodSpec::nearest_neighbor(0).validate().is_err());
        assert!(MethodSpec::local_linear(0.0).validate().is_err());
        assert!(MethodSpec::local_linear_adjusted(f64::NAN).validate().is_err());
        assert_eq!(standard_methods().len(), 9);
    }

    #[test]
    fn m_hand_example() {
        let ds = dataset(vec![t("t", 1.0, 0.0, 5.0), c("a", 0.9, 0.0, 3.0), c("b", 5.0, 0.0, 10.0)]);
        let est = estimate_m(&ds, &MethodSpec::nearest_neighbor(1)).unwrap();
        assert_eq!(est.value, 2.0);
        assert_eq!(est.n_treated_used, 1);
    }

    #[test]
    fn didm_hand_example() {
        let ds = dataset(vec![t("t", 1.0, 1.0, 5.0), c("a", 0.9, 2.0, 3.0), c("b", 5.0, 1.0, 1.0)]);
        let est = estimate_didm(&ds, &MethodSpec::nearest_neighbor(1)).unwrap();
        assert_eq!(est.value, 3.0);
    }

    #[test]
    fn self_matched_duplicates_give_zero() {
        let ds = dataset(vec![
            t("t1", 1.0, 0.3, 5.0),
            t("t2", 2.5, 0.1, -1.0),
            c("c1", 1.0, 0.3, 5.0),
            c("c2", 2.5, 0.1, -1.0),
            c("c3", 9.0, 4.0, 4.0),
        ]);
        assert_eq!(estimate_m(&ds, &MethodSpec::nearest_neighbor(1)).unwrap().value, 0.0);
    }

    #[test]
    fn mean_difference_m_is_raw_difference() {
        let ds = dataset(vec![t("a", 1.0, 0.0, 5.0), t("b", 3.0, 0.0, 2.0), c("c", 0.0, 0.0, 1.0), c("d", 9.0, 0.0, 1.5)]);
        let est = estimate_m(&ds, &MethodSpec::mean()).unwrap();
        assert_eq!(est.value, 3.5 - 1.25);
    }

    #[test]
    fn support_trim_is_shared_by_all_three() {
        let ds = dataset(vec![
            t("a", 0.0, 0.0, 9.0),
            t("b", 2.0, 1.0, 4.0),
            c("c", 1.0, 0.0, 1.0),
            c("d", 3.0, 1.0, 2.0),
        ]);
        let rep = estimate_all(&ds, &MethodSpec::nearest_neighbor(1).with_support(true)).unwrap();
        assert_eq!(rep.support.unwrap().n_treated_dropped, 1);
        for e in [Estimand::M, Estimand::Didm, Estimand::Did] {
            assert_eq!(rep.estimate(e).n_treated_used, 1);
        }
        assert_eq!(rep.did.value, 3.0 - 1.0);
    }

    #[test]
    fn lag_zero_didm_equals_m() {
        // With y_lag = y0 and exact one-to-one matches, subtracting y0 is
        // cancelled by the match.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut recs = Vec::new();
        for i in 0..30 {
            let y0 = i as f64 * 0.7;
            recs.push(UnitRecord::new(format!("c{i}"), Group::Control, y0, y0, y0 + rng.gen_range(0.0..2.0)));
            if i % 3 == 0 {
                recs.push(UnitRecord::new(format!("t{i}"), Group::Treated, y0, y0, y0 + rng.gen_range(0.0..2.0)));
            }
        }
        let ds = dataset(recs);
        let m = MethodSpec::nearest_neighbor(1);
        let a = estimate_m(&ds, &m).unwrap().value;
        let b = estimate_didm(&ds, &m).unwrap().value;
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn multivariate_matching_uses_covariates() {
        let recs = vec![
            t("t", 1.0, 0.0, 5.0).with_covariates(vec![10.0]),
            c("a", 1.0, 0.0, 3.0).with_covariates(vec![0.0]),
            c("b", 1.2, 0.0, 4.0).with_covariates(vec![10.0]),
            c("d", 3.0, 0.0, 0.0).with_covariates(vec![5.0]),
        ];
        let ds = dataset(recs);
        let est = estimate_m(&ds, &MethodSpec::nearest_neighbor(1)).unwrap();
        assert_eq!(est.value, 1.0);
    }

    #[test]
    fn regression_adjusted_matches_local_linear_without_covariates() {
        let ds = random_dataset(60, 8, 0);
        let a = estimate_all(&ds, &MethodSpec::local_linear(1.0)).unwrap();
        let b = estimate_all(&ds, &MethodSpec::local_linear_adjusted(1.0)).unwrap();
        assert_eq!(a.m.value, b.m.value);
        assert_eq!(a.didm.value, b.didm.value);
    }

    #[test]
    fn regression_adjusted_runs_with_covariates() {
        let ds = random_dataset(80, 12, 2);
        let rep = estimate_all(&ds, &MethodSpec::local_linear_adjusted(1.0)).unwrap();
        assert!(rep.m.value.is_finite() && rep.didm.value.is_finite());
    }

    fn random_dataset(n: usize, seed: u64, arity: usize) -> CanonicalDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let recs = (0..n)
            .map(|i| {
                let w = if i % 2 == 0 { Group::Treated } else { Group::Control };
                let lag: f64 = rng.gen_range(0.0..5.0);
                let y0 = lag + rng.gen_range(-1.0..1.0);
                let y1 = y0 + rng.gen_range(-1.0..1.0);
                let cov = (0..arity).map(|_| rng.gen_range(-1.0..1.0)).collect();
                UnitRecord::new(format!("u{i}"), w, lag, y0, y1).with_covariates(cov)
            })
            .collect();
        dataset(recs)
    }

    fn methods() -> impl Strategy<Value = MethodSpec> {
        prop_oneof![
            Just(MethodSpec::mean()),
            Just(MethodSpec::nearest_neighbor(1)),
            Just(MethodSpec::nearest_neighbor(3)),
            Just(MethodSpec::local_linear(0.8)),
            Just(MethodSpec::nearest_neighbor(2).with_support(true)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shifting_all_y1_leaves_estimates_unchanged(seed in 0u64..1000, shift in -50f64..50.0, m in methods()) {
            let ds = random_dataset(30, seed, 0);
            let shifted = ds.map_records(|r| r.y1 += shift).unwrap();
            let a = estimate_all(&ds, &m).unwrap();
            let b = estimate_all(&shifted, &m).unwrap();
            prop_assert!((a.m.value - b.m.value).abs() < 1e-9);
            prop_assert!((a.didm.value - b.didm.value).abs() < 1e-9);
            prop_assert!((a.did.value - b.did.value).abs() < 1e-9);
        }

        #[test]
        fn injected_effect_moves_all_three(seed in 0u64..1000, tau in -10f64..10.0, m in methods(), arity in 0usize..2) {
            let ds = random_dataset(30, seed, arity);
            let injected = ds.map_records(|r| if r.w.is_treated() { r.y1 += tau }).unwrap();
            let a = estimate_all(&ds, &m).unwrap();
            let b = estimate_all(&injected, &m).unwrap();
            prop_assert!((b.m.value - a.m.value - tau).abs() < 1e-9);
            prop_assert!((b.didm.value - a.didm.value - tau).abs() < 1e-9);
            prop_assert!((b.did.value - a.did.value - tau).abs() < 1e-9);
        }

        #[test]
        fn record_order_is_irrelevant(seed in 0u64..1000, m in methods(), rot in 1usize..29) {
            let ds = random_dataset(30, seed, 0);
            let mut recs = ds.records().to_vec();
            recs.rotate_left(rot);
            recs.reverse();
            let permuted = ds.with_records(recs).unwrap();
            let a = estimate_all(&ds, &m).unwrap();
            let b = estimate_all(&permuted, &m).unwrap();
            prop_assert!((a.m.value - b.m.value).abs() < 1e-12);
            prop_assert!((a.didm.value - b.didm.value).abs() < 1e-12);
            prop_assert!((a.did.value - b.did.value).abs() < 1e-12);
        }

        #[test]
        fn unique_exact_matches_equal_paired_differences(seed in 0u64..1000) {
            // Brute-force oracle: each treated unit is paired with the one
            // control sharing its y_lag, found by direct enumeration.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut recs = Vec::new();
            let n = 12;
            for i in 0..n {
                let lag = i as f64 * 1.5;
                recs.push(UnitRecord::new(format!("c{i}"), Group::Control, lag, rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)));
                if i % 2 == 0 {
                    recs.push(UnitRecord::new(format!("t{i}"), Group::Treated, lag, rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)));
                }
            }
            let ds = dataset(recs.clone());
            let (mut m_sum, mut didm_sum, mut count) = (0.0, 0.0, 0.0);
            for tr in recs.iter().filter(|r| r.w.is_treated()) {
                let mate = recs.iter().find(|r| !r.w.is_treated() && r.y_lag == tr.y_lag).unwrap();
                m_sum += tr.y1 - mate.y1;
                didm_sum += tr.trend() - mate.trend();
                count += 1.0;
            }
            let rep = estimate_all(&ds, &MethodSpec::nearest_neighbor(1)).unwrap();
            prop_assert!((rep.m.value - m_sum / count).abs() < 1e-12);
            prop_assert!((rep.didm.value - didm_sum / count).abs() < 1e-12);
        }
    }
}
