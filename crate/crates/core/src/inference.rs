//! Stratified bootstrap intervals for the three estimands and their gaps,
//! plus the distribution-function bands used by the dominance diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CanonicalDataset, Group, UnitRecord};
use crate::estimators::{estimate_all, BracketReport, EstimationError, MethodSpec};
use crate::{linalg, par, rng};

/// Largest share of degenerate replicates tolerated by [`bootstrap_brackets`].
pub const MAX_DEGENERATE_SHARE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{degenerate} of {total} bootstrap replicates were degenerate (limit 10%)")]
    Unreliable { degenerate: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Percentile interval `[q(alpha/2), q(1 - alpha/2)]` of an ascending slice.
pub fn percentile_interval(sorted: &[f64], alpha: f64) -> Interval {
    Interval {
        lo: linalg::quantile_sorted(sorted, alpha / 2.0),
        hi: linalg::quantile_sorted(sorted, 1.0 - alpha / 2.0),
    }
}

/// Bootstrap replicate values of `(M, DIDM, DID, DIDM - M, DID - DIDM)`,
/// each sorted ascending, with degenerate replicates removed.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReplicates {
    pub sorted: [Vec<f64>; 5],
    pub n_requested: usize,
    pub n_degenerate: usize,
}

impl BootstrapReplicates {
    pub fn n_used(&self) -> usize {
        self.sorted[0].len()
    }

    /// Percentile intervals in the order of [`BootstrapReplicates::sorted`].
    pub fn intervals(&self, alpha: f64) -> [Interval; 5] {
        std::array::from_fn(|k| percentile_interval(&self.sorted[k], alpha))
    }
}

/// Resampled records: each group drawn with replacement at its own size.
fn resample(treated: &[&UnitRecord], controls: &[&UnitRecord], rng: &mut impl Rng) -> Vec<UnitRecord> {
    let mut out = Vec::with_capacity(treated.len() + controls.len());
    for group in [treated, controls] {
        for _ in 0..group.len() {
            out.push(group[rng.gen_range(0..group.len())].clone());
        }
    }
    out
}

/// Draws `b` stratified resamples and runs [`estimate_all`] on each.
/// Replicate `r` uses random stream `r` of `seed`, so the output does not
/// depend on how replicates are scheduled.
pub fn bootstrap_replicates(
    ds: &CanonicalDataset,
    method: &MethodSpec,
    b: usize,
    seed: u64,
) -> Result<BootstrapReplicates, InferenceError> {
    ds.require_both_groups().map_err(EstimationError::from)?;
    method.validate()?;
    let treated: Vec<&UnitRecord> = ds.group(Group::Treated).collect();
    let controls: Vec<&UnitRecord> = ds.group(Group::Control).collect();
    let results = par::map_indexed(b, |r| {
        let mut g = rng::stream(seed, r as u64);
        let sample = CanonicalDataset::from_resample(resample(&treated, &controls, &mut g), ds.meta.clone());
        estimate_all(&sample, method).ok().map(|rep| {
            [rep.m.value, rep.didm.value, rep.did.value, rep.gap_didm_m, rep.gap_did_didm]
        })
    });
    let n_degenerate = results.iter().filter(|r| r.is_none()).count();
    if n_degenerate as f64 > MAX_DEGENERATE_SHARE * b as f64 {
        return Err(InferenceError::Unreliable {
            degenerate: n_degenerate,
            total: b,
        });
    }
    if n_degenerate > 0 {
        log::warn!("dropped {n_degenerate} degenerate bootstrap replicates");
    }
    let mut sorted: [Vec<f64>; 5] = Default::default();
    for vals in results.iter().flatten() {
        for (k, v) in vals.iter().enumerate() {
            sorted[k].push(*v);
        }
    }
    for s in &mut sorted {
        s.sort_by(f64::total_cmp);
    }
    Ok(BootstrapReplicates {
        sorted,
        n_requested: b,
        n_degenerate,
    })
}

/// Point estimates with percentile bootstrap intervals at level `1 - alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketCIs {
    pub point: BracketReport,
    pub ci_m: Interval,
    pub ci_didm: Interval,
    pub ci_did: Interval,
    pub ci_gap_didm_m: Interval,
    pub ci_gap_did_didm: Interval,
    /// Replicates that entered the intervals.
    pub n_replicates: usize,
    pub n_degenerate: usize,
    pub alpha: f64,
    pub seed: u64,
    pub scheme: String,
}

pub fn bootstrap_brackets(
    ds: &CanonicalDataset,
    method: &MethodSpec,
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<BracketCIs, InferenceError> {
    if b < 100 {
        return Err(InferenceError::Precondition(format!("need at least 100 replicates, got {b}")));
    }
    check_alpha(alpha)?;
    let point = estimate_all(ds, method)?;
    let reps = bootstrap_replicates(ds, method, b, seed)?;
    let [ci_m, ci_didm, ci_did, ci_gap_didm_m, ci_gap_did_didm] = reps.intervals(alpha);
    Ok(BracketCIs {
        point,
        ci_m,
        ci_didm,
        ci_did,
        ci_gap_didm_m,
        ci_gap_did_didm,
        n_replicates: reps.n_used(),
        n_degenerate: reps.n_degenerate,
        alpha,
        seed,
        scheme: "stratified pairs bootstrap, percentile intervals".into(),
    })
}

fn check_alpha(alpha: f64) -> Result<(), InferenceError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(InferenceError::Precondition(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Dvoretzky-Kiefer-Wolfowitz half-width `sqrt(ln(2 / alpha) / (2 n))`.
pub fn dkw_epsilon(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

/// `(1 - alpha)` bootstrap quantile of `sup_j |F*(x_j) - F(x_j)|`, where `F`
/// is the componentwise empirical distribution function of `points` and the
/// supremum runs over `eval`.
pub fn ecdf_sup_band(points: &[Vec<f64>], eval: &[Vec<f64>], b: usize, alpha: f64, seed: u64) -> f64 {
    let n = points.len();
    if n == 0 || eval.is_empty() || b == 0 {
        return 0.0;
    }
    let below = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, c)| a <= c);
    let dominated: Vec<Vec<usize>> = par::map_slice(eval, |e| (0..n).filter(|&i| below(&points[i], e)).collect());
    let base: Vec<f64> = dominated.iter().map(|d| d.len() as f64 / n as f64).collect();
    let mut sups = par::map_indexed(b, |r| {
        let mut g = rng::stream(seed, r as u64);
        let mut mult = vec![0u32; n];
        for _ in 0..n {
            mult[g.gen_range(0..n)] += 1;
        }
        dominated
            .iter()
            .zip(&base)
            .map(|(d, f)| {
                let count: u32 = d.iter().map(|&i| mult[i]).sum();
                (count as f64 / n as f64 - f).abs()
            })
            .fold(0.0, f64::max)
    });
    sups.sort_by(f64::total_cmp);
    linalg::quantile_sorted(&sups, 1.0 - alpha)
}
