//! Data-generating processes that carry every potential outcome.
//!
//! Two families are provided: the linear dynamic panel
//!
//! ```text
//! Y_t = alpha + beta * W * 1{t >= 1} + gamma * W + delta_t + rho * Y_{t-1} + eps_t
//! ```
//!
//! with closed forms for the three estimands, and four binary-lag designs in
//! which exactly the stated subset of the identifying conditions holds.
//! Because the untreated potential outcomes of the treated group are known,
//! identification errors can be computed directly.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CanonicalDataset, DatasetError, DatasetMeta, Group, UnitRecord};
use crate::{linalg, par, rng};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Parameters of the linear dynamic panel. `y_lag` is drawn from a normal law
/// whose mean depends on the group; `W` is drawn first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricDgpSpec {
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub alpha_sd: f64,
    pub eps_sd: f64,
    pub ylag_mean_treated: f64,
    pub ylag_mean_control: f64,
    pub ylag_sd: f64,
    pub p_treated: f64,
}

impl ParametricDgpSpec {
    /// beta = 2, gamma = -1, rho = 0.5, control lag mean 1, treated lag mean
    /// 0, unit standard deviations, half of the units treated.
    pub fn canonical() -> Self {
        ParametricDgpSpec {
            beta: 2.0,
            gamma: -1.0,
            rho: 0.5,
            delta0: 0.0,
            delta1: 0.0,
            alpha_sd: 1.0,
            eps_sd: 1.0,
            ylag_mean_treated: 0.0,
            ylag_mean_control: 1.0,
            ylag_sd: 1.0,
            p_treated: 0.5,
        }
    }

    /// `E[y_lag | W = 0] - E[y_lag | W = 1]`.
    pub fn mean_gap(&self) -> f64 {
        self.ylag_mean_control - self.ylag_mean_treated
    }

    /// Whether the spec satisfies the three sufficient conditions for the
    /// bracketing order: `gamma <= 0`, a nonnegative lag mean gap and
    /// `0 <= rho <= 1`.
    pub fn satisfies_bracketing_conditions(&self) -> bool {
        self.gamma <= 0.0 && self.mean_gap() >= 0.0 && (0.0..=1.0).contains(&self.rho)
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let values = [
            self.beta,
            self.gamma,
            self.rho,
            self.delta0,
            self.delta1,
            self.alpha_sd,
            self.eps_sd,
            self.ylag_mean_treated,
            self.ylag_mean_control,
            self.ylag_sd,
            self.p_treated,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimulationError::Precondition("parameters must be finite".into()));
        }
        if !(self.p_treated > 0.0 && self.p_treated < 1.0) {
            return Err(SimulationError::Precondition(format!(
                "p_treated must lie in (0, 1), got {}",
                self.p_treated
            )));
        }
        if self.alpha_sd < 0.0 || self.eps_sd < 0.0 || self.ylag_sd < 0.0 {
            return Err(SimulationError::Precondition("standard deviations must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Population values of the three estimands under the linear panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedForms {
    pub m: f64,
    pub didm: f64,
    pub did: f64,
}

pub fn closed_forms(spec: &ParametricDgpSpec) -> ClosedForms {
    let ParametricDgpSpec { beta, gamma, rho, .. } = *spec;
    let didm = beta + rho * gamma;
    ClosedForms {
        m: beta + (1.0 + rho) * gamma,
        didm,
        did: didm + rho * (1.0 - rho) * spec.mean_gap(),
    }
}

/// A simulated two-period panel with all four potential outcomes per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePanel {
    pub canonical: CanonicalDataset,
    pub po_y0_0: Vec<f64>,
    pub po_y0_1: Vec<f64>,
    pub po_y1_0: Vec<f64>,
    pub po_y1_1: Vec<f64>,
    /// Mean over treated units of `po_y1_1 - po_y1_0`.
    pub true_att: f64,
}

/// Potential outcomes of one unit plus its observed lag and group.
#[derive(Debug, Clone, Copy)]
struct Draw {
    w: Group,
    y_lag: f64,
    y0: [f64; 2],
    y1: [f64; 2],
}

impl OraclePanel {
    fn from_draws(draws: Vec<Draw>, provenance: String) -> Result<Self, SimulationError> {
        let n = draws.len();
        let mut records = Vec::with_capacity(n);
        let (mut po_y0_0, mut po_y0_1, mut po_y1_0, mut po_y1_1) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut att_sum, mut n_t) = (0.0, 0usize);
        for (i, d) in draws.into_iter().enumerate() {
            let k = d.w.indicator() as usize;
            records.push(UnitRecord::new(i.to_string(), d.w, d.y_lag, d.y0[k], d.y1[k]));
            po_y0_0.push(d.y0[0]);
            po_y0_1.push(d.y0[1]);
            po_y1_0.push(d.y1[0]);
            po_y1_1.push(d.y1[1]);
            if d.w.is_treated() {
                att_sum += d.y1[1] - d.y1[0];
                n_t += 1;
            }
        }
        let meta = DatasetMeta {
            lag_order: 1,
            provenance,
            ..DatasetMeta::default()
        };
        Ok(OraclePanel {
            canonical: CanonicalDataset::new(records, meta)?,
            po_y0_0,
            po_y0_1,
            po_y1_0,
            po_y1_1,
            true_att: if n_t > 0 { att_sum / n_t as f64 } else { f64::NAN },
        })
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    /// Writes `id,w,y_lag,y0,y1,po_y0_0,po_y0_1,po_y1_0,po_y1_1`. The first
    /// five columns are the canonical CSV layout, so the file loads directly
    /// as a dataset.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["id", "w", "y_lag", "y0", "y1", "po_y0_0", "po_y0_1", "po_y1_0", "po_y1_1"])?;
        for (i, r) in self.canonical.records().iter().enumerate() {
            wtr.write_record([
                r.unit_id.clone(),
                r.w.indicator().to_string(),
                r.y_lag.to_string(),
                r.y0.to_string(),
                r.y1.to_string(),
                self.po_y0_0[i].to_string(),
                self.po_y0_1[i].to_string(),
                self.po_y1_0[i].to_string(),
                self.po_y1_1[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulates `n` units of the linear panel. Unit `i` draws from its own
/// random stream, so the panel does not depend on thread count.
///
/// Untreated potential outcomes drop only the `beta` term; the selection term
/// `gamma * W` is part of both branches, so the treated effect is `beta`.
pub fn simulate_parametric(spec: &ParametricDgpSpec, n: usize, seed: u64) -> Result<OraclePanel, SimulationError> {
    spec.validate()?;
    if n < 2 {
        return Err(SimulationError::Precondition("n must be at least 2".into()));
    }
    let s = *spec;
    let draws = par::map_indexed(n, |i| {
        let mut r = rng::stream(seed, i as u64);
        let treated = r.gen::<f64>() < s.p_treated;
        let mean = if treated { s.ylag_mean_treated } else { s.ylag_mean_control };
        let y_lag = mean + s.ylag_sd * normal(&mut r);
        let alpha = s.alpha_sd * normal(&mut r);
        let eps0 = s.eps_sd * normal(&mut r);
        let eps1 = s.eps_sd * normal(&mut r);
        let wf = if treated { 1.0 } else { 0.0 };
        let y0 = alpha + s.gamma * wf + s.delta0 + s.rho * y_lag + eps0;
        let y1_0 = alpha + s.gamma * wf + s.delta1 + s.rho * y0 + eps1;
        Draw {
            w: Group::from_indicator(treated as u8).expect("binary"),
            y_lag,
            y0: [y0, y0],
            y1: [y1_0, y1_0 + s.beta],
        }
    });
    OraclePanel::from_draws(draws, format!("parametric n={n} seed={seed}"))
}

/// The four binary-lag designs. Each holds the parameters named in its
/// construction; see [`simulate_counterexample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CounterexampleKind {
    /// Pre-period level `mu(W)` that vanishes by the post period.
    MHoldsDidmFails { mu0: f64, mu1: f64 },
    /// Group level `mu(W)` present in both periods.
    DidmHoldsMFails { mu0: f64, mu1: f64 },
    /// Trend equal to `y_lag` in both groups, with different lag means.
    DidmHoldsDidFails { mean_control: f64, mean_treated: f64 },
    /// Trend `(2W - 1) * y_lag` with lag means summing to zero.
    DidHoldsDidmFails { mean_control: f64, mean_treated: f64 },
}

impl CounterexampleKind {
    pub const NAMES: [&'static str; 4] = [
        "m_holds_didm_fails",
        "didm_holds_m_fails",
        "didm_holds_did_fails",
        "did_holds_didm_fails",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CounterexampleKind::MHoldsDidmFails { .. } => Self::NAMES[0],
            CounterexampleKind::DidmHoldsMFails { .. } => Self::NAMES[1],
            CounterexampleKind::DidmHoldsDidFails { .. } => Self::NAMES[2],
            CounterexampleKind::DidHoldsDidmFails { .. } => Self::NAMES[3],
        }
    }

    /// Which of Conditions (M, DIDM, DID) hold by construction.
    pub fn expected_pattern(&self) -> ConditionPattern {
        let (m, didm, did) = match self {
            CounterexampleKind::MHoldsDidmFails { .. } => (true, false, false),
            CounterexampleKind::DidmHoldsMFails { .. } => (false, true, true),
            CounterexampleKind::DidmHoldsDidFails { .. } => (true, true, false),
            CounterexampleKind::DidHoldsDidmFails { .. } => (false, false, true),
        };
        ConditionPattern { m, didm, did }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |msg: String| Err(SimulationError::Precondition(msg));
        match *self {
            CounterexampleKind::MHoldsDidmFails { mu0, mu1 } | CounterexampleKind::DidmHoldsMFails { mu0, mu1 } => {
                if !(mu0.is_finite() && mu1.is_finite()) || mu0 == mu1 {
                    return bad(format!("{} needs finite mu(0) != mu(1)", self.name()));
                }
            }
            CounterexampleKind::DidmHoldsDidFails { mean_control, mean_treated }
            | CounterexampleKind::DidHoldsDidmFails { mean_control, mean_treated } => {
                for m in [mean_control, mean_treated] {
                    if !(-1.0..=1.0).contains(&m) {
                        return bad(format!("a binary lag in {{-1, 1}} cannot have mean {m}"));
                    }
                }
                if matches!(self, CounterexampleKind::DidmHoldsDidFails { .. }) && mean_control == mean_treated {
                    return bad("didm_holds_did_fails needs different lag means".into());
                }
                if matches!(self, CounterexampleKind::DidHoldsDidmFails { .. })
                    && (mean_control + mean_treated).abs() > 1e-12
                {
                    return bad("did_holds_didm_fails needs lag means summing to zero".into());
                }
            }
        }
        Ok(())
    }
}

impl FromStr for CounterexampleKind {
    type Err = SimulationError;

    /// Parses a kind name into its default parameters.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "m_holds_didm_fails" => CounterexampleKind::MHoldsDidmFails { mu0: 0.0, mu1: -1.0 },
            "didm_holds_m_fails" => CounterexampleKind::DidmHoldsMFails { mu0: 0.0, mu1: -1.0 },
            "didm_holds_did_fails" => CounterexampleKind::DidmHoldsDidFails {
                mean_control: 0.5,
                mean_treated: -0.5,
            },
            "did_holds_didm_fails" => CounterexampleKind::DidHoldsDidmFails {
                mean_control: 0.5,
                mean_treated: -0.5,
            },
            other => {
                return Err(SimulationError::Precondition(format!(
                    "unknown counterexample '{other}', expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for CounterexampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Simulates one of the binary-lag designs with `y_lag` in `{-1, 1}`, `W`
/// Bernoulli(1/2) and independent standard normal shocks. Treated potential
/// outcomes add a unit effect in the post period and equal the untreated ones
/// in the pre period.
pub fn simulate_counterexample(kind: &CounterexampleKind, n: usize, seed: u64) -> Result<OraclePanel, SimulationError> {
    kind.validate()?;
    if n < 100 {
        return Err(SimulationError::Precondition("counterexample panels need n >= 100".into()));
    }
    let kind = *kind;
    let draws = par::map_indexed(n, |i| {
        let mut r = rng::stream(seed, i as u64);
        let treated = r.gen::<bool>();
        let wf = if treated { 1.0 } else { 0.0 };
        let u: f64 = r.gen();
        let eta0 = normal(&mut r);
        let eta1 = normal(&mut r);
        let eta1_treated = normal(&mut r);
        let binary = |mean: f64| if u < (1.0 + mean) / 2.0 { 1.0 } else { -1.0 };
        let (y_lag, y0, y1_0, y1_1) = match kind {
            CounterexampleKind::MHoldsDidmFails { mu0, mu1 } => {
                let mu = if treated { mu1 } else { mu0 };
                let y_lag = binary(0.0);
                (y_lag, mu + eta0, eta1, 1.0 + eta1_treated)
            }
            CounterexampleKind::DidmHoldsMFails { mu0, mu1 } => {
                let mu = if treated { mu1 } else { mu0 };
                let y_lag = binary(0.0);
                (y_lag, mu + eta0, mu + eta1, mu + 1.0 + eta1_treated)
            }
            CounterexampleKind::DidmHoldsDidFails { mean_control, mean_treated } => {
                let y_lag = binary(if treated { mean_treated } else { mean_control });
                let y1 = y_lag + eta0 + y_lag + eta1;
                (y_lag, y_lag + eta0, y1, y1 + 1.0)
            }
            CounterexampleKind::DidHoldsDidmFails { mean_control, mean_treated } => {
                let y_lag = binary(if treated { mean_treated } else { mean_control });
                let y1 = y_lag + eta0 + (2.0 * wf - 1.0) * y_lag + eta1;
                (y_lag, y_lag + eta0, y1, y1 + 1.0)
            }
        };
        Draw {
            w: Group::from_indicator(treated as u8).expect("binary"),
            y_lag,
            y0: [y0, y0],
            y1: [y1_0, y1_1],
        }
    });
    OraclePanel::from_draws(draws, format!("counterexample {} n={n} seed={seed}", kind.name()))
}

/// Cells of `y_lag` in which both groups are present.
#[derive(Debug, Clone)]
struct Cells {
    /// Cell index per unit.
    of: Vec<usize>,
    count: usize,
    merged: usize,
}

/// Discrete cells when `y_lag` takes at most `n_bins` distinct values,
/// otherwise pooled quantile bins. Cells missing a group are merged into a
/// neighbor.
fn build_cells(ds: &CanonicalDataset, n_bins: usize) -> Cells {
    let recs = ds.records();
    let mut sorted: Vec<f64> = recs.iter().map(|r| r.y_lag).collect();
    sorted.sort_by(f64::total_cmp);
    let mut uniq = sorted.clone();
    uniq.dedup();
    let edges: Vec<f64> = if uniq.len() <= n_bins {
        uniq[1..].to_vec()
    } else {
        let mut e: Vec<f64> = (1..n_bins)
            .map(|k| linalg::quantile_sorted(&sorted, k as f64 / n_bins as f64))
            .collect();
        e.dedup();
        e
    };
    // Raw cell j holds values in [edges[j-1], edges[j]).
    let raw: Vec<usize> = recs.iter().map(|r| edges.partition_point(|&e| e <= r.y_lag)).collect();
    let n_raw = edges.len() + 1;
    let mut has = vec![[false; 2]; n_raw];
    for (r, &c) in recs.iter().zip(&raw) {
        has[c][r.w.indicator() as usize] = true;
    }
    // Close a merged cell once it contains both groups.
    let mut map = vec![0usize; n_raw];
    let mut current = 0usize;
    let mut acc = [false; 2];
    let mut open_nonempty = false;
    let mut complete = 0usize;
    for j in 0..n_raw {
        map[j] = current;
        acc[0] |= has[j][0];
        acc[1] |= has[j][1];
        open_nonempty |= has[j][0] || has[j][1];
        if acc[0] && acc[1] {
            current += 1;
            complete = current;
            acc = [false; 2];
            open_nonempty = false;
        }
    }
    if open_nonempty && complete > 0 {
        for m in map.iter_mut().filter(|m| **m == current) {
            *m = complete - 1;
        }
    }
    let count = complete.max(1);
    let nonempty_raw = has.iter().filter(|h| h[0] || h[1]).count();
    let merged = nonempty_raw.saturating_sub(count);
    if merged > 0 {
        log::warn!("merged {merged} y_lag cells lacking one group into neighbors");
    }
    Cells {
        of: raw.iter().map(|&c| map[c].min(count - 1)).collect(),
        count,
        merged,
    }
}

/// Per-cell sums used to form means and variances.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    /// Squared standard error of the mean.
    fn se2(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let var = (self.sum_sq - self.sum * self.sum / self.n) / (self.n - 1.0);
        var.max(0.0) / self.n
    }
}

/// `[cell][group]` moments of `values`.
fn cell_moments(ds: &CanonicalDataset, cells: &Cells, values: impl Fn(usize) -> f64) -> Vec<[Moments; 2]> {
    let mut out = vec![[Moments::default(); 2]; cells.count];
    for (i, r) in ds.records().iter().enumerate() {
        out[cells.of[i]][r.w.indicator() as usize].push(values(i));
    }
    out
}

fn group_moments(ds: &CanonicalDataset, values: impl Fn(usize) -> f64) -> [Moments; 2] {
    let mut out = [Moments::default(); 2];
    for (i, r) in ds.records().iter().enumerate() {
        out[r.w.indicator() as usize].push(values(i));
    }
    out
}

/// Estimand minus ATT for each estimand, computed from untreated potential
/// outcomes, with Monte Carlo standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationErrors {
    pub d_m: f64,
    pub d_didm: f64,
    pub d_did: f64,
    pub se_m: f64,
    pub se_didm: f64,
    pub se_did: f64,
    pub n_cells: usize,
    /// Raw cells merged into a neighbor for lacking one group.
    pub n_merged: usize,
}

impl IdentificationErrors {
    /// `d_m <= d_didm <= d_did`, each comparison allowed a slack of `k`
    /// standard errors of the difference (`k = 0` for the strict order).
    pub fn ordered(&self, k: f64) -> bool {
        let slack_lo = k * (self.se_m.powi(2) + self.se_didm.powi(2)).sqrt();
        let slack_hi = k * (self.se_didm.powi(2) + self.se_did.powi(2)).sqrt();
        self.d_m <= self.d_didm + slack_lo && self.d_didm <= self.d_did + slack_hi
    }
}

fn check_panel(panel: &OraclePanel) -> Result<(), SimulationError> {
    panel.canonical.require_both_groups()?;
    Ok(())
}

/// Treated-weighted average over cells of the treated-minus-control cell
/// mean difference, and its standard error.
fn conditional_gap(stats: &[[Moments; 2]], n_t: f64) -> (f64, f64) {
    let (mut d, mut v) = (0.0, 0.0);
    for [c, t] in stats {
        let wgt = t.n / n_t;
        if wgt > 0.0 {
            d += wgt * (t.mean() - c.mean());
            v += wgt * wgt * (t.se2() + c.se2());
        }
    }
    (d, v.sqrt())
}

pub fn identification_errors(panel: &OraclePanel, n_bins: usize) -> Result<IdentificationErrors, SimulationError> {
    check_panel(panel)?;
    if n_bins == 0 {
        return Err(SimulationError::Precondition("n_bins must be positive".into()));
    }
    let ds = &panel.canonical;
    let cells = build_cells(ds, n_bins);
    let n_t = ds.n_group(Group::Treated) as f64;
    let trend = |i: usize| panel.po_y1_0[i] - panel.po_y0_0[i];
    let (d_m, se_m) = conditional_gap(&cell_moments(ds, &cells, |i| panel.po_y1_0[i]), n_t);
    let (d_didm, se_didm) = conditional_gap(&cell_moments(ds, &cells, trend), n_t);
    let [c, t] = group_moments(ds, trend);
    Ok(IdentificationErrors {
        d_m,
        d_didm,
        d_did: t.mean() - c.mean(),
        se_m,
        se_didm,
        se_did: (t.se2() + c.se2()).sqrt(),
        n_cells: cells.count,
        n_merged: cells.merged,
    })
}

/// Whether Conditions (M, DIDM, DID) hold at the conditional-mean level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionPattern {
    pub m: bool,
    pub didm: bool,
    pub did: bool,
}

impl fmt::Display for ConditionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(M: {}, DIDM: {}, DID: {})", self.m, self.didm, self.did)
    }
}

/// Cells used by [`condition_check`] when `y_lag` is continuous.
pub const CONDITION_CHECK_BINS: usize = 20;

fn means_agree(c: &Moments, t: &Moments, tol: f64) -> bool {
    let diff = (t.mean() - c.mean()).abs();
    let scale = 1.0 + t.mean().abs().max(c.mean().abs());
    diff <= tol * (t.se2() + c.se2()).sqrt() + 1e-12 * scale
}

/// Compares treated and control means of the potential outcomes within
/// `y_lag` cells: Condition M on `Y_1(0)` and `Y_1(1)`, Condition DIDM on the
/// untreated trend, Condition DID on the untreated trend without
/// conditioning. A difference counts as zero when within `tol` standard
/// errors.
pub fn condition_check(panel: &OraclePanel, tol: f64) -> Result<ConditionPattern, SimulationError> {
    check_panel(panel)?;
    if !(tol >= 0.0) {
        return Err(SimulationError::Precondition("tol must be nonnegative".into()));
    }
    let ds = &panel.canonical;
    let cells = build_cells(ds, CONDITION_CHECK_BINS);
    let trend = |i: usize| panel.po_y1_0[i] - panel.po_y0_0[i];
    let all_agree = |stats: Vec<[Moments; 2]>| stats.iter().all(|[c, t]| t.n == 0.0 || c.n == 0.0 || means_agree(c, t, tol));
    let m = all_agree(cell_moments(ds, &cells, |i| panel.po_y1_0[i]))
        && all_agree(cell_moments(ds, &cells, |i| panel.po_y1_1[i]));
    let didm = all_agree(cell_moments(ds, &cells, trend));
    let [c, t] = group_moments(ds, trend);
    Ok(ConditionPattern {
        m,
        didm,
        did: means_agree(&c, &t, tol),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deterministic() -> ParametricDgpSpec {
        ParametricDgpSpec {
            alpha_sd: 0.0,
            eps_sd: 0.0,
            ylag_sd: 0.0,
            ylag_mean_control: 0.0,
            ..ParametricDgpSpec::canonical()
        }
    }

    #[test]
    fn canonical_closed_forms() {
        let cf = closed_forms(&ParametricDgpSpec::canonical());
        assert_eq!((cf.m, cf.didm, cf.did), (0.5, 1.5, 1.75));
    }

    #[test]
    fn special_cases_collapse() {
        let no_selection = ParametricDgpSpec {
            gamma: 0.0,
            ..ParametricDgpSpec::canonical()
        };
        let cf = closed_forms(&no_selection);
        assert_eq!(cf.m, cf.didm);
        assert_eq!(cf.m, 2.0);
        for rho in [0.0, 1.0] {
            let cf = closed_forms(&ParametricDgpSpec {
                rho,
                ..ParametricDgpSpec::canonical()
            });
            assert_eq!(cf.didm, cf.did);
        }
        let cf = closed_forms(&ParametricDgpSpec {
            rho: 0.0,
            ..ParametricDgpSpec::canonical()
        });
        assert_eq!(cf.did, 2.0);
    }

    #[test]
    fn deterministic_recursion_gives_beta() {
        let p = simulate_parametric(&deterministic(), 50, 1).unwrap();
        for (i, r) in p.canonical.records().iter().enumerate() {
            if r.w.is_treated() {
                assert_eq!(p.po_y1_1[i] - p.po_y1_0[i], 2.0);
            }
        }
        assert_eq!(p.true_att, 2.0);
        let zero = simulate_parametric(
            &ParametricDgpSpec {
                beta: 0.0,
                ..ParametricDgpSpec::canonical()
            },
            200,
            4,
        )
        .unwrap();
        assert_eq!(zero.true_att, 0.0);
    }

    #[test]
    fn observed_outcomes_pick_the_realized_branch() {
        let p = simulate_parametric(&ParametricDgpSpec::canonical(), 500, 2).unwrap();
        for (i, r) in p.canonical.records().iter().enumerate() {
            let (y0, y1) = match r.w {
                Group::Treated => (p.po_y0_1[i], p.po_y1_1[i]),
                Group::Control => (p.po_y0_0[i], p.po_y1_0[i]),
            };
            assert_eq!(r.y0.to_bits(), y0.to_bits());
            assert_eq!(r.y1.to_bits(), y1.to_bits());
        }
    }

    #[test]
    fn lag_mean_gap_by_law_of_large_numbers() {
        let p = simulate_parametric(&ParametricDgpSpec::canonical(), 50_000, 11).unwrap();
        let mean = |g| {
            let v: Vec<f64> = p.canonical.group(g).map(|r| r.y_lag).collect();
            linalg::mean(&v)
        };
        let gap = mean(Group::Control) - mean(Group::Treated);
        assert!((gap - 1.0).abs() < 0.03, "{gap}");
    }

    #[test]
    fn same_seed_same_panel() {
        let spec = ParametricDgpSpec::canonical();
        let a = simulate_parametric(&spec, 300, 5).unwrap();
        let b = par::with_threads(1, || simulate_parametric(&spec, 300, 5).unwrap());
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn oracle_csv_loads_as_dataset() {
        let p = simulate_parametric(&ParametricDgpSpec::canonical(), 100, 3).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let ds = crate::dataset::read_csv(buf.as_slice(), &crate::dataset::CsvSchema::default()).unwrap();
        assert_eq!(ds.records(), p.canonical.records());
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = ParametricDgpSpec {
            p_treated: 1.0,
            ..ParametricDgpSpec::canonical()
        };
        assert!(simulate_parametric(&bad, 10, 0).is_err());
        assert!(simulate_parametric(&ParametricDgpSpec::canonical(), 1, 0).is_err());
        let kind = CounterexampleKind::DidHoldsDidmFails {
            mean_control: 0.5,
            mean_treated: 0.0,
        };
        assert!(simulate_counterexample(&kind, 1000, 0).is_err());
        let kind = CounterexampleKind::MHoldsDidmFails { mu0: 1.0, mu1: 1.0 };
        assert!(kind.validate().is_err());
        assert!("nope".parse::<CounterexampleKind>().is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for name in CounterexampleKind::NAMES {
            assert_eq!(name.parse::<CounterexampleKind>().unwrap().name(), name);
        }
    }

    #[test]
    fn canonical_identification_errors() {
        let spec = ParametricDgpSpec::canonical();
        let p = simulate_parametric(&spec, 100_000, 21).unwrap();
        let e = identification_errors(&p, 20).unwrap();
        let cf = closed_forms(&spec);
        for (got, want) in [(e.d_m, cf.m - 2.0), (e.d_didm, cf.didm - 2.0), (e.d_did, cf.did - 2.0)] {
            assert!((got - want).abs() < 0.05, "{got} vs {want}");
        }
        assert!(e.ordered(0.0));
    }

    #[test]
    fn no_confounding_gives_zero_errors() {
        let spec = ParametricDgpSpec {
            gamma: 0.0,
            ylag_mean_control: 0.0,
            ..ParametricDgpSpec::canonical()
        };
        let p = simulate_parametric(&spec, 40_000, 8).unwrap();
        let e = identification_errors(&p, 20).unwrap();
        for (d, se) in [(e.d_m, e.se_m), (e.d_didm, e.se_didm), (e.d_did, e.se_did)] {
            assert!(d.abs() < 4.0 * se + 0.01, "{d} (se {se})");
        }
        assert_eq!(condition_check(&p, 4.0).unwrap(), ConditionPattern { m: true, didm: true, did: true });
    }

    #[test]
    fn counterexample_patterns() {
        for name in CounterexampleKind::NAMES {
            let kind: CounterexampleKind = name.parse().unwrap();
            let p = simulate_counterexample(&kind, 100_000, 7).unwrap();
            assert_eq!(condition_check(&p, 4.0).unwrap(), kind.expected_pattern(), "{name}");
        }
    }

    #[test]
    fn parametric_with_selection_satisfies_no_condition() {
        let p = simulate_parametric(&ParametricDgpSpec::canonical(), 100_000, 12).unwrap();
        assert_eq!(condition_check(&p, 4.0).unwrap(), ConditionPattern { m: false, didm: false, did: false });
    }

    #[test]
    fn cells_merge_when_a_group_is_missing() {
        let recs = vec![
            UnitRecord::new("a", Group::Treated, 0.0, 0.0, 0.0),
            UnitRecord::new("b", Group::Control, 1.0, 0.0, 0.0),
            UnitRecord::new("c", Group::Treated, 1.0, 0.0, 0.0),
            UnitRecord::new("d", Group::Control, 2.0, 0.0, 0.0),
            UnitRecord::new("e", Group::Treated, 2.0, 0.0, 0.0),
        ];
        let ds = CanonicalDataset::new(recs, DatasetMeta::default()).unwrap();
        let cells = build_cells(&ds, 3);
        assert_eq!(cells.count, 2);
        assert_eq!(cells.of, vec![0, 0, 0, 1, 1]);
        assert_eq!(cells.merged, 1);
    }

    proptest! {
        #[test]
        fn closed_forms_bracket(gamma in -2f64..=0.0, rho in 0f64..=1.0, gap in 0f64..=2.0, beta in -3f64..3.0) {
            let spec = ParametricDgpSpec {
                beta,
                gamma,
                rho,
                ylag_mean_control: gap,
                ylag_mean_treated: 0.0,
                ..ParametricDgpSpec::canonical()
            };
            let cf = closed_forms(&spec);
            prop_assert!(cf.m <= cf.didm + 1e-12);
            prop_assert!(cf.didm <= cf.did + 1e-12);
        }

        #[test]
        fn seeds_determine_counterexample_panels(seed in 0u64..10_000, k in 0usize..4) {
            let kind: CounterexampleKind = CounterexampleKind::NAMES[k].parse().unwrap();
            let a = simulate_counterexample(&kind, 150, seed).unwrap();
            let b = simulate_counterexample(&kind, 150, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
