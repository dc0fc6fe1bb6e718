//! Empirical checks of the three bracketing conditions: negative selection
//! on the pre-period outcome, stochastic dominance of the control group's
//! lagged outcome, and a weakly decreasing control trend function
//! `Phi(y) = E[y1 - y0 | W = 0, y_lag = y]`.
//!
//! Curves are partitioning series regressions: piecewise polynomials on
//! quantile-spaced cells with pointwise least-squares bands. Every check
//! returns a three-way verdict; a violation only counts once it exceeds the
//! local band width (curves) or the DKW sum (distribution functions).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CanonicalDataset, DatasetError, Group, UnitRecord};
use crate::estimators::{local_linear_with_weights, Prepared};
use crate::inference::{dkw_epsilon, ecdf_sup_band};
use crate::{linalg, par};

/// Number of evaluation points of every fitted curve.
pub const GRID_SIZE: usize = 101;

/// Normal quantile for the pointwise 95% bands.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("degenerate support: all x values are equal")]
    DegenerateSupport,
    #[error("need at least {needed} points with {needed} distinct x values, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("the groups' y_lag ranges do not overlap")]
    EmptyCommonSupport,
    #[error("precondition failed: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bins {
    /// `ceil(n^(1/5))`, at least 2.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub bins: Bins,
    pub degree: usize,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            bins: Bins::Auto,
            degree: 1,
        }
    }
}

impl Bins {
    fn resolve(self, n: usize) -> usize {
        match self {
            Bins::Auto => ((n as f64).powf(0.2).ceil() as usize).max(2),
            Bins::Fixed(b) => b.max(1),
        }
    }
}

/// A fitted curve on an evaluation grid with a pointwise 95% band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub grid: Vec<f64>,
    pub fitted: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    pub n_bins: usize,
    pub degree: usize,
}

#[derive(Debug, Clone)]
struct CellFit {
    center: f64,
    half_width: f64,
    fit: linalg::LeastSquares,
}

/// Piecewise polynomial least-squares fit that can be evaluated anywhere in
/// its support.
#[derive(Debug, Clone)]
pub struct SeriesModel {
    /// Interior cell boundaries; a value equal to a boundary belongs to the
    /// cell on its right.
    edges: Vec<f64>,
    cells: Vec<CellFit>,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
}

impl SeriesModel {
    pub fn n_bins(&self) -> usize {
        self.cells.len()
    }

    fn basis(&self, cell: &CellFit, x: f64) -> Vec<f64> {
        let z = (x - cell.center) / cell.half_width;
        (0..=self.degree).map(|k| z.powi(k as i32)).collect()
    }

    /// Fitted value and its standard error at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let cell = &self.cells[self.edges.partition_point(|&e| e <= x)];
        let b = self.basis(cell, x);
        let value = b.iter().zip(&cell.fit.coef).map(|(u, c)| u * c).sum();
        let se = (cell.fit.sigma2() * cell.fit.quad_form(&b)).sqrt();
        (value, se)
    }

    pub fn curve(&self, grid: &[f64]) -> CurveFit {
        let (mut fitted, mut band_lo, mut band_hi) = (Vec::new(), Vec::new(), Vec::new());
        for &x in grid {
            let (v, se) = self.eval(x);
            fitted.push(v);
            band_lo.push(v - Z95 * se);
            band_hi.push(v + Z95 * se);
        }
        CurveFit {
            grid: grid.to_vec(),
            fitted,
            band_lo,
            band_hi,
            n_bins: self.n_bins(),
            degree: self.degree,
        }
    }
}

/// `GRID_SIZE` equally spaced points from `lo` to `hi`.
pub fn grid(lo: f64, hi: f64) -> Vec<f64> {
    let step = (hi - lo) / (GRID_SIZE - 1) as f64;
    (0..GRID_SIZE)
        .map(|j| if j == GRID_SIZE - 1 { hi } else { lo + step * j as f64 })
        .collect()
}

fn count_distinct(sorted: &[f64]) -> usize {
    let mut n = 0;
    let mut prev = None;
    for &v in sorted {
        if prev != Some(v) {
            n += 1;
            prev = Some(v);
        }
    }
    n
}

/// Interior edges at the pooled `k / n_bins` quantiles, or `None` when some
/// cell has fewer than `need` distinct x values.
fn partition(sorted: &[f64], n_bins: usize, need: usize) -> Option<Vec<f64>> {
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|k| linalg::quantile_sorted(sorted, k as f64 / n_bins as f64))
        .collect();
    edges.dedup();
    if edges.len() + 1 < n_bins {
        return None;
    }
    let mut start = 0;
    for j in 0..=edges.len() {
        let end = if j < edges.len() {
            sorted.partition_point(|&v| v < edges[j])
        } else {
            sorted.len()
        };
        if count_distinct(&sorted[start..end]) < need {
            return None;
        }
        start = end;
    }
    Some(edges)
}

/// Fits the piecewise polynomial. When a cell would hold fewer than
/// `degree + 1` distinct points the number of cells is reduced.
pub fn fit_series(xs: &[f64], ys: &[f64], cfg: &SeriesConfig) -> Result<SeriesModel, DiagnosticsError> {
    if xs.len() != ys.len() {
        return Err(DiagnosticsError::Precondition("xs and ys differ in length".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::Precondition("non-finite input".into()));
    }
    let need = cfg.degree + 1;
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = count_distinct(&sorted);
    if distinct <= 1 && !sorted.is_empty() && need > 1 {
        return Err(DiagnosticsError::DegenerateSupport);
    }
    if distinct < need {
        return Err(DiagnosticsError::InsufficientData { needed: need, got: distinct });
    }
    let requested = cfg.bins.resolve(xs.len());
    let (n_bins, edges) = (1..=requested)
        .rev()
        .find_map(|b| partition(&sorted, b, need).map(|e| (b, e)))
        .expect("one cell always has enough distinct points");
    if n_bins < requested {
        log::warn!("reduced series cells from {requested} to {n_bins} so each cell has {need} distinct points");
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &x) in xs.iter().enumerate() {
        members[edges.partition_point(|&e| e <= x)].push(i);
    }
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let cells = members
        .iter()
        .enumerate()
        .map(|(j, idx)| {
            let c_lo = if j == 0 { lo } else { edges[j - 1] };
            let c_hi = if j == edges.len() { hi } else { edges[j] };
            let half_width = if c_hi > c_lo { (c_hi - c_lo) / 2.0 } else { 1.0 };
            let center = (c_lo + c_hi) / 2.0;
            let design = DMatrix::from_fn(idx.len(), need, |r, k| ((xs[idx[r]] - center) / half_width).powi(k as i32));
            let y: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
            let fit = linalg::least_squares(&design, &y).map_err(|_| DiagnosticsError::InsufficientData {
                needed: need,
                got: idx.len(),
            })?;
            Ok(CellFit { center, half_width, fit })
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    Ok(SeriesModel {
        edges,
        cells,
        degree: cfg.degree,
        lo,
        hi,
    })
}

/// Series regression of `ys` on `xs` evaluated on a grid spanning the range
/// of `xs`.
pub fn series_fit(xs: &[f64], ys: &[f64], cfg: &SeriesConfig) -> Result<CurveFit, DiagnosticsError> {
    let model = fit_series(xs, ys, cfg)?;
    Ok(model.curve(&grid(model.lo, model.hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionVerdict {
    Supported,
    Ambiguous,
    Violated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FosdVerdict {
    DominanceSupported,
    Ambiguous,
    Violated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MonotonicityVerdict {
    DecreasingSupported,
    Ambiguous,
    Violated,
}

/// Control and treated fits of `E[y0 | W, y_lag]` on the common support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub control: CurveFit,
    pub treated: CurveFit,
    /// Largest excess of the treated fit over the control fit (0 if none).
    pub max_violation: f64,
    pub verdict: SelectionVerdict,
}

fn close_tol(a: f64, b: f64) -> f64 {
    1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn group_xy(ds: &CanonicalDataset, w: Group, y: impl Fn(&UnitRecord) -> f64) -> (Vec<f64>, Vec<f64>) {
    ds.group(w).map(|r| (r.y_lag, y(r))).unzip()
}

/// Negative selection: the control fit must lie weakly above the treated fit
/// everywhere on the common support. Violated when at some grid point the
/// two bands are disjoint in the wrong direction.
pub fn check_negative_selection(ds: &CanonicalDataset, cfg: &SeriesConfig) -> Result<SelectionReport, DiagnosticsError> {
    ds.require_both_groups()?;
    let (xc, yc) = group_xy(ds, Group::Control, |r| r.y0);
    let (xt, yt) = group_xy(ds, Group::Treated, |r| r.y0);
    let control = fit_series(&xc, &yc, cfg)?;
    let treated = fit_series(&xt, &yt, cfg)?;
    let lo = control.lo.max(treated.lo);
    let hi = control.hi.min(treated.hi);
    if !(lo < hi) {
        return Err(DiagnosticsError::EmptyCommonSupport);
    }
    let g = grid(lo, hi);
    let (c, t) = (control.curve(&g), treated.curve(&g));
    let mut max_violation = 0.0f64;
    let mut supported = true;
    let mut violated = false;
    for j in 0..g.len() {
        let excess = t.fitted[j] - c.fitted[j];
        if excess > close_tol(t.fitted[j], c.fitted[j]) {
            supported = false;
            max_violation = max_violation.max(excess);
            if c.band_hi[j] < t.band_lo[j] {
                violated = true;
            }
        }
    }
    let verdict = if supported {
        SelectionVerdict::Supported
    } else if violated {
        SelectionVerdict::Violated
    } else {
        SelectionVerdict::Ambiguous
    };
    Ok(SelectionReport {
        control: c,
        treated: t,
        max_violation,
        verdict,
    })
}

/// Empirical distribution functions of `y_lag` per group on the pooled
/// sample values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FosdReport {
    pub grid: Vec<f64>,
    pub cdf_control: Vec<f64>,
    pub cdf_treated: Vec<f64>,
    /// `max(0, max_y cdf_control(y) - cdf_treated(y))`.
    pub max_violation: f64,
    pub dkw_epsilon_sum: f64,
    pub verdict: FosdVerdict,
}

fn fosd_verdict(max_violation: f64, threshold: f64) -> FosdVerdict {
    if max_violation == 0.0 {
        FosdVerdict::DominanceSupported
    } else if max_violation > threshold {
        FosdVerdict::Violated
    } else {
        FosdVerdict::Ambiguous
    }
}

/// Control dominance requires `cdf_control <= cdf_treated` everywhere.
pub fn check_fosd(ds: &CanonicalDataset, alpha: f64) -> Result<FosdReport, DiagnosticsError> {
    ds.require_both_groups()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DiagnosticsError::Precondition(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let sorted = |w| {
        let mut v: Vec<f64> = ds.group(w).map(|r| r.y_lag).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (c, t) = (sorted(Group::Control), sorted(Group::Treated));
    let mut grid: Vec<f64> = c.iter().chain(&t).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let ecdf = |s: &[f64], y: f64| s.partition_point(|&v| v <= y) as f64 / s.len() as f64;
    let cdf_control: Vec<f64> = grid.iter().map(|&y| ecdf(&c, y)).collect();
    let cdf_treated: Vec<f64> = grid.iter().map(|&y| ecdf(&t, y)).collect();
    let max_violation = cdf_control
        .iter()
        .zip(&cdf_treated)
        .map(|(a, b)| a - b)
        .fold(0.0f64, f64::max);
    let dkw_epsilon_sum = dkw_epsilon(c.len(), alpha) + dkw_epsilon(t.len(), alpha);
    Ok(FosdReport {
        grid,
        cdf_control,
        cdf_treated,
        max_violation,
        dkw_epsilon_sum,
        verdict: fosd_verdict(max_violation, dkw_epsilon_sum),
    })
}

/// Fit of `Phi` and its largest increase between consecutive grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub curve: CurveFit,
    pub max_increase: f64,
    /// Band width at the grid point where the largest increase ends.
    pub band_width_at_max: f64,
    /// Least-squares slope of the fitted curve over the grid.
    pub slope: f64,
    pub verdict: MonotonicityVerdict,
}

/// Checks that `Phi` is weakly decreasing on the control `y_lag` range.
///
/// With [`Bins::Auto`] this fits one global polynomial: the jumps that a
/// piecewise fit shows at cell boundaries are sampling noise and would be
/// read as increases.
pub fn check_phi_monotone(ds: &CanonicalDataset, cfg: &SeriesConfig) -> Result<MonotonicityReport, DiagnosticsError> {
    let (x, y) = group_xy(ds, Group::Control, UnitRecord::trend);
    if x.is_empty() {
        return Err(DatasetError::EmptyGroup(Group::Control).into());
    }
    let cfg = SeriesConfig {
        bins: match cfg.bins {
            Bins::Auto => Bins::Fixed(1),
            b => b,
        },
        ..*cfg
    };
    let curve = series_fit(&x, &y, &cfg)?;
    let (mut max_increase, mut at) = (f64::NEG_INFINITY, 1);
    for j in 1..curve.fitted.len() {
        let inc = curve.fitted[j] - curve.fitted[j - 1];
        if inc > max_increase {
            max_increase = inc;
            at = j;
        }
    }
    let band_width_at_max = curve.band_hi[at] - curve.band_lo[at];
    let scale = curve.fitted.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let verdict = if max_increase <= 1e-9 * (1.0 + scale) {
        MonotonicityVerdict::DecreasingSupported
    } else if max_increase > band_width_at_max {
        MonotonicityVerdict::Violated
    } else {
        MonotonicityVerdict::Ambiguous
    };
    let slope = ls_slope(&curve.grid, &curve.fitted);
    Ok(MonotonicityReport {
        curve,
        max_increase,
        band_width_at_max,
        slope,
        verdict,
    })
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (linalg::mean(x), linalg::mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Verdict triple of the three scalar checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub selection: SelectionReport,
    pub fosd: FosdReport,
    pub phi: MonotonicityReport,
}

impl DiagnosticsReport {
    pub fn all_supported(&self) -> bool {
        self.selection.verdict == SelectionVerdict::Supported
            && self.fosd.verdict == FosdVerdict::DominanceSupported
            && self.phi.verdict == MonotonicityVerdict::DecreasingSupported
    }
}

pub fn diagnose(ds: &CanonicalDataset, cfg: &SeriesConfig, alpha: f64) -> Result<DiagnosticsReport, DiagnosticsError> {
    Ok(DiagnosticsReport {
        selection: check_negative_selection(ds, cfg)?,
        fosd: check_fosd(ds, alpha)?,
        phi: check_phi_monotone(ds, cfg)?,
    })
}

/// Tuning of the multivariate checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultivariateOptions {
    /// Local-linear bandwidth in `y_lag` units; `None` picks
    /// `sd(control y_lag) * n_control^(-1 / (p + 4))`.
    pub bandwidth: Option<f64>,
    /// Bootstrap replicates for the distribution-function band.
    pub bootstrap_reps: usize,
    pub seed: u64,
    /// Evaluation points for the dominance and monotonicity checks are
    /// thinned to at most this many per check.
    pub max_points: usize,
}

impl Default for MultivariateOptions {
    fn default() -> Self {
        MultivariateOptions {
            bandwidth: None,
            bootstrap_reps: 199,
            seed: 0,
            max_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumption2Report {
    pub dimension: usize,
    pub bandwidth: f64,
    pub selection: SelectionVerdict,
    /// Largest excess of the treated over the control prediction of `y0`.
    pub selection_max_violation: f64,
    pub fosd: FosdVerdict,
    pub fosd_max_violation: f64,
    /// Sum of the two groups' bootstrap sup-norm bands.
    pub fosd_band: f64,
    pub phi: MonotonicityVerdict,
    pub phi_max_increase: f64,
    pub phi_pairs: usize,
}

/// Every `k`-th element so that at most `max` remain.
fn thin<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    let step = items.len().div_ceil(max.max(1)).max(1);
    items.iter().step_by(step).cloned().collect()
}

fn residual_sigma2(xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let p = xs.first().map_or(0, Vec::len);
    let design = DMatrix::from_fn(xs.len(), p + 1, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] });
    linalg::least_squares(&design, ys).map_or_else(|_| linalg::variance(ys), |f| f.sigma2())
}

/// Local-linear predictions and standard errors at `targets`; `None` where
/// the weighted design is singular.
fn ll_predict(xs: &[Vec<f64>], ys: &[f64], targets: &[Vec<f64>], bw: f64) -> Vec<Option<(f64, f64)>> {
    let sigma2 = residual_sigma2(xs, ys);
    local_linear_with_weights(xs, targets, bw)
        .into_iter()
        .map(|o| {
            o.map(|(idx, l)| {
                let fit: f64 = idx.iter().zip(&l).map(|(&i, li)| li * ys[i]).sum();
                let se = (sigma2 * l.iter().map(|v| v * v).sum::<f64>()).sqrt();
                (fit, se)
            })
        })
        .collect()
}

/// Multivariate analogues of the three checks on `x = (y_lag, covariates)`.
///
/// (i) compares local-linear predictions of `y0` from each group at the
/// treated points. (ii) compares componentwise empirical distribution
/// functions at the sample points, a necessary condition for multivariate
/// dominance. (iii) compares local-linear `Phi` estimates over pairs of
/// control points that are componentwise ordered.
pub fn check_assumption2(
    ds: &CanonicalDataset,
    alpha: f64,
    opts: &MultivariateOptions,
) -> Result<Assumption2Report, DiagnosticsError> {
    if ds.covariate_arity() == 0 {
        return Err(DiagnosticsError::Precondition("multivariate checks need at least one covariate".into()));
    }
    multivariate_checks(ds, alpha, opts)
}

pub(crate) fn multivariate_checks(
    ds: &CanonicalDataset,
    alpha: f64,
    opts: &MultivariateOptions,
) -> Result<Assumption2Report, DiagnosticsError> {
    ds.require_both_groups()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DiagnosticsError::Precondition(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let prep = Prepared::new(ds);
    let xc = &prep.design.xs;
    let xt = &prep.targets;
    let p = xc[0].len();
    let bandwidth = match opts.bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(DiagnosticsError::Precondition(format!("invalid bandwidth {h}"))),
        None => {
            let lag: Vec<f64> = prep.controls.iter().map(|r| r.y_lag).collect();
            let sd = linalg::variance(&lag).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            sd * (xc.len() as f64).powf(-1.0 / (p as f64 + 4.0))
        }
    };

    // (i) selection at treated points.
    let y0c: Vec<f64> = prep.controls.iter().map(|r| r.y0).collect();
    let y0t: Vec<f64> = prep.treated.iter().map(|r| r.y0).collect();
    let pc = ll_predict(xc, &y0c, xt, bandwidth);
    let pt = ll_predict(xt, &y0t, xt, bandwidth);
    let (mut sel_supported, mut sel_violated, mut sel_max) = (true, false, 0.0f64);
    for (c, t) in pc.iter().zip(&pt) {
        if let (Some((fc, sc)), Some((ft, st))) = (c, t) {
            let excess = ft - fc;
            if excess > close_tol(*ft, *fc) {
                sel_supported = false;
                sel_max = sel_max.max(excess);
                if excess > Z95 * (sc + st) {
                    sel_violated = true;
                }
            }
        }
    }
    let selection = if sel_supported {
        SelectionVerdict::Supported
    } else if sel_violated {
        SelectionVerdict::Violated
    } else {
        SelectionVerdict::Ambiguous
    };

    // (ii) componentwise distribution functions on raw coordinates.
    let raw = |r: &&UnitRecord| {
        let mut v = vec![r.y_lag];
        v.extend_from_slice(&r.covariates);
        v
    };
    let rc: Vec<Vec<f64>> = prep.controls.iter().map(raw).collect();
    let rt: Vec<Vec<f64>> = prep.treated.iter().map(raw).collect();
    let pooled: Vec<Vec<f64>> = rc.iter().chain(&rt).cloned().collect();
    let eval = thin(&pooled, opts.max_points);
    let below = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, b)| a <= b);
    let cdf = |pts: &[Vec<f64>], e: &[f64]| pts.iter().filter(|x| below(x, e)).count() as f64 / pts.len() as f64;
    let fosd_max_violation = par::map_slice(&eval, |e| cdf(&rc, e) - cdf(&rt, e)).into_iter().fold(0.0f64, f64::max);
    let fosd_band = if fosd_max_violation > 0.0 {
        ecdf_sup_band(&rc, &eval, opts.bootstrap_reps, alpha, opts.seed)
            + ecdf_sup_band(&rt, &eval, opts.bootstrap_reps, alpha, opts.seed.wrapping_add(1))
    } else {
        0.0
    };
    let fosd = fosd_verdict(fosd_max_violation, fosd_band);

    // (iii) Phi over componentwise-ordered control pairs.
    let trend: Vec<f64> = prep.controls.iter().map(|r| r.trend()).collect();
    let pts = thin(xc, opts.max_points);
    let phi_hat = ll_predict(xc, &trend, &pts, bandwidth);
    // Per start point: (largest increase, ordered pairs, any increase beyond
    // the two pointwise half-bands).
    let per_point: Vec<(f64, usize, bool)> = par::map_indexed(pts.len(), |a| {
        let mut out = (f64::NEG_INFINITY, 0, false);
        let Some((fa, sa)) = phi_hat[a] else { return out };
        for (b, pb) in phi_hat.iter().enumerate() {
            let Some((fb, sb)) = *pb else { continue };
            if a == b || pts[a] == pts[b] || !below(&pts[a], &pts[b]) {
                continue;
            }
            let inc = fb - fa;
            out.0 = out.0.max(inc);
            out.1 += 1;
            out.2 |= inc > Z95 * (sa + sb);
        }
        out
    });
    let phi_pairs: usize = per_point.iter().map(|p| p.1).sum();
    let phi_max_increase = per_point.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let phi_violated = per_point.iter().any(|p| p.2);
    let phi_scale = phi_hat.iter().flatten().fold(0.0f64, |m, (f, _)| m.max(f.abs()));
    let phi = if phi_pairs == 0 || phi_max_increase <= 1e-9 * (1.0 + phi_scale) {
        MonotonicityVerdict::DecreasingSupported
    } else if phi_violated {
        MonotonicityVerdict::Violated
    } else {
        MonotonicityVerdict::Ambiguous
    };

    Ok(Assumption2Report {
        dimension: p,
        bandwidth,
        selection,
        selection_max_violation: sel_max,
        fosd,
        fosd_max_violation,
        fosd_band,
        phi,
        phi_max_increase: if phi_pairs == 0 { 0.0 } else { phi_max_increase },
        phi_pairs,
    })
}
