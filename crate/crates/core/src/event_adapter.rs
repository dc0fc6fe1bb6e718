//! Maps long staggered-adoption panels onto the two-period frame.
//!
//! Each (event time, horizon) cell becomes a [`CanonicalDataset`] whose
//! treated units switch into treatment at the event time and whose controls
//! are clean comparisons, so the ordinary estimators compute event-study
//! effects cell by cell. Treatment is absorbing: a unit is treated in every
//! period from its adoption time on.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CanonicalDataset, DatasetError, DatasetMeta, Group, UnitRecord};
use crate::estimators::BracketReport;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("row {row}: column '{column}': {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("unit '{unit}' observed twice at time {time}")]
    DuplicateObservation { unit: String, time: i64 },
    #[error("unit '{0}' has more than one adoption time")]
    InconsistentAdoption(String),
    #[error("cell {0}: no units switch into treatment")]
    EmptyTreated(CellSpec),
    #[error("cell {0}: no valid comparison units")]
    EmptyComparison(CellSpec),
    #[error("invalid cell {0}: {1}")]
    InvalidCell(CellSpec, String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One observation of a long panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub unit_id: String,
    pub time: i64,
    pub y: f64,
    /// First treated period; `None` for never-treated units.
    pub treated_at: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
struct UnitSeries {
    treated_at: Option<i64>,
    y: BTreeMap<i64, f64>,
}

impl UnitSeries {
    fn at(&self, t: i64) -> Option<f64> {
        self.y.get(&t).copied()
    }
}

/// Long panel keyed by unit id; row order of the input is irrelevant.
#[derive(Debug, Clone, PartialEq)]
pub struct LongPanel {
    units: BTreeMap<String, UnitSeries>,
    /// Every unit is observed at every time that appears in the panel.
    pub balanced: bool,
}

impl LongPanel {
    pub fn new(rows: Vec<PanelRow>) -> Result<Self, AdapterError> {
        let mut units: BTreeMap<String, UnitSeries> = BTreeMap::new();
        let mut times = HashSet::new();
        for (i, row) in rows.into_iter().enumerate() {
            if !row.y.is_finite() {
                return Err(AdapterError::Parse {
                    row: i + 1,
                    column: "y".into(),
                    message: "non-finite value".into(),
                });
            }
            times.insert(row.time);
            let entry = units.entry(row.unit_id.clone()).or_insert_with(|| UnitSeries {
                treated_at: row.treated_at,
                y: BTreeMap::new(),
            });
            if entry.treated_at != row.treated_at {
                return Err(AdapterError::InconsistentAdoption(row.unit_id));
            }
            if entry.y.insert(row.time, row.y).is_some() {
                return Err(AdapterError::DuplicateObservation {
                    unit: row.unit_id,
                    time: row.time,
                });
            }
        }
        let balanced = units.values().all(|u| u.y.len() == times.len());
        Ok(LongPanel { units, balanced })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Distinct adoption times, ascending.
    pub fn cohorts(&self) -> Vec<i64> {
        let mut g: Vec<i64> = self.units.values().filter_map(|u| u.treated_at).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Rows sorted by unit id and time.
    pub fn rows(&self) -> Vec<PanelRow> {
        self.units
            .iter()
            .flat_map(|(id, u)| {
                u.y.iter().map(move |(&time, &y)| PanelRow {
                    unit_id: id.clone(),
                    time,
                    y,
                    treated_at: u.treated_at,
                })
            })
            .collect()
    }
}

pub fn load_long_csv(path: impl AsRef<Path>) -> Result<LongPanel, AdapterError> {
    read_long_csv(std::fs::File::open(path)?)
}

/// Reads columns `unit,time,y,treated_at`; an empty `treated_at` means never
/// treated.
pub fn read_long_csv<R: Read>(reader: R) -> Result<LongPanel, AdapterError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AdapterError::MissingColumn(name.into()))
    };
    let (cu, ct, cy, cg) = (col("unit")?, col("time")?, col("y")?, col("treated_at")?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let err = |column: &str, message: String| AdapterError::Parse {
            row,
            column: column.into(),
            message,
        };
        let time = field(ct).parse::<i64>().map_err(|e| err("time", e.to_string()))?;
        let y = field(cy).parse::<f64>().map_err(|e| err("y", e.to_string()))?;
        let treated_at = match field(cg) {
            "" => None,
            s => Some(s.parse::<i64>().map_err(|e| err("treated_at", e.to_string()))?),
        };
        rows.push(PanelRow {
            unit_id: field(cu).to_string(),
            time,
            y,
            treated_at,
        });
    }
    LongPanel::new(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStyle {
    /// Match on lagged outcomes; outcome is the level at `t + h`.
    LagMatchedM,
    /// Cohort `g = t` against clean comparisons, long difference from `g - 1`.
    CohortDid,
    /// Long difference from `t - 1` with matching on selected lags.
    LocalProjectionDidm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    NeverTreated,
    /// Never treated, or first treated after the outcome period.
    NotYetTreated,
}

/// One event-study cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub style: CellStyle,
    /// Adoption period of the treated units.
    pub event_time: i64,
    /// Periods after adoption at which the outcome is measured.
    pub horizon: u32,
    /// Lags `Y_{t-1}, ..., Y_{t-n_lags}` used by the lag-matched style.
    pub n_lags: u32,
    pub comparison: Comparison,
}

impl CellSpec {
    pub fn new(style: CellStyle, event_time: i64, horizon: u32) -> Self {
        CellSpec {
            style,
            event_time,
            horizon,
            n_lags: 1,
            comparison: Comparison::NeverTreated,
        }
    }

    pub fn with_lags(mut self, n_lags: u32) -> Self {
        self.n_lags = n_lags;
        self
    }

    pub fn with_comparison(mut self, comparison: Comparison) -> Self {
        self.comparison = comparison;
        self
    }

    /// Period at which the outcome is measured.
    pub fn outcome_time(&self) -> i64 {
        self.event_time + self.horizon as i64
    }

    /// Identifier used in file names, e.g. `t3_h1`.
    pub fn label(&self) -> String {
        format!("t{}_h{}", self.event_time, self.horizon)
    }

    fn is_comparison(&self, treated_at: Option<i64>) -> bool {
        match (self.comparison, treated_at) {
            (_, None) => true,
            (Comparison::NeverTreated, Some(_)) => false,
            (Comparison::NotYetTreated, Some(g)) => g > self.outcome_time(),
        }
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t = {}, h = {})", self.event_time, self.horizon)
    }
}

/// Lags `Y_{t-l}` used as the matching vector of the local-projection style;
/// the first one becomes `y_lag`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct XSelector {
    pub lags: Vec<u32>,
}

impl XSelector {
    pub fn lags(lags: impl IntoIterator<Item = u32>) -> Self {
        XSelector {
            lags: lags.into_iter().collect(),
        }
    }
}

/// An adapted cell and the units left out of it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedCell {
    pub spec: CellSpec,
    pub dataset: CanonicalDataset,
    /// Eligible units dropped for a missing observation.
    pub n_missing: usize,
    /// Units that are neither switchers nor valid comparisons.
    pub n_ineligible: usize,
}

/// Observation times needed from each unit: `(y_lag, y0, y1, covariates)`.
struct Layout {
    y_lag: Option<i64>,
    y0: i64,
    y1: i64,
    covariates: Vec<i64>,
    covariate_names: Vec<String>,
}

fn build(panel: &LongPanel, spec: CellSpec, layout: Layout, provenance: String) -> Result<AdaptedCell, AdapterError> {
    let (mut n_missing, mut n_ineligible) = (0, 0);
    let mut records = Vec::new();
    for (id, unit) in &panel.units {
        let w = if unit.treated_at == Some(spec.event_time) {
            Group::Treated
        } else if spec.is_comparison(unit.treated_at) {
            Group::Control
        } else {
            n_ineligible += 1;
            continue;
        };
        let needed = || -> Option<UnitRecord> {
            let y_lag = match layout.y_lag {
                Some(t) => unit.at(t)?,
                None => 0.0,
            };
            let covs = layout.covariates.iter().map(|&t| unit.at(t)).collect::<Option<Vec<_>>>()?;
            Some(UnitRecord::new(id.clone(), w, y_lag, unit.at(layout.y0)?, unit.at(layout.y1)?).with_covariates(covs))
        };
        match needed() {
            Some(r) => records.push(r),
            None => n_missing += 1,
        }
    }
    if !records.iter().any(|r| r.w.is_treated()) {
        return Err(AdapterError::EmptyTreated(spec));
    }
    if !records.iter().any(|r| !r.w.is_treated()) {
        return Err(AdapterError::EmptyComparison(spec));
    }
    if n_missing > 0 {
        log::warn!("cell {spec}: excluded {n_missing} units with missing observations");
    }
    let meta = DatasetMeta {
        lag_order: 0,
        covariate_names: layout.covariate_names,
        provenance,
        ..DatasetMeta::default()
    };
    Ok(AdaptedCell {
        spec,
        dataset: CanonicalDataset::new(records, meta)?,
        n_missing,
        n_ineligible,
    })
}

fn lag_names(lags: &[u32]) -> Vec<String> {
    lags.iter().map(|l| format!("y_lag{l}")).collect()
}

/// Switchers at `t` against clean comparisons; `y1 = Y_{t+h}`,
/// `y0 = Y_{t-1}` and the matching vector is `(Y_{t-1}, ..., Y_{t-n_lags})`,
/// stored as `y_lag = Y_{t-1}` plus the remaining lags as covariates.
pub fn adapt_lag_matched(panel: &LongPanel, spec: &CellSpec) -> Result<AdaptedCell, AdapterError> {
    let spec = CellSpec {
        style: CellStyle::LagMatchedM,
        ..*spec
    };
    if spec.n_lags == 0 {
        return Err(AdapterError::InvalidCell(spec, "n_lags must be at least 1".into()));
    }
    let t = spec.event_time;
    let extra: Vec<u32> = (2..=spec.n_lags).collect();
    let layout = Layout {
        y_lag: Some(t - 1),
        y0: t - 1,
        y1: spec.outcome_time(),
        covariates: extra.iter().map(|&l| t - l as i64).collect(),
        covariate_names: lag_names(&extra),
    };
    build(panel, spec, layout, format!("lag-matched cell {spec}, {} lags", spec.n_lags))
}

/// Cohort `g = event_time` against never-treated or not-yet-treated units;
/// `y0 = y_lag = Y_{g-1}` and `y1 = Y_{g+h}`, so DID on the result is the
/// cohort-time long difference.
pub fn adapt_cohort_did(panel: &LongPanel, spec: &CellSpec) -> Result<AdaptedCell, AdapterError> {
    let spec = CellSpec {
        style: CellStyle::CohortDid,
        ..*spec
    };
    let g = spec.event_time;
    let layout = Layout {
        y_lag: Some(g - 1),
        y0: g - 1,
        y1: spec.outcome_time(),
        covariates: Vec::new(),
        covariate_names: Vec::new(),
    };
    build(panel, spec, layout, format!("cohort cell {spec}"))
}

/// Switchers at `t` against clean comparisons with `y0 = Y_{t-1}`,
/// `y1 = Y_{t+h}` and the selected lags as matching vector. An empty
/// selector gives a constant `y_lag`, so DIDM reduces to DID.
pub fn adapt_local_projection(panel: &LongPanel, spec: &CellSpec, x: &XSelector) -> Result<AdaptedCell, AdapterError> {
    let spec = CellSpec {
        style: CellStyle::LocalProjectionDidm,
        ..*spec
    };
    if x.lags.contains(&0) {
        return Err(AdapterError::InvalidCell(spec, "lag 0 is the treatment period".into()));
    }
    let t = spec.event_time;
    let layout = Layout {
        y_lag: x.lags.first().map(|&l| t - l as i64),
        y0: t - 1,
        y1: spec.outcome_time(),
        covariates: x.lags.iter().skip(1).map(|&l| t - l as i64).collect(),
        covariate_names: lag_names(x.lags.get(1..).unwrap_or(&[])),
    };
    build(panel, spec, layout, format!("local-projection cell {spec}, lags {:?}", x.lags))
}

/// Treated-count weighted average of per-cell bracket reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateBrackets {
    pub m: f64,
    pub didm: f64,
    pub did: f64,
    pub weights: Vec<f64>,
    pub ordering_holds: bool,
}

pub fn aggregate(cells: &[BracketReport]) -> Option<AggregateBrackets> {
    let total: usize = cells.iter().map(|r| r.did.n_treated_used).sum();
    if total == 0 {
        return None;
    }
    let weights: Vec<f64> = cells.iter().map(|r| r.did.n_treated_used as f64 / total as f64).collect();
    let avg = |f: fn(&BracketReport) -> f64| cells.iter().zip(&weights).map(|(r, w)| w * f(r)).sum::<f64>();
    let (m, didm, did) = (avg(|r| r.m.value), avg(|r| r.didm.value), avg(|r| r.did.value));
    Some(AggregateBrackets {
        m,
        didm,
        did,
        weights,
        ordering_holds: m <= didm && didm <= did,
    })
}
