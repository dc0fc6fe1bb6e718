//! Canonical two-period data model.
//!
//! One [`UnitRecord`] per unit holds the treatment group, the matching
//! criterion `y_lag` (an outcome `s >= 0` periods before the pre-treatment
//! period), the pre-treatment outcome `y0`, the post-treatment outcome `y1`
//! and optional numeric covariates.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("domain error at row {row}: treatment indicator must be 0 or 1, got {value}")]
    Treatment { row: usize, value: String },
    #[error("duplicate unit id `{0}`")]
    DuplicateId(String),
    #[error("record `{unit}` has {got} covariates, expected {expected}")]
    Arity {
        unit: String,
        got: usize,
        expected: usize,
    },
    #[error("record `{unit}` has a non-finite value in `{field}`")]
    NonFinite { unit: String, field: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("singular design: column `{0}` is collinear with the intercept and preceding covariates")]
    Singular(String),
    #[error("no treated units inside the control support [{lo}, {hi}]")]
    EmptyTreated { lo: f64, hi: f64 },
    #[error("no {0} units")]
    EmptyGroup(Group),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Treatment group `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Control,
    Treated,
}

impl Group {
    pub fn from_indicator(w: u8) -> Option<Group> {
        match w {
            0 => Some(Group::Control),
            1 => Some(Group::Treated),
            _ => None,
        }
    }

    pub fn indicator(self) -> u8 {
        match self {
            Group::Control => 0,
            Group::Treated => 1,
        }
    }

    pub fn is_treated(self) -> bool {
        self == Group::Treated
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Control => "control",
            Group::Treated => "treated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub w: Group,
    pub y_lag: f64,
    pub y0: f64,
    pub y1: f64,
    pub covariates: Vec<f64>,
}

impl UnitRecord {
    pub fn new(unit_id: impl Into<String>, w: Group, y_lag: f64, y0: f64, y1: f64) -> Self {
        UnitRecord {
            unit_id: unit_id.into(),
            w,
            y_lag,
            y0,
            y1,
            covariates: Vec::new(),
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<f64>) -> Self {
        self.covariates = covariates;
        self
    }

    /// Outcome change `y1 - y0`.
    pub fn trend(&self) -> f64 {
        self.y1 - self.y0
    }

    fn get(&self, target: Target) -> f64 {
        match target {
            Target::YLag => self.y_lag,
            Target::Y0 => self.y0,
            Target::Y1 => self.y1,
        }
    }

    fn set(&mut self, target: Target, value: f64) {
        match target {
            Target::YLag => self.y_lag = value,
            Target::Y0 => self.y0 = value,
            Target::Y1 => self.y1 = value,
        }
    }
}

/// Outcome fields that can be residualized on covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    YLag,
    Y0,
    Y1,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::YLag, Target::Y0, Target::Y1];
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Lag order `s` of the matching criterion relative to the
    /// pre-treatment period.
    pub lag_order: u32,
    pub covariate_names: Vec<String>,
    pub provenance: String,
    /// Fields replaced by partial-linear residuals, in application order.
    pub residualized: Vec<Target>,
}

/// Validated collection of unit records sharing one covariate arity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CanonicalDataset {
    records: Vec<UnitRecord>,
    pub meta: DatasetMeta,
}

impl CanonicalDataset {
    /// Builds a dataset, checking id uniqueness, finiteness and covariate
    /// arity. Empty groups are allowed here; estimators reject them.
    pub fn new(records: Vec<UnitRecord>, meta: DatasetMeta) -> Result<Self, DatasetError> {
        let arity = records.first().map_or(meta.covariate_names.len(), |r| r.covariates.len());
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.unit_id.as_str()) {
                return Err(DatasetError::DuplicateId(r.unit_id.clone()));
            }
            for (field, v) in [("y_lag", r.y_lag), ("y0", r.y0), ("y1", r.y1)] {
                if !v.is_finite() {
                    return Err(DatasetError::NonFinite {
                        unit: r.unit_id.clone(),
                        field: field.into(),
                    });
                }
            }
            if r.covariates.len() != arity {
                return Err(DatasetError::Arity {
                    unit: r.unit_id.clone(),
                    got: r.covariates.len(),
                    expected: arity,
                });
            }
            if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite {
                    unit: r.unit_id.clone(),
                    field: format!("covariate {j}"),
                });
            }
        }
        Ok(CanonicalDataset { records, meta })
    }

    /// Builds a dataset without the uniqueness check. Bootstrap resamples
    /// repeat units and are only ever produced from an already valid dataset.
    pub(crate) fn from_resample(records: Vec<UnitRecord>, meta: DatasetMeta) -> Self {
        CanonicalDataset { records, meta }
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UnitRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_arity(&self) -> usize {
        self.records
            .first()
            .map_or(self.meta.covariate_names.len(), |r| r.covariates.len())
    }

    pub fn group(&self, w: Group) -> impl Iterator<Item = &UnitRecord> {
        self.records.iter().filter(move |r| r.w == w)
    }

    pub fn n_group(&self, w: Group) -> usize {
        self.group(w).count()
    }

    /// Errors unless both groups are nonempty.
    pub fn require_both_groups(&self) -> Result<(), DatasetError> {
        for g in [Group::Treated, Group::Control] {
            if self.n_group(g) == 0 {
                return Err(DatasetError::EmptyGroup(g));
            }
        }
        Ok(())
    }

    /// Replaces the records while keeping the metadata.
    pub fn with_records(&self, records: Vec<UnitRecord>) -> Result<Self, DatasetError> {
        CanonicalDataset::new(records, self.meta.clone())
    }

    /// Returns a copy with `f` applied to every record. The result is
    /// revalidated.
    pub fn map_records(&self, f: impl FnMut(&mut UnitRecord)) -> Result<Self, DatasetError> {
        let mut records = self.records.clone();
        records.iter_mut().for_each(f);
        self.with_records(records)
    }
}

/// Column-name mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Unit identifier column; when absent the 1-based data row number is used.
    pub id: Option<String>,
    pub w: String,
    pub y_lag: String,
    pub y0: String,
    pub y1: String,
    pub covariates: Vec<String>,
    pub lag_order: u32,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: Some("id".into()),
            w: "w".into(),
            y_lag: "y_lag".into(),
            y0: "y0".into(),
            y1: "y1".into(),
            covariates: Vec::new(),
            lag_order: 1,
        }
    }
}

/// Reads a comma-delimited UTF-8 file with a header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<CanonicalDataset, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut ds = read_csv(file, schema)?;
    ds.meta.provenance = path.display().to_string();
    Ok(ds)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<CanonicalDataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DatasetError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_col = schema.id.as_deref().map(col).transpose()?;
    let w_col = col(&schema.w)?;
    let lag_col = col(&schema.y_lag)?;
    let y0_col = col(&schema.y0)?;
    let y1_col = col(&schema.y1)?;
    let cov_cols = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let cell = |c: usize| row.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64, DatasetError> {
            let raw = cell(c);
            let v: f64 = raw.parse().map_err(|_| DatasetError::Parse {
                row: row_no,
                column: headers[c].to_string(),
                message: format!("`{raw}` is not a number"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DatasetError::Parse {
                    row: row_no,
                    column: headers[c].to_string(),
                    message: format!("`{raw}` is not finite"),
                })
            }
        };
        let w_raw = cell(w_col);
        let w = match w_raw.parse::<f64>() {
            Ok(v) if v == 0.0 => Group::Control,
            Ok(v) if v == 1.0 => Group::Treated,
            _ => {
                return Err(DatasetError::Treatment {
                    row: row_no,
                    value: w_raw.to_string(),
                })
            }
        };
        let unit_id = match id_col {
            Some(c) => cell(c).to_string(),
            None => row_no.to_string(),
        };
        records.push(UnitRecord {
            unit_id,
            w,
            y_lag: num(lag_col)?,
            y0: num(y0_col)?,
            y1: num(y1_col)?,
            covariates: cov_cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?,
        });
    }
    let meta = DatasetMeta {
        lag_order: schema.lag_order,
        covariate_names: schema.covariates.clone(),
        provenance: String::new(),
        residualized: Vec::new(),
    };
    CanonicalDataset::new(records, meta)
}

/// Writes the dataset with header `id,w,y_lag,y0,y1[,covariates...]`.
///
/// Values use the shortest representation that parses back to the same
/// double, so [`read_csv`] with [`CsvSchema::default`] round-trips exactly.
pub fn write_csv<W: Write>(ds: &CanonicalDataset, writer: W) -> Result<(), DatasetError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "w".into(), "y_lag".into(), "y0".into(), "y1".into()];
    header.extend(covariate_headers(ds));
    wtr.write_record(&header)?;
    for r in ds.records() {
        let mut row = vec![
            r.unit_id.clone(),
            r.w.indicator().to_string(),
            r.y_lag.to_string(),
            r.y0.to_string(),
            r.y1.to_string(),
        ];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn covariate_headers(ds: &CanonicalDataset) -> Vec<String> {
    let arity = ds.covariate_arity();
    if ds.meta.covariate_names.len() == arity {
        ds.meta.covariate_names.clone()
    } else {
        (1..=arity).map(|j| format!("x{j}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationFlag {
    NoTreated,
    NoControl,
    DegenerateTreatedSupport,
    DegenerateControlSupport,
}

impl fmt::Display for ValidationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValidationFlag::NoTreated => "no treated units",
            ValidationFlag::NoControl => "no control units",
            ValidationFlag::DegenerateTreatedSupport => "degenerate treated support",
            ValidationFlag::DegenerateControlSupport => "degenerate control support",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_treated: usize,
    pub n_control: usize,
    pub covariate_arity: usize,
    pub y_lag_range_treated: Option<(f64, f64)>,
    pub y_lag_range_control: Option<(f64, f64)>,
    pub flags: Vec<ValidationFlag>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

fn y_lag_range<'a>(it: impl Iterator<Item = &'a UnitRecord>) -> Option<(f64, f64)> {
    it.fold(None, |acc, r| match acc {
        None => Some((r.y_lag, r.y_lag)),
        Some((lo, hi)) => Some((lo.min(r.y_lag), hi.max(r.y_lag))),
    })
}

pub fn validate(ds: &CanonicalDataset) -> ValidationReport {
    let treated = y_lag_range(ds.group(Group::Treated));
    let control = y_lag_range(ds.group(Group::Control));
    let mut flags = Vec::new();
    match treated {
        None => flags.push(ValidationFlag::NoTreated),
        Some((lo, hi)) if lo == hi && ds.n_group(Group::Treated) > 1 => {
            flags.push(ValidationFlag::DegenerateTreatedSupport)
        }
        _ => {}
    }
    match control {
        None => flags.push(ValidationFlag::NoControl),
        Some((lo, hi)) if lo == hi => flags.push(ValidationFlag::DegenerateControlSupport),
        _ => {}
    }
    ValidationReport {
        n_treated: ds.n_group(Group::Treated),
        n_control: ds.n_group(Group::Control),
        covariate_arity: ds.covariate_arity(),
        y_lag_range_treated: treated,
        y_lag_range_control: control,
        flags,
    }
}

/// Partial-linear adjustment: replaces each target by its residual from a
/// pooled least-squares regression on an intercept and the covariates, then
/// drops the covariates.
pub fn residualize(ds: &CanonicalDataset, targets: &[Target]) -> Result<CanonicalDataset, DatasetError> {
    let arity = ds.covariate_arity();
    if arity == 0 {
        return Err(DatasetError::Precondition(
            "residualize needs at least one covariate".into(),
        ));
    }
    let residuals = residuals_on_covariates(ds, ds, targets)?;
    let mut records = ds.records().to_vec();
    for (t, res) in targets.iter().zip(residuals) {
        for (r, e) in records.iter_mut().zip(res) {
            r.set(*t, e);
        }
    }
    for r in &mut records {
        r.covariates.clear();
    }
    let mut meta = ds.meta.clone();
    meta.covariate_names.clear();
    meta.residualized.extend_from_slice(targets);
    CanonicalDataset::new(records, meta)
}

/// Residuals of `targets` in `values` regressed on the covariates of
/// `design_source` (both must list the same units in the same order).
pub(crate) fn residuals_on_covariates(
    design_source: &CanonicalDataset,
    values: &CanonicalDataset,
    targets: &[Target],
) -> Result<Vec<Vec<f64>>, DatasetError> {
    let arity = design_source.covariate_arity();
    let n = design_source.len();
    if n <= arity {
        return Err(DatasetError::Precondition(format!(
            "{n} records cannot identify {} regression coefficients",
            arity + 1
        )));
    }
    let recs = design_source.records();
    let design = DMatrix::from_fn(n, arity + 1, |i, j| if j == 0 { 1.0 } else { recs[i].covariates[j - 1] });
    targets
        .iter()
        .map(|t| {
            let y: Vec<f64> = values.records().iter().map(|r| r.get(*t)).collect();
            linalg::least_squares(&design, &y)
                .map(|fit| fit.residuals)
                .map_err(|e| {
                    let name = if e.column == 0 {
                        "intercept".to_string()
                    } else {
                        design_source
                            .meta
                            .covariate_names
                            .get(e.column - 1)
                            .cloned()
                            .unwrap_or_else(|| format!("x{}", e.column))
                    };
                    DatasetError::Singular(name)
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportTrimReport {
    pub n_treated_dropped: usize,
    pub n_control_dropped: usize,
    pub support_interval: (f64, f64),
}

/// Drops treated units whose `y_lag` lies outside `[min, max]` of the
/// control `y_lag` values. Controls are never dropped.
pub fn common_support(ds: &CanonicalDataset) -> Result<(CanonicalDataset, SupportTrimReport), DatasetError> {
    ds.require_both_groups()?;
    let (lo, hi) = y_lag_range(ds.group(Group::Control)).expect("controls present");
    let mut dropped = 0;
    let records: Vec<UnitRecord> = ds
        .records()
        .iter()
        .filter(|r| {
            let keep = r.w == Group::Control || (r.y_lag >= lo && r.y_lag <= hi);
            if !keep {
                dropped += 1;
            }
            keep
        })
        .cloned()
        .collect();
    let report = SupportTrimReport {
        n_treated_dropped: dropped,
        n_control_dropped: 0,
        support_interval: (lo, hi),
    };
    if dropped == ds.n_group(Group::Treated) {
        return Err(DatasetError::EmptyTreated { lo, hi });
    }
    Ok((CanonicalDataset::from_resample(records, ds.meta.clone()), report))
}
