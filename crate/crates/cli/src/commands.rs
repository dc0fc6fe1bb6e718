use std::fs::File;

use serde::Serialize;
use serde_json::json;

use bracket_att::dataset::{self, CanonicalDataset, CsvSchema, Group};
use bracket_att::diagnostics::{
    check_assumption2, check_fosd, check_negative_selection, check_phi_monotone, MultivariateOptions, SeriesConfig,
};
use bracket_att::estimators::{estimate_all, BracketReport, EstimationError, MethodKind};
use bracket_att::event_adapter::{
    adapt_cohort_did, adapt_lag_matched, adapt_local_projection, aggregate, load_long_csv, AdapterError, AdaptedCell,
    CellSpec, CellStyle, XSelector,
};
use bracket_att::export::{self, ChartLabels, Column, Series};
use bracket_att::inference::{bootstrap_brackets, dkw_epsilon, BracketCIs, InferenceError};
use bracket_att::simulator::{
    closed_forms, condition_check, identification_errors, simulate_counterexample, simulate_parametric,
    CounterexampleKind, OraclePanel, ParametricDgpSpec,
};

use crate::args::{AdaptArgs, DiagnoseArgs, EstimateArgs, InputArgs, SimulateArgs, StyleName};
use crate::report::{Class, CmdResult, Failure, RunReport, Stage};

fn load(input: &InputArgs) -> CmdResult<CanonicalDataset> {
    let schema = CsvSchema {
        id: input.id.clone(),
        w: input.w.clone(),
        y_lag: input.ylag.clone(),
        y0: input.y0.clone(),
        y1: input.y1.clone(),
        covariates: input.covariates.clone(),
        lag_order: input.lag_order,
    };
    dataset::load_csv(&input.input, &schema).map_err(|e| Failure {
        class: Class::Input,
        stage: "input",
        message: format!("{}: {e}", input.input.display()),
    })
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    path: String,
    n: usize,
    n_treated: usize,
    n_control: usize,
    covariates: &'a [String],
    flags: Vec<String>,
}

fn summary<'a>(input: &'a InputArgs, ds: &CanonicalDataset) -> DatasetSummary<'a> {
    let v = dataset::validate(ds);
    DatasetSummary {
        path: input.input.display().to_string(),
        n: ds.len(),
        n_treated: v.n_treated,
        n_control: v.n_control,
        covariates: &input.covariates,
        flags: v.flags.iter().map(ToString::to_string).collect(),
    }
}

fn estimation_class(e: &EstimationError) -> Class {
    match e {
        EstimationError::InvalidMethod(_) => Class::Input,
        _ => Class::Computation,
    }
}

fn estimate_stage(ds: &CanonicalDataset, method: &bracket_att::MethodSpec) -> CmdResult<BracketReport> {
    estimate_all(ds, method).map_err(|e| Failure {
        class: estimation_class(&e),
        stage: "estimation",
        message: e.to_string(),
    })
}

fn csv_out<F>(f: File, header: &[&str], rows: F) -> Result<(), String>
where
    F: FnOnce(&mut csv::Writer<File>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header).map_err(|e| e.to_string())?;
    rows(&mut w).map_err(|e| e.to_string())?;
    w.flush().map_err(|e| e.to_string())
}

fn write_columns(report: &mut RunReport, name: &str, cols: &[Column]) -> CmdResult<()> {
    report.write_file(name, |f| export::write_columns_csv(f, cols).map_err(|e| e.to_string()))
}

fn num(v: f64) -> String {
    v.to_string()
}

pub fn estimate(a: &EstimateArgs) -> CmdResult<()> {
    let mut report = RunReport::new("estimate", &a.out)?;
    let method = a.method.spec();
    method.validate().stage(Class::Input, "method")?;
    let ds = load(&a.input)?;
    report.set("dataset", summary(&a.input, &ds));
    report.set("method", method);
    let (point, cis): (BracketReport, Option<BracketCIs>) = match a.bootstrap {
        Some(b) => {
            let ci = bootstrap_brackets(&ds, &method, b, a.alpha, a.seed).map_err(|e| Failure {
                class: match e {
                    InferenceError::Precondition(_) => Class::Input,
                    InferenceError::Estimation(ref e) => estimation_class(e),
                    _ => Class::Computation,
                },
                stage: "bootstrap",
                message: e.to_string(),
            })?;
            (ci.point.clone(), Some(ci))
        }
        None => (estimate_stage(&ds, &method)?, None),
    };
    report.set("seed", a.bootstrap.map(|_| a.seed));
    report.set("estimates", &point);
    report.set("intervals", &cis);
    let (matching, mean) = (point.m.method.to_string(), point.did.method.to_string());
    let rows = [
        ("M", point.m.value, cis.as_ref().map(|c| c.ci_m), point.m.n_treated_used, &matching),
        ("DIDM", point.didm.value, cis.as_ref().map(|c| c.ci_didm), point.didm.n_treated_used, &matching),
        ("DID", point.did.value, cis.as_ref().map(|c| c.ci_did), point.did.n_treated_used, &mean),
        ("gap_didm_m", point.gap_didm_m, cis.as_ref().map(|c| c.ci_gap_didm_m), point.m.n_treated_used, &matching),
        ("gap_did_didm", point.gap_did_didm, cis.as_ref().map(|c| c.ci_gap_did_didm), point.m.n_treated_used, &matching),
    ];
    report.write_file("estimates.csv", |f| {
        csv_out(f, &["quantity", "value", "ci_lo", "ci_hi", "n_treated_used", "method"], |w| {
            for (name, value, ci, n, method) in rows {
                let (lo, hi) = ci.map_or((String::new(), String::new()), |c| (num(c.lo), num(c.hi)));
                w.write_record([name, &num(value), &lo, &hi, &n.to_string(), method])?;
            }
            Ok(())
        })
    })?;
    report.finish()
}

pub fn diagnose(a: &DiagnoseArgs) -> CmdResult<()> {
    let mut report = RunReport::new("diagnose", &a.out)?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure {
            class: Class::Input,
            stage: "arguments",
            message: format!("alpha must lie in (0, 1), got {}", a.alpha),
        });
    }
    let ds = load(&a.input)?;
    report.set("dataset", summary(&a.input, &ds));
    let cfg = SeriesConfig {
        bins: a.bins,
        degree: a.degree,
    };
    report.set("series", cfg);
    report.set("alpha", a.alpha);
    let sel = check_negative_selection(&ds, &cfg).stage(Class::Computation, "negative selection check")?;
    let fosd = check_fosd(&ds, a.alpha).stage(Class::Computation, "dominance check")?;
    let phi = check_phi_monotone(&ds, &cfg).stage(Class::Computation, "monotonicity check")?;
    report.set(
        "verdicts",
        json!({ "selection": sel.verdict, "fosd": fosd.verdict, "phi": phi.verdict }),
    );
    report.set(
        "selection",
        json!({ "max_violation": sel.max_violation, "n_bins_control": sel.control.n_bins, "n_bins_treated": sel.treated.n_bins }),
    );
    report.set(
        "fosd",
        json!({ "max_violation": fosd.max_violation, "dkw_epsilon_sum": fosd.dkw_epsilon_sum }),
    );
    report.set(
        "phi",
        json!({ "max_increase": phi.max_increase, "band_width_at_max": phi.band_width_at_max, "slope": phi.slope }),
    );
    if ds.covariate_arity() > 0 {
        let opts = MultivariateOptions {
            seed: a.seed,
            ..MultivariateOptions::default()
        };
        let mv = check_assumption2(&ds, a.alpha, &opts).stage(Class::Computation, "multivariate checks")?;
        report.set("seed", a.seed);
        report.set("multivariate", mv);
    }

    write_columns(&mut report, "curves_selection.csv", &export::curve_columns(&[("control", &sel.control), ("treated", &sel.treated)]))?;
    let eps = |w| dkw_epsilon(ds.n_group(w), a.alpha);
    write_columns(&mut report, "cdf_fosd.csv", &export::cdf_columns(&fosd, eps(Group::Control), eps(Group::Treated)))?;
    write_columns(&mut report, "curve_phi.csv", &export::curve_columns(&[("phi", &phi.curve)]))?;
    if a.svg {
        let labels = |title: &str, y: &str| ChartLabels {
            title: title.into(),
            x: "y_lag".into(),
            y: y.into(),
        };
        let svg = export::line_chart_svg(
            &labels("Pre-period outcome given y_lag", "E[y0 | W, y_lag]"),
            &[Series::from_curve("control", &sel.control), Series::from_curve("treated", &sel.treated)],
        );
        report.write_text("curves_selection.svg", &svg)?;
        let cdf_series = |label: &str, cdf: &[f64], eps: f64| Series {
            label: label.into(),
            x: fosd.grid.clone(),
            y: cdf.to_vec(),
            band: Some((
                cdf.iter().map(|v| (v - eps).max(0.0)).collect(),
                cdf.iter().map(|v| (v + eps).min(1.0)).collect(),
            )),
        };
        let svg = export::line_chart_svg(
            &labels("Distribution of y_lag", "CDF"),
            &[
                cdf_series("control", &fosd.cdf_control, eps(Group::Control)),
                cdf_series("treated", &fosd.cdf_treated, eps(Group::Treated)),
            ],
        );
        report.write_text("cdf_fosd.svg", &svg)?;
        let svg = export::line_chart_svg(
            &labels("Control trend given y_lag", "E[y1 - y0 | W = 0, y_lag]"),
            &[Series::from_curve("phi", &phi.curve)],
        );
        report.write_text("curve_phi.svg", &svg)?;
    }
    report.finish()
}

enum Dgp {
    Parametric(ParametricDgpSpec),
    Counterexample(CounterexampleKind),
}

fn parse_dgp(a: &SimulateArgs) -> CmdResult<Dgp> {
    let bad = |message: String| Failure {
        class: Class::Input,
        stage: "arguments",
        message,
    };
    if a.dgp == "parametric" {
        let spec = ParametricDgpSpec {
            beta: a.beta,
            gamma: a.gamma,
            rho: a.rho,
            delta0: a.delta0,
            delta1: a.delta1,
            alpha_sd: a.alpha_sd,
            eps_sd: a.eps_sd,
            ylag_mean_treated: a.ylag_mean_treated,
            ylag_mean_control: a.ylag_mean_control,
            ylag_sd: a.ylag_sd,
            p_treated: a.p_treated,
        };
        spec.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Dgp::Parametric(spec))
    } else if let Some(kind) = a.dgp.strip_prefix("counterexample:") {
        kind.parse().map(Dgp::Counterexample).map_err(|e: bracket_att::simulator::SimulationError| bad(e.to_string()))
    } else {
        Err(bad(format!(
            "unknown dgp '{}', expected 'parametric' or 'counterexample:KIND'",
            a.dgp
        )))
    }
}

#[derive(Serialize)]
struct Check {
    property: &'static str,
    pass: bool,
    detail: String,
}

/// Estimate tolerance for the closed-form comparison at sample size `n`.
pub fn closed_form_tolerance(base: f64, n: usize) -> f64 {
    (base * (50_000.0 / n as f64).sqrt()).max(base)
}

fn verify_parametric(
    spec: &ParametricDgpSpec,
    panel: &OraclePanel,
    a: &SimulateArgs,
    out: &mut serde_json::Map<String, serde_json::Value>,
) -> CmdResult<Vec<Check>> {
    let mut checks = Vec::new();
    let cf = closed_forms(spec);
    out.insert("closed_forms".into(), json!(cf));
    let conditions = spec.satisfies_bracketing_conditions();
    out.insert("bracketing_conditions_hold".into(), json!(conditions));
    let ordered = cf.m <= cf.didm && cf.didm <= cf.did;
    checks.push(Check {
        property: "closed_form_ordering",
        pass: ordered || !conditions,
        detail: format!("m = {}, didm = {}, did = {}", cf.m, cf.didm, cf.did),
    });

    let method = a.method.spec();
    method.validate().stage(Class::Input, "method")?;
    let est = estimate_stage(&panel.canonical, &method)?;
    out.insert("estimates".into(), json!(est));
    let base = match method.kind {
        MethodKind::LocalLinear | MethodKind::LocalLinearRegressionAdjusted => 0.08,
        _ => 0.05,
    };
    let tol = closed_form_tolerance(base, panel.len());
    out.insert("tolerance".into(), json!(tol));
    let mut pairs = vec![("DID", est.did.value, cf.did)];
    if method.kind != MethodKind::MeanDifference {
        pairs.insert(0, ("M", est.m.value, cf.m));
        pairs.insert(1, ("DIDM", est.didm.value, cf.didm));
    }
    let worst = pairs.iter().map(|(_, e, c)| (e - c).abs()).fold(0.0f64, f64::max);
    checks.push(Check {
        property: "estimates_match_closed_forms",
        pass: worst <= tol,
        detail: pairs
            .iter()
            .map(|(name, e, c)| format!("{name}: {e} vs {c}"))
            .collect::<Vec<_>>()
            .join("; "),
    });

    let ie = identification_errors(panel, a.bins).stage(Class::Computation, "identification errors")?;
    out.insert("identification_errors".into(), json!(ie));
    checks.push(Check {
        property: "identification_errors_ordered",
        pass: ie.ordered(3.0) || !conditions,
        detail: format!("d_m = {}, d_didm = {}, d_did = {}", ie.d_m, ie.d_didm, ie.d_did),
    });
    Ok(checks)
}

fn verify_counterexample(
    kind: &CounterexampleKind,
    panel: &OraclePanel,
    a: &SimulateArgs,
    out: &mut serde_json::Map<String, serde_json::Value>,
) -> CmdResult<Vec<Check>> {
    let got = condition_check(panel, a.tol).stage(Class::Computation, "condition check")?;
    let expected = kind.expected_pattern();
    out.insert("condition_pattern".into(), json!(got));
    out.insert("expected_pattern".into(), json!(expected));
    Ok(vec![Check {
        property: "condition_pattern",
        pass: got == expected,
        detail: format!("observed {got}, expected {expected}"),
    }])
}

pub fn simulate(a: &SimulateArgs) -> CmdResult<()> {
    let mut report = RunReport::new("simulate", &a.out)?;
    let dgp = parse_dgp(a)?;
    let panel = match &dgp {
        Dgp::Parametric(spec) => {
            report.set("dgp", json!({ "kind": "parametric", "spec": spec }));
            simulate_parametric(spec, a.n, a.seed)
        }
        Dgp::Counterexample(kind) => {
            report.set("dgp", json!({ "kind": "counterexample", "spec": kind }));
            simulate_counterexample(kind, a.n, a.seed)
        }
    }
    .stage(Class::Input, "simulation")?;
    report.set("n", a.n);
    report.set("seed", a.seed);
    report.set("true_att", panel.true_att);
    report.write_file("panel.csv", |f| panel.write_csv(f).map_err(|e| e.to_string()))?;

    if !a.verify {
        return report.finish();
    }
    let mut out = serde_json::Map::new();
    out.insert("dgp".into(), json!(a.dgp));
    out.insert("n".into(), json!(a.n));
    out.insert("seed".into(), json!(a.seed));
    let checks = match &dgp {
        Dgp::Parametric(spec) => verify_parametric(spec, &panel, a, &mut out)?,
        Dgp::Counterexample(kind) => verify_counterexample(kind, &panel, a, &mut out)?,
    };
    let pass = checks.iter().all(|c| c.pass);
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| format!("{} ({})", c.property, c.detail)).collect();
    out.insert("checks".into(), json!(checks));
    out.insert("pass".into(), json!(pass));
    let text = serde_json::to_string_pretty(&out).expect("json") + "\n";
    report.write_text("verify.json", &text)?;
    report.set("verify", json!({ "pass": pass, "checks": checks }));
    report.finish()?;
    if pass {
        Ok(())
    } else {
        Err(Failure {
            class: Class::Verification,
            stage: "verify",
            message: format!("violated: {}", failed.join(", ")),
        })
    }
}

fn adapter_failure(e: AdapterError) -> Failure {
    let class = match e {
        AdapterError::EmptyTreated(_) | AdapterError::EmptyComparison(_) | AdapterError::Dataset(_) => {
            Class::Computation
        }
        _ => Class::Input,
    };
    Failure {
        class,
        stage: "adapt",
        message: e.to_string(),
    }
}

pub fn adapt(a: &AdaptArgs) -> CmdResult<()> {
    let mut report = RunReport::new("adapt", &a.out)?;
    let panel = load_long_csv(&a.input).map_err(|e| Failure {
        class: Class::Input,
        stage: "input",
        message: format!("{}: {e}", a.input.display()),
    })?;
    let method = a.method.spec();
    if a.estimate {
        method.validate().stage(Class::Input, "method")?;
        report.set("method", method);
    }
    let style = match a.style {
        StyleName::Lagm => CellStyle::LagMatchedM,
        StyleName::CohortDid => CellStyle::CohortDid,
        StyleName::Localproj => CellStyle::LocalProjectionDidm,
    };
    report.set(
        "panel",
        json!({ "path": a.input.display().to_string(), "n_units": panel.n_units(), "balanced": panel.balanced, "cohorts": panel.cohorts() }),
    );

    let mut cells: Vec<AdaptedCell> = Vec::new();
    for &t in &a.t {
        for &h in &a.horizon {
            let spec = CellSpec::new(style, t, h).with_lags(a.lags).with_comparison(a.comparison.into());
            let cell = match style {
                CellStyle::LagMatchedM => adapt_lag_matched(&panel, &spec),
                CellStyle::CohortDid => adapt_cohort_did(&panel, &spec),
                CellStyle::LocalProjectionDidm => adapt_local_projection(&panel, &spec, &XSelector::lags(1..=a.lags)),
            }
            .map_err(adapter_failure)?;
            cells.push(cell);
        }
    }
    let reports: Vec<BracketReport> = if a.estimate {
        cells
            .iter()
            .map(|c| {
                estimate_all(&c.dataset, &method).map_err(|e| Failure {
                    class: estimation_class(&e),
                    stage: "estimation",
                    message: format!("cell {}: {e}", c.spec),
                })
            })
            .collect::<CmdResult<_>>()?
    } else {
        Vec::new()
    };

    for cell in &cells {
        let name = format!("cell_{}.csv", cell.spec.label());
        report.write_file(&name, |f| dataset::write_csv(&cell.dataset, f).map_err(|e| e.to_string()))?;
    }
    let mut header = vec!["t", "h", "n_treated", "n_control", "n_missing", "n_ineligible"];
    if a.estimate {
        header.extend(["m", "didm", "did", "gap_didm_m", "gap_did_didm", "ordering_holds"]);
    }
    report.write_file("cells.csv", |f| {
        csv_out(f, &header, |w| {
            for (i, c) in cells.iter().enumerate() {
                let mut row = vec![
                    c.spec.event_time.to_string(),
                    c.spec.horizon.to_string(),
                    c.dataset.n_group(Group::Treated).to_string(),
                    c.dataset.n_group(Group::Control).to_string(),
                    c.n_missing.to_string(),
                    c.n_ineligible.to_string(),
                ];
                if let Some(r) = reports.get(i) {
                    row.extend([
                        num(r.m.value),
                        num(r.didm.value),
                        num(r.did.value),
                        num(r.gap_didm_m),
                        num(r.gap_did_didm),
                        r.ordering_holds.to_string(),
                    ]);
                }
                w.write_record(&row)?;
            }
            Ok(())
        })
    })?;
    let cell_json: Vec<_> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| json!({ "spec": c.spec, "n_missing": c.n_missing, "n_ineligible": c.n_ineligible, "estimates": reports.get(i) }))
        .collect();
    report.set("cells", cell_json);
    if a.estimate {
        report.set("aggregate", aggregate(&reports));
    }
    report.finish()
}
