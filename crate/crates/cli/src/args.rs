use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bracket_att::diagnostics::Bins;
use bracket_att::event_adapter::Comparison;
use bracket_att::MethodSpec;

/// M, DID and DIDM estimates of the ATT with bracketing diagnostics.
#[derive(Debug, Parser)]
#[command(name = "bracket-att", version)]
pub struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true, env = "BRACKET_ATT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate M, DIDM and DID with optional bootstrap intervals.
    Estimate(EstimateArgs),
    /// Check the three bracketing conditions.
    Diagnose(DiagnoseArgs),
    /// Simulate an oracle panel and optionally verify its properties.
    Simulate(SimulateArgs),
    /// Map a long staggered-adoption panel to two-period cells.
    Adapt(AdaptArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Unit-level CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Treatment indicator column (0/1).
    #[arg(long)]
    pub w: String,
    /// Lagged pre-treatment outcome column.
    #[arg(long)]
    pub ylag: String,
    /// Pre-period outcome column.
    #[arg(long)]
    pub y0: String,
    /// Post-period outcome column.
    #[arg(long)]
    pub y1: String,
    /// Unit identifier column; row numbers are used when omitted.
    #[arg(long)]
    pub id: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Periods between the lagged outcome and the pre-period outcome.
    #[arg(long, default_value_t = 1)]
    pub lag_order: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodName {
    Mean,
    Nn,
    Loclin,
    LoclinAdj,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value_t = MethodName::Nn)]
    pub method: MethodName,
    /// Neighbors for nearest-neighbor matching.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Gaussian kernel bandwidth for local linear matching.
    #[arg(long, default_value_t = 1.0)]
    pub bw: f64,
    /// Drop treated units outside the control support of y_lag.
    #[arg(long)]
    pub support: bool,
}

impl MethodArgs {
    pub fn spec(&self) -> MethodSpec {
        let spec = match self.method {
            MethodName::Mean => MethodSpec::mean(),
            MethodName::Nn => MethodSpec::nearest_neighbor(self.k),
            MethodName::Loclin => MethodSpec::local_linear(self.bw),
            MethodName::LoclinAdj => MethodSpec::local_linear_adjusted(self.bw),
        };
        spec.with_support(self.support)
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Bootstrap replicates; intervals are skipped when omitted.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_bins(s: &str) -> Result<Bins, String> {
    if s == "auto" {
        return Ok(Bins::Auto);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Bins::Fixed(n)),
        _ => Err(format!("expected 'auto' or a positive integer, got '{s}'")),
    }
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Partition cells: 'auto' or a count.
    #[arg(long, default_value = "auto", value_parser = parse_bins)]
    pub bins: Bins,
    #[arg(long, default_value_t = 1)]
    pub degree: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Seed for the multivariate bootstrap band (with covariates only).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write SVG charts of the three curves.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// 'parametric' or 'counterexample:KIND'.
    #[arg(long, default_value = "parametric")]
    pub dgp: String,
    #[arg(long, default_value_t = 50_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub beta: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub delta0: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub delta1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_sd: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eps_sd: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub ylag_mean_treated: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub ylag_mean_control: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ylag_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    pub p_treated: f64,
    /// Run the estimators and oracle checks and write verify.json.
    #[arg(long)]
    pub verify: bool,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Cells for identification errors.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Standard-error multiple for the condition check.
    #[arg(long, default_value_t = 4.0)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleName {
    Lagm,
    CohortDid,
    Localproj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ComparisonName {
    Never,
    Notyet,
}

impl From<ComparisonName> for Comparison {
    fn from(c: ComparisonName) -> Self {
        match c {
            ComparisonName::Never => Comparison::NeverTreated,
            ComparisonName::Notyet => Comparison::NotYetTreated,
        }
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Long panel CSV with columns unit,time,y,treated_at.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub style: StyleName,
    /// Comma-separated event times.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub t: Vec<i64>,
    /// Comma-separated horizons.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub horizon: Vec<u32>,
    /// Number of lagged outcomes to match on.
    #[arg(long, default_value_t = 1)]
    pub lags: u32,
    #[arg(long, value_enum, default_value_t = ComparisonName::Never)]
    pub comparison: ComparisonName,
    /// Estimate every cell and aggregate.
    #[arg(long)]
    pub estimate: bool,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long)]
    pub out: PathBuf,
}
