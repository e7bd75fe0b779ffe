//! Command-line front end. Every command writes its files under `--out-dir`
//! and is deterministic given its flags and `--seed`.

mod commands;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::fit::WeightScheme;
use crate::portfolio::DeltaLaw;
use crate::spline::KnotGrid;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "MIDTERM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "midterm", version, about = "Exposure-aware Tweedie ratemaking with cancellation penalties")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for simulation, splitting and bootstrap.
    #[arg(long, global = true, default_value_t = 2024)]
    pub seed: u64,
    /// Tweedie variance power p, in (1, 2).
    #[arg(long, global = true, default_value_t = 1.42, value_parser = parse_power)]
    pub power: f64,
    /// Spline knots as a comma-separated increasing list ending at 1.
    #[arg(long, global = true, value_parser = parse_knots)]
    pub knots: Option<KnotGrid>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    pub out_dir: PathBuf,
    /// Format of summary tables.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Worker threads for bootstrap and cut-point fits (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Skip invalid CSV rows with a report instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Offset,
    Ratio,
    Cwm,
    Gwm,
    Ewm,
    All,
}

impl SchemeArg {
    fn expand(args: &[SchemeArg]) -> Vec<WeightScheme> {
        let mut out: Vec<WeightScheme> = Vec::new();
        for a in args {
            let add: Vec<WeightScheme> = match a {
                SchemeArg::All => WeightScheme::ALL.to_vec(),
                SchemeArg::Offset => vec![WeightScheme::TraditionalOffset],
                SchemeArg::Ratio => vec![WeightScheme::TraditionalRatio],
                SchemeArg::Cwm => vec![WeightScheme::Cwm],
                SchemeArg::Gwm => vec![WeightScheme::Gwm],
                SchemeArg::Ewm => vec![WeightScheme::Ewm],
            };
            for s in add {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupScheme {
    Cwm,
    Ewm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Tag {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic portfolio with a known exposure law.
    Simulate(SimulateArgs),
    /// Split a portfolio into stratified train and test files.
    Split(SplitArgs),
    /// Exploratory summaries by contract type, exposure bin and BMS level.
    Summary(DataArgs),
    /// Fit one or more weighting schemes.
    Fit(FitArgs),
    /// Score fitted models on a data file.
    Score(ScoreArgs),
    /// Constrain a fitted curve into penalty schedules and refit.
    Penalty(PenaltyArgs),
    /// Search the BMS cut-point and bootstrap the group-curve difference.
    Groupsplit(GroupsplitArgs),
    /// Run the whole pipeline and write a markdown report with its data files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of contracts.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// True exposure law: identity, power:ALPHA or scurve:KAPPA.
    #[arg(long, default_value = "power:0.6", value_parser = parse_delta)]
    pub delta: DeltaLaw,
    /// Share of contracts cancelled mid-term.
    #[arg(long, default_value_t = 0.35)]
    pub xo_fraction: f64,
    /// Dispersion.
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    /// Plant a second exposure law on BMS levels above this cut.
    #[arg(long, requires = "delta_high")]
    pub group_cut: Option<u8>,
    /// Exposure law for levels above `--group-cut`.
    #[arg(long, value_parser = parse_delta)]
    pub delta_high: Option<DeltaLaw>,
    /// Output file stem.
    #[arg(long, default_value = "portfolio")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Portfolio CSV.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training share.
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Schemes to fit; repeat or use `all`.
    #[arg(long, value_enum, num_args = 1.., default_values_t = [SchemeArg::All])]
    pub scheme: Vec<SchemeArg>,
    /// Fixed curvature penalty instead of GCV.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Fit JSON files; the file stem names the model.
    #[arg(long = "fit", required = true, num_args = 1..)]
    pub fits: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Tag::Test)]
    pub tag: Tag,
}

#[derive(Debug, Args)]
pub struct PenaltyArgs {
    /// Fit JSON of a flexible model.
    #[arg(long)]
    pub fit: PathBuf,
    /// Data the refits are estimated on.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional held-out data for the scores by `a`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Smoothing levels, comma-separated, each in [0, 1].
    #[arg(long, value_delimiter = ',', value_parser = parse_unit, default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
    pub a: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct GroupsplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = GroupScheme::Ewm)]
    pub scheme: GroupScheme,
    /// Bootstrap replicates for the band at the chosen cut.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pub bootstrap: u32,
    /// Use this cut instead of searching.
    #[arg(long, value_parser = clap::value_parser!(u8).range(95..104))]
    pub cut: Option<u8>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["data", "n"])))]
pub struct ReportArgs {
    /// Portfolio CSV to analyse.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Simulate this many contracts instead (power:0.6 law, 65% XO).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    /// Bootstrap replicates for the group band.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub bootstrap: u32,
}

fn parse_power(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if p > 1.0 && p < 2.0 {
        Ok(p)
    } else {
        Err(format!("power must lie strictly in (1, 2), got {p}"))
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let a: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("{a} is outside [0, 1]"))
    }
}

fn parse_knots(s: &str) -> Result<KnotGrid, String> {
    let knots = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    KnotGrid::new(knots).map_err(|e| e.to_string())
}

fn parse_delta(s: &str) -> Result<DeltaLaw, String> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a.parse::<f64>().map_err(|e| format!("{a:?}: {e}"))?)),
        None => (s, None),
    };
    let law = match (name, arg) {
        ("identity", None) => DeltaLaw::Identity,
        ("power", Some(alpha)) => DeltaLaw::Power { alpha },
        ("scurve", Some(kappa)) => DeltaLaw::Scurve { kappa },
        _ => return Err(format!("expected identity, power:ALPHA or scurve:KAPPA, got {s:?}")),
    };
    law.validate().map_err(|e| e.to_string())?;
    Ok(law)
}

/// Parses `args`, runs the command and maps failures to exit codes: 2 for
/// usage errors (reported by clap), 1 for data and model errors.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(j) = cli.global.jobs {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
