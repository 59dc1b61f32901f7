//! `multistate` batch front end.
//!
//! Every subcommand writes one JSON result file into the output directory
//! and, for curve estimators, one delimited file per curve with columns
//! `time,estimate,lower,upper`.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::output::Failure;

const EXIT_CODES: &str = "\
Exit codes:
  0   success (a frailty variance on the boundary is a result, not an error)
  1   i/o failure
  2   invalid data, specification or model
  3   fit did not converge, likelihood is monotone or parameters are not identifiable
  64  usage error; a JSON diagnostic is printed to standard error";

#[derive(Debug, Parser)]
#[command(name = "multistate", version, about = "Multistate event-history analysis", after_help = EXIT_CODES)]
struct Cli {
    /// Directory receiving result files; created when missing.
    #[arg(long, global = true, env = "MULTISTATE_OUT", default_value = ".")]
    out: PathBuf,
    /// Confidence level for intervals and bands.
    #[arg(long, global = true, default_value_t = 0.95)]
    level: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Recipe {
    /// survival::colon in illness-death form.
    Colon,
    /// msm::psor panel data.
    Psoriatic,
    /// survival::rotterdam in illness-death form.
    Rotterdam,
}

#[derive(Debug, Args)]
struct Input {
    /// Delimited data file (comma or tab separated, header row).
    #[arg(long)]
    input: PathBuf,
    /// JSON column mapping; defaults to columns id, tstart, tstop, state (panel: id, time, state).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// JSON state space {"labels", "absorbing", "allowed"}; inferred from episode data when omitted.
    #[arg(long)]
    state_space: Option<PathBuf>,
    /// Built-in ingestion recipe for a public example dataset.
    #[arg(long, value_enum, conflicts_with_all = ["schema", "state_space"])]
    recipe: Option<Recipe>,
}

#[derive(Debug, Args)]
struct Bootstrap {
    /// Subject-level bootstrap replicates for percentile bands; without it the
    /// interval columns repeat the estimate.
    #[arg(long = "bootstrap", value_name = "B")]
    replicates: Option<usize>,
    /// Seed of the bootstrap streams.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TiesArg {
    Efron,
    Breslow,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TimescaleArg {
    TotalTime,
    ClockReset,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LinkArg {
    Identity,
    Logit,
    Cloglog,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check episode data and tabulate transitions and censorings.
    Validate {
        #[command(flatten)]
        input: Input,
    },
    /// Nelson-Aalen cumulative transition intensity.
    Na {
        #[command(flatten)]
        input: Input,
        /// Transition as FROM:TO, each a state label or index.
        #[arg(long)]
        transition: String,
        /// Estimate separately for each value of this covariate.
        #[arg(long)]
        by: Option<String>,
    },
    /// Aalen-Johansen transition probabilities P(s, t).
    Aj {
        #[command(flatten)]
        input: Input,
        /// Start time s.
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        /// Row of P(s, t) written as curves (label or index).
        #[arg(long, default_value = "0")]
        from: String,
        /// Evaluation times; defaults to the observed transition times.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        bootstrap: Bootstrap,
        /// Estimate separately for each value of this covariate.
        #[arg(long)]
        by: Option<String>,
    },
    /// Cumulative incidence of entering a state, from state 0.
    Cif {
        #[command(flatten)]
        input: Input,
        /// Target state (label or index).
        #[arg(long)]
        target: String,
        /// States entered only after a sojourn in the target.
        #[arg(long, value_delimiter = ',')]
        following: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        bootstrap: Bootstrap,
        /// Estimate separately for each value of this covariate.
        #[arg(long)]
        by: Option<String>,
    },
    /// Restricted mean time spent in a state up to tau.
    Rmst {
        #[command(flatten)]
        input: Input,
        /// State (label or index).
        #[arg(long)]
        state: String,
        #[arg(long)]
        tau: f64,
        /// Initial state (label or index).
        #[arg(long, default_value = "0")]
        from: String,
        /// Estimate separately for each value of this covariate.
        #[arg(long)]
        by: Option<String>,
    },
    /// Cox regression for one transition intensity.
    Cox {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        transition: String,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, value_enum, default_value = "efron")]
        ties: TiesArg,
        #[arg(long, value_enum, default_value = "total-time")]
        timescale: TimescaleArg,
        /// Also report the subject-clustered sandwich covariance.
        #[arg(long)]
        robust: bool,
    },
    /// Piecewise-constant Markov model for panel data.
    Panel {
        #[command(flatten)]
        input: Input,
        /// Band cutpoints of the baseline intensities.
        #[arg(long, value_delimiter = ',')]
        cutpoints: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        /// Times at which to report occupancy from state 0 at covariates 0.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Leave-one-out pseudo-values with a GEE fit.
    Pseudo {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        state: String,
        /// Occupancy probability at t0.
        #[arg(long, conflicts_with = "tau", required_unless_present = "tau")]
        t0: Option<f64>,
        /// Restricted mean time in state up to tau.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, value_enum, default_value = "identity")]
        link: LinkArg,
    },
    /// Inverse-probability-of-censoring weighted binomial regression.
    DirectBinomial {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        state: String,
        #[arg(long)]
        t0: f64,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, value_enum, default_value = "identity")]
        link: LinkArg,
    },
    /// Gamma-frailty illness-death model with piecewise-constant baselines.
    ///
    /// Without a recipe or schema the input has columns id, w1, w2, delta1,
    /// delta2, delta3 followed by covariates.
    Frailty {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_delimiter = ',')]
        cutpoints: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
    },
    /// Simulate paths, or panel observations when the scenario has visits.
    Simulate {
        /// JSON scenario.
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cox fits per transition on the colon data (Efron ties, trt, extent34, node4).
    ReproduceTable1 {
        /// survival::colon exported as CSV.
        #[arg(long)]
        input: PathBuf,
    },
    /// Piecewise panel fit on the psoriatic-arthritis data (cutpoints 5, 10, 20).
    ReproduceTable2 {
        /// msm::psor exported as CSV.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                kind => Failure::Usage(e.to_string()).report_with_kind(&format!("{kind:?}")),
            };
        }
    };
    match commands::run(cli) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(failure) => failure.report(),
    }
}
