use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("input file is empty")]
    EmptyFile,
    #[error("required column `{0}` not found in header")]
    MissingColumn(String),
    #[error("line {line}: unknown state label `{label}`")]
    UnknownStateLabel { line: usize, label: String },
    #[error("line {line}: column `{column}` holds non-numeric value `{value}`")]
    NonNumericTime {
        line: usize,
        column: String,
        value: String,
    },
    #[error("invalid state space: {0}")]
    InvalidStateSpace(String),
    #[error("invalid record for subject {subject}: {reason}")]
    InvalidRecord { subject: String, reason: String },
    #[error("state index {0} is not part of the state space")]
    UnknownState(usize),
    #[error("transition {from}->{to} is not allowed by the state space")]
    DisallowedTransition { from: usize, to: usize },
    #[error("risk set for state {state} is empty at t = {time} although events are recorded")]
    NeverAtRisk { state: usize, time: f64 },
    #[error("states {0:?} cannot be entered after a sojourn in the target state")]
    InconsistentFollowingSet(Vec<usize>),
    #[error("tau = {tau} lies outside the curve span [{lo}, {hi}]")]
    TauOutOfRange { tau: f64, lo: f64, hi: f64 },
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    InvalidLevel(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("covariate `{0}` shows no variation among subjects at risk")]
    DegenerateCovariate(String),
    #[error("no events observed for transition {from}->{to}")]
    NoEvents { from: usize, to: usize },
    #[error("partial likelihood is monotone: coefficients diverge (max |beta| = {max_abs_beta:.1})")]
    MonotoneLikelihood { max_abs_beta: f64 },
    #[error("optimizer did not converge after {iterations} iterations (gradient max-norm {gradient_norm:.3e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("clock-reset fits cannot be combined into a Markov transition matrix")]
    MixedTimescale,
    #[error("matrix is not a transition generator: {0}")]
    InvalidGenerator(String),
    #[error("subject {subject}: observed {from}->{to} over ({start}, {stop}] has zero model probability")]
    ImpossibleTransitionObserved {
        subject: String,
        from: usize,
        to: usize,
        start: f64,
        stop: f64,
    },
    #[error("information matrix is singular along a parameter direction (smallest eigenvalue {min_eigenvalue:.3e})")]
    NonIdentifiable { min_eigenvalue: f64 },
    #[error("subject {0} enters the study after time 0; pseudo-values require entry at the origin")]
    DelayedEntryUnsupported(String),
    #[error("t0 = {t0} lies outside the observed span [0, {max_time}]")]
    T0OutOfRange { t0: f64, max_time: f64 },
    #[error("design matrix is rank deficient")]
    SingularDesign,
    #[error("censoring distribution cannot be estimated: {0}")]
    NoCensoringInformation(String),
    #[error("censoring survival is zero at t = {0}; weight undefined")]
    WeightUndefined(f64),
    #[error("log-likelihood is not finite")]
    NonFiniteLikelihood,
    #[error("no detectable frailty: frailty variance estimate at the boundary (score at zero {score_at_zero:.4})")]
    ThetaBoundary {
        score_at_zero: f64,
        fit_without_frailty: Box<crate::frailty::FrailtyFit>,
    },
    #[error("transition is not part of the illness-death model: {0}")]
    InvalidTransition(String),
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("invalid panel data: {0}")]
    InvalidPanel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of an iterative fit rather than of the input data.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::MonotoneLikelihood { .. }
                | Error::NonIdentifiable { .. }
                | Error::ThetaBoundary { .. }
        )
    }
}
