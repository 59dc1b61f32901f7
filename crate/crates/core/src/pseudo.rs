//! Jackknife pseudo-values and marginal regression on them.
//!
//! For a functional `θ` of the marginal occupancy curve the pseudo-value of
//! subject `i` is `n·θ̂ − (n−1)·θ̂⁽⁻ⁱ⁾`, where `θ̂⁽⁻ⁱ⁾` is the Aalen-Johansen
//! estimate recomputed without subject `i`. Pseudo-values are then used as
//! responses in generalized estimating equations with an independence
//! working model. Direct binomial regression instead weights the observed
//! state indicators by the inverse censoring survival.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxreg::{coefficient_rows, CoefficientRow};
use crate::data::{EpisodeDataset, EpisodeRecord, EndMark};
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, sym_inverse};
use crate::nonparam::{propagate, step_integral, Increments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoFunctional {
    /// `p_k(t0)`.
    Occupancy,
    /// `∫_0^τ p_k(u) du`.
    RestrictedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoValueSet {
    pub functional: PseudoFunctional,
    /// Evaluation time, `t0` or `τ`.
    pub t0: f64,
    pub state: usize,
    pub subjects: Vec<String>,
    pub values: Vec<f64>,
    /// The functional on the full sample.
    pub base_estimate: f64,
}

impl PseudoValueSet {
    /// Writes `subject,value` lines with a header.
    pub fn write_delimited(&self, mut w: impl Write, delimiter: char) -> std::io::Result<()> {
        writeln!(w, "subject{delimiter}value")?;
        for (s, v) in self.subjects.iter().zip(&self.values) {
            writeln!(w, "{s}{delimiter}{v}")?;
        }
        Ok(())
    }
}

fn check_span(dataset: &EpisodeDataset, t0: f64) -> Result<()> {
    if let Some(id) = dataset.delayed_entry_subject() {
        return Err(Error::DelayedEntryUnsupported(id.to_string()));
    }
    let max_time = dataset.max_time();
    if dataset.is_empty() || !(t0 >= 0.0 && t0 <= max_time) {
        return Err(Error::T0OutOfRange { t0, max_time });
    }
    Ok(())
}

fn initial_counts(dataset: &EpisodeDataset) -> Vec<f64> {
    let mut counts = vec![0.0; dataset.state_space().n_states()];
    for s in 0..dataset.n_subjects() {
        counts[dataset.subject_records(s)[0].from] += 1.0;
    }
    counts
}

fn evaluate(
    inc: &Increments,
    counts: &[f64],
    functional: PseudoFunctional,
    state: usize,
    t0: f64,
) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    let initial: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let knots = propagate(&initial, &inc.jumps()?, t0);
    Ok(match functional {
        PseudoFunctional::Occupancy => knots.last().expect("origin knot").1[state],
        PseudoFunctional::RestrictedMean => {
            let times: Vec<f64> = knots.iter().map(|k| k.0).collect();
            let values: Vec<f64> = knots.iter().map(|k| k.1[state]).collect();
            step_integral(&times, &values, t0)
        }
    })
}

fn pseudo_values(dataset: &EpisodeDataset, functional: PseudoFunctional, state: usize, t0: f64) -> Result<PseudoValueSet> {
    dataset.state_space().check_state(state)?;
    check_span(dataset, t0)?;
    let n = dataset.n_subjects();
    let inc = Increments::new(dataset);
    let counts = initial_counts(dataset);
    let base = evaluate(&inc, &counts, functional, state, t0)?;
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            if n == 1 {
                return Ok(base);
            }
            let records: &[EpisodeRecord] = dataset.subject_records(i);
            let mut loo = inc.clone();
            loo.remove(records);
            let mut c = counts.clone();
            c[records[0].from] -= 1.0;
            let without = evaluate(&loo, &c, functional, state, t0)?;
            Ok(n as f64 * base - (n - 1) as f64 * without)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PseudoValueSet {
        functional,
        t0,
        state,
        subjects: dataset.subjects().iter().map(|s| s.id.clone()).collect(),
        values,
        base_estimate: base,
    })
}

/// Pseudo-values for `p_state(t0)` with the Aalen-Johansen estimator started
/// from the empirical initial distribution.
///
/// The leave-one-out estimates are exact: each removes one subject's
/// contribution from the event and risk-set tallies and re-runs the product
/// integral.
pub fn pseudo_occupancy(dataset: &EpisodeDataset, state: usize, t0: f64) -> Result<PseudoValueSet> {
    pseudo_values(dataset, PseudoFunctional::Occupancy, state, t0)
}

/// Pseudo-values for the restricted mean time spent in `state` before `tau`.
pub fn pseudo_rmst(dataset: &EpisodeDataset, state: usize, tau: f64) -> Result<PseudoValueSet> {
    pseudo_values(dataset, PseudoFunctional::RestrictedMean, state, tau)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    Logit,
    /// `g(p) = log(−log(1 − p))`.
    Cloglog,
}

impl Link {
    pub fn link(self, p: f64) -> f64 {
        match self {
            Link::Identity => p,
            Link::Logit => p.ln() - (-p).ln_1p(),
            Link::Cloglog => (-(-p).ln_1p()).ln(),
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Cloglog => -(-eta.exp()).exp_m1(),
        }
    }

    /// First and second derivative of the inverse link.
    fn derivatives(self, eta: f64) -> (f64, f64) {
        match self {
            Link::Identity => (1.0, 0.0),
            Link::Logit => {
                let mu = self.inverse(eta);
                let d = mu * (1.0 - mu);
                (d, d * (1.0 - 2.0 * mu))
            }
            Link::Cloglog => {
                let e = eta.exp();
                let d = (eta - e).exp();
                (d, d * (1.0 - e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeFit {
    /// `"(intercept)"` followed by the covariate names.
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub sandwich_covariance: DMatrix<f64>,
    pub link: Link,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the estimating function at the solution.
    pub residual: f64,
    pub n: usize,
}

impl GeeFit {
    /// Wald table from the sandwich covariance; the ratio columns hold `exp(β)`.
    pub fn coefficients(&self, level: f64) -> Vec<CoefficientRow> {
        coefficient_rows(&self.names, &self.beta, &self.sandwich_covariance, level)
    }
}

/// Covariates from each subject's first record, one row per subject.
pub fn subject_design(dataset: &EpisodeDataset, covariates: &[&str]) -> Result<DMatrix<f64>> {
    let cols = covariates
        .iter()
        .map(|c| dataset.covariate_index(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(dataset.n_subjects(), cols.len(), |i, j| {
        dataset.subject_records(i)[0].covariates[cols[j]]
    }))
}

struct Equations {
    score: DVector<f64>,
    jacobian: DMatrix<f64>,
    fisher: DMatrix<f64>,
}

fn equations(y: &[f64], w: &[f64], x: &DMatrix<f64>, link: Link, beta: &DVector<f64>) -> Option<Equations> {
    let p = x.ncols();
    let mut score = DVector::zeros(p);
    let mut jacobian = DMatrix::zeros(p, p);
    let mut fisher = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        let xi = x.row(i).transpose();
        let eta = xi.dot(beta);
        let (d1, d2) = link.derivatives(eta);
        let r = y[i] - link.inverse(eta);
        score.axpy(w[i] * d1 * r, &xi, 1.0);
        let outer = &xi * xi.transpose();
        fisher += &outer * (w[i] * d1 * d1);
        jacobian += outer * (w[i] * (d2 * r - d1 * d1));
    }
    score.iter().all(|v| v.is_finite()).then_some(Equations { score, jacobian, fisher })
}

fn solve_gee(y: &[f64], w: &[f64], covariates: &DMatrix<f64>, names: &[String], link: Link) -> Result<GeeFit> {
    let n = y.len();
    if covariates.nrows() != n || names.len() != covariates.ncols() {
        return Err(Error::InvalidArgument("design does not match the responses".into()));
    }
    let x = DMatrix::from_fn(n, covariates.ncols() + 1, |i, j| if j == 0 { 1.0 } else { covariates[(i, j - 1)] });
    let p = x.ncols();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for i in (0..n).filter(|&i| w[i] > 0.0) {
        let xi = x.row(i).transpose();
        gram += &xi * xi.transpose();
    }
    let (_, min_eig) = sym_inverse(&gram);
    if !(min_eig > 1e-10 * gram.diagonal().max().max(1.0)) {
        return Err(Error::SingularDesign);
    }

    let total_w: f64 = w.iter().sum();
    let mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total_w;
    let mut beta = DVector::<f64>::zeros(p);
    beta[0] = match link {
        Link::Identity => mean,
        _ => link.link(mean.clamp(1e-6, 1.0 - 1e-6)),
    };

    let norm = |e: &Equations| e.score.amax();
    let mut eq = equations(y, w, &x, link, &beta).ok_or(Error::NonFiniteLikelihood)?;
    let mut iterations = 0;
    while iterations < 100 && norm(&eq) > 1e-11 {
        iterations += 1;
        let newton = (-eq.jacobian.clone()).lu().solve(&eq.score);
        let fisher = eq.fisher.clone().lu().solve(&eq.score);
        let mut moved = false;
        for dir in [newton, fisher].into_iter().flatten() {
            let mut step = 1.0;
            for _ in 0..40 {
                let cand = &beta + &dir * step;
                if let Some(next) = equations(y, w, &x, link, &cand) {
                    if next.score.norm() < eq.score.norm() {
                        beta = cand;
                        eq = next;
                        moved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if moved {
                break;
            }
        }
        if !moved {
            break;
        }
    }
    let residual = norm(&eq);
    if residual >= 1e-9 {
        return Err(Error::NotConverged {
            iterations,
            gradient_norm: residual,
        });
    }

    let bread = spd_inverse(&eq.fisher).ok_or(Error::SingularDesign)?;
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in (0..n).filter(|&i| w[i] > 0.0) {
        let xi = x.row(i).transpose();
        let eta = xi.dot(&beta);
        let u = xi * (w[i] * link.derivatives(eta).0 * (y[i] - link.inverse(eta)));
        meat += &u * u.transpose();
    }
    let cov = &bread * meat * &bread;
    let mut all_names = vec!["(intercept)".to_string()];
    all_names.extend(names.iter().cloned());
    Ok(GeeFit {
        names: all_names,
        beta: beta.iter().copied().collect(),
        sandwich_covariance: (&cov + cov.transpose()) * 0.5,
        link,
        iterations,
        converged: true,
        residual,
        n,
    })
}

/// Solves `Σ ∂μ_i/∂β {V_i − μ_i} = 0` with `μ_i = g⁻¹(β₀ + x_iᵀβ)`.
///
/// `covariates` has one row per pseudo-value and no intercept column. The
/// sandwich variance treats pseudo-values as independent observations.
pub fn fit_gee(pv: &PseudoValueSet, covariates: &DMatrix<f64>, names: &[String], link: Link) -> Result<GeeFit> {
    let w = vec![1.0; pv.values.len()];
    solve_gee(&pv.values, &w, covariates, names, link)
}

struct Status {
    /// End of follow-up.
    exit: f64,
    absorbed: bool,
}

fn status(records: &[EpisodeRecord], dataset: &EpisodeDataset) -> Status {
    let last = records.last().expect("subjects have records");
    Status {
        exit: last.tstop,
        absorbed: matches!(last.end, EndMark::Transition(to) if dataset.state_space().is_absorbing(to)),
    }
}

/// State occupied at `t`, right-continuous in `t`.
fn state_at(records: &[EpisodeRecord], t: f64) -> usize {
    match records.iter().find(|r| r.tstart <= t && t < r.tstop) {
        Some(r) => r.from,
        None if t < records[0].tstart => records[0].from,
        None => records.last().expect("subjects have records").end_state(),
    }
}

/// Inverse-probability-of-censoring weights for status at `t0`.
///
/// Subject `i` is complete when it is followed up to `u_i = t0 ∧ T_i†`
/// (`T_i†` the absorption time) and then gets weight `1 / Ĝ(u_i−)`, with `Ĝ`
/// the Kaplan-Meier estimate of the censoring survival. Absorption counts as
/// censoring of the censoring time and, at tied times, happens first.
/// Incomplete subjects get weight 0.
pub fn ipcw_weights(dataset: &EpisodeDataset, t0: f64) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::NoCensoringInformation("no subjects".into()));
    }
    check_span(dataset, t0)?;
    let status: Vec<Status> = (0..dataset.n_subjects())
        .map(|i| status(dataset.subject_records(i), dataset))
        .collect();
    let mut censor_times: Vec<f64> = status.iter().filter(|s| !s.absorbed).map(|s| s.exit).collect();
    censor_times.sort_by(f64::total_cmp);
    censor_times.dedup();
    let mut g = Vec::with_capacity(censor_times.len());
    let mut surv = 1.0;
    for &c in &censor_times {
        let d = status.iter().filter(|s| !s.absorbed && s.exit == c).count() as f64;
        let y = status.iter().filter(|s| s.exit > c || (s.exit == c && !s.absorbed)).count() as f64;
        surv *= 1.0 - d / y;
        g.push(surv);
    }
    let g_left = |u: f64| {
        let i = censor_times.partition_point(|&c| c < u);
        if i == 0 {
            1.0
        } else {
            g[i - 1]
        }
    };
    status
        .iter()
        .map(|s| {
            let complete = s.exit >= t0 || (s.absorbed && s.exit <= t0);
            if !complete {
                return Ok(0.0);
            }
            let u = if s.absorbed { s.exit.min(t0) } else { t0 };
            let gu = g_left(u);
            if gu > 0.0 {
                Ok(1.0 / gu)
            } else {
                Err(Error::WeightUndefined(u))
            }
        })
        .collect()
}

/// Direct binomial regression of `I(Z_i(t0) = state)` on baseline
/// covariates, weighted by [`ipcw_weights`].
///
/// The sandwich variance ignores the uncertainty from estimating the
/// censoring distribution.
pub fn fit_direct_binomial(
    dataset: &EpisodeDataset,
    state: usize,
    t0: f64,
    covariates: &DMatrix<f64>,
    names: &[String],
    link: Link,
) -> Result<GeeFit> {
    dataset.state_space().check_state(state)?;
    let w = ipcw_weights(dataset, t0)?;
    let y: Vec<f64> = (0..dataset.n_subjects())
        .map(|i| (state_at(dataset.subject_records(i), t0) == state) as u8 as f64)
        .collect();
    solve_gee(&y, &w, covariates, names, link)
}
