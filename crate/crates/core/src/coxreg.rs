//! Per-transition Cox regression.
//!
//! The intensity of `k -> l` is modeled as `λ_kl0(t) exp(xᵀβ_kl)` and each
//! transition is fitted separately by maximizing its partial likelihood over
//! the records in state `k`. Tied event times use the Efron or Breslow
//! approximation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{EndMark, EpisodeDataset, StateSpace, Transition};
use crate::error::{Error, Result};
use crate::linalg::{normal_quantile, spd_inverse, sym_inverse, wald_p};
use crate::nonparam::{aalen_johansen_from_cumhaz, MatrixPath, StepFunction};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

/// Time axis of the baseline intensity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timescale {
    /// Time since the origin (Markov).
    #[default]
    TotalTime,
    /// Time since entry into the origin state (semi-Markov). The first
    /// sojourn is entered at time 0, so delayed entry becomes left truncation.
    ClockReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxSpec {
    pub transition: Transition,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub ties: Ties,
    #[serde(default)]
    pub timescale: Timescale,
    /// Also compute the robust sandwich covariance (clustered on subject).
    #[serde(default)]
    pub robust: bool,
}

impl CoxSpec {
    pub fn new(transition: Transition, covariates: &[&str]) -> Self {
        CoxSpec {
            transition,
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            ties: Ties::Efron,
            timescale: Timescale::TotalTime,
            robust: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub transition: Transition,
    pub covariate_names: Vec<String>,
    pub ties: Ties,
    pub timescale: Timescale,
    pub beta: Vec<f64>,
    /// Inverse observed information at `beta`.
    #[serde(with = "crate::linalg::rows")]
    pub covariance: DMatrix<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_rows")]
    pub robust_covariance: Option<DMatrix<f64>>,
    pub loglik: f64,
    pub loglik_null: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_events: usize,
    /// Breslow estimate of the cumulative baseline intensity at `x = 0`.
    pub baseline: StepFunction,
}

mod opt_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(crate::linalg::to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(|r| crate::linalg::from_rows(&r).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// One row of a coefficient table, with a Wald test and hazard-ratio interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub hazard_ratio: f64,
    pub hr_lower: f64,
    pub hr_upper: f64,
}

pub(crate) fn coefficient_rows(names: &[String], beta: &[f64], cov: &DMatrix<f64>, level: f64) -> Vec<CoefficientRow> {
    let q = normal_quantile(level);
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = cov[(j, j)].sqrt();
            let z = beta[j] / se;
            CoefficientRow {
                name: name.clone(),
                estimate: beta[j],
                se,
                z,
                p_value: wald_p(z),
                hazard_ratio: beta[j].exp(),
                hr_lower: (beta[j] - q * se).exp(),
                hr_upper: (beta[j] + q * se).exp(),
            }
        })
        .collect()
}

impl CoxFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|j| self.covariance[(j, j)].sqrt()).collect()
    }

    /// Model-based coefficient table at confidence `level`.
    pub fn coefficients(&self, level: f64) -> Vec<CoefficientRow> {
        coefficient_rows(&self.covariate_names, &self.beta, &self.covariance, level)
    }
}

/// Intervals at risk for one transition.
struct CoxData {
    start: Vec<f64>,
    event: Vec<bool>,
    /// Raw covariates, row per interval.
    x: DMatrix<f64>,
    center: DVector<f64>,
    cluster: Vec<usize>,
    /// Distinct event times with the indices of intervals at risk and of
    /// intervals with an event there.
    risk: Vec<(f64, Vec<usize>, Vec<usize>)>,
}

impl CoxData {
    fn new(dataset: &EpisodeDataset, spec: &CoxSpec) -> Result<Self> {
        let tr = spec.transition;
        dataset.state_space().check_transition(tr)?;
        let cols = spec
            .covariates
            .iter()
            .map(|c| dataset.covariate_index(c))
            .collect::<Result<Vec<_>>>()?;
        let (mut start, mut stop, mut event, mut rows, mut cluster) = (vec![], vec![], vec![], vec![], vec![]);
        for (si, span) in dataset.subjects().iter().enumerate() {
            let recs = &dataset.records()[span.records.clone()];
            let mut entry = 0.0;
            for (i, r) in recs.iter().enumerate() {
                if i > 0 {
                    let prev = &recs[i - 1];
                    let continues = prev.end == EndMark::Censored && prev.from == r.from && prev.tstop == r.tstart;
                    if !continues {
                        entry = r.tstart;
                    }
                }
                if r.from != tr.from {
                    continue;
                }
                let shift = match spec.timescale {
                    Timescale::TotalTime => 0.0,
                    Timescale::ClockReset => entry,
                };
                start.push(r.tstart - shift);
                stop.push(r.tstop - shift);
                event.push(r.end == EndMark::Transition(tr.to));
                rows.push(cols.iter().map(|&c| r.covariates[c]).collect::<Vec<f64>>());
                cluster.push(si);
            }
        }
        let p = cols.len();
        let n = start.len();
        if !event.iter().any(|&e| e) {
            return Err(Error::NoEvents { from: tr.from, to: tr.to });
        }
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        for j in 0..p {
            let c = x.column(j);
            if c.max() == c.min() {
                return Err(Error::DegenerateCovariate(spec.covariates[j].clone()));
            }
        }
        let center = DVector::from_fn(p, |j, _| x.column(j).mean());

        let mut times: Vec<f64> = (0..n).filter(|&i| event[i]).map(|i| stop[i]).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let risk = times
            .iter()
            .map(|&t| {
                let at_risk: Vec<usize> = (0..n).filter(|&i| start[i] < t && t <= stop[i]).collect();
                let events: Vec<usize> = at_risk.iter().copied().filter(|&i| event[i] && stop[i] == t).collect();
                (t, at_risk, events)
            })
            .collect();
        Ok(CoxData {
            start,
            event,
            x,
            center,
            cluster,
            risk,
        })
    }

    fn p(&self) -> usize {
        self.x.ncols()
    }

    fn centered_row(&self, i: usize) -> DVector<f64> {
        DVector::from_fn(self.p(), |j, _| self.x[(i, j)] - self.center[j])
    }

    /// Log partial likelihood, score and observed information.
    fn evaluate(&self, beta: &DVector<f64>, ties: Ties) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        let n = self.start.len();
        let xc: Vec<DVector<f64>> = (0..n).map(|i| self.centered_row(i)).collect();
        let eta: Vec<f64> = xc.iter().map(|x| x.dot(beta)).collect();
        let w: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let mut ll = 0.0;
        let mut score = DVector::<f64>::zeros(p);
        let mut info = DMatrix::<f64>::zeros(p, p);
        for (_, at_risk, events) in &self.risk {
            let (mut s0, mut s1, mut s2) = (0.0, DVector::<f64>::zeros(p), DMatrix::<f64>::zeros(p, p));
            for &i in at_risk {
                s0 += w[i];
                s1.axpy(w[i], &xc[i], 1.0);
                s2.ger(w[i], &xc[i], &xc[i], 1.0);
            }
            let (mut d0, mut d1, mut d2) = (0.0, DVector::<f64>::zeros(p), DMatrix::<f64>::zeros(p, p));
            for &i in events {
                ll += eta[i];
                score += &xc[i];
                d0 += w[i];
                d1.axpy(w[i], &xc[i], 1.0);
                d2.ger(w[i], &xc[i], &xc[i], 1.0);
            }
            let d = events.len() as f64;
            for j in 0..events.len() {
                let f = match ties {
                    Ties::Efron => j as f64 / d,
                    Ties::Breslow => 0.0,
                };
                let denom = s0 - f * d0;
                let mean = (&s1 - &d1 * f) / denom;
                ll -= denom.ln();
                score -= &mean;
                info += (&s2 - &d2 * f) / denom - &mean * mean.transpose();
            }
        }
        (ll, score, info)
    }

    /// Breslow jumps `d / Σ exp(xᵀβ)` with uncentered covariates.
    fn baseline(&self, beta: &DVector<f64>) -> StepFunction {
        let w: Vec<f64> = (0..self.start.len())
            .map(|i| self.x.row(i).transpose().dot(beta).exp())
            .collect();
        let (mut cum, mut var) = (0.0, 0.0);
        let mut out = StepFunction {
            times: Vec::with_capacity(self.risk.len()),
            values: Vec::with_capacity(self.risk.len()),
            variances: Some(Vec::with_capacity(self.risk.len())),
        };
        for (t, at_risk, events) in &self.risk {
            let s0: f64 = at_risk.iter().map(|&i| w[i]).sum();
            let d = events.len() as f64;
            cum += d / s0;
            var += d / (s0 * s0);
            out.times.push(*t);
            out.values.push(cum);
            out.variances.as_mut().expect("set above").push(var);
        }
        out
    }

    /// Sandwich covariance from subject-aggregated score residuals.
    fn robust(&self, beta: &DVector<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.p();
        let n = self.start.len();
        let xc: Vec<DVector<f64>> = (0..n).map(|i| self.centered_row(i)).collect();
        let w: Vec<f64> = xc.iter().map(|x| x.dot(beta).exp()).collect();
        let mut resid: Vec<DVector<f64>> = vec![DVector::zeros(p); n];
        for (_, at_risk, events) in &self.risk {
            let mut s0 = 0.0;
            let mut s1 = DVector::<f64>::zeros(p);
            for &i in at_risk {
                s0 += w[i];
                s1.axpy(w[i], &xc[i], 1.0);
            }
            let mean = s1 / s0;
            let dlambda = events.len() as f64 / s0;
            for &i in events {
                resid[i] += &xc[i] - &mean;
            }
            for &i in at_risk {
                resid[i] -= (&xc[i] - &mean) * (w[i] * dlambda);
            }
        }
        let mut by_cluster: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
        for (i, r) in resid.into_iter().enumerate() {
            *by_cluster.entry(self.cluster[i]).or_insert_with(|| DVector::zeros(p)) += r;
        }
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for u in by_cluster.values() {
            meat.ger(1.0, u, u, 1.0);
        }
        cov * meat * cov
    }
}

/// Partial-likelihood score at `beta`, exposed for gradient checks.
pub fn partial_loglik(dataset: &EpisodeDataset, spec: &CoxSpec, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let data = CoxData::new(dataset, spec)?;
    let (ll, score, _) = data.evaluate(&DVector::from_column_slice(beta), spec.ties);
    Ok((ll, score.iter().copied().collect()))
}

const MAX_ITER: usize = 100;
const DIVERGENCE: f64 = 50.0;

/// Newton-Raphson fit with step-halving.
///
/// Converges when the score max-norm drops below 1e-9 or the relative
/// change in log-likelihood below 1e-10.
pub fn fit_cox(dataset: &EpisodeDataset, spec: &CoxSpec) -> Result<CoxFit> {
    let data = CoxData::new(dataset, spec)?;
    let p = data.p();
    let mut beta = DVector::<f64>::zeros(p);
    let (ll0, mut score, mut info) = data.evaluate(&beta, spec.ties);
    let mut ll = ll0;
    let mut iterations = 0;
    let mut converged = p == 0;
    while !converged && iterations < MAX_ITER {
        if score.amax() < 1e-9 {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&score),
            None => match sym_inverse(&info).0 {
                Some(inv) => inv * &score,
                None => score.clone(),
            },
        };
        let mut scale = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let eval = data.evaluate(&cand, spec.ties);
            // near the maximum the log-likelihood change is below its rounding
            // error, so a smaller score also counts as progress
            let flat = eval.0 >= ll - 1e-12 * ll.abs().max(1.0) && eval.1.amax() < score.amax();
            if eval.0.is_finite() && (eval.0 >= ll || flat) {
                next = Some((cand, eval));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, (ll_new, s_new, i_new))) = next else {
            // no ascent left within rounding of the log-likelihood
            converged = score.amax() < 1e-6;
            break;
        };
        beta = cand;
        ll = ll_new;
        score = s_new;
        info = i_new;
        if beta.amax() > DIVERGENCE {
            return Err(Error::MonotoneLikelihood {
                max_abs_beta: beta.amax(),
            });
        }
        if score.amax() < 1e-9 {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            gradient_norm: score.amax(),
        });
    }
    // A diverging coefficient makes score and information vanish together,
    // so the convergence tests pass while the Newton step stays large.
    if p > 0 {
        let diverging = match info.clone().cholesky() {
            Some(c) => {
                let delta = c.solve(&score);
                delta
                    .iter()
                    .zip(beta.iter())
                    .any(|(d, b)| d.abs() > 1e-4 * b.abs().max(1.0))
            }
            None => beta.amax() > 10.0,
        };
        if diverging {
            return Err(Error::MonotoneLikelihood {
                max_abs_beta: beta.amax(),
            });
        }
    }
    let covariance = if p == 0 {
        DMatrix::zeros(0, 0)
    } else {
        spd_inverse(&info).ok_or(Error::NonIdentifiable {
            min_eigenvalue: sym_inverse(&info).1,
        })?
    };
    let robust_covariance = spec.robust.then(|| data.robust(&beta, &covariance));
    let n_events = data.event.iter().filter(|&&e| e).count();
    Ok(CoxFit {
        transition: spec.transition,
        covariate_names: spec.covariates.clone(),
        ties: spec.ties,
        timescale: spec.timescale,
        beta: beta.iter().copied().collect(),
        covariance,
        robust_covariance,
        loglik: ll,
        loglik_null: ll0,
        iterations,
        converged,
        n_events,
        baseline: data.baseline(&beta),
    })
}

/// Breslow cumulative baseline intensity at `x = 0` for the fitted
/// coefficients.
pub fn baseline_cumhaz(fit: &CoxFit, dataset: &EpisodeDataset, spec: &CoxSpec) -> Result<StepFunction> {
    if !fit.converged {
        return Err(Error::NotConverged {
            iterations: fit.iterations,
            gradient_norm: f64::NAN,
        });
    }
    let data = CoxData::new(dataset, spec)?;
    Ok(data.baseline(&DVector::from_column_slice(&fit.beta)))
}

/// Transition probabilities for one covariate profile, by product
/// integration of `exp(xᵀβ_kl) dΛ_kl0`. Transitions without a fit have
/// zero intensity. `profile` maps covariate names to values.
pub fn predict_matrix(
    space: &StateSpace,
    fits: &[CoxFit],
    profile: &BTreeMap<String, f64>,
    s: f64,
    grid: &[f64],
) -> Result<MatrixPath> {
    let mut hazards: Vec<(Transition, StepFunction)> = Vec::with_capacity(fits.len());
    for fit in fits {
        if fit.timescale == Timescale::ClockReset {
            return Err(Error::MixedTimescale);
        }
        if hazards.iter().any(|(t, _)| *t == fit.transition) {
            return Err(Error::InvalidArgument(format!("two fits for transition {}", fit.transition)));
        }
        let mut eta = 0.0;
        for (name, b) in fit.covariate_names.iter().zip(&fit.beta) {
            let x = profile.get(name).ok_or_else(|| Error::UnknownCovariate(name.clone()))?;
            eta += b * x;
        }
        let scale = eta.exp();
        let scaled = StepFunction {
            times: fit.baseline.times.clone(),
            values: fit.baseline.values.iter().map(|v| v * scale).collect(),
            variances: None,
        };
        hazards.push((fit.transition, scaled));
    }
    aalen_johansen_from_cumhaz(space, &hazards, s, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EpisodeRecord;
    use crate::nonparam::{aalen_johansen, nelson_aalen};

    fn survival(rows: &[(f64, bool, f64)]) -> EpisodeDataset {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, &(t, e, x))| EpisodeRecord {
                subject: format!("s{i}"),
                tstart: 0.0,
                tstop: t,
                from: 0,
                end: if e { EndMark::Transition(1) } else { EndMark::Censored },
                covariates: vec![x],
            })
            .collect();
        EpisodeDataset::new(StateSpace::two_state(), vec!["x".into()], records).unwrap()
    }

    fn four_subjects() -> EpisodeDataset {
        survival(&[(1.0, true, 1.0), (2.0, true, 0.0), (3.0, true, 1.0), (4.0, true, 0.0)])
    }

    /// Hand-written partial likelihood of the four-subject set:
    /// risk sets {1,0,1,0}, {0,1,0}, {1,0}, {0}.
    fn four_subject_loglik(b: f64) -> f64 {
        let e = b.exp();
        b - (2.0 * e + 2.0).ln() - (e + 2.0).ln() + b - (e + 1.0).ln()
    }

    fn four_subject_score(b: f64) -> f64 {
        let e = b.exp();
        2.0 - 2.0 * e / (2.0 * e + 2.0) - e / (e + 2.0) - e / (e + 1.0)
    }

    #[test]
    fn matches_bisection_oracle() {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if four_subject_score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let fit = fit_cox(&four_subjects(), &CoxSpec::new(Transition::new(0, 1), &["x"])).unwrap();
        assert!((fit.beta[0] - root).abs() < 1e-9, "{} vs {root}", fit.beta[0]);
        assert!((fit.loglik - four_subject_loglik(root)).abs() < 1e-10);
        assert!((fit.loglik_null - four_subject_loglik(0.0)).abs() < 1e-12);
    }

    #[test]
    fn baseline_matches_hand_formula() {
        let d = four_subjects();
        let spec = CoxSpec::new(Transition::new(0, 1), &["x"]);
        let fit = fit_cox(&d, &spec).unwrap();
        let e = fit.beta[0].exp();
        let jumps = [1.0 / (2.0 * e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 1.0), 1.0];
        let mut cum = 0.0;
        for (i, j) in jumps.iter().enumerate() {
            cum += j;
            assert!((fit.baseline.values[i] - cum).abs() < 1e-12);
        }
        assert_eq!(baseline_cumhaz(&fit, &d, &spec).unwrap(), fit.baseline);
    }

    #[test]
    fn no_covariates_baseline_is_nelson_aalen() {
        let d = survival(&[(1.0, true, 0.0), (2.0, false, 1.0), (2.0, true, 0.0), (2.0, true, 1.0), (5.0, true, 0.0)]);
        let fit = fit_cox(&d, &CoxSpec::new(Transition::new(0, 1), &[])).unwrap();
        let na = nelson_aalen(&d, Transition::new(0, 1)).unwrap();
        assert_eq!(fit.baseline.times, na.times);
        for (a, b) in fit.baseline.values.iter().zip(&na.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_and_missing_events() {
        let d = survival(&[(1.0, true, 1.0), (2.0, false, 1.0)]);
        assert!(matches!(
            fit_cox(&d, &CoxSpec::new(Transition::new(0, 1), &["x"])),
            Err(Error::DegenerateCovariate(_))
        ));
        let d = survival(&[(1.0, false, 1.0), (2.0, false, 0.0)]);
        assert!(matches!(
            fit_cox(&d, &CoxSpec::new(Transition::new(0, 1), &["x"])),
            Err(Error::NoEvents { .. })
        ));
    }

    #[test]
    fn monotone_likelihood_detected() {
        // x = 1 always fails first
        let d = survival(&[(1.0, true, 1.0), (2.0, true, 1.0), (3.0, true, 0.0), (4.0, false, 0.0)]);
        assert!(matches!(
            fit_cox(&d, &CoxSpec::new(Transition::new(0, 1), &["x"])),
            Err(Error::MonotoneLikelihood { .. })
        ));
    }

    #[test]
    fn ties_coherence_without_ties() {
        let d = survival(&[(1.0, true, 0.3), (2.0, true, 1.1), (2.5, false, -0.4), (3.0, true, 0.9), (4.0, true, -1.0)]);
        let mut spec = CoxSpec::new(Transition::new(0, 1), &["x"]);
        let efron = fit_cox(&d, &spec).unwrap();
        spec.ties = Ties::Breslow;
        let breslow = fit_cox(&d, &spec).unwrap();
        assert!((efron.beta[0] - breslow.beta[0]).abs() < 1e-12);
        assert!((efron.loglik - breslow.loglik).abs() < 1e-12);
    }

    #[test]
    fn efron_differs_from_breslow_with_ties() {
        let d = survival(&[(1.0, true, 0.0), (1.0, true, 1.0), (2.0, true, 1.0), (3.0, true, 0.0), (3.0, false, 1.0)]);
        let mut spec = CoxSpec::new(Transition::new(0, 1), &["x"]);
        let (ll_e, _) = partial_loglik(&d, &spec, &[0.5]).unwrap();
        spec.ties = Ties::Breslow;
        let (ll_b, _) = partial_loglik(&d, &spec, &[0.5]).unwrap();
        // time 1: risk {0,1,1,0,1}; Efron halves the tied pair's weight
        let e = 0.5f64.exp();
        let s0 = 2.0 + 3.0 * e;
        let efron1 = 0.5 - s0.ln() - (s0 - 0.5 * (1.0 + e)).ln();
        let breslow1 = 0.5 - 2.0 * s0.ln();
        assert!(((ll_e - ll_b) - (efron1 - breslow1)).abs() < 1e-12);
    }

    #[test]
    fn predict_two_state_hand_product() {
        let d = survival(&[(1.0, true, 1.0), (2.0, true, 0.0), (3.0, false, 1.0), (4.0, true, 1.0), (5.0, true, 0.0)]);
        let fit = fit_cox(&d, &CoxSpec::new(Transition::new(0, 1), &["x"])).unwrap();
        let profile = BTreeMap::from([("x".to_string(), 1.0)]);
        let path = predict_matrix(&StateSpace::two_state(), std::slice::from_ref(&fit), &profile, 0.0, &[5.0]).unwrap();
        let e = fit.beta[0].exp();
        let hand: f64 = fit.baseline.jumps().map(|(_, a)| 1.0 - e * a).product();
        assert!((path.matrices[0][(0, 0)] - hand).abs() < 1e-12);

        let zero = BTreeMap::from([("x".to_string(), 0.0)]);
        let p0 = predict_matrix(&StateSpace::two_state(), std::slice::from_ref(&fit), &zero, 0.0, &[5.0]).unwrap();
        let base = aalen_johansen_from_cumhaz(
            &StateSpace::two_state(),
            &[(Transition::new(0, 1), fit.baseline.clone())],
            0.0,
            &[5.0],
        )
        .unwrap();
        assert_eq!(p0.matrices, base.matrices);

        let identity = predict_matrix(&StateSpace::two_state(), &[], &zero, 0.0, &[1.0, 2.0]).unwrap();
        assert!(identity.matrices.iter().all(|m| *m == DMatrix::identity(2, 2)));

        let mut reset = fit;
        reset.timescale = Timescale::ClockReset;
        assert!(matches!(
            predict_matrix(&StateSpace::two_state(), &[reset], &zero, 0.0, &[1.0]),
            Err(Error::MixedTimescale)
        ));
        let _ = aalen_johansen(&d, 0.0, &[1.0]).unwrap();
    }

    #[test]
    fn clock_reset_reindexes_sojourns() {
        let space = StateSpace::illness_death(["h", "i", "d", "d2"]);
        let rec = |id: &str, a: f64, b: f64, from: usize, end| EpisodeRecord {
            subject: id.into(),
            tstart: a,
            tstop: b,
            from,
            end,
            covariates: vec![],
        };
        let d = EpisodeDataset::new(
            space,
            vec![],
            vec![
                rec("a", 0.0, 1.0, 0, EndMark::Transition(1)),
                rec("a", 1.0, 1.5, 1, EndMark::Transition(3)),
                rec("b", 0.0, 3.0, 0, EndMark::Transition(1)),
                rec("b", 3.0, 4.0, 1, EndMark::Censored),
            ],
        )
        .unwrap();
        let mut spec = CoxSpec::new(Transition::new(1, 3), &[]);
        spec.timescale = Timescale::ClockReset;
        let fit = fit_cox(&d, &spec).unwrap();
        // sojourns (0, 0.5] with event and (0, 1] censored: both at risk at 0.5
        assert_eq!(fit.baseline.times, vec![0.5]);
        assert_eq!(fit.baseline.values, vec![0.5]);
        spec.timescale = Timescale::TotalTime;
        let total = fit_cox(&d, &spec).unwrap();
        assert_eq!(total.baseline.values, vec![1.0]);
    }

    #[test]
    fn robust_covariance_is_symmetric() {
        let d = survival(&[(1.0, true, 0.3), (2.0, true, 1.1), (2.5, false, -0.4), (3.0, true, 0.9), (4.0, true, -1.0), (4.5, true, 0.2)]);
        let mut spec = CoxSpec::new(Transition::new(0, 1), &["x"]);
        spec.robust = true;
        let fit = fit_cox(&d, &spec).unwrap();
        let r = fit.robust_covariance.clone().unwrap();
        assert!(r[(0, 0)] > 0.0);
        let json = serde_json::to_string(&fit.coefficients(0.95)).unwrap();
        assert!(json.contains("hazard_ratio"));
    }
}
