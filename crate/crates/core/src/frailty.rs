//! Gamma-frailty illness-death model with piecewise-constant baselines.
//!
//! Conditional on a frailty `ω` with mean 1 and variance `θ`, the three
//! transitions `0 -> 1`, `0 -> 2` and `1 -> 2'` have intensities
//! `ω λ_kl(t) exp(xᵀβ_kl)` on a shared study clock. Integrating `ω` out gives
//! a subject contribution
//!
//! ```text
//! Σ log-hazards at observed events + Σ_{j<D} log(1 + jθ) − (1/θ + D) log(1 + θH)
//! ```
//!
//! with `D` observed events and `H` the total conditional cumulative hazard.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxreg::{coefficient_rows, CoefficientRow};
use crate::data::{EndMark, EpisodeDataset, Transition};
use crate::error::{Error, Result};
use crate::linalg::{normal_quantile, sym_inverse};
use crate::optim::{hessian_from_gradient, minimize_bfgs, newton_polish, BfgsOptions, Minimum};

/// Transition labels in parameter order.
pub const TRANSITIONS: [&str; 3] = ["0->1", "0->2", "1->2'"];

/// Observed data of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllnessDeathRecord {
    pub id: String,
    /// Relapse, death without relapse or censoring, whichever is first.
    pub w1: f64,
    /// Death or censoring after relapse; 0 without relapse.
    pub w2: f64,
    pub delta1: bool,
    pub delta2: bool,
    pub delta3: bool,
    pub covariates: Vec<f64>,
}

impl IllnessDeathRecord {
    fn events(&self) -> usize {
        self.delta1 as usize + self.delta2 as usize + self.delta3 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllnessDeathData {
    covariate_names: Vec<String>,
    records: Vec<IllnessDeathRecord>,
}

impl IllnessDeathData {
    pub fn new(covariate_names: Vec<String>, records: Vec<IllnessDeathRecord>) -> Result<Self> {
        for r in &records {
            let bad = |reason: &str| {
                Err(Error::InvalidRecord {
                    subject: r.id.clone(),
                    reason: reason.to_string(),
                })
            };
            if r.covariates.len() != covariate_names.len() {
                return bad("covariate count differs from the header");
            }
            if r.covariates.iter().any(|x| !x.is_finite()) {
                return bad("non-finite covariate");
            }
            if !(r.w1.is_finite() && r.w1 > 0.0 && r.w2.is_finite()) {
                return bad("w1 must be positive and times finite");
            }
            if r.delta1 && r.delta2 {
                return bad("delta1 and delta2 are both set");
            }
            if r.delta3 && !r.delta1 {
                return bad("delta3 requires delta1");
            }
            if r.delta1 && r.w2 <= r.w1 {
                return bad("w2 must exceed w1 after a relapse");
            }
            if !r.delta1 && r.w2 != 0.0 {
                return bad("w2 must be 0 without a relapse");
            }
        }
        Ok(IllnessDeathData {
            covariate_names,
            records,
        })
    }

    /// Converts illness-death episode data (states healthy, ill, dead,
    /// dead after illness) with entry at time 0. Covariates come from each
    /// subject's first record.
    pub fn from_episodes(dataset: &EpisodeDataset) -> Result<Self> {
        let space = dataset.state_space();
        let expected = [Transition::new(0, 1), Transition::new(0, 2), Transition::new(1, 3)];
        if space.n_states() != 4 || expected.iter().any(|t| !space.is_allowed(t.from, t.to)) || space.allowed().len() != 3 {
            return Err(Error::InvalidStateSpace("expected the four-state illness-death layout".into()));
        }
        let mut records = Vec::with_capacity(dataset.n_subjects());
        for (i, span) in dataset.subjects().iter().enumerate() {
            let recs = dataset.subject_records(i);
            let invalid = |reason: &str| Error::InvalidRecord {
                subject: span.id.clone(),
                reason: reason.to_string(),
            };
            let first = &recs[0];
            if first.tstart != 0.0 || first.from != 0 {
                return Err(invalid("must start in state 0 at time 0"));
            }
            let mut rec = IllnessDeathRecord {
                id: span.id.clone(),
                w1: first.tstop,
                w2: 0.0,
                delta1: first.end == EndMark::Transition(1),
                delta2: first.end == EndMark::Transition(2),
                delta3: false,
                covariates: first.covariates.clone(),
            };
            if rec.delta1 {
                let second = recs.get(1).ok_or_else(|| invalid("no follow-up after relapse"))?;
                rec.w2 = second.tstop;
                rec.delta3 = second.end == EndMark::Transition(3);
            }
            records.push(rec);
        }
        IllnessDeathData::new(dataset.covariate_names().to_vec(), records)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn records(&self) -> &[IllnessDeathRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subjects with a relapse, with death before relapse, and with death
    /// after relapse.
    pub fn event_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[0] += r.delta1 as usize;
            c[1] += r.delta2 as usize;
            c[2] += r.delta3 as usize;
        }
        c
    }

    fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }
}

/// Reads `id, w1, w2, delta1, delta2, delta3` followed by covariate columns.
pub fn read_illness_death(reader: impl Read) -> Result<IllnessDeathData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let fixed = ["id", "w1", "w2", "delta1", "delta2", "delta3"];
    let idx = fixed
        .iter()
        .map(|c| crate::data::io::column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|i| !idx.contains(i)).collect();
    let names = cov_cols.iter().map(|&i| headers[i].to_string()).collect();
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|_| Error::InvalidRecord {
                subject: row[idx[0]].to_string(),
                reason: format!("line {}: non-numeric value {:?}", line + 2, &row[i]),
            })
        };
        let flag = |i: usize| -> Result<bool> {
            match num(i)? {
                0.0 => Ok(false),
                1.0 => Ok(true),
                v => Err(Error::InvalidRecord {
                    subject: row[idx[0]].to_string(),
                    reason: format!("indicator must be 0 or 1, got {v}"),
                }),
            }
        };
        records.push(IllnessDeathRecord {
            id: row[idx[0]].to_string(),
            w1: num(idx[1])?,
            w2: num(idx[2])?,
            delta1: flag(idx[3])?,
            delta2: flag(idx[4])?,
            delta3: flag(idx[5])?,
            covariates: cov_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyFile);
    }
    IllnessDeathData::new(names, records)
}

pub fn load_illness_death(path: impl AsRef<Path>) -> Result<IllnessDeathData> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_illness_death(file)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrailtyTimescale {
    /// One study clock for all transitions; `1 -> 2'` is at risk on `(w1, w2]`.
    #[default]
    TotalTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrailtySpec {
    /// Band cutpoints per transition, in [`TRANSITIONS`] order.
    pub cutpoints: [Vec<f64>; 3],
    pub covariates: [Vec<String>; 3],
    #[serde(default)]
    pub timescale: FrailtyTimescale,
}

impl FrailtySpec {
    /// Same cutpoints and covariates for every transition.
    pub fn uniform(cutpoints: &[f64], covariates: &[&str]) -> Self {
        let c: Vec<String> = covariates.iter().map(|s| s.to_string()).collect();
        FrailtySpec {
            cutpoints: [cutpoints.to_vec(), cutpoints.to_vec(), cutpoints.to_vec()],
            covariates: [c.clone(), c.clone(), c],
            timescale: FrailtyTimescale::TotalTime,
        }
    }

    fn check(&self) -> Result<()> {
        for c in &self.cutpoints {
            if c.iter().any(|x| !(x.is_finite() && *x > 0.0)) || c.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument("cutpoints must be positive and strictly increasing".into()));
            }
        }
        Ok(())
    }

    fn n_bands(&self, m: usize) -> usize {
        self.cutpoints[m].len() + 1
    }
}

/// Model parameters; `theta = 0` is the model without frailty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrailtyParams {
    pub theta: f64,
    pub log_lambda: [Vec<f64>; 3],
    pub beta: [Vec<f64>; 3],
}

impl FrailtyParams {
    /// All log-intensities equal to `log_lambda`, coefficients zero.
    pub fn constant(spec: &FrailtySpec, theta: f64, log_lambda: f64) -> Self {
        FrailtyParams {
            theta,
            log_lambda: std::array::from_fn(|m| vec![log_lambda; spec.n_bands(m)]),
            beta: std::array::from_fn(|m| vec![0.0; spec.covariates[m].len()]),
        }
    }

    fn check(&self, spec: &FrailtySpec) -> Result<()> {
        for m in 0..3 {
            if self.log_lambda[m].len() != spec.n_bands(m) || self.beta[m].len() != spec.covariates[m].len() {
                return Err(Error::InvalidArgument("parameter dimensions do not match the spec".into()));
            }
        }
        let finite = self.log_lambda.iter().chain(&self.beta).flatten().all(|x| x.is_finite());
        if !finite || !(self.theta.is_finite() && self.theta >= 0.0) {
            return Err(Error::InvalidArgument("parameters must be finite with theta >= 0".into()));
        }
        Ok(())
    }

    /// `(λ, β)` in vector order, without `log θ`.
    fn rate_vector(&self) -> Vec<f64> {
        self.log_lambda.iter().chain(&self.beta).flatten().copied().collect()
    }

    fn from_rate_vector(spec: &FrailtySpec, theta: f64, v: &[f64]) -> Self {
        let mut it = v.iter().copied();
        let log_lambda = std::array::from_fn(|m| it.by_ref().take(spec.n_bands(m)).collect());
        let beta = std::array::from_fn(|m| it.by_ref().take(spec.covariates[m].len()).collect());
        FrailtyParams { theta, log_lambda, beta }
    }
}

/// Per-subject quantities that do not depend on the parameters.
struct Terms {
    exposure: [Vec<f64>; 3],
    event_band: [Option<usize>; 3],
    x: [Vec<f64>; 3],
    events: usize,
}

fn exposures(cuts: &[f64], a: f64, b: f64) -> Vec<f64> {
    let mut out = vec![0.0; cuts.len() + 1];
    let mut lo = 0.0;
    for (k, slot) in out.iter_mut().enumerate() {
        let hi = cuts.get(k).copied().unwrap_or(f64::INFINITY);
        *slot = (b.min(hi) - a.max(lo)).max(0.0);
        lo = hi;
    }
    out
}

fn band_of(cuts: &[f64], t: f64) -> usize {
    cuts.partition_point(|&c| c < t)
}

fn prepare(data: &IllnessDeathData, spec: &FrailtySpec) -> Result<Vec<Terms>> {
    spec.check()?;
    let cols: [Vec<usize>; 3] = [0, 1, 2].map(|m| {
        spec.covariates[m]
            .iter()
            .map(|c| data.covariate_index(c))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .try_into()
    .expect("three transitions");
    Ok(data
        .records
        .iter()
        .map(|r| {
            let c = &spec.cutpoints;
            let exposure = [
                exposures(&c[0], 0.0, r.w1),
                exposures(&c[1], 0.0, r.w1),
                if r.delta1 { exposures(&c[2], r.w1, r.w2) } else { vec![0.0; c[2].len() + 1] },
            ];
            let event_band = [
                r.delta1.then(|| band_of(&c[0], r.w1)),
                r.delta2.then(|| band_of(&c[1], r.w1)),
                r.delta3.then(|| band_of(&c[2], r.w2)),
            ];
            let x = std::array::from_fn(|m| cols[m].iter().map(|&j| r.covariates[j]).collect());
            Terms {
                exposure,
                event_band,
                x,
                events: r.events(),
            }
        })
        .collect())
}

/// Log-likelihood of one subject and its gradient in `(λ, β)` vector
/// order, plus the derivative in `log θ`.
fn contribution(t: &Terms, p: &FrailtyParams, offsets: &[usize; 6], grad: Option<&mut [f64]>) -> (f64, f64) {
    let theta = p.theta;
    let d = t.events as f64;
    let mut ll = 0.0;
    let mut h = 0.0;
    let mut hm = [0.0; 3];
    let mut scale = [0.0; 3];
    for m in 0..3 {
        let eta: f64 = t.x[m].iter().zip(&p.beta[m]).map(|(a, b)| a * b).sum();
        scale[m] = eta.exp();
        hm[m] = scale[m]
            * t.exposure[m]
                .iter()
                .zip(&p.log_lambda[m])
                .map(|(e, l)| if *e > 0.0 { e * l.exp() } else { 0.0 })
                .sum::<f64>();
        h += hm[m];
        if let Some(b) = t.event_band[m] {
            ll += p.log_lambda[m][b] + eta;
        }
    }
    let (c, dphi) = if theta > 0.0 {
        let log1p = (theta * h).ln_1p();
        for j in 1..t.events {
            ll += (j as f64 * theta).ln_1p();
        }
        ll -= (1.0 / theta + d) * log1p;
        let mut dphi: f64 = (1..t.events).map(|j| j as f64 * theta / (1.0 + j as f64 * theta)).sum();
        dphi += log1p / theta - h / (1.0 + theta * h) - d * theta * h / (1.0 + theta * h);
        ((1.0 + d * theta) / (1.0 + theta * h), dphi)
    } else {
        ll -= h;
        (1.0, 0.0)
    };
    if let Some(g) = grad {
        for m in 0..3 {
            for (b, (e, l)) in t.exposure[m].iter().zip(&p.log_lambda[m]).enumerate() {
                let event = (t.event_band[m] == Some(b)) as u8 as f64;
                let cum = if *e > 0.0 { scale[m] * e * l.exp() } else { 0.0 };
                g[offsets[m] + b] += event - c * cum;
            }
            let dm = t.event_band[m].is_some() as u8 as f64;
            for (j, xj) in t.x[m].iter().enumerate() {
                g[offsets[3 + m] + j] += xj * (dm - c * hm[m]);
            }
        }
    }
    (ll, dphi)
}

fn offsets(spec: &FrailtySpec) -> ([usize; 6], usize) {
    let sizes = [
        spec.n_bands(0),
        spec.n_bands(1),
        spec.n_bands(2),
        spec.covariates[0].len(),
        spec.covariates[1].len(),
        spec.covariates[2].len(),
    ];
    let mut off = [0; 6];
    let mut acc = 0;
    for k in 0..6 {
        off[k] = acc;
        acc += sizes[k];
    }
    (off, acc)
}

/// Total log-likelihood, gradient in `(λ, β)` order and `log θ` derivative.
fn evaluate(terms: &[Terms], spec: &FrailtySpec, p: &FrailtyParams) -> (f64, Vec<f64>, f64) {
    let (off, size) = offsets(spec);
    let parts: Vec<(f64, Vec<f64>, f64)> = terms
        .par_chunks(256)
        .map(|chunk| {
            let mut g = vec![0.0; size];
            let mut ll = 0.0;
            let mut dphi = 0.0;
            for t in chunk {
                let (l, d) = contribution(t, p, &off, Some(&mut g));
                ll += l;
                dphi += d;
            }
            (ll, g, dphi)
        })
        .collect();
    let mut ll = 0.0;
    let mut g = vec![0.0; size];
    let mut dphi = 0.0;
    for (l, gp, d) in parts {
        ll += l;
        dphi += d;
        for (a, b) in g.iter_mut().zip(gp) {
            *a += b;
        }
    }
    (ll, g, dphi)
}

/// Marginal log-likelihood with the frailty integrated out.
pub fn frailty_loglik(spec: &FrailtySpec, params: &FrailtyParams, data: &IllnessDeathData) -> Result<f64> {
    params.check(spec)?;
    let terms = prepare(data, spec)?;
    let ll = evaluate(&terms, spec, params).0;
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(Error::NonFiniteLikelihood)
    }
}

/// Log-likelihood and gradient ordered as `log θ`, log-intensities per
/// transition and band, then coefficients per transition. Requires `θ > 0`.
pub fn frailty_loglik_gradient(
    spec: &FrailtySpec,
    params: &FrailtyParams,
    data: &IllnessDeathData,
) -> Result<(f64, Vec<f64>)> {
    params.check(spec)?;
    if params.theta <= 0.0 {
        return Err(Error::InvalidArgument("theta must be positive".into()));
    }
    let terms = prepare(data, spec)?;
    let (ll, g, dphi) = evaluate(&terms, spec, params);
    if !ll.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }
    let mut out = vec![dphi];
    out.extend(g);
    Ok((ll, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrailtyFit {
    pub spec: FrailtySpec,
    pub params: FrailtyParams,
    /// Inverse observed information, ordered `log θ` (absent when θ = 0),
    /// log-intensities, coefficients.
    #[serde(with = "crate::linalg::rows")]
    pub covariance: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub theta: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub transition: String,
    pub band: usize,
    pub intensity: f64,
    pub lower: f64,
    pub upper: f64,
}

impl FrailtyFit {
    fn shift(&self) -> usize {
        (self.params.theta > 0.0) as usize
    }

    /// `θ` with a Wald interval formed on `log θ`.
    pub fn theta(&self, level: f64) -> Option<ThetaSummary> {
        if self.params.theta == 0.0 {
            return None;
        }
        let z = normal_quantile(level);
        let se = self.covariance[(0, 0)].sqrt();
        Some(ThetaSummary {
            theta: self.params.theta,
            lower: self.params.theta * (-z * se).exp(),
            upper: self.params.theta * (z * se).exp(),
        })
    }

    pub fn coefficients(&self, level: f64) -> Vec<(String, Vec<CoefficientRow>)> {
        let (off, _) = offsets(&self.spec);
        (0..3)
            .map(|m| {
                let p = self.spec.covariates[m].len();
                let idx: Vec<usize> = (0..p).map(|j| self.shift() + off[3 + m] + j).collect();
                let cov = DMatrix::from_fn(p, p, |a, b| self.covariance[(idx[a], idx[b])]);
                (
                    TRANSITIONS[m].to_string(),
                    coefficient_rows(&self.spec.covariates[m], &self.params.beta[m], &cov, level),
                )
            })
            .collect()
    }

    pub fn baselines(&self, level: f64) -> Vec<BaselineRow> {
        let (off, _) = offsets(&self.spec);
        let z = normal_quantile(level);
        let mut out = Vec::new();
        for m in 0..3 {
            for (b, &l) in self.params.log_lambda[m].iter().enumerate() {
                let i = self.shift() + off[m] + b;
                let se = self.covariance[(i, i)].sqrt();
                out.push(BaselineRow {
                    transition: TRANSITIONS[m].to_string(),
                    band: b,
                    intensity: l.exp(),
                    lower: (l - z * se).exp(),
                    upper: (l + z * se).exp(),
                });
            }
        }
        out
    }
}

fn finish(
    spec: &FrailtySpec,
    data: &IllnessDeathData,
    f: &mut impl crate::optim::Objective,
    min: Minimum,
    params: FrailtyParams,
    warnings: Vec<String>,
) -> Result<FrailtyFit> {
    if min.gradient_norm() >= 1e-6 {
        return Err(Error::NotConverged {
            iterations: min.iterations,
            gradient_norm: min.gradient_norm(),
        });
    }
    let hessian = hessian_from_gradient(f, &min.x, 1e-5).ok_or(Error::NonFiniteLikelihood)?;
    let (inv, min_eig) = sym_inverse(&hessian);
    let covariance = match inv {
        Some(c) if min_eig >= 1e-10 => c,
        _ => return Err(Error::NonIdentifiable { min_eigenvalue: min_eig }),
    };
    Ok(FrailtyFit {
        spec: spec.clone(),
        params,
        covariance,
        loglik: -min.value,
        converged: true,
        iterations: min.iterations,
        gradient_norm: min.gradient_norm(),
        n: data.len(),
        warnings,
    })
}

fn minimize(f: &mut impl crate::optim::Objective, x0: DVector<f64>) -> Result<Minimum> {
    let min = minimize_bfgs(f, x0, BfgsOptions::default()).ok_or(Error::NonFiniteLikelihood)?;
    Ok(newton_polish(f, min, 20, 1e-9))
}

/// Fits the model without frailty (`θ = 0`).
pub fn fit_without_frailty(data: &IllnessDeathData, spec: &FrailtySpec) -> Result<FrailtyFit> {
    let terms = prepare(data, spec)?;
    let init = crude_initial(data, spec, &terms)?;
    let mut objective = |v: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        if v.iter().any(|x| x.abs() > 700.0) {
            return None;
        }
        let p = FrailtyParams::from_rate_vector(spec, 0.0, v.as_slice());
        let (ll, g, _) = evaluate(&terms, spec, &p);
        ll.is_finite().then(|| (-ll, -DVector::from_vec(g)))
    };
    let min = minimize(&mut objective, DVector::from_vec(init.rate_vector()))?;
    let params = FrailtyParams::from_rate_vector(spec, 0.0, min.x.as_slice());
    finish(spec, data, &mut objective, min, params, Vec::new())
}

fn crude_initial(data: &IllnessDeathData, spec: &FrailtySpec, terms: &[Terms]) -> Result<FrailtyParams> {
    let counts = data.event_counts();
    let pairs = [(0, 1), (0, 2), (1, 3)];
    for m in 0..3 {
        if counts[m] == 0 {
            return Err(Error::NoEvents {
                from: pairs[m].0,
                to: pairs[m].1,
            });
        }
    }
    let mut p = FrailtyParams::constant(spec, 0.0, 0.0);
    for (m, &count) in counts.iter().enumerate() {
        let time: f64 = terms.iter().map(|t| t.exposure[m].iter().sum::<f64>()).sum();
        let rate = (count as f64 / time.max(1e-8)).ln();
        p.log_lambda[m].iter_mut().for_each(|l| *l = rate);
    }
    Ok(p)
}

/// Derivative of the log-likelihood in `θ` at `θ = 0`:
/// `Σ_i {D_i(D_i − 1)/2 − D_i H_i + H_i²/2}`.
pub fn theta_score_at_zero(spec: &FrailtySpec, params: &FrailtyParams, data: &IllnessDeathData) -> Result<f64> {
    let terms = prepare(data, spec)?;
    let (off, _) = offsets(spec);
    let zero = FrailtyParams { theta: 0.0, ..params.clone() };
    Ok(terms
        .iter()
        .map(|t| {
            // H from the no-frailty contribution: ll = events part − H
            let (ll, _) = contribution(t, &zero, &off, None);
            let logs: f64 = (0..3)
                .filter_map(|m| {
                    t.event_band[m].map(|b| {
                        zero.log_lambda[m][b] + t.x[m].iter().zip(&zero.beta[m]).map(|(a, b)| a * b).sum::<f64>()
                    })
                })
                .sum();
            let h = logs - ll;
            let d = t.events as f64;
            d * (d - 1.0) / 2.0 - d * h + h * h / 2.0
        })
        .sum())
}

/// Maximum marginal-likelihood fit over `(log θ, log λ, β)`.
///
/// Returns [`Error::ThetaBoundary`] with the no-frailty fit when the score in
/// `θ` at zero is not positive or the estimate falls below `1e-6`.
pub fn fit_frailty(data: &IllnessDeathData, spec: &FrailtySpec) -> Result<FrailtyFit> {
    let mut base = fit_without_frailty(data, spec)?;
    if !data.records.iter().any(|r| r.events() >= 2) {
        base.warnings
            .push("no subject has two observed events; the frailty variance is weakly identified".into());
    }
    let score = theta_score_at_zero(spec, &base.params, data)?;
    let boundary = |base: FrailtyFit| Error::ThetaBoundary {
        score_at_zero: score,
        fit_without_frailty: Box::new(base),
    };
    if score <= 0.0 {
        return Err(boundary(base));
    }
    let terms = prepare(data, spec)?;
    let mut objective = |v: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        if v[0].abs() > 30.0 || v.iter().skip(1).any(|x| x.abs() > 700.0) {
            return None;
        }
        let p = FrailtyParams::from_rate_vector(spec, v[0].exp(), &v.as_slice()[1..]);
        let (ll, g, dphi) = evaluate(&terms, spec, &p);
        if !ll.is_finite() {
            return None;
        }
        let mut grad = vec![-dphi];
        grad.extend(g.iter().map(|x| -x));
        Some((-ll, DVector::from_vec(grad)))
    };
    let mut x0 = vec![0.5f64.ln()];
    x0.extend(base.params.rate_vector());
    let min = minimize(&mut objective, DVector::from_vec(x0))?;
    let theta = min.x[0].exp();
    if theta < 1e-6 {
        return Err(boundary(base));
    }
    let params = FrailtyParams::from_rate_vector(spec, theta, &min.x.as_slice()[1..]);
    let warnings = base.warnings.clone();
    finish(spec, data, &mut objective, min, params, warnings)
}

/// Multiplier `α*` turning a marginal baseline intensity into the
/// conditional one under gamma frailty with variance `theta`.
///
/// `cumhaz` holds the marginal baseline cumulative intensities for `0 -> 1`,
/// `0 -> 2` and `1 -> 2'`; `transition` uses the illness-death indices
/// `(0,1)`, `(0,2)` and `(1,3)`.
pub fn conditional_hazard_from_marginal(
    cumhaz: [&dyn Fn(f64) -> f64; 3],
    beta: &[Vec<f64>; 3],
    theta: f64,
    t: f64,
    x: &[f64],
    transition: Transition,
) -> Result<f64> {
    if !(t >= 0.0) || !(theta >= 0.0) {
        return Err(Error::InvalidArgument("need t >= 0 and theta >= 0".into()));
    }
    let m = match (transition.from, transition.to) {
        (0, 1) => 0,
        (0, 2) => 1,
        (1, 3) => 2,
        _ => return Err(Error::InvalidTransition(format!("{}->{}", transition.from, transition.to))),
    };
    let risk = |k: usize| -> Result<f64> {
        if beta[k].len() != x.len() {
            return Err(Error::InvalidArgument("coefficient and covariate lengths differ".into()));
        }
        Ok(x.iter().zip(&beta[k]).map(|(a, b)| a * b).sum::<f64>().exp())
    };
    if m < 2 {
        let total = cumhaz[0](t) * risk(0)? + cumhaz[1](t) * risk(1)?;
        Ok(risk(m)? * (theta * total).exp())
    } else {
        let r = risk(2)?;
        Ok(r * (cumhaz[2](t) * r * theta / (1.0 + theta)).exp() / (1.0 + theta))
    }
}
