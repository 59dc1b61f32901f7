//! Continuous-time Markov models for panel data.
//!
//! Intensities are piecewise constant between cutpoints and scaled by
//! `exp(xᵀβ)`, so within band `b` the generator is `Q_b(x)` and the
//! transition matrix over an interval is the time-ordered product of
//! `exp(Q_b(x)·Δ)` over the bands it crosses. The likelihood multiplies
//! `P_{z(r-1), z(r)}(a_{r-1}, a_r | x)` over consecutive visits.
//!
//! The gradient is analytic: the derivative of each exponential comes from
//! its Fréchet derivative along the unit generator of one transition.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxreg::{coefficient_rows, CoefficientRow};
use crate::data::{PanelDataset, StateSpace, Transition};
use crate::error::{Error, Result};
use crate::expm::{expm, expm_frechet};
use crate::linalg::{normal_quantile, sym_inverse};
use crate::optim::{hessian_from_gradient, minimize_bfgs, newton_polish, BfgsOptions, Minimum};

/// How starting values are chosen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// Observed `k -> l` pair counts over the time spent in pairs starting
    /// in `k`, in every band; coefficients start at 0.
    #[default]
    Automatic,
    /// Log-intensities in `[transition][band]` order.
    LogLambda(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub cutpoints: Vec<f64>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Transitions with a free intensity; defaults to all allowed ones.
    #[serde(default)]
    pub transitions: Option<Vec<Transition>>,
    #[serde(default)]
    pub initialization: Initialization,
}

/// Transition structure and band layout shared by parameters and fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelModel {
    pub labels: Vec<String>,
    pub transitions: Vec<Transition>,
    pub cutpoints: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl PanelModel {
    pub fn new(
        space: &StateSpace,
        transitions: Vec<Transition>,
        cutpoints: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if cutpoints.iter().any(|c| !(c.is_finite() && *c > 0.0)) || cutpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("cutpoints must be positive and strictly increasing".into()));
        }
        for &tr in &transitions {
            space.check_transition(tr)?;
        }
        let mut sorted = transitions.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != transitions.len() {
            return Err(Error::InvalidArgument("duplicate transition".into()));
        }
        Ok(PanelModel {
            labels: space.labels().to_vec(),
            transitions,
            cutpoints,
            covariate_names,
        })
    }

    pub fn n_states(&self) -> usize {
        self.labels.len()
    }

    pub fn n_bands(&self) -> usize {
        self.cutpoints.len() + 1
    }

    /// Band containing `t`; band `b` covers `(c_{b-1}, c_b]`.
    pub fn band_of(&self, t: f64) -> usize {
        self.cutpoints.partition_point(|&c| c < t)
    }

    fn n_params(&self) -> usize {
        self.transitions.len() * (self.n_bands() + self.covariate_names.len())
    }

    /// `(band, start, end)` pieces of `(s, t]`.
    fn segments(&self, s: f64, t: f64) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        let mut a = s;
        for (b, &c) in self.cutpoints.iter().enumerate() {
            if c <= a {
                continue;
            }
            if c >= t {
                out.push((b, a, t));
                return out;
            }
            out.push((b, a, c));
            a = c;
        }
        out.push((self.n_bands() - 1, a, t));
        out
    }

    fn band_label(&self, b: usize) -> String {
        let lo = if b == 0 { "0".to_string() } else { self.cutpoints[b - 1].to_string() };
        let hi = self.cutpoints.get(b).map_or("inf".to_string(), |c| c.to_string());
        format!("[{lo},{hi})")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelParams {
    /// `[transition × band]` log baseline intensities.
    #[serde(with = "crate::linalg::rows")]
    pub log_lambda: DMatrix<f64>,
    /// `[transition × covariate]` log hazard ratios.
    #[serde(with = "crate::linalg::rows")]
    pub beta: DMatrix<f64>,
}

impl PanelParams {
    pub fn zeros(model: &PanelModel) -> Self {
        PanelParams {
            log_lambda: DMatrix::zeros(model.transitions.len(), model.n_bands()),
            beta: DMatrix::zeros(model.transitions.len(), model.covariate_names.len()),
        }
    }

    fn to_vector(&self) -> DVector<f64> {
        let mut v: Vec<f64> = Vec::with_capacity(self.log_lambda.len() + self.beta.len());
        for m in [&self.log_lambda, &self.beta] {
            for r in m.row_iter() {
                v.extend(r.iter());
            }
        }
        DVector::from_vec(v)
    }

    fn from_vector(model: &PanelModel, v: &DVector<f64>) -> Self {
        let (nt, nb, p) = (model.transitions.len(), model.n_bands(), model.covariate_names.len());
        PanelParams {
            log_lambda: DMatrix::from_fn(nt, nb, |m, b| v[m * nb + b]),
            beta: DMatrix::from_fn(nt, p, |m, j| v[nt * nb + m * p + j]),
        }
    }

    fn check(&self, model: &PanelModel) -> Result<()> {
        let (nt, nb, p) = (model.transitions.len(), model.n_bands(), model.covariate_names.len());
        if self.log_lambda.shape() != (nt, nb) || self.beta.shape() != (nt, p) {
            return Err(Error::InvalidArgument("parameter dimensions do not match the model".into()));
        }
        if self.beta.iter().any(|x| !x.is_finite()) || self.log_lambda.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(())
    }
}

fn intensities(model: &PanelModel, params: &PanelParams, x: &[f64], band: usize) -> Vec<f64> {
    (0..model.transitions.len())
        .map(|m| {
            let eta: f64 = x.iter().enumerate().map(|(j, xj)| params.beta[(m, j)] * xj).sum();
            (params.log_lambda[(m, band)] + eta).exp()
        })
        .collect()
}

/// Generator for covariates `x` in band `band`. Disallowed entries and
/// absorbing rows are zero.
pub fn build_generator(model: &PanelModel, params: &PanelParams, x: &[f64], band: usize) -> DMatrix<f64> {
    let n = model.n_states();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for (tr, rate) in model.transitions.iter().zip(intensities(model, params, x, band)) {
        q[(tr.from, tr.to)] += rate;
        q[(tr.from, tr.from)] -= rate;
    }
    q
}

/// `P(s, t | x)` as the ordered product over the bands crossing `(s, t]`.
pub fn transition_probability(
    model: &PanelModel,
    params: &PanelParams,
    x: &[f64],
    s: f64,
    t: f64,
) -> Result<DMatrix<f64>> {
    params.check(model)?;
    if !(s <= t) {
        return Err(Error::InvalidArgument(format!("need s <= t, got s = {s}, t = {t}")));
    }
    let n = model.n_states();
    let mut p = DMatrix::<f64>::identity(n, n);
    if s == t {
        return Ok(p);
    }
    for (band, a, b) in model.segments(s, t) {
        let q = build_generator(model, params, x, band);
        p *= expm(&(q * (b - a)));
    }
    Ok(p)
}

struct PairEval {
    log_p: f64,
    grad: DVector<f64>,
}

/// Log-probability of one visit pair and its gradient in parameter-vector order.
fn pair_term(
    model: &PanelModel,
    params: &PanelParams,
    x: &[f64],
    (s, from): (f64, usize),
    (t, to): (f64, usize),
    with_grad: bool,
) -> Option<PairEval> {
    let n = model.n_states();
    let nt = model.transitions.len();
    let nb = model.n_bands();
    let segs = model.segments(s, t);
    let mut exps = Vec::with_capacity(segs.len());
    let mut rates_per_seg = Vec::with_capacity(segs.len());
    let mut gens = Vec::with_capacity(segs.len());
    for &(band, a, b) in &segs {
        let q = build_generator(model, params, x, band) * (b - a);
        exps.push(expm(&q));
        rates_per_seg.push(intensities(model, params, x, band));
        gens.push(q);
    }
    // prefix rows and suffix columns of the product
    let mut left: Vec<DVector<f64>> = Vec::with_capacity(segs.len() + 1);
    let mut row = DVector::<f64>::zeros(n);
    row[from] = 1.0;
    left.push(row.clone());
    for e in &exps {
        row = e.transpose() * row;
        left.push(row.clone());
    }
    let prob = left.last().expect("non-empty")[to];
    if !(prob > 0.0) {
        return None;
    }
    let mut grad = DVector::<f64>::zeros(model.n_params());
    if with_grad {
        let mut right: Vec<DVector<f64>> = vec![DVector::zeros(n); segs.len() + 1];
        let mut col = DVector::<f64>::zeros(n);
        col[to] = 1.0;
        right[segs.len()] = col.clone();
        for i in (0..segs.len()).rev() {
            col = &exps[i] * col;
            right[i] = col.clone();
        }
        for (i, &(band, a, b)) in segs.iter().enumerate() {
            let dt = b - a;
            for (m, tr) in model.transitions.iter().enumerate() {
                let mut e = DMatrix::<f64>::zeros(n, n);
                e[(tr.from, tr.to)] = dt;
                e[(tr.from, tr.from)] = -dt;
                let (_, l) = expm_frechet(&gens[i], &e);
                let d = rates_per_seg[i][m] * left[i].dot(&(l * &right[i + 1])) / prob;
                grad[m * nb + band] += d;
                for (j, xj) in x.iter().enumerate() {
                    grad[nt * nb + m * x.len() + j] += d * xj;
                }
            }
        }
    }
    Some(PairEval { log_p: prob.ln(), grad })
}

fn subject_covariates(data: &PanelDataset, model: &PanelModel) -> Result<Vec<Vec<f64>>> {
    let cols = model
        .covariate_names
        .iter()
        .map(|c| data.covariate_index(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(data
        .subjects()
        .iter()
        .map(|s| cols.iter().map(|&c| s.covariates[c]).collect())
        .collect())
}

fn loglik_and_grad(
    model: &PanelModel,
    params: &PanelParams,
    data: &PanelDataset,
    xs: &[Vec<f64>],
    with_grad: bool,
) -> Result<(f64, DVector<f64>)> {
    let per_subject: Vec<Result<(f64, DVector<f64>)>> = data
        .subjects()
        .par_iter()
        .zip(xs.par_iter())
        .map(|(subj, x)| {
            let mut ll = 0.0;
            let mut g = DVector::<f64>::zeros(model.n_params());
            for w in subj.observations.windows(2) {
                match pair_term(model, params, x, w[0], w[1], with_grad) {
                    Some(term) => {
                        ll += term.log_p;
                        if with_grad {
                            g += term.grad;
                        }
                    }
                    None => {
                        return Err(Error::ImpossibleTransitionObserved {
                            subject: subj.id.clone(),
                            from: w[0].1,
                            to: w[1].1,
                            start: w[0].0,
                            stop: w[1].0,
                        })
                    }
                }
            }
            Ok((ll, g))
        })
        .collect();
    let mut ll = 0.0;
    let mut grad = DVector::<f64>::zeros(model.n_params());
    for r in per_subject {
        let (l, g) = r?;
        ll += l;
        grad += g;
    }
    if !ll.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }
    Ok((ll, grad))
}

/// Log-likelihood of the panel data; covariates are looked up by the
/// model's covariate names.
pub fn panel_loglik(model: &PanelModel, params: &PanelParams, data: &PanelDataset) -> Result<f64> {
    params.check(model)?;
    let xs = subject_covariates(data, model)?;
    Ok(loglik_and_grad(model, params, data, &xs, false)?.0)
}

/// Log-likelihood and its analytic gradient with respect to
/// `(log_lambda, beta)` flattened row-major, log-intensities first.
pub fn panel_loglik_gradient(model: &PanelModel, params: &PanelParams, data: &PanelDataset) -> Result<(f64, Vec<f64>)> {
    params.check(model)?;
    let xs = subject_covariates(data, model)?;
    let (ll, g) = loglik_and_grad(model, params, data, &xs, true)?;
    Ok((ll, g.iter().copied().collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityRow {
    pub transition: Transition,
    pub band: String,
    pub intensity: f64,
    pub lower: f64,
    pub upper: f64,
    /// Intensity relative to the first band, with its interval.
    pub ratio_to_first: f64,
    pub ratio_lower: f64,
    pub ratio_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelFit {
    pub model: PanelModel,
    pub params: PanelParams,
    /// Inverse of the finite-difference Hessian of `-loglik`, in parameter
    /// vector order (log-intensities row-major, then coefficients).
    #[serde(with = "crate::linalg::rows")]
    pub covariance: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl PanelFit {
    fn lambda_index(&self, m: usize, b: usize) -> usize {
        m * self.model.n_bands() + b
    }

    fn beta_index(&self, m: usize, j: usize) -> usize {
        self.model.transitions.len() * self.model.n_bands() + m * self.model.covariate_names.len() + j
    }

    /// Coefficient table per transition, as `(transition, rows)`.
    pub fn coefficients(&self, level: f64) -> Vec<(Transition, Vec<CoefficientRow>)> {
        let p = self.model.covariate_names.len();
        self.model
            .transitions
            .iter()
            .enumerate()
            .map(|(m, &tr)| {
                let idx: Vec<usize> = (0..p).map(|j| self.beta_index(m, j)).collect();
                let cov = DMatrix::from_fn(p, p, |a, b| self.covariance[(idx[a], idx[b])]);
                let beta: Vec<f64> = (0..p).map(|j| self.params.beta[(m, j)]).collect();
                (tr, coefficient_rows(&self.model.covariate_names, &beta, &cov, level))
            })
            .collect()
    }

    /// Baseline intensities (covariates at 0) per transition and band, with
    /// intervals formed on the log scale.
    pub fn intensities(&self, level: f64) -> Vec<IntensityRow> {
        let z = normal_quantile(level);
        let mut out = Vec::new();
        for (m, &tr) in self.model.transitions.iter().enumerate() {
            let i0 = self.lambda_index(m, 0);
            for b in 0..self.model.n_bands() {
                let i = self.lambda_index(m, b);
                let ll = self.params.log_lambda[(m, b)];
                let se = self.covariance[(i, i)].sqrt();
                let diff = ll - self.params.log_lambda[(m, 0)];
                let var_diff = self.covariance[(i, i)] + self.covariance[(i0, i0)] - 2.0 * self.covariance[(i, i0)];
                let se_diff = var_diff.max(0.0).sqrt();
                out.push(IntensityRow {
                    transition: tr,
                    band: self.model.band_label(b),
                    intensity: ll.exp(),
                    lower: (ll - z * se).exp(),
                    upper: (ll + z * se).exp(),
                    ratio_to_first: diff.exp(),
                    ratio_lower: (diff - z * se_diff).exp(),
                    ratio_upper: (diff + z * se_diff).exp(),
                });
            }
        }
        out
    }
}

fn crude_initial(model: &PanelModel, data: &PanelDataset) -> PanelParams {
    let n = model.n_states();
    let mut time_in = vec![0.0; n];
    let mut counts = DMatrix::<f64>::zeros(n, n);
    for s in data.subjects() {
        for w in s.observations.windows(2) {
            time_in[w[0].1] += w[1].0 - w[0].0;
            counts[(w[0].1, w[1].1)] += 1.0;
        }
    }
    let mut params = PanelParams::zeros(model);
    for (m, tr) in model.transitions.iter().enumerate() {
        let time = time_in[tr.from].max(1e-8);
        let rate = counts[(tr.from, tr.to)].max(0.5) / time;
        for b in 0..model.n_bands() {
            params.log_lambda[(m, b)] = rate.ln();
        }
    }
    params
}

/// Maximum-likelihood fit: BFGS on `-loglik` with analytic gradients,
/// Newton refinement, then the covariance from a central-difference Hessian.
pub fn fit_panel(data: &PanelDataset, spec: &PanelSpec) -> Result<PanelFit> {
    let transitions = spec
        .transitions
        .clone()
        .unwrap_or_else(|| data.state_space().allowed().iter().copied().collect());
    let model = PanelModel::new(data.state_space(), transitions, spec.cutpoints.clone(), spec.covariates.clone())?;
    let xs = subject_covariates(data, &model)?;
    let init = match &spec.initialization {
        Initialization::Automatic => crude_initial(&model, data),
        Initialization::LogLambda(v) => {
            let nb = model.n_bands();
            if v.len() != model.transitions.len() * nb {
                return Err(Error::InvalidArgument(format!(
                    "expected {} initial log-intensities",
                    model.transitions.len() * nb
                )));
            }
            let mut p = PanelParams::zeros(&model);
            p.log_lambda = DMatrix::from_fn(model.transitions.len(), nb, |m, b| v[m * nb + b]);
            p
        }
    };
    // surface impossible pairs before optimizing
    loglik_and_grad(&model, &init, data, &xs, false)?;

    let mut objective = |v: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        if v.iter().any(|x| x.abs() > 700.0) {
            return None;
        }
        let params = PanelParams::from_vector(&model, v);
        loglik_and_grad(&model, &params, data, &xs, true)
            .ok()
            .map(|(ll, g)| (-ll, -g))
    };
    let opts = BfgsOptions::default();
    let min = minimize_bfgs(&mut objective, init.to_vector(), opts).ok_or(Error::NonFiniteLikelihood)?;
    let min: Minimum = newton_polish(&mut objective, min, 20, 1e-9);
    if min.gradient_norm() >= opts.grad_tol {
        return Err(Error::NotConverged {
            iterations: min.iterations,
            gradient_norm: min.gradient_norm(),
        });
    }
    let hessian = hessian_from_gradient(&mut objective, &min.x, 1e-5).ok_or(Error::NonFiniteLikelihood)?;
    let (inv, min_eig) = sym_inverse(&hessian);
    let covariance = match inv {
        Some(c) if min_eig >= 1e-10 => c,
        _ => return Err(Error::NonIdentifiable { min_eigenvalue: min_eig }),
    };
    Ok(PanelFit {
        params: PanelParams::from_vector(&model, &min.x),
        model,
        covariance,
        loglik: -min.value,
        converged: true,
        iterations: min.iterations,
        gradient_norm: min.gradient_norm(),
    })
}

/// Row `from = 0` of `P(0, t | profile)` at each grid time.
pub fn occupancy_from_fit(fit: &PanelFit, profile: &[f64], grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if !fit.converged {
        return Err(Error::NotConverged {
            iterations: fit.iterations,
            gradient_norm: fit.gradient_norm,
        });
    }
    if profile.len() != fit.model.covariate_names.len() {
        return Err(Error::InvalidArgument("profile length differs from the covariate count".into()));
    }
    grid.iter()
        .map(|&t| {
            let p = transition_probability(&fit.model, &fit.params, profile, 0.0, t)?;
            Ok(p.row(0).iter().copied().collect())
        })
        .collect()
}
