//! Event-history simulation from piecewise-constant intensity models.
//!
//! Each subject draws covariates and (optionally) a gamma frailty, then
//! moves through the state space by inverting the all-cause cumulative
//! intensity of its current state: an `Exp(1)` draw is matched against
//! `∫ Σ_l λ_kl(u) du`, which is linear within a band. The destination is
//! chosen with probability proportional to the intensities at the jump.
//!
//! Subject `i` uses its own ChaCha8 stream `(seed, i)`, so output does not
//! depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EndMark, EpisodeDataset, EpisodeRecord, PanelDataset, PanelSubject, StateSpace};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensitySpec {
    pub from: String,
    pub to: String,
    /// Baseline rate per band.
    pub rates: Vec<f64>,
    /// Log hazard ratios, one per covariate; empty means all zero.
    #[serde(default)]
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDraw {
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
    /// Subject `i` gets `values[i % len]`.
    Fixed { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub draw: CovariateDraw,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CensoringSpec {
    /// End of follow-up.
    #[serde(default)]
    pub administrative: Option<f64>,
    /// Rate of an independent exponential censoring time.
    #[serde(default)]
    pub exponential_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisitSpec {
    /// Fixed visit times.
    Grid { times: Vec<f64> },
    /// First visit at 0, then gaps drawn uniformly from `[low, high]`.
    Renewal { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimTimescale {
    /// Bands refer to time since the origin.
    #[default]
    TotalTime,
    /// Bands refer to time since entering the current state.
    ClockReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub state_space: StateSpace,
    #[serde(default)]
    pub initial_state: usize,
    /// Band cutpoints shared by all intensities.
    #[serde(default)]
    pub cutpoints: Vec<f64>,
    pub intensities: Vec<IntensitySpec>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    /// Gamma frailty variance; 0 for none.
    #[serde(default)]
    pub frailty_variance: f64,
    #[serde(default)]
    pub censoring: CensoringSpec,
    #[serde(default)]
    pub visits: Option<VisitSpec>,
    #[serde(default)]
    pub timescale: SimTimescale,
    pub n: usize,
    pub seed: u64,
}

/// Validated intensity tables: `rates[k][l][band]`, `beta[k][l]`.
struct Model {
    n_states: usize,
    cutpoints: Vec<f64>,
    rates: Vec<Vec<Vec<f64>>>,
    beta: Vec<Vec<Vec<f64>>>,
}

impl ScenarioSpec {
    fn model(&self) -> Result<Model> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let space = &self.state_space;
        let n = space.n_states();
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.initial_state >= n {
            return bad(format!("initial state {} out of range", self.initial_state));
        }
        if self.cutpoints.iter().any(|c| !(c.is_finite() && *c > 0.0)) || self.cutpoints.windows(2).any(|w| w[1] <= w[0]) {
            return bad("cutpoints must be positive and increasing".into());
        }
        if !(self.frailty_variance >= 0.0 && self.frailty_variance.is_finite()) {
            return bad("frailty variance must be >= 0".into());
        }
        let c = &self.censoring;
        if c.administrative.is_some_and(|t| !(t > 0.0)) || c.exponential_rate.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
            return bad("administrative censoring must be > 0 and the censoring rate >= 0".into());
        }
        for cov in &self.covariates {
            let ok = match &cov.draw {
                CovariateDraw::Bernoulli { p } => (0.0..=1.0).contains(p),
                CovariateDraw::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
                CovariateDraw::Fixed { values } => !values.is_empty() && values.iter().all(|v| v.is_finite()),
            };
            if !ok {
                return bad(format!("covariate `{}` has an invalid distribution", cov.name));
            }
        }
        match &self.visits {
            Some(VisitSpec::Grid { times }) if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) => {
                return bad("visit times must be >= 0 and increasing".into())
            }
            Some(VisitSpec::Renewal { low, high }) if !(*low > 0.0 && high >= low && high.is_finite()) => {
                return bad("renewal gaps need 0 < low <= high".into())
            }
            _ => {}
        }
        let nb = self.cutpoints.len() + 1;
        let p = self.covariates.len();
        let mut rates = vec![vec![vec![0.0; nb]; n]; n];
        let mut beta = vec![vec![vec![0.0; p]; n]; n];
        for it in &self.intensities {
            let index = |label: &str| {
                space
                    .index_of(label)
                    .ok_or_else(|| Error::InvalidSpec(format!("unknown state `{label}`")))
            };
            let (k, l) = (index(&it.from)?, index(&it.to)?);
            if !space.is_allowed(k, l) {
                return bad(format!("{} -> {} is not an allowed transition", it.from, it.to));
            }
            if it.rates.len() != nb || it.rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                return bad(format!("{} -> {} needs {nb} non-negative rates", it.from, it.to));
            }
            if !(it.beta.is_empty() || it.beta.len() == p) || it.beta.iter().any(|b| !b.is_finite()) {
                return bad(format!("{} -> {} needs {p} coefficients", it.from, it.to));
            }
            rates[k][l].clone_from(&it.rates);
            if !it.beta.is_empty() {
                beta[k][l].clone_from(&it.beta);
            }
        }
        Ok(Model {
            n_states: n,
            cutpoints: self.cutpoints.clone(),
            rates,
            beta,
        })
    }
}

struct Path {
    covariates: Vec<f64>,
    /// `(tstart, tstop, from, end)`.
    segments: Vec<(f64, f64, usize, EndMark)>,
    /// End of observation: censoring or absorption.
    end: f64,
    rng: ChaCha8Rng,
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64);
    rng
}

fn draw_covariates(spec: &ScenarioSpec, i: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    spec.covariates
        .iter()
        .map(|c| match &c.draw {
            CovariateDraw::Bernoulli { p } => (rng.random::<f64>() < *p) as u8 as f64,
            CovariateDraw::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            CovariateDraw::Fixed { values } => values[i % values.len()],
        })
        .collect()
}

fn simulate_subject(spec: &ScenarioSpec, model: &Model, i: usize) -> Result<Path> {
    let mut rng = subject_rng(spec.seed, i);
    let x = draw_covariates(spec, i, &mut rng);
    let omega = if spec.frailty_variance > 0.0 {
        let theta = spec.frailty_variance;
        Gamma::new(1.0 / theta, theta)
            .map_err(|e| Error::InvalidSpec(e.to_string()))?
            .sample(&mut rng)
    } else {
        1.0
    };
    let mut censor = spec.censoring.administrative.unwrap_or(f64::INFINITY);
    if let Some(rate) = spec.censoring.exponential_rate.filter(|r| *r > 0.0) {
        let e: f64 = Exp1.sample(&mut rng);
        censor = censor.min(e / rate);
    }

    let n = model.n_states;
    let nb = model.cutpoints.len() + 1;
    // per-transition rates for this subject, by band
    let scaled: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|k| {
            (0..n)
                .map(|l| {
                    let eta: f64 = model.beta[k][l].iter().zip(&x).map(|(b, v)| b * v).sum();
                    let r = omega * eta.exp();
                    model.rates[k][l].iter().map(|q| q * r).collect()
                })
                .collect()
        })
        .collect();
    let band_end = |b: usize| model.cutpoints.get(b).copied().unwrap_or(f64::INFINITY);

    let mut segments = Vec::new();
    let mut state = spec.initial_state;
    let mut t = 0.0;
    loop {
        if spec.state_space.is_absorbing(state) {
            return Ok(Path {
                covariates: x,
                segments,
                end: t,
                rng,
            });
        }
        let origin = match spec.timescale {
            SimTimescale::TotalTime => 0.0,
            SimTimescale::ClockReset => t,
        };
        let total = |b: usize| (0..n).map(|l| scaled[state][l][b]).sum::<f64>();
        // invert the all-cause cumulative intensity from clock time t - origin
        let mut target: f64 = Exp1.sample(&mut rng);
        let mut clock = t - origin;
        let mut band = model.cutpoints.partition_point(|&c| c <= clock);
        let jump = loop {
            let rate = total(band);
            let room = band_end(band) - clock;
            if rate * room >= target {
                break Some((clock + target / rate, band));
            }
            if band + 1 >= nb {
                break None;
            }
            target -= rate * room;
            clock = band_end(band);
            band += 1;
        };
        let (stop, band) = match jump {
            Some((c, b)) if origin + c <= censor => (origin + c, b),
            _ => {
                if censor.is_infinite() {
                    return Err(Error::InvalidSpec(format!(
                        "state {} has no exit and follow-up is unbounded",
                        spec.state_space.label(state)
                    )));
                }
                if censor > t {
                    segments.push((t, censor, state, EndMark::Censored));
                }
                return Ok(Path {
                    covariates: x,
                    segments,
                    end: censor,
                    rng,
                });
            }
        };
        let rates: Vec<f64> = (0..n).map(|l| scaled[state][l][band]).collect();
        let mut u = rng.random::<f64>() * rates.iter().sum::<f64>();
        let mut to = n - 1;
        for (l, r) in rates.iter().enumerate() {
            if *r > 0.0 && u < *r {
                to = l;
                break;
            }
            u -= r;
        }
        while rates[to] == 0.0 {
            to -= 1;
        }
        segments.push((t, stop, state, EndMark::Transition(to)));
        state = to;
        t = stop;
    }
}

fn simulate_all(spec: &ScenarioSpec) -> Result<Vec<Path>> {
    let model = spec.model()?;
    if spec.state_space.is_absorbing(spec.initial_state) {
        return Ok(Vec::new());
    }
    (0..spec.n)
        .into_par_iter()
        .map(|i| simulate_subject(spec, &model, i))
        .collect()
}

fn covariate_names(spec: &ScenarioSpec) -> Vec<String> {
    spec.covariates.iter().map(|c| c.name.clone()).collect()
}

/// Simulates continuous-time paths in counting-process format.
///
/// An absorbing initial state gives an empty dataset.
pub fn simulate_paths(spec: &ScenarioSpec) -> Result<EpisodeDataset> {
    let paths = simulate_all(spec)?;
    let mut records = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        for &(a, b, from, end) in &p.segments {
            records.push(EpisodeRecord {
                subject: (i + 1).to_string(),
                tstart: a,
                tstop: b,
                from,
                end,
                covariates: p.covariates.clone(),
            });
        }
    }
    EpisodeDataset::new(spec.state_space.clone(), covariate_names(spec), records)
}

fn state_at(p: &Path, initial: usize, t: f64) -> usize {
    p.segments
        .iter()
        .rev()
        .find(|s| s.0 <= t)
        .map(|s| if t < s.1 { s.2 } else { end_state(s.2, s.3) })
        .unwrap_or(initial)
}

fn end_state(from: usize, end: EndMark) -> usize {
    match end {
        EndMark::Transition(to) => to,
        EndMark::Censored => from,
    }
}

/// Simulates paths and records the state at each visit up to censoring.
///
/// Visits after the first one in an absorbing state are dropped.
pub fn simulate_panel(spec: &ScenarioSpec) -> Result<PanelDataset> {
    let visits = spec
        .visits
        .clone()
        .ok_or_else(|| Error::InvalidSpec("no visit schedule".into()))?;
    let paths = simulate_all(spec)?;
    let mut subjects = Vec::with_capacity(paths.len());
    for (i, mut p) in paths.into_iter().enumerate() {
        let absorbed = p.segments.last().is_none_or(|s| matches!(s.3, EndMark::Transition(_)));
        let horizon = if absorbed { f64::INFINITY } else { p.end };
        let times: Vec<f64> = match &visits {
            VisitSpec::Grid { times } => times.iter().copied().filter(|&t| t <= horizon).collect(),
            VisitSpec::Renewal { low, high } => {
                let stop = if absorbed { p.end } else { horizon };
                let mut out = vec![0.0];
                let mut t = 0.0;
                loop {
                    t += low + (high - low) * p.rng.random::<f64>();
                    if t > stop {
                        if absorbed {
                            out.push(t);
                        }
                        break;
                    }
                    out.push(t);
                }
                out
            }
        };
        let mut observations = Vec::with_capacity(times.len());
        for t in times {
            let s = state_at(&p, spec.initial_state, t);
            observations.push((t, s));
            if spec.state_space.is_absorbing(s) {
                break;
            }
        }
        subjects.push(PanelSubject {
            id: (i + 1).to_string(),
            covariates: p.covariates.clone(),
            observations,
        });
    }
    PanelDataset::new(spec.state_space.clone(), covariate_names(spec), subjects)
}
