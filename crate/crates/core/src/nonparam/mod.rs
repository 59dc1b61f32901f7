//! Nonparametric estimators for counting-process data.
//!
//! The Nelson-Aalen estimator of a cumulative transition intensity jumps by
//! `dN(t) / Y(t)` at each observed transition time, where `Y(t)` counts the
//! subjects at risk in the origin state just before `t`. The Aalen-Johansen
//! estimator multiplies the matrices `I + dΛ(u)` over all transition times
//! `u` in `(s, t]`.

mod bootstrap;
mod functionals;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{EpisodeDataset, EpisodeRecord, StateSpace, Transition};
use crate::error::{Error, Result};
use crate::linalg::normal_quantile;

pub use bootstrap::{bootstrap_bands, Bands, Functional};
pub use functionals::{cumulative_incidence, occupancy, restricted_mean_sojourn, Occupancy};
pub(crate) use functionals::{propagate, step_integral};

/// Right-continuous step function, zero before the first knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
}

/// How pointwise intervals are formed from a standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiTransform {
    /// `estimate ± z·se`, truncated at zero.
    #[default]
    Plain,
    /// `estimate · exp(±z·se/estimate)`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub time: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Plot data: one row per knot with a pointwise interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub points: Vec<CurvePoint>,
}

impl CurveTable {
    /// Writes `time,estimate,lower,upper` with a header row.
    pub fn write_delimited(&self, mut w: impl Write, delimiter: char) -> std::io::Result<()> {
        writeln!(w, "time{d}estimate{d}lower{d}upper", d = delimiter)?;
        for p in &self.points {
            writeln!(
                w,
                "{}{d}{}{d}{}{d}{}",
                p.time,
                p.estimate,
                p.lower,
                p.upper,
                d = delimiter
            )?;
        }
        Ok(())
    }
}

impl StepFunction {
    pub fn zero() -> Self {
        StepFunction {
            times: Vec::new(),
            values: Vec::new(),
            variances: None,
        }
    }

    fn index_at(&self, t: f64) -> Option<usize> {
        self.times.partition_point(|&x| x <= t).checked_sub(1)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.index_at(t).map_or(0.0, |i| self.values[i])
    }

    pub fn variance(&self, t: f64) -> Option<f64> {
        let v = self.variances.as_ref()?;
        Some(self.index_at(t).map_or(0.0, |i| v[i]))
    }

    /// `(time, jump size)` for every knot.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().enumerate().map(|(i, &t)| {
            let prev = if i == 0 { 0.0 } else { self.values[i - 1] };
            (t, self.values[i] - prev)
        })
    }

    /// Pointwise intervals at every knot. Without variances the interval
    /// collapses to the estimate.
    pub fn confidence_band(&self, level: f64, transform: CiTransform) -> Result<CurveTable> {
        check_level(level)?;
        let z = normal_quantile(level);
        let points = self
            .times
            .iter()
            .enumerate()
            .map(|(i, &time)| {
                let estimate = self.values[i];
                let se = self.variances.as_ref().map_or(0.0, |v| v[i].sqrt());
                let (lower, upper) = match transform {
                    CiTransform::Plain => ((estimate - z * se).max(0.0), estimate + z * se),
                    CiTransform::Log if estimate > 0.0 => {
                        let f = (z * se / estimate).exp();
                        (estimate / f, estimate * f)
                    }
                    CiTransform::Log => (estimate, estimate),
                };
                CurvePoint {
                    time,
                    estimate,
                    lower,
                    upper,
                }
            })
            .collect();
        Ok(CurveTable { points })
    }
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidLevel(level))
    }
}

/// Estimated transition probability matrices `P(s, t)` on a reporting grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixPath {
    pub labels: Vec<String>,
    pub s: f64,
    pub grid: Vec<f64>,
    #[serde(with = "crate::linalg::rows_vec")]
    pub matrices: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    /// `P_kl(s, t)` across the grid.
    pub fn entry(&self, from: usize, to: usize) -> Vec<f64> {
        self.matrices.iter().map(|m| m[(from, to)]).collect()
    }
}

/// Number of records from one state at risk at a time, by binary search.
pub(crate) struct RiskCounter {
    starts: Vec<f64>,
    stops: Vec<f64>,
}

impl RiskCounter {
    pub(crate) fn new<'a>(records: impl Iterator<Item = &'a EpisodeRecord>) -> Self {
        let (mut starts, mut stops): (Vec<f64>, Vec<f64>) =
            records.map(|r| (r.tstart, r.tstop)).unzip();
        starts.sort_by(f64::total_cmp);
        stops.sort_by(f64::total_cmp);
        RiskCounter { starts, stops }
    }

    /// Records with `tstart < t <= tstop`.
    pub(crate) fn count(&self, t: f64) -> usize {
        let entered = self.starts.partition_point(|&x| x < t);
        let left = self.stops.partition_point(|&x| x < t);
        entered - left
    }
}

/// Jump times with `(from, to, dΛ)` increments, sorted by time.
pub(crate) type Jumps = Vec<(f64, Vec<(usize, usize, f64)>)>;

/// Event counts and risk-set sizes at every distinct transition time.
///
/// Supports removing one subject at a time, which the jackknife uses to
/// avoid rebuilding from scratch.
#[derive(Debug, Clone)]
pub(crate) struct Increments {
    pub(crate) times: Vec<f64>,
    pub(crate) events: Vec<Vec<(usize, usize, f64)>>,
    pub(crate) at_risk: Vec<Vec<f64>>,
}

impl Increments {
    pub(crate) fn new(dataset: &EpisodeDataset) -> Self {
        let k = dataset.state_space().n_states();
        let mut times: Vec<f64> = dataset
            .records()
            .iter()
            .filter(|r| r.transition().is_some())
            .map(|r| r.tstop)
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut events: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); times.len()];
        for r in dataset.records() {
            if let Some(tr) = r.transition() {
                let i = times.partition_point(|&x| x < r.tstop);
                match events[i].iter_mut().find(|e| e.0 == tr.from && e.1 == tr.to) {
                    Some(e) => e.2 += 1.0,
                    None => events[i].push((tr.from, tr.to, 1.0)),
                }
            }
        }
        for e in &mut events {
            e.sort_by_key(|&(a, b, _)| (a, b));
        }
        let counters: Vec<RiskCounter> = (0..k)
            .map(|s| RiskCounter::new(dataset.records().iter().filter(|r| r.from == s)))
            .collect();
        let at_risk = times
            .iter()
            .map(|&t| counters.iter().map(|c| c.count(t) as f64).collect())
            .collect();
        Increments {
            times,
            events,
            at_risk,
        }
    }

    /// Removes the contribution of one subject's records.
    pub(crate) fn remove(&mut self, records: &[EpisodeRecord]) {
        for r in records {
            let lo = self.times.partition_point(|&x| x <= r.tstart);
            let hi = self.times.partition_point(|&x| x <= r.tstop);
            for y in &mut self.at_risk[lo..hi] {
                y[r.from] -= 1.0;
            }
            if let Some(tr) = r.transition() {
                let i = self.times.partition_point(|&x| x < r.tstop);
                let ev = &mut self.events[i];
                if let Some(pos) = ev.iter().position(|e| e.0 == tr.from && e.1 == tr.to) {
                    ev[pos].2 -= 1.0;
                    if ev[pos].2 == 0.0 {
                        ev.remove(pos);
                    }
                }
            }
        }
    }

    pub(crate) fn jumps(&self) -> Result<Jumps> {
        let mut out = Vec::with_capacity(self.times.len());
        for (i, &t) in self.times.iter().enumerate() {
            if self.events[i].is_empty() {
                continue;
            }
            let mut inc = Vec::with_capacity(self.events[i].len());
            for &(from, to, d) in &self.events[i] {
                let y = self.at_risk[i][from];
                if !(y > 0.0) {
                    return Err(Error::NeverAtRisk { state: from, time: t });
                }
                inc.push((from, to, d / y));
            }
            out.push((t, inc));
        }
        Ok(out)
    }
}

/// Applies `I + dΛ` on the right of each row of `rows` in place.
///
/// The diagonal factor is formed as `1 - Σ dΛ_kl` so that in a two-state
/// model the result is the Kaplan-Meier product to the last bit.
pub(crate) fn apply_jump(rows: &mut [f64], n: usize, inc: &[(usize, usize, f64)]) {
    let m = rows.len() / n;
    let mut from_states: Vec<(usize, f64)> = Vec::new();
    for &(k, _, a) in inc {
        match from_states.iter_mut().find(|f| f.0 == k) {
            Some(f) => f.1 += a,
            None => from_states.push((k, a)),
        }
    }
    for r in 0..m {
        let row = &mut rows[r * n..(r + 1) * n];
        let old: Vec<f64> = from_states.iter().map(|&(k, _)| row[k]).collect();
        for (&(k, total), &o) in from_states.iter().zip(&old) {
            row[k] = o * (1.0 - total);
        }
        for &(k, l, a) in inc {
            let o = old[from_states.iter().position(|f| f.0 == k).expect("listed")];
            row[l] += o * a;
        }
    }
}

fn check_grid(s: f64, grid: &[f64]) -> Result<()> {
    if !s.is_finite() || grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument("non-finite time in grid".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("grid must be non-decreasing".into()));
    }
    if grid.first().is_some_and(|&g| g < s) {
        return Err(Error::InvalidArgument(format!("grid starts before s = {s}")));
    }
    Ok(())
}

fn clamp_probability(x: f64) -> f64 {
    if (-1e-12..0.0).contains(&x) {
        0.0
    } else if x > 1.0 && x <= 1.0 + 1e-12 {
        1.0
    } else {
        x
    }
}

/// Product integral of `jumps` over `(s, t]` for every `t` in `grid`.
pub(crate) fn product_integral(n: usize, jumps: &Jumps, s: f64, grid: &[f64]) -> Vec<DMatrix<f64>> {
    let mut rows = vec![0.0; n * n];
    for k in 0..n {
        rows[k * n + k] = 1.0;
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut j = jumps.partition_point(|(t, _)| *t <= s);
    for &g in grid {
        while j < jumps.len() && jumps[j].0 <= g {
            apply_jump(&mut rows, n, &jumps[j].1);
            j += 1;
        }
        out.push(DMatrix::from_fn(n, n, |a, b| clamp_probability(rows[a * n + b])));
    }
    out
}

fn nelson_aalen_unchecked(dataset: &EpisodeDataset, transition: Transition) -> Result<StepFunction> {
    let counter = RiskCounter::new(dataset.records().iter().filter(|r| r.from == transition.from));
    let events = dataset.event_times(transition)?;
    let mut times = Vec::with_capacity(events.len());
    let mut values = Vec::with_capacity(events.len());
    let mut variances = Vec::with_capacity(events.len());
    let (mut cum, mut var) = (0.0, 0.0);
    for (t, d) in events {
        let y = counter.count(t) as f64;
        if y == 0.0 {
            return Err(Error::NeverAtRisk {
                state: transition.from,
                time: t,
            });
        }
        cum += d as f64 / y;
        var += d as f64 / (y * y);
        times.push(t);
        values.push(cum);
        variances.push(var);
    }
    Ok(StepFunction {
        times,
        values,
        variances: Some(variances),
    })
}

/// Nelson-Aalen estimate of the cumulative intensity of `transition`, with
/// the variance estimate `Σ dN / Y²`.
///
/// Fails with [`Error::NeverAtRisk`] when no record ever starts in the
/// origin state.
pub fn nelson_aalen(dataset: &EpisodeDataset, transition: Transition) -> Result<StepFunction> {
    dataset.state_space().check_transition(transition)?;
    if !dataset.records().iter().any(|r| r.from == transition.from) {
        return Err(Error::NeverAtRisk {
            state: transition.from,
            time: 0.0,
        });
    }
    nelson_aalen_unchecked(dataset, transition)
}

/// Nelson-Aalen estimates for every allowed transition; transitions out of
/// states nobody visits get the zero function.
pub fn cumulative_hazards(dataset: &EpisodeDataset) -> Result<Vec<(Transition, StepFunction)>> {
    dataset
        .state_space()
        .allowed()
        .iter()
        .map(|&tr| Ok((tr, nelson_aalen_unchecked(dataset, tr)?)))
        .collect()
}

/// Merges cumulative-hazard step functions into per-time jump lists.
pub(crate) fn jumps_from_cumhaz(
    space: &StateSpace,
    hazards: &[(Transition, StepFunction)],
) -> Result<Jumps> {
    let mut all: Vec<(f64, usize, usize, f64)> = Vec::new();
    for (tr, f) in hazards {
        space.check_transition(*tr)?;
        for (t, a) in f.jumps() {
            if a != 0.0 {
                all.push((t, tr.from, tr.to, a));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut jumps: Jumps = Vec::new();
    for (t, from, to, a) in all {
        match jumps.last_mut() {
            Some((last, inc)) if *last == t => inc.push((from, to, a)),
            _ => jumps.push((t, vec![(from, to, a)])),
        }
    }
    Ok(jumps)
}

/// Aalen-Johansen estimate of `P(s, t)` at each grid time.
///
/// The product runs over the exact transition times; the grid only selects
/// reporting points. Rows of absorbing states stay unit vectors.
pub fn aalen_johansen(dataset: &EpisodeDataset, s: f64, grid: &[f64]) -> Result<MatrixPath> {
    let hazards = cumulative_hazards(dataset)?;
    aalen_johansen_from_cumhaz(dataset.state_space(), &hazards, s, grid)
}

/// Product integral built from cumulative-intensity step functions, e.g.
/// Nelson-Aalen estimates or covariate-scaled Cox baselines.
///
/// Increments are not checked to keep `Σ_l dΛ_kl ≤ 1`; larger jumps give
/// entries outside `[0, 1]` while rows still sum to one.
pub fn aalen_johansen_from_cumhaz(
    space: &StateSpace,
    hazards: &[(Transition, StepFunction)],
    s: f64,
    grid: &[f64],
) -> Result<MatrixPath> {
    check_grid(s, grid)?;
    let jumps = jumps_from_cumhaz(space, hazards)?;
    Ok(MatrixPath {
        labels: space.labels().to_vec(),
        s,
        grid: grid.to_vec(),
        matrices: product_integral(space.n_states(), &jumps, s, grid),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::tests::toy_d3;
    use crate::data::{EndMark, EpisodeRecord};

    /// Equality up to the rounding of `1 - 1/3` against `2/3`.
    pub(crate) fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 2.0 * f64::EPSILON, "{a:?} vs {b:?}");
        }
    }

    pub(crate) fn survival_data(times: &[(f64, bool)]) -> EpisodeDataset {
        let records = times
            .iter()
            .enumerate()
            .map(|(i, &(t, event))| EpisodeRecord {
                subject: format!("s{i}"),
                tstart: 0.0,
                tstop: t,
                from: 0,
                end: if event { EndMark::Transition(1) } else { EndMark::Censored },
                covariates: vec![],
            })
            .collect();
        EpisodeDataset::new(StateSpace::two_state(), vec![], records).unwrap()
    }

    #[test]
    fn toy_nelson_aalen() {
        let d = toy_d3();
        let na = nelson_aalen(&d, Transition::new(0, 1)).unwrap();
        assert_eq!(na.times, vec![1.0]);
        assert_eq!(na.values, vec![1.0 / 3.0]);
        assert_eq!(na.variances.as_ref().unwrap(), &vec![1.0 / 9.0]);
        assert_eq!(na.eval(0.5), 0.0);
        assert_eq!(na.eval(10.0), 1.0 / 3.0);

        let na02 = nelson_aalen(&d, Transition::new(0, 2)).unwrap();
        assert_eq!((na02.times.clone(), na02.values.clone()), (vec![3.0], vec![1.0]));

        // state 1 is entered but nobody is followed in it
        assert!(matches!(
            nelson_aalen(&d, Transition::new(1, 2)),
            Err(Error::NeverAtRisk { state: 1, .. })
        ));
    }

    #[test]
    fn never_at_risk() {
        let d = survival_data(&[(1.0, true)]);
        let space = StateSpace::progressive(3).unwrap();
        let d = EpisodeDataset::new(space, vec![], d.records().to_vec()).unwrap();
        assert!(matches!(
            nelson_aalen(&d, Transition::new(1, 2)),
            Err(Error::NeverAtRisk { state: 1, .. })
        ));
        assert!(nelson_aalen(&d, Transition::new(0, 2)).is_err());
    }

    #[test]
    fn toy_aalen_johansen() {
        let d = toy_d3();
        let p = aalen_johansen(&d, 0.0, &[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(p.matrices[0], DMatrix::identity(3, 3));
        let row: Vec<f64> = p.matrices[2].row(0).iter().copied().collect();
        close(&row, &[0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(p.matrices[2].row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn kaplan_meier_equivalence() {
        let d = survival_data(&[(1.0, true), (2.0, false), (2.0, true), (3.0, true), (4.0, false)]);
        let grid = [0.5, 1.0, 2.0, 3.0, 5.0];
        let p = aalen_johansen(&d, 0.0, &grid).unwrap();
        // at risk: 5, 4 (one event one censoring at 2), 2
        let km = [1.0, 1.0 - 1.0 / 5.0, (1.0 - 1.0 / 5.0) * (1.0 - 1.0 / 4.0)];
        let km = [km[0], km[1], km[2], km[2] * (1.0 - 1.0 / 2.0), km[2] * 0.5];
        for (m, k) in p.matrices.iter().zip(km) {
            assert!((m[(0, 0)] - k).abs() < 1e-15, "{} vs {k}", m[(0, 0)]);
        }
    }

    #[test]
    fn zero_events_identity() {
        let d = survival_data(&[(1.0, false), (2.0, false)]);
        let p = aalen_johansen(&d, 0.0, &[0.0, 1.0, 2.0]).unwrap();
        assert!(p.matrices.iter().all(|m| *m == DMatrix::identity(2, 2)));
    }

    #[test]
    fn grid_must_start_after_s() {
        let d = toy_d3();
        assert!(aalen_johansen(&d, 1.0, &[0.5]).is_err());
        assert!(aalen_johansen(&d, 0.0, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn increments_match_nelson_aalen_and_support_removal() {
        let d = toy_d3();
        let mut inc = Increments::new(&d);
        let j = inc.jumps().unwrap();
        assert_eq!(j.len(), 2);
        assert_eq!(j[0], (1.0, vec![(0, 1, 1.0 / 3.0)]));
        inc.remove(d.subject_records(1));
        let j = inc.jumps().unwrap();
        assert_eq!(j[0], (1.0, vec![(0, 1, 0.5)]));
        assert_eq!(j[1], (3.0, vec![(0, 2, 1.0)]));
    }

    #[test]
    fn confidence_bands() {
        let d = toy_d3();
        let na = nelson_aalen(&d, Transition::new(0, 1)).unwrap();
        let band = na.confidence_band(0.95, CiTransform::Plain).unwrap();
        let z = normal_quantile(0.95);
        assert_eq!(band.points[0].lower, 0.0);
        assert!((band.points[0].upper - (1.0 / 3.0 + z / 3.0)).abs() < 1e-15);
        let log = na.confidence_band(0.95, CiTransform::Log).unwrap();
        assert!(log.points[0].lower > 0.0);
        assert!(na.confidence_band(1.0, CiTransform::Plain).is_err());
        let mut buf = Vec::new();
        band.write_delimited(&mut buf, ',').unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("time,estimate,lower,upper\n1,"));
    }
}
