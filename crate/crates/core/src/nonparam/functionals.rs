use serde::{Deserialize, Serialize};

use super::{apply_jump, check_grid, clamp_probability, cumulative_hazards, jumps_from_cumhaz, Jumps, StepFunction};
use crate::data::EpisodeDataset;
use crate::error::{Error, Result};

/// State occupancy probabilities `p_k(t) = initial · P(0, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub labels: Vec<String>,
    pub grid: Vec<f64>,
    /// `probs[g][k]` is `p_k(grid[g])`.
    pub probs: Vec<Vec<f64>>,
    /// Exact step curves per state, with a knot at 0 carrying the initial
    /// distribution and a final knot at the last grid time.
    pub curves: Vec<StepFunction>,
}

impl Occupancy {
    pub fn curve(&self, state: usize) -> &StepFunction {
        &self.curves[state]
    }
}

fn check_initial(initial: &[f64], n: usize) -> Result<()> {
    if initial.len() != n {
        return Err(Error::InvalidArgument(format!(
            "initial distribution has {} entries for {n} states",
            initial.len()
        )));
    }
    if initial.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (initial.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument("initial distribution must be a probability vector".into()));
    }
    Ok(())
}

/// Propagates a row vector through the jumps up to `horizon`, returning a
/// knot at 0, one per jump time and one at `horizon`.
pub(crate) fn propagate(initial: &[f64], jumps: &Jumps, horizon: f64) -> Vec<(f64, Vec<f64>)> {
    let n = initial.len();
    let mut row = initial.to_vec();
    let mut out = vec![(0.0, row.clone())];
    for (t, inc) in jumps.iter().filter(|(t, _)| *t > 0.0 && *t <= horizon) {
        apply_jump(&mut row, n, inc);
        out.push((*t, row.iter().map(|&x| clamp_probability(x)).collect()));
    }
    if horizon > out.last().expect("origin knot").0 {
        let last = out.last().expect("origin knot").1.clone();
        out.push((horizon, last));
    }
    out
}

pub(crate) fn occupancy_from_jumps(labels: Vec<String>, jumps: &Jumps, grid: &[f64], initial: &[f64]) -> Occupancy {
    let n = initial.len();
    let horizon = grid.last().copied().unwrap_or(0.0);
    let knots = propagate(initial, jumps, horizon);
    let times: Vec<f64> = knots.iter().map(|k| k.0).collect();
    let curves: Vec<StepFunction> = (0..n)
        .map(|s| StepFunction {
            times: times.clone(),
            values: knots.iter().map(|k| k.1[s]).collect(),
            variances: None,
        })
        .collect();
    let probs = grid
        .iter()
        .map(|&g| curves.iter().map(|c| c.eval(g)).collect())
        .collect();
    Occupancy {
        labels,
        grid: grid.to_vec(),
        probs,
        curves,
    }
}

/// Aalen-Johansen state occupancy probabilities starting from `initial` at time 0.
pub fn occupancy(dataset: &EpisodeDataset, grid: &[f64], initial: &[f64]) -> Result<Occupancy> {
    let space = dataset.state_space();
    check_grid(0.0, grid)?;
    check_initial(initial, space.n_states())?;
    let jumps = jumps_from_cumhaz(space, &cumulative_hazards(dataset)?)?;
    Ok(occupancy_from_jumps(space.labels().to_vec(), &jumps, grid, initial))
}

/// Probability of having entered `target` by `t`, for subjects starting in
/// state 0: the occupancy of `target` plus that of the states in
/// `following`, which the caller declares as those entered only after a
/// sojourn in `target`.
pub fn cumulative_incidence(
    dataset: &EpisodeDataset,
    target: usize,
    following: &[usize],
    grid: &[f64],
) -> Result<StepFunction> {
    let space = dataset.state_space();
    space.check_state(target)?;
    let reachable = space.reachable_from(target);
    let bad: Vec<usize> = following
        .iter()
        .copied()
        .filter(|&s| s == target || !reachable.contains(&s))
        .collect();
    if !bad.is_empty() {
        return Err(Error::InconsistentFollowingSet(bad));
    }
    let mut initial = vec![0.0; space.n_states()];
    initial[0] = 1.0;
    let occ = occupancy(dataset, grid, &initial)?;
    Ok(cumulative_incidence_from(&occ, target, following))
}

pub(crate) fn cumulative_incidence_from(occ: &Occupancy, target: usize, following: &[usize]) -> StepFunction {
    let base = &occ.curves[target];
    let values = (0..base.times.len())
        .map(|i| base.values[i] + following.iter().map(|&s| occ.curves[s].values[i]).sum::<f64>())
        .collect();
    StepFunction {
        times: base.times.clone(),
        values,
        variances: None,
    }
}

/// `∫_0^τ curve(u) du` for a right-continuous step curve.
///
/// `tau` must lie within the knot span of the curve.
pub fn restricted_mean_sojourn(curve: &StepFunction, tau: f64) -> Result<f64> {
    let (lo, hi) = match (curve.times.first(), curve.times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0.0, 0.0),
    };
    if !(tau >= lo.min(0.0) && tau <= hi) {
        return Err(Error::TauOutOfRange { tau, lo, hi });
    }
    Ok(step_integral(&curve.times, &curve.values, tau))
}

pub(crate) fn step_integral(times: &[f64], values: &[f64], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..times.len() {
        if times[i] >= tau {
            break;
        }
        let end = times.get(i + 1).map_or(tau, |&t| t.min(tau));
        total += values[i] * (end - times[i]);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_d3;
    use crate::nonparam::aalen_johansen;
    use crate::nonparam::tests::close;

    #[test]
    fn toy_occupancy() {
        let d = toy_d3();
        let occ = occupancy(&d, &[0.0, 3.0, 5.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(occ.probs[0], vec![1.0, 0.0, 0.0]);
        close(&occ.probs[1], &[0.0, 1.0 / 3.0, 2.0 / 3.0]);
        let rmst = restricted_mean_sojourn(occ.curve(1), 5.0).unwrap();
        assert!((rmst - 4.0 / 3.0).abs() < 1e-15);
        assert!(restricted_mean_sojourn(occ.curve(1), 6.0).is_err());
        assert_eq!(restricted_mean_sojourn(occ.curve(0), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn occupancy_is_linear_in_initial() {
        let d = toy_d3();
        let grid = [0.5, 1.0, 2.0, 3.0];
        let occ = occupancy(&d, &grid, &[0.5, 0.5, 0.0]).unwrap();
        let p = aalen_johansen(&d, 0.0, &grid).unwrap();
        for (g, m) in p.matrices.iter().enumerate() {
            for k in 0..3 {
                let direct = 0.5 * m[(0, k)] + 0.5 * m[(1, k)];
                assert!((occ.probs[g][k] - direct).abs() < 1e-15);
            }
        }
        assert!(occupancy(&d, &grid, &[0.5, 0.6, 0.0]).is_err());
    }

    #[test]
    fn step_integral_examples() {
        let curve = StepFunction {
            times: vec![0.0, 1.0, 3.0],
            values: vec![1.0, 0.5, 0.5],
            variances: None,
        };
        assert_eq!(restricted_mean_sojourn(&curve, 3.0).unwrap(), 2.0);
        let one = StepFunction {
            times: vec![0.0, 7.0],
            values: vec![1.0, 1.0],
            variances: None,
        };
        assert_eq!(restricted_mean_sojourn(&one, 2.5).unwrap(), 2.5);
    }

    #[test]
    fn toy_cumulative_incidence() {
        let d = toy_d3();
        let f1 = cumulative_incidence(&d, 1, &[2], &[3.0]);
        // state 2 is reachable from 1 but also entered directly from 0
        assert!(f1.is_ok());
        let f1 = cumulative_incidence(&d, 1, &[], &[3.0]).unwrap();
        assert_eq!(f1.eval(3.0), 1.0 / 3.0);
        let f2 = cumulative_incidence(&d, 2, &[], &[3.0]).unwrap();
        close(&[f2.eval(3.0)], &[2.0 / 3.0]);
        assert!(matches!(
            cumulative_incidence(&d, 2, &[1], &[3.0]),
            Err(Error::InconsistentFollowingSet(v)) if v == vec![1]
        ));
    }
}
