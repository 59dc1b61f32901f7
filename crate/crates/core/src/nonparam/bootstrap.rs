use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::functionals::{cumulative_incidence_from, occupancy_from_jumps};
use super::{check_grid, check_level, cumulative_hazards, jumps_from_cumhaz, product_integral, CurvePoint, CurveTable};
use crate::data::{EpisodeDataset, Transition};
use crate::error::{Error, Result};
use crate::linalg::quantile_sorted;

/// Curve estimated on each bootstrap replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// Aalen-Johansen entry `P_kl(s, t)`.
    Probability { from: usize, to: usize, s: f64 },
    /// Occupancy of `state` from the initial distribution `initial`.
    Occupancy { state: usize, initial: Vec<f64> },
    /// Cumulative incidence from state 0, as in [`super::cumulative_incidence`].
    CumulativeIncidence { target: usize, following: Vec<usize> },
    /// Nelson-Aalen cumulative intensity.
    CumulativeHazard { from: usize, to: usize },
}

impl Functional {
    fn validate(&self, dataset: &EpisodeDataset, grid: &[f64]) -> Result<()> {
        let space = dataset.state_space();
        match self {
            Functional::Probability { from, to, s } => {
                space.check_state(*from)?;
                space.check_state(*to)?;
                check_grid(*s, grid)
            }
            Functional::Occupancy { .. } | Functional::CumulativeIncidence { .. } => check_grid(0.0, grid),
            Functional::CumulativeHazard { from, to } => space.check_transition(Transition::new(*from, *to)),
        }
    }

    /// Evaluates the functional on `grid`.
    pub fn evaluate(&self, dataset: &EpisodeDataset, grid: &[f64]) -> Result<Vec<f64>> {
        let space = dataset.state_space();
        let hazards = cumulative_hazards(dataset)?;
        match self {
            Functional::CumulativeHazard { from, to } => {
                let tr = Transition::new(*from, *to);
                let f = &hazards.iter().find(|(t, _)| *t == tr).expect("allowed").1;
                Ok(grid.iter().map(|&g| f.eval(g)).collect())
            }
            Functional::Probability { from, to, s } => {
                let jumps = jumps_from_cumhaz(space, &hazards)?;
                Ok(product_integral(space.n_states(), &jumps, *s, grid)
                    .iter()
                    .map(|m| m[(*from, *to)])
                    .collect())
            }
            Functional::Occupancy { state, initial } => {
                let jumps = jumps_from_cumhaz(space, &hazards)?;
                let occ = occupancy_from_jumps(space.labels().to_vec(), &jumps, grid, initial);
                Ok(occ.probs.iter().map(|p| p[*state]).collect())
            }
            Functional::CumulativeIncidence { target, following } => {
                let jumps = jumps_from_cumhaz(space, &hazards)?;
                let mut initial = vec![0.0; space.n_states()];
                initial[0] = 1.0;
                let occ = occupancy_from_jumps(space.labels().to_vec(), &jumps, grid, &initial);
                let f = cumulative_incidence_from(&occ, *target, following);
                Ok(grid.iter().map(|&g| f.eval(g)).collect())
            }
        }
    }
}

/// Pointwise percentile bands from a subject-level bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub functional: Functional,
    pub level: f64,
    pub replicates: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bands {
    pub fn to_table(&self) -> CurveTable {
        let points = (0..self.grid.len())
            .map(|i| CurvePoint {
                time: self.grid[i],
                estimate: self.estimate[i],
                lower: self.lower[i],
                upper: self.upper[i],
            })
            .collect();
        CurveTable { points }
    }
}

/// Resamples subjects with replacement `b` times and reports pointwise
/// percentile intervals of `functional` on `grid`.
///
/// Replicate `r` draws from a ChaCha8 stream selected by `(seed, r)`, so the
/// result does not depend on thread scheduling.
pub fn bootstrap_bands(
    dataset: &EpisodeDataset,
    functional: &Functional,
    grid: &[f64],
    b: usize,
    seed: u64,
    level: f64,
) -> Result<Bands> {
    check_level(level)?;
    if b == 0 {
        return Err(Error::InvalidArgument("at least one bootstrap replicate is required".into()));
    }
    functional.validate(dataset, grid)?;
    let estimate = functional.evaluate(dataset, grid)?;
    let n = dataset.n_subjects();
    let replicates: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            functional.evaluate(&dataset.select_subjects(&pick), grid)
        })
        .collect::<Result<_>>()?;
    let alpha = (1.0 - level) / 2.0;
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; b];
    for g in 0..grid.len() {
        for (c, rep) in column.iter_mut().zip(&replicates) {
            *c = rep[g];
        }
        column.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&column, alpha));
        upper.push(quantile_sorted(&column, 1.0 - alpha));
    }
    Ok(Bands {
        functional: functional.clone(),
        level,
        replicates: b,
        seed,
        grid: grid.to_vec(),
        estimate,
        lower,
        upper,
    })
}
