mod common;

use common::*;
use multistate::coxreg::{fit_cox, CoxSpec};
use multistate::data::{read_episodes, validate, write_episodes, EpisodeDataset, EpisodeRecord, EpisodeSchema, Transition};
use multistate::expm::expm;
use multistate::pseudo::Link;
use multistate::sim::simulate_paths;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn aj_rows_are_stochastic_on_simulated_data() {
    aj_rows_stochastic(100).unwrap();
}

#[test]
fn aj_is_kaplan_meier_in_two_states() {
    aj_equals_kaplan_meier(20).unwrap();
}

#[test]
fn toy_d3_matches_hand_values() {
    toy_d3_hand_values().unwrap();
}

#[test]
fn cox_score_matches_finite_differences_and_vanishes_at_estimate() {
    cox_gradient_and_score().unwrap();
}

#[test]
fn cox_without_covariates_is_nelson_aalen() {
    cox_null_baseline_is_nelson_aalen().unwrap();
}

#[test]
fn expm_oracles_and_chapman_kolmogorov() {
    expm_checks().unwrap();
}

#[test]
fn panel_toy_maximizer_is_ln_2() {
    panel_closed_form().unwrap();
}

#[test]
fn pseudo_values_match_indicators_and_leave_one_out() {
    pseudo_checks().unwrap();
}

#[test]
fn frailty_likelihood_reductions() {
    frailty_reductions().unwrap();
}

#[test]
fn simulator_occupancy_and_determinism() {
    simulator_checks().unwrap();
}

fn negate_covariate(ds: &EpisodeDataset, j: usize) -> EpisodeDataset {
    let records: Vec<EpisodeRecord> = ds
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.covariates[j] = -r.covariates[j];
            r
        })
        .collect();
    EpisodeDataset::new(ds.state_space().clone(), ds.covariate_names().to_vec(), records).unwrap()
}

/// `μ·g'(μ)` bounds how a relative rounding error in `μ` shows up in `g(μ)`.
fn link_condition(link: Link, mu: f64) -> f64 {
    match link {
        Link::Identity => 1.0,
        Link::Logit => 1.0 / (1.0 - mu),
        Link::Cloglog => mu / ((1.0 - mu) * -(-mu).ln_1p()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_then_read_is_identity(seed in 0u64..10_000) {
        let ds = simulate_paths(&illness_death_scenario(30, seed, Some(0.3), 4.0)).unwrap();
        let mut buf = Vec::new();
        write_episodes(&ds, &mut buf, "censor").unwrap();
        let schema = EpisodeSchema {
            from: Some("from".into()),
            covariates: vec!["x".into()],
            ..Default::default()
        };
        let back = read_episodes(buf.as_slice(), &schema, Some(ds.state_space())).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn event_time_multiplicities_sum_to_transition_counts(seed in 0u64..10_000) {
        let ds = simulate_paths(&illness_death_scenario(40, seed, Some(0.3), 4.0)).unwrap();
        let report = validate(&ds);
        prop_assert!(report.is_clean());
        for tr in ds.state_space().allowed().iter().copied() {
            let total: usize = ds.event_times(tr).unwrap().iter().map(|e| e.1).sum();
            prop_assert_eq!(total, report.count(tr.from, tr.to));
        }
    }

    #[test]
    fn risk_set_is_left_continuous(seed in 0u64..10_000) {
        let ds = simulate_paths(&illness_death_scenario(25, seed, Some(0.3), 4.0)).unwrap();
        let mut bounds: Vec<f64> = ds.records().iter().flat_map(|r| [r.tstart, r.tstop]).collect();
        bounds.sort_by(f64::total_cmp);
        bounds.dedup();
        let gap = bounds.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let eps = gap / 4.0;
        for &t in bounds.iter().filter(|&&t| t > 0.0) {
            for k in 0..3 {
                let at = ds.risk_set(k, t).unwrap().count;
                let before = ds.risk_set(k, t - eps).unwrap().count;
                prop_assert_eq!(at, before, "state {} at {}", k, t);
            }
        }
    }

    #[test]
    fn negating_a_covariate_negates_its_coefficient(seed in 0u64..10_000) {
        let ds = simulate_paths(&two_state_scenario(120, seed, 0.8, Some(0.3), 4.0)).unwrap();
        let spec = CoxSpec::new(Transition::new(0, 1), &["z", "u"]);
        let fit = fit_cox(&ds, &spec).unwrap();
        let mirrored = fit_cox(&negate_covariate(&ds, 1), &spec).unwrap();
        prop_assert_eq!(mirrored.beta[1], -fit.beta[1]);
        prop_assert_eq!(mirrored.beta[0], fit.beta[0]);
    }

    #[test]
    fn link_round_trip(x in -10.0f64..10.0) {
        for link in [Link::Identity, Link::Logit, Link::Cloglog] {
            let mu = link.inverse(x);
            if mu == 1.0 {
                // 1 - mu underflows the double spacing near 1; g(mu) is infinite
                continue;
            }
            let tol = 1e-12f64.max(8.0 * f64::EPSILON * link_condition(link, mu) * x.abs().max(1.0));
            prop_assert!((link.link(mu) - x).abs() <= tol, "{:?}: {} -> {}", link, x, link.link(mu));
        }
    }

    #[test]
    fn link_round_trip_is_tight_away_from_one(x in -10.0f64..2.0) {
        for link in [Link::Identity, Link::Logit, Link::Cloglog] {
            prop_assert!((link.link(link.inverse(x)) - x).abs() <= 1e-12);
        }
    }

    #[test]
    fn expm_of_a_generator_is_stochastic(seed in 0u64..10_000, t in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..7);
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random_bool(0.6) {
                    q[(i, j)] = rng.random_range(0.0..4.0);
                }
            }
            q[(i, i)] = -q.row(i).iter().sum::<f64>();
        }
        let p = expm(&(q * t));
        for i in 0..n {
            let sum: f64 = p.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {}", sum);
            prop_assert!(p.row(i).iter().all(|&x| x >= -1e-14));
        }
    }

    #[test]
    fn simulated_paths_validate_cleanly(seed in 0u64..10_000, censor in 0.05f64..2.0) {
        let ds = simulate_paths(&illness_death_scenario(40, seed, Some(censor), 5.0)).unwrap();
        let report = validate(&ds);
        prop_assert!(report.is_clean(), "{:?}", report.warnings);
        let two = simulate_paths(&two_state_scenario(40, seed, 1.3, Some(censor), 5.0)).unwrap();
        prop_assert!(validate(&two).is_clean());
    }
}
