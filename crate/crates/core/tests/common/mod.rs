//! Checks shared by the property tests and the acceptance runner. Each
//! returns `Err` with a short description of the first violation.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use multistate::coxreg::{fit_cox, partial_loglik, CoxSpec};
use multistate::data::{
    write_episodes, EndMark, EpisodeDataset, EpisodeRecord, PanelDataset, PanelSubject, StateSpace, Transition,
};
use multistate::expm::{expm, transition_matrix};
use multistate::frailty::{
    fit_frailty, frailty_loglik, FrailtyParams, FrailtySpec, IllnessDeathData, IllnessDeathRecord,
};
use multistate::nonparam::{aalen_johansen, nelson_aalen, occupancy, restricted_mean_sojourn};
use multistate::panel::{fit_panel, transition_probability, PanelModel, PanelParams, PanelSpec};
use multistate::pseudo::{fit_gee, pseudo_occupancy, pseudo_rmst, Link};
use multistate::sim::{simulate_paths, ScenarioSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn lib<T>(r: multistate::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// `|a - b| <= 2 ulp(b)`; exact when `b` is 0.
pub fn within_2ulp(a: f64, b: f64) -> bool {
    (a - b).abs() <= 2.0 * f64::EPSILON * b.abs()
}

pub fn scenario(value: serde_json::Value) -> ScenarioSpec {
    serde_json::from_value(value).expect("valid scenario")
}

/// Healthy, ill, dead with one binary covariate and two bands.
pub fn illness_death_scenario(n: usize, seed: u64, censor_rate: Option<f64>, administrative: f64) -> ScenarioSpec {
    scenario(json!({
        "state_space": {
            "labels": ["healthy", "ill", "dead"],
            "absorbing": ["dead"],
            "allowed": [["healthy", "ill"], ["healthy", "dead"], ["ill", "dead"]]
        },
        "cutpoints": [1.0],
        "intensities": [
            { "from": "healthy", "to": "ill", "rates": [0.4, 0.6], "beta": [0.5] },
            { "from": "healthy", "to": "dead", "rates": [0.2, 0.1], "beta": [-0.3] },
            { "from": "ill", "to": "dead", "rates": [0.7, 0.9], "beta": [0.2] }
        ],
        "covariates": [{ "name": "x", "kind": "bernoulli", "p": 0.5 }],
        "censoring": { "administrative": administrative, "exponential_rate": censor_rate },
        "n": n,
        "seed": seed
    }))
}

pub fn two_state_scenario(n: usize, seed: u64, rate: f64, censor_rate: Option<f64>, administrative: f64) -> ScenarioSpec {
    scenario(json!({
        "state_space": { "labels": ["alive", "dead"], "absorbing": ["dead"], "allowed": [["alive", "dead"]] },
        "intensities": [{ "from": "alive", "to": "dead", "rates": [rate], "beta": [0.7, -0.4] }],
        "covariates": [
            { "name": "z", "kind": "bernoulli", "p": 0.4 },
            { "name": "u", "kind": "uniform", "low": -1.0, "high": 1.0 }
        ],
        "censoring": { "administrative": administrative, "exponential_rate": censor_rate },
        "n": n,
        "seed": seed
    }))
}

/// Grid of every record end time, which contains all jump times.
pub fn stop_grid(ds: &EpisodeDataset, s: f64) -> Vec<f64> {
    let mut g: Vec<f64> = ds.records().iter().map(|r| r.tstop).filter(|&t| t >= s).collect();
    g.push(s);
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// State occupied at `t` (right-continuous), for subjects followed through `t`.
pub fn state_at(records: &[EpisodeRecord], t: f64) -> Option<usize> {
    let mut state = records.first()?.from;
    for r in records {
        if r.tstop <= t {
            match r.end {
                EndMark::Transition(to) => state = to,
                EndMark::Censored if r.tstop < t => return None,
                EndMark::Censored => {}
            }
        }
    }
    Some(state)
}

pub fn aj_rows_stochastic(datasets: u64) -> Check {
    for seed in 0..datasets {
        let ds = lib(simulate_paths(&illness_death_scenario(60, seed, Some(0.3), 4.0)))?;
        for s in [0.0, 1.0] {
            let path = lib(aalen_johansen(&ds, s, &stop_grid(&ds, s)))?;
            for (m, t) in path.matrices.iter().zip(&path.grid) {
                for k in 0..m.nrows() {
                    let sum: f64 = m.row(k).iter().sum();
                    ensure!((sum - 1.0).abs() <= 1e-12, "seed {seed}: row {k} at t = {t} sums to {sum}");
                    ensure!(
                        m.row(k).iter().all(|p| (0.0..=1.0).contains(p)),
                        "seed {seed}: entry outside [0, 1] at t = {t}"
                    );
                }
                for k in ds.state_space().absorbing() {
                    for l in 0..m.ncols() {
                        ensure!(m[(*k, l)] == (*k == l) as u8 as f64, "seed {seed}: absorbing row {k} not a unit vector");
                    }
                }
            }
        }
    }
    Ok(())
}

/// Kaplan-Meier from raw `(time, event)` pairs, evaluated on `grid`.
pub fn kaplan_meier(data: &[(f64, bool)], grid: &[f64]) -> Vec<f64> {
    let mut times: Vec<f64> = data.iter().filter(|d| d.1).map(|d| d.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut steps = Vec::with_capacity(times.len());
    let mut s = 1.0;
    for &t in &times {
        let d = data.iter().filter(|x| x.1 && x.0 == t).count() as f64;
        let y = data.iter().filter(|x| x.0 >= t).count() as f64;
        s *= 1.0 - d / y;
        steps.push((t, s));
    }
    grid.iter()
        .map(|&g| steps.iter().take_while(|x| x.0 <= g).last().map_or(1.0, |x| x.1))
        .collect()
}

pub fn aj_equals_kaplan_meier(datasets: u64) -> Check {
    for seed in 0..datasets {
        let ds = lib(simulate_paths(&two_state_scenario(40, 100 + seed, 1.0, Some(0.5), 3.0)))?;
        let raw: Vec<(f64, bool)> = ds
            .records()
            .iter()
            .map(|r| (r.tstop, r.transition().is_some()))
            .collect();
        let grid = stop_grid(&ds, 0.0);
        let path = lib(aalen_johansen(&ds, 0.0, &grid))?;
        for ((m, km), t) in path.matrices.iter().zip(kaplan_meier(&raw, &grid)).zip(&grid) {
            ensure!(
                (m[(0, 0)] - km).abs() <= 4.0 * f64::EPSILON,
                "seed {seed}: P00({t}) = {} but Kaplan-Meier gives {km}",
                m[(0, 0)]
            );
        }
    }
    Ok(())
}

/// A: 0->1 at 1; B: censored in 0 at 2; C: 0->2 at 3.
pub fn toy_d3() -> EpisodeDataset {
    let space = StateSpace::new(vec!["0".into(), "1".into(), "2".into()], [2], [(0, 1), (0, 2), (1, 2)]).unwrap();
    let rec = |id: &str, stop: f64, end| EpisodeRecord {
        subject: id.into(),
        tstart: 0.0,
        tstop: stop,
        from: 0,
        end,
        covariates: vec![],
    };
    EpisodeDataset::new(
        space,
        vec![],
        vec![
            rec("A", 1.0, EndMark::Transition(1)),
            rec("B", 2.0, EndMark::Censored),
            rec("C", 3.0, EndMark::Transition(2)),
        ],
    )
    .unwrap()
}

pub fn toy_d3_hand_values() -> Check {
    let d = toy_d3();
    let na = lib(nelson_aalen(&d, Transition::new(0, 1)))?;
    ensure!(na.times == [1.0], "NA(0->1) jumps at {:?}", na.times);
    ensure!(within_2ulp(na.values[0], 1.0 / 3.0), "NA(0->1) jump is {}", na.values[0]);
    let p = lib(aalen_johansen(&d, 0.0, &[3.0]))?;
    let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0];
    for (l, e) in expected.iter().enumerate() {
        let got = p.matrices[0][(0, l)];
        ensure!(within_2ulp(got, *e), "P_0{l}(0, 3) = {got}, expected {e}");
    }
    Ok(())
}

pub fn cox_gradient_and_score() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let ds = lib(simulate_paths(&two_state_scenario(80, 200 + seed, 0.8, Some(0.3), 4.0)))?;
        let spec = CoxSpec::new(Transition::new(0, 1), &["z", "u"]);
        for _ in 0..2 {
            let beta = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let (_, g) = lib(partial_loglik(&ds, &spec, &beta))?;
            for j in 0..2 {
                let h = 1e-5 * (1.0 + beta[j].abs());
                let mut up = beta;
                let mut down = beta;
                up[j] += h;
                down[j] -= h;
                let fd = (lib(partial_loglik(&ds, &spec, &up))?.0 - lib(partial_loglik(&ds, &spec, &down))?.0) / (2.0 * h);
                let rel = (g[j] - fd).abs() / fd.abs().max(1.0);
                ensure!(rel < 1e-6, "seed {seed}: score {} vs finite difference {fd}", g[j]);
            }
        }
        let fit = lib(fit_cox(&ds, &spec))?;
        let (_, g) = lib(partial_loglik(&ds, &spec, &fit.beta))?;
        let norm = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ensure!(norm < 1e-8, "seed {seed}: score at the estimate has max-norm {norm:e}");
    }
    Ok(())
}

pub fn cox_null_baseline_is_nelson_aalen() -> Check {
    let ds = lib(simulate_paths(&illness_death_scenario(200, 9, Some(0.2), 4.0)))?;
    for tr in ds.state_space().allowed().iter().copied() {
        let fit = lib(fit_cox(&ds, &CoxSpec::new(tr, &[])))?;
        let na = lib(nelson_aalen(&ds, tr))?;
        ensure!(fit.baseline.times == na.times, "{tr}: baseline and Nelson-Aalen jump at different times");
        for (a, b) in fit.baseline.values.iter().zip(&na.values) {
            ensure!((a - b).abs() <= 1e-12, "{tr}: baseline {a} vs Nelson-Aalen {b}");
        }
    }
    Ok(())
}

fn generator(rng: &mut ChaCha8Rng, n: usize, absorbing_last: bool) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        if absorbing_last && i == n - 1 {
            continue;
        }
        for j in 0..n {
            if i != j && rng.random_bool(0.7) {
                q[(i, j)] = rng.random_range(0.0..3.0);
            }
        }
        q[(i, i)] = -q.row(i).iter().sum::<f64>();
    }
    q
}

/// Taylor series after scaling, then repeated squaring.
pub fn expm_series(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let b = a / 2f64.powi(s);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..40 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

pub fn expm_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = generator(&mut rng, 4, true);
    ensure!(
        lib(transition_matrix(&q, 0.0))? == DMatrix::identity(4, 4),
        "P(dt = 0) is not the identity"
    );
    for (a, b, t) in [(0.3, 0.7, 0.5), (2.0, 0.1, 3.0), (1e-3, 5.0, 10.0), (4.0, 4.0, 0.01)] {
        let q = DMatrix::from_row_slice(2, 2, &[-a, a, b, -b]);
        let p = lib(transition_matrix(&q, t))?;
        let e = (-(a + b) * t).exp();
        let closed = [b / (a + b) + a / (a + b) * e, a / (a + b) * (1.0 - e)];
        ensure!(
            (p[(0, 0)] - closed[0]).abs() < 1e-12 && (p[(0, 1)] - closed[1]).abs() < 1e-12,
            "two-state closed form differs at a = {a}, b = {b}, t = {t}"
        );
    }
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let absorbing = rng.random_bool(0.5);
        let q = generator(&mut rng, n, absorbing);
        let t = rng.random_range(0.1..5.0);
        let diff = (expm(&(&q * t)) - expm_series(&(&q * t))).abs().max();
        ensure!(diff < 1e-10, "expm differs from the series oracle by {diff:e}");
    }
    let space = StateSpace::progressive(4).unwrap();
    let model = PanelModel::new(&space, space.allowed().iter().copied().collect(), vec![1.0, 2.5], vec![]).unwrap();
    let mut params = PanelParams::zeros(&model);
    params.log_lambda = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.5..0.5));
    let p = |s: f64, t: f64| lib(transition_probability(&model, &params, &[], s, t));
    for _ in 0..20 {
        let mut v = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
        v.sort_by(f64::total_cmp);
        let [s, u, t] = v;
        let diff = (p(s, u)? * p(u, t)? - p(s, t)?).abs().max();
        ensure!(diff < 1e-10, "Chapman-Kolmogorov fails at ({s}, {u}, {t}) by {diff:e}");
    }
    Ok(())
}

pub fn panel_closed_form() -> Check {
    let data = lib(PanelDataset::new(
        StateSpace::two_state(),
        vec![],
        vec![PanelSubject {
            id: "a".into(),
            covariates: vec![],
            observations: vec![(0.0, 0), (1.0, 0), (2.0, 1)],
        }],
    ))?;
    let spec = PanelSpec {
        cutpoints: vec![],
        covariates: vec![],
        transitions: None,
        initialization: Default::default(),
    };
    let fit = lib(fit_panel(&data, &spec))?;
    let lambda = fit.params.log_lambda[(0, 0)].exp();
    ensure!((lambda - 2f64.ln()).abs() < 1e-8, "estimated {lambda}, expected ln 2");
    Ok(())
}

pub fn pseudo_checks() -> Check {
    // follow-up ends at 4, after t0
    let ds = lib(simulate_paths(&illness_death_scenario(50, 3, None, 4.0)))?;
    for state in 0..3 {
        let pv = lib(pseudo_occupancy(&ds, state, 2.5))?;
        for i in 0..ds.n_subjects() {
            let at = state_at(ds.subject_records(i), 2.5).expect("followed through t0");
            let indicator = (at == state) as u8 as f64;
            ensure!(
                (pv.values[i] - indicator).abs() < 1e-12,
                "uncensored pseudo-value {} for indicator {indicator}",
                pv.values[i]
            );
        }
    }

    let ds = lib(simulate_paths(&illness_death_scenario(20, 4, Some(0.4), 4.0)))?;
    let n = ds.n_subjects() as f64;
    let e0 = [1.0, 0.0, 0.0];
    let theta = |d: &EpisodeDataset, state: usize, t: f64, rmst: bool| -> Result<f64, String> {
        let occ = lib(occupancy(d, &[t], &e0))?;
        if rmst {
            lib(restricted_mean_sojourn(occ.curve(state), t))
        } else {
            Ok(occ.probs[0][state])
        }
    };
    for (state, t, rmst) in [(0, 1.5, false), (1, 1.5, false), (2, 2.0, false), (1, 2.0, true)] {
        let pv = if rmst {
            lib(pseudo_rmst(&ds, state, t))?
        } else {
            lib(pseudo_occupancy(&ds, state, t))?
        };
        let full = theta(&ds, state, t, rmst)?;
        for i in 0..ds.n_subjects() {
            let brute = n * full - (n - 1.0) * theta(&ds.without_subject(i), state, t, rmst)?;
            ensure!(
                (pv.values[i] - brute).abs() < 1e-12,
                "subject {i}: pseudo-value {} vs leave-one-out {brute}",
                pv.values[i]
            );
        }
        let fit = lib(fit_gee(&pv, &DMatrix::zeros(pv.values.len(), 0), &[], Link::Identity))?;
        let mean = pv.values.iter().sum::<f64>() / n;
        ensure!((fit.beta[0] - mean).abs() < 1e-12, "identity intercept {} vs mean {mean}", fit.beta[0]);
        ensure!(fit.residual < 1e-9, "estimating-equation residual {:e}", fit.residual);
    }
    Ok(())
}

/// Four-state illness-death scenario for the frailty model.
pub fn frailty_scenario(n: usize, seed: u64, theta: f64) -> ScenarioSpec {
    scenario(json!({
        "state_space": {
            "labels": ["healthy", "relapse", "death", "death after relapse"],
            "absorbing": ["death", "death after relapse"],
            "allowed": [["healthy", "relapse"], ["healthy", "death"], ["relapse", "death after relapse"]]
        },
        "intensities": [
            { "from": "healthy", "to": "relapse", "rates": [0.5], "beta": [0.5] },
            { "from": "healthy", "to": "death", "rates": [0.3], "beta": [-0.3] },
            { "from": "relapse", "to": "death after relapse", "rates": [0.8], "beta": [0.4] }
        ],
        "covariates": [{ "name": "x", "kind": "bernoulli", "p": 0.5 }],
        "frailty_variance": theta,
        "censoring": { "administrative": 3.0 },
        "n": n,
        "seed": seed
    }))
}

pub fn frailty_data(n: usize, seed: u64, theta: f64) -> Result<IllnessDeathData, String> {
    lib(IllnessDeathData::from_episodes(&lib(simulate_paths(&frailty_scenario(n, seed, theta)))?))
}

pub fn frailty_reductions() -> Check {
    let data = frailty_data(300, 8, 1.0)?;
    let spec = FrailtySpec::uniform(&[1.0], &["x"]);
    let mut p = FrailtyParams::constant(&spec, 0.0, -0.7);
    p.beta = [vec![0.4], vec![-0.2], vec![0.1]];
    let independent = lib(frailty_loglik(&spec, &p, &data))?;
    p.theta = 1e-8;
    let near = lib(frailty_loglik(&spec, &p, &data))?;
    ensure!((near - independent).abs() < 1e-4, "theta = 1e-8 gives {near}, theta = 0 gives {independent}");

    // relapse at 1, death at 2; rates 1, 1/2, 1; theta = 2
    let one = lib(IllnessDeathData::new(
        vec![],
        vec![IllnessDeathRecord {
            id: "a".into(),
            w1: 1.0,
            w2: 2.0,
            delta1: true,
            delta2: false,
            delta3: true,
            covariates: vec![],
        }],
    ))?;
    let spec = FrailtySpec::uniform(&[], &[]);
    let params = FrailtyParams {
        theta: 2.0,
        log_lambda: [vec![0.0], vec![0.5f64.ln()], vec![0.0]],
        beta: [vec![], vec![], vec![]],
    };
    // H = (1 + 1/2)·1 + 1·(2 - 1); two events give (1 + θ)·(1 + θH)^(-1/θ - 2)
    let h = 2.5f64;
    let expected = 3f64.ln() - 2.5 * (1.0 + 2.0 * h).ln();
    let ll = lib(frailty_loglik(&spec, &params, &one))?;
    ensure!((ll - expected).abs() < 1e-12, "single-subject loglik {ll}, expected {expected}");
    Ok(())
}

pub fn frailty_recovery() -> Check {
    let data = frailty_data(2000, 2024, 2.0)?;
    let spec = FrailtySpec::uniform(&[], &["x"]);
    let fit = lib(fit_frailty(&data, &spec))?;
    let truth_rates = [0.5f64, 0.3, 0.8];
    let truth_beta = [0.5, -0.3, 0.4];
    let se = |i: usize| fit.covariance[(i, i)].sqrt();
    let mut checks = vec![("log theta".to_string(), fit.params.theta.ln(), 2f64.ln(), se(0))];
    for m in 0..3 {
        checks.push((format!("log lambda {m}"), fit.params.log_lambda[m][0], truth_rates[m].ln(), se(1 + m)));
        checks.push((format!("beta {m}"), fit.params.beta[m][0], truth_beta[m], se(4 + m)));
    }
    for (name, est, truth, se) in checks {
        ensure!(
            se.is_finite() && (est - truth).abs() <= 3.0 * se,
            "{name}: estimate {est:.4} (SE {se:.4}) vs true {truth:.4}"
        );
    }
    Ok(())
}

pub fn simulator_checks() -> Check {
    let spec = scenario(json!({
        "state_space": {
            "labels": ["a", "b", "c"],
            "absorbing": ["c"],
            "allowed": [["a", "b"], ["a", "c"], ["b", "a"], ["b", "c"]]
        },
        "intensities": [
            { "from": "a", "to": "b", "rates": [0.9] },
            { "from": "a", "to": "c", "rates": [0.3] },
            { "from": "b", "to": "a", "rates": [0.5] },
            { "from": "b", "to": "c", "rates": [0.7] }
        ],
        "censoring": { "administrative": 1.0 },
        "n": 20000,
        "seed": 99
    }));
    let ds = lib(simulate_paths(&spec))?;
    let q = DMatrix::from_row_slice(3, 3, &[-1.2, 0.9, 0.3, 0.5, -1.2, 0.7, 0.0, 0.0, 0.0]);
    let p = expm(&q);
    let mut counts = [0usize; 3];
    for i in 0..ds.n_subjects() {
        counts[state_at(ds.subject_records(i), 1.0).expect("followed to 1")] += 1;
    }
    let n = ds.n_subjects() as f64;
    for k in 0..3 {
        let (frac, truth) = (counts[k] as f64 / n, p[(0, k)]);
        let se = (truth * (1.0 - truth) / n).sqrt();
        ensure!((frac - truth).abs() <= 3.0 * se, "state {k}: fraction {frac} vs expm {truth}");
    }

    let bytes = |spec: &ScenarioSpec| -> Result<Vec<u8>, String> {
        let mut buf = Vec::new();
        lib(write_episodes(&lib(simulate_paths(spec))?, &mut buf, "censor"))?;
        Ok(buf)
    };
    let small = illness_death_scenario(500, 11, Some(0.3), 4.0);
    ensure!(bytes(&small)? == bytes(&small)?, "same seed produced different data");
    Ok(())
}
