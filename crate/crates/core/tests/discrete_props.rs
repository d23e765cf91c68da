use difflim::discrete::{
    fit_mle, loglik, peaked_set, predict_peak, read_counts_csv, simulate_discrete, write_counts_csv, CountRow,
    CountSeries, FitConfig, FitResult,
};
use difflim::model::{validate_params, Regime};
use difflim::stats::{mean, std_error};
use difflim::{ModelParams, RngStream};
use proptest::prelude::*;

fn general(n: f64, beta: f64, gamma: f64, p: f64) -> ModelParams {
    validate_params(ModelParams { n, beta, gamma, p, regime: Regime::General }, false).unwrap()
}

fn fitted(n_hat: f64, beta_hat: f64, a_hat: f64) -> FitResult {
    FitResult {
        a_hat,
        beta_hat,
        n_hat,
        loglik: 0.0,
        trace: Vec::new(),
        n_max: 1e9,
        converged: true,
        evals: 0,
    }
}

/// Largest `I` of the SIR fluid limit started at `(s0, i0)`.
fn fluid_peak(n: f64, beta: f64, gamma: f64, s0: f64, i0: f64) -> f64 {
    let rho = gamma * n / beta;
    i0 + s0 - rho * (1.0 + (s0 / rho).ln())
}

#[test]
fn first_increment_has_poisson_mean() {
    let params = general(5000.0, 0.4, 0.2, 1e-3);
    let want = (params.a() + 0.4 * 20.0) * (5000.0 - 25.0) / 5000.0;
    let x: Vec<f64> = (0..20_000)
        .map(|r| {
            let mut rng = RngStream::new(8, r);
            simulate_discrete(&params, 20, 5, 1, &mut rng).unwrap().rows[0].delta_c as f64
        })
        .collect();
    assert!((mean(&x) - want).abs() < 4.0 * std_error(&x), "{} vs {want}", mean(&x));
    // Poisson: variance equals mean.
    let v = difflim::stats::variance(&x);
    assert!((v / want - 1.0).abs() < 0.05);
}

#[test]
fn likelihood_prefers_true_population() {
    let (n, beta, gamma) = (1e4, 0.5, 0.25);
    let params = ModelParams::sir(n, beta, gamma);
    let wins = (0..100)
        .filter(|&r| {
            let mut rng = RngStream::new(21, r);
            let s = simulate_discrete(&params, 10, 0, 40, &mut rng).unwrap();
            loglik(&s, 0.0, beta, n, gamma) >= loglik(&s, 0.0, beta, n / 2.0, gamma)
        })
        .count();
    assert!(wins >= 95, "{wins} of 100");
}

#[test]
fn large_population_follows_mean_recursion() {
    let (n, beta, gamma) = (1e7, 0.3, 0.1);
    let params = ModelParams::sir(n, beta, gamma);
    let mut rng = RngStream::new(5, 0);
    let s = simulate_discrete(&params, 100_000, 0, 60, &mut rng).unwrap();
    let (mut sd, mut id) = (n - 1e5, 1e5);
    let mut c_sim = 1e5;
    for row in &s.rows {
        let new = beta * id * sd / n;
        sd -= new;
        id += new - gamma * id;
        c_sim += row.delta_c as f64;
        let c_det = n - sd;
        assert!((c_sim / c_det - 1.0).abs() < 0.02, "t {}: {c_sim} vs {c_det}", row.t);
    }
}

#[test]
fn fit_ignores_instance_id_and_row_order() {
    let params = ModelParams::sir(2e4, 0.5, 0.25);
    let mut rng = RngStream::new(3, 0);
    let s = simulate_discrete(&params, 20, 0, 40, &mut rng).unwrap();
    let mut shuffled = s.clone();
    shuffled.instance_id = "other".into();
    shuffled.rows.reverse();
    let cfg = FitConfig { starts: 6, ..Default::default() };
    let a = fit_mle(&s, 0.25, 1e6, &cfg).unwrap();
    let b = fit_mle(&shuffled, 0.25, 1e6, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(fit_mle(&s, 0.25, 1e6, &cfg).unwrap(), a);
    assert!(a.n_hat >= s.total_infected() as f64 && a.n_hat <= 1e6);
}

#[test]
fn refit_on_simulated_from_fit_is_close() {
    let params = ModelParams::sir(1e4, 0.5, 0.25);
    let mut rng = RngStream::new(9, 0);
    let s = simulate_discrete(&params, 10, 0, 60, &mut rng).unwrap();
    let cfg = FitConfig { starts: 8, fit_a: false, ..Default::default() };
    let fit = fit_mle(&s, 0.25, 1e6, &cfg).unwrap();
    assert!(fit.converged);
    let refit_params = ModelParams::sir(fit.n_hat.round(), fit.beta_hat, 0.25);
    let mut rng = RngStream::new(10, 0);
    let s2 = simulate_discrete(&refit_params, 10, 0, 60, &mut rng).unwrap();
    let fit2 = fit_mle(&s2, 0.25, 1e6, &cfg).unwrap();
    assert!((fit2.n_hat / fit.n_hat - 1.0).abs() < 0.1, "{} vs {}", fit2.n_hat, fit.n_hat);
}

#[test]
fn predicted_peak_without_recovery_is_population() {
    let s = CountSeries {
        instance_id: "x".into(),
        rows: vec![CountRow { t: 1, delta_c: 3, delta_r: Some(0) }],
        i_init: 5,
        r_init: 0,
    };
    let p = predict_peak(&s, &fitted(3000.0, 0.5, 0.0), 0.0, 400, 20, 1, 0).unwrap();
    assert_eq!(p.i_star_hat, 3000.0);
    assert_eq!(p.q05, 3000.0);
}

#[test]
fn predicted_peak_matches_fluid_limit() {
    let (n, beta, gamma) = (2e5, 0.2, 0.1);
    let s = CountSeries {
        instance_id: "x".into(),
        rows: vec![CountRow { t: 1, delta_c: 0, delta_r: Some(0) }],
        i_init: 200,
        r_init: 0,
    };
    let p = predict_peak(&s, &fitted(n, beta, 0.0), gamma, 500, 50, 2, 0).unwrap();
    let want = fluid_peak(n, beta, gamma, n - 200.0, 200.0);
    assert!((p.i_star_hat / want - 1.0).abs() < 0.05, "{} vs {want}", p.i_star_hat);
    assert!(p.q05 <= p.q50 && p.q50 <= p.q95);
}

#[test]
fn predicted_peak_grows_with_population() {
    let s = CountSeries {
        instance_id: "x".into(),
        rows: vec![CountRow { t: 1, delta_c: 4, delta_r: None }],
        i_init: 50,
        r_init: 0,
    };
    let mut prev = 0.0;
    for n in [1e4, 3e4, 1e5] {
        let p = predict_peak(&s, &fitted(n, 0.4, 0.0), 0.2, 300, 40, 4, 0).unwrap();
        assert!(p.i_star_hat > prev);
        prev = p.i_star_hat;
    }
    let mut unconverged = fitted(1e4, 0.4, 0.0);
    unconverged.converged = false;
    assert!(predict_peak(&s, &unconverged, 0.2, 10, 5, 4, 0).is_err());
}

#[test]
fn counts_csv_round_trip() {
    let params = ModelParams::sir(1e4, 0.5, 0.25);
    let coll: Vec<CountSeries> = (0..3)
        .map(|r| simulate_discrete(&params, 10, 0, 15, &mut RngStream::new(1, r)).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_counts_csv(&coll, &mut buf).unwrap();
    assert_eq!(read_counts_csv(&buf[..], 10, 0).unwrap(), coll);
}

fn series_strategy() -> impl Strategy<Value = Vec<CountSeries>> {
    prop::collection::vec(prop::collection::vec(0u64..50, 6), 1..6).prop_map(|all| {
        all.into_iter()
            .enumerate()
            .map(|(j, incs)| CountSeries {
                instance_id: format!("s{j}"),
                rows: incs
                    .into_iter()
                    .enumerate()
                    .map(|(t, dc)| CountRow { t: t as u32 + 1, delta_c: dc, delta_r: None })
                    .collect(),
                i_init: 1,
                r_init: 0,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn peaked_set_grows_with_threshold(coll in series_strategy(), g1 in 0.01f64..0.99, g2 in 0.01f64..0.99, t in 1u32..7) {
        let (lo, hi) = (g1.min(g2), g1.max(g2));
        let small = peaked_set(&coll, lo, t).unwrap();
        let large = peaked_set(&coll, hi, t).unwrap();
        prop_assert!(small.iter().all(|id| large.contains(id)));
    }
}
