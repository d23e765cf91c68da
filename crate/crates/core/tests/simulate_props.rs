use difflim::model::{reconstruct_state, DiffusionState, JumpKind, JumpLedger};
use difflim::simulate::{
    dominated_walk, infection_probability, jump_rates, next_jump, simulate_batch, simulate_ledger, JumpOutcome,
    SimSpec,
};
use difflim::stats::{binomial_sigma, mean, variance};
use difflim::{ModelParams, RngStream};
use proptest::prelude::*;

#[test]
fn jump_type_frequency_matches_probability() {
    let params = ModelParams::sir(100.0, 0.5, 0.25);
    let st = DiffusionState::new(100, 10, 0).unwrap();
    let want = 450.0 / 700.0;
    assert!((infection_probability(&st, &params) - want).abs() < 1e-15);
    let mut rng = RngStream::new(1, 0);
    let draws = 1_000_000;
    let mut hits = 0usize;
    for _ in 0..draws {
        if let JumpOutcome::Jump { kind: JumpKind::Infection, .. } = next_jump(&st, &params, &mut rng).unwrap() {
            hits += 1;
        }
    }
    let freq = hits as f64 / draws as f64;
    assert!((freq - want).abs() < 3.0 * binomial_sigma(want, draws), "freq {freq}");
}

#[test]
fn holding_time_moments() {
    let params = ModelParams::sir(1000.0, 0.5, 0.25);
    let st = DiffusionState::new(1000, 30, 5).unwrap();
    let (inf, rec) = jump_rates(&st, &params);
    let lambda = inf + rec;
    let mut rng = RngStream::new(2, 0);
    let dts: Vec<f64> = (0..200_000)
        .map(|_| match next_jump(&st, &params, &mut rng).unwrap() {
            JumpOutcome::Jump { dt, .. } => dt,
            JumpOutcome::Terminated => unreachable!(),
        })
        .collect();
    let n = dts.len() as f64;
    let m = mean(&dts);
    let v = variance(&dts);
    // sd of the mean is 1/(lambda sqrt n); sd of the variance is about sqrt(8)/(lambda^2 sqrt n).
    assert!((m - 1.0 / lambda).abs() < 3.0 / (lambda * n.sqrt()));
    assert!((v - 1.0 / (lambda * lambda)).abs() < 3.0 * 8f64.sqrt() / (lambda * lambda * n.sqrt()));
}

#[test]
fn first_holding_time_mean_over_replicates() {
    let params = ModelParams::sir(500.0, 0.5, 0.25);
    let spec = SimSpec::new(params, 4, 0, 1, 9);
    let st = DiffusionState::new(500, 4, 0).unwrap();
    let (inf, rec) = jump_rates(&st, &params);
    let lambda = inf + rec;
    let t1: Vec<f64> = simulate_batch(&spec, 100_000, 0)
        .into_iter()
        .map(|l| l.unwrap().entries[0].inter_arrival)
        .collect();
    assert!((mean(&t1) - 1.0 / lambda).abs() < 3.0 / (lambda * (t1.len() as f64).sqrt()));
}

#[test]
fn bass_cumulative_is_deterministic() {
    let spec = SimSpec::new(ModelParams::bass(5.0, 0.5, 0.1), 1, 0, 4, 1);
    let l = simulate_ledger(&spec).unwrap();
    for k in 0..=4 {
        assert_eq!(l.state(k).c, 1 + k as u64);
        assert_eq!(l.state(k).s, 5 - 1 - k as u64);
    }
}

#[test]
fn early_recovery_freezes_ledger() {
    // Find a seed whose first jump is a recovery.
    let params = ModelParams::sir(50.0, 0.1, 5.0);
    let l = (0..100)
        .map(|s| simulate_ledger(&SimSpec::new(params, 1, 0, 6, s)).unwrap())
        .find(|l| l.entries[0].kind == JumpKind::Recovery)
        .expect("recovery dominates at these rates");
    assert_eq!(l.terminated_at, Some(1));
    for e in &l.entries[1..] {
        assert_eq!(e.kind, JumpKind::Frozen);
        assert!(e.inter_arrival.is_infinite());
        assert_eq!(e.state_after, l.state(1));
    }
}

#[test]
fn batch_replicate_zero_equals_single_run() {
    let spec = SimSpec::new(ModelParams::sir(300.0, 0.5, 0.25), 3, 1, 40, 21);
    let single = simulate_ledger(&spec).unwrap();
    let batch = simulate_batch(&spec, 3, 2);
    assert_eq!(batch[0].as_ref().unwrap(), &single);
}

#[test]
fn batch_output_is_independent_of_worker_count() {
    let spec = SimSpec::new(ModelParams::sir(300.0, 0.5, 0.25), 3, 0, 60, 5);
    let ser = |threads| {
        let mut buf = Vec::new();
        for l in simulate_batch(&spec, 50, threads) {
            l.unwrap().write_csv(&mut buf).unwrap();
        }
        buf
    };
    assert_eq!(ser(1), ser(8));
}

#[test]
fn ledger_csv_round_trip() {
    let spec = SimSpec::new(ModelParams::sir(40.0, 0.3, 0.3), 2, 1, 80, 4);
    let l = simulate_ledger(&spec).unwrap();
    let mut buf = Vec::new();
    l.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    if l.terminated_at.is_some() {
        assert!(text.lines().last().unwrap().contains(",X,"));
        assert!(text.contains("terminated"));
    }
    let back = JumpLedger::read_csv(&buf[..], Some(80)).unwrap();
    assert_eq!(back, l);
}

#[test]
fn degenerate_walks() {
    let spec = SimSpec::new(ModelParams::sir(1000.0, 0.5, 0.25), 1, 0, 50, 0);
    let mut rng = RngStream::new(0, 0);
    let w = dominated_walk(&spec, 1.0, &mut rng).unwrap();
    assert_eq!(w.stopped_at, None);
    assert_eq!(*w.path.last().unwrap(), 51);
    let w = dominated_walk(&spec, 0.0, &mut rng).unwrap();
    assert_eq!(w.stopped_at, Some(1));
}

/// One-sided two-sample Kolmogorov-Smirnov: the walk's empirical CDF at `m`
/// lies above the cumulative count's, up to the 1% critical value.
#[test]
fn walk_is_stochastically_smaller_than_cumulative_count() {
    let (beta, gamma) = (0.5, 0.25);
    let th = difflim::fisher::compute_survival_threshold(beta, gamma).unwrap();
    let (n, m, i0, reps) = (1e5, 400usize, 5u64, 10_000usize);
    assert!(difflim::fisher::survival_rate_condition(beta, gamma, n, m, i0, th.p));
    let spec = SimSpec::new(ModelParams::sir(n, beta, gamma), i0, 0, m, 31);
    let mut c: Vec<u64> = simulate_batch(&spec, reps, 0)
        .into_iter()
        .map(|l| l.unwrap().state(m).c)
        .collect();
    let mut a: Vec<u64> = (0..reps)
        .map(|r| {
            let mut rng = RngStream::new(32, r as u64);
            *dominated_walk(&spec, th.p, &mut rng).unwrap().path.last().unwrap()
        })
        .collect();
    c.sort_unstable();
    a.sort_unstable();
    let cdf = |v: &[u64], x: u64| v.partition_point(|&y| y <= x) as f64 / v.len() as f64;
    let worst = c
        .iter()
        .chain(a.iter())
        .map(|&x| cdf(&c, x) - cdf(&a, x))
        .fold(f64::NEG_INFINITY, f64::max);
    let crit = ((1.0f64 / 0.01).ln() / 2.0 * 2.0 / reps as f64).sqrt();
    assert!(worst <= crit, "F_C - F_A reaches {worst} > {crit}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reconstruction_matches_simulator(seed in 0u64..10_000, i0 in 1u64..6, r0 in 0u64..4, gamma in 0.05f64..1.0) {
        let spec = SimSpec::new(ModelParams::sir(60.0, 0.5, gamma), i0, r0, 150, seed);
        let l = simulate_ledger(&spec).unwrap();
        let last = l.terminated_at.unwrap_or(l.len());
        for k in 0..=last {
            let st = l.state(k);
            let rec = reconstruct_state(st.c, k as u64, i0, r0).unwrap();
            // I = N stops the path while the count formula still says alive.
            if st.i == 60 {
                continue;
            }
            prop_assert_eq!(rec.alive, l.alive(k));
            if rec.alive {
                prop_assert_eq!(rec.infected, Some(st.i));
            }
        }
    }

    #[test]
    fn conservation_on_every_state(seed in 0u64..10_000, p in 0.0f64..0.2, gamma in 0.0f64..1.0) {
        let params = difflim::model::validate_params(
            ModelParams { n: 80.0, beta: 0.6, gamma, p, regime: difflim::model::Regime::General },
            false,
        ).unwrap();
        let spec = SimSpec::new(params, 2, 1, 120, seed);
        let l = simulate_ledger(&spec).unwrap();
        let mut prev = l.state(0);
        for (k, e) in l.entries.iter().enumerate() {
            let st = e.state_after;
            prop_assert_eq!(st.s + st.i + st.r, 80);
            prop_assert_eq!(st.c, st.i + st.r);
            prop_assert!(st.c - prev.c <= 1);
            prop_assert_eq!(e.kind == JumpKind::Infection, st.c == prev.c + 1);
            if k > 0 {
                let expect = l.entries[k - 1].t + e.inter_arrival;
                prop_assert!(e.t == expect || (e.t.is_infinite() && e.inter_arrival.is_infinite()));
            }
            prev = st;
        }
    }

    #[test]
    fn truncation_is_a_prefix_and_idempotent(seed in 0u64..1000, m1 in 0usize..40, m2 in 0usize..40) {
        let spec = SimSpec::new(ModelParams::sir(200.0, 0.5, 0.25), 3, 0, 40, seed);
        let obs = simulate_ledger(&spec).unwrap().observations();
        let (lo, hi) = (m1.min(m2), m1.max(m2));
        let t_hi = obs.truncated(hi);
        prop_assert_eq!(t_hi.truncated(lo), obs.truncated(lo));
        prop_assert_eq!(t_hi.truncated(hi), t_hi.clone());
        prop_assert_eq!(&t_hi.samples[..], &obs.samples[..hi]);
    }
}
