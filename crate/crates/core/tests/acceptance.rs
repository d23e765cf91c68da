//! End-to-end acceptance criteria. Each test prints one `criterion N PASS|FAIL`
//! line to stdout (uncaptured) and then asserts.

use std::io::Write;
use std::time::Instant;

use difflim::discrete::{fit_mle, simulate_discrete, FitConfig};
use difflim::estimate::critical_index;
use difflim::experiments::{run_study, sir_estimator_errors, Grid, StudyConfig, StudyKind, StudyResult};
use difflim::fisher::{
    compute_survival_threshold, fisher_bass, score_variance_oracle, survival_rate_condition, BassIndexing,
};
use difflim::fluid::{bass_closed_form, integrate, scaling_check};
use difflim::model::reconstruct_state;
use difflim::simulate::{simulate_batch, SimSpec};
use difflim::stats::{binomial_sigma, median};
use difflim::{ModelParams, RngStream};

const BETA: f64 = 0.5;
const GAMMA: f64 = 0.25;

fn report(id: u32, pass: bool, started: Instant, detail: &str) {
    let line = format!(
        "criterion {id:>2} {} ({:.1}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn sir_i0() -> u64 {
    compute_survival_threshold(BETA, GAMMA).unwrap().initial_infected(40)
}

fn study(kind: StudyKind, grid: Grid, replicates: usize, seed: u64) -> StudyResult {
    run_study(&StudyConfig {
        study: kind,
        grid,
        replicates,
        seed,
        threads: 0,
        output_path: None,
    })
    .unwrap()
}

fn rows_summary(res: &StudyResult) -> String {
    let mut parts: Vec<String> = res
        .rows
        .iter()
        .map(|r| format!("[n={} m={} est={:.4e} ref={:.4e} pass={}]", r.n, r.m, r.estimate, r.reference, r.pass))
        .collect();
    parts.extend(
        res.checks
            .iter()
            .map(|c| format!("<{}: {:.4} in [{:.4}, {:.4}] {}>", c.name, c.value, c.lower, c.upper, c.pass)),
    );
    parts.join(" ")
}

#[test]
fn criterion_01_bass_fisher_matches_score_variance() {
    let started = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for (j, &(n, i0, m)) in [(200.0, 1u64, 30usize), (1e3, 1, 100), (1e4, 1, 464)].iter().enumerate() {
        let t0 = Instant::now();
        let params = ModelParams::bass(n, BETA, 0.0);
        let exact = fisher_bass(n, i0, m, BassIndexing::Exact).unwrap().total;
        let oracle = score_variance_oracle(&params, i0, 0, m, 100_000, None, 100 + j as u64, 0).unwrap();
        let rel = (oracle.j - exact).abs() / exact;
        let ok = rel <= 0.05 && t0.elapsed().as_secs_f64() < 120.0;
        pass &= ok;
        detail.push(format!("(N={n}, m={m}): J={exact:.5e} oracle={:.5e} rel={rel:.4}", oracle.j));
    }
    report(1, pass, started, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_02_fisher_scaling_law() {
    let started = Instant::now();
    let bass = study(
        StudyKind::FisherScaling,
        Grid {
            n: vec![1e3, 1e4, 1e5, 1e6],
            gamma: vec![0.0],
            i0: vec![1],
            ..Grid::default()
        },
        1,
        2,
    );
    let sir = study(
        StudyKind::FisherScaling,
        Grid {
            n: vec![1e3, 1e4, 1e5],
            beta: vec![BETA],
            gamma: vec![GAMMA],
            i0: vec![sir_i0()],
            ..Grid::default()
        },
        2000,
        2,
    );
    let pass = bass.pass && sir.pass && started.elapsed().as_secs_f64() < 600.0;
    report(
        2,
        pass,
        started,
        &format!("bass {} | sir {}", rows_summary(&bass), rows_summary(&sir)),
    );
    assert!(pass);
}

#[test]
fn criterion_03_cramer_rao_floor() {
    let started = Instant::now();
    let n = 1e4;
    let m0 = critical_index(n) as usize;
    let res = study(
        StudyKind::RelErrorScaling,
        Grid {
            n: vec![n],
            m: vec![m0, 4 * m0],
            beta: vec![BETA],
            gamma: vec![0.0],
            p: vec![1.0 / n],
            i0: vec![1],
            ..Grid::default()
        },
        500,
        3,
    );
    let floor_ok = res.rows[0].pass;
    let pass = res.pass && floor_ok && started.elapsed().as_secs_f64() < 900.0;
    report(3, pass, started, &rows_summary(&res));
    assert!(pass);
}

#[test]
fn criterion_04_sir_estimator_rates() {
    let started = Instant::now();
    let n = 1e6;
    let params = ModelParams::sir(n, BETA, GAMMA);
    let i0 = sir_i0();
    let mut med_beta = Vec::new();
    let mut med_gamma = Vec::new();
    let mut detail = Vec::new();
    for (j, &m) in [1000usize, 4000, 16000].iter().enumerate() {
        let errs = sir_estimator_errors(&params, i0, m, 200, 40 + j as u64, 0).unwrap();
        let ok: Vec<(f64, f64)> = errs.iter().flatten().copied().collect();
        let b: Vec<f64> = ok.iter().map(|e| e.0).collect();
        let g: Vec<f64> = ok.iter().map(|e| e.1).collect();
        med_beta.push(median(&b));
        med_gamma.push(median(&g));
        detail.push(format!(
            "m={m}: defined {}/200 median beta {:.4e} gamma {:.4e}",
            ok.len(),
            med_beta[j],
            med_gamma[j]
        ));
    }
    let mut pass = true;
    for k in 0..2 {
        let rb = med_beta[k] / med_beta[k + 1];
        let rg = med_gamma[k] / med_gamma[k + 1];
        pass &= (2.5..=6.0).contains(&rb) && (2.5..=6.0).contains(&rg);
        detail.push(format!("ratios beta {rb:.3} gamma {rg:.3}"));
    }
    pass &= started.elapsed().as_secs_f64() < 600.0;
    report(4, pass, started, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_05_interval_coverage() {
    let started = Instant::now();
    let res = study(
        StudyKind::Coverage,
        Grid {
            n: vec![1e6],
            m: vec![1000],
            beta: vec![BETA],
            gamma: vec![GAMMA],
            i0: vec![0],
            ..Grid::default()
        },
        1000,
        5,
    );
    let pass = res.pass && started.elapsed().as_secs_f64() < 600.0;
    let r = &res.rows[0];
    report(
        5,
        pass,
        started,
        &format!(
            "i0={} coverage {:.4} target {:.4} lower {:.4} ({})",
            r.i0, r.estimate, r.reference, r.lower, r.detail
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_survival_probability() {
    let started = Instant::now();
    let th = compute_survival_threshold(BETA, GAMMA).unwrap();
    let i0 = th.d.ceil() as u64;
    let (n, m, reps) = (1e6, 1000usize, 10_000usize);
    let hyp = survival_rate_condition(BETA, GAMMA, n, m, i0, th.p);
    let spec = SimSpec::new(ModelParams::sir(n, BETA, GAMMA), i0, 0, m, 6);
    let alive = simulate_batch(&spec, reps, 0)
        .into_iter()
        .filter(|l| l.as_ref().unwrap().alive(m))
        .count();
    let freq = alive as f64 / reps as f64;
    let lower = 0.5 - 3.0 * binomial_sigma(0.5, reps);
    let pass = hyp && freq >= lower && started.elapsed().as_secs_f64() < 120.0;
    report(
        6,
        pass,
        started,
        &format!("i0={i0} rate condition {hyp}; Pr(E_m) = {freq:.4} >= {lower:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_bass_time_to_peak() {
    let started = Instant::now();
    let res = study(
        StudyKind::TimeRatio,
        Grid {
            n: vec![1e4, 1e6, 1e8, 1e10],
            beta: vec![BETA],
            gamma: vec![0.0],
            alpha: vec![1.0, 2.0 / 3.0, 0.25],
            ..Grid::default()
        },
        1,
        7,
    );
    let pass = res.pass && started.elapsed().as_secs_f64() < 60.0;
    let detail: Vec<String> = res
        .rows
        .iter()
        .map(|r| format!("a={:.3} N={:e}: {:.4}", r.alpha.unwrap(), r.n, r.estimate))
        .collect();
    report(7, pass, started, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_08_fluid_sandwich() {
    let started = Instant::now();
    let res = study(
        StudyKind::FluidSandwich,
        Grid {
            n: vec![1e6, 1e8, 1e10],
            beta: vec![BETA],
            gamma: vec![GAMMA],
            i0: vec![1],
            ..Grid::default()
        },
        1,
        8,
    );
    let pass = res.pass && started.elapsed().as_secs_f64() < 120.0;
    let detail: Vec<String> = res
        .rows
        .iter()
        .map(|r| format!("N={:e}: {} lower {:.4} upper {:.4} ratio {:.4}", r.n, r.detail, r.lower, r.upper, r.estimate))
        .collect();
    report(8, pass, started, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_09_stochastic_dominance() {
    let started = Instant::now();
    let points = [(1e4, 0.5, 0.25, 500usize, 3u64), (1e5, 0.5, 0.25, 1000, 10), (1e5, 0.6, 0.2, 1000, 2)];
    let mut pass = true;
    let mut detail = Vec::new();
    for (j, &(n, beta, gamma, m, i0)) in points.iter().enumerate() {
        let res = study(
            StudyKind::Dominance,
            Grid {
                n: vec![n],
                m: vec![m],
                beta: vec![beta],
                gamma: vec![gamma],
                i0: vec![i0],
                ..Grid::default()
            },
            10_000,
            90 + j as u64,
        );
        let r = &res.rows[0];
        pass &= res.pass;
        detail.push(format!(
            "(N={n:e}, b={beta}, g={gamma}, i0={i0}): P(tau<=m)={:.4} P(tau_A<=m)={:.4} bound {:.4}{}",
            r.estimate,
            r.reference,
            r.upper,
            if r.detail.starts_with("error") { format!(" {}", r.detail) } else { String::new() }
        ));
    }
    pass &= started.elapsed().as_secs_f64() < 180.0;
    report(9, pass, started, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_10_invariant_suites() {
    let started = Instant::now();
    let mut failures = Vec::new();

    // Reconstruction on simulated ledgers.
    let spec = SimSpec::new(ModelParams::sir(1000.0, BETA, GAMMA), 3, 0, 200, 10);
    let ledgers = simulate_batch(&spec, 10_000, 0);
    let mut mismatches = 0usize;
    for l in &ledgers {
        let l = l.as_ref().unwrap();
        let last = l.terminated_at.unwrap_or(l.len());
        for k in 0..=last {
            let st = l.state(k);
            let rec = reconstruct_state(st.c, k as u64, l.i0, l.r0).unwrap();
            let ok = rec.alive == l.alive(k) && (!rec.alive || rec.infected == Some(st.i));
            mismatches += usize::from(!ok);
        }
    }
    if mismatches > 0 {
        failures.push(format!("reconstruction mismatches {mismatches}"));
    }

    // Fluid conservation.
    let n = 1e6;
    let sir = ModelParams::sir(n, BETA, GAMMA);
    let traj = integrate(&sir, n - 1.0, 1.0, 0.0, 120.0, 1e-10).unwrap();
    let drift = traj.grid.iter().map(|g| (g.s + g.i + g.r - n).abs()).fold(0.0, f64::max);
    if drift > 1e-9 * n {
        failures.push(format!("conservation drift {drift:e}"));
    }

    // Bass closed form against the integrator.
    let bass = ModelParams::bass(1000.0, BETA, 0.01);
    let btraj = integrate(&bass, 1000.0, 0.0, 0.0, 40.0, 1e-10).unwrap();
    let gap = btraj
        .grid
        .iter()
        .map(|g| (g.i - bass_closed_form(&bass, g.t).unwrap()).abs())
        .fold(0.0, f64::max);
    if gap > 1e-6 * 1000.0 {
        failures.push(format!("bass closed form gap {gap:e}"));
    }

    // Population rescaling.
    for eta in [0.37, 10.0] {
        let dev = scaling_check(&sir, n - 10.0, 10.0, 0.0, eta, 100.0, 1e-10).unwrap();
        if dev > 1e-7 {
            failures.push(format!("scaling deviation {dev:e} at eta {eta}"));
        }
    }

    // Bit-reproducibility of every study kind, across worker counts.
    let small = |kind: StudyKind, threads: usize| {
        let (grid, reps) = match kind {
            StudyKind::RelErrorScaling => (
                Grid { n: vec![500.0], m: vec![20, 40], gamma: vec![0.0], p: vec![0.002], ..Grid::default() },
                20,
            ),
            StudyKind::FisherScaling => (Grid { n: vec![300.0, 600.0], i0: vec![5], ..Grid::default() }, 100),
            StudyKind::TimeRatio => (Grid { n: vec![1e4, 1e5], gamma: vec![0.0], alpha: vec![1.0], ..Grid::default() }, 1),
            StudyKind::Coverage => (Grid { n: vec![1e4], m: vec![200], i0: vec![0], ..Grid::default() }, 50),
            StudyKind::Dominance => (Grid { n: vec![1e4], m: vec![100], i0: vec![3], ..Grid::default() }, 50),
            StudyKind::FluidSandwich => (Grid { n: vec![1e6], ..Grid::default() }, 1),
        };
        run_study(&StudyConfig { study: kind, grid, replicates: reps, seed: 11, threads, output_path: None })
            .unwrap()
            .primary_json()
            .unwrap()
    };
    for kind in [
        StudyKind::RelErrorScaling,
        StudyKind::FisherScaling,
        StudyKind::TimeRatio,
        StudyKind::Coverage,
        StudyKind::Dominance,
        StudyKind::FluidSandwich,
    ] {
        if small(kind, 1) != small(kind, 4) || small(kind, 1) != small(kind, 1) {
            failures.push(format!("{kind:?} not reproducible"));
        }
    }

    let pass = failures.is_empty() && started.elapsed().as_secs_f64() < 180.0;
    let detail = if failures.is_empty() {
        format!("reconstruction on {} ledgers, drift {drift:.2e}, bass gap {gap:.2e}, studies reproducible", ledgers.len())
    } else {
        failures.join("; ")
    };
    report(10, pass, started, &detail);
    assert!(pass);
}

#[test]
fn criterion_11_mle_learnability_transition() {
    let started = Instant::now();
    let (n, i_init, horizon, reps) = (1e4, 10u64, 60u32, 50usize);
    let params = ModelParams::sir(n, BETA, GAMMA);
    let cut = n.powf(2.0 / 3.0);
    let mut full_hits = 0usize;
    let mut early = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut rng = RngStream::new(11, r as u64);
        let series = simulate_discrete(&params, i_init, 0, horizon, &mut rng).unwrap();
        let cfg = FitConfig { seed: r as u64, ..FitConfig::default() };
        let fit = fit_mle(&series, GAMMA, 1e6, &cfg).unwrap();
        if ((fit.n_hat - n) / n).abs() <= 0.1 {
            full_hits += 1;
        }
        let mut total = series.i_init as f64;
        let t_cut = series
            .rows
            .iter()
            .find(|row| {
                total += row.delta_c as f64;
                total >= cut
            })
            .map_or(horizon, |row| row.t);
        let short = series.truncated(t_cut);
        early.push(fit_mle(&short, GAMMA, 1e6, &cfg).unwrap().n_hat);
    }
    let lo = early.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = early.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi / lo;
    let pass = full_hits * 5 >= reps * 4 && spread >= 3.0 && started.elapsed().as_secs_f64() < 600.0;
    report(
        11,
        pass,
        started,
        &format!("within 10%: {full_hits}/{reps}; truncated spread x{spread:.2} (N_hat in [{lo:.0}, {hi:.0}])"),
    );
    assert!(pass);
}
