//! Fisher information of `O_m` about `N` and the resulting Cramér-Rao floor.
//!
//! For an alive step with `C = C_{k-1}` and `S = N - C`, the exponential
//! holding time and the Bernoulli jump type together carry
//! `C^2 / (N^2 S (S + gamma N / beta))` about `N` (with `a = pN` held fixed in
//! the Bass regime). Dead steps carry nothing.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, precondition, Error, Result};
use crate::likelihood::PreparedObservations;
use crate::model::{validate_params, DiffusionState, ModelParams, Regime};
use crate::parallel::{chunk_ranges, map_indexed};
use crate::rng::RngStream;
use crate::simulate::{next_jump, simulate_ledger_with, JumpOutcome, SimSpec};
use crate::stats::{kahan_sum, KahanSum};

const MC_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub regime: Regime,
    pub n: f64,
    pub m: usize,
    pub i0: u64,
    pub r0: u64,
    /// `J_k` for `k = 1..=m`.
    pub per_k: Vec<f64>,
    pub total: f64,
    /// `1 / (n^2 J)`, infinite when `J = 0`.
    pub cr_floor: f64,
    /// `Pr(E_{k-1} = 1)` for `k = 1..=m`.
    pub survival: Option<Vec<f64>>,
    pub mc_replicates: Option<usize>,
    pub mc_stderr: Option<f64>,
}

impl FisherReport {
    fn assemble(regime: Regime, n: f64, i0: u64, r0: u64, per_k: Vec<f64>) -> Self {
        let total = kahan_sum(per_k.iter().copied());
        Self {
            regime,
            n,
            m: per_k.len(),
            i0,
            r0,
            total,
            cr_floor: floor_from(n, total),
            per_k,
            survival: None,
            mc_replicates: None,
            mc_stderr: None,
        }
    }

    /// `J N^4 / m^3`, the quantity that stays bounded when `m = o(N)`.
    pub fn scaling_ratio(&self) -> f64 {
        let m = self.m as f64;
        self.total * self.n.powi(4) / (m * m * m)
    }
}

fn floor_from(n: f64, total: f64) -> f64 {
    if total > 0.0 {
        1.0 / (n * n * total)
    } else {
        f64::INFINITY
    }
}

/// Which cumulative count enters the `k`-th Bass term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BassIndexing {
    /// `C = k + i0`, the commonly quoted closed form.
    Printed,
    /// `C = k - 1 + i0`, the count in force while the `k`-th holding time runs.
    Exact,
}

pub fn fisher_bass(n: f64, i0: u64, m: usize, indexing: BassIndexing) -> Result<FisherReport> {
    if !(n > 0.0) {
        return Err(invalid("n must be positive"));
    }
    if (m as f64) + (i0 as f64) >= n {
        return Err(precondition(format!(
            "observation horizon exceeds population: m + i0 = {} >= n = {n}",
            m as u64 + i0
        )));
    }
    let shift = match indexing {
        BassIndexing::Printed => 0.0,
        BassIndexing::Exact => 1.0,
    };
    let per_k = (1..=m)
        .map(|k| {
            let c = k as f64 - shift + i0 as f64;
            let s = n - c;
            (c * c) / (n * n * s * s)
        })
        .collect();
    Ok(FisherReport::assemble(Regime::Bass, n, i0, 0, per_k))
}

/// `C^2 / (N^2 (N - C)(N - C + gamma N / beta))`.
pub fn sir_bracket(n: f64, c: f64, gamma_over_beta: f64) -> f64 {
    let s = n - c;
    c * c / (n * n * s * (s + gamma_over_beta * n))
}

fn check_sir(params: &ModelParams, i0: u64, r0: u64) -> Result<DiffusionState> {
    validate_params(*params, false)?;
    if params.regime != Regime::Sir {
        return Err(invalid("SIR Fisher information requires the SIR regime"));
    }
    if !(params.beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    if i0 == 0 {
        return Err(invalid("i0 must be at least 1"));
    }
    DiffusionState::new(params.n_count()?, i0, r0)
}

/// Monte-Carlo estimate of the exact Fisher expression.
///
/// Each summand is estimated by the unconditional mean of
/// `1{E_{k-1}} * bracket(C_{k-1})` over replicates. On a common sample this
/// equals the survival frequency times the conditional mean.
pub fn fisher_sir_mc(
    params: &ModelParams,
    i0: u64,
    r0: u64,
    m: usize,
    replicates: usize,
    seed: u64,
    parallelism: usize,
) -> Result<FisherReport> {
    let init = check_sir(params, i0, r0)?;
    if replicates < 100 {
        return Err(invalid("fisher_sir_mc needs at least 100 replicates"));
    }
    let n = params.n;
    let g = params.gamma / params.beta;
    struct Partial {
        sums: Vec<f64>,
        alive: Vec<u64>,
        totals: Vec<f64>,
    }
    let chunks = chunk_ranges(replicates, MC_CHUNK);
    let partials: Vec<Result<Partial>> = map_indexed(chunks.len(), parallelism, |c| {
        let mut part = Partial {
            sums: vec![0.0; m],
            alive: vec![0; m],
            totals: Vec::with_capacity(chunks[c].len()),
        };
        for r in chunks[c].clone() {
            let mut rng = RngStream::new(seed, r as u64);
            let mut state = init;
            let mut acc = KahanSum::new();
            for k in 1..=m {
                if state.is_terminal() {
                    break;
                }
                let term = sir_bracket(n, state.c as f64, g);
                part.sums[k - 1] += term;
                part.alive[k - 1] += 1;
                acc.add(term);
                match next_jump(&state, params, &mut rng)? {
                    JumpOutcome::Jump { kind, .. } => state = state.after(kind),
                    JumpOutcome::Terminated => break,
                }
            }
            part.totals.push(acc.value());
        }
        Ok(part)
    });
    let mut sums = vec![KahanSum::new(); m];
    let mut alive = vec![0u64; m];
    let mut totals = Vec::with_capacity(replicates);
    for p in partials {
        let p = p?;
        for k in 0..m {
            sums[k].add(p.sums[k]);
            alive[k] += p.alive[k];
        }
        totals.extend(p.totals);
    }
    if m > 0 && alive[0] == 0 {
        return Err(Error::Numeric("no surviving paths".into()));
    }
    let rf = replicates as f64;
    let per_k: Vec<f64> = sums.iter().map(|s| s.value() / rf).collect();
    let mut report = FisherReport::assemble(Regime::Sir, n, i0, r0, per_k);
    report.survival = Some(alive.iter().map(|&a| a as f64 / rf).collect());
    report.mc_replicates = Some(replicates);
    report.mc_stderr = Some(crate::stats::std_error(&totals));
    Ok(report)
}

/// Exact evaluation by propagating the law of `C_k` through the Bernoulli chain.
/// Cost is `O(m^2)`.
pub fn fisher_sir_exact(params: &ModelParams, i0: u64, r0: u64, m: usize) -> Result<FisherReport> {
    let init = check_sir(params, i0, r0)?;
    let n = params.n;
    let g = params.gamma / params.beta;
    let c0 = init.c;
    let mut dist = vec![1.0f64];
    let mut per_k = Vec::with_capacity(m);
    let mut survival = Vec::with_capacity(m);
    for k in 1..=m as u64 {
        let mut next = vec![0.0; dist.len() + 1];
        let mut term = KahanSum::new();
        let mut alive_mass = KahanSum::new();
        for (j, &prob) in dist.iter().enumerate() {
            if prob == 0.0 {
                continue;
            }
            let c = c0 + j as u64;
            let twice = 2 * c;
            let thr = i0 + (k - 1) + 2 * r0;
            let alive = twice > thr && (twice - thr) < init.n();
            if alive {
                let s = (init.n() - c) as f64;
                term.add(prob * sir_bracket(n, c as f64, g));
                alive_mass.add(prob);
                let eta = params.beta * s / (params.beta * s + n * params.gamma);
                next[j + 1] += prob * eta;
                next[j] += prob * (1.0 - eta);
            } else {
                next[j] += prob;
            }
        }
        per_k.push(term.value());
        survival.push(alive_mass.value());
        dist = next;
    }
    let mut report = FisherReport::assemble(Regime::Sir, n, i0, r0, per_k);
    report.survival = Some(survival);
    Ok(report)
}

/// Variance of the numerical score, used as an independent check on the
/// closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVarianceEstimate {
    pub j: f64,
    pub stderr: f64,
    pub replicates: usize,
    pub h: f64,
}

/// Estimates `J` as the sample variance of
/// `(ln L(N + h) - ln L(N - h)) / (2h)` over simulated observation sets.
#[allow(clippy::too_many_arguments)]
pub fn score_variance_oracle(
    params: &ModelParams,
    i0: u64,
    r0: u64,
    m: usize,
    replicates: usize,
    h: Option<f64>,
    seed: u64,
    parallelism: usize,
) -> Result<ScoreVarianceEstimate> {
    if replicates < 2 {
        return Err(invalid("need at least two replicates"));
    }
    let h = h.unwrap_or(params.n * 1e-4);
    if !(h > 0.0) || h >= params.n {
        return Err(invalid(format!("step h = {h} must lie in (0, n)")));
    }
    let spec = SimSpec::new(*params, i0, r0, m, seed);
    spec.validate()?;
    let a = params.a();
    let n = params.n;
    let scores: Vec<Result<f64>> = map_indexed(replicates, parallelism, |r| {
        let mut rng = RngStream::new(seed, r as u64);
        let ledger = simulate_ledger_with(&spec, &mut rng)?;
        let prep = PreparedObservations::new(&ledger.observations())?;
        let up = prep.loglik(n + h, params.beta, params.gamma, a);
        let down = prep.loglik(n - h, params.beta, params.gamma, a);
        Ok((up - down) / (2.0 * h))
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let mean = crate::stats::mean(&scores);
    let sq: Vec<f64> = scores.iter().map(|x| (x - mean) * (x - mean)).collect();
    let rf = replicates as f64;
    let j = kahan_sum(sq.iter().copied()) / (rf - 1.0);
    let stderr = crate::stats::std_error(&sq);
    Ok(ScoreVarianceEstimate { j, stderr, replicates, h })
}

pub fn cramer_rao_rel_error(report: &FisherReport) -> f64 {
    floor_from(report.n, report.total)
}

/// Constants of the survival argument: the Bernoulli rate `p` of the
/// comparison walk, the Chernoff constants `C1`, `C2` and the threshold `D`
/// solving `C1 exp(-C2 D) = 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalThreshold {
    pub p: f64,
    pub c1: f64,
    pub c2: f64,
    pub d: f64,
}

impl SurvivalThreshold {
    /// `max(ceil(D), floor_i0)`, never below 1.
    pub fn initial_infected(&self, floor_i0: u64) -> u64 {
        (self.d.ceil().max(1.0) as u64).max(floor_i0)
    }

    /// Chernoff bound `C1 exp(-C2 I0)` on the extinction probability.
    pub fn extinction_bound(&self, i0: u64) -> f64 {
        self.c1 * (-self.c2 * i0 as f64).exp()
    }
}

pub fn compute_survival_threshold(beta: f64, gamma: f64) -> Result<SurvivalThreshold> {
    if !(beta > 0.0) || !(gamma >= 0.0) {
        return Err(invalid("beta must be positive and gamma non-negative"));
    }
    let p = 0.5 * (beta / (beta + gamma) + 0.5);
    if p <= 0.5 {
        return Err(precondition(format!("p = {p} must exceed 1/2 (requires beta > gamma)")));
    }
    let x = p / 2.0 * (1.0 - 1.0 / (2.0 * p)).powi(2);
    let c1 = 1.0 / x.exp_m1();
    let c2 = 0.5 - 1.0 / (4.0 * p);
    let d = (2.0 * c1).ln() / c2;
    Ok(SurvivalThreshold { p, c1, c2, d })
}

/// Whether the infection probability stays above `p` for the first `m` jumps:
/// `beta (N - m - C0) / (beta (N - m - C0) + N gamma) > p`.
pub fn survival_rate_condition(beta: f64, gamma: f64, n: f64, m: usize, c0: u64, p: f64) -> bool {
    let s = n - m as f64 - c0 as f64;
    s > 0.0 && beta * s / (beta * s + n * gamma) > p
}

/// `(1/2) sum_{k<m} ((k + I0)/2)^2 / (N^3 (N + gamma N / beta))`.
pub fn sir_lower_bound(params: &ModelParams, i0: u64, m: usize) -> f64 {
    let n = params.n;
    let denom = n.powi(3) * (n + params.gamma / params.beta * n);
    0.5 * kahan_sum((0..m).map(|k| {
        let c = (k as f64 + i0 as f64) / 2.0;
        c * c / denom
    }))
}
