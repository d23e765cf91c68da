//! Exact event-driven simulation of the jump process.
//!
//! Each jump consumes two uniforms from the stream, in a fixed order: the
//! first sets the holding time `T = -ln(U) / lambda`, the second decides
//! between infection and recovery. Both are drawn even when the type is
//! certain, so the stream position depends only on the jump index.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{validate_params, DiffusionState, JumpKind, JumpLedger, LedgerEntry, ModelParams};
use crate::parallel::map_indexed;
use crate::rng::RngStream;

/// Everything needed to produce one ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub params: ModelParams,
    pub i0: u64,
    pub r0: u64,
    pub max_jumps: usize,
    pub seed: u64,
    pub stream_id: u64,
}

impl SimSpec {
    pub fn new(params: ModelParams, i0: u64, r0: u64, max_jumps: usize, seed: u64) -> Self {
        Self {
            params,
            i0,
            r0,
            max_jumps,
            seed,
            stream_id: 0,
        }
    }

    pub fn validate(&self) -> Result<DiffusionState> {
        validate_params(self.params, false)?;
        let n = self.params.n_count()?;
        if self.i0 == 0 {
            return Err(invalid("i0 must be at least 1 to start the process"));
        }
        if self.max_jumps == 0 {
            return Err(invalid("max_jumps must be at least 1"));
        }
        DiffusionState::new(n, self.i0, self.r0)
    }

    pub fn rng(&self) -> RngStream {
        RngStream::new(self.seed, self.stream_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JumpOutcome {
    Jump { dt: f64, kind: JumpKind },
    Terminated,
}

/// Infection and recovery rates `(beta S I / N + p S, gamma I)` in `state`.
pub fn jump_rates(state: &DiffusionState, params: &ModelParams) -> (f64, f64) {
    let s = state.s as f64;
    let i = state.i as f64;
    let infect = s * (params.beta * i + params.p * params.n) / params.n;
    let recover = params.gamma * i;
    (infect, recover)
}

/// Probability that the next jump from `state` is an infection.
pub fn infection_probability(state: &DiffusionState, params: &ModelParams) -> f64 {
    let (inf, rec) = jump_rates(state, params);
    inf / (inf + rec)
}

pub fn next_jump(state: &DiffusionState, params: &ModelParams, rng: &mut RngStream) -> Result<JumpOutcome> {
    if state.is_terminal() {
        return Ok(JumpOutcome::Terminated);
    }
    let (inf, rec) = jump_rates(state, params);
    let total = inf + rec;
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric(format!(
            "degenerate rates: total jump rate {total} in state {state:?}"
        )));
    }
    let dt = rng.exponential(total);
    let kind = if rng.uniform() * total < inf {
        JumpKind::Infection
    } else {
        JumpKind::Recovery
    };
    Ok(JumpOutcome::Jump { dt, kind })
}

pub fn simulate_ledger(spec: &SimSpec) -> Result<JumpLedger> {
    let mut rng = spec.rng();
    simulate_ledger_with(spec, &mut rng)
}

/// Simulate `spec.max_jumps` entries, drawing from a caller-owned stream.
pub fn simulate_ledger_with(spec: &SimSpec, rng: &mut RngStream) -> Result<JumpLedger> {
    let init = spec.validate()?;
    let mut ledger = JumpLedger {
        n: init.n(),
        i0: spec.i0,
        r0: spec.r0,
        entries: Vec::with_capacity(spec.max_jumps),
        terminated_at: None,
    };
    let mut state = init;
    let mut t = 0.0;
    for k in 1..=spec.max_jumps {
        match next_jump(&state, &spec.params, rng)? {
            JumpOutcome::Jump { dt, kind } => {
                t += dt;
                state = state.after(kind);
                ledger.entries.push(LedgerEntry {
                    t,
                    inter_arrival: dt,
                    kind,
                    state_after: state,
                });
            }
            JumpOutcome::Terminated => {
                ledger.terminated_at = Some(k - 1);
                break;
            }
        }
    }
    if ledger.terminated_at.is_none() && state.is_terminal() && ledger.entries.len() == spec.max_jumps {
        // Stopped exactly at the horizon.
        ledger.terminated_at = Some(spec.max_jumps);
    }
    ledger.materialize(spec.max_jumps);
    Ok(ledger)
}

/// Replicate `r` uses stream `(spec.seed, r)`; failures are kept per replicate.
pub fn simulate_batch(spec: &SimSpec, replicates: usize, parallelism: usize) -> Vec<Result<JumpLedger>> {
    map_indexed(replicates, parallelism, |r| {
        let mut rng = RngStream::new(spec.seed, r as u64);
        simulate_ledger_with(spec, &mut rng)
    })
}

/// Comparison walk `A_k` used to bound the extinction probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominatedWalk {
    /// `A_0, ..., A_m`.
    pub path: Vec<u64>,
    /// `tau_A`, the first `k` with `A_k <= r_k`.
    pub stopped_at: Option<usize>,
}

/// `A_k = C_0 + sum X_i` with `X_i ~ Bern(p_bern)`, frozen once
/// `A_k <= r_k = (I_0 + k + 2 R_0) / 2`.
pub fn dominated_walk(spec: &SimSpec, p_bern: f64, rng: &mut RngStream) -> Result<DominatedWalk> {
    if !(0.0..=1.0).contains(&p_bern) {
        return Err(invalid(format!("p_bern = {p_bern} must lie in [0, 1]")));
    }
    let c0 = spec.i0 + spec.r0;
    let mut path = Vec::with_capacity(spec.max_jumps + 1);
    path.push(c0);
    let mut a = c0;
    let mut stopped_at = None;
    for k in 1..=spec.max_jumps as u64 {
        let step = rng.bernoulli(p_bern);
        if stopped_at.is_none() {
            a += u64::from(step);
            if 2 * a <= spec.i0 + k + 2 * spec.r0 {
                stopped_at = Some(k as usize);
            }
        }
        path.push(a);
    }
    Ok(DominatedWalk { path, stopped_at })
}
