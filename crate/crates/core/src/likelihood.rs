//! Exact log-likelihood of an observation set as a function of `N`.
//!
//! Each alive step contributes `ln(rate of the observed jump type) - lambda T_k`,
//! where `lambda` is the total jump rate in the reconstructed state. Steps past
//! the stopping time are deterministic and contribute nothing.

use crate::error::{Error, Result};
use crate::model::ObservationSet;

/// Per-step quantities needed to evaluate the likelihood repeatedly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    /// `C_{k-1}`.
    pub c_prev: f64,
    /// `I_{k-1}`.
    pub i_prev: f64,
    pub dt: f64,
    pub infection: bool,
}

/// The alive steps of `obs`, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedObservations {
    pub steps: Vec<Step>,
    pub c0: u64,
    pub c_last: u64,
}

impl PreparedObservations {
    pub fn new(obs: &ObservationSet) -> Result<Self> {
        let mut steps = Vec::with_capacity(obs.m());
        for k in 1..=obs.m() {
            let prev = obs.state_at(k - 1)?;
            let Some(i_prev) = prev.infected else { break };
            let c_prev = obs.cumulative(k - 1);
            let c_k = obs.cumulative(k);
            let dt = obs.samples[k - 1].inter_arrival;
            if !(dt >= 0.0) || !dt.is_finite() {
                return Err(Error::DataCorruption(format!("T_{k} = {dt} while the path is alive")));
            }
            steps.push(Step {
                c_prev: c_prev as f64,
                i_prev: i_prev as f64,
                dt,
                infection: c_k > c_prev,
            });
        }
        Ok(Self {
            steps,
            c0: obs.c0(),
            c_last: obs.cumulative(obs.m()),
        })
    }

    /// Log-likelihood at population `n`, with `a = p N` held fixed.
    pub fn loglik(&self, n: f64, beta: f64, gamma: f64, a: f64) -> f64 {
        let mut acc = crate::stats::KahanSum::new();
        for st in &self.steps {
            let s = n - st.c_prev;
            if s < 0.0 {
                return f64::NEG_INFINITY;
            }
            let infect = s * (beta * st.i_prev + a) / n;
            let recover = gamma * st.i_prev;
            let rate = if st.infection { infect } else { recover };
            if rate <= 0.0 {
                return f64::NEG_INFINITY;
            }
            acc.add(rate.ln() - (infect + recover) * st.dt);
        }
        acc.value()
    }
}

pub fn log_likelihood(obs: &ObservationSet, n: f64, beta: f64, gamma: f64, a: f64) -> Result<f64> {
    Ok(PreparedObservations::new(obs)?.loglik(n, beta, gamma, a))
}
