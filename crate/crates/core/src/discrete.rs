//! Discrete-time Poisson observation model with unit epochs.
//!
//! New infections in epoch `t` are `Poisson((a + beta I[t-1]) S[t-1] / N)` and
//! new recoveries `Poisson(gamma I[t-1])`. Draws are truncated so that no
//! compartment goes negative.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, precondition, Error, Result};
use crate::model::{validate_params, ModelParams};
use crate::optimize::{nelder_mead, NelderMeadConfig};
use crate::parallel::map_indexed;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub t: u32,
    pub delta_c: u64,
    pub delta_r: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSeries {
    pub instance_id: String,
    pub rows: Vec<CountRow>,
    pub i_init: u64,
    pub r_init: u64,
}

impl CountSeries {
    pub fn sorted(&self) -> Self {
        let mut out = self.clone();
        out.rows.sort_by_key(|r| r.t);
        out
    }

    /// Epochs must run `1, 2, ..., T` once sorted.
    pub fn check_contiguous(&self) -> Result<()> {
        let s = self.sorted();
        for (idx, row) in s.rows.iter().enumerate() {
            if row.t as usize != idx + 1 {
                return Err(Error::DataCorruption(format!(
                    "instance '{}': epochs must be contiguous from 1, found t = {} at position {}",
                    self.instance_id,
                    row.t,
                    idx + 1
                )));
            }
        }
        Ok(())
    }

    /// `i_init + r_init + sum delta_c`.
    pub fn total_infected(&self) -> u64 {
        self.i_init + self.r_init + self.rows.iter().map(|r| r.delta_c).sum::<u64>()
    }

    pub fn recoveries_observed(&self) -> bool {
        self.rows.iter().all(|r| r.delta_r.is_some())
    }

    /// Prefix of the first `horizon` epochs.
    pub fn truncated(&self, horizon: u32) -> Self {
        let mut out = self.sorted();
        out.rows.retain(|r| r.t <= horizon);
        out
    }
}

fn poisson_draw(lambda: f64, rng: &mut RngStream) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(d) => {
            let x: f64 = d.sample(rng);
            x as u64
        }
        Err(_) => 0,
    }
}

/// Integer compartments for the forward simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Counts {
    s: u64,
    i: u64,
    r: u64,
}

fn step_counts(st: Counts, a: f64, beta: f64, gamma: f64, n: f64, rng: &mut RngStream) -> (Counts, u64, u64) {
    let lambda = (a + beta * st.i as f64) * st.s as f64 / n;
    let dc = poisson_draw(lambda, rng).min(st.s);
    let dr = poisson_draw(gamma * st.i as f64, rng).min(st.i);
    let next = Counts {
        s: st.s - dc,
        i: st.i + dc - dr,
        r: st.r + dr,
    };
    (next, dc, dr)
}

pub fn simulate_discrete(
    params: &ModelParams,
    i_init: u64,
    r_init: u64,
    horizon: u32,
    rng: &mut RngStream,
) -> Result<CountSeries> {
    validate_params(*params, false)?;
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    let n = params.n_count()?;
    if i_init + r_init > n {
        return Err(invalid("i_init + r_init exceeds n"));
    }
    let mut st = Counts {
        s: n - i_init - r_init,
        i: i_init,
        r: r_init,
    };
    let mut rows = Vec::with_capacity(horizon as usize);
    for t in 1..=horizon {
        let (next, dc, dr) = step_counts(st, params.a(), params.beta, params.gamma, params.n, rng);
        rows.push(CountRow {
            t,
            delta_c: dc,
            delta_r: Some(dr),
        });
        st = next;
    }
    Ok(CountSeries {
        instance_id: format!("sim-{}-{}", rng.seed(), rng.stream_id()),
        rows,
        i_init,
        r_init,
    })
}

/// `ln p(x; lambda)` for the Poisson pmf, with `p(0; 0) = 1`.
pub fn poisson_log_pmf(x: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if x == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let xf = x as f64;
    xf * lambda.ln() - lambda - ln_gamma(xf + 1.0)
}

/// Poisson log-likelihood of the new-infection counts.
///
/// Latent `(S, I, R)` are rolled forward from the observed increments. When a
/// row has no recovery count, `round(gamma I[t-1])` recoveries are imputed.
pub fn loglik(series: &CountSeries, a: f64, beta: f64, n: f64, gamma: f64) -> f64 {
    loglik_with_schedule(series, a, beta, n, gamma, None)
}

/// As [`loglik`], with an optional per-epoch transmission rate replacing `beta`.
pub fn loglik_with_schedule(
    series: &CountSeries,
    a: f64,
    beta: f64,
    n: f64,
    gamma: f64,
    beta_schedule: Option<&[f64]>,
) -> f64 {
    let mut rows: Vec<&CountRow> = series.rows.iter().collect();
    rows.sort_by_key(|r| r.t);
    let mut s = n - series.i_init as f64 - series.r_init as f64;
    let mut i = series.i_init as f64;
    let mut acc = crate::stats::KahanSum::new();
    for (idx, row) in rows.iter().enumerate() {
        let b = beta_schedule.and_then(|v| v.get(idx).copied()).unwrap_or(beta);
        let lambda = (a + b * i) * s.max(0.0) / n;
        let term = poisson_log_pmf(row.delta_c, lambda);
        if term == f64::NEG_INFINITY {
            return term;
        }
        acc.add(term);
        let dr = match row.delta_r {
            Some(r) => r as f64,
            None => (gamma * i).round(),
        }
        .min(i + row.delta_c as f64);
        s -= row.delta_c as f64;
        i += row.delta_c as f64 - dr;
    }
    acc.value()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub starts: usize,
    pub seed: u64,
    pub ftol: f64,
    pub max_evals: usize,
    /// Fit `a` on `[0, a_max]`; otherwise `a = 0`.
    pub fit_a: bool,
    pub a_max: f64,
    pub beta_max: f64,
    pub parallelism: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            starts: 16,
            seed: 0,
            ftol: 1e-9,
            max_evals: 5000,
            fit_a: true,
            a_max: 10.0,
            beta_max: 2.0,
            parallelism: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a_hat: f64,
    pub beta_hat: f64,
    pub n_hat: f64,
    pub loglik: f64,
    /// Best log-likelihood after each simplex iteration of the winning start.
    pub trace: Vec<f64>,
    pub n_max: f64,
    pub converged: bool,
    pub evals: usize,
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

struct Box3 {
    fit_a: bool,
    a_max: f64,
    beta_max: f64,
    ln_lo: f64,
    ln_hi: f64,
}

impl Box3 {
    fn decode(&self, u: &[f64]) -> (f64, f64, f64) {
        let (a, rest) = if self.fit_a {
            (self.a_max * logistic(u[0]), &u[1..])
        } else {
            (0.0, u)
        };
        let beta = self.beta_max * logistic(rest[0]);
        let n = (self.ln_lo + (self.ln_hi - self.ln_lo) * logistic(rest[1])).exp();
        (a, beta, n)
    }

    fn encode(&self, a: f64, beta: f64, n: f64) -> Vec<f64> {
        let mut u = Vec::with_capacity(3);
        if self.fit_a {
            u.push(logit(a / self.a_max));
        }
        u.push(logit(beta / self.beta_max));
        let span = (self.ln_hi - self.ln_lo).max(1e-12);
        u.push(logit((n.ln() - self.ln_lo) / span));
        u
    }
}

/// Box-constrained maximum likelihood over `(a, beta, N)`.
///
/// Each coordinate is mapped to the real line through a logistic transform
/// (log scale for `N`), and a simplex search is run from `starts` points:
/// `N` on a log grid over `[C_total, n_max]`, `beta` and `a` drawn from the
/// seeded stream. The best start is polished by one more simplex run.
pub fn fit_mle(series: &CountSeries, gamma_known: f64, n_max: f64, cfg: &FitConfig) -> Result<FitResult> {
    let series = series.sorted();
    if !series.rows.iter().any(|r| r.delta_c > 0) {
        return Err(invalid("series has no positive counts"));
    }
    let c_total = series.total_infected() as f64;
    if !(n_max >= c_total) {
        return Err(invalid(format!("n_max = {n_max} is below the observed cumulative count {c_total}")));
    }
    if cfg.starts == 0 {
        return Err(invalid("need at least one start"));
    }
    let bx = Box3 {
        fit_a: cfg.fit_a,
        a_max: cfg.a_max,
        beta_max: cfg.beta_max,
        ln_lo: c_total.max(1.0).ln(),
        ln_hi: n_max.ln(),
    };
    let nm_cfg = NelderMeadConfig {
        ftol: cfg.ftol,
        max_evals: cfg.max_evals,
        initial_step: 0.5,
    };
    let objective = |u: &[f64]| {
        let (a, beta, n) = bx.decode(u);
        -loglik(&series, a, beta, n, gamma_known)
    };
    let mut rng = RngStream::new(cfg.seed, 0);
    let starts: Vec<Vec<f64>> = (0..cfg.starts)
        .map(|j| {
            let frac = (j as f64 + 0.5) / cfg.starts as f64;
            let n0 = (bx.ln_lo + frac * (bx.ln_hi - bx.ln_lo)).exp();
            let beta0 = 0.01 + rng.uniform() * (cfg.beta_max - 0.01).max(0.0);
            let a0 = if cfg.fit_a { rng.uniform() * cfg.a_max } else { 0.0 };
            bx.encode(a0, beta0, n0)
        })
        .collect();
    let runs = map_indexed(starts.len(), cfg.parallelism, |j| nelder_mead(objective, &starts[j], &nm_cfg));
    let best = runs
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.fx.total_cmp(&b.fx).then(ia.cmp(ib)))
        .map(|(_, r)| r.clone())
        .expect("at least one start");
    let polish = nelder_mead(objective, &best.x, &nm_cfg);
    let evals = runs.iter().map(|r| r.evals).sum::<usize>() + polish.evals;
    let (fin, mut trace) = if polish.fx <= best.fx {
        let mut t = best.trace.clone();
        t.extend(polish.trace.iter());
        (polish, t)
    } else {
        (best, Vec::new())
    };
    for v in trace.iter_mut() {
        *v = -*v;
    }
    let (a_hat, beta_hat, n_hat) = bx.decode(&fin.x);
    let ll = -fin.fx;
    Ok(FitResult {
        a_hat,
        beta_hat,
        n_hat,
        loglik: ll,
        trace,
        n_max,
        converged: fin.converged && ll.is_finite(),
        evals,
    })
}

/// Instances whose increment at `t` is at most `gamma1` times their running
/// maximum increment up to `t`.
pub fn peaked_set(collection: &[CountSeries], gamma1: f64, t: u32) -> Result<Vec<String>> {
    if !(gamma1 > 0.0 && gamma1 < 1.0) {
        return Err(invalid(format!("gamma1 = {gamma1} must lie in (0, 1)")));
    }
    let mut out = Vec::new();
    for series in collection {
        let s = series.sorted();
        let Some(cur) = s.rows.iter().find(|r| r.t == t) else {
            return Err(precondition(format!("instance '{}' has no epoch {t}", series.instance_id)));
        };
        let running_max = s.rows.iter().filter(|r| r.t <= t).map(|r| r.delta_c).max().unwrap_or(0);
        if cur.delta_c as f64 <= gamma1 * running_max as f64 {
            out.push(series.instance_id.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPrediction {
    /// Mean over paths of the maximum infected count.
    pub i_star_hat: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub stderr: f64,
    pub replicates: usize,
}

/// Forward-simulate the fitted model from the current state and summarise the
/// per-path peak of `I`.
pub fn predict_peak(
    series: &CountSeries,
    fit: &FitResult,
    gamma_known: f64,
    horizon: u32,
    replicates: usize,
    seed: u64,
    parallelism: usize,
) -> Result<PeakPrediction> {
    if !fit.converged {
        return Err(precondition("peak prediction needs a converged fit"));
    }
    if replicates == 0 {
        return Err(invalid("replicates must be at least 1"));
    }
    let series = series.sorted();
    let n = fit.n_hat.round().max(series.total_infected() as f64);
    // Roll the observed history forward to the current state.
    let mut s = n as u64 - series.i_init - series.r_init;
    let mut i = series.i_init;
    let mut r = series.r_init;
    let mut hist_max = i;
    for row in &series.rows {
        let dc = row.delta_c.min(s);
        let dr = row
            .delta_r
            .unwrap_or_else(|| (gamma_known * i as f64).round() as u64)
            .min(i + dc);
        s -= dc;
        i = i + dc - dr;
        r += dr;
        hist_max = hist_max.max(i);
    }
    let start = Counts { s, i, r };
    let peaks: Vec<f64> = map_indexed(replicates, parallelism, |k| {
        let mut rng = RngStream::new(seed, k as u64);
        let mut st = start;
        let mut peak = hist_max;
        for _ in 0..horizon {
            st = step_counts(st, fit.a_hat, fit.beta_hat, gamma_known, n, &mut rng).0;
            peak = peak.max(st.i);
            if st.i == 0 && fit.a_hat == 0.0 {
                break;
            }
        }
        peak as f64
    });
    Ok(PeakPrediction {
        i_star_hat: crate::stats::mean(&peaks),
        q05: crate::stats::quantile(&peaks, 0.05),
        q50: crate::stats::quantile(&peaks, 0.5),
        q95: crate::stats::quantile(&peaks, 0.95),
        stderr: if replicates > 1 { crate::stats::std_error(&peaks) } else { 0.0 },
        replicates,
    })
}

/// Read `instance_id,t,delta_c[,delta_r]`, grouping rows by instance in order
/// of first appearance.
pub fn read_counts_csv<R: Read>(r: R, i_init: u64, r_init: u64) -> Result<Vec<CountSeries>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci), Some(ct), Some(cc)) = (col("instance_id"), col("t"), col("delta_c")) else {
        return Err(Error::Parse("counts CSV needs columns instance_id,t,delta_c".into()));
    };
    let cr = col("delta_r");
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<CountRow>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").trim();
        let parse = |i: usize| -> Result<u64> {
            get(i)
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("bad count '{}' in column {}", get(i), headers[i])))
        };
        let id = get(ci).to_string();
        let row = CountRow {
            t: parse(ct)? as u32,
            delta_c: parse(cc)?,
            delta_r: match cr {
                Some(i) if !get(i).is_empty() => Some(parse(i)?),
                _ => None,
            },
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(row);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let rows = groups.remove(&id).unwrap_or_default();
        let s = CountSeries {
            instance_id: id,
            rows,
            i_init,
            r_init,
        }
        .sorted();
        s.check_contiguous()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_counts_csv<W: Write>(collection: &[CountSeries], w: W) -> Result<()> {
    let with_r = collection.iter().any(|s| s.rows.iter().any(|r| r.delta_r.is_some()));
    let mut out = csv::Writer::from_writer(w);
    if with_r {
        out.write_record(["instance_id", "t", "delta_c", "delta_r"])?;
    } else {
        out.write_record(["instance_id", "t", "delta_c"])?;
    }
    for s in collection {
        for r in &s.rows {
            let mut rec = vec![s.instance_id.clone(), r.t.to_string(), r.delta_c.to_string()];
            if with_r {
                rec.push(r.delta_r.map(|v| v.to_string()).unwrap_or_default());
            }
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}
