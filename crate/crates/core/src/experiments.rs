//! Seeded Monte-Carlo studies over parameter grids.
//!
//! Every grid point yields one [`StudyRow`] with a fixed column layout; checks
//! that compare points (trends, ratios between grid neighbours) are reported as
//! [`StudyCheck`]s. Replicate `r` of point `j` always draws from
//! `RngStream(derive_seed(seed, j), r)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimate::{
    bass_time_ratio, critical_index, default_delta, estimate_sir, sir_confidence_intervals,
};
use crate::fisher::{
    compute_survival_threshold, fisher_bass, fisher_sir_mc, BassIndexing, SurvivalThreshold,
};
use crate::fluid::{default_t_max, integrate, peak_bounds, peak_times};
use crate::likelihood::PreparedObservations;
use crate::model::{format_f64, ModelParams, ObservationSet};
use crate::optimize::golden_section_max;
use crate::parallel::map_indexed;
use crate::rng::{derive_seed, RngStream};
use crate::simulate::{dominated_walk, simulate_ledger_with, SimSpec};
use crate::stats::{binomial_sigma, mean, std_error};

/// Slack factor on the Cramér–Rao floor allowed for Monte-Carlo noise and the
/// finite-sample bias of the MLE.
pub const FLOOR_SLACK: f64 = 0.8;
/// Number of standard errors allowed in frequency comparisons.
pub const SIGMA_SLACK: f64 = 3.0;
/// The MLE of `N` is searched on `[C_m, MLE_SPAN * C_m]`.
pub const MLE_SPAN: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    RelErrorScaling,
    FisherScaling,
    TimeRatio,
    Coverage,
    Dominance,
    FluidSandwich,
}

impl std::str::FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Parse(format!("unknown study '{s}'")))
    }
}

/// Parameter lists. Points are the Cartesian product, iterated with `n` and
/// then `m` innermost. An empty `m` list means `m = ceil(N^{2/3})`; an empty
/// `alpha` list means `p` is used as given, otherwise `p = beta N^{-alpha}`.
/// An `i0` of 0 stands for `max(ceil(D), 1)` from the survival threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub n: Vec<f64>,
    pub m: Vec<usize>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub i0: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n: Vec::new(),
            m: Vec::new(),
            beta: vec![0.5],
            gamma: vec![0.25],
            p: vec![0.0],
            alpha: Vec::new(),
            i0: vec![1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GridPoint {
    n: f64,
    m: Option<usize>,
    beta: f64,
    gamma: f64,
    p: f64,
    alpha: Option<f64>,
    i0: u64,
}

impl Grid {
    fn points(&self) -> Vec<GridPoint> {
        let ms: Vec<Option<usize>> = if self.m.is_empty() {
            vec![None]
        } else {
            self.m.iter().map(|&m| Some(m)).collect()
        };
        let alphas: Vec<Option<f64>> = if self.alpha.is_empty() {
            vec![None]
        } else {
            self.alpha.iter().map(|&a| Some(a)).collect()
        };
        let ps = if self.alpha.is_empty() { self.p.clone() } else { vec![0.0] };
        let mut out = Vec::new();
        for &beta in &self.beta {
            for &gamma in &self.gamma {
                for &p in &ps {
                    for &alpha in &alphas {
                        for &i0 in &self.i0 {
                            for &n in &self.n {
                                for &m in &ms {
                                    out.push(GridPoint {
                                        n,
                                        m,
                                        beta,
                                        gamma,
                                        p: alpha.map_or(p, |a| beta * n.powf(-a)),
                                        alpha,
                                        i0,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub grid: Grid,
    pub replicates: usize,
    pub seed: u64,
    /// Worker count for replicate loops (0 = all cores).
    #[serde(default)]
    pub threads: usize,
    /// Directory that receives the CSV and JSON outputs.
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.n.is_empty() || self.grid.beta.is_empty() || self.grid.gamma.is_empty() {
            return Err(invalid("grid must list at least one n, beta and gamma"));
        }
        if self.grid.i0.is_empty() || (self.grid.alpha.is_empty() && self.grid.p.is_empty()) {
            return Err(invalid("grid must list at least one i0 and one p or alpha"));
        }
        if self.replicates == 0 {
            return Err(invalid("replicates must be at least 1"));
        }
        Ok(())
    }
}

/// One grid point. `estimate` is the study's statistic, `reference` its
/// comparison value and `[lower, upper]` the acceptance window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub point: usize,
    pub n: f64,
    pub m: usize,
    pub beta: f64,
    pub gamma: f64,
    pub p: f64,
    pub alpha: Option<f64>,
    pub i0: u64,
    pub replicates: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub reference: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
    pub detail: String,
}

pub const ROW_HEADER: [&str; 16] = [
    "point",
    "n",
    "m",
    "beta",
    "gamma",
    "p",
    "alpha",
    "i0",
    "replicates",
    "estimate",
    "stderr",
    "reference",
    "lower",
    "upper",
    "pass",
    "detail",
];

impl StudyRow {
    fn blank(point: usize, gp: &GridPoint, m: usize, i0: u64, replicates: usize) -> Self {
        Self {
            point,
            n: gp.n,
            m,
            beta: gp.beta,
            gamma: gp.gamma,
            p: gp.p,
            alpha: gp.alpha,
            i0,
            replicates,
            estimate: f64::NAN,
            stderr: f64::NAN,
            reference: f64::NAN,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            pass: false,
            detail: String::new(),
        }
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.point.to_string(),
            format_f64(self.n),
            self.m.to_string(),
            format_f64(self.beta),
            format_f64(self.gamma),
            format_f64(self.p),
            self.alpha.map(format_f64).unwrap_or_default(),
            self.i0.to_string(),
            self.replicates.to_string(),
            format_f64(self.estimate),
            format_f64(self.stderr),
            format_f64(self.reference),
            format_f64(self.lower),
            format_f64(self.upper),
            self.pass.to_string(),
            self.detail.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCheck {
    pub name: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetadata {
    pub seed: u64,
    pub code_version: String,
    pub wall_time_secs: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub study: StudyKind,
    pub rows: Vec<StudyRow>,
    pub checks: Vec<StudyCheck>,
    pub pass: bool,
    pub metadata: StudyMetadata,
}

/// The seed-determined part of a result, free of timing.
#[derive(Serialize)]
struct PrimaryView<'a> {
    study: StudyKind,
    rows: &'a [StudyRow],
    checks: &'a [StudyCheck],
    pass: bool,
}

impl StudyResult {
    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ROW_HEADER)?;
        for row in &self.rows {
            out.write_record(row.record())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rows, checks and verdict as JSON; byte-identical across runs with the
    /// same configuration.
    pub fn primary_json(&self) -> Result<String> {
        let view = PrimaryView {
            study: self.study,
            rows: &self.rows,
            checks: &self.checks,
            pass: self.pass,
        };
        Ok(serde_json::to_string_pretty(&view)?)
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.meta.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        self.write_rows_csv(BufWriter::new(File::create(&csv_path)?))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.primary_json()? + "\n")?;
        let meta_path = dir.join(format!("{stem}.meta.json"));
        std::fs::write(&meta_path, serde_json::to_string_pretty(&self.metadata)? + "\n")?;
        Ok(vec![csv_path, json_path, meta_path])
    }
}

fn study_stem(kind: StudyKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "study".into())
}

/// Run a study; per-point failures are recorded in the row and the study
/// continues.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let started = Instant::now();
    let points = config.grid.points();
    let mut rows = Vec::with_capacity(points.len());
    for (j, gp) in points.iter().enumerate() {
        let seed = derive_seed(config.seed, j as u64);
        let row = match config.study {
            StudyKind::RelErrorScaling => rel_error_point(j, gp, config, seed),
            StudyKind::FisherScaling => fisher_point(j, gp, config, seed),
            StudyKind::TimeRatio => time_ratio_point(j, gp),
            StudyKind::Coverage => coverage_point(j, gp, config, seed),
            StudyKind::Dominance => dominance_point(j, gp, config, seed),
            StudyKind::FluidSandwich => sandwich_point(j, gp),
        };
        let row = row.unwrap_or_else(|e| {
            let mut r = StudyRow::blank(j, gp, gp.m.unwrap_or(0), gp.i0, config.replicates);
            r.detail = format!("error: {e}");
            r
        });
        log::info!("{:?} point {j}: estimate {} pass {}", config.study, row.estimate, row.pass);
        rows.push(row);
    }
    let checks = match config.study {
        StudyKind::RelErrorScaling => rel_error_checks(&rows),
        StudyKind::FisherScaling => fisher_checks(&rows),
        StudyKind::TimeRatio => time_ratio_checks(&rows),
        StudyKind::FluidSandwich => increasing_checks(&rows, "t_cr / t_star_rate increases with n"),
        StudyKind::Coverage | StudyKind::Dominance => Vec::new(),
    };
    let pass = rows.iter().all(|r| r.pass) && checks.iter().all(|c| c.pass);
    let result = StudyResult {
        study: config.study,
        rows,
        checks,
        pass,
        metadata: StudyMetadata {
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: started.elapsed().as_secs_f64(),
            threads: config.threads,
        },
    };
    if let Some(dir) = &config.output_path {
        result.write_outputs(dir, &study_stem(config.study))?;
    }
    Ok(result)
}

/// [`run_study`] forced to `StudyKind::RelErrorScaling`.
pub fn rel_error_study(config: &StudyConfig) -> Result<StudyResult> {
    let mut cfg = config.clone();
    cfg.study = StudyKind::RelErrorScaling;
    run_study(&cfg)
}

fn resolve_m(gp: &GridPoint) -> usize {
    gp.m.unwrap_or_else(|| critical_index(gp.n) as usize)
}

fn resolve_i0(gp: &GridPoint) -> Result<(u64, Option<SurvivalThreshold>)> {
    let threshold = if gp.gamma > 0.0 {
        Some(compute_survival_threshold(gp.beta, gp.gamma)?)
    } else {
        None
    };
    let i0 = match (gp.i0, &threshold) {
        (0, Some(t)) => t.initial_infected(1),
        (0, None) => 1,
        (i, _) => i,
    };
    Ok((i0, threshold))
}

/// Maximum-likelihood estimate of `N` from `obs` with `beta`, `gamma` and
/// `a = pN` held at known values, by golden-section search in `ln N` over
/// `[C_m, MLE_SPAN * C_m]`.
pub fn mle_population(obs: &ObservationSet, beta: f64, gamma: f64, a: f64) -> Result<f64> {
    let prep = PreparedObservations::new(obs)?;
    let c_m = prep.c_last.max(1) as f64;
    let (x, _) = golden_section_max(
        |ln_n| prep.loglik(ln_n.exp(), beta, gamma, a),
        c_m.ln(),
        (MLE_SPAN * c_m).ln(),
        1e-10,
    );
    Ok(x.exp())
}

fn rel_error_point(j: usize, gp: &GridPoint, cfg: &StudyConfig, seed: u64) -> Result<StudyRow> {
    let params = ModelParams::bass(gp.n, gp.beta, gp.p);
    let m = resolve_m(gp);
    let mut row = StudyRow::blank(j, gp, m, gp.i0, cfg.replicates);
    let floor = fisher_bass(gp.n, gp.i0, m, BassIndexing::Exact)?.cr_floor;
    let spec = SimSpec::new(params, gp.i0, 0, m, seed);
    spec.validate()?;
    let a = params.a();
    let fits: Vec<Result<f64>> = map_indexed(cfg.replicates, cfg.threads, |r| {
        let mut rng = RngStream::new(seed, r as u64);
        let ledger = simulate_ledger_with(&spec, &mut rng)?;
        mle_population(&ledger.observations(), gp.beta, 0.0, a)
    });
    let n_hats = fits.into_iter().collect::<Result<Vec<f64>>>()?;
    let rel: Vec<f64> = n_hats.iter().map(|&nh| ((nh - gp.n) / gp.n).powi(2)).collect();
    let bias = mean(&n_hats.iter().map(|&nh| (nh - gp.n) / gp.n).collect::<Vec<_>>());
    row.estimate = mean(&rel);
    row.stderr = std_error(&rel);
    row.reference = floor;
    row.lower = FLOOR_SLACK * floor;
    row.pass = row.estimate >= row.lower;
    row.detail = format!("relative bias {bias:.4e}; efficiency {:.4}", row.estimate / floor);
    Ok(row)
}

fn fisher_point(j: usize, gp: &GridPoint, cfg: &StudyConfig, seed: u64) -> Result<StudyRow> {
    let m = resolve_m(gp);
    if gp.gamma == 0.0 {
        let mut row = StudyRow::blank(j, gp, m, gp.i0, 0);
        let rep = fisher_bass(gp.n, gp.i0, m, BassIndexing::Exact)?;
        row.estimate = rep.scaling_ratio();
        row.stderr = 0.0;
        row.reference = rep.total;
        row.lower = 0.25;
        row.upper = 4.0;
        row.pass = (row.lower..=row.upper).contains(&row.estimate);
        row.detail = format!("bass; cr floor {:.6e}", rep.cr_floor);
        return Ok(row);
    }
    let (i0, _) = resolve_i0(gp)?;
    let mut row = StudyRow::blank(j, gp, m, i0, cfg.replicates);
    let params = ModelParams::sir(gp.n, gp.beta, gp.gamma);
    let rep = fisher_sir_mc(&params, i0, 0, m, cfg.replicates, seed, cfg.threads)?;
    let scale = gp.n.powi(4) / (m as f64).powi(3);
    row.estimate = rep.scaling_ratio();
    row.stderr = rep.mc_stderr.unwrap_or(f64::NAN) * scale;
    row.reference = rep.total;
    row.lower = 0.0;
    row.upper = 0.1;
    let rel_se = row.stderr / row.estimate;
    row.pass = rel_se < row.upper;
    row.detail = format!("sir; relative stderr {rel_se:.4}; cr floor {:.6e}", rep.cr_floor);
    Ok(row)
}

fn time_ratio_target(alpha: f64) -> f64 {
    if alpha >= 1.0 {
        2.0 / 3.0
    } else if alpha > 1.0 / 3.0 {
        (alpha - 1.0 / 3.0) / alpha
    } else {
        0.0
    }
}

fn time_ratio_point(j: usize, gp: &GridPoint) -> Result<StudyRow> {
    let m = critical_index(gp.n) as usize;
    let mut row = StudyRow::blank(j, gp, m, 1, 0);
    let tr = bass_time_ratio(gp.n, gp.p, gp.beta)?;
    row.estimate = tr.ratio;
    row.stderr = 0.0;
    row.reference = gp.alpha.map_or(f64::NAN, time_ratio_target);
    row.lower = 0.0;
    row.upper = 1.0;
    row.pass = tr.ratio > 0.0 && tr.ratio < 1.0;
    row.detail = format!("k_cr {}; k_star {}; t_cr {:.6e}; t_star {:.6e}", tr.k_cr, tr.k_star, tr.t_cr, tr.t_star);
    Ok(row)
}

/// Joint coverage target `1 - 8/m - 2 C1 exp(-C2 I0)`.
pub fn coverage_target(m: usize, threshold: &SurvivalThreshold, i0: u64) -> f64 {
    1.0 - 8.0 / m as f64 - 2.0 * threshold.extinction_bound(i0)
}

fn coverage_point(j: usize, gp: &GridPoint, cfg: &StudyConfig, seed: u64) -> Result<StudyRow> {
    let (i0, threshold) = resolve_i0(gp)?;
    let threshold = threshold.ok_or_else(|| invalid("coverage study needs gamma > 0"))?;
    let m = resolve_m(gp);
    let params = ModelParams::sir(gp.n, gp.beta, gp.gamma);
    let spec = SimSpec::new(params, i0, 0, m, seed);
    spec.validate()?;
    let delta = default_delta(m);
    if !(delta < 1.0) {
        return Err(invalid(format!("default delta = {delta} is not below 1 at m = {m}")));
    }
    let covered: Vec<Result<bool>> = map_indexed(cfg.replicates, cfg.threads, |r| {
        let mut rng = RngStream::new(seed, r as u64);
        let ledger = simulate_ledger_with(&spec, &mut rng)?;
        let obs = ledger.observations();
        let Ok(est) = estimate_sir(&obs) else {
            return Ok(false);
        };
        let ci = sir_confidence_intervals(&est, delta, gp.n, obs.c0(), i0, Some(&threshold))?;
        let iv = ci.intervals.expect("intervals were just attached");
        let (gl, gh) = iv.gamma.expect("sir intervals carry gamma");
        Ok(iv.beta.0 <= gp.beta && gp.beta <= iv.beta.1 && gl <= gp.gamma && gp.gamma <= gh)
    });
    let covered = covered.into_iter().collect::<Result<Vec<bool>>>()?;
    let freq = covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64;
    let target = coverage_target(m, &threshold, i0);
    let sigma = binomial_sigma(target.clamp(0.0, 1.0), covered.len());
    let mut row = StudyRow::blank(j, gp, m, i0, cfg.replicates);
    row.estimate = freq;
    row.stderr = binomial_sigma(freq, covered.len());
    row.reference = target;
    row.lower = target - SIGMA_SLACK * sigma;
    row.upper = 1.0;
    row.pass = freq >= row.lower;
    row.detail = format!(
        "delta {delta:.6}; label {:.6}",
        crate::estimate::coverage_label(m, delta, &threshold, i0)
    );
    Ok(row)
}

fn dominance_point(j: usize, gp: &GridPoint, cfg: &StudyConfig, seed: u64) -> Result<StudyRow> {
    let (i0, threshold) = resolve_i0(gp)?;
    let threshold = threshold.ok_or_else(|| invalid("dominance study needs gamma > 0"))?;
    let m = resolve_m(gp);
    if !crate::fisher::survival_rate_condition(gp.beta, gp.gamma, gp.n, m, i0, threshold.p) {
        return Err(crate::error::precondition("rate condition fails at this point"));
    }
    let params = ModelParams::sir(gp.n, gp.beta, gp.gamma);
    let spec = SimSpec::new(params, i0, 0, m, seed);
    spec.validate()?;
    let walk_seed = derive_seed(seed, u64::MAX);
    let outcomes: Vec<Result<(bool, bool)>> = map_indexed(cfg.replicates, cfg.threads, |r| {
        let mut rng = RngStream::new(seed, r as u64);
        let ledger = simulate_ledger_with(&spec, &mut rng)?;
        let mut wrng = RngStream::new(walk_seed, r as u64);
        let walk = dominated_walk(&spec, threshold.p, &mut wrng)?;
        Ok((ledger.terminated_at.is_some(), walk.stopped_at.is_some()))
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let reps = outcomes.len();
    let p_tau = outcomes.iter().filter(|o| o.0).count() as f64 / reps as f64;
    let p_walk = outcomes.iter().filter(|o| o.1).count() as f64 / reps as f64;
    let sigma = (binomial_sigma(p_tau, reps).powi(2) + binomial_sigma(p_walk, reps).powi(2)).sqrt();
    let mut row = StudyRow::blank(j, gp, m, i0, cfg.replicates);
    row.estimate = p_tau;
    row.stderr = sigma;
    row.reference = p_walk;
    row.lower = 0.0;
    row.upper = p_walk + SIGMA_SLACK * sigma;
    row.pass = p_tau <= row.upper;
    row.detail = format!("survival {:.6}; walk p {:.6}", 1.0 - p_tau, threshold.p);
    Ok(row)
}

fn sandwich_point(j: usize, gp: &GridPoint) -> Result<StudyRow> {
    let params = ModelParams::sir(gp.n, gp.beta, gp.gamma);
    let i0 = gp.i0.max(1);
    let mut row = StudyRow::blank(j, gp, critical_index(gp.n) as usize, i0, 0);
    let traj = integrate(&params, gp.n - i0 as f64, i0 as f64, 0.0, default_t_max(&params), 1e-10)?;
    let markers = peak_times(&traj);
    let bounds = peak_bounds(&params, i0 as f64, i0 as f64)?;
    let (Some(t_cr), Some(t_star)) = (markers.t_cr.value(), markers.t_star_rate.value()) else {
        return Err(Error::Numeric("peak markers not reached within t_max".into()));
    };
    row.estimate = t_cr / t_star;
    row.stderr = markers.resolution;
    row.reference = 2.0 / 3.0;
    row.lower = bounds.t_cr_lower;
    row.upper = bounds.t_star_upper;
    row.pass = bounds.t_cr_lower <= t_cr && t_star <= bounds.t_star_upper;
    row.detail = format!("t_cr {t_cr:.9}; t_star_rate {t_star:.9}; bound ratio {:.6}", bounds.ratio());
    Ok(row)
}

/// Rows grouped by `(beta, gamma, p or alpha, i0)`, plus `n` when `vary_m`.
/// Groups are sorted by `m` when `vary_m`, otherwise by `n`.
fn groups_by(rows: &[StudyRow], vary_m: bool) -> Vec<Vec<&StudyRow>> {
    let key = |r: &StudyRow| {
        let p = if r.alpha.is_some() { 0.0 } else { r.p };
        let n = if vary_m { r.n } else { 0.0 };
        format!("{:?}|{:?}|{:?}|{:?}|{}|{:?}", r.beta, r.gamma, r.alpha, p, r.i0, n)
    };
    let mut out: Vec<(String, Vec<&StudyRow>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match out.iter_mut().find(|(kk, _)| *kk == k) {
            Some((_, v)) => v.push(r),
            None => out.push((k, vec![r])),
        }
    }
    out.into_iter()
        .map(|(_, mut v)| {
            if vary_m {
                v.sort_by_key(|r| r.m);
            } else {
                v.sort_by(|a, b| a.n.total_cmp(&b.n));
            }
            v
        })
        .collect()
}

fn rel_error_checks(rows: &[StudyRow]) -> Vec<StudyCheck> {
    let mut out = Vec::new();
    for g in groups_by(rows, true) {
        for w in g.windows(2) {
            let expected = (w[1].m as f64 / w[0].m as f64).powi(3);
            let observed = w[0].estimate / w[1].estimate;
            out.push(StudyCheck {
                name: format!("n = {}: error ratio m = {} vs {}", w[0].n, w[0].m, w[1].m),
                value: observed,
                lower: expected / 2.0,
                upper: expected * 2.0,
                pass: observed >= expected / 2.0 && observed <= expected * 2.0,
            });
        }
    }
    out
}

fn fisher_checks(rows: &[StudyRow]) -> Vec<StudyCheck> {
    let mut out = Vec::new();
    for g in groups_by(rows, false) {
        let vals: Vec<f64> = g.iter().map(|r| r.estimate).collect();
        let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            / vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let limit = if g[0].gamma == 0.0 { 2.0 } else { 3.0 };
        out.push(StudyCheck {
            name: format!("scaling ratio spread across n (gamma = {}, i0 = {})", g[0].gamma, g[0].i0),
            value: spread,
            lower: 1.0,
            upper: limit,
            pass: spread < limit,
        });
    }
    out
}

fn increasing_checks(rows: &[StudyRow], name: &str) -> Vec<StudyCheck> {
    groups_by(rows, false)
        .into_iter()
        .map(|g| {
            let steps = g.windows(2).filter(|w| w[1].estimate > w[0].estimate).count();
            let needed = g.len().saturating_sub(1);
            StudyCheck {
                name: name.to_string(),
                value: steps as f64,
                lower: needed as f64,
                upper: needed as f64,
                pass: steps == needed,
            }
        })
        .collect()
}

fn time_ratio_checks(rows: &[StudyRow]) -> Vec<StudyCheck> {
    let mut out = Vec::new();
    for g in groups_by(rows, false) {
        let Some(alpha) = g[0].alpha else { continue };
        let target = time_ratio_target(alpha);
        if alpha >= 1.0 {
            out.extend(increasing_checks(
                &g.iter().map(|r| (*r).clone()).collect::<Vec<_>>(),
                &format!("alpha = {alpha}: ratio increases with n"),
            ));
            let last = g.last().expect("non-empty group").estimate;
            out.push(StudyCheck {
                name: format!("alpha = {alpha}: ratio at largest n within 0.05 of 2/3"),
                value: last,
                lower: target - 0.05,
                upper: target + 0.05,
                pass: (last - target).abs() <= 0.05,
            });
        } else {
            let dist: Vec<f64> = g.iter().map(|r| (r.estimate - target).abs()).collect();
            let closer = dist.windows(2).filter(|w| w[1] < w[0]).count();
            let needed = dist.len().saturating_sub(1);
            out.push(StudyCheck {
                name: format!("alpha = {alpha}: ratio approaches {target:.4} as n grows"),
                value: closer as f64,
                lower: needed as f64,
                upper: needed as f64,
                pass: closer == needed,
            });
        }
    }
    out
}

/// Squared relative errors `((beta_hat - beta)/beta)^2` and
/// `((gamma_hat - gamma)/gamma)^2` for each replicate; `None` when the
/// estimator is undefined on that path.
pub fn sir_estimator_errors(
    params: &ModelParams,
    i0: u64,
    m: usize,
    replicates: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<Option<(f64, f64)>>> {
    let spec = SimSpec::new(*params, i0, 0, m, seed);
    spec.validate()?;
    let out: Vec<Result<Option<(f64, f64)>>> = map_indexed(replicates, threads, |r| {
        let mut rng = RngStream::new(seed, r as u64);
        let ledger = simulate_ledger_with(&spec, &mut rng)?;
        Ok(estimate_sir(&ledger.observations()).ok().and_then(|est| {
            let g = est.point.gamma_hat?;
            Some((
                ((est.point.beta_hat - params.beta) / params.beta).powi(2),
                ((g - params.gamma) / params.gamma).powi(2),
            ))
        }))
    });
    out.into_iter().collect()
}
