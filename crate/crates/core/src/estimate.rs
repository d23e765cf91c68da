//! Closed-form estimators from observation sets and the Bass time-to-peak
//! statistics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, precondition, Error, Result};
use crate::fisher::SurvivalThreshold;
use crate::likelihood::PreparedObservations;
use crate::model::{ObservationSet, Regime};
use crate::stats::{pairwise_sum_by, KahanSum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub beta_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a_hat: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervals {
    pub beta: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a: Option<(f64, f64)>,
    /// Probability statement attached to the SIR intervals.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage_label: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimateInputs {
    Sir {
        a_hat: f64,
        b_hat: f64,
        s_tilde: f64,
        delta: Option<f64>,
        z: Option<f64>,
    },
    Bass {
        /// `(k, S_k)` for every even `k <= m`.
        s_k: Vec<(usize, f64)>,
        c1: f64,
        n_bound: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// The path stopped before `m` jumps.
    pub tau_observed: bool,
    /// Number of alive steps used.
    pub effective_m: usize,
    /// Bass: whether the slab system was feasible (otherwise least squares).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feasible: Option<bool>,
    /// Bass: whether the width of the `a` interval is below `a_hat`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a_estimable: Option<bool>,
    /// SIR: whether the rate hypothesis of the interval statement held at the estimates.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hypothesis_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub regime: Regime,
    pub m: usize,
    pub point: PointEstimate,
    pub intervals: Option<Intervals>,
    pub inputs: EstimateInputs,
    pub diagnostics: Diagnostics,
}

/// `beta_hat = A / B`, `gamma_hat = 1 / B - beta_hat` with `A = (C_m - C_0)/m`
/// and `B = sum_{k <= min(m, tau)} I_{k-1} T_k / m`.
pub fn estimate_sir(obs: &ObservationSet) -> Result<EstimateReport> {
    let m = obs.m();
    if m == 0 {
        return Err(invalid("need at least one observation"));
    }
    let prep = PreparedObservations::new(obs)?;
    let mut s_tilde = KahanSum::new();
    for st in &prep.steps {
        s_tilde.add(st.i_prev * st.dt);
    }
    let s_tilde = s_tilde.value();
    if !(s_tilde > 0.0) {
        return Err(Error::Numeric("degenerate duration sum".into()));
    }
    let mf = m as f64;
    let a_hat = (prep.c_last - prep.c0) as f64 / mf;
    let b_hat = s_tilde / mf;
    let beta_hat = a_hat / b_hat;
    let gamma_hat = 1.0 / b_hat - beta_hat;
    let effective_m = prep.steps.len();
    Ok(EstimateReport {
        regime: Regime::Sir,
        m,
        point: PointEstimate {
            beta_hat,
            gamma_hat: Some(gamma_hat),
            a_hat: None,
        },
        intervals: None,
        inputs: EstimateInputs::Sir {
            a_hat,
            b_hat,
            s_tilde,
            delta: None,
            z: None,
        },
        diagnostics: Diagnostics {
            tau_observed: effective_m < m,
            effective_m,
            ..Default::default()
        },
    })
}

/// `sqrt(5 ln m / m)`.
pub fn default_delta(m: usize) -> f64 {
    let m = m as f64;
    (5.0 * m.ln() / m).sqrt()
}

/// `z = (N - m - C0) / N`.
pub fn z_factor(n: f64, m: usize, c0: u64) -> f64 {
    (n - m as f64 - c0 as f64) / n
}

/// Probability attached to the interval statement:
/// `1 - 4e^{-m(delta - ln(1+delta))} - 4e^{-m delta^2/(4+2 delta)} - 2 C1 e^{-C2 I0}`.
pub fn coverage_label(m: usize, delta: f64, threshold: &SurvivalThreshold, i0: u64) -> f64 {
    let m = m as f64;
    1.0 - 4.0 * (-m * (delta - delta.ln_1p())).exp()
        - 4.0 * (-m * delta * delta / (4.0 + 2.0 * delta)).exp()
        - 2.0 * threshold.extinction_bound(i0)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta = {delta} must lie in (0, 1)")));
    }
    Ok(())
}

/// Ranges that contain `(beta_hat, gamma_hat)` for true `(beta, gamma)` on the
/// high-probability event.
pub fn sir_truth_ranges(beta: f64, gamma: f64, delta: f64, z: f64) -> ((f64, f64), (f64, f64)) {
    let (lo_l, hi_l) = gamma_offsets(delta, z);
    let b = (beta * (1.0 - delta) * z * z / (1.0 + delta), beta * (1.0 + delta) / (1.0 - delta));
    let g = (gamma * z / (1.0 + delta) + beta * lo_l, gamma / (1.0 - delta) + beta * hi_l);
    (b, g)
}

fn gamma_offsets(delta: f64, z: f64) -> (f64, f64) {
    let lower = ((1.0 - delta) * z - (1.0 + delta).powi(2)) / ((1.0 + delta) * (1.0 - delta));
    let upper = (1.0 + delta - (1.0 - delta).powi(2) * z * z) / ((1.0 - delta) * (1.0 + delta));
    (lower, upper)
}

/// Whether the estimates fall in the truth-centred ranges.
pub fn sir_event_holds(report: &EstimateReport, beta: f64, gamma: f64, delta: f64, z: f64) -> bool {
    let Some(g_hat) = report.point.gamma_hat else {
        return false;
    };
    let ((bl, bh), (gl, gh)) = sir_truth_ranges(beta, gamma, delta, z);
    let b_hat = report.point.beta_hat;
    b_hat >= bl && b_hat <= bh && g_hat >= gl && g_hat <= gh
}

/// Intervals for `(beta, gamma)` obtained by inverting the truth-centred ranges
/// around the estimates. The `gamma` range is widened over the `beta` interval.
pub fn sir_confidence_intervals(
    report: &EstimateReport,
    delta: f64,
    n: f64,
    c0: u64,
    i0: u64,
    threshold: Option<&SurvivalThreshold>,
) -> Result<EstimateReport> {
    check_delta(delta)?;
    let (EstimateInputs::Sir { a_hat, b_hat, s_tilde, .. }, Some(g_hat)) = (&report.inputs, report.point.gamma_hat)
    else {
        return Err(invalid("confidence intervals need an SIR estimate"));
    };
    let m = report.m;
    let z = z_factor(n, m, c0);
    if !(z > 0.0) {
        return Err(precondition(format!("z = {z} must be positive (m + C0 < N)")));
    }
    let b_hat_pt = report.point.beta_hat;
    let beta_lo = b_hat_pt * (1.0 - delta) / (1.0 + delta);
    let beta_hi = b_hat_pt * (1.0 + delta) / ((1.0 - delta) * z * z);
    let (lo_l, hi_l) = gamma_offsets(delta, z);
    let mut gamma_lo = f64::INFINITY;
    let mut gamma_hi = f64::NEG_INFINITY;
    for b in [beta_lo, beta_hi] {
        gamma_lo = gamma_lo.min((1.0 - delta) * (g_hat - b * hi_l));
        gamma_hi = gamma_hi.max((1.0 + delta) * (g_hat - b * lo_l) / z);
    }
    let gamma_lo = gamma_lo.max(0.0);
    let gamma_hi = gamma_hi.max(gamma_lo);
    let mut out = report.clone();
    out.intervals = Some(Intervals {
        beta: (beta_lo, beta_hi),
        gamma: Some((gamma_lo, gamma_hi)),
        a: None,
        coverage_label: threshold.map(|t| coverage_label(m, delta, t, i0)),
    });
    out.inputs = EstimateInputs::Sir {
        a_hat: *a_hat,
        b_hat: *b_hat,
        s_tilde: *s_tilde,
        delta: Some(delta),
        z: Some(z),
    };
    if let Some(t) = threshold {
        let ratio = b_hat_pt / (b_hat_pt + g_hat);
        out.diagnostics.hypothesis_ok = Some(ratio * z > t.p);
        if ratio * z <= t.p {
            log::warn!("rate hypothesis fails at the estimates: {} <= p = {}", ratio * z, t.p);
        }
    }
    Ok(out)
}

/// Pairwise-minimum sums `S_k = sum_{i=1}^{k/2} min(T_i, T_{k+1-i})` for even `k <= m`.
pub fn bass_pair_sums(obs: &ObservationSet) -> Result<Vec<(usize, f64)>> {
    let m = obs.m();
    if m % 2 == 1 {
        return Err(invalid(format!("m = {m} must be even")));
    }
    let t: Vec<f64> = obs.samples.iter().map(|s| s.inter_arrival).collect();
    if t.iter().any(|x| !x.is_finite()) {
        return Err(precondition("all inter-arrival times must be finite (path stopped early)"));
    }
    Ok((1..=m / 2)
        .map(|h| {
            let k = 2 * h;
            let s = (1..=h).map(|i| t[i - 1].min(t[k - i])).sum::<f64>();
            (k, s)
        })
        .collect())
}

/// One slab `lo <= 2a + w beta <= hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Slab {
    w: f64,
    center: f64,
    lo: f64,
    hi: f64,
    radius: f64,
}

fn bass_slabs(sums: &[(usize, f64)], i0: u64, n_bound: f64, c1: f64, m: usize) -> Vec<Slab> {
    let ln_n = n_bound.ln();
    sums.iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|&(k, s)| {
            let center = k as f64 / (2.0 * s);
            let radius = c1 * center * (m as f64 / n_bound + (ln_n / k as f64).sqrt());
            Slab {
                w: (k as u64 + 2 * i0 - 1) as f64,
                center,
                lo: center - radius,
                hi: center + radius,
                radius,
            }
        })
        .collect()
}

type Pt = (f64, f64);

/// Keep the part of a convex polygon where `ca * a + cb * b <= rhs`.
fn clip(poly: &[Pt], ca: f64, cb: f64, rhs: f64) -> Vec<Pt> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for idx in 0..n {
        let p = poly[idx];
        let q = poly[(idx + 1) % n];
        let fp = ca * p.0 + cb * p.1 - rhs;
        let fq = ca * q.0 + cb * q.1 - rhs;
        if fp <= 0.0 {
            out.push(p);
        }
        if (fp < 0.0 && fq > 0.0) || (fp > 0.0 && fq < 0.0) {
            let t = fp / (fp - fq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

fn centroid(poly: &[Pt]) -> Pt {
    let n = poly.len();
    let mut area = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for idx in 0..n {
        let (x0, y0) = poly[idx];
        let (x1, y1) = poly[(idx + 1) % n];
        let cr = x0 * y1 - x1 * y0;
        area += cr;
        cx += (x0 + x1) * cr;
        cy += (y0 + y1) * cr;
    }
    let scale = poly
        .iter()
        .fold(0.0f64, |acc, p| acc.max(p.0.abs()).max(p.1.abs()))
        .max(1e-300);
    if area.abs() > 1e-14 * scale * scale {
        (cx / (3.0 * area), cy / (3.0 * area))
    } else {
        let k = n as f64;
        (
            poly.iter().map(|p| p.0).sum::<f64>() / k,
            poly.iter().map(|p| p.1).sum::<f64>() / k,
        )
    }
}

/// Weighted least squares over `a, beta >= 0`.
fn slab_least_squares(slabs: &[Slab]) -> Pt {
    let sse = |a: f64, b: f64| {
        slabs
            .iter()
            .map(|s| ((s.center - 2.0 * a - s.w * b) / s.radius).powi(2))
            .sum::<f64>()
    };
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in slabs {
        let wt = 1.0 / (s.radius * s.radius);
        s11 += wt * 4.0;
        s12 += wt * 2.0 * s.w;
        s22 += wt * s.w * s.w;
        t1 += wt * 2.0 * s.center;
        t2 += wt * s.w * s.center;
    }
    let mut candidates = vec![(0.0, 0.0), (0.0, (t2 / s22).max(0.0)), ((t1 / s11).max(0.0), 0.0)];
    let det = s11 * s22 - s12 * s12;
    if det.abs() > 0.0 {
        let a = (t1 * s22 - t2 * s12) / det;
        let b = (s11 * t2 - s12 * t1) / det;
        if a >= 0.0 && b >= 0.0 {
            candidates.push((a, b));
        }
    }
    candidates
        .into_iter()
        .min_by(|p, q| sse(p.0, p.1).total_cmp(&sse(q.0, q.1)))
        .unwrap()
}

/// Bass `(a, beta)` from precomputed pair sums.
///
/// Every even `k` gives a slab `|k/(2 S_k) - (2a + (k + 2 i0 - 1) beta)| <= radius_k`
/// with `radius_k = c1 (k / (2 S_k)) (m / N_bound + sqrt(ln N_bound / k))`. The
/// slabs are intersected with the non-negative quadrant by halfplane clipping;
/// the point estimate is the centroid of the feasible polygon and the intervals
/// are its bounding box. An empty intersection falls back to weighted least
/// squares and is flagged.
pub fn estimate_bass_from_sums(sums: &[(usize, f64)], m: usize, i0: u64, n_bound: f64, c1: f64) -> Result<EstimateReport> {
    if !(c1 > 0.0) {
        return Err(invalid("c1 must be positive"));
    }
    if !(n_bound > 1.0) {
        return Err(invalid("n_bound must exceed 1"));
    }
    let slabs = bass_slabs(sums, i0, n_bound, c1, m);
    if slabs.is_empty() {
        return Err(Error::Numeric("all S_k are zero".into()));
    }
    let a_max = slabs.iter().map(|s| s.hi / 2.0).fold(f64::INFINITY, f64::min).max(0.0);
    let b_max = slabs.iter().map(|s| s.hi / s.w).fold(f64::INFINITY, f64::min).max(0.0);
    let mut poly = vec![(0.0, 0.0), (a_max, 0.0), (a_max, b_max), (0.0, b_max)];
    for s in &slabs {
        poly = clip(&poly, 2.0, s.w, s.hi);
        poly = clip(&poly, -2.0, -s.w, -s.lo);
        if poly.is_empty() {
            break;
        }
    }
    let feasible = !poly.is_empty();
    let (point, a_iv, b_iv) = if feasible {
        let c = centroid(&poly);
        let a_iv = poly
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let b_iv = poly
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        (c, a_iv, b_iv)
    } else {
        log::warn!("slab system infeasible; using constrained least squares");
        let c = slab_least_squares(&slabs);
        (c, (c.0, c.0), (c.1, c.1))
    };
    let a_estimable = feasible && (a_iv.1 - a_iv.0) <= point.0;
    Ok(EstimateReport {
        regime: Regime::Bass,
        m,
        point: PointEstimate {
            beta_hat: point.1,
            gamma_hat: None,
            a_hat: Some(point.0),
        },
        intervals: feasible.then_some(Intervals {
            beta: b_iv,
            gamma: None,
            a: Some(a_iv),
            coverage_label: None,
        }),
        inputs: EstimateInputs::Bass {
            s_k: sums.to_vec(),
            c1,
            n_bound,
        },
        diagnostics: Diagnostics {
            tau_observed: false,
            effective_m: m,
            feasible: Some(feasible),
            a_estimable: Some(a_estimable),
            hypothesis_ok: None,
        },
    })
}

pub fn estimate_bass(obs: &ObservationSet, n_bound: f64, c1: f64) -> Result<EstimateReport> {
    let sums = bass_pair_sums(obs)?;
    estimate_bass_from_sums(&sums, obs.m(), obs.i0, n_bound, c1)
}

fn check_bass_args(n: f64, p: f64, beta: f64) -> Result<()> {
    if !(n > 1.0) {
        return Err(invalid("n must exceed 1"));
    }
    if !(p >= 0.0) || !(beta >= 0.0) || p + beta == 0.0 {
        return Err(invalid("p and beta must be non-negative and not both zero"));
    }
    Ok(())
}

/// `E[T_i] = N / ((pN + beta i)(N - i))`, the mean holding time with `i` adopters.
pub fn bass_expected_jump_time(n: f64, p: f64, beta: f64, i: u64) -> Result<f64> {
    check_bass_args(n, p, beta)?;
    let x = i as f64;
    if i < 1 || x >= n {
        return Err(invalid(format!("index i = {i} must satisfy 1 <= i < n")));
    }
    Ok(n / ((p * n + beta * x) * (n - x)))
}

/// `k_cr = ceil(N^{2/3})`, robust to rounding when `N` is a perfect cube.
pub fn critical_index(n: f64) -> u64 {
    let x = n.powf(2.0 / 3.0);
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakIndices {
    pub k_cr: u64,
    pub k_star: u64,
}

// Sign of `(pN + beta k)(N - k) - (pN + beta (k-1))(N - k + 1)`; non-positive
// exactly when `E[T_k] >= E[T_{k-1}]`.
fn holding_step(n: f64, p: f64, beta: f64, k: u64) -> f64 {
    beta * (n - 2.0 * k as f64 + 1.0) - p * n
}

/// `k* = inf{k >= 2 : E[T_k] >= E[T_{k-1}]}` from the closed form
/// `ceil(((1 - p/beta) N + 1)/2)`, corrected locally against the exact sign test.
pub fn bass_peak_indices(n: f64, p: f64, beta: f64) -> Result<PeakIndices> {
    check_bass_args(n, p, beta)?;
    let top = (n.ceil() as u64).saturating_sub(1).max(2);
    let mut k = if beta > 0.0 && p < beta {
        (((1.0 - p / beta) * n + 1.0) / 2.0).ceil().max(2.0) as u64
    } else {
        2
    };
    k = k.min(top);
    while k > 2 && holding_step(n, p, beta, k - 1) <= 0.0 {
        k -= 1;
    }
    while k < top && holding_step(n, p, beta, k) > 0.0 {
        k += 1;
    }
    Ok(PeakIndices {
        k_cr: critical_index(n),
        k_star: k,
    })
}

/// Definitional scan for `k*`, used to validate the closed form.
pub fn bass_peak_index_scan(n: f64, p: f64, beta: f64) -> Result<u64> {
    let top = (n.ceil() as u64).saturating_sub(1);
    let mut prev = bass_expected_jump_time(n, p, beta, 1)?;
    for k in 2..=top {
        let cur = bass_expected_jump_time(n, p, beta, k)?;
        if cur >= prev {
            return Ok(k);
        }
        prev = cur;
    }
    Ok(top.max(2))
}

const DIRECT_SUM_LIMIT: u64 = 1 << 20;

/// `psi(b) - psi(a)` for `b >= a > 0`.
pub fn digamma_diff(a: f64, b: f64) -> f64 {
    let mut a = a;
    let mut b = b;
    let mut shift = 0.0;
    // Recurrence psi(z) = psi(z + 1) - 1/z to push both arguments past 10.
    while a < 10.0 {
        shift += 1.0 / a;
        a += 1.0;
    }
    while b < 10.0 {
        shift -= 1.0 / b;
        b += 1.0;
    }
    let tail = |z: f64| {
        let z2 = 1.0 / (z * z);
        -0.5 / z - z2 * (1.0 / 12.0 - z2 * (1.0 / 120.0 - z2 * (1.0 / 252.0 - z2 / 240.0)))
    };
    shift + ((b - a) / a).ln_1p() + tail(b) - tail(a)
}

/// `sum_{i=lo}^{hi} 1 / (x + i)` for `x + lo > 0`.
pub fn harmonic_span(x: f64, lo: u64, hi: u64) -> f64 {
    if hi < lo {
        return 0.0;
    }
    if hi - lo < DIRECT_SUM_LIMIT {
        pairwise_sum_by(lo, hi + 1, &|i| 1.0 / (x + i as f64))
    } else {
        digamma_diff(x + lo as f64, x + hi as f64 + 1.0)
    }
}

/// `E[t_k] = sum_{i=1}^{k-1} E[T_i]
///         = (1/(p+beta)) (sum 1/(N - i) + sum 1/(pN/beta + i))`.
pub fn bass_expected_time(n: f64, p: f64, beta: f64, k: u64) -> Result<f64> {
    check_bass_args(n, p, beta)?;
    if k < 1 || k as f64 > n {
        return Err(invalid(format!("k = {k} must satisfy 1 <= k <= n")));
    }
    if k == 1 {
        return Ok(0.0);
    }
    if beta == 0.0 {
        // Pure innovation: E[T_i] = 1 / (p (N - i)).
        return Ok(reverse_harmonic(n, k) / p);
    }
    let first = reverse_harmonic(n, k);
    let second = harmonic_span(p * n / beta, 1, k - 1);
    Ok((first + second) / (p + beta))
}

// sum_{i=1}^{k-1} 1/(N - i) = sum_{j=N-k+1}^{N-1} 1/j for integral N.
fn reverse_harmonic(n: f64, k: u64) -> f64 {
    harmonic_span(n - k as f64, 1, k - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRatio {
    pub k_cr: u64,
    pub k_star: u64,
    pub t_cr: f64,
    pub t_star: f64,
    pub ratio: f64,
}

/// `E[t_{k_cr}] / E[t_{k*}]`.
pub fn bass_time_ratio(n: f64, p: f64, beta: f64) -> Result<TimeRatio> {
    if !(p < beta) {
        return Err(precondition("time ratio requires p < beta"));
    }
    let idx = bass_peak_indices(n, p, beta)?;
    let t_cr = bass_expected_time(n, p, beta, idx.k_cr)?;
    let t_star = bass_expected_time(n, p, beta, idx.k_star)?;
    Ok(TimeRatio {
        k_cr: idx.k_cr,
        k_star: idx.k_star,
        t_cr,
        t_star,
        ratio: t_cr / t_star,
    })
}
