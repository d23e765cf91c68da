//! Deterministic (fluid) limit of the diffusion model.
//!
//! The system `ds = -beta s i / N - p s`, `di = beta s i / N - gamma i + p s`,
//! `dr = gamma i` is integrated by an adaptive Dormand-Prince 5(4) scheme
//! together with `xi' = beta i / N`, the exponent of the SIR closed form.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, precondition, Error, Result};
use crate::model::{ModelParams, Regime};

const DIM: usize = 4;
type State = [f64; DIM];

/// One sample of the trajectory. `c = n - s` is the cumulative count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidSample {
    pub t: f64,
    pub s: f64,
    pub i: f64,
    pub r: f64,
    pub c: f64,
    pub xi: f64,
}

/// Marker time, or `Unreached` when the event does not occur before `t_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkerTime {
    At(f64),
    Unreached,
}

impl MarkerTime {
    pub fn value(self) -> Option<f64> {
        match self {
            MarkerTime::At(t) => Some(t),
            MarkerTime::Unreached => None,
        }
    }

    pub fn is_reached(self) -> bool {
        matches!(self, MarkerTime::At(_))
    }
}

impl Serialize for MarkerTime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MarkerTime::At(t) => s.serialize_f64(*t),
            MarkerTime::Unreached => s.serialize_str("unreached"),
        }
    }
}

impl<'de> Deserialize<'de> for MarkerTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => Ok(MarkerTime::At(t)),
            Raw::Str(s) if s == "unreached" => Ok(MarkerTime::Unreached),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad marker '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakMarkers {
    /// First time `c >= N^{2/3}`.
    pub t_cr: MarkerTime,
    /// First time `s / N < gamma / beta`.
    pub t_star_rate: MarkerTime,
    /// First time `d^2 s / dt^2 > 0`.
    pub t_star_inflection: MarkerTime,
    /// Width of the final bisection bracket.
    pub resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidTrajectory {
    pub params: ModelParams,
    pub s0: f64,
    pub i0: f64,
    pub r0: f64,
    pub tol: f64,
    pub t_max: f64,
    pub grid: Vec<FluidSample>,
}

/// Step-size controls for [`integrate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    pub t_max: f64,
    pub tol: f64,
    /// Defaults to `t_max / 2000`.
    pub max_step: Option<f64>,
}

/// `4 ln N / (beta - gamma)` for a supercritical model, or a comparable horizon otherwise.
pub fn default_t_max(params: &ModelParams) -> f64 {
    let growth = params.beta - params.gamma + params.p;
    let rate = if growth > 0.0 {
        growth
    } else {
        params.beta.max(params.gamma).max(params.p).max(1e-3)
    };
    4.0 * params.n.max(std::f64::consts::E).ln() / rate
}

fn rhs(params: &ModelParams, y: &State) -> State {
    let [s, i, _, _] = *y;
    let n = params.n;
    let infect = params.beta * s * i / n + params.p * s;
    let recover = params.gamma * i;
    [-infect, infect - recover, recover, params.beta * i / n]
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combine(y: &State, h: f64, terms: &[(f64, &State)]) -> State {
    let mut out = *y;
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (w, k) in terms {
            acc += w * k[j];
        }
        *o += h * acc;
    }
    out
}

/// One Dormand-Prince step; returns the 5th-order solution and the error estimate.
fn dopri_step(params: &ModelParams, y: &State, h: f64) -> (State, State) {
    let k1 = rhs(params, y);
    let k2 = rhs(params, &combine(y, h, &[(A21, &k1)]));
    let k3 = rhs(params, &combine(y, h, &[(A31, &k1), (A32, &k2)]));
    let k4 = rhs(params, &combine(y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
    let k5 = rhs(
        params,
        &combine(y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
    );
    let k6 = rhs(
        params,
        &combine(y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
    );
    let y_new = combine(y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = rhs(params, &y_new);
    let mut err = [0.0; DIM];
    for j in 0..DIM {
        err[j] = h * (E1 * k1[j] + E3 * k3[j] + E4 * k4[j] + E5 * k5[j] + E6 * k6[j] + E7 * k7[j]);
    }
    (y_new, err)
}

// Scales that are proportional to the population, so that multiplying N and
// the initial condition by a constant leaves the accepted steps unchanged.
fn error_norm(params: &ModelParams, tol: f64, y: &State, y_new: &State, err: &State) -> f64 {
    let mut acc = 0.0;
    for j in 0..DIM {
        let floor = if j < 3 { params.n * 1e-12 } else { 1e-12 };
        let sc = tol * (y[j].abs().max(y_new[j].abs()) + floor);
        acc += (err[j] / sc).powi(2);
    }
    (acc / DIM as f64).sqrt()
}

fn sample(params: &ModelParams, t: f64, y: &State) -> FluidSample {
    FluidSample {
        t,
        s: y[0],
        i: y[1],
        r: y[2],
        c: params.n - y[0],
        xi: y[3],
    }
}

pub fn integrate(params: &ModelParams, s0: f64, i0: f64, r0: f64, t_max: f64, tol: f64) -> Result<FluidTrajectory> {
    integrate_with(
        params,
        s0,
        i0,
        r0,
        IntegratorOptions {
            t_max,
            tol,
            max_step: None,
        },
    )
}

pub fn integrate_with(params: &ModelParams, s0: f64, i0: f64, r0: f64, opts: IntegratorOptions) -> Result<FluidTrajectory> {
    crate::model::validate_params(*params, false)?;
    let IntegratorOptions { t_max, tol, max_step } = opts;
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(invalid(format!("t_max = {t_max} must be positive")));
    }
    if !(tol > 0.0) {
        return Err(invalid(format!("tol = {tol} must be positive")));
    }
    if s0 < 0.0 || i0 < 0.0 || r0 < 0.0 {
        return Err(invalid("initial sizes must be non-negative"));
    }
    if ((s0 + i0 + r0) - params.n).abs() > 1e-9 * params.n {
        return Err(invalid(format!(
            "s0 + i0 + r0 = {} must equal n = {}",
            s0 + i0 + r0,
            params.n
        )));
    }
    let h_max = max_step.unwrap_or(t_max / 2000.0);
    let mut y: State = [s0, i0, r0, 0.0];
    let mut t = 0.0;
    let mut grid = vec![sample(params, t, &y)];
    let mut h = (h_max * 0.1).min(0.01 * t_max);
    while t < t_max {
        h = h.min(h_max).min(t_max - t);
        let (y_new, err) = dopri_step(params, &y, h);
        let e = error_norm(params, tol, &y, &y_new, &err);
        if e <= 1.0 && y_new.iter().all(|v| v.is_finite()) {
            t = if t_max - t <= h { t_max } else { t + h };
            y = y_new;
            grid.push(sample(params, t, &y));
        }
        let factor = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
        h *= if e.is_finite() { factor } else { 0.2 };
        if h < 1e-14 * t.max(1.0) {
            return Err(Error::Numeric(format!("step size underflow at t = {t}")));
        }
    }
    Ok(FluidTrajectory {
        params: *params,
        s0,
        i0,
        r0,
        tol,
        t_max,
        grid,
    })
}

impl FluidTrajectory {
    /// State at an arbitrary time, by one Dormand-Prince step from the
    /// preceding grid point (shorter than an accepted step, so no less accurate).
    pub fn state_at(&self, t: f64) -> FluidSample {
        let idx = match self.grid.binary_search_by(|g| g.t.total_cmp(&t)) {
            Ok(i) => return self.grid[i],
            Err(0) => return self.grid[0],
            Err(i) if i >= self.grid.len() => return *self.grid.last().unwrap(),
            Err(i) => i - 1,
        };
        let g = self.grid[idx];
        let (y, _) = dopri_step(&self.params, &[g.s, g.i, g.r, g.xi], t - g.t);
        sample(&self.params, t, &y)
    }

    /// First time at which `pred` holds, refined by bisection on `state_at`.
    pub fn first_time(&self, pred: impl Fn(&FluidSample) -> bool) -> MarkerTime {
        self.first_time_with_resolution(pred).0
    }

    fn first_time_with_resolution(&self, pred: impl Fn(&FluidSample) -> bool) -> (MarkerTime, f64) {
        let Some(j) = self.grid.iter().position(&pred) else {
            return (MarkerTime::Unreached, 0.0);
        };
        if j == 0 {
            return (MarkerTime::At(0.0), 0.0);
        }
        let (mut lo, mut hi) = (self.grid[j - 1].t, self.grid[j].t);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if pred(&self.state_at(mid)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (MarkerTime::At(hi), hi - lo)
    }

    /// Closed-form SIR representation `(s0 e^{-xi}, i, r0 + gamma N xi / beta)` at grid index `k`.
    pub fn xi_form_at(&self, k: usize) -> (f64, f64, f64) {
        xi_triple(&self.params, self.s0, self.r0, self.grid[k].xi)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "s", "i", "r", "c"])?;
        for g in &self.grid {
            out.write_record([g.t, g.s, g.i, g.r, g.c].iter().map(|v| crate::model::format_f64(*v)))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn xi_triple(params: &ModelParams, s0: f64, r0: f64, xi: f64) -> (f64, f64, f64) {
    let s = s0 * (-xi).exp();
    let r = r0 + params.gamma * params.n / params.beta * xi;
    (s, params.n - s - r, r)
}

/// `d^2 s / dt^2` evaluated from the state.
pub fn s_second_derivative(params: &ModelParams, st: &FluidSample) -> f64 {
    let n = params.n;
    let hazard = params.beta * st.i / n + params.p;
    let ds = -st.s * hazard;
    let di = params.beta * st.s * st.i / n + params.p * st.s - params.gamma * st.i;
    -ds * hazard - st.s * params.beta / n * di
}

/// Whether `d^2 s / dt^2 > 0`. For `p = 0` this is `i - s + gamma N / beta > 0`.
fn inflection_passed(params: &ModelParams, st: &FluidSample) -> bool {
    if st.s <= 0.0 || st.i <= 0.0 {
        return false;
    }
    if params.p == 0.0 {
        st.i - st.s + params.gamma * params.n / params.beta > 0.0
    } else {
        // s'' = s h (h - beta s / N) + s beta gamma i / N, with h = beta i / N + p.
        s_second_derivative(params, st) > 0.0
    }
}

pub fn peak_times(traj: &FluidTrajectory) -> PeakMarkers {
    let params = traj.params;
    let n = params.n;
    let cr = n.powf(2.0 / 3.0);
    let (t_cr, r1) = traj.first_time_with_resolution(|g| g.c >= cr);
    let (t_star_rate, r2) = if params.beta > 0.0 && params.gamma > 0.0 {
        let thr = params.gamma / params.beta;
        traj.first_time_with_resolution(|g| g.s / n < thr)
    } else {
        (MarkerTime::Unreached, 0.0)
    };
    let (t_star_inflection, r3) = if params.beta > 0.0 {
        traj.first_time_with_resolution(|g| inflection_passed(&params, g))
    } else {
        (MarkerTime::Unreached, 0.0)
    };
    PeakMarkers {
        t_cr,
        t_star_rate,
        t_star_inflection,
        resolution: r1.max(r2).max(r3),
    }
}

/// `t_rho`: first time at which `s / N <= rho`.
pub fn time_to_susceptible_fraction(traj: &FluidTrajectory, rho: f64) -> MarkerTime {
    let n = traj.params.n;
    traj.first_time(|g| g.s / n <= rho)
}

/// Bass closed form for `i(0) = 0`.
pub fn bass_closed_form(params: &ModelParams, t: f64) -> Result<f64> {
    if params.regime != Regime::Bass {
        return Err(invalid("closed form applies to the Bass regime"));
    }
    if !(params.p > 0.0) {
        return Err(invalid("closed form requires p > 0"));
    }
    if t.is_infinite() {
        return Ok(params.n);
    }
    let e = (-(params.p + params.beta) * t).exp();
    Ok(-params.n * (-(params.p + params.beta) * t).exp_m1() / (params.beta / params.p * e + 1.0))
}

/// SIR triple at time `t` via the `xi` representation.
pub fn sir_xi_form(params: &ModelParams, s0: f64, i0: f64, r0: f64, t: f64, tol: f64) -> Result<(f64, f64, f64)> {
    if params.regime != Regime::Sir || !(params.beta > 0.0) {
        return Err(invalid("xi form requires the SIR regime with beta > 0"));
    }
    if t == 0.0 {
        return Ok((s0, i0, r0));
    }
    let traj = integrate(params, s0, i0, r0, t, tol)?;
    let last = traj.grid.len() - 1;
    Ok(traj.xi_form_at(last))
}

/// Bounds bracketing the critical and peak times of a supercritical SIR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakBoundReport {
    pub nu1: f64,
    pub nu2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub t_cr_lower: f64,
    pub t_star_upper: f64,
    pub c_const: f64,
}

impl PeakBoundReport {
    pub fn ratio(&self) -> f64 {
        self.t_star_upper / self.t_cr_lower
    }
}

pub fn peak_bounds(params: &ModelParams, c0: f64, i0: f64) -> Result<PeakBoundReport> {
    let (beta, gamma, n) = (params.beta, params.gamma, params.n);
    if !(beta > gamma && gamma > 0.0) {
        return Err(precondition(format!("requires beta > gamma > 0 (beta = {beta}, gamma = {gamma})")));
    }
    if n < 16.0 {
        return Err(precondition("requires N >= 16 so that ln ln N > 1"));
    }
    if !(c0 > 0.0 && i0 > 0.0) {
        return Err(precondition("requires c0 > 0 and i0 > 0"));
    }
    let n23 = n.powf(2.0 / 3.0);
    if c0 >= n23 {
        return Err(precondition("requires c0 < N^{2/3}"));
    }
    let nu1 = ((beta - gamma) / beta).powf(1.5);
    let nu2 = 2.0 * (beta - gamma) / beta;
    let rho1 = 1.0 - 1.0 / n.ln().ln();
    let rho2 = gamma / beta;
    if rho1 <= rho2 {
        return Err(precondition(format!("rho1 = {rho1} must exceed rho2 = gamma/beta = {rho2}")));
    }
    let t_cr_lower = ((2.0 / 3.0) * (nu1 * n / c0.powf(1.5)).ln()
        + (nu1.powf(2.0 / 3.0) / c0 * (1.0 - c0 / n23)).ln())
        / (beta - gamma);
    let denom = rho2 / rho1 * (beta * rho1 - gamma) - beta * rho2 / 2.0 * c0 / (n * (1.0 - rho1));
    if denom <= 0.0 {
        return Err(precondition(format!("denominator of C is {denom}, must be positive")));
    }
    let c_const = (rho1 - rho2) / denom;
    let t_star_upper = (nu2 * n / i0).ln() / (beta * rho1 - gamma) + c_const / (1.0 - rho1);
    Ok(PeakBoundReport {
        nu1,
        nu2,
        rho1,
        rho2,
        t_cr_lower,
        t_star_upper,
        c_const,
    })
}

/// `(i(t_rho), N (1 - rho)(beta rho - gamma)/(beta rho) - c0 / 2)`.
pub fn infected_floor_check(traj: &FluidTrajectory, rho: f64) -> Option<(f64, f64)> {
    let p = traj.params;
    let t = time_to_susceptible_fraction(traj, rho).value()?;
    let i = traj.state_at(t).i;
    let c0 = traj.i0 + traj.r0;
    let bound = p.n * (1.0 - rho) * (p.beta * rho - p.gamma) / (p.beta * rho) - c0 / 2.0;
    Some((i, bound))
}

/// `(t_{rho2} - t_{rho1}, N (rho1 - rho2) / (beta rho2 i(t_{rho1})))` for `rho1 > rho2`.
pub fn fraction_gap_check(traj: &FluidTrajectory, rho1: f64, rho2: f64) -> Option<(f64, f64)> {
    let p = traj.params;
    let t1 = time_to_susceptible_fraction(traj, rho1).value()?;
    let t2 = time_to_susceptible_fraction(traj, rho2).value()?;
    let i1 = traj.state_at(t1).i;
    Some((t2 - t1, p.n * (rho1 - rho2) / (p.beta * rho2 * i1)))
}

/// `(t_rho, ln(nu2 N / i0) / (beta rho - gamma))` for `rho > gamma / beta`.
pub fn fraction_time_check(traj: &FluidTrajectory, rho: f64) -> Option<(f64, f64)> {
    let p = traj.params;
    let t = time_to_susceptible_fraction(traj, rho).value()?;
    let nu2 = 2.0 * (p.beta - p.gamma) / p.beta;
    Some((t, (nu2 * p.n / traj.i0).ln() / (p.beta * rho - p.gamma)))
}

/// Max over the grid of `|eta x(t) - x_eta(t)| / (eta n)` for `x` in `{s, i, r}`.
pub fn scaling_check(params: &ModelParams, s0: f64, i0: f64, r0: f64, eta: f64, t_max: f64, tol: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(invalid("eta must be positive"));
    }
    let base = integrate(params, s0, i0, r0, t_max, tol)?;
    let scaled = integrate(&params.with_n(eta * params.n), eta * s0, eta * i0, eta * r0, t_max, tol)?;
    let same_grid = base.grid.len() == scaled.grid.len();
    let mut worst: f64 = 0.0;
    for (k, g) in base.grid.iter().enumerate() {
        let h = if same_grid && scaled.grid[k].t == g.t {
            scaled.grid[k]
        } else {
            scaled.state_at(g.t)
        };
        for (x, y) in [(g.s, h.s), (g.i, h.i), (g.r, h.r)] {
            worst = worst.max((eta * x - y).abs() / (eta * params.n));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_moves_without_infected() {
        let p = ModelParams::sir(1000.0, 0.5, 0.25);
        let traj = integrate(&p, 1000.0, 0.0, 0.0, 50.0, 1e-10).unwrap();
        assert!(traj.grid.iter().all(|g| g.s == 1000.0 && g.i == 0.0));
    }

    #[test]
    fn bass_absorbs_everyone() {
        let p = ModelParams::bass(1000.0, 0.5, 0.01);
        let traj = integrate(&p, 1000.0, 0.0, 0.0, 100.0, 1e-10).unwrap();
        let last = traj.grid.last().unwrap();
        assert!(last.s < 1e-6 && (last.i - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn closed_form_endpoints() {
        let p = ModelParams::bass(1000.0, 0.5, 0.01);
        assert_eq!(bass_closed_form(&p, 0.0).unwrap(), 0.0);
        assert!((bass_closed_form(&p, 1e4).unwrap() - 1000.0).abs() < 1e-9);
        assert!(bass_closed_form(&ModelParams::bass(10.0, 0.5, 0.0), 1.0).is_err());
    }

    #[test]
    fn xi_form_at_zero() {
        let p = ModelParams::sir(100.0, 0.5, 0.25);
        assert_eq!(sir_xi_form(&p, 95.0, 5.0, 0.0, 0.0, 1e-10).unwrap(), (95.0, 5.0, 0.0));
    }

    #[test]
    fn bass_never_reaches_rate_peak() {
        let p = ModelParams::bass(1000.0, 0.5, 0.01);
        let traj = integrate(&p, 999.0, 1.0, 0.0, 60.0, 1e-10).unwrap();
        assert_eq!(peak_times(&traj).t_star_rate, MarkerTime::Unreached);
    }

    #[test]
    fn marker_serialisation() {
        let m = serde_json::to_string(&MarkerTime::Unreached).unwrap();
        assert_eq!(m, "\"unreached\"");
        let back: MarkerTime = serde_json::from_str("1.5").unwrap();
        assert_eq!(back, MarkerTime::At(1.5));
    }

    #[test]
    fn bounds_reject_bad_hypotheses() {
        let p = ModelParams::sir(1e6, 0.25, 0.5);
        assert!(peak_bounds(&p, 1.0, 1.0).is_err());
        let p = ModelParams::sir(10.0, 0.5, 0.25);
        assert!(peak_bounds(&p, 1.0, 1.0).is_err());
        // ln ln N barely above 1, so rho1 < gamma / beta.
        let p = ModelParams::sir(100.0, 0.5, 0.25);
        let err = peak_bounds(&p, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("rho1"));
    }

    #[test]
    fn rejects_nonconserving_initial_state() {
        let p = ModelParams::sir(1e6, 0.5, 0.25);
        assert!(integrate(&p, 1e6, 1.0, 0.0, 10.0, 1e-10).is_err());
    }
}
