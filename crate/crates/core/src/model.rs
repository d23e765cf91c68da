//! Domain types shared by every module: parameters, states, the jump ledger
//! of a simulated path and the observation sets extracted from it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Imitation plus innovation, no recovery (`gamma = 0`).
    Bass,
    /// Transmission plus recovery, no innovation (`p = 0`).
    Sir,
    General,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bass" => Ok(Regime::Bass),
            "sir" => Ok(Regime::Sir),
            "general" => Ok(Regime::General),
            other => Err(Error::Parse(format!("unknown model '{other}'"))),
        }
    }
}

/// The tuple `(N, beta, gamma, p)` with its regime tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p: f64,
    pub regime: Regime,
}

impl ModelParams {
    pub fn bass(n: f64, beta: f64, p: f64) -> Self {
        Self {
            n,
            beta,
            gamma: 0.0,
            p,
            regime: Regime::Bass,
        }
    }

    pub fn sir(n: f64, beta: f64, gamma: f64) -> Self {
        Self {
            n,
            beta,
            gamma,
            p: 0.0,
            regime: Regime::Sir,
        }
    }

    /// Initial innovator arrival rate `a = p * N`.
    pub fn a(&self) -> f64 {
        self.p * self.n
    }

    /// Same rates with a different population size, keeping `p` fixed.
    pub fn with_n(&self, n: f64) -> Self {
        Self { n, ..*self }
    }

    /// Population size as an integer count; errors if `n` is not integral.
    pub fn n_count(&self) -> Result<u64> {
        if self.n.fract() != 0.0 || self.n < 1.0 || self.n > 9.0e15 {
            return Err(invalid(format!(
                "n = {} must be a positive integer for the stochastic model",
                self.n
            )));
        }
        Ok(self.n as u64)
    }
}

/// Check parameter constraints; with `strict` the SIR study assumption
/// `beta > gamma` is enforced as well.
pub fn validate_params(params: ModelParams, strict: bool) -> Result<ModelParams> {
    if !(params.n > 0.0) || !params.n.is_finite() {
        return Err(invalid("n must be positive"));
    }
    for (name, v) in [("beta", params.beta), ("gamma", params.gamma), ("p", params.p)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(invalid(format!("{name} must be a finite non-negative rate, got {v}")));
        }
    }
    match params.regime {
        Regime::Bass if params.gamma != 0.0 => {
            return Err(invalid("Bass regime requires gamma = 0"));
        }
        Regime::Sir if params.p != 0.0 => {
            return Err(invalid("SIR regime requires p = 0"));
        }
        _ => {}
    }
    if strict && params.regime == Regime::Sir && params.beta <= params.gamma {
        return Err(invalid(format!(
            "β ≤ γ (beta = {}, gamma = {}): strict mode requires a supercritical SIR",
            params.beta, params.gamma
        )));
    }
    Ok(params)
}

/// Compartment counts after some jump. `c` is the cumulative count `i + r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiffusionState {
    pub s: u64,
    pub i: u64,
    pub r: u64,
    pub c: u64,
}

impl DiffusionState {
    pub fn new(n: u64, i: u64, r: u64) -> Result<Self> {
        let ir = i
            .checked_add(r)
            .filter(|&ir| ir <= n)
            .ok_or_else(|| invalid(format!("i0 + r0 = {} + {} exceeds n = {}", i, r, n)))?;
        Ok(Self {
            s: n - ir,
            i,
            r,
            c: ir,
        })
    }

    pub fn n(&self) -> u64 {
        self.s + self.i + self.r
    }

    /// Stopping set: no infected left, or everyone infected.
    pub fn is_terminal(&self) -> bool {
        self.i == 0 || self.i == self.n()
    }

    pub fn after(&self, kind: JumpKind) -> Self {
        match kind {
            JumpKind::Infection => Self {
                s: self.s - 1,
                i: self.i + 1,
                r: self.r,
                c: self.c + 1,
            },
            JumpKind::Recovery => Self {
                s: self.s,
                i: self.i - 1,
                r: self.r + 1,
                c: self.c,
            },
            JumpKind::Frozen => *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JumpKind {
    Infection,
    Recovery,
    /// Placeholder for indices past the stopping time.
    Frozen,
}

impl JumpKind {
    fn code(self) -> &'static str {
        match self {
            JumpKind::Infection => "I",
            JumpKind::Recovery => "R",
            JumpKind::Frozen => "X",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Absolute jump time `t_k` (infinite past the stopping time).
    pub t: f64,
    /// Inter-arrival time `T_k` (infinite past the stopping time).
    pub inter_arrival: f64,
    pub kind: JumpKind,
    pub state_after: DiffusionState,
}

/// Ordered record of one path of the jump process.
///
/// Entries past the stopping index `tau` are materialised with the freeze
/// convention: unchanged state, infinite inter-arrival time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpLedger {
    pub n: u64,
    pub i0: u64,
    pub r0: u64,
    pub entries: Vec<LedgerEntry>,
    pub terminated_at: Option<usize>,
}

impl JumpLedger {
    pub fn initial_state(&self) -> DiffusionState {
        DiffusionState {
            s: self.n - self.i0 - self.r0,
            i: self.i0,
            r: self.r0,
            c: self.i0 + self.r0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// State after jump `k` (`k = 0` is the initial state).
    pub fn state(&self, k: usize) -> DiffusionState {
        if k == 0 {
            self.initial_state()
        } else {
            self.entries[k - 1].state_after
        }
    }

    /// Alive indicator `E_k = 1{tau > k}`.
    pub fn alive(&self, k: usize) -> bool {
        self.terminated_at.is_none_or(|tau| k < tau)
    }

    /// Pad with frozen entries up to `horizon` jumps.
    pub fn materialize(&mut self, horizon: usize) {
        let last = self.state(self.entries.len());
        while self.entries.len() < horizon {
            self.entries.push(LedgerEntry {
                t: f64::INFINITY,
                inter_arrival: f64::INFINITY,
                kind: JumpKind::Frozen,
                state_after: last,
            });
        }
    }

    pub fn observations(&self) -> ObservationSet {
        ObservationSet {
            i0: self.i0,
            r0: self.r0,
            samples: self
                .entries
                .iter()
                .map(|e| Observation {
                    inter_arrival: e.inter_arrival,
                    cumulative: e.state_after.c,
                })
                .collect(),
        }
    }

    /// Write the ledger as CSV: `k,t,inter_arrival,kind,S,I,R,C`.
    ///
    /// Only real jumps are written; a terminated ledger ends with one `X` row
    /// at `k = tau` whose inter-arrival column reads `terminated`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "t", "inter_arrival", "kind", "S", "I", "R", "C"])?;
        let jumps = self.terminated_at.unwrap_or(self.entries.len());
        for (idx, e) in self.entries.iter().take(jumps).enumerate() {
            let st = e.state_after;
            out.write_record([
                (idx + 1).to_string(),
                format_f64(e.t),
                format_f64(e.inter_arrival),
                e.kind.code().to_string(),
                st.s.to_string(),
                st.i.to_string(),
                st.r.to_string(),
                st.c.to_string(),
            ])?;
        }
        if let Some(tau) = self.terminated_at {
            let st = self.state(tau);
            let t = if tau == 0 { 0.0 } else { self.entries[tau - 1].t };
            out.write_record([
                tau.to_string(),
                format_f64(t),
                "terminated".to_string(),
                "X".to_string(),
                st.s.to_string(),
                st.i.to_string(),
                st.r.to_string(),
                st.c.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Read a ledger written by [`JumpLedger::write_csv`], padding frozen
    /// entries up to `horizon` when given.
    pub fn read_csv<R: Read>(r: R, horizon: Option<usize>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["k", "t", "inter_arrival", "kind", "S", "I", "R", "C"];
        if headers.iter().map(str::trim).ne(expected) {
            return Err(Error::Parse(format!(
                "ledger header must be {:?}, got {:?}",
                expected,
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let parse_u = |i: usize| -> Result<u64> {
                field(i)
                    .parse::<u64>()
                    .map_err(|_| Error::Parse(format!("bad integer '{}' in column {}", field(i), expected[i])))
            };
            let k = parse_u(0)? as usize;
            let kind = match field(3).as_str() {
                "I" => JumpKind::Infection,
                "R" => JumpKind::Recovery,
                "X" => JumpKind::Frozen,
                other => return Err(Error::Parse(format!("unknown jump kind '{other}'"))),
            };
            let t: f64 = field(1)
                .parse()
                .map_err(|_| Error::Parse(format!("bad time '{}'", field(1))))?;
            let inter = if kind == JumpKind::Frozen {
                f64::INFINITY
            } else {
                field(2)
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad inter-arrival '{}'", field(2))))?
            };
            let st = DiffusionState {
                s: parse_u(4)?,
                i: parse_u(5)?,
                r: parse_u(6)?,
                c: parse_u(7)?,
            };
            rows.push((k, t, inter, kind, st));
        }
        let first = rows
            .first()
            .ok_or_else(|| Error::Parse("ledger has no rows".into()))?;
        let n = first.4.n();
        // Recover the initial state from the first row.
        let (i0, r0) = match first.3 {
            JumpKind::Infection => (first.4.i - 1, first.4.r),
            JumpKind::Recovery => (first.4.i + 1, first.4.r - 1),
            JumpKind::Frozen => (first.4.i, first.4.r),
        };
        let mut ledger = JumpLedger {
            n,
            i0,
            r0,
            entries: Vec::with_capacity(rows.len()),
            terminated_at: None,
        };
        let mut prev = ledger.initial_state();
        for (k, t, inter, kind, st) in rows {
            if kind == JumpKind::Frozen {
                ledger.terminated_at = Some(k);
                break;
            }
            if k != ledger.entries.len() + 1 {
                return Err(Error::DataCorruption(format!("jump index {k} out of sequence")));
            }
            if st.n() != n || st.c != st.i + st.r || prev.after(kind) != st {
                return Err(Error::DataCorruption(format!(
                    "row k = {k} is inconsistent with the previous state"
                )));
            }
            ledger.entries.push(LedgerEntry {
                t,
                inter_arrival: inter,
                kind,
                state_after: st,
            });
            prev = st;
        }
        if let Some(h) = horizon {
            if ledger.terminated_at.is_some() {
                ledger.materialize(h);
            } else {
                ledger.entries.truncate(h);
            }
        }
        Ok(ledger)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub inter_arrival: f64,
    pub cumulative: u64,
}

/// `O_m = (I_0, R_0, T_1, C_1, ..., T_m, C_m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub i0: u64,
    pub r0: u64,
    pub samples: Vec<Observation>,
}

impl ObservationSet {
    pub fn m(&self) -> usize {
        self.samples.len()
    }

    pub fn c0(&self) -> u64 {
        self.i0 + self.r0
    }

    /// Cumulative count after `k` jumps (`k = 0` gives `C_0`).
    pub fn cumulative(&self, k: usize) -> u64 {
        if k == 0 {
            self.c0()
        } else {
            self.samples[k - 1].cumulative
        }
    }

    /// Prefix `O_m'` of this set.
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            i0: self.i0,
            r0: self.r0,
            samples: self.samples[..m.min(self.samples.len())].to_vec(),
        }
    }

    /// Alive flag and infected count after `k` jumps, from `C_k` alone.
    pub fn state_at(&self, k: usize) -> Result<Reconstruction> {
        reconstruct_state(self.cumulative(k), k as u64, self.i0, self.r0)
    }

    /// First index at which the path is observed dead, if any.
    pub fn stopping_index(&self) -> Result<Option<usize>> {
        for k in 0..=self.m() {
            if !self.state_at(k)?.alive {
                return Ok(Some(k));
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub alive: bool,
    /// `I_k`, only determined while alive.
    pub infected: Option<u64>,
}

/// Recover `(E_k, I_k)` from the cumulative count.
///
/// After `k` jumps, `k = 2 C_k - I_0 - I_k - 2 R_0`, so the path is alive iff
/// `2 C_k > I_0 + k + 2 R_0` and then `I_k = 2 C_k - k - I_0 - 2 R_0`.
pub fn reconstruct_state(c_k: u64, k: u64, i0: u64, r0: u64) -> Result<Reconstruction> {
    let c0 = i0 + r0;
    if c_k < c0 || c_k - c0 > k {
        return Err(Error::DataCorruption(format!(
            "C_k = {c_k} infeasible after k = {k} jumps from I_0 = {i0}, R_0 = {r0}"
        )));
    }
    let twice_c = 2 * c_k as u128;
    let threshold = (i0 + k + 2 * r0) as u128;
    if twice_c > threshold {
        Ok(Reconstruction {
            alive: true,
            infected: Some((twice_c - threshold) as u64),
        })
    } else {
        Ok(Reconstruction {
            alive: false,
            infected: None,
        })
    }
}
