use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use difflim::discrete::{self, FitConfig};
use difflim::estimate::{self, EstimateReport};
use difflim::experiments::{self, StudyConfig};
use difflim::fisher::{self, BassIndexing};
use difflim::fluid;
use difflim::model::{validate_params, JumpLedger, ModelParams, Regime};
use difflim::simulate::{simulate_batch, simulate_ledger, SimSpec};

/// Stochastic and fluid Bass/SIR diffusion models: simulation, Fisher
/// information for N, estimators and Monte-Carlo studies.
#[derive(Debug, Parser, Serialize)]
#[command(name = "difflim", version)]
struct Cli {
    /// Master seed for every random stream
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = all cores)
    #[arg(long, global = true, env = "DIFFLIM_THREADS", default_value_t = 0)]
    threads: usize,

    /// Log level: error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    /// JSON file of flag values (flags on the command line win); for `study`, a study configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
enum Command {
    /// Simulate jump ledgers of the stochastic model (CSV)
    Simulate(SimulateArgs),
    /// Integrate the fluid model and report peak markers
    Fluid(FluidArgs),
    /// Fisher information of the first m jumps with respect to N
    Fisher(FisherArgs),
    /// Closed-form estimates from a ledger CSV (JSON)
    Estimate(EstimateArgs),
    /// Bass peak indices and expected time ratio over a grid (CSV)
    Peak(PeakArgs),
    /// Fit the discrete Poisson model to count series (JSON)
    Fit(FitArgs),
    /// Instances past their peak at epoch t
    Peaks(PeaksArgs),
    /// Run a Monte-Carlo study from a configuration file
    Study(StudyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Bass,
    Sir,
    General,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    /// Model regime
    #[arg(long, value_enum)]
    model: ModelKind,

    /// Effective population size N (individuals)
    #[arg(long = "N")]
    n: f64,

    /// Transmission / imitation rate beta (per unit time)
    #[arg(long, default_value_t = 0.0)]
    beta: f64,

    /// Recovery rate gamma (per unit time)
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,

    /// Innovation rate p (per unit time)
    #[arg(long, default_value_t = 0.0)]
    p: f64,

    /// Reject SIR parameters with beta <= gamma
    #[arg(long)]
    strict: bool,
}

impl ModelArgs {
    fn params(&self) -> Result<ModelParams> {
        let regime = match self.model {
            ModelKind::Bass => Regime::Bass,
            ModelKind::Sir => Regime::Sir,
            ModelKind::General => Regime::General,
        };
        let params = ModelParams {
            n: self.n,
            beta: self.beta,
            gamma: self.gamma,
            p: self.p,
            regime,
        };
        Ok(validate_params(params, self.strict)?)
    }
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Initial infected count (individuals)
    #[arg(long, default_value_t = 1)]
    i0: u64,

    /// Initial recovered count (individuals)
    #[arg(long, default_value_t = 0)]
    r0: u64,

    /// Number of jumps m to record
    #[arg(long = "max-jumps", short = 'm')]
    max_jumps: usize,

    /// Number of independent replicates
    #[arg(long, default_value_t = 1)]
    replicates: usize,

    /// Write one file per replicate into the --out directory instead of a single file with a replicate column
    #[arg(long)]
    per_replicate: bool,

    /// Output CSV file (or directory with --per-replicate); stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FluidArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Initial infected size (individuals, real)
    #[arg(long, default_value_t = 1.0)]
    i0: f64,

    /// Initial recovered size (individuals, real)
    #[arg(long, default_value_t = 0.0)]
    r0: f64,

    /// Integration horizon (time units); defaults to 4 ln N / (beta - gamma)
    #[arg(long)]
    t_max: Option<f64>,

    /// Relative local error tolerance per step
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,

    /// Output trajectory CSV (t, s, i, r, c) with a `.markers.json` sidecar; markers go to stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum IndexingArg {
    Printed,
    Exact,
}

#[derive(Debug, Args, Serialize)]
struct FisherArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Initial infected count (individuals)
    #[arg(long, default_value_t = 1)]
    i0: u64,

    /// Initial recovered count (individuals)
    #[arg(long, default_value_t = 0)]
    r0: u64,

    /// Number of observed jumps m; defaults to ceil(N^(2/3))
    #[arg(long = "max-jumps", short = 'm')]
    max_jumps: Option<usize>,

    /// Monte-Carlo replicates for the SIR estimate
    #[arg(long, default_value_t = 1000)]
    replicates: usize,

    /// SIR: exact dynamic programme over C_k instead of Monte-Carlo (O(m^2))
    #[arg(long)]
    exact: bool,

    /// Bass: index convention of the per-jump term
    #[arg(long, value_enum, default_value = "exact")]
    indexing: IndexingArg,

    /// Output JSON file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EstimateArgs {
    /// Ledger CSV as written by `simulate`
    #[arg(long)]
    ledger: PathBuf,

    /// Estimator to run
    #[arg(long, value_enum)]
    model: ModelKind,

    /// Population N (individuals); enables SIR confidence intervals
    #[arg(long = "N")]
    n: Option<f64>,

    /// Interval half-width parameter in (0, 1); defaults to sqrt(5 ln m / m)
    #[arg(long)]
    delta: Option<f64>,

    /// Bass: a-priori upper bound on N used in the slab radius (individuals)
    #[arg(long)]
    n_max: Option<f64>,

    /// Bass: slab radius constant
    #[arg(long, default_value_t = 2.0)]
    c1: f64,

    /// Output JSON file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PeakArgs {
    /// Population sizes N (individuals), comma separated
    #[arg(long = "N", value_delimiter = ',', required = true)]
    n: Vec<f64>,

    /// Imitation rate beta (per unit time)
    #[arg(long)]
    beta: f64,

    /// Innovation rates p (per unit time), comma separated
    #[arg(long, value_delimiter = ',', conflicts_with = "alpha")]
    p: Vec<f64>,

    /// Exponents alpha with p = beta N^(-alpha), comma separated
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,

    /// Output CSV file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    /// Counts CSV: instance_id, t, delta_c[, delta_r]
    #[arg(long)]
    counts: PathBuf,

    /// Known recovery rate gamma (per epoch)
    #[arg(long)]
    gamma: f64,

    /// Upper bound on N (individuals)
    #[arg(long)]
    n_max: f64,

    /// Optimizer starts
    #[arg(long, default_value_t = 16)]
    starts: usize,

    /// Hold a = 0 instead of fitting it on [0, 10]
    #[arg(long)]
    no_a: bool,

    /// Infected count before epoch 1 (individuals)
    #[arg(long, default_value_t = 1)]
    i_init: u64,

    /// Recovered count before epoch 1 (individuals)
    #[arg(long, default_value_t = 0)]
    r_init: u64,

    /// Also forecast the peak of I over this many further epochs
    #[arg(long)]
    predict_horizon: Option<u32>,

    /// Forward-simulation replicates for the peak forecast
    #[arg(long, default_value_t = 1000)]
    replicates: usize,

    /// Output JSON file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PeaksArgs {
    /// Counts CSV: instance_id, t, delta_c[, delta_r]
    #[arg(long)]
    counts: PathBuf,

    /// Fraction of the running maximum increment, in (0, 1)
    #[arg(long)]
    gamma1: f64,

    /// Epoch index
    #[arg(long)]
    t: u32,

    /// Output JSON file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct StudyArgs {
    /// Override the configured replicate count
    #[arg(long)]
    replicates: Option<usize>,

    /// Output directory for the study CSV and JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Validation(String);

impl std::fmt::Display for Validation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

#[derive(Debug)]
struct StudyFailed(String);

impl std::fmt::Display for StudyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for StudyFailed {}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    Validation(msg.into()).into()
}

/// Insert `--key value` pairs from a flat JSON object for every flag not
/// already present after the subcommand.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => argv.get(pos + 1).cloned().ok_or_else(|| validation("--config needs a path"))?,
    };
    let sub_pos = argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1);
    if argv.iter().any(|a| a == "study") {
        return Ok(argv);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| validation(format!("config {path}: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| validation(format!("config {path} must be a JSON object")))?;
    let mut extra = Vec::new();
    for (key, val) in obj {
        let flag = format!("--{key}");
        let present = argv.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if present {
            continue;
        }
        match val {
            serde_json::Value::Bool(true) => extra.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => extra.extend([flag, s.clone()]),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_string))
                    .collect();
                extra.extend([flag, joined.join(",")]);
            }
            other => extra.extend([flag, other.to_string()]),
        }
    }
    let mut out = argv;
    let at = sub_pos.map_or(out.len(), |p| p + 1);
    out.splice(at..at, extra);
    Ok(out)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut w = open_out(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    unix_time: u64,
    config: &'a Cli,
}

/// `<file>.meta.json` next to a primary output.
fn write_metadata(primary: &Path, cli: &Cli) -> Result<()> {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    let meta = Metadata {
        tool: "difflim",
        version: env!("CARGO_PKG_VERSION"),
        unix_time: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config: cli,
    };
    let path = primary.with_file_name(name);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn finish(out: Option<&Path>, cli: &Cli) -> Result<()> {
    if let Some(p) = out {
        write_metadata(p, cli)?;
    }
    Ok(())
}

fn run_simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let params = a.model.params()?;
    let spec = SimSpec::new(params, a.i0, a.r0, a.max_jumps, cli.seed);
    spec.validate()?;
    if a.replicates == 0 {
        return Err(validation("--replicates must be at least 1"));
    }
    if a.replicates == 1 && !a.per_replicate {
        let ledger = simulate_ledger(&spec)?;
        let mut w = open_out(a.out.as_deref())?;
        ledger.write_csv(&mut w)?;
        w.flush()?;
        return finish(a.out.as_deref(), cli);
    }
    let ledgers = simulate_batch(&spec, a.replicates, cli.threads);
    if a.per_replicate {
        let dir = a.out.as_deref().ok_or_else(|| validation("--per-replicate needs --out DIR"))?;
        std::fs::create_dir_all(dir)?;
        for (r, l) in ledgers.into_iter().enumerate() {
            let path = dir.join(format!("ledger_{r:05}.csv"));
            let mut w = BufWriter::new(File::create(&path)?);
            l.with_context(|| format!("replicate {r}"))?.write_csv(&mut w)?;
            w.flush()?;
        }
        return finish(Some(&dir.join("ledgers")), cli);
    }
    let mut w = open_out(a.out.as_deref())?;
    for (r, l) in ledgers.into_iter().enumerate() {
        let mut buf = Vec::new();
        l.with_context(|| format!("replicate {r}"))?.write_csv(&mut buf)?;
        let text = String::from_utf8(buf)?;
        for (j, line) in text.lines().enumerate() {
            if j == 0 {
                if r == 0 {
                    writeln!(w, "replicate,{line}")?;
                }
            } else {
                writeln!(w, "{r},{line}")?;
            }
        }
    }
    w.flush()?;
    finish(a.out.as_deref(), cli)
}

#[derive(Serialize)]
struct FluidSummary {
    markers: fluid::PeakMarkers,
    bounds: Option<fluid::PeakBoundReport>,
    bounds_error: Option<String>,
    samples: usize,
}

fn run_fluid(cli: &Cli, a: &FluidArgs) -> Result<()> {
    let params = a.model.params()?;
    let s0 = params.n - a.i0 - a.r0;
    let t_max = a.t_max.unwrap_or_else(|| fluid::default_t_max(&params));
    let traj = fluid::integrate(&params, s0, a.i0, a.r0, t_max, a.tol)?;
    let markers = fluid::peak_times(&traj);
    let (bounds, bounds_error) = if params.gamma > 0.0 {
        match fluid::peak_bounds(&params, a.i0 + a.r0, a.i0) {
            Ok(b) => (Some(b), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    let summary = FluidSummary {
        markers,
        bounds,
        bounds_error,
        samples: traj.grid.len(),
    };
    match &a.out {
        Some(path) => {
            let mut w = open_out(Some(path))?;
            traj.write_csv(&mut w)?;
            w.flush()?;
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".markers.json");
            write_json(&summary, Some(&path.with_file_name(name)))?;
            finish(Some(path), cli)
        }
        None => write_json(&summary, None),
    }
}

#[derive(Serialize)]
struct FisherOutput {
    total: f64,
    cr_floor: f64,
    scaling_ratio: f64,
    report: fisher::FisherReport,
}

fn run_fisher(cli: &Cli, a: &FisherArgs) -> Result<()> {
    let params = a.model.params()?;
    let m = a.max_jumps.unwrap_or_else(|| estimate::critical_index(params.n) as usize);
    let report = match params.regime {
        Regime::Bass => {
            let indexing = match a.indexing {
                IndexingArg::Printed => BassIndexing::Printed,
                IndexingArg::Exact => BassIndexing::Exact,
            };
            fisher::fisher_bass(params.n, a.i0, m, indexing)?
        }
        Regime::Sir if a.exact => fisher::fisher_sir_exact(&params, a.i0, a.r0, m)?,
        Regime::Sir => fisher::fisher_sir_mc(&params, a.i0, a.r0, m, a.replicates, cli.seed, cli.threads)?,
        Regime::General => return Err(validation("fisher supports --model bass or sir")),
    };
    let out = FisherOutput {
        total: report.total,
        cr_floor: report.cr_floor,
        scaling_ratio: report.scaling_ratio(),
        report,
    };
    write_json(&out, a.out.as_deref())?;
    finish(a.out.as_deref(), cli)
}

fn run_estimate(cli: &Cli, a: &EstimateArgs) -> Result<()> {
    let file = File::open(&a.ledger).with_context(|| format!("opening {}", a.ledger.display()))?;
    let ledger = JumpLedger::read_csv(std::io::BufReader::new(file), None)?;
    let obs = ledger.observations();
    let report: EstimateReport = match a.model {
        ModelKind::Sir => {
            let est = estimate::estimate_sir(&obs)?;
            match a.n {
                Some(n) => {
                    let delta = a.delta.unwrap_or_else(|| estimate::default_delta(obs.m()));
                    let g = est.point.gamma_hat.unwrap_or(0.0);
                    let threshold = fisher::compute_survival_threshold(est.point.beta_hat, g).ok();
                    estimate::sir_confidence_intervals(&est, delta, n, obs.c0(), obs.i0, threshold.as_ref())?
                }
                None => est,
            }
        }
        ModelKind::Bass => {
            let n_bound = a
                .n_max
                .or(a.n)
                .ok_or_else(|| validation("Bass estimation needs --n-max (or --N) for the slab radius"))?;
            estimate::estimate_bass(&obs, n_bound, a.c1)?
        }
        ModelKind::General => return Err(validation("estimate supports --model bass or sir")),
    };
    write_json(&report, a.out.as_deref())?;
    finish(a.out.as_deref(), cli)
}

fn run_peak(cli: &Cli, a: &PeakArgs) -> Result<()> {
    let mut w = open_out(a.out.as_deref())?;
    writeln!(w, "n,p,beta,alpha,k_cr,k_star,t_cr,t_star,ratio")?;
    let grid: Vec<(f64, Option<f64>)> = if a.alpha.is_empty() {
        a.p.iter().map(|&p| (p, None)).collect()
    } else {
        a.alpha.iter().map(|&al| (f64::NAN, Some(al))).collect()
    };
    if grid.is_empty() {
        return Err(validation("peak needs --p or --alpha"));
    }
    for &(p0, alpha) in &grid {
        for &n in &a.n {
            let p = alpha.map_or(p0, |al| a.beta * n.powf(-al));
            let tr = estimate::bass_time_ratio(n, p, a.beta)?;
            writeln!(
                w,
                "{n:?},{p:?},{:?},{},{},{},{:?},{:?},{:?}",
                a.beta,
                alpha.map(|x| format!("{x:?}")).unwrap_or_default(),
                tr.k_cr,
                tr.k_star,
                tr.t_cr,
                tr.t_star,
                tr.ratio
            )?;
        }
    }
    w.flush()?;
    finish(a.out.as_deref(), cli)
}

#[derive(Serialize)]
struct FitOutput {
    instance_id: String,
    fit: discrete::FitResult,
    recoveries_imputed: bool,
    peak: Option<discrete::PeakPrediction>,
}

fn run_fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let file = File::open(&a.counts).with_context(|| format!("opening {}", a.counts.display()))?;
    let collection = discrete::read_counts_csv(std::io::BufReader::new(file), a.i_init, a.r_init)?;
    let cfg = FitConfig {
        starts: a.starts,
        seed: cli.seed,
        fit_a: !a.no_a,
        parallelism: cli.threads,
        ..FitConfig::default()
    };
    let mut out = Vec::with_capacity(collection.len());
    for series in &collection {
        let fit = discrete::fit_mle(series, a.gamma, a.n_max, &cfg)?;
        let peak = match a.predict_horizon {
            Some(h) if fit.converged => Some(discrete::predict_peak(
                series,
                &fit,
                a.gamma,
                h,
                a.replicates,
                cli.seed,
                cli.threads,
            )?),
            _ => None,
        };
        log::info!("{}: N_hat {:.1} beta_hat {:.4}", series.instance_id, fit.n_hat, fit.beta_hat);
        out.push(FitOutput {
            instance_id: series.instance_id.clone(),
            recoveries_imputed: !series.recoveries_observed(),
            fit,
            peak,
        });
    }
    write_json(&out, a.out.as_deref())?;
    finish(a.out.as_deref(), cli)
}

fn run_peaks(cli: &Cli, a: &PeaksArgs) -> Result<()> {
    let file = File::open(&a.counts).with_context(|| format!("opening {}", a.counts.display()))?;
    let collection = discrete::read_counts_csv(std::io::BufReader::new(file), 0, 0)?;
    let ids = discrete::peaked_set(&collection, a.gamma1, a.t)?;
    write_json(&ids, a.out.as_deref())?;
    finish(a.out.as_deref(), cli)
}

fn run_study(cli: &Cli, a: &StudyArgs) -> Result<()> {
    let path = cli.config.as_deref().ok_or_else(|| validation("study needs --config FILE"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: StudyConfig =
        serde_json::from_str(&text).map_err(|e| validation(format!("study config {}: {e}", path.display())))?;
    // Flags win over the file.
    if std::env::args().any(|x| x == "--seed" || x.starts_with("--seed=")) {
        cfg.seed = cli.seed;
    }
    if std::env::args().any(|x| x == "--threads" || x.starts_with("--threads="))
        || std::env::var_os("DIFFLIM_THREADS").is_some()
    {
        cfg.threads = cli.threads;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(out) = &a.out {
        cfg.output_path = Some(out.clone());
    }
    log::info!("study config: {}", serde_json::to_string(&cfg)?);
    let result = experiments::run_study(&cfg)?;
    if cfg.output_path.is_none() {
        println!("{}", result.primary_json()?);
    }
    for r in result.rows.iter().filter(|r| !r.pass) {
        eprintln!("point {} (n = {}, m = {}) failed: estimate {} {}", r.point, r.n, r.m, r.estimate, r.detail);
    }
    for c in result.checks.iter().filter(|c| !c.pass) {
        eprintln!("check '{}' failed: {} not in [{}, {}]", c.name, c.value, c.lower, c.upper);
    }
    if !result.pass {
        bail!(StudyFailed(format!("{:?} study did not meet its thresholds", cfg.study)));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => run_simulate(cli, a),
        Command::Fluid(a) => run_fluid(cli, a),
        Command::Fisher(a) => run_fisher(cli, a),
        Command::Estimate(a) => run_estimate(cli, a),
        Command::Peak(a) => run_peak(cli, a),
        Command::Fit(a) => run_fit(cli, a),
        Command::Peaks(a) => run_peaks(cli, a),
        Command::Study(a) => run_study(cli, a),
    }
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<StudyFailed>().is_some() {
        return (3, "study");
    }
    if err.downcast_ref::<Validation>().is_some() {
        return (1, "validation");
    }
    match err.downcast_ref::<difflim::Error>() {
        Some(e) if e.is_validation() => (1, "validation"),
        _ => (2, "runtime"),
    }
}

fn main() -> ExitCode {
    let argv = match merge_config(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("error[{kind}]: {e:#}");
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 1 {
                eprintln!("error[validation]: invalid arguments");
            }
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match serde_json::to_string(&cli) {
        Ok(json) => log::info!("resolved config: {json}"),
        Err(e) => log::warn!("could not serialise config: {e}"),
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
