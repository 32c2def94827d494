use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distobs_core::harness::export::{
    export, trace_csv_string, write_json, CONFIG_FILE, SUMMARY_FILE, TRACE_FILE,
};
use distobs_core::harness::{analyze, run, sweep, AnalysisOptions, ScenarioConfig, Summary};
use distobs_core::{Error, SolverKind};

#[derive(Parser)]
#[command(name = "distobs", version, about = "Distributed information-form observer simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, summary.json and config.toml.
    Simulate(SimulateArgs),
    /// Re-run a recorded scenario with dense diagnostics and write analysis.json.
    Analyze(AnalyzeArgs),
    /// Run a scenario once per value of one config key.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    solver: Option<SolverKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

impl Overrides {
    fn apply(&self, mut cfg: ScenarioConfig) -> ScenarioConfig {
        if let Some(s) = self.solver {
            cfg.solver = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        cfg
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    trace: PathBuf,
    /// Sample frozen operators every this many steps for the kernel check.
    #[arg(long, default_value_t = 50)]
    kernel_stride: usize,
    #[arg(long, default_value_t = 500)]
    kernel_horizon: usize,
    /// Steps at which ADMM contraction is measured.
    #[arg(long, value_delimiter = ',', default_value = "0,10,100")]
    contraction_steps: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    contraction_iters: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Config key to vary, e.g. `h_iters` or `epsilon`.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Base config; the built-in defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

fn simulate(args: &SimulateArgs) -> Result<(), Error> {
    let cfg = args.overrides.apply(ScenarioConfig::load(&args.config)?);
    cfg.validate()?;
    let trace = run(&cfg)?;
    let summary = Summary::from_trace(&trace, None);
    for path in export(&trace, &summary, &args.out)? {
        println!("wrote {}", path.display());
    }
    if let (Some(first), Some(last)) = (trace.rows.first(), trace.rows.last()) {
        println!(
            "{} seed {}: {} steps, |x~| {:.3e} -> {:.3e}, final |xi~| {:.3e}",
            trace.solver,
            trace.seed,
            trace.rows.len(),
            first.err_state_norm,
            last.err_state_norm,
            last.err_corr_norm
        );
    }
    Ok(())
}

fn analyze_dir(args: &AnalyzeArgs) -> Result<(), Error> {
    let cfg = ScenarioConfig::load(&args.trace.join(CONFIG_FILE))?;
    let recorded = args.trace.join(TRACE_FILE);
    let recorded_csv = fs::read_to_string(&recorded).map_err(|e| io_error(&recorded, e))?;
    let opts = AnalysisOptions {
        kernel_horizon: args.kernel_horizon,
        kernel_stride: args.kernel_stride,
        contraction_steps: args.contraction_steps.clone(),
        contraction_iters: args.contraction_iters,
        ..AnalysisOptions::default()
    };
    let (trace, report) = analyze(&cfg, &opts)?;
    if trace_csv_string(&trace) != recorded_csv {
        return Err(Error::Config(format!(
            "{} does not match a re-run of {}",
            recorded.display(),
            args.trace.join(CONFIG_FILE).display()
        )));
    }
    let summary = Summary::from_trace(&trace, report.certificate.clone());
    write_json(&summary, &args.trace.join(SUMMARY_FILE))?;
    let out = args.trace.join("analysis.json");
    write_json(&report, &out)?;
    println!("wrote {}", out.display());
    println!("lyapunov decay (gamma_bar {:.4}): {}", report.gamma_bar, verdict(report.lyapunov.holds));
    if let Some(k) = &report.kernel {
        println!(
            "kernel invariance over {} steps: {} (min sigma+ {:.3e})",
            k.steps,
            verdict(k.invariant),
            k.min_sigma_plus
        );
    }
    if let Some(c) = &report.contraction {
        println!("contraction: mu_hat {:.6}, monotone {}", c.mu_hat, c.all_monotone);
    }
    if let Some(c) = &report.certificate {
        println!(
            "small-gain: spectral radius {:.6}, schur {}",
            c.spectral_radius, c.schur
        );
    }
    if let Some(e) = &report.error_dynamics {
        println!("error dynamics identity: {}", verdict(e.holds));
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<(), Error> {
    let base = match &args.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    let base = args.overrides.apply(base);
    let rows = sweep(&base, &args.param, &args.values)?;
    let mut w = csv::Writer::from_path(&args.out).map_err(|e| csv_error(&args.out, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&args.out, e))?;
        println!(
            "{} = {}: final |x~| {:.3e}, mean |xi~| {:.3e}",
            r.param, r.value, r.final_err_state_norm, r.mean_err_corr_norm
        );
    }
    w.flush().map_err(|e| io_error(&args.out, e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "violated"
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze_dir(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
