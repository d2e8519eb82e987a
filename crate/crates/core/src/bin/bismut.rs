use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use neumann_bismut::bounds::{run_suite, MomentOptions, Suite};
use neumann_bismut::runner::{
    bench_csv_line, bound_csv_line, csv_document, dump_paths, emit, geometry_csv_lines, parse_vector, resolve_output, run_bench, run_estimate,
    run_oracle, run_validate_geometry, stein_csv_line, to_json, ExperimentConfig, BENCH_COLUMNS, BOUND_COLUMNS, ESTIMATE_COLUMNS,
    GEOMETRY_COLUMNS, STEIN_COLUMNS,
};
use neumann_bismut::stein::hsi_sweep;
use neumann_bismut::{Error, Result};

#[derive(Parser)]
#[command(name = "bismut", version, about = "Bismut-type derivative estimators for reflected diffusions")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo estimate of one formula.
    Estimate(ExpArgs),
    /// Deterministic oracle value in the `estimate` row layout.
    Oracle(ExpArgs),
    /// Evaluate the derivative bound catalog.
    VerifyBounds(BoundArgs),
    /// Entropy / Fisher / Stein sweep with the HSI and log-Sobolev right sides.
    Stein(SteinArgs),
    /// Check the analytic geometry tensors of a model.
    ValidateGeometry(GeometryArgs),
    /// Path-simulation throughput.
    Bench(ExpArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output file (relative paths resolve against $NEUMANN_BISMUT_OUT when set).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args, Clone)]
struct ExpArgs {
    /// `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long = "ou-k")]
    ou_k: Option<String>,
    #[arg(long)]
    radius: Option<String>,
    /// Test function: sq, coord:i, costheta, gauss:a, const:c.
    #[arg(long = "f")]
    f: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    v: Option<String>,
    #[arg(long = "T")]
    t: Option<String>,
    #[arg(long = "N")]
    n: Option<String>,
    #[arg(long)]
    dt: Option<String>,
    /// constant, ramp, exponential:K or tab:t=v;…
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// pf, grad13, grad14, lpf, hess or hessgrad.
    #[arg(long)]
    formula: Option<String>,
    /// Ordered reduction: byte-identical output for any thread count.
    #[arg(long)]
    reproducible: bool,
    /// Disable Brownian-bridge boundary detection.
    #[arg(long)]
    no_bridge: bool,
    /// Write the first simulated paths to a binary trace.
    #[arg(long)]
    dump_paths: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_kv(&text)?;
        }
        let pairs = [
            ("model", &self.model),
            ("ou_k", &self.ou_k),
            ("radius", &self.radius),
            ("f", &self.f),
            ("x0", &self.x0),
            ("v", &self.v),
            ("T", &self.t),
            ("N", &self.n),
            ("dt", &self.dt),
            ("schedule", &self.schedule),
            ("seed", &self.seed),
            ("formula", &self.formula),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if let Some(o) = &self.out.output {
            cfg.output = Some(o.clone());
        }
        if self.reproducible {
            cfg.reproducible = true;
        }
        if self.no_bridge {
            cfg.bridge = false;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    /// Paths for local-time moments.
    #[arg(long = "N", default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SteinArgs {
    /// `c2=v1,v2,…`.
    #[arg(long, default_value = "c2=0.25,0.5,1.5,2,4")]
    sweep: String,
    #[arg(long = "K", default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long, default_value = "hemisphere")]
    model: String,
    #[arg(long = "ou-k", default_value_t = 0.0)]
    ou_k: f64,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Interior sample points (half as many boundary points are added).
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

fn write_out<T: serde::Serialize>(out: &OutArgs, explicit: Option<&std::path::Path>, name: &str, header: &str, rows: &[String], json: &T) -> Result<()> {
    let (content, ext) = match out.format {
        Format::Csv => (csv_document(header, rows), "csv"),
        Format::Json => (to_json(json)?, "json"),
    };
    let dest = resolve_output(explicit, &format!("{name}.{ext}"));
    emit(dest.as_deref(), &content)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Estimate(a) => {
            let cfg = a.config()?;
            if let Some(p) = &a.dump_paths {
                dump_paths(&cfg, p)?;
            }
            let (row, est) = run_estimate(&cfg)?;
            write_out(&a.out, cfg.output.as_deref(), "estimate", ESTIMATE_COLUMNS, &[row.csv_line()], &row)?;
            eprintln!(
                "estimate {} {} on {}: {:.6} ± {:.6} (N = {}, rejected {}, {:.2} s)",
                row.formula, row.f, row.model, row.value, row.se, est.n_samples, est.n_rejected, est.runtime_s
            );
            if !est.reliable {
                eprintln!("warning: rejection rate {:.2e} exceeds the reliability threshold", est.rejection_rate());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle(a) => {
            let cfg = a.config()?;
            let row = run_oracle(&cfg)?;
            write_out(&a.out, cfg.output.as_deref(), "oracle", ESTIMATE_COLUMNS, &[row.csv_line()], &row)?;
            eprintln!("oracle {} {} on {}: {:.8}", row.formula, row.f, row.model, row.value);
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyBounds(a) => {
            let suite: Suite = a.suite.parse()?;
            let opts = MomentOptions { n_paths: a.n, dt: a.dt, seed: a.seed };
            let reports = run_suite(suite, &opts)?;
            let rows: Vec<String> = reports.iter().map(bound_csv_line).collect();
            write_out(&a.out, a.out.output.as_deref(), "bounds", BOUND_COLUMNS, &rows, &reports)?;
            let failed = reports.iter().filter(|r| r.failed()).count();
            eprintln!("verify-bounds: {} reports, {} failed", reports.len(), failed);
            if failed > 0 {
                return Err(Error::Assertion(format!("{failed} bound reports failed")));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Stein(a) => {
            let values = a
                .sweep
                .strip_prefix("c2=")
                .ok_or_else(|| Error::Config(format!("sweep must look like c2=v1,v2,…, got `{}`", a.sweep)))?;
            let c2s = parse_vector(values)?;
            let reports = hsi_sweep(&c2s, a.k, a.n)?;
            let rows: Vec<String> = reports.iter().map(stein_csv_line).collect();
            write_out(&a.out, a.out.output.as_deref(), "stein", STEIN_COLUMNS, &rows, &reports)?;
            let failed = reports.iter().filter(|r| !r.pass).count();
            eprintln!("stein: {} sweep points, {} failed", reports.len(), failed);
            if failed > 0 {
                return Err(Error::Assertion(format!("HSI failed at {failed} sweep points")));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateGeometry(a) => {
            let mut cfg = ExperimentConfig::default();
            cfg.set("model", &a.model)?;
            cfg.ou_k = a.ou_k;
            cfg.radius = a.radius;
            cfg.seed = a.seed;
            let report = run_validate_geometry(&cfg, a.points, a.tol)?;
            write_out(&a.out, a.out.output.as_deref(), "geometry", GEOMETRY_COLUMNS, &geometry_csv_lines(&report), &report)?;
            let failed = report.checks.iter().filter(|c| !c.pass).count();
            eprintln!("validate-geometry {}: {} checks, {} failed", report.model, report.checks.len(), failed);
            if failed > 0 {
                return Err(Error::Assertion(format!("{failed} geometry checks failed")));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(a) => {
            let mut cfg = a.config()?;
            if a.n.is_none() && a.config.is_none() {
                cfg.n = 2000;
            }
            let b = run_bench(&cfg)?;
            write_out(&a.out, cfg.output.as_deref(), "bench", BENCH_COLUMNS, &[bench_csv_line(&b)], &b)?;
            eprintln!(
                "bench {}: {:.0} paths/s, {:.3e} path-steps/s/core{}",
                b.model,
                b.paths_per_second,
                b.path_steps_per_second_per_core,
                if b.meets_soft_target { "" } else { " (below the 1e5 soft target)" }
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
