//! Experiment configuration, dispatch over the model catalog and CSV/JSON emission.
//!
//! Config files use one `key = value` pair per line; `#` starts a comment. Keys:
//! `model`, `ou_k`, `radius`, `f`, `x0`, `v`, `T`, `N`, `dt`, `schedule`, `seed`, `formula`,
//! `output`, `reproducible`, `bridge`. Vectors are comma or semicolon separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds::BoundReport;
use crate::estimators::{
    estimate_gradient, estimate_hessian, estimate_hessian_gradform, estimate_lpf, estimate_semigroup, BismutEstimate, GradientForm,
    HSchedule, McConfig, Reduction, TestFn,
};
use crate::geometry::{sample_points, validate_geometry, Disk, HalfSpace, Hemisphere, Manifold, ModelId, ValidationReport};
use crate::linalg::Vector;
use crate::oracle::{oracle_grad, oracle_hess, oracle_lf, GridOracle, ImageOracle, LfRoute, NeumannOracle, Truth};
use crate::pathsim::{simulate_path, write_trace, PathStepper};
use crate::stein::HsiReport;
use crate::transport::Penalty;
use crate::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "NEUMANN_BISMUT_OUT";
/// Version tag written as the first CSV line.
pub const CSV_SCHEMA: &str = "#schema=1";
/// Paths written by `--dump-paths`.
pub const DUMP_PATH_LIMIT: usize = 64;

/// Quantity computed by `estimate` and `oracle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Formula {
    /// `P_Tf`.
    Semigroup,
    /// `∇P_Tf(v)` from `E[df(Q_T v)]`.
    Grad13,
    /// `∇P_Tf(v)` from the weighted martingale form.
    Grad14,
    /// `LP_Tf`.
    Lpf,
    /// `Hess P_Tf(v, v)`, plain form.
    Hess,
    /// `Hess P_Tf(v, v)`, gradient form.
    HessGrad,
}

impl FromStr for Formula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pf" => Ok(Formula::Semigroup),
            "grad13" => Ok(Formula::Grad13),
            "grad14" => Ok(Formula::Grad14),
            "lpf" => Ok(Formula::Lpf),
            "hess" => Ok(Formula::Hess),
            "hessgrad" => Ok(Formula::HessGrad),
            _ => Err(Error::Config(format!("unknown formula `{s}` (expected pf, grad13, grad14, lpf, hess or hessgrad)"))),
        }
    }
}

impl Formula {
    pub fn as_str(&self) -> &'static str {
        match self {
            Formula::Semigroup => "pf",
            Formula::Grad13 => "grad13",
            Formula::Grad14 => "grad14",
            Formula::Lpf => "lpf",
            Formula::Hess => "hess",
            Formula::HessGrad => "hessgrad",
        }
    }

    pub fn default_schedule(&self) -> &'static str {
        match self {
            Formula::Grad14 => "ramp",
            _ => "constant",
        }
    }
}

/// A fully specified `estimate` or `oracle` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelId,
    /// Ornstein–Uhlenbeck stiffness on half-spaces.
    pub ou_k: f64,
    /// Disk radius.
    pub radius: f64,
    pub f: TestFn,
    pub x0: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
    pub n: usize,
    pub dt: f64,
    pub schedule: Option<String>,
    pub seed: u64,
    pub formula: Formula,
    pub output: Option<PathBuf>,
    pub reproducible: bool,
    pub bridge: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelId::HalfLine,
            ou_k: 0.0,
            radius: 1.0,
            f: TestFn::Sq,
            x0: vec![0.0],
            v: Vec::new(),
            t: 1.0,
            n: 10_000,
            dt: 1e-3,
            schedule: None,
            seed: 1,
            formula: Formula::Semigroup,
            output: None,
            reproducible: false,
            bridge: true,
        }
    }
}

/// Parses a comma- or semicolon-separated vector.
pub fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split([',', ';'])
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number `{p}` in `{s}`"))))
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{s}`"))),
    }
}

fn parse_num<T: FromStr>(key: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("bad value `{s}` for `{key}`")))
}

impl ExperimentConfig {
    /// Sets one field from its config key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model" => self.model = value.parse()?,
            "ou_k" => self.ou_k = parse_num(key, value)?,
            "radius" => self.radius = parse_num(key, value)?,
            "f" => self.f = TestFn::parse(value)?,
            "x0" => self.x0 = parse_vector(value)?,
            "v" => self.v = parse_vector(value)?,
            "T" => self.t = parse_num(key, value)?,
            "N" => self.n = parse_num(key, value)?,
            "dt" => self.dt = parse_num(key, value)?,
            "schedule" => self.schedule = Some(value.to_string()),
            "seed" => self.seed = parse_num(key, value)?,
            "formula" => self.formula = value.parse()?,
            "output" => self.output = Some(PathBuf::from(value)),
            "reproducible" => self.reproducible = parse_bool(value)?,
            "bridge" => self.bridge = parse_bool(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; errors name the offending line.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn schedule_id(&self) -> String {
        self.schedule.clone().unwrap_or_else(|| self.formula.default_schedule().to_string())
    }

    /// Direction `v`, defaulting to the first frame vector.
    pub fn direction(&self) -> Vec<f64> {
        if self.v.is_empty() {
            let mut v = vec![0.0; self.model.dim()];
            v[0] = 1.0;
            v
        } else {
            self.v.clone()
        }
    }

    pub fn mc(&self) -> McConfig {
        let mut mc = McConfig::new(self.t, self.dt, self.n, self.seed);
        mc.bridge_detection = self.bridge;
        mc.reduction = if self.reproducible { Reduction::Ordered } else { Reduction::Tree };
        mc
    }

    /// Checks every field before any computation.
    pub fn validate(&self) -> Result<()> {
        let d = self.model.dim();
        if self.x0.len() != d {
            return Err(Error::Config(format!("x0 has {} components, {} needs {d}", self.x0.len(), self.model)));
        }
        let v = self.direction();
        if v.len() != d {
            return Err(Error::Config(format!("v has {} components, {} needs {d}", v.len(), self.model)));
        }
        if v.iter().map(|a| a * a).sum::<f64>() == 0.0 {
            return Err(Error::Config("direction v is zero".into()));
        }
        self.f.check_dim(d)?;
        if self.ou_k != 0.0 && !matches!(self.model, ModelId::HalfLine | ModelId::HalfSpace2 | ModelId::HalfSpace3) {
            return Err(Error::Config("ou_k is only defined for half-spaces".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if matches!(self.f, TestFn::CosTheta) && self.model != ModelId::Hemisphere {
            return Err(Error::Config("costheta is only defined on the hemisphere".into()));
        }
        self.mc().validate()?;
        HSchedule::parse(&self.schedule_id(), self.t)?;
        Ok(())
    }
}

/// One output row of `estimate` or `oracle`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub command: String,
    pub model: String,
    pub f: String,
    pub formula: String,
    pub x0: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
    pub dt: f64,
    pub n: usize,
    pub schedule: String,
    pub seed: u64,
    pub value: f64,
    pub se: f64,
    pub n_used: usize,
    pub rejected: usize,
    /// `None` in reproducible runs, so that repeated runs are byte-identical.
    pub wall_s: Option<f64>,
}

pub const ESTIMATE_COLUMNS: &str = "command,model,f,formula,x0,v,T,dt,N,schedule,seed,value,se,n_used,rejected,wall_s";

fn join_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

impl EstimateRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.8},{:.8},{},{},{}",
            self.command,
            self.model,
            self.f.replace(',', ";"),
            self.formula,
            join_vec(&self.x0),
            join_vec(&self.v),
            self.t,
            self.dt,
            self.n,
            self.schedule.replace(',', ";"),
            self.seed,
            self.value,
            self.se,
            self.n_used,
            self.rejected,
            self.wall_s.map(|w| format!("{w:.3}")).unwrap_or_else(|| "NA".into())
        )
    }
}

/// CSV document with the schema line, header and rows.
pub fn csv_document(header: &str, rows: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_SCHEMA}");
    let _ = writeln!(s, "{header}");
    for r in rows {
        let _ = writeln!(s, "{r}");
    }
    s
}

fn vector<const D: usize>(v: &[f64]) -> Vector<D> {
    Vector::<D>::from_iterator(v.iter().copied())
}

fn run_estimate_on<const D: usize, M: Manifold<D>>(cfg: &ExperimentConfig, model: &M) -> Result<BismutEstimate> {
    let x0 = vector::<D>(&cfg.x0);
    let v = vector::<D>(&cfg.direction());
    let mc = cfg.mc();
    let sched = HSchedule::parse(&cfg.schedule_id(), cfg.t)?;
    match cfg.formula {
        Formula::Semigroup => estimate_semigroup(model, &cfg.f, &x0, &mc),
        Formula::Grad13 => estimate_gradient(model, &cfg.f, &x0, &v, &mc, &GradientForm::Intrinsic),
        Formula::Grad14 => estimate_gradient(model, &cfg.f, &x0, &v, &mc, &GradientForm::Weighted(sched)),
        Formula::Lpf => estimate_lpf(model, &cfg.f, &x0, &mc, &sched, Penalty::Limit),
        Formula::Hess => estimate_hessian(model, &cfg.f, &x0, &v, &mc, &sched),
        Formula::HessGrad => estimate_hessian_gradform(model, &cfg.f, &x0, &v, &mc, &sched),
    }
}

fn dump_on<const D: usize, M: Manifold<D>>(cfg: &ExperimentConfig, model: &M, path: &Path) -> Result<()> {
    let x0 = vector::<D>(&cfg.x0);
    let sim = cfg.mc().sim();
    let paths = (0..cfg.n.min(DUMP_PATH_LIMIT) as u64).map(|i| simulate_path(model, &x0, &sim, i)).collect::<Result<Vec<_>>>()?;
    write_trace(path, &paths)
}

macro_rules! with_model {
    ($cfg:expr, $f:ident $(, $arg:expr)*) => {
        match $cfg.model {
            ModelId::HalfLine => $f::<1, _>($cfg, &HalfSpace::<1>::with_ou($cfg.ou_k) $(, $arg)*),
            ModelId::HalfSpace2 => $f::<2, _>($cfg, &HalfSpace::<2>::with_ou($cfg.ou_k) $(, $arg)*),
            ModelId::HalfSpace3 => $f::<3, _>($cfg, &HalfSpace::<3>::with_ou($cfg.ou_k) $(, $arg)*),
            ModelId::Disk => $f::<2, _>($cfg, &Disk::new($cfg.radius) $(, $arg)*),
            ModelId::Hemisphere => $f::<2, _>($cfg, &Hemisphere $(, $arg)*),
        }
    };
}

fn row(cfg: &ExperimentConfig, command: &str, value: f64, se: f64, n_used: usize, rejected: usize, wall: f64) -> EstimateRow {
    EstimateRow {
        command: command.into(),
        model: cfg.model.to_string(),
        f: cfg.f.id(),
        formula: cfg.formula.as_str().into(),
        x0: cfg.x0.clone(),
        v: cfg.direction(),
        t: cfg.t,
        dt: cfg.dt,
        n: cfg.n,
        schedule: cfg.schedule_id(),
        seed: cfg.seed,
        value,
        se,
        n_used,
        rejected,
        wall_s: if cfg.reproducible { None } else { Some(wall) },
    }
}

/// Monte Carlo estimate of the configured formula.
pub fn run_estimate(cfg: &ExperimentConfig) -> Result<(EstimateRow, BismutEstimate)> {
    cfg.validate()?;
    let est = with_model!(cfg, run_estimate_on)?;
    let r = row(cfg, "estimate", est.mean(), est.se(), est.n_samples, est.n_rejected, est.runtime_s);
    Ok((r, est))
}

/// Writes the first paths of the configured experiment to a binary trace.
pub fn dump_paths(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    cfg.validate()?;
    with_model!(cfg, dump_on, path)
}

/// Grid resolution used by `oracle` for curved models.
pub const ORACLE_GRID_NODES: usize = 1600;
pub const ORACLE_GRID_DT: f64 = 2.5e-4;

fn truth_for<const D: usize, M: Manifold<D>>(cfg: &ExperimentConfig, _model: &M) -> Result<Truth<D>> {
    Ok(match cfg.model {
        ModelId::HalfLine | ModelId::HalfSpace2 | ModelId::HalfSpace3 => Truth::Image(ImageOracle::new(cfg.f, &HalfSpace::<D>::with_ou(cfg.ou_k))),
        ModelId::Disk => Truth::Grid(GridOracle::disk(cfg.f, cfg.radius, ORACLE_GRID_NODES, ORACLE_GRID_DT)?),
        ModelId::Hemisphere => Truth::Grid(GridOracle::hemisphere(cfg.f, ORACLE_GRID_NODES, ORACLE_GRID_DT)?),
    })
}

fn run_oracle_on<const D: usize, M: Manifold<D>>(cfg: &ExperimentConfig, model: &M) -> Result<f64> {
    let truth = truth_for(cfg, model)?;
    let x0 = vector::<D>(&cfg.x0);
    let v = vector::<D>(&cfg.direction());
    let h = truth.fd_step();
    let vn = v.norm();
    match cfg.formula {
        Formula::Semigroup => truth.value(&x0, cfg.t),
        Formula::Grad13 | Formula::Grad14 => oracle_grad(&truth, model, &x0, &v, cfg.t, h),
        Formula::Lpf => oracle_lf(&truth, model, &x0, cfg.t, h, LfRoute::Spatial),
        Formula::Hess | Formula::HessGrad => Ok(oracle_hess(&truth, model, &x0, &(v / vn), cfg.t, h)? * vn * vn),
    }
}

/// Deterministic value of the configured formula, in the `estimate` row layout.
pub fn run_oracle(cfg: &ExperimentConfig) -> Result<EstimateRow> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let value = with_model!(cfg, run_oracle_on)?;
    Ok(row(cfg, "oracle", value, 0.0, 0, 0, start.elapsed().as_secs_f64()))
}

pub const BOUND_COLUMNS: &str = "bound,config,left,right,margin,se_combined,pass,hypotheses_met,window_sup,K,sigma,alpha,beta,gamma,T,z_sup,f_sup,pf2,pgrad2,exp_local_time,local_time_sq";

pub fn bound_csv_line(r: &BoundReport) -> String {
    let i = &r.inputs;
    format!(
        "{},{},{:.8},{:.8},{:.8},{:.8},{},{},{},{},{},{},{},{},{},{},{},{:.8},{:.8},{:.8},{:.8}",
        r.bound.id(),
        r.config,
        r.left,
        r.right,
        r.margin,
        r.se_combined,
        r.pass,
        r.hypotheses_met,
        i.window_sup,
        i.k,
        i.sigma,
        i.alpha,
        i.beta,
        i.gamma,
        i.t,
        i.z_sup,
        i.f_sup,
        i.pf2,
        i.pgrad2,
        i.exp_local_time,
        i.local_time_sq
    )
}

pub const STEIN_COLUMNS: &str = "c2,n,K,H,I,S2,HSI_RHS,LSI_RHS,hsi_margin,lsi_margin,hsi_tighter,degenerate,pass";

pub fn stein_csv_line(r: &HsiReport) -> String {
    let c2 = match r.pair.family {
        crate::stein::Family::Gaussian { c2 } => c2,
        crate::stein::Family::Mixture { .. } => f64::NAN,
    };
    format!(
        "{},{},{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{},{},{}",
        c2, r.pair.n, r.pair.k, r.h, r.i, r.s2, r.hsi_rhs, r.lsi_rhs, r.hsi_margin, r.lsi_margin, r.hsi_tighter, r.degenerate, r.pass
    )
}

pub const GEOMETRY_COLUMNS: &str = "model,check,worst_residual,tolerance,pass";

pub fn geometry_csv_lines(r: &ValidationReport) -> Vec<String> {
    r.checks.iter().map(|c| format!("{},{},{:.3e},{:.1e},{}", r.model, c.name, c.worst_residual, c.tolerance, c.pass)).collect()
}

fn validate_on<const D: usize, M: Manifold<D>>(cfg: &ExperimentConfig, model: &M, points: usize, tol: f64) -> Result<ValidationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pts = sample_points(model, points, points.div_ceil(2), &mut rng);
    validate_geometry(model, &pts, tol, &mut rng)
}

/// Tensor validation for the configured model.
pub fn run_validate_geometry(cfg: &ExperimentConfig, points: usize, tol: f64) -> Result<ValidationReport> {
    with_model!(cfg, validate_on, points, tol)
}

/// Throughput of plain path simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub paths: usize,
    pub steps_per_path: usize,
    pub threads: usize,
    pub seconds: f64,
    pub paths_per_second: f64,
    pub path_steps_per_second_per_core: f64,
    /// Soft target of 10⁵ half-line path-steps per second per core (logged, not asserted).
    pub meets_soft_target: bool,
}

pub const BENCH_COLUMNS: &str = "model,paths,steps_per_path,threads,seconds,paths_per_second,path_steps_per_second_per_core,meets_soft_target";

pub fn bench_csv_line(b: &BenchReport) -> String {
    format!(
        "{},{},{},{},{:.4},{:.1},{:.1},{}",
        b.model, b.paths, b.steps_per_path, b.threads, b.seconds, b.paths_per_second, b.path_steps_per_second_per_core, b.meets_soft_target
    )
}

fn bench_on<const D: usize, M: Manifold<D>>(cfg: &ExperimentConfig, model: &M) -> Result<BenchReport> {
    use rayon::prelude::*;
    let x0 = vector::<D>(&cfg.x0);
    let sim = cfg.mc().sim();
    let start = std::time::Instant::now();
    let checksum: f64 = (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut st = PathStepper::new(model, &x0, &sim, i)?;
            while let Some(r) = st.step() {
                r?;
            }
            Ok(st.x[0])
        })
        .try_reduce(|| 0.0, |a, b| Ok(a + b))?;
    let seconds = start.elapsed().as_secs_f64().max(1e-9);
    if !checksum.is_finite() {
        return Err(Error::Numerical("benchmark paths produced non-finite positions".into()));
    }
    let steps = sim.n_steps();
    let threads = rayon::current_num_threads();
    let rate = (cfg.n * steps) as f64 / seconds / threads as f64;
    Ok(BenchReport {
        model: cfg.model.to_string(),
        paths: cfg.n,
        steps_per_path: steps,
        threads,
        seconds,
        paths_per_second: cfg.n as f64 / seconds,
        path_steps_per_second_per_core: rate,
        meets_soft_target: rate >= 1e5,
    })
}

pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    with_model!(cfg, bench_on)
}

/// Output destination: explicit path (relative paths resolved against the output directory
/// from the environment, if set), `$NEUMANN_BISMUT_OUT/<default_name>`, or standard output.
pub fn resolve_output(explicit: Option<&Path>, default_name: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    match (explicit, dir) {
        (Some(p), Some(d)) if p.is_relative() => Some(d.join(p)),
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) => Some(d.join(default_name)),
        (None, None) => None,
    }
}

/// Writes `content` to the destination or standard output.
pub fn emit(dest: Option<&Path>, content: &str) -> Result<()> {
    match dest {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(p, content)?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(|e| Error::Numerical(format!("json encoding failed: {e}")))
}
