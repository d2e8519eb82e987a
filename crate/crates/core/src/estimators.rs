//! Monte Carlo evaluation of the stochastic representations of `P_Tf`, `∇P_Tf`, `LP_Tf`
//! and `Hess P_Tf`, parameterized by a deterministic `h`-schedule.
//!
//! Directions `v` are given in the orthonormal frame `U₀` at `x₀` (for the flat models this is
//! the Cartesian basis). Discrete sums use left-point (Itô) evaluation of the integrands and
//! step averages of `h`, so that `Σ h_k dt = ∫₀ᵀ h` exactly.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::geometry::{Hemisphere, Manifold};
use crate::linalg::{Matrix, Vector};
use crate::pathsim::{PathStepper, SimConfig};
use crate::transport::{NestedIntegral, Penalty, QState, QTildeState, StepGeometry, WState};
use crate::{Error, Result};

/// Maximum tolerated share of rejected samples.
pub const MAX_REJECTION_RATE: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Test functions

/// A test function over chart coordinates with its chart differential.
pub trait TestFunction<const D: usize>: Sync {
    fn value(&self, x: &Vector<D>) -> f64;
    /// Partial derivatives `∂_i f`.
    fn grad(&self, x: &Vector<D>) -> Vector<D>;
}

/// Built-in test functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TestFn {
    /// `|x|²` in chart coordinates.
    Sq,
    /// `x_i` (zero-based index).
    Coord(usize),
    /// `cos θ` of the polar angle on the hemisphere chart.
    CosTheta,
    /// `exp(−a|x|²)`.
    Gauss(f64),
    Const(f64),
}

impl TestFn {
    /// Parses `sq`, `coord:i` (one-based), `costheta`, `gauss:a`, `const:c`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown test function `{s}`"));
        match s.split_once(':') {
            None => match s {
                "sq" => Ok(TestFn::Sq),
                "costheta" => Ok(TestFn::CosTheta),
                _ => Err(bad()),
            },
            Some(("coord", i)) => {
                let i: usize = i.parse().map_err(|_| bad())?;
                if i == 0 {
                    return Err(Error::Config("coord index is one-based".into()));
                }
                Ok(TestFn::Coord(i - 1))
            }
            Some(("gauss", a)) => Ok(TestFn::Gauss(a.parse().map_err(|_| bad())?)),
            Some(("const", c)) => Ok(TestFn::Const(c.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }

    pub fn id(&self) -> String {
        match self {
            TestFn::Sq => "sq".into(),
            TestFn::Coord(i) => format!("coord:{}", i + 1),
            TestFn::CosTheta => "costheta".into(),
            TestFn::Gauss(a) => format!("gauss:{a}"),
            TestFn::Const(c) => format!("const:{c}"),
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            TestFn::Coord(i) if *i >= d => Err(Error::Config(format!("coord:{} needs dimension ≥ {}", i + 1, i + 1))),
            TestFn::CosTheta if d != 2 => Err(Error::Config("costheta is defined on the hemisphere chart".into())),
            _ => Ok(()),
        }
    }
}

impl<const D: usize> TestFunction<D> for TestFn {
    fn value(&self, x: &Vector<D>) -> f64 {
        match *self {
            TestFn::Sq => x.norm_squared(),
            TestFn::Coord(i) => x[i],
            TestFn::CosTheta => {
                let r2 = x.norm_squared();
                (1.0 - r2) / (1.0 + r2)
            }
            TestFn::Gauss(a) => (-a * x.norm_squared()).exp(),
            TestFn::Const(c) => c,
        }
    }

    fn grad(&self, x: &Vector<D>) -> Vector<D> {
        match *self {
            TestFn::Sq => x * 2.0,
            TestFn::Coord(i) => Vector::<D>::from_fn(|k, _| if k == i { 1.0 } else { 0.0 }),
            TestFn::CosTheta => {
                let r2 = x.norm_squared();
                x * (-4.0 / (1.0 + r2).powi(2))
            }
            TestFn::Gauss(a) => x * (-2.0 * a * (-a * x.norm_squared()).exp()),
            TestFn::Const(_) => Vector::<D>::zeros(),
        }
    }
}

/// Polar angle of a hemisphere chart point, exposed for oracles.
pub fn hemisphere_theta(x: &Vector<2>) -> f64 {
    Hemisphere::polar_angle(x)
}

// ---------------------------------------------------------------------------
// Schedules

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ScheduleKind {
    /// `h ≡ −1/T`.
    Constant,
    /// `h(s) = −e^{Ks}/∫₀ᵀe^{Kr}dr`.
    Exponential { k: f64 },
    /// `h(s) = s/T` for the gradient weight.
    Ramp,
    /// Piecewise-linear through `(time, value)` knots.
    Tabulated { knots: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HSchedule {
    pub kind: ScheduleKind,
    pub t: f64,
}

impl HSchedule {
    pub fn constant(t: f64) -> Self {
        HSchedule { kind: ScheduleKind::Constant, t }
    }
    pub fn exponential(k: f64, t: f64) -> Self {
        HSchedule { kind: ScheduleKind::Exponential { k }, t }
    }
    pub fn ramp(t: f64) -> Self {
        HSchedule { kind: ScheduleKind::Ramp, t }
    }
    pub fn tabulated(knots: Vec<(f64, f64)>, t: f64) -> Result<Self> {
        if knots.len() < 2 || knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("tabulated schedule needs ≥ 2 knots with increasing times".into()));
        }
        if knots[0].0 > 0.0 || knots[knots.len() - 1].0 < t {
            return Err(Error::Config("tabulated schedule must cover [0, T]".into()));
        }
        Ok(HSchedule { kind: ScheduleKind::Tabulated { knots }, t })
    }

    /// Parses `constant`, `exponential:K`, `ramp`, `tab:t0=v0;t1=v1;…`.
    pub fn parse(s: &str, t: f64) -> Result<Self> {
        let bad = || Error::Config(format!("unknown schedule `{s}`"));
        match s.split_once(':') {
            None => match s {
                "constant" => Ok(Self::constant(t)),
                "ramp" => Ok(Self::ramp(t)),
                _ => Err(bad()),
            },
            Some(("exponential", k)) => Ok(Self::exponential(k.parse().map_err(|_| bad())?, t)),
            Some(("tab", body)) => {
                let mut knots = Vec::new();
                for item in body.split(';') {
                    let (a, b) = item.split_once('=').ok_or_else(bad)?;
                    knots.push((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?));
                }
                Self::tabulated(knots, t)
            }
            _ => Err(bad()),
        }
    }

    pub fn id(&self) -> String {
        match &self.kind {
            ScheduleKind::Constant => "constant".into(),
            ScheduleKind::Exponential { k } => format!("exponential:{k}"),
            ScheduleKind::Ramp => "ramp".into(),
            ScheduleKind::Tabulated { knots } => {
                let parts: Vec<String> = knots.iter().map(|(a, b)| format!("{a}={b}")).collect();
                format!("tab:{}", parts.join(";"))
            }
        }
    }

    /// `h(s)`.
    pub fn h(&self, s: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant => -1.0 / self.t,
            ScheduleKind::Exponential { k } => {
                if k.abs() < 1e-12 {
                    -1.0 / self.t
                } else {
                    -k * (k * s).exp() / (k * self.t).exp_m1()
                }
            }
            ScheduleKind::Ramp => s / self.t,
            ScheduleKind::Tabulated { knots } => interp(knots, s),
        }
    }

    /// `∫₀ˢ h`.
    pub fn integral(&self, s: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant => -s / self.t,
            ScheduleKind::Exponential { k } => {
                if k.abs() < 1e-12 {
                    -s / self.t
                } else {
                    -(k * s).exp_m1() / (k * self.t).exp_m1()
                }
            }
            ScheduleKind::Ramp => 0.5 * s * s / self.t,
            ScheduleKind::Tabulated { knots } => {
                let mut acc = 0.0;
                for w in knots.windows(2) {
                    let (a, b) = (w[0].0, w[1].0.min(s));
                    if b <= a {
                        break;
                    }
                    acc += 0.5 * (interp(knots, a) + interp(knots, b)) * (b - a);
                }
                acc
            }
        }
    }

    /// `h̃(s) = 1 + ∫₀ˢ h`.
    pub fn h_tilde(&self, s: f64) -> f64 {
        1.0 + self.integral(s)
    }

    /// Average of `h` over `[s0, s1]`.
    pub fn h_avg(&self, s0: f64, s1: f64) -> f64 {
        (self.integral(s1) - self.integral(s0)) / (s1 - s0)
    }

    /// Average of `h′` over `[s0, s1]`.
    pub fn h_prime_avg(&self, s0: f64, s1: f64) -> f64 {
        (self.h(s1) - self.h(s0)) / (s1 - s0)
    }

    /// `∫₀ᵀ h²`.
    pub fn integral_h2(&self) -> f64 {
        match &self.kind {
            ScheduleKind::Constant => 1.0 / self.t,
            _ => {
                let n = 20_000;
                let dt = self.t / n as f64;
                (0..n).map(|i| self.h((i as f64 + 0.5) * dt).powi(2) * dt).sum()
            }
        }
    }

    /// Checks `∫₀ᵀ h = −1` (Hessian and `LP_Tf` formulas).
    pub fn require_normalized(&self) -> Result<()> {
        if matches!(self.kind, ScheduleKind::Ramp) {
            return Err(Error::Config("ramp schedule is only valid for the gradient formula".into()));
        }
        let total = self.integral(self.t);
        if (total + 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("schedule integrates to {total}, expected −1")));
        }
        Ok(())
    }

    /// Checks `h(0) = 0`, `h(T) = 1` (gradient weight).
    pub fn require_gradient_kind(&self) -> Result<()> {
        match self.kind {
            ScheduleKind::Ramp | ScheduleKind::Tabulated { .. } => {
                if self.h(0.0).abs() > 1e-9 || (self.h(self.t) - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("gradient schedule needs h(0) = 0 and h(T) = 1".into()));
                }
                Ok(())
            }
            _ => Err(Error::Config(format!("schedule `{}` is not a gradient schedule", self.id()))),
        }
    }
}

fn interp(knots: &[(f64, f64)], s: f64) -> f64 {
    if s <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        if s <= w[1].0 {
            let r = (s - w[0].0) / (w[1].0 - w[0].0);
            return w[0].1 + r * (w[1].1 - w[0].1);
        }
    }
    knots[knots.len() - 1].1
}

// ---------------------------------------------------------------------------
// Monte Carlo driver

/// How per-path values are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Reduction {
    /// Sequential sum in path-index order (bit-reproducible for any thread count).
    Ordered,
    /// Parallel tree reduction.
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub t: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub bridge_detection: bool,
    pub reduction: Reduction,
}

impl McConfig {
    pub fn new(t: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        McConfig { t, dt, n_paths, seed, bridge_detection: true, reduction: Reduction::Ordered }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig { t: self.t, dt: self.dt, seed: self.seed, bridge_detection: self.bridge_detection }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim().validate()?;
        if self.n_paths < 2 {
            return Err(Error::Config("at least two paths are needed for a standard error".into()));
        }
        Ok(())
    }
}

/// Monte Carlo result with component-wise standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BismutEstimate {
    pub value: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_samples: usize,
    pub n_rejected: usize,
    pub schedule: String,
    pub runtime_s: f64,
    /// Rejection rate below `MAX_REJECTION_RATE`.
    pub reliable: bool,
}

impl BismutEstimate {
    pub fn mean(&self) -> f64 {
        self.value[0]
    }
    pub fn se(&self) -> f64 {
        self.std_error[0]
    }
    /// Per-path sample variance of the first component.
    pub fn variance(&self) -> f64 {
        self.std_error[0].powi(2) * self.n_samples as f64
    }
    pub fn rejection_rate(&self) -> f64 {
        self.n_rejected as f64 / (self.n_samples + self.n_rejected).max(1) as f64
    }
}

/// Per-path outcome: values, or a rejected sample.
pub type PathValue = Option<Vec<f64>>;

/// Runs `per_path` over all path indices and reduces to means and standard errors.
pub fn run_paths<F>(mc: &McConfig, width: usize, schedule: &str, per_path: F) -> Result<BismutEstimate>
where
    F: Fn(u64) -> Result<PathValue> + Sync,
{
    mc.validate()?;
    let start = Instant::now();
    let (sum, sum2, n, rejected) = match mc.reduction {
        Reduction::Ordered => {
            let outs: Vec<Result<PathValue>> = (0..mc.n_paths as u64).into_par_iter().map(&per_path).collect();
            let mut acc = Accum::new(width);
            for o in outs {
                acc.push(o?);
            }
            (acc.sum, acc.sum2, acc.n, acc.rejected)
        }
        Reduction::Tree => {
            let acc = (0..mc.n_paths as u64)
                .into_par_iter()
                .map(|i| per_path(i).map(|v| Accum::from_value(width, v)))
                .try_reduce(|| Accum::new(width), |a, b| Ok(a.merge(b)))?;
            (acc.sum, acc.sum2, acc.n, acc.rejected)
        }
    };
    if n < 2 {
        return Err(Error::Numerical(format!("only {n} accepted samples out of {}", mc.n_paths)));
    }
    let nf = n as f64;
    let value: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std_error: Vec<f64> = sum
        .iter()
        .zip(&sum2)
        .map(|(s, s2)| {
            let m = s / nf;
            ((s2 / nf - m * m).max(0.0) * nf / (nf - 1.0) / nf).sqrt()
        })
        .collect();
    let rate = rejected as f64 / mc.n_paths as f64;
    Ok(BismutEstimate {
        value,
        std_error,
        n_samples: n,
        n_rejected: rejected,
        schedule: schedule.to_string(),
        runtime_s: start.elapsed().as_secs_f64(),
        reliable: rate < MAX_REJECTION_RATE,
    })
}

struct Accum {
    sum: Vec<f64>,
    sum2: Vec<f64>,
    n: usize,
    rejected: usize,
}

impl Accum {
    fn new(width: usize) -> Self {
        Accum { sum: vec![0.0; width], sum2: vec![0.0; width], n: 0, rejected: 0 }
    }
    fn from_value(width: usize, v: PathValue) -> Self {
        let mut a = Accum::new(width);
        a.push(v);
        a
    }
    fn push(&mut self, v: PathValue) {
        match v {
            Some(v) => {
                for (i, x) in v.iter().enumerate() {
                    self.sum[i] += x;
                    self.sum2[i] += x * x;
                }
                self.n += 1;
            }
            None => self.rejected += 1,
        }
    }
    fn merge(mut self, o: Accum) -> Self {
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sum2[i] += o.sum2[i];
        }
        self.n += o.n;
        self.rejected += o.rejected;
        self
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} returned a non-finite value")))
    }
}

/// Turns numerical blow-ups into rejected samples; other errors abort.
fn reject_numerical(r: Result<Vec<f64>>) -> Result<PathValue> {
    match r {
        Ok(v) if v.iter().all(|x| x.is_finite()) => Ok(Some(v)),
        Ok(_) => Ok(None),
        Err(Error::Numerical(m)) if !m.contains("test function") => Ok(None),
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Estimators

/// `P_Tf(x₀)` and `P_Tf²(x₀)`.
pub fn estimate_semigroup<const D: usize, M, F>(model: &M, f: &F, x0: &Vector<D>, mc: &McConfig) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
    F: TestFunction<D> + ?Sized,
{
    let sim = mc.sim();
    run_paths(mc, 2, "none", |i| {
        let mut st = PathStepper::new(model, x0, &sim, i)?;
        while let Some(r) = st.step() {
            if let Err(e) = r {
                return reject_numerical(Err(e));
            }
        }
        let v = finite(f.value(&st.x), "test function")?;
        Ok(Some(vec![v, v * v]))
    })
}

/// Local-time statistics: `E[l_T]`, `E[l_T²]` and `E[e^{λ l_T}]` for each `λ`.
pub fn estimate_local_time<const D: usize, M>(model: &M, x0: &Vector<D>, mc: &McConfig, lambdas: &[f64]) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
{
    let sim = mc.sim();
    run_paths(mc, 2 + lambdas.len(), "none", |i| {
        let mut st = PathStepper::new(model, x0, &sim, i)?;
        while let Some(r) = st.step() {
            if let Err(e) = r {
                return reject_numerical(Err(e));
            }
        }
        let l = st.l;
        let mut out = vec![l, l * l];
        out.extend(lambdas.iter().map(|lam| (lam * l).exp()));
        Ok(Some(out))
    })
}

/// Which gradient representation to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientForm {
    /// `E[df(Q_T v)]` with the limit transport.
    Intrinsic,
    /// `E[f(X_T)∫⟨h′(s)Q_s v, dB_s⟩]` with an increasing weight `h(0) = 0`, `h(T) = 1`.
    Weighted(HSchedule),
}

/// `∇P_Tf(x₀)(v)`.
pub fn estimate_gradient<const D: usize, M, F>(
    model: &M,
    f: &F,
    x0: &Vector<D>,
    v: &Vector<D>,
    mc: &McConfig,
    form: &GradientForm,
) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
    F: TestFunction<D> + ?Sized,
{
    let sched_id = match form {
        GradientForm::Intrinsic => "intrinsic".to_string(),
        GradientForm::Weighted(s) => {
            s.require_gradient_kind()?;
            s.id()
        }
    };
    let sim = mc.sim();
    run_paths(mc, 1, &sched_id, |i| {
        let r = (|| {
            let mut st = PathStepper::new(model, x0, &sim, i)?;
            let mut q = QState::<D>::new(Penalty::Limit);
            let mut weight = 0.0;
            let mut k = 0;
            while let Some(rec) = st.step() {
                let rec = rec?;
                if let GradientForm::Weighted(s) = form {
                    let hp = s.h_prime_avg(rec.t, rec.t + rec.dt);
                    weight += hp * (q.q * v).dot(&rec.db);
                }
                q.step(&StepGeometry::new(model, &rec), k)?;
                k += 1;
            }
            let val = match form {
                GradientForm::Intrinsic => {
                    if (q.q * v).norm() == 0.0 {
                        0.0
                    } else {
                        f.grad(&st.x).dot(&(st.u * (q.q * v)))
                    }
                }
                GradientForm::Weighted(_) => {
                    if weight == 0.0 {
                        0.0
                    } else {
                        f.value(&st.x) * weight
                    }
                }
            };
            Ok(vec![finite(val, "test function")?])
        })();
        reject_numerical(r)
    })
}

/// `LP_Tf(x₀) = 2E[f(X_T)(M + ∫⟨h̃h Z, dB⟩)]`.
pub fn estimate_lpf<const D: usize, M, F>(
    model: &M,
    f: &F,
    x0: &Vector<D>,
    mc: &McConfig,
    schedule: &HSchedule,
    penalty: Penalty,
) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
    F: TestFunction<D> + ?Sized,
{
    schedule.require_normalized()?;
    let sim = mc.sim();
    let with_drift = model.has_drift();
    run_paths(mc, 1, &schedule.id(), |i| {
        let r = (|| {
            let mut st = PathStepper::new(model, x0, &sim, i)?;
            let mut q = QState::<D>::new(penalty);
            let mut m = NestedIntegral::<D>::default();
            let mut zterm = 0.0;
            let mut k = 0;
            while let Some(rec) = st.step() {
                let rec = rec?;
                let h = schedule.h_avg(rec.t, rec.t + rec.dt);
                if with_drift {
                    let zf = rec.u_prev.transpose() * model.metric(&rec.x_prev) * model.drift(&rec.x_prev);
                    zterm += schedule.h_tilde(rec.t) * h * zf.dot(&rec.db);
                }
                let a = q.step(&StepGeometry::new(model, &rec), k)?;
                m.step(h, &rec.db, &a);
                if !m.is_finite() {
                    return Err(Error::Numerical(format!("nested integral non-finite at step {k}")));
                }
                k += 1;
            }
            let fx = finite(f.value(&st.x), "test function")?;
            Ok(vec![2.0 * fx * (m.m + zterm)])
        })();
        reject_numerical(r)
    })
}

/// Nested-integral diagnostics: `E[M_T²]`, `E[sup_t|M_t|]`, `C(h)` and `E∫h²`.
pub fn estimate_nested_integral<const D: usize, M>(
    model: &M,
    x0: &Vector<D>,
    mc: &McConfig,
    schedule: &HSchedule,
    penalty: Penalty,
) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
{
    schedule.require_normalized()?;
    let c = model.constants();
    let (km, sm) = (c.k_minus(), c.sigma_minus());
    let sim = mc.sim();
    run_paths(mc, 4, &schedule.id(), |i| {
        let r = (|| {
            let mut st = PathStepper::new(model, x0, &sim, i)?;
            let mut q = QState::<D>::new(penalty);
            let mut m = NestedIntegral::<D>::default();
            let (mut ch, mut ih2, mut expo) = (0.0, 0.0, 0.0_f64);
            let mut k = 0;
            while let Some(rec) = st.step() {
                let rec = rec?;
                let h = schedule.h_avg(rec.t, rec.t + rec.dt);
                ch += h * h * expo.exp() * rec.dt;
                ih2 += h * h * rec.dt;
                expo += km * rec.dt + sm * rec.dl;
                let a = q.step(&StepGeometry::new(model, &rec), k)?;
                m.step(h, &rec.db, &a);
                if !m.is_finite() {
                    return Err(Error::Numerical(format!("nested integral non-finite at step {k}")));
                }
                k += 1;
            }
            Ok(vec![m.m * m.m, m.sup_abs, ch, ih2])
        })();
        reject_numerical(r)
    })
}

/// Running state of the second-order functionals for one path.
struct HessianPath<const D: usize> {
    x: Vector<D>,
    u: Matrix<D>,
    qt: Vector<D>,
    w: Vector<D>,
    /// `Σ h_k⟨W_k, ΔB_k⟩`
    w_int: f64,
    /// `Σ h_k⟨Q̃_k v, ΔB_k⟩`
    s_int: f64,
    /// `Σ h_k²|Q̃_k v|² dt`
    v_int: f64,
}

fn hessian_path<const D: usize, M>(
    model: &M,
    x0: &Vector<D>,
    v: &Vector<D>,
    sim: &SimConfig,
    schedule: &HSchedule,
    index: u64,
) -> Result<HessianPath<D>>
where
    M: Manifold<D> + ?Sized,
{
    let c = model.constants();
    let track_w = c.alpha != 0.0 || c.beta != 0.0 || c.gamma != 0.0 || !model.is_flat();
    let mut st = PathStepper::new(model, x0, sim, index)?;
    let mut qt = QTildeState::<D>::default();
    let mut w = WState::<D>::default();
    let (mut w_int, mut s_int, mut v_int) = (0.0, 0.0, 0.0);
    let mut k = 0;
    while let Some(rec) = st.step() {
        let rec = rec?;
        let h = schedule.h_avg(rec.t, rec.t + rec.dt);
        let cv = qt.q * v;
        w_int += h * w.w.dot(&rec.db);
        s_int += h * cv.dot(&rec.db);
        v_int += h * h * cv.norm_squared() * rec.dt;
        let sg = StepGeometry::new(model, &rec);
        let prop = qt.step(&sg, k)?;
        if track_w {
            let a = cv * schedule.h_tilde(rec.t);
            w.step(model, &rec, &sg, &prop, &a, &cv, k)?;
        }
        k += 1;
    }
    Ok(HessianPath { x: st.x, u: st.u, qt: qt.q * v, w: w.w, w_int, s_int, v_int })
}

/// `Hess P_Tf(v, v) = E[f(X_T)(−∫h⟨W, dB⟩ + (∫⟨Q̃hv, dB⟩)² − ∫|Q̃hv|²ds)]`.
pub fn estimate_hessian<const D: usize, M, F>(
    model: &M,
    f: &F,
    x0: &Vector<D>,
    v: &Vector<D>,
    mc: &McConfig,
    schedule: &HSchedule,
) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
    F: TestFunction<D> + ?Sized,
{
    schedule.require_normalized()?;
    let sim = mc.sim();
    run_paths(mc, 1, &schedule.id(), |i| {
        let r = hessian_path(model, x0, v, &sim, schedule, i).and_then(|p| {
            let fx = finite(f.value(&p.x), "test function")?;
            Ok(vec![fx * (-p.w_int + p.s_int * p.s_int - p.v_int)])
        });
        reject_numerical(r)
    })
}

/// `Hess P_Tf(v, v) = E[−df(Q̃_T v)∫⟨Q̃hv, dB⟩ + df(W_T)]`.
pub fn estimate_hessian_gradform<const D: usize, M, F>(
    model: &M,
    f: &F,
    x0: &Vector<D>,
    v: &Vector<D>,
    mc: &McConfig,
    schedule: &HSchedule,
) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
    F: TestFunction<D> + ?Sized,
{
    schedule.require_normalized()?;
    let sim = mc.sim();
    run_paths(mc, 1, &schedule.id(), |i| {
        let r = hessian_path(model, x0, v, &sim, schedule, i).and_then(|p| {
            let df = f.grad(&p.x);
            let val = -df.dot(&(p.u * p.qt)) * p.s_int + df.dot(&(p.u * p.w));
            Ok(vec![finite(val, "test function")?])
        });
        reject_numerical(r)
    })
}

/// Common-random-number finite differences of `P_Tf` along `v` (chart direction):
/// component 0 is `(P f(x₀+εv) − P f(x₀−εv))/2ε`, component 1 is
/// `(P f(x₀+εv) − 2P f(x₀) + P f(x₀−εv))/ε²`.
pub fn fd_crn<const D: usize, M, F>(
    model: &M,
    f: &F,
    x0: &Vector<D>,
    v: &Vector<D>,
    eps: f64,
    mc: &McConfig,
) -> Result<BismutEstimate>
where
    M: Manifold<D> + ?Sized,
    F: TestFunction<D> + ?Sized,
{
    let sim = mc.sim();
    let starts = [x0 + v * eps, *x0, x0 - v * eps];
    run_paths(mc, 2, "none", |i| {
        let mut vals = [0.0; 3];
        for (j, s) in starts.iter().enumerate() {
            let mut st = PathStepper::new(model, s, &sim, i)?;
            while let Some(r) = st.step() {
                if let Err(e) = r {
                    return reject_numerical(Err(e));
                }
            }
            vals[j] = finite(f.value(&st.x), "test function")?;
        }
        Ok(Some(vec![(vals[0] - vals[2]) / (2.0 * eps), (vals[0] - 2.0 * vals[1] + vals[2]) / (eps * eps)]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{HalfLine, HalfSpace};

    #[test]
    fn schedules_integrate_to_minus_one() {
        for s in [HSchedule::constant(2.0), HSchedule::exponential(1.0, 2.0), HSchedule::exponential(-0.5, 2.0)] {
            s.require_normalized().unwrap();
            assert!((s.h_tilde(0.0) - 1.0).abs() < 1e-15);
            assert!(s.h_tilde(2.0).abs() < 1e-12);
        }
        let tab = HSchedule::parse("tab:0=-1.5;1=-0.5", 1.0).unwrap();
        tab.require_normalized().unwrap();
        assert!(HSchedule::ramp(1.0).require_normalized().is_err());
        HSchedule::ramp(1.0).require_gradient_kind().unwrap();
        assert!(HSchedule::constant(1.0).require_gradient_kind().is_err());
    }

    #[test]
    fn exponential_schedule_matches_closed_form() {
        let s = HSchedule::exponential(1.0, 1.0);
        let norm = 1.0_f64.exp() - 1.0;
        assert!((s.h(0.3) + 0.3_f64.exp() / norm).abs() < 1e-14);
        // step averages reproduce the integral exactly
        let n = 7;
        let tot: f64 = (0..n).map(|i| s.h_avg(i as f64 / n as f64, (i + 1) as f64 / n as f64) / n as f64).sum();
        assert!((tot + 1.0).abs() < 1e-14);
    }

    #[test]
    fn test_function_registry() {
        assert_eq!(TestFn::parse("coord:2").unwrap(), TestFn::Coord(1));
        assert!(TestFn::parse("coord:0").is_err());
        assert!(TestFn::parse("nope").is_err());
        let f = TestFn::parse("gauss:0.5").unwrap();
        let x = Vector::<2>::new(0.3, -0.2);
        let h = 1e-6;
        let fd = (TestFunction::<2>::value(&f, &(x + Vector::<2>::new(h, 0.0))) - TestFunction::<2>::value(&f, &(x - Vector::<2>::new(h, 0.0)))) / (2.0 * h);
        assert!((fd - TestFunction::<2>::grad(&f, &x)[0]).abs() < 1e-8);
        let c = TestFn::CosTheta;
        let p = Hemisphere::chart_point(0.8, 0.2);
        assert!((TestFunction::<2>::value(&c, &p) - 0.8_f64.cos()).abs() < 1e-14);
    }

    #[test]
    fn constant_function_has_zero_derivatives() {
        let m = HalfLine::new();
        let f = TestFn::Const(3.0);
        let mc = McConfig::new(1.0, 1e-2, 2000, 1);
        let x0 = Vector::<1>::new(0.5);
        let v = Vector::<1>::new(1.0);
        let p = estimate_semigroup(&m, &f, &x0, &mc).unwrap();
        assert_eq!(p.mean(), 3.0);
        assert_eq!(p.se(), 0.0);
        let g = estimate_gradient(&m, &f, &x0, &v, &mc, &GradientForm::Weighted(HSchedule::ramp(1.0))).unwrap();
        assert!(g.mean().abs() < 3.0 * g.se());
        let l = estimate_lpf(&m, &f, &x0, &mc, &HSchedule::constant(1.0), Penalty::Limit).unwrap();
        assert!(l.mean().abs() < 3.0 * l.se());
        let h = estimate_hessian(&m, &f, &x0, &v, &mc, &HSchedule::constant(1.0)).unwrap();
        assert!(h.mean().abs() < 3.0 * h.se());
    }

    #[test]
    fn tangential_gradient_is_free_brownian() {
        let m = HalfSpace::<2>::new();
        let f = TestFn::Coord(1);
        let mc = McConfig::new(1.0, 1e-2, 4000, 2);
        let x0 = Vector::<2>::new(0.0, 0.3);
        let v = Vector::<2>::new(0.0, 1.0);
        let g = estimate_gradient(&m, &f, &x0, &v, &mc, &GradientForm::Intrinsic).unwrap();
        assert!((g.mean() - 1.0).abs() < 1e-12);
        let g = estimate_gradient(&m, &f, &x0, &v, &mc, &GradientForm::Weighted(HSchedule::ramp(1.0))).unwrap();
        assert!((g.mean() - 1.0).abs() < 3.0 * g.se());
    }

    #[test]
    fn ordered_and_tree_reductions_agree() {
        let m = HalfLine::new();
        let f = TestFn::Sq;
        let mut mc = McConfig::new(0.5, 1e-2, 500, 3);
        let a = estimate_semigroup(&m, &f, &Vector::<1>::new(0.2), &mc).unwrap();
        mc.reduction = Reduction::Tree;
        let b = estimate_semigroup(&m, &f, &Vector::<1>::new(0.2), &mc).unwrap();
        assert!((a.mean() - b.mean()).abs() < 1e-12);
        assert_eq!(a.n_samples, b.n_samples);
    }
}
