//! Closed-form derivative bounds checked against oracle derivatives.
//!
//! Left sides (`|LP_Tf|`, `|Hess P_Tf|`, `|∇P_Tf|`) come from the deterministic oracles and carry
//! no statistical error. Right sides use oracle moments `P_Tf²`, `P_T|∇f|²` and, when the bound
//! involves local time, Monte Carlo moments of `l_T` whose standard errors enter the margin.

use serde::Serialize;

use crate::estimators::{run_paths, McConfig, TestFn, TestFunction};
use crate::geometry::{CurvatureConstants, Disk, HalfLine, HalfSpace, Hemisphere, Manifold};
use crate::linalg::{op_norm, Vector};
use crate::oracle::{base_frame, covariant_hessian, oracle_chart_gradient, oracle_lf, GridOracle, ImageOracle, LfRoute, Truth};
use crate::pathsim::PathStepper;
use crate::{Error, Result};

/// `3 + √10`.
pub fn martingale_constant() -> f64 {
    3.0 + 10f64.sqrt()
}

/// Which bound a report checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundKind {
    /// `|LP_Tf| ≤ 2‖f‖∞(√3‖Z‖∞/(3√T) + (3+√10)E[e^{σ⁻l_T}]^{1/2}e^{K⁻T/2}/T)`.
    LpfGeneral,
    /// `|LP_Tf| ≤ (P_Tf²)^{1/2}(2√3‖Z‖∞/(3√T) + √2e^{K⁻T/2}/T)` for convex boundary.
    LpfConvex,
    /// `|Hess P_Tf| ≤ (α + √T β/2 + 2/T)e^{K⁻T}(P_Tf²)^{1/2}` when `σ = γ = 0`.
    HessianGlobal,
    /// Global Hessian estimate with the local-time `γ` term.
    HessianFull,
    /// `|Hess P_tf| ≤ (1/√(∫₀ᵗe^{Kr}dr) + α/√K + β/K)e^{−Kt/2}(P_t|∇f|²)^{1/2}`.
    HessianGradform,
    /// `|∇P_tf| ≤ e^{K⁻t}t^{−1/2}(P_tf²)^{1/2}`.
    GradientGp1,
}

impl BoundKind {
    pub fn id(&self) -> &'static str {
        match self {
            BoundKind::LpfGeneral => "lpf_general",
            BoundKind::LpfConvex => "lpf_convex",
            BoundKind::HessianGlobal => "hess_global",
            BoundKind::HessianFull => "hess_full",
            BoundKind::HessianGradform => "hess_gradform",
            BoundKind::GradientGp1 => "grad_gp1",
        }
    }

    pub fn suite(&self) -> Suite {
        match self {
            BoundKind::LpfGeneral | BoundKind::LpfConvex => Suite::Lpf,
            BoundKind::HessianGlobal | BoundKind::HessianFull | BoundKind::HessianGradform => Suite::Hess,
            BoundKind::GradientGp1 => Suite::Grad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Suite {
    Lpf,
    Hess,
    Grad,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lpf" => Ok(Suite::Lpf),
            "hess" => Ok(Suite::Hess),
            "grad" => Ok(Suite::Grad),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown bound suite `{s}` (expected lpf, hess, grad or all)"))),
        }
    }
}

impl Suite {
    pub fn contains(&self, k: BoundKind) -> bool {
        *self == Suite::All || k.suite() == *self
    }
}

/// Every input of a bound formula, echoed into the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct BoundInputs {
    pub t: f64,
    pub k: f64,
    pub k_minus: f64,
    pub sigma: f64,
    pub sigma_minus: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub z_sup: f64,
    pub f_sup: f64,
    /// `‖f‖∞` or `‖Z‖∞` taken over the oracle window because the function is unbounded.
    pub window_sup: bool,
    pub pf2: f64,
    pub pgrad2: f64,
    /// `E[e^{σ⁻l_T}]`.
    pub exp_local_time: f64,
    pub exp_local_time_se: f64,
    /// `E[(∫₀ᵀe^{σ⁻l_s/2}dl_s)²]`.
    pub local_time_sq: f64,
    pub local_time_sq_se: f64,
}

impl BoundInputs {
    pub fn from_constants(c: &CurvatureConstants, t: f64) -> Self {
        BoundInputs {
            t,
            k: c.k,
            k_minus: c.k_minus(),
            sigma: c.sigma,
            sigma_minus: c.sigma_minus(),
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            exp_local_time: 1.0,
            ..Default::default()
        }
    }
}

/// Right side of a bound and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RightSide {
    pub value: f64,
    pub se: f64,
}

fn sqrt_with_se(x: f64, se: f64) -> (f64, f64) {
    let r = x.max(0.0).sqrt();
    (r, if r > 0.0 { se / (2.0 * r) } else { 0.0 })
}

pub fn lpf_general(i: &BoundInputs) -> RightSide {
    let c = martingale_constant();
    let (e, e_se) = sqrt_with_se(i.exp_local_time, i.exp_local_time_se);
    let damp = (0.5 * i.k_minus * i.t).exp() / i.t;
    let drift = 3f64.sqrt() * i.z_sup / (3.0 * i.t.sqrt());
    RightSide { value: 2.0 * i.f_sup * (drift + c * e * damp), se: 2.0 * i.f_sup * c * e_se * damp }
}

pub fn lpf_convex(i: &BoundInputs) -> RightSide {
    let drift = 2.0 * 3f64.sqrt() * i.z_sup / (3.0 * i.t.sqrt());
    let value = i.pf2.sqrt() * (drift + std::f64::consts::SQRT_2 * (0.5 * i.k_minus * i.t).exp() / i.t);
    RightSide { value, se: 0.0 }
}

pub fn hessian_global(i: &BoundInputs) -> RightSide {
    let value = (i.alpha + 0.5 * i.t.sqrt() * i.beta + 2.0 / i.t) * (i.k_minus * i.t).exp() * i.pf2.sqrt();
    RightSide { value, se: 0.0 }
}

pub fn hessian_full(i: &BoundInputs) -> RightSide {
    let growth = (i.k_minus * i.t).exp();
    let p = i.pf2.sqrt();
    let a = i.alpha + 0.5 * i.beta * i.t.sqrt() + 2.0 / i.t;
    let first = a * growth * i.exp_local_time * p;
    let first_se = a * growth * i.exp_local_time_se * p;
    let (e, e_se) = sqrt_with_se(i.exp_local_time, i.exp_local_time_se);
    let (l, l_se) = sqrt_with_se(i.local_time_sq, i.local_time_sq_se);
    let c = i.gamma / (2.0 * i.t.sqrt()) * growth * p;
    let second = c * e * l;
    let second_se = c * ((e_se * l).powi(2) + (e * l_se).powi(2)).sqrt();
    RightSide { value: first + second, se: first_se + second_se }
}

pub fn hessian_gradform(i: &BoundInputs) -> Result<RightSide> {
    if i.k <= 0.0 {
        return Err(Error::Config("the gradient-form Hessian bound needs K > 0".into()));
    }
    let k = i.k;
    let ramp = ((k * i.t).exp_m1() / k).sqrt();
    let value = (1.0 / ramp + i.alpha / k.sqrt() + i.beta / k) * (-0.5 * k * i.t).exp() * i.pgrad2.sqrt();
    Ok(RightSide { value, se: 0.0 })
}

pub fn gradient_gp1(i: &BoundInputs) -> RightSide {
    RightSide { value: (i.k_minus * i.t).exp() / i.t.sqrt() * i.pf2.sqrt(), se: 0.0 }
}

/// One evaluated bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub bound: BoundKind,
    pub config: String,
    pub left: f64,
    pub right: f64,
    pub margin: f64,
    pub se_combined: f64,
    pub pass: bool,
    /// Whether the model satisfies the bound's hypotheses; reports with unmet hypotheses are
    /// informational.
    pub hypotheses_met: bool,
    pub inputs: BoundInputs,
}

impl BoundReport {
    pub fn new(bound: BoundKind, config: String, left: f64, right: RightSide, hypotheses_met: bool, inputs: BoundInputs) -> Self {
        let margin = right.value - left;
        let se = right.se;
        BoundReport { bound, config, left, right: right.value, margin, se_combined: se, pass: margin >= -3.0 * se, hypotheses_met, inputs }
    }

    /// A report counts as a failure only when its hypotheses hold.
    pub fn failed(&self) -> bool {
        self.hypotheses_met && !self.pass
    }
}

/// Model choices in the bound catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CaseModel {
    HalfLine,
    HalfSpace2 { k_ou: f64 },
    Disk { radius: f64 },
    Hemisphere,
}

/// One catalog configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCase {
    pub bound: BoundKind,
    pub model: CaseModel,
    pub f: TestFn,
    pub x0: Vec<f64>,
    pub t: f64,
}

impl BoundCase {
    fn new(bound: BoundKind, model: CaseModel, f: TestFn, x0: &[f64], t: f64) -> Self {
        BoundCase { bound, model, f, x0: x0.to_vec(), t }
    }

    pub fn label(&self) -> String {
        let m = match self.model {
            CaseModel::HalfLine => "half_line".to_string(),
            CaseModel::HalfSpace2 { k_ou } if k_ou != 0.0 => format!("half_space_2d[ou={k_ou}]"),
            CaseModel::HalfSpace2 { .. } => "half_space_2d".to_string(),
            CaseModel::Disk { radius } => format!("disk[r={radius}]"),
            CaseModel::Hemisphere => "hemisphere".to_string(),
        };
        let x: Vec<String> = self.x0.iter().map(|v| format!("{}", (v * 1e4).round() / 1e4)).collect();
        format!("{m} f={} x0=({}) T={}", self.f.id(), x.join(";"), self.t)
    }
}

/// Monte Carlo settings for local-time moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for MomentOptions {
    fn default() -> Self {
        MomentOptions { n_paths: 4000, dt: 1e-3, seed: 11 }
    }
}

fn hemi(theta: f64) -> Vec<f64> {
    let p = Hemisphere::chart_point(theta, 0.0);
    vec![p[0], p[1]]
}

/// The standard test matrix.
pub fn catalog() -> Vec<BoundCase> {
    use BoundKind::*;
    use CaseModel::*;
    let mut c = vec![
        BoundCase::new(LpfGeneral, HalfLine, TestFn::Sq, &[0.0], 1.0),
        BoundCase::new(LpfConvex, HalfLine, TestFn::Sq, &[0.0], 1.0),
        BoundCase::new(LpfConvex, HalfLine, TestFn::Sq, &[0.5], 1.0),
        BoundCase::new(LpfConvex, HalfLine, TestFn::Sq, &[0.5], 4.0),
        BoundCase::new(LpfGeneral, HalfSpace2 { k_ou: 0.0 }, TestFn::Gauss(1.0), &[0.2, 0.5], 1.0),
        BoundCase::new(LpfConvex, HalfSpace2 { k_ou: 0.0 }, TestFn::Gauss(1.0), &[0.2, 0.5], 1.0),
        BoundCase::new(LpfGeneral, Hemisphere, TestFn::CosTheta, &hemi(0.0), 0.5),
        BoundCase::new(LpfConvex, Hemisphere, TestFn::CosTheta, &hemi(0.8), 0.5),
        BoundCase::new(LpfConvex, Disk { radius: 1.0 }, TestFn::Gauss(1.0), &[0.3, 0.2], 0.3),
        BoundCase::new(HessianGlobal, HalfLine, TestFn::Sq, &[0.5], 1.0),
        BoundCase::new(HessianGlobal, HalfLine, TestFn::Sq, &[0.5], 0.5),
        BoundCase::new(HessianGlobal, HalfLine, TestFn::Const(1.0), &[0.5], 1.0),
        BoundCase::new(HessianGlobal, HalfSpace2 { k_ou: 0.0 }, TestFn::Gauss(0.5), &[0.3, -0.2], 1.0),
        BoundCase::new(HessianGlobal, HalfSpace2 { k_ou: 1.0 }, TestFn::Gauss(0.5), &[0.3, -0.2], 1.0),
        BoundCase::new(HessianFull, HalfLine, TestFn::Sq, &[0.5], 1.0),
        BoundCase::new(HessianFull, Disk { radius: 1.0 }, TestFn::Gauss(1.0), &[0.5, 0.0], 0.3),
        BoundCase::new(HessianGradform, HalfSpace2 { k_ou: 1.0 }, TestFn::Coord(1), &[0.3, 0.8], 1.0),
        BoundCase::new(HessianGradform, HalfSpace2 { k_ou: 1.0 }, TestFn::Gauss(0.5), &[0.3, -0.2], 1.0),
        BoundCase::new(HessianGradform, HalfSpace2 { k_ou: 2.0 }, TestFn::Gauss(1.0), &[0.1, 0.4], 0.5),
        BoundCase::new(GradientGp1, HalfLine, TestFn::Sq, &[0.5], 0.1),
        BoundCase::new(GradientGp1, HalfLine, TestFn::Sq, &[0.5], 0.5),
        BoundCase::new(GradientGp1, HalfLine, TestFn::Sq, &[0.5], 1.0),
        BoundCase::new(GradientGp1, HalfLine, TestFn::Const(2.0), &[0.5], 1.0),
        BoundCase::new(GradientGp1, Hemisphere, TestFn::CosTheta, &hemi(0.6), 0.5),
        BoundCase::new(GradientGp1, Disk { radius: 1.0 }, TestFn::Gauss(1.0), &[0.3, 0.2], 0.3),
    ];
    for th in [0.0, 0.3, 0.6, 0.9, 1.2] {
        c.push(BoundCase::new(HessianFull, Hemisphere, TestFn::CosTheta, &hemi(th), 0.5));
        c.push(BoundCase::new(HessianGradform, Hemisphere, TestFn::CosTheta, &hemi(th), 0.5));
    }
    c
}

/// `E[e^{σ⁻l_T}]` and `E[(∫e^{σ⁻l_s/2}dl_s)²]` with standard errors.
pub fn local_time_moments<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x0: &Vector<D>,
    t: f64,
    sigma_minus: f64,
    opts: &MomentOptions,
) -> Result<[f64; 4]> {
    let mc = McConfig::new(t, opts.dt, opts.n_paths, opts.seed);
    let sim = mc.sim();
    let est = run_paths(&mc, 2, "none", |i| {
        let mut st = PathStepper::new(model, x0, &sim, i)?;
        let mut acc = 0.0;
        while let Some(r) = st.step() {
            let rec = r?;
            acc += (0.5 * sigma_minus * (st.l - rec.dl)).exp() * rec.dl;
        }
        Ok(Some(vec![(sigma_minus * st.l).exp(), acc * acc]))
    })?;
    Ok([est.value[0], est.std_error[0], est.value[1], est.std_error[1]])
}

fn window_sup(f: TestFn, x0: &[f64], t: f64) -> (f64, bool) {
    let reach = x0.iter().map(|v| v * v).sum::<f64>().sqrt() + 8.0 * t.sqrt();
    match f {
        TestFn::Gauss(_) | TestFn::CosTheta => (1.0, false),
        TestFn::Const(c) => (c.abs(), false),
        TestFn::Sq => (reach * reach, true),
        TestFn::Coord(_) => (reach, true),
    }
}

fn evaluate_on<const D: usize, M: Manifold<D>>(case: &BoundCase, model: &M, truth: &Truth<D>, opts: &MomentOptions) -> Result<BoundReport> {
    if case.x0.len() != D {
        return Err(Error::Config(format!("x0 has {} components, model needs {D}", case.x0.len())));
    }
    let x = Vector::<D>::from_iterator(case.x0.iter().copied());
    let t = case.t;
    let c = model.constants();
    let f = truth.test_fn();
    let mut inp = BoundInputs::from_constants(&c, t);
    let (fs, fw) = window_sup(f, &case.x0, t);
    inp.f_sup = fs;
    inp.window_sup = fw;
    if model.has_drift() {
        // |Z| = K|x| is unbounded; sup over the oracle window
        let reach = x.norm() + 8.0 * t.sqrt();
        inp.z_sup = c.k.abs() * reach;
        inp.window_sup = true;
    }
    inp.pf2 = truth.expect(&x, t, |y| f.value(y).powi(2))?;
    inp.pgrad2 = truth.expect(&x, t, |y| {
        let g = f.grad(y);
        (g.transpose() * model.metric_inv(y) * g)[(0, 0)]
    })?;
    let needs_mc = match case.bound {
        BoundKind::LpfGeneral => inp.sigma_minus > 0.0,
        BoundKind::HessianFull => inp.sigma_minus > 0.0 || inp.gamma > 0.0,
        _ => false,
    };
    if needs_mc {
        let m = local_time_moments(model, &x, t, inp.sigma_minus, opts)?;
        inp.exp_local_time = m[0];
        inp.exp_local_time_se = m[1];
        inp.local_time_sq = m[2];
        inp.local_time_sq_se = m[3];
    }
    let h = truth.fd_step();
    let e = base_frame(model, &x);
    let (left, right, met) = match case.bound {
        BoundKind::LpfGeneral => (oracle_lf(truth, model, &x, t, h, LfRoute::Spatial)?.abs(), lpf_general(&inp), true),
        BoundKind::LpfConvex => (oracle_lf(truth, model, &x, t, h, LfRoute::Spatial)?.abs(), lpf_convex(&inp), inp.sigma >= 0.0),
        BoundKind::HessianGlobal | BoundKind::HessianFull | BoundKind::HessianGradform => {
            let hm = covariant_hessian(truth, model, &x, t, h)?;
            let left = op_norm(&(e.transpose() * hm * e));
            match case.bound {
                BoundKind::HessianGlobal => (left, hessian_global(&inp), inp.sigma == 0.0 && inp.gamma == 0.0),
                BoundKind::HessianFull => (left, hessian_full(&inp), true),
                _ => (left, hessian_gradform(&inp)?, inp.k > 0.0 && inp.sigma >= 0.0 && inp.gamma == 0.0),
            }
        }
        BoundKind::GradientGp1 => {
            let g = oracle_chart_gradient(truth, &x, t, h)?;
            ((e.transpose() * g).norm(), gradient_gp1(&inp), inp.sigma >= 0.0)
        }
    };
    Ok(BoundReport::new(case.bound, case.label(), left, right, met, inp))
}

const GRID_NODES: usize = 800;
const GRID_DT: f64 = 5e-4;

/// Evaluates one catalog case against its oracle.
pub fn evaluate(case: &BoundCase, opts: &MomentOptions) -> Result<BoundReport> {
    match case.model {
        CaseModel::HalfLine => {
            let m = HalfLine::new();
            evaluate_on(case, &m, &Truth::Image(ImageOracle::new(case.f, &m)), opts)
        }
        CaseModel::HalfSpace2 { k_ou } => {
            let m = HalfSpace::<2>::with_ou(k_ou);
            evaluate_on(case, &m, &Truth::Image(ImageOracle::new(case.f, &m)), opts)
        }
        CaseModel::Disk { radius } => {
            let m = Disk::new(radius);
            let o = GridOracle::disk(case.f, radius, GRID_NODES, GRID_DT)?;
            evaluate_on(case, &m, &Truth::Grid(o), opts)
        }
        CaseModel::Hemisphere => {
            let o = GridOracle::hemisphere(case.f, GRID_NODES, GRID_DT)?;
            evaluate_on(case, &Hemisphere, &Truth::Grid(o), opts)
        }
    }
}

/// Evaluates every catalog case in `suite`.
pub fn run_suite(suite: Suite, opts: &MomentOptions) -> Result<Vec<BoundReport>> {
    catalog().iter().filter(|c| suite.contains(c.bound)).map(|c| evaluate(c, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(t: f64) -> BoundInputs {
        BoundInputs { t, exp_local_time: 1.0, ..Default::default() }
    }

    #[test]
    fn lpf_formulas_on_the_half_line() {
        let mut i = flat(1.0);
        i.f_sup = 1.0;
        assert!((lpf_general(&i).value - 2.0 * martingale_constant()).abs() < 1e-12);
        i.pf2 = 3.0;
        assert!((lpf_convex(&i).value - 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn lpf_bound_decreases_in_time_without_curvature() {
        let mut prev = f64::INFINITY;
        for t in [1.0, 2.0, 4.0, 8.0] {
            let mut i = flat(t);
            i.k = 1.0;
            i.f_sup = 1.0;
            let r = lpf_general(&i).value;
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn hessian_gradform_diverges_for_short_times() {
        let mut i = flat(1e-4);
        i.k = 1.0;
        i.pgrad2 = 1.0;
        let short = hessian_gradform(&i).unwrap().value;
        i.t = 1.0;
        assert!(short > 50.0 * hessian_gradform(&i).unwrap().value);
        i.k = 0.0;
        assert!(hessian_gradform(&i).is_err());
    }

    #[test]
    fn half_line_hessian_bound_uses_fourth_moment() {
        let r = evaluate(&BoundCase::new(BoundKind::HessianGlobal, CaseModel::HalfLine, TestFn::Sq, &[0.5], 1.0), &MomentOptions::default()).unwrap();
        // E|0.5 + B_1|⁴ = 0.0625 + 6·0.25 + 3
        assert!((r.inputs.pf2 - 4.5625).abs() < 1e-9);
        assert!((r.left - 2.0).abs() < 1e-7);
        assert!((r.right - 2.0 * 4.5625f64.sqrt()).abs() < 1e-9);
        assert!(r.pass && r.hypotheses_met);
    }

    #[test]
    fn gradient_bound_on_constant_has_zero_left_side() {
        let r = evaluate(&BoundCase::new(BoundKind::GradientGp1, CaseModel::HalfLine, TestFn::Const(2.0), &[0.5], 1.0), &MomentOptions::default()).unwrap();
        assert!(r.left.abs() < 1e-10 && r.pass);
    }
}
