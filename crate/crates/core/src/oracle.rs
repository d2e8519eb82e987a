//! Deterministic ground truth for `P_tf` and its derivatives.
//!
//! - Flat half-spaces (optionally with Ornstein–Uhlenbeck drift): method of images. The normal
//!   coordinate is the reflected Gaussian `|m + sZ|`; it is integrated with composite
//!   Gauss–Legendre panels split at the kink. Tangential coordinates use Gauss–Hermite.
//! - Axisymmetric problems on the hemisphere, radial problems on the disk and 1-D problems on
//!   truncated intervals: finite-volume Crank–Nicolson for `½ w⁻¹(w u′)′` with zero boundary
//!   flux.
//! - Derivatives: central differences with Richardson extrapolation in the chart (covariant
//!   Hessian through the Christoffels), or `2∂_t` for `LP_tf`.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use gauss_quad::{GaussHermite, GaussLegendre};

use crate::estimators::{TestFn, TestFunction};
use crate::geometry::{HalfSpace, Hemisphere, Manifold};
use crate::linalg::{sym_inv_sqrt, Matrix, Vector};
use crate::{Error, Result};

/// Ground-truth evaluator of `P_tf` at chart points.
pub trait NeumannOracle<const D: usize>: Sync {
    fn value(&self, x: &Vector<D>, t: f64) -> Result<f64>;
    /// Smallest admissible finite-difference step in the chart.
    fn min_step(&self) -> f64 {
        0.0
    }
}

fn check_time(t: f64) -> Result<()> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Config(format!("oracle time must be ≥ 0, got {t}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Image method

/// Nodes and weights for `E[g(Z)]`, `Z ~ N(0,1)`.
pub fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    let gh = GaussHermite::new(NonZeroUsize::new(n).expect("positive node count"));
    let s = std::f64::consts::PI.sqrt();
    gh.as_node_weight_pairs()
        .into_iter()
        .map(|(x, w)| (x * std::f64::consts::SQRT_2, w / s))
        .collect()
}

fn legendre_nodes(n: usize) -> Vec<(f64, f64)> {
    GaussLegendre::new(NonZeroUsize::new(n).expect("positive node count")).as_node_weight_pairs().to_vec()
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Nodes and weights for `E[g(|m + sZ|)]`-type integrals over `z ∈ [−14, 14]` with a panel
/// boundary at `kink`.
fn normal_panels(kink: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let gl = legendre_nodes(order);
    let (lo, hi) = (-14.0, 14.0);
    let mut cuts = vec![lo];
    if kink > lo && kink < hi {
        let n1 = ((kink - lo) / (hi - lo) * panels as f64).round().max(1.0) as usize;
        let n2 = panels.saturating_sub(n1).max(1);
        cuts.extend((1..=n1).map(|i| lo + (kink - lo) * i as f64 / n1 as f64));
        cuts.extend((1..=n2).map(|i| kink + (hi - kink) * i as f64 / n2 as f64));
    } else {
        cuts.extend((1..=panels).map(|i| lo + (hi - lo) * i as f64 / panels as f64));
    }
    let mut out = Vec::with_capacity((cuts.len() - 1) * order);
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        for &(x, wt) in &gl {
            let z = c + r * x;
            out.push((z, wt * r * normal_pdf(z)));
        }
    }
    out
}

/// Image-method oracle on `HalfSpace<D>` with drift `Z = −Kx` (`K = 0` for Brownian motion).
#[derive(Debug, Clone)]
pub struct ImageOracle<const D: usize> {
    pub f: TestFn,
    pub k_ou: f64,
    tangential: Vec<(f64, f64)>,
}

impl<const D: usize> ImageOracle<D> {
    pub fn new(f: TestFn, model: &HalfSpace<D>) -> Self {
        let nodes = if D <= 2 { 64 } else { 32 };
        ImageOracle { f, k_ou: model.k_ou, tangential: gauss_hermite_normal(nodes) }
    }

    /// Mean factor and standard deviation of the OU transition over time `t`.
    pub fn transition(&self, t: f64) -> (f64, f64) {
        let k = self.k_ou;
        if k.abs() < 1e-14 {
            (1.0, t.sqrt())
        } else {
            ((-0.5 * k * t).exp(), ((-(-k * t).exp_m1()) / k).sqrt())
        }
    }

    /// `E[g(Y)]` for the transition law from `x` over time `t`.
    pub fn expect<G: Fn(&Vector<D>) -> f64>(&self, x: &Vector<D>, t: f64, g: G) -> Result<f64> {
        check_time(t)?;
        if t == 0.0 {
            return Ok(g(&Vector::<D>::from_fn(|i, _| if i == 0 { x[0].abs() } else { x[i] })));
        }
        let (a, s) = self.transition(t);
        let m = x * a;
        let normal = normal_panels(-m[0] / s, 16, 24);
        let tn = self.tangential.len();
        let mut total = 0.0;
        let tang_count = tn.pow((D - 1) as u32);
        let mut y = Vector::<D>::zeros();
        for flat in 0..tang_count {
            let mut idx = flat;
            let mut wt = 1.0;
            for i in 1..D {
                let (z, w) = self.tangential[idx % tn];
                idx /= tn;
                y[i] = m[i] + s * z;
                wt *= w;
            }
            let mut inner = 0.0;
            for &(z, w) in &normal {
                y[0] = (m[0] + s * z).abs();
                inner += w * g(&y);
            }
            total += wt * inner;
        }
        Ok(total)
    }
}

impl<const D: usize> NeumannOracle<D> for ImageOracle<D> {
    fn value(&self, x: &Vector<D>, t: f64) -> Result<f64> {
        let f = self.f;
        self.expect(x, t, |y| TestFunction::<D>::value(&f, y))
    }
}

// ---------------------------------------------------------------------------
// 1-D finite-volume Crank–Nicolson

/// Weight `w` of the 1-D operator `½ w⁻¹(w u′)′`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Flat,
    /// `sin θ` (axisymmetric Laplacian on the sphere).
    Sin,
    /// `r` (radial Laplacian in the plane).
    Radial,
    /// `e^{−Kx²/2}` (Ornstein–Uhlenbeck generator `u″ − Kxu′`).
    Gaussian { k: f64 },
}

impl Weight {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Weight::Flat => 1.0,
            Weight::Sin => x.sin(),
            Weight::Radial => x,
            Weight::Gaussian { k } => (-0.5 * k * x * x).exp(),
        }
    }
}

/// Uniform 1-D grid with zero-flux ends.
#[derive(Debug, Clone)]
pub struct Grid1d {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub weight: Weight,
    pub dt: f64,
    volumes: Vec<f64>,
    conductances: Vec<f64>,
}

impl Grid1d {
    /// `n` intervals on `[a, b]`, target time step `dt`.
    pub fn new(a: f64, b: f64, n: usize, weight: Weight, dt: f64) -> Result<Self> {
        if !(b > a) || n < 4 || !(dt > 0.0) {
            return Err(Error::Config(format!("bad grid [{a}, {b}] with n = {n}, dt = {dt}")));
        }
        let h = (b - a) / n as f64;
        let gl = legendre_nodes(8);
        let integrate = |lo: f64, hi: f64| -> f64 {
            let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            gl.iter().map(|&(x, w)| w * r * weight.eval(c + r * x)).sum()
        };
        let volumes = (0..=n)
            .map(|i| {
                let x = a + i as f64 * h;
                integrate((x - 0.5 * h).max(a), (x + 0.5 * h).min(b))
            })
            .collect();
        let conductances = (0..n).map(|i| weight.eval(a + (i as f64 + 0.5) * h) / h).collect();
        Ok(Grid1d { a, b, n, weight, dt, volumes, conductances })
    }

    pub fn spacing(&self) -> f64 {
        (self.b - self.a) / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..=self.n).map(|i| self.a + i as f64 * h).collect()
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// `Σ V_i u_i`.
    pub fn mass(&self, u: &[f64]) -> f64 {
        self.volumes.iter().zip(u).map(|(v, x)| v * x).sum()
    }

    /// `(A u)_i = F_{i+½} − F_{i−½}` with `F_{i+½} = c_{i+½}(u_{i+1} − u_i)`.
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let flux = self.conductances[i] * (u[i + 1] - u[i]);
            out[i] += flux;
            out[i + 1] -= flux;
        }
    }

    /// Evolves nodal values over time `t` under `∂_t u = ½ V⁻¹ A u` by Crank–Nicolson.
    pub fn evolve(&self, u0: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        if u0.len() != self.n + 1 {
            return Err(Error::Config("initial data does not match the grid".into()));
        }
        let mut u = u0.to_vec();
        if t == 0.0 {
            return Ok(u);
        }
        let steps = (t / self.dt).ceil().max(1.0) as usize;
        let tau = t / steps as f64;
        let c = 0.25 * tau;
        let n = self.n + 1;
        // (V − cA) u' = (V + cA) u, tridiagonal
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n - 1];
        for i in 0..n {
            diag[i] = self.volumes[i];
        }
        for i in 0..self.n {
            let k = self.conductances[i];
            diag[i] += c * k;
            diag[i + 1] += c * k;
            off[i] = -c * k;
        }
        // Thomas factorization reused every step
        let mut cp = vec![0.0; n - 1];
        let mut dp = vec![0.0; n];
        dp[0] = diag[0];
        for i in 0..n - 1 {
            cp[i] = off[i] / dp[i];
            dp[i + 1] = diag[i + 1] - off[i] * cp[i];
        }
        let mut au = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        // Rannacher start: the first steps become pairs of implicit Euler half-steps, which
        // share the Crank–Nicolson left matrix and damp the stiff modes of nonsmooth data.
        let startup = 2 * steps.min(2);
        for step in 0..startup + steps - steps.min(2) {
            if step < startup {
                for i in 0..n {
                    rhs[i] = self.volumes[i] * u[i];
                }
            } else {
                self.apply(&u, &mut au);
                for i in 0..n {
                    rhs[i] = self.volumes[i] * u[i] + c * au[i];
                }
            }
            for i in 1..n {
                rhs[i] -= off[i - 1] / dp[i - 1] * rhs[i - 1];
            }
            u[n - 1] = rhs[n - 1] / dp[n - 1];
            for i in (0..n - 1).rev() {
                u[i] = (rhs[i] - off[i] * u[i + 1]) / dp[i];
            }
        }
        Ok(u)
    }

    /// Cubic Lagrange interpolation with mirrored ghost nodes at both ends.
    pub fn interpolate(&self, u: &[f64], x: f64) -> f64 {
        let h = self.spacing();
        let s = ((x - self.a) / h).clamp(0.0, self.n as f64);
        let i0 = (s.floor() as isize - 1).clamp(-1, self.n as isize - 2);
        let n = self.n as isize;
        let at = |j: isize| -> f64 {
            let j = if j < 0 { -j } else if j > n { 2 * n - j } else { j };
            u[j as usize]
        };
        let mut acc = 0.0;
        for a in 0..4 {
            let ja = i0 + a;
            let mut l = 1.0;
            for b in 0..4 {
                if a != b {
                    let jb = i0 + b;
                    l *= (s - jb as f64) / (ja - jb) as f64;
                }
            }
            acc += l * at(ja);
        }
        acc
    }

    /// One-sided second-order normal derivatives at both ends.
    pub fn boundary_slopes(&self, u: &[f64]) -> (f64, f64) {
        let h = self.spacing();
        let n = self.n;
        ((-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h), (3.0 * u[n] - 4.0 * u[n - 1] + u[n - 2]) / (2.0 * h))
    }
}

/// How a chart point maps to the grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridCoordinate {
    /// `x₁` on a truncated half-line.
    HalfLine,
    /// Polar angle on the hemisphere.
    PolarAngle,
    /// Radius on the disk.
    Radius,
}

/// Grid oracle for 1-D, axisymmetric or radial test functions.
pub struct GridOracle<const D: usize> {
    pub grid: Grid1d,
    pub coordinate: GridCoordinate,
    pub f: TestFn,
    cache: Mutex<HashMap<u64, Arc<Vec<f64>>>>,
}

impl<const D: usize> GridOracle<D> {
    pub fn new(grid: Grid1d, coordinate: GridCoordinate, f: TestFn) -> Result<Self> {
        let o = GridOracle { grid, coordinate, f, cache: Mutex::new(HashMap::new()) };
        // the test function must depend on the grid coordinate only
        for s in o.grid.nodes().iter().step_by((o.grid.n / 8).max(1)) {
            for phi in [0.7, 2.1] {
                let a = TestFunction::<D>::value(&f, &o.chart_point(*s, 0.0));
                let b = TestFunction::<D>::value(&f, &o.chart_point(*s, phi));
                if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                    return Err(Error::Config(format!("test function `{}` is not symmetric for this grid oracle", f.id())));
                }
            }
        }
        Ok(o)
    }

    /// Half-line truncated at `x0 + 8√T`.
    pub fn half_line(f: TestFn, x0: f64, t: f64, n: usize, dt: f64) -> Result<Self> {
        let b = x0 + 8.0 * t.sqrt().max(0.1);
        Self::new(Grid1d::new(0.0, b, n, Weight::Flat, dt)?, GridCoordinate::HalfLine, f)
    }

    pub fn hemisphere(f: TestFn, n: usize, dt: f64) -> Result<Self> {
        Self::new(Grid1d::new(0.0, std::f64::consts::FRAC_PI_2, n, Weight::Sin, dt)?, GridCoordinate::PolarAngle, f)
    }

    pub fn disk(f: TestFn, radius: f64, n: usize, dt: f64) -> Result<Self> {
        Self::new(Grid1d::new(0.0, radius, n, Weight::Radial, dt)?, GridCoordinate::Radius, f)
    }

    fn chart_point(&self, s: f64, phi: f64) -> Vector<D> {
        match self.coordinate {
            GridCoordinate::HalfLine => Vector::<D>::from_fn(|i, _| if i == 0 { s } else { 0.0 }),
            GridCoordinate::PolarAngle => {
                let p = Hemisphere::chart_point(s, phi);
                Vector::<D>::from_fn(|i, _| if i < 2 { p[i] } else { 0.0 })
            }
            GridCoordinate::Radius => Vector::<D>::from_fn(|i, _| match i {
                0 => s * phi.cos(),
                1 => s * phi.sin(),
                _ => 0.0,
            }),
        }
    }

    /// Grid coordinate of a chart point, folded back into `[a, b]` by the even extension.
    pub fn coordinate_of(&self, x: &Vector<D>) -> f64 {
        match self.coordinate {
            GridCoordinate::HalfLine => x[0].abs(),
            GridCoordinate::PolarAngle => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let th = 2.0 * r.atan();
                if th > std::f64::consts::FRAC_PI_2 {
                    std::f64::consts::PI - th
                } else {
                    th
                }
            }
            GridCoordinate::Radius => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let rr = self.grid.b;
                if r > rr {
                    2.0 * rr - r
                } else {
                    r
                }
            }
        }
    }

    pub fn initial(&self) -> Vec<f64> {
        self.grid.nodes().iter().map(|&s| TestFunction::<D>::value(&self.f, &self.chart_point(s, 0.0))).collect()
    }

    /// Nodal values of `P_tf`, cached per time.
    pub fn slice(&self, t: f64) -> Result<Arc<Vec<f64>>> {
        let key = t.to_bits();
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let u = Arc::new(self.grid.evolve(&self.initial(), t)?);
        self.cache.lock().expect("cache lock").insert(key, u.clone());
        Ok(u)
    }

    /// `P_tg(x)` for a function `g` with the same symmetry as the grid, uncached.
    pub fn expect<G: Fn(&Vector<D>) -> f64>(&self, x: &Vector<D>, t: f64, g: G) -> Result<f64> {
        let u0: Vec<f64> = self.grid.nodes().iter().map(|&s| g(&self.chart_point(s, 0.0))).collect();
        let u = self.grid.evolve(&u0, t)?;
        Ok(self.grid.interpolate(&u, self.coordinate_of(x)))
    }

    /// `P_tf` at grid coordinate `s`.
    pub fn value_at(&self, s: f64, t: f64) -> Result<f64> {
        if s < self.grid.a - 1e-12 || s > self.grid.b + 1e-12 {
            return Err(Error::Config(format!("point {s} outside the oracle window [{}, {}]", self.grid.a, self.grid.b)));
        }
        Ok(self.grid.interpolate(&self.slice(t)?, s))
    }
}

impl<const D: usize> NeumannOracle<D> for GridOracle<D> {
    fn value(&self, x: &Vector<D>, t: f64) -> Result<f64> {
        check_time(t)?;
        if t == 0.0 {
            return Ok(TestFunction::<D>::value(&self.f, x));
        }
        self.value_at(self.coordinate_of(x), t)
    }

    fn min_step(&self) -> f64 {
        let h = self.grid.spacing();
        match self.coordinate {
            GridCoordinate::PolarAngle => 2.0 * (0.5 * h).tan(),
            _ => 2.0 * h,
        }
    }
}

/// Either oracle behind one interface.
pub enum Truth<const D: usize> {
    Image(ImageOracle<D>),
    Grid(GridOracle<D>),
}

impl<const D: usize> Truth<D> {
    /// `P_tg(x)` for an arbitrary function `g` (symmetric for grid oracles).
    pub fn expect<G: Fn(&Vector<D>) -> f64>(&self, x: &Vector<D>, t: f64, g: G) -> Result<f64> {
        match self {
            Truth::Image(o) => o.expect(x, t, g),
            Truth::Grid(o) => o.expect(x, t, g),
        }
    }

    pub fn test_fn(&self) -> TestFn {
        match self {
            Truth::Image(o) => o.f,
            Truth::Grid(o) => o.f,
        }
    }

    /// Finite-difference step suited to this oracle.
    pub fn fd_step(&self) -> f64 {
        match self {
            Truth::Image(_) => 1e-2,
            Truth::Grid(o) => (4.0 * o.min_step()).max(2e-2),
        }
    }
}

impl<const D: usize> NeumannOracle<D> for Truth<D> {
    fn value(&self, x: &Vector<D>, t: f64) -> Result<f64> {
        match self {
            Truth::Image(o) => o.value(x, t),
            Truth::Grid(o) => o.value(x, t),
        }
    }
    fn min_step(&self) -> f64 {
        match self {
            Truth::Image(o) => o.min_step(),
            Truth::Grid(o) => o.min_step(),
        }
    }
}

// ---------------------------------------------------------------------------
// Legendre expansion on the sphere

/// `P_l(μ)` for `l = 0..=lmax`.
fn legendre_all(mu: f64, lmax: usize) -> Vec<f64> {
    let mut p = vec![0.0; lmax + 1];
    p[0] = 1.0;
    if lmax >= 1 {
        p[1] = mu;
    }
    for l in 1..lmax {
        p[l + 1] = ((2 * l + 1) as f64 * mu * p[l] - l as f64 * p[l - 1]) / (l + 1) as f64;
    }
    p
}

/// Axisymmetric Neumann problem on the hemisphere by even extension to the sphere:
/// `P_t g(θ) = Σ_{l even} c_l e^{−l(l+1)t/2} P_l(cos θ)` with `g` given as a function of `cos θ`.
pub struct LegendreHemisphere {
    coeffs: Vec<(usize, f64)>,
}

impl LegendreHemisphere {
    pub fn new<G: Fn(f64) -> f64>(g: G, lmax: usize) -> Self {
        let gl = legendre_nodes(2 * lmax + 64);
        let mut coeffs = Vec::new();
        let vals: Vec<(f64, Vec<f64>)> = gl
            .iter()
            .map(|&(x, w)| {
                let mu = 0.5 * (x + 1.0);
                (0.5 * w * g(mu), legendre_all(mu, lmax))
            })
            .collect();
        for l in (0..=lmax).step_by(2) {
            let c = (2 * l + 1) as f64 * vals.iter().map(|(w, p)| w * p[l]).sum::<f64>();
            coeffs.push((l, c));
        }
        LegendreHemisphere { coeffs }
    }

    pub fn value(&self, theta: f64, t: f64) -> f64 {
        let lmax = self.coeffs.last().map(|c| c.0).unwrap_or(0);
        let p = legendre_all(theta.cos(), lmax);
        self.coeffs.iter().map(|&(l, c)| c * (-((l * (l + 1)) as f64) * t / 2.0).exp() * p[l]).sum()
    }

    /// `∂²_θ P_tg` at the pole, i.e. `Hess P_tg(e, e)` for any unit `e` there.
    pub fn pole_hessian(&self, t: f64) -> f64 {
        self.coeffs
            .iter()
            .map(|&(l, c)| {
                let ll = (l * (l + 1)) as f64;
                c * (-ll * t / 2.0).exp() * (-ll / 2.0)
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Differentiation

fn richardson<F: Fn(f64) -> Result<f64>>(h: f64, d: F) -> Result<f64> {
    let a = d(h)?;
    let b = d(0.5 * h)?;
    Ok((4.0 * b - a) / 3.0)
}

fn check_step<const D: usize, O: NeumannOracle<D> + ?Sized>(oracle: &O, h: f64) -> Result<()> {
    if 0.5 * h < oracle.min_step() {
        return Err(Error::Config(format!("difference step {h} is below the oracle resolution {}", oracle.min_step())));
    }
    Ok(())
}

/// Chart partial derivatives `∂_i P_tf(x)`.
pub fn oracle_chart_gradient<const D: usize, O: NeumannOracle<D> + ?Sized>(oracle: &O, x: &Vector<D>, t: f64, h: f64) -> Result<Vector<D>> {
    check_step(oracle, h)?;
    let mut g = Vector::<D>::zeros();
    for i in 0..D {
        g[i] = richardson(h, |s| {
            let mut p = *x;
            let mut m = *x;
            p[i] += s;
            m[i] -= s;
            Ok((oracle.value(&p, t)? - oracle.value(&m, t)?) / (2.0 * s))
        })?;
    }
    Ok(g)
}

/// Chart second partials `∂_i∂_j P_tf(x)`.
pub fn oracle_chart_hessian<const D: usize, O: NeumannOracle<D> + ?Sized>(oracle: &O, x: &Vector<D>, t: f64, h: f64) -> Result<Matrix<D>> {
    check_step(oracle, h)?;
    let mut hm = Matrix::<D>::zeros();
    let f0 = oracle.value(x, t)?;
    for i in 0..D {
        for j in i..D {
            let v = richardson(h, |s| {
                let shifted = |a: f64, b: f64| -> Result<f64> {
                    let mut p = *x;
                    p[i] += a;
                    p[j] += b;
                    oracle.value(&p, t)
                };
                if i == j {
                    Ok((shifted(s, 0.0)? - 2.0 * f0 + shifted(-s, 0.0)?) / (s * s))
                } else {
                    Ok((shifted(s, s)? - shifted(s, -s)? - shifted(-s, s)? + shifted(-s, -s)?) / (4.0 * s * s))
                }
            })?;
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    Ok(hm)
}

/// Orthonormal frame at `x₀` in which directions `v` are expressed.
pub fn base_frame<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>) -> Matrix<D> {
    if model.is_flat() {
        Matrix::<D>::identity()
    } else {
        sym_inv_sqrt(&model.metric(x))
    }
}

/// `∇P_tf(x)(U₀v)`.
pub fn oracle_grad<const D: usize, M, O>(oracle: &O, model: &M, x: &Vector<D>, v: &Vector<D>, t: f64, h: f64) -> Result<f64>
where
    M: Manifold<D> + ?Sized,
    O: NeumannOracle<D> + ?Sized,
{
    let g = oracle_chart_gradient(oracle, x, t, h)?;
    Ok(g.dot(&(base_frame(model, x) * v)))
}

/// Covariant `Hess P_tf(x)(U₀v, U₀v)`.
pub fn oracle_hess<const D: usize, M, O>(oracle: &O, model: &M, x: &Vector<D>, v: &Vector<D>, t: f64, h: f64) -> Result<f64>
where
    M: Manifold<D> + ?Sized,
    O: NeumannOracle<D> + ?Sized,
{
    let hm = covariant_hessian(oracle, model, x, t, h)?;
    let e = base_frame(model, x) * v;
    Ok((e.transpose() * hm * e)[(0, 0)])
}

/// Chart matrix of the covariant Hessian `∂_ij u − Γ^k_ij ∂_k u`.
pub fn covariant_hessian<const D: usize, M, O>(oracle: &O, model: &M, x: &Vector<D>, t: f64, h: f64) -> Result<Matrix<D>>
where
    M: Manifold<D> + ?Sized,
    O: NeumannOracle<D> + ?Sized,
{
    let mut hm = oracle_chart_hessian(oracle, x, t, h)?;
    if !model.is_flat() {
        let g = oracle_chart_gradient(oracle, x, t, h)?;
        let gam = model.christoffel(x);
        for k in 0..D {
            hm -= gam[k] * g[k];
        }
    }
    Ok(hm)
}

/// Route for `LP_tf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LfRoute {
    /// `Δu + ⟨Z, ∇u⟩` by spatial differences.
    Spatial,
    /// `2∂_t u` by temporal differences.
    Temporal,
}

/// `LP_tf(x)`.
pub fn oracle_lf<const D: usize, M, O>(oracle: &O, model: &M, x: &Vector<D>, t: f64, h: f64, route: LfRoute) -> Result<f64>
where
    M: Manifold<D> + ?Sized,
    O: NeumannOracle<D> + ?Sized,
{
    match route {
        LfRoute::Spatial => {
            let hm = covariant_hessian(oracle, model, x, t, h)?;
            let gi = model.metric_inv(x);
            let lap = gi.component_mul(&hm).sum();
            let drift = if model.has_drift() { oracle_chart_gradient(oracle, x, t, h)?.dot(&model.drift(x)) } else { 0.0 };
            Ok(lap + drift)
        }
        LfRoute::Temporal => {
            if t <= h {
                return Err(Error::Config(format!("temporal route needs t > {h}")));
            }
            let d = richardson(h, |s| Ok((oracle.value(x, t + s)? - oracle.value(x, t - s)?) / (2.0 * s)))?;
            Ok(2.0 * d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Disk, HalfLine};

    #[test]
    fn image_half_line_square_is_exact() {
        let m = HalfLine::new();
        let o = ImageOracle::new(TestFn::Sq, &m);
        let x = Vector::<1>::new(0.3);
        assert!((o.value(&x, 1.0).unwrap() - 1.09).abs() < 1e-10);
        assert_eq!(o.value(&x, 0.0).unwrap(), 0.09);
        let v = Vector::<1>::new(1.0);
        assert!((oracle_grad(&o, &m, &x, &v, 1.0, 1e-2).unwrap() - 0.6).abs() < 1e-8);
        assert!((oracle_hess(&o, &m, &x, &v, 1.0, 1e-2).unwrap() - 2.0).abs() < 1e-8);
        assert!((oracle_lf(&o, &m, &x, 1.0, 1e-2, LfRoute::Spatial).unwrap() - 2.0).abs() < 1e-8);
        assert!((oracle_lf(&o, &m, &x, 1.0, 1e-2, LfRoute::Temporal).unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn image_kernel_matches_independent_quadrature() {
        // P_t f(x) = ∫₀^∞ (φ_t(x−y) + φ_t(x+y)) f(y) dy by a fine trapezoid rule
        let m = HalfLine::new();
        let f = TestFn::Gauss(0.7);
        let o = ImageOracle::new(f, &m);
        let (x, t) = (0.4, 0.8);
        let n = 200_000;
        let ymax = 12.0;
        let dy = ymax / n as f64;
        let phi = |z: f64| (-(z * z) / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
        let mut s = 0.0;
        for i in 0..=n {
            let y = i as f64 * dy;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * (phi(x - y) + phi(x + y)) * (-0.7 * y * y).exp();
        }
        s *= dy;
        assert!((o.value(&Vector::<1>::new(x), t).unwrap() - s).abs() < 1e-10);
    }

    #[test]
    fn image_neumann_condition() {
        let m = HalfSpace::<2>::new();
        let o = ImageOracle::new(TestFn::Gauss(0.3), &m);
        let x = Vector::<2>::new(0.0, 0.4);
        let g = oracle_chart_gradient(&o, &x, 0.5, 1e-3).unwrap();
        assert!(g[0].abs() < 1e-10);
    }

    #[test]
    fn ou_image_linear_tangential() {
        let m = HalfSpace::<2>::with_ou(1.0);
        let o = ImageOracle::new(TestFn::Coord(1), &m);
        let x = Vector::<2>::new(0.3, 0.8);
        let val = o.value(&x, 1.0).unwrap();
        assert!((val - 0.8 * (-0.5_f64).exp()).abs() < 1e-10);
        let v = Vector::<2>::new(0.0, 1.0);
        assert!(oracle_hess(&o, &m, &x, &v, 1.0, 1e-2).unwrap().abs() < 1e-8);
        let sp = oracle_lf(&o, &m, &x, 1.0, 1e-2, LfRoute::Spatial).unwrap();
        let tp = oracle_lf(&o, &m, &x, 1.0, 1e-2, LfRoute::Temporal).unwrap();
        assert!((sp - tp).abs() < 1e-6);
    }

    #[test]
    fn grid_conserves_mass_and_matches_image() {
        let o = GridOracle::<1>::half_line(TestFn::Gauss(1.0), 0.5, 1.0, 800, 1e-3).unwrap();
        let u0 = o.initial();
        let u1 = o.slice(1.0).unwrap();
        assert!((o.grid.mass(&u0) - o.grid.mass(&u1)).abs() < 1e-10);
        let img = ImageOracle::new(TestFn::Gauss(1.0), &HalfLine::new());
        let x = Vector::<1>::new(0.5);
        assert!((o.value(&x, 1.0).unwrap() - img.value(&x, 1.0).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn grid_neumann_residual() {
        let o = GridOracle::<1>::half_line(TestFn::Gauss(1.0), 0.5, 1.0, 800, 1e-3).unwrap();
        let (a, _) = o.grid.boundary_slopes(&o.slice(1.0).unwrap());
        let h = GridOracle::<2>::hemisphere(TestFn::CosTheta, 800, 1e-3).unwrap();
        let (pole, equator) = h.grid.boundary_slopes(&h.slice(0.5).unwrap());
        // one-sided stencil error is O(h³) for even data; h ≈ 1.1e-2 on the half-line
        assert!(a.abs() < 1e-6, "{a}");
        assert!(pole.abs() < 1e-8 && equator.abs() < 1e-8, "{pole} {equator}");
    }

    #[test]
    fn grid_semigroup_property() {
        let o = GridOracle::<2>::hemisphere(TestFn::CosTheta, 400, 1e-3).unwrap();
        let ut = o.slice(0.2).unwrap();
        let direct = o.grid.evolve(&o.initial(), 0.5).unwrap();
        let composed = o.grid.evolve(&ut, 0.3).unwrap();
        let worst = direct.iter().zip(&composed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6);
    }

    #[test]
    fn hemisphere_grid_agrees_with_legendre_series() {
        let o = GridOracle::<2>::hemisphere(TestFn::CosTheta, 800, 5e-4).unwrap();
        let leg = LegendreHemisphere::new(|mu| mu, 160);
        for th in [0.0, 0.4, 1.0, 1.5] {
            let g = o.value_at(th, 0.5).unwrap();
            assert!((g - leg.value(th, 0.5)).abs() < 1e-5, "θ = {th}");
        }
        let hess = oracle_hess(&o, &Hemisphere, &Vector::<2>::zeros(), &Vector::<2>::new(1.0, 0.0), 0.5, 2e-2).unwrap();
        assert!((hess - leg.pole_hessian(0.5)).abs() < 1e-4);
    }

    #[test]
    fn disk_grid_rejects_non_radial_and_small_steps() {
        assert!(GridOracle::<2>::disk(TestFn::Coord(0), 1.0, 100, 1e-3).is_err());
        let o = GridOracle::<2>::disk(TestFn::Sq, 1.0, 100, 1e-3).unwrap();
        let x = Vector::<2>::new(0.2, 0.1);
        assert!(oracle_hess(&o, &Disk::new(1.0), &x, &Vector::<2>::new(1.0, 0.0), 0.3, 1e-3).is_err());
    }
}
