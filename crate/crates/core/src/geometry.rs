//! Model manifolds with boundary: chart tensors, boundary data and curvature constants,
//! plus finite-difference self-validation of everything the simulation consumes.
//!
//! Conventions: `R(u,v)w = ∇_u∇_v w − ∇_v∇_u w − ∇_{[u,v]}w`, `Ric(v,v) = Σ⟨R(e_i,v)v, e_i⟩`,
//! `N` is the inward unit normal, `Ric_Z = Ric − ∇Z`.
//!
//! Array layouts:
//! - Christoffels `gamma[k][(i, j)] = Γ^k_ij`
//! - Riemann `r[l][i][j][k] = R^l_ijk` with `R(∂_i, ∂_j)∂_k = R^l_ijk ∂_l`
//! - `grad_normal()[(i, j)] = ∇_j N^i`, `grad_drift()[(i, j)] = ∇_j Z^i`
//! - `hess_normal()[i][(k, j)] = ∇_k ∇_j N^i`, so `(∇²N)(X, Y) = X^k Y^j ∇_k∇_j N`

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngExt};
use serde::Serialize;

use crate::linalg::{sym_eigenvalues, sym_inv_sqrt, Matrix, Vector};
use crate::Error;

pub type Christoffel<const D: usize> = [Matrix<D>; D];
pub type Riemann<const D: usize> = [[[[f64; D]; D]; D]; D];

/// Distance below which boundary tensors are evaluated at the projected boundary point.
pub const BOUNDARY_EPS: f64 = 1e-9;

/// Lower bounds and norms declared per catalog model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvatureConstants {
    /// `Ric_Z ≥ K`.
    pub k: f64,
    /// `−∇N ≥ σ` on the full tangent space at boundary points.
    pub sigma: f64,
    /// `II ≥ σ` on boundary-tangent vectors.
    pub sigma_ii: f64,
    /// `|R|_HS ≤ α`.
    pub alpha: f64,
    /// `|d*R + ∇Ric_Z − R(Z)| ≤ β`.
    pub beta: f64,
    /// `|∇²N + R(N)| ≤ γ`.
    pub gamma: f64,
}

impl CurvatureConstants {
    pub fn k_minus(&self) -> f64 {
        (-self.k).max(0.0)
    }
    pub fn sigma_minus(&self) -> f64 {
        (-self.sigma).max(0.0)
    }
}

/// Catalog identifiers accepted in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ModelId {
    HalfLine,
    HalfSpace2,
    HalfSpace3,
    Disk,
    Hemisphere,
}

impl ModelId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::HalfLine => "half_line",
            ModelId::HalfSpace2 => "half_space_2d",
            ModelId::HalfSpace3 => "half_space_3d",
            ModelId::Disk => "disk",
            ModelId::Hemisphere => "hemisphere",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelId::HalfLine => 1,
            ModelId::HalfSpace2 | ModelId::Disk | ModelId::Hemisphere => 2,
            ModelId::HalfSpace3 => 3,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "half_line" => Ok(ModelId::HalfLine),
            "half_space_2d" => Ok(ModelId::HalfSpace2),
            "half_space_3d" => Ok(ModelId::HalfSpace3),
            "disk" => Ok(ModelId::Disk),
            "hemisphere" => Ok(ModelId::Hemisphere),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// A manifold with boundary covered by a single chart.
pub trait Manifold<const D: usize>: Send + Sync {
    fn id(&self) -> ModelId;
    fn metric(&self, x: &Vector<D>) -> Matrix<D>;
    fn christoffel(&self, x: &Vector<D>) -> Christoffel<D>;
    fn riemann(&self, x: &Vector<D>) -> Riemann<D>;
    fn drift(&self, x: &Vector<D>) -> Vector<D>;
    fn grad_drift(&self, x: &Vector<D>) -> Matrix<D>;
    /// `b > 0` inside, `b = 0` on the boundary, `|∇b| = 1` near it.
    fn boundary_fn(&self, x: &Vector<D>) -> f64;
    /// Chart components of the inward unit normal `N = ∇b`.
    fn normal(&self, x: &Vector<D>) -> Vector<D>;
    fn grad_normal(&self, x: &Vector<D>) -> Matrix<D>;
    fn hess_normal(&self, x: &Vector<D>) -> [Matrix<D>; D];
    fn project_to_boundary(&self, x: &Vector<D>) -> Vector<D>;
    /// Maps a point with `b < 0` back into the domain across the boundary.
    fn reflect(&self, x: &Vector<D>) -> Vector<D>;
    /// `(d*R − R(Z) + ∇Ric_Z)^♯(u, v)` in closed form.
    fn dstar_r_term(&self, x: &Vector<D>, u: &Vector<D>, v: &Vector<D>) -> Vector<D>;
    fn constants(&self) -> CurvatureConstants;
    /// `II = c·g` on the boundary when the boundary is umbilic with known `c`.
    fn umbilic_curvature(&self) -> Option<f64>;
    /// Chart points considered valid (a little slack outside the closed domain is tolerated).
    fn in_chart(&self, x: &Vector<D>) -> bool;
    fn is_flat(&self) -> bool;
    fn has_drift(&self) -> bool;
    fn sample_interior(&self, rng: &mut dyn Rng) -> Vector<D>;
    fn sample_boundary(&self, rng: &mut dyn Rng) -> Vector<D>;

    fn metric_inv(&self, x: &Vector<D>) -> Matrix<D> {
        self.metric(x).try_inverse().expect("metric is invertible")
    }

    fn ricci(&self, x: &Vector<D>) -> Matrix<D> {
        let r = self.riemann(x);
        let mut ric = Matrix::<D>::zeros();
        for j in 0..D {
            for k in 0..D {
                ric[(j, k)] = (0..D).map(|i| r[i][i][j][k]).sum();
            }
        }
        ric
    }

    /// Chart matrix of the operator `Ric_Z^♯`, i.e. `g⁻¹Ric − ∇Z`.
    fn ricci_z_operator(&self, x: &Vector<D>) -> Matrix<D> {
        self.metric_inv(x) * self.ricci(x) - self.grad_drift(x)
    }

    /// Itô correction `−½ g^{ij}Γ^k_ij` of the chart drift (per unit time).
    fn ito_correction(&self, x: &Vector<D>) -> Vector<D> {
        if self.is_flat() {
            return Vector::<D>::zeros();
        }
        let gi = self.metric_inv(x);
        let gam = self.christoffel(x);
        Vector::<D>::from_fn(|k, _| -0.5 * gi.component_mul(&gam[k]).sum())
    }
}

fn euclid_sample<const D: usize>(rng: &mut dyn Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// `[0, ∞) × ℝ^{D−1}` with boundary `x₁ = 0`, optionally with drift `Z = −k_ou·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace<const D: usize> {
    pub k_ou: f64,
}

impl<const D: usize> HalfSpace<D> {
    pub fn new() -> Self {
        HalfSpace { k_ou: 0.0 }
    }
    pub fn with_ou(k_ou: f64) -> Self {
        HalfSpace { k_ou }
    }
}

impl<const D: usize> Default for HalfSpace<D> {
    fn default() -> Self {
        Self::new()
    }
}

pub type HalfLine = HalfSpace<1>;

impl<const D: usize> Manifold<D> for HalfSpace<D> {
    fn id(&self) -> ModelId {
        match D {
            1 => ModelId::HalfLine,
            2 => ModelId::HalfSpace2,
            _ => ModelId::HalfSpace3,
        }
    }
    fn metric(&self, _x: &Vector<D>) -> Matrix<D> {
        Matrix::<D>::identity()
    }
    fn metric_inv(&self, _x: &Vector<D>) -> Matrix<D> {
        Matrix::<D>::identity()
    }
    fn christoffel(&self, _x: &Vector<D>) -> Christoffel<D> {
        [Matrix::<D>::zeros(); D]
    }
    fn riemann(&self, _x: &Vector<D>) -> Riemann<D> {
        [[[[0.0; D]; D]; D]; D]
    }
    fn ricci(&self, _x: &Vector<D>) -> Matrix<D> {
        Matrix::<D>::zeros()
    }
    fn drift(&self, x: &Vector<D>) -> Vector<D> {
        -self.k_ou * x
    }
    fn grad_drift(&self, _x: &Vector<D>) -> Matrix<D> {
        -self.k_ou * Matrix::<D>::identity()
    }
    fn boundary_fn(&self, x: &Vector<D>) -> f64 {
        x[0]
    }
    fn normal(&self, _x: &Vector<D>) -> Vector<D> {
        let mut n = Vector::<D>::zeros();
        n[0] = 1.0;
        n
    }
    fn grad_normal(&self, _x: &Vector<D>) -> Matrix<D> {
        Matrix::<D>::zeros()
    }
    fn hess_normal(&self, _x: &Vector<D>) -> [Matrix<D>; D] {
        [Matrix::<D>::zeros(); D]
    }
    fn project_to_boundary(&self, x: &Vector<D>) -> Vector<D> {
        let mut p = *x;
        p[0] = 0.0;
        p
    }
    fn reflect(&self, x: &Vector<D>) -> Vector<D> {
        let mut p = *x;
        p[0] = p[0].abs();
        p
    }
    fn dstar_r_term(&self, _x: &Vector<D>, _u: &Vector<D>, _v: &Vector<D>) -> Vector<D> {
        Vector::<D>::zeros()
    }
    fn constants(&self) -> CurvatureConstants {
        CurvatureConstants { k: self.k_ou, sigma: 0.0, sigma_ii: 0.0, alpha: 0.0, beta: 0.0, gamma: 0.0 }
    }
    fn umbilic_curvature(&self) -> Option<f64> {
        Some(0.0)
    }
    fn in_chart(&self, x: &Vector<D>) -> bool {
        x.iter().all(|v| v.is_finite())
    }
    fn is_flat(&self) -> bool {
        true
    }
    fn has_drift(&self) -> bool {
        self.k_ou != 0.0
    }
    fn ito_correction(&self, _x: &Vector<D>) -> Vector<D> {
        Vector::<D>::zeros()
    }
    fn sample_interior(&self, rng: &mut dyn Rng) -> Vector<D> {
        Vector::<D>::from_fn(|i, _| if i == 0 { euclid_sample::<D>(rng, 0.05, 2.0) } else { euclid_sample::<D>(rng, -2.0, 2.0) })
    }
    fn sample_boundary(&self, rng: &mut dyn Rng) -> Vector<D> {
        Vector::<D>::from_fn(|i, _| if i == 0 { 0.0 } else { euclid_sample::<D>(rng, -2.0, 2.0) })
    }
}

/// Flat disk of radius `r` centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub radius: f64,
}

impl Disk {
    pub fn new(radius: f64) -> Self {
        Disk { radius }
    }
}

fn unit_or_e1(x: &Vector<2>) -> (Vector<2>, f64) {
    let rho = x.norm();
    if rho > 0.0 {
        (x / rho, rho)
    } else {
        (Vector::<2>::new(1.0, 0.0), 0.0)
    }
}

impl Manifold<2> for Disk {
    fn id(&self) -> ModelId {
        ModelId::Disk
    }
    fn metric(&self, _x: &Vector<2>) -> Matrix<2> {
        Matrix::<2>::identity()
    }
    fn metric_inv(&self, _x: &Vector<2>) -> Matrix<2> {
        Matrix::<2>::identity()
    }
    fn christoffel(&self, _x: &Vector<2>) -> Christoffel<2> {
        [Matrix::<2>::zeros(); 2]
    }
    fn riemann(&self, _x: &Vector<2>) -> Riemann<2> {
        [[[[0.0; 2]; 2]; 2]; 2]
    }
    fn ricci(&self, _x: &Vector<2>) -> Matrix<2> {
        Matrix::<2>::zeros()
    }
    fn drift(&self, _x: &Vector<2>) -> Vector<2> {
        Vector::<2>::zeros()
    }
    fn grad_drift(&self, _x: &Vector<2>) -> Matrix<2> {
        Matrix::<2>::zeros()
    }
    fn boundary_fn(&self, x: &Vector<2>) -> f64 {
        self.radius - x.norm()
    }
    fn normal(&self, x: &Vector<2>) -> Vector<2> {
        -unit_or_e1(x).0
    }
    fn grad_normal(&self, x: &Vector<2>) -> Matrix<2> {
        let (e, rho) = unit_or_e1(x);
        let rho = rho.max(1e-300);
        -(Matrix::<2>::identity() - e * e.transpose()) / rho
    }
    fn hess_normal(&self, x: &Vector<2>) -> [Matrix<2>; 2] {
        let (e, rho) = unit_or_e1(x);
        let s = 1.0 / (rho * rho).max(1e-300);
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let mut out = [Matrix::<2>::zeros(); 2];
        for (i, m) in out.iter_mut().enumerate() {
            for k in 0..2 {
                for j in 0..2 {
                    m[(k, j)] = s * (d(i, j) * e[k] + d(i, k) * e[j] + d(j, k) * e[i] - 3.0 * e[i] * e[j] * e[k]);
                }
            }
        }
        out
    }
    fn project_to_boundary(&self, x: &Vector<2>) -> Vector<2> {
        unit_or_e1(x).0 * self.radius
    }
    fn reflect(&self, x: &Vector<2>) -> Vector<2> {
        let (e, rho) = unit_or_e1(x);
        if rho <= self.radius {
            *x
        } else {
            e * (2.0 * self.radius - rho).max(0.0)
        }
    }
    fn dstar_r_term(&self, _x: &Vector<2>, _u: &Vector<2>, _v: &Vector<2>) -> Vector<2> {
        Vector::<2>::zeros()
    }
    fn constants(&self) -> CurvatureConstants {
        CurvatureConstants {
            k: 0.0,
            sigma: 0.0,
            sigma_ii: 1.0 / self.radius,
            alpha: 0.0,
            beta: 0.0,
            gamma: std::f64::consts::SQRT_2 / (self.radius * self.radius),
        }
    }
    fn umbilic_curvature(&self) -> Option<f64> {
        Some(1.0 / self.radius)
    }
    fn in_chart(&self, x: &Vector<2>) -> bool {
        x.iter().all(|v| v.is_finite()) && x.norm() < 2.0 * self.radius
    }
    fn is_flat(&self) -> bool {
        true
    }
    fn has_drift(&self) -> bool {
        false
    }
    fn ito_correction(&self, _x: &Vector<2>) -> Vector<2> {
        Vector::<2>::zeros()
    }
    fn sample_interior(&self, rng: &mut dyn Rng) -> Vector<2> {
        let rho = self.radius * (0.05 + 0.9 * rng.random::<f64>());
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        Vector::<2>::new(rho * phi.cos(), rho * phi.sin())
    }
    fn sample_boundary(&self, rng: &mut dyn Rng) -> Vector<2> {
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        Vector::<2>::new(self.radius * phi.cos(), self.radius * phi.sin())
    }
}

/// Upper closed hemisphere of the unit sphere in stereographic coordinates from the
/// south pole: the chart is the closed unit disk, `g = λ²I`, `λ = 2/(1+|u|²)`,
/// the polar angle is `θ = 2 arctan|u|` and the boundary is the equator `|u| = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Hemisphere;

impl Hemisphere {
    pub fn lambda(x: &Vector<2>) -> f64 {
        2.0 / (1.0 + x.norm_squared())
    }

    /// Polar angle measured from the pole.
    pub fn polar_angle(x: &Vector<2>) -> f64 {
        2.0 * x.norm().atan()
    }

    /// Chart point at polar angle `theta` and azimuth `phi`.
    pub fn chart_point(theta: f64, phi: f64) -> Vector<2> {
        let r = (0.5 * theta).tan();
        Vector::<2>::new(r * phi.cos(), r * phi.sin())
    }

    /// Chart components of the unit vectors `e_θ` (and `N = −e_θ`), with `P = I − N⊗N♭`.
    fn normal_frame(x: &Vector<2>) -> (Vector<2>, f64) {
        let (e, _) = unit_or_e1(x);
        let lam = Self::lambda(x);
        (-e / lam, Self::polar_angle(x))
    }
}

impl Manifold<2> for Hemisphere {
    fn id(&self) -> ModelId {
        ModelId::Hemisphere
    }
    fn metric(&self, x: &Vector<2>) -> Matrix<2> {
        let l = Self::lambda(x);
        Matrix::<2>::identity() * (l * l)
    }
    fn metric_inv(&self, x: &Vector<2>) -> Matrix<2> {
        let l = Self::lambda(x);
        Matrix::<2>::identity() / (l * l)
    }
    fn christoffel(&self, x: &Vector<2>) -> Christoffel<2> {
        // Conformal metric e^{2φ}δ with ∂φ = −λu.
        let lam = Self::lambda(x);
        let dphi = -lam * x;
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let mut g = [Matrix::<2>::zeros(); 2];
        for (k, m) in g.iter_mut().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    m[(i, j)] = d(i, k) * dphi[j] + d(j, k) * dphi[i] - d(i, j) * dphi[k];
                }
            }
        }
        g
    }
    fn riemann(&self, x: &Vector<2>) -> Riemann<2> {
        let g = self.metric(x);
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let mut r = [[[[0.0; 2]; 2]; 2]; 2];
        for (l, rl) in r.iter_mut().enumerate() {
            for (i, rli) in rl.iter_mut().enumerate() {
                for (j, rlij) in rli.iter_mut().enumerate() {
                    for (k, v) in rlij.iter_mut().enumerate() {
                        *v = g[(j, k)] * d(l, i) - g[(i, k)] * d(l, j);
                    }
                }
            }
        }
        r
    }
    fn ricci(&self, x: &Vector<2>) -> Matrix<2> {
        self.metric(x)
    }
    fn ricci_z_operator(&self, _x: &Vector<2>) -> Matrix<2> {
        Matrix::<2>::identity()
    }
    fn drift(&self, _x: &Vector<2>) -> Vector<2> {
        Vector::<2>::zeros()
    }
    fn grad_drift(&self, _x: &Vector<2>) -> Matrix<2> {
        Matrix::<2>::zeros()
    }
    fn boundary_fn(&self, x: &Vector<2>) -> f64 {
        FRAC_PI_2 - Self::polar_angle(x)
    }
    fn normal(&self, x: &Vector<2>) -> Vector<2> {
        Self::normal_frame(x).0
    }
    fn grad_normal(&self, x: &Vector<2>) -> Matrix<2> {
        // ∇N(X) = −cot θ · P X
        let (n, theta) = Self::normal_frame(x);
        let g = self.metric(x);
        let p = Matrix::<2>::identity() - n * (g * n).transpose();
        -p / theta.tan()
    }
    fn hess_normal(&self, x: &Vector<2>) -> [Matrix<2>; 2] {
        // (∇²N)(X,Y) = −csc²θ⟨N,X⟩PY − cot²θ(⟨N,Y⟩PX + ⟨PX,Y⟩N)
        let (n, theta) = Self::normal_frame(x);
        let g = self.metric(x);
        let nflat = g * n;
        let p = Matrix::<2>::identity() - n * nflat.transpose();
        let pflat = g * p;
        let csc2 = 1.0 / theta.sin().powi(2);
        let cot2 = 1.0 / theta.tan().powi(2);
        let mut out = [Matrix::<2>::zeros(); 2];
        for (i, m) in out.iter_mut().enumerate() {
            for k in 0..2 {
                for j in 0..2 {
                    m[(k, j)] = -csc2 * nflat[k] * p[(i, j)] - cot2 * (nflat[j] * p[(i, k)] + pflat[(j, k)] * n[i]);
                }
            }
        }
        out
    }
    fn project_to_boundary(&self, x: &Vector<2>) -> Vector<2> {
        unit_or_e1(x).0
    }
    fn reflect(&self, x: &Vector<2>) -> Vector<2> {
        let r2 = x.norm_squared();
        if r2 <= 1.0 {
            *x
        } else {
            x / r2
        }
    }
    fn dstar_r_term(&self, _x: &Vector<2>, _u: &Vector<2>, _v: &Vector<2>) -> Vector<2> {
        Vector::<2>::zeros()
    }
    fn constants(&self) -> CurvatureConstants {
        CurvatureConstants { k: 1.0, sigma: 0.0, sigma_ii: 0.0, alpha: 1.0, beta: 0.0, gamma: 2.0 / 3.0_f64.sqrt() }
    }
    fn umbilic_curvature(&self) -> Option<f64> {
        Some(0.0)
    }
    fn in_chart(&self, x: &Vector<2>) -> bool {
        x.iter().all(|v| v.is_finite()) && x.norm() < 1e6
    }
    fn is_flat(&self) -> bool {
        false
    }
    fn has_drift(&self) -> bool {
        false
    }
    fn sample_interior(&self, rng: &mut dyn Rng) -> Vector<2> {
        let theta = 0.05 + (FRAC_PI_2 - 0.1) * rng.random::<f64>();
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        Self::chart_point(theta, phi)
    }
    fn sample_boundary(&self, rng: &mut dyn Rng) -> Vector<2> {
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        Self::chart_point(FRAC_PI_2, phi)
    }
}

// ---------------------------------------------------------------------------
// Tensor contractions

/// `⟨a, b⟩_g`.
pub fn inner<const D: usize>(g: &Matrix<D>, a: &Vector<D>, b: &Vector<D>) -> f64 {
    (g * b).dot(a)
}

/// Matrix of the operator `w ↦ R(u, v)w`.
pub fn curvature_operator<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x: &Vector<D>,
    u: &Vector<D>,
    v: &Vector<D>,
) -> Matrix<D> {
    let r = model.riemann(x);
    let mut out = Matrix::<D>::zeros();
    for l in 0..D {
        for k in 0..D {
            let mut s = 0.0;
            for i in 0..D {
                for j in 0..D {
                    s += r[l][i][j][k] * u[i] * v[j];
                }
            }
            out[(l, k)] = s;
        }
    }
    out
}

/// `R(u, v)w`.
pub fn curvature_apply<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x: &Vector<D>,
    u: &Vector<D>,
    v: &Vector<D>,
    w: &Vector<D>,
) -> Vector<D> {
    curvature_operator(model, x, u, v) * w
}

/// `(d*R − R(Z) + ∇Ric_Z)^♯(u, v)`.
pub fn dstar_r_term<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x: &Vector<D>,
    u: &Vector<D>,
    v: &Vector<D>,
) -> Vector<D> {
    model.dstar_r_term(x, u, v)
}

/// `(∇²N)(u, w)`.
pub fn hess_normal_apply<const D: usize>(hn: &[Matrix<D>; D], u: &Vector<D>, w: &Vector<D>) -> Vector<D> {
    Vector::<D>::from_fn(|i, _| (u.transpose() * hn[i] * w)[(0, 0)])
}

/// Boundary source of the second-order transport: `B(u, w) = (∇²N)(u, w) + R(N, u)w`.
pub fn boundary_source<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x: &Vector<D>,
    u: &Vector<D>,
    w: &Vector<D>,
) -> Vector<D> {
    BoundarySource::at(model, x).apply(u, w)
}

/// `B` with its ingredients precomputed at one point.
pub struct BoundarySource<const D: usize> {
    pub normal: Vector<D>,
    pub hess_normal: [Matrix<D>; D],
    pub riemann: Riemann<D>,
}

impl<const D: usize> BoundarySource<D> {
    pub fn at<M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>) -> Self {
        BoundarySource { normal: model.normal(x), hess_normal: model.hess_normal(x), riemann: model.riemann(x) }
    }

    pub fn apply(&self, u: &Vector<D>, w: &Vector<D>) -> Vector<D> {
        let n = &self.normal;
        let mut out = hess_normal_apply(&self.hess_normal, u, w);
        for l in 0..D {
            for i in 0..D {
                for j in 0..D {
                    for k in 0..D {
                        out[l] += self.riemann[l][i][j][k] * n[i] * u[j] * w[k];
                    }
                }
            }
        }
        out
    }
}

/// Orthonormal frame `g^{-1/2}` at `x` (columns are chart components).
pub fn orthonormal_frame<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>) -> Matrix<D> {
    sym_inv_sqrt(&model.metric(x))
}

/// `|R|_HS(x) = sup_{|a|,|b|≤1} |e ↦ R(e, a)b|_HS`, estimated over `samples` random unit pairs
/// plus frame pairs.
pub fn riemann_hs_norm<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x: &Vector<D>,
    rng: &mut dyn Rng,
    samples: usize,
) -> f64 {
    let e = orthonormal_frame(model, x);
    let g = model.metric(x);
    let eval = |a: &Vector<D>, b: &Vector<D>| -> f64 {
        let (ua, ub) = (e * a, e * b);
        let mut hs = 0.0;
        for i in 0..D {
            let ei = e.column(i).into_owned();
            let r = curvature_apply(model, x, &ei, &ua, &ub);
            hs += inner(&g, &r, &r);
        }
        hs.sqrt()
    };
    let mut best = 0.0_f64;
    for i in 0..D {
        for j in 0..D {
            let a = Vector::<D>::from_fn(|k, _| if k == i { 1.0 } else { 0.0 });
            let b = Vector::<D>::from_fn(|k, _| if k == j { 1.0 } else { 0.0 });
            best = best.max(eval(&a, &b));
        }
    }
    for _ in 0..samples {
        let a = random_unit::<D>(rng);
        let b = random_unit::<D>(rng);
        best = best.max(eval(&a, &b));
    }
    best
}

/// Sup over unit `(u, w)` of a vector-valued bilinear map given in chart form, measured in `g`.
pub fn bilinear_sup<const D: usize, M: Manifold<D> + ?Sized, F>(
    model: &M,
    x: &Vector<D>,
    rng: &mut dyn Rng,
    samples: usize,
    f: F,
) -> f64
where
    F: Fn(&Vector<D>, &Vector<D>) -> Vector<D>,
{
    let e = orthonormal_frame(model, x);
    let g = model.metric(x);
    let eval = |a: &Vector<D>, b: &Vector<D>| {
        let r = f(&(e * a), &(e * b));
        inner(&g, &r, &r).sqrt()
    };
    let mut best = 0.0_f64;
    if D == 2 {
        let m = 180;
        for p in 0..m {
            for q in 0..m {
                let (tp, tq) = (std::f64::consts::TAU * p as f64 / m as f64, std::f64::consts::TAU * q as f64 / m as f64);
                let a = Vector::<D>::from_fn(|k, _| if k == 0 { tp.cos() } else { tp.sin() });
                let b = Vector::<D>::from_fn(|k, _| if k == 0 { tq.cos() } else { tq.sin() });
                best = best.max(eval(&a, &b));
            }
        }
    }
    for _ in 0..samples {
        let a = random_unit::<D>(rng);
        let b = random_unit::<D>(rng);
        best = best.max(eval(&a, &b));
    }
    best
}

fn random_unit<const D: usize>(rng: &mut dyn Rng) -> Vector<D> {
    loop {
        let v = Vector::<D>::from_fn(|_, _| 2.0 * rng.random::<f64>() - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference reconstructions

fn fd_partial<const D: usize, T, F>(x: &Vector<D>, k: usize, h: f64, f: F) -> T
where
    F: Fn(&Vector<D>) -> T,
    T: std::ops::Sub<Output = T> + std::ops::Div<f64, Output = T>,
{
    let mut xp = *x;
    let mut xm = *x;
    xp[k] += h;
    xm[k] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Christoffels from central differences of the metric.
pub fn fd_christoffel<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>, h: f64) -> Christoffel<D> {
    let dg: Vec<Matrix<D>> = (0..D).map(|k| fd_partial(x, k, h, |y| model.metric(y))).collect();
    let gi = model.metric_inv(x);
    let mut out = [Matrix::<D>::zeros(); D];
    for (k, m) in out.iter_mut().enumerate() {
        for i in 0..D {
            for j in 0..D {
                let mut s = 0.0;
                for l in 0..D {
                    s += gi[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                }
                m[(i, j)] = 0.5 * s;
            }
        }
    }
    out
}

/// Riemann tensor from central differences of the (analytic) Christoffels.
pub fn fd_riemann<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>, h: f64) -> Riemann<D> {
    let gam = model.christoffel(x);
    let dgam: Vec<Christoffel<D>> = (0..D)
        .map(|a| {
            let mut xp = *x;
            let mut xm = *x;
            xp[a] += h;
            xm[a] -= h;
            let (gp, gm) = (model.christoffel(&xp), model.christoffel(&xm));
            let mut out = [Matrix::<D>::zeros(); D];
            for k in 0..D {
                out[k] = (gp[k] - gm[k]) / (2.0 * h);
            }
            out
        })
        .collect();
    let mut r = [[[[0.0; D]; D]; D]; D];
    for l in 0..D {
        for i in 0..D {
            for j in 0..D {
                for k in 0..D {
                    let mut s = dgam[i][l][(j, k)] - dgam[j][l][(i, k)];
                    for m in 0..D {
                        s += gam[l][(i, m)] * gam[m][(j, k)] - gam[l][(j, m)] * gam[m][(i, k)];
                    }
                    r[l][i][j][k] = s;
                }
            }
        }
    }
    r
}

/// `∇_j N^i` from central differences of the chart normal.
pub fn fd_grad_normal<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>, h: f64) -> Matrix<D> {
    let gam = model.christoffel(x);
    let n = model.normal(x);
    let mut out = Matrix::<D>::zeros();
    for j in 0..D {
        let dn: Vector<D> = fd_partial(x, j, h, |y| model.normal(y));
        for i in 0..D {
            let mut s = dn[i];
            for m in 0..D {
                s += gam[i][(j, m)] * n[m];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// `∇_k∇_j N^i` from central differences of the analytic `∇N`.
pub fn fd_hess_normal<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>, h: f64) -> [Matrix<D>; D] {
    let gam = model.christoffel(x);
    let a = model.grad_normal(x);
    let mut out = [Matrix::<D>::zeros(); D];
    for k in 0..D {
        let da: Matrix<D> = fd_partial(x, k, h, |y| model.grad_normal(y));
        for i in 0..D {
            for j in 0..D {
                let mut s = da[(i, j)];
                for m in 0..D {
                    s += gam[i][(k, m)] * a[(m, j)] - gam[m][(k, j)] * a[(i, m)];
                }
                out[i][(k, j)] = s;
            }
        }
    }
    out
}

/// `(d*R − R(Z) + ∇Ric_Z)^♯(u, v)` rebuilt from central differences of `Ric_Z`, with
/// `⟨∇Ric_Z(u,v), w⟩ = (∇_u Ric_Z)(v, w)` and `R(Z)(u,v) = R(Z,u)v`.
pub fn fd_dstar_r_term<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x: &Vector<D>,
    u: &Vector<D>,
    v: &Vector<D>,
    h: f64,
) -> Vector<D> {
    let ricz_cov = |y: &Vector<D>| -> (Matrix<D>, Matrix<D>) {
        let g = model.metric(y);
        let gz = model.grad_drift(y);
        // (Ric_Z)_ij = Ric_ij − g_jm ∇_i Z^m
        let rz = model.ricci(y) - (g * gz).transpose();
        (model.ricci(y), rz)
    };
    let gam = model.christoffel(x);
    let (ric0, rz0) = ricz_cov(x);
    // covariant derivative tensors nabla[k][(i,j)] = ∇_k T_ij
    let cov = |t0: &Matrix<D>, which: usize| -> Vec<Matrix<D>> {
        (0..D)
            .map(|k| {
                let dt: Matrix<D> = fd_partial(x, k, h, |y| {
                    let (a, b) = ricz_cov(y);
                    if which == 0 {
                        a
                    } else {
                        b
                    }
                });
                Matrix::<D>::from_fn(|i, j| {
                    let mut s = dt[(i, j)];
                    for m in 0..D {
                        s -= gam[m][(k, i)] * t0[(m, j)] + gam[m][(k, j)] * t0[(i, m)];
                    }
                    s
                })
            })
            .collect()
    };
    let nric = cov(&ric0, 0);
    let nrz = cov(&rz0, 1);
    let gi = model.metric_inv(x);
    // covector c_w = ⟨T(u,v), w⟩
    let mut c = Vector::<D>::zeros();
    for w in 0..D {
        let mut s = 0.0;
        for a in 0..D {
            for b in 0..D {
                // d*R: (∇_w Ric)(u, v) − (∇_v Ric)(w, u)
                s += nric[w][(a, b)] * u[a] * v[b];
                s -= v[a] * nric[a][(w, b)] * u[b];
                // ∇Ric_Z: (∇_u Ric_Z)(v, w)
                s += u[a] * nrz[a][(b, w)] * v[b];
            }
        }
        c[w] = s;
    }
    let z = model.drift(x);
    gi * c - curvature_apply(model, x, &z, u, v)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub worst_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub model: ModelId,
    pub points: usize,
    pub checks: Vec<InvariantCheck>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
    pub fn check(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Acc {
    worst: f64,
    tol: f64,
}

/// Validates the analytic tensors of `model` at the given chart points.
///
/// Points with `|b(x)| ≤ BOUNDARY_EPS` are treated as boundary points. Algebraic identities
/// use `tol`; finite-difference reconstructions use `max(tol, 1e-6)`.
pub fn validate_geometry<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    points: &[Vector<D>],
    tol: f64,
    rng: &mut dyn Rng,
) -> Result<ValidationReport, Error> {
    use std::collections::BTreeMap;
    let fd_tol = tol.max(1e-6);
    let h = 1e-4;
    let c = model.constants();
    let mut acc: BTreeMap<&'static str, Acc> = BTreeMap::new();
    let mut record = |name: &'static str, res: f64, t: f64| {
        let e = acc.entry(name).or_insert(Acc { worst: 0.0, tol: t });
        if res.is_nan() {
            e.worst = f64::INFINITY;
        } else {
            e.worst = e.worst.max(res);
        }
    };

    for x in points {
        let g = model.metric(x);
        let sym = (g - g.transpose()).abs().max();
        record("metric_symmetric", sym, tol);
        let ev = sym_eigenvalues(&g);
        if ev[0] <= 0.0 || !ev[0].is_finite() {
            return Err(Error::Geometry(format!("metric not positive definite at {:?}", x.as_slice())));
        }
        let on_boundary = model.boundary_fn(x).abs() <= BOUNDARY_EPS;

        let gam = model.christoffel(x);
        let mut gsym = 0.0_f64;
        for m in gam.iter() {
            gsym = gsym.max((m - m.transpose()).abs().max());
        }
        record("christoffel_symmetric", gsym, tol);

        let interior_fd = !on_boundary || model.is_flat() || model.id() == ModelId::Hemisphere;
        if interior_fd {
            let fdg = fd_christoffel(model, x, h);
            let mut r = 0.0_f64;
            for k in 0..D {
                r = r.max((fdg[k] - gam[k]).abs().max());
            }
            record("christoffel_vs_fd_metric", r, fd_tol);

            let rr = model.riemann(x);
            let fr = fd_riemann(model, x, h);
            let mut worst = 0.0_f64;
            for l in 0..D {
                for i in 0..D {
                    for j in 0..D {
                        for k in 0..D {
                            worst = worst.max((rr[l][i][j][k] - fr[l][i][j][k]).abs());
                        }
                    }
                }
            }
            record("riemann_vs_fd_christoffel", worst, fd_tol);
        }

        // Riemann symmetries on the lowered tensor R_{ijkl} = ⟨R(∂_i,∂_j)∂_k, ∂_l⟩.
        let rr = model.riemann(x);
        let low = |i: usize, j: usize, k: usize, l: usize| -> f64 { (0..D).map(|m| g[(l, m)] * rr[m][i][j][k]).sum() };
        let (mut a12, mut a34, mut pair, mut bianchi) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
        for i in 0..D {
            for j in 0..D {
                for k in 0..D {
                    for l in 0..D {
                        a12 = a12.max((low(i, j, k, l) + low(j, i, k, l)).abs());
                        a34 = a34.max((low(i, j, k, l) + low(i, j, l, k)).abs());
                        pair = pair.max((low(i, j, k, l) - low(k, l, i, j)).abs());
                    }
                    for m in 0..D {
                        let b = rr[m][i][j][k] + rr[m][j][k][i] + rr[m][k][i][j];
                        bianchi = bianchi.max(b.abs());
                    }
                }
            }
        }
        record("riemann_antisymmetry_12", a12, tol);
        record("riemann_antisymmetry_34", a34, tol);
        record("riemann_pair_symmetry", pair, tol);
        record("bianchi_first", bianchi, tol);

        let ric = model.ricci(x);
        let mut contracted = Matrix::<D>::zeros();
        for j in 0..D {
            for k in 0..D {
                contracted[(j, k)] = (0..D).map(|i| rr[i][i][j][k]).sum();
            }
        }
        record("ricci_contraction", (ric - contracted).abs().max(), tol);

        // Ric_Z ≥ K: eigenvalues of E^T (g A) E with E = g^{-1/2}, A = Ric_Z^♯.
        let e = orthonormal_frame(model, x);
        let a = model.ricci_z_operator(x);
        let frame_ricz = e.transpose() * g * a * e;
        let ev = sym_eigenvalues(&frame_ricz);
        record("ricci_z_lower_bound", (c.k - ev[0]).max(0.0), tol.max(1e-8));

        let hs = riemann_hs_norm(model, x, rng, 64);
        record("riemann_hs_bound", (hs - c.alpha).max(0.0), tol.max(1e-8));

        let mut ds_worst = 0.0_f64;
        let mut ds_fd = 0.0_f64;
        for _ in 0..4 {
            let (u, v) = (random_unit::<D>(rng), random_unit::<D>(rng));
            let (eu, ev2) = (e * u, e * v);
            let t = model.dstar_r_term(x, &eu, &ev2);
            ds_worst = ds_worst.max(inner(&g, &t, &t).sqrt());
            if interior_fd {
                let f = fd_dstar_r_term(model, x, &eu, &ev2, h);
                ds_fd = ds_fd.max((f - t).abs().max());
            }
        }
        record("dstar_term_bound", (ds_worst - c.beta).max(0.0), tol.max(1e-8));
        if interior_fd {
            record("dstar_term_vs_fd", ds_fd, fd_tol);
        }

        if on_boundary {
            let xb = model.project_to_boundary(x);
            let n = model.normal(&xb);
            record("normal_unit", (inner(&g, &n, &n) - 1.0).abs(), tol);
            let an = model.grad_normal(&xb);
            let nn = an * n;
            record("normal_acceleration_normal", inner(&g, &nn, &n).abs(), tol);
            let fdn = fd_grad_normal(model, &xb, h);
            record("grad_normal_vs_fd", (fdn - an).abs().max(), fd_tol);
            let hn = model.hess_normal(&xb);
            let fhn = fd_hess_normal(model, &xb, h);
            let mut hw = 0.0_f64;
            for i in 0..D {
                hw = hw.max((hn[i] - fhn[i]).abs().max());
            }
            record("hess_normal_vs_fd", hw, fd_tol);

            // −∇N ≥ σ on the full tangent space, II ≥ σ_II on tangential vectors.
            let s = -(e.transpose() * g * an * e);
            let ev = sym_eigenvalues(&((s + s.transpose()) * 0.5));
            record("minus_grad_normal_lower_bound", (c.sigma - ev[0]).max(0.0), tol.max(1e-8));
            let nf = e.transpose() * g * n;
            let p = Matrix::<D>::identity() - nf * nf.transpose();
            let mut ii_low = 0.0_f64;
            let mut umb = 0.0_f64;
            for _ in 0..16 {
                let w = p * random_unit::<D>(rng);
                if w.norm() < 1e-6 {
                    continue;
                }
                let w = w / w.norm();
                let ii = (w.transpose() * s * w)[(0, 0)];
                ii_low = ii_low.max(c.sigma_ii - ii);
                if let Some(kappa) = model.umbilic_curvature() {
                    umb = umb.max((ii - kappa).abs());
                }
            }
            record("second_fundamental_lower_bound", ii_low.max(0.0), tol.max(1e-8));
            if model.umbilic_curvature().is_some() && D > 1 {
                record("second_fundamental_value", umb, tol);
            }
            let bs = BoundarySource::at(model, &xb);
            let gsup = bilinear_sup(model, &xb, rng, 256, |u, w| bs.apply(u, w));
            record("boundary_source_bound", (gsup - c.gamma).max(0.0), tol.max(1e-8));
        }
    }

    let checks = acc
        .into_iter()
        .map(|(name, a)| InvariantCheck { name: name.to_string(), worst_residual: a.worst, tolerance: a.tol, pass: a.worst <= a.tol })
        .collect();
    Ok(ValidationReport { model: model.id(), points: points.len(), checks })
}

/// Interior and boundary sample points for validation runs.
pub fn sample_points<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    interior: usize,
    boundary: usize,
    rng: &mut dyn Rng,
) -> Vec<Vector<D>> {
    let mut pts: Vec<Vector<D>> = (0..interior).map(|_| model.sample_interior(rng)).collect();
    pts.extend((0..boundary).map(|_| model.sample_boundary(rng)));
    pts
}
