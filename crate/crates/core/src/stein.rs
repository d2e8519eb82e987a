//! Entropy, Fisher information and Stein discrepancy for Gaussian targets
//! `μ = e^{−V}`, `V = K|x|²/2`, with the HSI and log-Sobolev inequalities, the integrated
//! de Bruijn identity and exponential Fisher decay checked numerically.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::oracle::{gauss_hermite_normal, Grid1d, Weight};
use crate::{Error, Result};

/// Candidate measure `ν`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Family {
    /// Centered Gaussian with covariance `c²/K·I`.
    Gaussian { c2: f64 },
    /// `w·N(0, a/K·I) + (1−w)·N(0, b/K·I)`.
    Mixture { c2a: f64, c2b: f64, w: f64 },
}

/// Target `μ` on `ℝⁿ` (or its even restriction to a half-space) and candidate `ν`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasurePair {
    pub n: usize,
    pub k: f64,
    pub family: Family,
    pub half_space: bool,
}

impl MeasurePair {
    pub fn gaussian(n: usize, k: f64, c2: f64) -> Self {
        MeasurePair { n, k, family: Family::Gaussian { c2 }, half_space: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !(self.k > 0.0) {
            return Err(Error::Config(format!("need n ≥ 1 and K > 0, got n = {}, K = {}", self.n, self.k)));
        }
        let ok = match self.family {
            Family::Gaussian { c2 } => c2 > 0.0,
            Family::Mixture { c2a, c2b, w } => c2a > 0.0 && c2b > 0.0 && (0.0..=1.0).contains(&w),
        };
        if !ok {
            return Err(Error::Config(format!("covariance of {:?} is not positive definite", self.family)));
        }
        Ok(())
    }

    /// Components `(weight, c²)` of `ν`.
    fn components(&self) -> Vec<(f64, f64)> {
        match self.family {
            Family::Gaussian { c2 } => vec![(1.0, c2)],
            Family::Mixture { c2a, c2b, w } => vec![(w, c2a), (1.0 - w, c2b)],
        }
    }

    /// `log h(x)` and `∇log h(x) = r(|x|²)·x` for `h = dν/dμ`; returns `(log h, r)`.
    fn log_density_ratio(&self, r2: f64) -> (f64, f64) {
        let k = self.k;
        let n = self.n as f64;
        // ν density relative to μ: Σ w_j c_j^{−n} exp(−K r²/(2c_j²) + K r²/2)
        let terms: Vec<(f64, f64)> = self
            .components()
            .iter()
            .map(|&(w, c2)| (w.ln() - 0.5 * n * c2.ln() - 0.5 * k * r2 / c2 + 0.5 * k * r2, k - k / c2))
            .collect();
        let m = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = terms.iter().map(|t| (t.0 - m).exp()).sum();
        let r = terms.iter().map(|t| (t.0 - m).exp() * t.1).sum::<f64>() / s;
        (m + s.ln(), r)
    }
}

/// `H(ν|μ)`; closed form for the Gaussian family, quadrature otherwise.
pub fn relative_entropy(p: &MeasurePair) -> Result<f64> {
    p.validate()?;
    match p.family {
        Family::Gaussian { c2 } => Ok(0.5 * p.n as f64 * (c2 - 1.0 - c2.ln())),
        Family::Mixture { .. } => quadrature_entropy(p),
    }
}

/// `I(ν|μ)`; closed form `nK(c²−1)²/c²` for the Gaussian family, quadrature otherwise.
pub fn fisher_information(p: &MeasurePair) -> Result<f64> {
    p.validate()?;
    match p.family {
        Family::Gaussian { c2 } => Ok(p.n as f64 * p.k * (c2 - 1.0).powi(2) / c2),
        Family::Mixture { .. } => quadrature_fisher(p),
    }
}

/// `S²(ν|μ)` from the constant kernel `τ_ν = KΣ`; `+∞` when no kernel is available.
pub fn stein_discrepancy_sq(p: &MeasurePair) -> Result<f64> {
    p.validate()?;
    match p.family {
        Family::Gaussian { c2 } => Ok(p.n as f64 * (c2 - 1.0).powi(2)),
        Family::Mixture { .. } => Ok(f64::INFINITY),
    }
}

/// Constant Stein kernel `τ_ν = c²·I`, if one is known.
pub fn stein_kernel(p: &MeasurePair) -> Option<f64> {
    match p.family {
        Family::Gaussian { c2 } => Some(c2),
        Family::Mixture { .. } => None,
    }
}

const QUAD_NODES: usize = 64;

/// `E_ν[g(x)]` by tensor Gauss–Hermite per mixture component.
pub fn expect_nu<G: Fn(&[f64]) -> f64>(p: &MeasurePair, g: G) -> Result<f64> {
    p.validate()?;
    if p.n > 3 {
        return Err(Error::Config("tensor quadrature is limited to n ≤ 3".into()));
    }
    let gh = gauss_hermite_normal(QUAD_NODES);
    let m = gh.len();
    let total_nodes = m.pow(p.n as u32);
    let mut acc = 0.0;
    let mut x = vec![0.0; p.n];
    for (w, c2) in p.components() {
        let s = (c2 / p.k).sqrt();
        for flat in 0..total_nodes {
            let mut idx = flat;
            let mut wt = w;
            let mut skip = false;
            for (i, xi) in x.iter_mut().enumerate() {
                let (z, zw) = gh[idx % m];
                idx /= m;
                if i == 0 && p.half_space {
                    // even restriction: integrate over z₁ > 0 with doubled weight
                    if z < 0.0 {
                        skip = true;
                    }
                    wt *= 2.0 * zw;
                } else {
                    wt *= zw;
                }
                *xi = s * z;
            }
            if !skip {
                acc += wt * g(&x);
            }
        }
    }
    Ok(acc)
}

/// `H = E_ν[log h]` by quadrature.
pub fn quadrature_entropy(p: &MeasurePair) -> Result<f64> {
    expect_nu(p, |x| p.log_density_ratio(x.iter().map(|v| v * v).sum()).0)
}

/// `I = E_ν[|∇log h|²]` by quadrature.
pub fn quadrature_fisher(p: &MeasurePair) -> Result<f64> {
    expect_nu(p, |x| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let r = p.log_density_ratio(r2).1;
        r * r * r2
    })
}

// ---------------------------------------------------------------------------
// Stein identity on polynomial × Gaussian test functions

/// `f(x) = Σ c_m x^m · e^{−a|x|²}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyGauss {
    pub n: usize,
    pub a: f64,
    pub terms: Vec<(Vec<u32>, f64)>,
}

impl PolyGauss {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let p: f64 = self
            .terms
            .iter()
            .map(|(m, c)| c * m.iter().zip(x).map(|(&e, &xi)| xi.powi(e as i32)).product::<f64>())
            .sum();
        p * (-self.a * r2).exp()
    }

    /// `∂_i f`, again of polynomial × Gaussian form.
    pub fn derivative(&self, i: usize) -> PolyGauss {
        let mut terms = Vec::new();
        for (m, c) in &self.terms {
            if m[i] > 0 {
                let mut d = m.clone();
                d[i] -= 1;
                terms.push((d, c * m[i] as f64));
            }
            if self.a != 0.0 {
                let mut u = m.clone();
                u[i] += 1;
                terms.push((u, -2.0 * self.a * c));
            }
        }
        PolyGauss { n: self.n, a: self.a, terms }
    }

    /// Random test function of total degree ≤ `deg`; with `even_first` the first coordinate only
    /// appears to even powers, so the normal derivative vanishes on `x₁ = 0`.
    pub fn random(n: usize, deg: u32, even_first: bool, rng: &mut ChaCha8Rng) -> Self {
        let a = rng.random_range(0.0..0.4);
        let mut terms = Vec::new();
        let count = rng.random_range(2..6);
        while terms.len() < count {
            let m: Vec<u32> = (0..n).map(|_| rng.random_range(0..=deg)).collect();
            if m.iter().sum::<u32>() > deg || (even_first && m[0] % 2 == 1) {
                continue;
            }
            terms.push((m, rng.random_range(-1.0..1.0)));
        }
        PolyGauss { n, a, terms }
    }
}

/// Both sides of `E_ν[⟨∇V, ∇f⟩] = E_ν[⟨τ, Hess f⟩_HS]` for the scalar kernel `τ = τ₀·I`.
pub fn stein_identity_sides(p: &MeasurePair, f: &PolyGauss, tau: f64) -> Result<(f64, f64)> {
    let grads: Vec<PolyGauss> = (0..p.n).map(|i| f.derivative(i)).collect();
    let second: Vec<PolyGauss> = grads.iter().enumerate().map(|(i, g)| g.derivative(i)).collect();
    let k = p.k;
    let lhs = expect_nu(p, |x| grads.iter().enumerate().map(|(i, g)| k * x[i] * g.eval(x)).sum())?;
    let rhs = expect_nu(p, |x| tau * second.iter().map(|g| g.eval(x)).sum::<f64>())?;
    Ok((lhs, rhs))
}

/// Worst relative residual of the Stein identity over `count` random test functions.
pub fn stein_identity_residual(p: &MeasurePair, count: usize, seed: u64) -> Result<f64> {
    let tau = stein_kernel(p).ok_or_else(|| Error::Config("no kernel available for this family".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..count {
        let f = PolyGauss::random(p.n, 4, p.half_space, &mut rng);
        let (l, r) = stein_identity_sides(p, &f, tau)?;
        worst = worst.max((l - r).abs() / l.abs().max(r.abs()).max(1.0));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// HSI

/// `½S² ln(1 + I/(KS²))`, continuous at `S = 0` and `S = ∞`.
pub fn hsi_rhs(s2: f64, i: f64, k: f64) -> f64 {
    if s2 == 0.0 {
        0.0
    } else if s2.is_infinite() {
        i / (2.0 * k)
    } else {
        0.5 * s2 * (i / (k * s2)).ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HsiReport {
    pub pair: MeasurePair,
    pub h: f64,
    pub i: f64,
    pub s2: f64,
    pub hsi_rhs: f64,
    pub lsi_rhs: f64,
    pub hsi_margin: f64,
    pub lsi_margin: f64,
    /// HSI right side strictly below the log-Sobolev right side.
    pub hsi_tighter: bool,
    /// `ν = μ`: both sides vanish.
    pub degenerate: bool,
    pub pass: bool,
}

pub fn check_hsi(p: &MeasurePair) -> Result<HsiReport> {
    if p.k <= 0.0 {
        return Err(Error::Config("HSI needs K > 0".into()));
    }
    let h = relative_entropy(p)?;
    let i = fisher_information(p)?;
    let s2 = stein_discrepancy_sq(p)?;
    if s2 == 0.0 && h > 1e-14 {
        return Err(Error::Assertion("zero Stein discrepancy with positive entropy".into()));
    }
    let hsi = hsi_rhs(s2, i, p.k);
    let lsi = i / (2.0 * p.k);
    let degenerate = h.abs() < 1e-14 && s2 == 0.0;
    let pass = if degenerate { hsi.abs() < 1e-14 } else { hsi - h > 0.0 && lsi - h > 0.0 };
    Ok(HsiReport {
        pair: *p,
        h,
        i,
        s2,
        hsi_rhs: hsi,
        lsi_rhs: lsi,
        hsi_margin: hsi - h,
        lsi_margin: lsi - h,
        hsi_tighter: hsi < lsi,
        degenerate,
        pass,
    })
}

/// HSI reports over a sweep of `c²` values.
pub fn hsi_sweep(c2s: &[f64], k: f64, n: usize) -> Result<Vec<HsiReport>> {
    c2s.iter().map(|&c2| check_hsi(&MeasurePair::gaussian(n, k, c2))).collect()
}

// ---------------------------------------------------------------------------
// Ornstein–Uhlenbeck flow of the density

/// `c²` of `P_t h` for the Gaussian family: `1 + (c² − 1)e^{−Kt}`.
pub fn flowed_c2(c2: f64, k: f64, t: f64) -> f64 {
    1.0 + (c2 - 1.0) * (-k * t).exp()
}

/// `∫₀ᵗ e^{Kr} dr`.
pub fn exp_ramp(k: f64, t: f64) -> f64 {
    (k * t).exp_m1() / k
}

/// Right sides of the Fisher-versus-Stein estimates `I(P_th) ≤ C(t)·e^{−Kt}S²`:
/// `(n²(1/√ρ + α/√K + β/K)², (1/√ρ + nα/√K + nβ/K)²)` with `ρ = ∫₀ᵗe^{Kr}dr`.
pub fn fisher_stein_bounds(n: usize, k: f64, alpha: f64, beta: f64, t: f64, s2: f64) -> (f64, f64) {
    let nf = n as f64;
    let r = 1.0 / exp_ramp(k, t).sqrt();
    let decay = (-k * t).exp() * s2;
    let general = nf * nf * (r + alpha / k.sqrt() + beta / k).powi(2) * decay;
    let flat = (r + nf * alpha / k.sqrt() + nf * beta / k).powi(2) * decay;
    (general, flat)
}

/// 1-D Gaussian pair on the OU grid `[0, X]` with the even restriction of `μ`.
pub struct OuFlow {
    pub grid: Grid1d,
    pub k: f64,
    pub c2: f64,
    norm: f64,
}

impl OuFlow {
    pub fn new(k: f64, c2: f64, n: usize, dt: f64) -> Result<Self> {
        if !(k > 0.0 && c2 > 0.0) {
            return Err(Error::Config("need K > 0 and c² > 0".into()));
        }
        let x = 10.0 * (c2.max(1.0) / k).sqrt();
        let grid = Grid1d::new(0.0, x, n, Weight::Gaussian { k }, dt)?;
        let norm = 0.5 * (2.0 * std::f64::consts::PI / k).sqrt();
        Ok(OuFlow { grid, k, c2, norm })
    }

    /// `h = dν/dμ` on the nodes.
    pub fn initial(&self) -> Vec<f64> {
        let (k, c2) = (self.k, self.c2);
        self.grid.nodes().iter().map(|&x| (0.5 * k * x * x * (1.0 - 1.0 / c2)).exp() / c2.sqrt()).collect()
    }

    /// `∫u dμ`.
    pub fn mass(&self, u: &[f64]) -> f64 {
        self.grid.mass(u) / self.norm
    }

    /// `∫u log u dμ`.
    pub fn entropy(&self, u: &[f64]) -> f64 {
        let v: Vec<f64> = u.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).collect();
        self.grid.mass(&v) / self.norm
    }

    /// `∫|u′|²/u dμ` with midpoint fluxes.
    pub fn fisher(&self, u: &[f64]) -> f64 {
        let h = self.grid.spacing();
        let mut acc = 0.0;
        for i in 0..self.grid.n {
            let xm = (i as f64 + 0.5) * h;
            let d = (u[i + 1] - u[i]) / h;
            let um = 0.5 * (u[i] + u[i + 1]);
            if um > 0.0 {
                acc += h * self.grid.weight.eval(xm) * d * d / um;
            }
        }
        acc / self.norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeBruijnReport {
    pub k: f64,
    pub c2: f64,
    pub h_closed: f64,
    pub h_grid: f64,
    /// `½∫₀^{t_max} I(P_th) dt`.
    pub integral: f64,
    /// Upper bound `I(P_{t_max}h)/(2K)` on the remaining integral.
    pub tail: f64,
    pub t_max: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherDecayPoint {
    pub t: f64,
    pub fisher_grid: f64,
    pub fisher_closed: f64,
    /// `e^{−Kt}I(h)`.
    pub decay_bound: f64,
    /// `(1/√∫₀ᵗe^{Kr}dr)²e^{−Kt}S²`.
    pub stein_bound: f64,
    pub pass: bool,
}

const DEBRUIJN_SLICE: f64 = 0.01;
const DEBRUIJN_TAIL_BUDGET: f64 = 2.5e-3;
const DEBRUIJN_T_CAP: f64 = 60.0;

/// Integrated de Bruijn identity `H = ½∫₀^∞ I(P_th)dt` on the OU grid, with the tail bounded by
/// exponential Fisher decay and `t_max` grown until the tail fits the budget.
pub fn check_debruijn(k: f64, c2: f64, n: usize, dt: f64) -> Result<DeBruijnReport> {
    let flow = OuFlow::new(k, c2, n, dt)?;
    let h_closed = relative_entropy(&MeasurePair::gaussian(1, k, c2))?;
    let mut u = flow.initial();
    let h_grid = flow.entropy(&u);
    let mut t = 0.0;
    let mut integral = 0.0;
    let mut i_prev = flow.fisher(&u);
    let mut t_max = 5.0 / k;
    let mut tail;
    loop {
        while t < t_max - 1e-12 {
            // Simpson on each slice with a midpoint evaluation
            let half = flow.grid.evolve(&u, 0.5 * DEBRUIJN_SLICE)?;
            let i_mid = flow.fisher(&half);
            u = flow.grid.evolve(&half, 0.5 * DEBRUIJN_SLICE)?;
            let i_end = flow.fisher(&u);
            integral += 0.5 * DEBRUIJN_SLICE / 6.0 * (i_prev + 4.0 * i_mid + i_end);
            i_prev = i_end;
            t += DEBRUIJN_SLICE;
        }
        tail = i_prev / (2.0 * k);
        if tail <= DEBRUIJN_TAIL_BUDGET * h_closed.max(1e-300) || t_max >= DEBRUIJN_T_CAP / k {
            break;
        }
        t_max = (2.0 * t_max).min(DEBRUIJN_T_CAP / k);
    }
    let total = integral + 0.5 * tail;
    let rel_error = if h_closed > 0.0 { (total - h_closed).abs() / h_closed } else { total.abs() };
    let pass = if h_closed > 0.0 { rel_error < 0.01 } else { total.abs() < 1e-10 };
    Ok(DeBruijnReport { k, c2, h_closed, h_grid, integral, tail, t_max: t, rel_error, pass })
}

/// Fisher information along the flow on `count` equally spaced times in `(0, t_end]`.
pub fn check_fisher_decay(k: f64, c2: f64, t_end: f64, count: usize, n: usize, dt: f64) -> Result<Vec<FisherDecayPoint>> {
    let flow = OuFlow::new(k, c2, n, dt)?;
    let pair = MeasurePair::gaussian(1, k, c2);
    let i0 = fisher_information(&pair)?;
    let s2 = stein_discrepancy_sq(&pair)?;
    let mut u = flow.initial();
    let mut t = 0.0;
    let step = t_end / count as f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        u = flow.grid.evolve(&u, step)?;
        t += step;
        let fisher_grid = flow.fisher(&u);
        let fisher_closed = fisher_information(&MeasurePair::gaussian(1, k, flowed_c2(c2, k, t)))?;
        let decay_bound = (-k * t).exp() * i0;
        let stein_bound = fisher_stein_bounds(1, k, 0.0, 0.0, t, s2).1;
        let tol = 1e-9 * i0.max(1e-300);
        let pass = fisher_grid <= decay_bound + tol && fisher_closed <= decay_bound + tol && fisher_closed <= stein_bound + tol;
        out.push(FisherDecayPoint { t, fisher_grid, fisher_closed, decay_bound, stein_bound, pass });
    }
    Ok(out)
}

/// `(H, I, S²)` by quadrature for `n = 1..=max_n`, for the linear-in-`n` scaling check.
pub fn tensorization(k: f64, c2: f64, max_n: usize) -> Result<Vec<(usize, f64, f64, f64)>> {
    (1..=max_n)
        .map(|n| {
            let p = MeasurePair::gaussian(n, k, c2);
            Ok((n, quadrature_entropy(&p)?, quadrature_fisher(&p)?, stein_discrepancy_sq(&p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_match_quadrature() {
        for (n, k, c2) in [(1, 1.0, 2.0), (1, 2.0, 0.5), (2, 1.0, 4.0), (3, 2.0, 0.5)] {
            let p = MeasurePair::gaussian(n, k, c2);
            assert!((relative_entropy(&p).unwrap() - quadrature_entropy(&p).unwrap()).abs() < 1e-10);
            assert!((fisher_information(&p).unwrap() - quadrature_fisher(&p).unwrap()).abs() < 1e-10);
        }
        let p = MeasurePair::gaussian(1, 1.0, 2.0);
        assert!((relative_entropy(&p).unwrap() - 0.5 * (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((fisher_information(&MeasurePair::gaussian(3, 2.0, 0.5)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn stein_identity_holds_for_kernel_and_identity() {
        for p in [
            MeasurePair::gaussian(1, 1.0, 2.0),
            MeasurePair::gaussian(2, 1.5, 0.5),
            MeasurePair::gaussian(1, 1.0, 1.0),
            MeasurePair { n: 2, k: 1.0, family: Family::Gaussian { c2: 2.0 }, half_space: true },
        ] {
            assert!(stein_identity_residual(&p, 20, 5).unwrap() < 1e-6);
        }
        // a wrong kernel breaks the identity
        let p = MeasurePair::gaussian(1, 1.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = PolyGauss { n: 1, a: 0.1, terms: vec![(vec![2], 1.0)] };
        let (l, r) = stein_identity_sides(&p, &f, 1.0).unwrap();
        assert!((l - r).abs() > 1e-2);
        let _ = PolyGauss::random(1, 4, false, &mut rng);
    }

    #[test]
    fn hsi_spot_values() {
        let r = check_hsi(&MeasurePair::gaussian(1, 1.0, 2.0)).unwrap();
        assert!((r.h - 0.15343).abs() < 1e-5);
        assert!((r.hsi_rhs - 0.20273).abs() < 1e-5);
        assert!(r.pass && r.hsi_tighter);
        let d = check_hsi(&MeasurePair::gaussian(1, 1.0, 1.0)).unwrap();
        assert!(d.degenerate && d.pass);
    }

    #[test]
    fn mixture_has_no_kernel() {
        let p = MeasurePair { n: 1, k: 1.0, family: Family::Mixture { c2a: 0.5, c2b: 2.0, w: 0.3 }, half_space: false };
        assert!(stein_discrepancy_sq(&p).unwrap().is_infinite());
        let r = check_hsi(&p).unwrap();
        assert!(r.pass && (r.hsi_rhs - r.lsi_rhs).abs() < 1e-15);
        assert!(stein_identity_residual(&p, 1, 0).is_err());
    }

    #[test]
    fn de_bruijn_closes() {
        let r = check_debruijn(1.0, 2.0, 2000, 1e-3).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.h_grid - r.h_closed).abs() < 1e-4);
        assert!(check_debruijn(1.0, 1.0, 400, 1e-3).unwrap().pass);
    }

    #[test]
    fn fisher_decay_and_stein_bounds() {
        let pts = check_fisher_decay(1.0, 2.0, 4.0, 20, 1500, 1e-3).unwrap();
        assert!(pts.iter().all(|p| p.pass));
        for p in &pts {
            assert!((p.fisher_grid - p.fisher_closed).abs() < 1e-3 * p.fisher_closed.max(1e-3));
        }
    }
}
