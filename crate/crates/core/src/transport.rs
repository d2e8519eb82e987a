//! Damped transports and second-order functionals along a path, in base-point (frame)
//! coordinates: `Q⁽ⁿ⁾`, its limit `Q` with vanishing normal part, `Q̃` with its inverse,
//! the Hessian process `W`, and the nested stochastic integral `M`.
//!
//! Frame coordinates pull tensors at `X_t` back through `U_t`: for a chart operator `A`,
//! the frame matrix is `Uᵀ g A U`. Damping factors are applied as exact exponentials,
//! dt-terms before local-time terms.

use crate::geometry::{curvature_apply, BoundarySource, Manifold};
use crate::linalg::{max_abs, op_norm, sym_exp, Matrix, Vector};
use crate::pathsim::{DiffusionPath, StepRecord};
use crate::{Error, Result};

/// Norm beyond which a transport matrix is treated as blown up.
pub const BLOWUP_NORM: f64 = 1e12;
/// Penalty exponent `n·Δl/2` beyond which `e^{−nΔl/2}` is clamped to zero.
pub const PENALTY_CLAMP: f64 = 30.0;
/// Steps between direct re-inversions of `Q̃`.
pub const RESYNC_EVERY: usize = 100;

/// Strength of the normal penalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Finite(f64),
    /// Exact projection onto the tangent space at every contact.
    Limit,
}

/// `Ric_Z` at the start of the step, in frame coordinates.
pub fn ricci_frame<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>, u: &Matrix<D>) -> Matrix<D> {
    let f = u.transpose() * model.metric(x) * model.ricci_z_operator(x) * u;
    (f + f.transpose()) * 0.5
}

/// Boundary data at a contact point, in the frame of the post-step `U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFrame<const D: usize> {
    /// Unit inward normal.
    pub normal: Vector<D>,
    /// Symmetrized `∇N`.
    pub grad_normal: Matrix<D>,
    /// `II^♯ = P_∂(−∇N)P_∂`.
    pub second_fundamental: Matrix<D>,
    /// `P_∂ = I − N⊗N`.
    pub tangential: Matrix<D>,
}

pub fn boundary_frame<const D: usize, M: Manifold<D> + ?Sized>(model: &M, c: &Vector<D>, u: &Matrix<D>) -> BoundaryFrame<D> {
    let g = model.metric(c);
    let ug = u.transpose() * g;
    let n = ug * model.normal(c);
    let n = n / n.norm();
    let gn = ug * model.grad_normal(c) * u;
    let gn = (gn + gn.transpose()) * 0.5;
    let p = Matrix::<D>::identity() - n * n.transpose();
    BoundaryFrame { normal: n, grad_normal: gn, second_fundamental: -(p * gn * p), tangential: p }
}

/// Per-step quantities shared by all transports.
#[derive(Debug, Clone, Copy)]
pub struct StepGeometry<const D: usize> {
    pub dt: f64,
    pub dl: f64,
    pub hit: bool,
    /// `exp(−½ Ric_Z dt)`.
    pub damp: Matrix<D>,
    /// `exp(+½ Ric_Z dt)`.
    pub damp_inv: Matrix<D>,
    pub boundary: Option<BoundaryFrame<D>>,
}

impl<const D: usize> StepGeometry<D> {
    pub fn new<M: Manifold<D> + ?Sized>(model: &M, rec: &StepRecord<D>) -> Self {
        let f = ricci_frame(model, &rec.x_prev, &rec.u_prev);
        let boundary = if rec.hit { Some(boundary_frame(model, &rec.contact, &rec.u)) } else { None };
        StepGeometry {
            dt: rec.dt,
            dl: rec.dl,
            hit: rec.hit,
            damp: sym_exp(&f, -0.5 * rec.dt),
            damp_inv: sym_exp(&f, 0.5 * rec.dt),
            boundary,
        }
    }

    /// One-step propagator of `Q⁽ⁿ⁾` (or of the limit transport).
    pub fn q_propagator(&self, penalty: Penalty) -> Matrix<D> {
        let Some(b) = &self.boundary else {
            return self.damp;
        };
        let ii = if self.dl > 0.0 { sym_exp(&b.second_fundamental, -0.5 * self.dl) } else { Matrix::<D>::identity() };
        let normal = match penalty {
            Penalty::Finite(n) => {
                let e = 0.5 * n * self.dl;
                let factor = if e > PENALTY_CLAMP { 0.0 } else { (-e).exp() };
                b.tangential + b.normal * b.normal.transpose() * factor
            }
            Penalty::Limit => b.tangential,
        };
        normal * ii * self.damp
    }

    /// One-step propagator of `Q̃` and its inverse.
    pub fn qtilde_propagator(&self) -> (Matrix<D>, Matrix<D>) {
        match (&self.boundary, self.dl > 0.0) {
            (Some(b), true) => {
                let e = sym_exp(&b.grad_normal, 0.5 * self.dl);
                let ei = sym_exp(&b.grad_normal, -0.5 * self.dl);
                (e * self.damp, self.damp_inv * ei)
            }
            _ => (self.damp, self.damp_inv),
        }
    }
}

fn guard<const D: usize>(m: &Matrix<D>, what: &str, step: usize) -> Result<()> {
    let n = max_abs(m);
    if !n.is_finite() || n > BLOWUP_NORM {
        return Err(Error::Numerical(format!("{what} blew up at step {step} (|·| = {n:e})")));
    }
    Ok(())
}

/// `Q⁽ⁿ⁾` or the limit transport.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QState<const D: usize> {
    pub q: Matrix<D>,
    pub penalty: Penalty,
}

impl<const D: usize> QState<D> {
    pub fn new(penalty: Penalty) -> Self {
        QState { q: Matrix::<D>::identity(), penalty }
    }

    /// Advances and returns the one-step propagator used.
    pub fn step(&mut self, sg: &StepGeometry<D>, index: usize) -> Result<Matrix<D>> {
        let a = sg.q_propagator(self.penalty);
        self.q = a * self.q;
        guard(&self.q, "Q", index)?;
        Ok(a)
    }
}

/// `Q̃` with its running inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QTildeState<const D: usize> {
    pub q: Matrix<D>,
    pub q_inv: Matrix<D>,
    steps: usize,
}

impl<const D: usize> Default for QTildeState<D> {
    fn default() -> Self {
        QTildeState { q: Matrix::<D>::identity(), q_inv: Matrix::<D>::identity(), steps: 0 }
    }
}

impl<const D: usize> QTildeState<D> {
    pub fn step(&mut self, sg: &StepGeometry<D>, index: usize) -> Result<Matrix<D>> {
        let (a, ai) = sg.qtilde_propagator();
        self.q = a * self.q;
        self.q_inv *= ai;
        self.steps += 1;
        if self.steps % RESYNC_EVERY == 0 {
            if let Some(inv) = self.q.try_inverse() {
                self.q_inv = inv;
            }
        }
        guard(&self.q, "Q̃", index)?;
        guard(&self.q_inv, "Q̃⁻¹", index)?;
        Ok(a)
    }

    /// `|Q̃ Q̃⁻¹ − I|`.
    pub fn inverse_residual(&self) -> f64 {
        max_abs(&(self.q * self.q_inv - Matrix::<D>::identity()))
    }
}

/// `W^{h̃}(v, v)` in frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WState<const D: usize> {
    pub w: Vector<D>,
}

impl<const D: usize> Default for WState<D> {
    fn default() -> Self {
        WState { w: Vector::<D>::zeros() }
    }
}

impl<const D: usize> WState<D> {
    /// `w ← A(w + R(ΔB, a)c − ½(d*R − R(Z) + ∇Ric_Z)(a, c)dt + ½(∇²N + R(N))(a, c)dl)` with
    /// `a = h̃(t_k)Q̃_k v`, `c = Q̃_k v` and `A` the one-step propagator of `Q̃`.
    #[allow(clippy::too_many_arguments)]
    pub fn step<M: Manifold<D> + ?Sized>(
        &mut self,
        model: &M,
        rec: &StepRecord<D>,
        sg: &StepGeometry<D>,
        qtilde_prop: &Matrix<D>,
        a: &Vector<D>,
        c: &Vector<D>,
        index: usize,
    ) -> Result<()> {
        let up = &rec.u_prev;
        let x = &rec.x_prev;
        let back = up.transpose() * model.metric(x);
        let (ua, uc) = (up * a, up * c);
        let mut src = back * curvature_apply(model, x, &(up * rec.db), &ua, &uc);
        src -= back * model.dstar_r_term(x, &ua, &uc) * (0.5 * sg.dt);
        if sg.dl > 0.0 {
            let u = &rec.u;
            let cb = &rec.contact;
            let bs = BoundarySource::at(model, cb);
            src += u.transpose() * model.metric(cb) * bs.apply(&(u * a), &(u * c)) * (0.5 * sg.dl);
        }
        self.w = qtilde_prop * (self.w + src);
        if self.w.iter().any(|v| !v.is_finite()) || self.w.norm() > BLOWUP_NORM {
            return Err(Error::Numerical(format!("W blew up at step {index}")));
        }
        Ok(())
    }
}

/// Nested integral `M = ∫⟨h_s Q_s ∫₀ˢ h_r Q_r⁻¹ dB_r, dB_s⟩` by the recursion
/// `ξ_{k+1} = A_k(ξ_k + h_k ΔB_k)`, `M += h_k⟨ξ_k, ΔB_k⟩` with `A_k` the one-step
/// propagator of `Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NestedIntegral<const D: usize> {
    pub xi: Vector<D>,
    pub m: f64,
    pub sup_abs: f64,
}

impl<const D: usize> Default for NestedIntegral<D> {
    fn default() -> Self {
        NestedIntegral { xi: Vector::<D>::zeros(), m: 0.0, sup_abs: 0.0 }
    }
}

impl<const D: usize> NestedIntegral<D> {
    pub fn step(&mut self, h: f64, db: &Vector<D>, propagator: &Matrix<D>) {
        self.m += h * self.xi.dot(db);
        self.sup_abs = self.sup_abs.max(self.m.abs());
        self.xi = propagator * (self.xi + db * h);
    }

    pub fn is_finite(&self) -> bool {
        self.m.is_finite() && self.xi.iter().all(|v| v.is_finite()) && self.xi.norm() < BLOWUP_NORM
    }
}

/// Stored sequence of matrices, one per grid time `t_0, …, t_n`.
pub type MatrixSequence<const D: usize> = Vec<Matrix<D>>;

/// `Q⁽ⁿ⁾_{t_k}` along a stored path.
pub fn evolve_qn<const D: usize, M: Manifold<D> + ?Sized>(
    path: &DiffusionPath<D>,
    model: &M,
    n: f64,
) -> Result<MatrixSequence<D>> {
    if !(n >= 1.0) {
        return Err(Error::Config(format!("penalty n must be ≥ 1, got {n}")));
    }
    evolve_q(path, model, Penalty::Finite(n))
}

/// Limit transport along a stored path.
pub fn evolve_q_limit<const D: usize, M: Manifold<D> + ?Sized>(path: &DiffusionPath<D>, model: &M) -> Result<MatrixSequence<D>> {
    evolve_q(path, model, Penalty::Limit)
}

fn evolve_q<const D: usize, M: Manifold<D> + ?Sized>(
    path: &DiffusionPath<D>,
    model: &M,
    penalty: Penalty,
) -> Result<MatrixSequence<D>> {
    let mut st = QState::new(penalty);
    let mut out = Vec::with_capacity(path.steps.len() + 1);
    out.push(st.q);
    for (k, rec) in path.steps.iter().enumerate() {
        st.step(&StepGeometry::new(model, rec), k)?;
        out.push(st.q);
    }
    Ok(out)
}

/// `(Q̃_{t_k}, Q̃_{t_k}⁻¹)` along a stored path.
pub fn evolve_qtilde<const D: usize, M: Manifold<D> + ?Sized>(
    path: &DiffusionPath<D>,
    model: &M,
) -> Result<Vec<(Matrix<D>, Matrix<D>)>> {
    let mut st = QTildeState::<D>::default();
    let mut out = Vec::with_capacity(path.steps.len() + 1);
    out.push((st.q, st.q_inv));
    for (k, rec) in path.steps.iter().enumerate() {
        st.step(&StepGeometry::new(model, rec), k)?;
        out.push((st.q, st.q_inv));
    }
    Ok(out)
}

/// `W^{h̃}_{t_k}(v, v)` along a stored path; `h_tilde(t)` is evaluated at step starts.
pub fn evolve_w<const D: usize, M: Manifold<D> + ?Sized, H: Fn(f64) -> f64>(
    path: &DiffusionPath<D>,
    model: &M,
    h_tilde: H,
    v: &Vector<D>,
) -> Result<Vec<Vector<D>>> {
    let mut qt = QTildeState::<D>::default();
    let mut w = WState::<D>::default();
    let mut out = Vec::with_capacity(path.steps.len() + 1);
    out.push(w.w);
    for (k, rec) in path.steps.iter().enumerate() {
        let sg = StepGeometry::new(model, rec);
        let c = qt.q * v;
        let a = c * h_tilde(rec.t);
        let prop = qt.step(&sg, k)?;
        w.step(model, rec, &sg, &prop, &a, &c, k)?;
        out.push(w.w);
    }
    Ok(out)
}

/// `M` along a stored path with schedule `h(t)` evaluated at step starts.
pub fn double_integral_m<const D: usize, M: Manifold<D> + ?Sized, H: Fn(f64) -> f64>(
    path: &DiffusionPath<D>,
    model: &M,
    h: H,
    penalty: Penalty,
) -> Result<NestedIntegral<D>> {
    let mut q = QState::<D>::new(penalty);
    let mut m = NestedIntegral::<D>::default();
    for (k, rec) in path.steps.iter().enumerate() {
        let a = q.step(&StepGeometry::new(model, rec), k)?;
        m.step(h(rec.t), &rec.db, &a);
        if !m.is_finite() {
            return Err(Error::Numerical(format!("nested integral non-finite at step {k}")));
        }
    }
    Ok(m)
}

/// Pathwise transport invariants on a stored path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathInvariants {
    /// `max_k |Q⁽ⁿ⁾_k| / envelope_k − 1` over the penalties checked.
    pub envelope_excess: f64,
    /// `max` over basis `v` of `n∫|P_N Qv|²dl − (|v|² − |Q_T v|² + ∫|Qv|²(K⁻ds + σ⁻dl))`.
    pub normal_mass_excess: f64,
    /// `max |⟨N, Q v⟩|` at contact steps for the limit transport.
    pub limit_normal_residual: f64,
    /// `max_k |Q̃_k Q̃_k⁻¹ − I|`.
    pub qtilde_inverse_residual: f64,
    /// `max_k (|Q̃_k| − e^{−½Kt_k + ½σ⁻l_k})`.
    pub qtilde_bound_excess: f64,
}

/// Checks the transport invariants along `path` for the given penalties.
pub fn path_invariants<const D: usize, M: Manifold<D> + ?Sized>(
    path: &DiffusionPath<D>,
    model: &M,
    penalties: &[f64],
) -> Result<PathInvariants> {
    let c = model.constants();
    let (k_minus, s_minus) = (c.k_minus(), c.sigma_minus());
    let mut qs: Vec<QState<D>> = penalties.iter().map(|&n| QState::new(Penalty::Finite(n))).collect();
    let mut mass = vec![[0.0_f64; D]; penalties.len()];
    let mut growth = vec![[0.0_f64; D]; penalties.len()];
    let mut lim = QState::<D>::new(Penalty::Limit);
    let mut qt = QTildeState::<D>::default();
    let mut log_env = 0.0_f64;
    let mut out = PathInvariants {
        envelope_excess: f64::NEG_INFINITY,
        normal_mass_excess: f64::NEG_INFINITY,
        limit_normal_residual: 0.0,
        qtilde_inverse_residual: 0.0,
        qtilde_bound_excess: f64::NEG_INFINITY,
    };
    let (mut t, mut l) = (0.0, 0.0);
    for (k, rec) in path.steps.iter().enumerate() {
        let sg = StepGeometry::new(model, rec);
        for (j, q) in qs.iter_mut().enumerate() {
            for i in 0..D {
                growth[j][i] += (q.q.column(i).norm_squared()) * k_minus * rec.dt;
            }
            q.step(&sg, k)?;
            for i in 0..D {
                growth[j][i] += q.q.column(i).norm_squared() * s_minus * rec.dl;
                if let Some(b) = &sg.boundary {
                    let pn = b.normal.dot(&q.q.column(i));
                    mass[j][i] += pn * pn * rec.dl;
                }
            }
        }
        lim.step(&sg, k)?;
        qt.step(&sg, k)?;
        t += rec.dt;
        l += rec.dl;
        log_env += -0.5 * c.k * rec.dt - 0.5 * c.sigma * rec.dl;
        for q in &qs {
            out.envelope_excess = out.envelope_excess.max(op_norm(&q.q) / log_env.exp() - 1.0);
        }
        if let Some(b) = &sg.boundary {
            out.limit_normal_residual = out.limit_normal_residual.max((lim.q.transpose() * b.normal).abs().max());
        }
        out.qtilde_inverse_residual = out.qtilde_inverse_residual.max(qt.inverse_residual());
        let bound = (-0.5 * c.k * t + 0.5 * s_minus * l).exp();
        out.qtilde_bound_excess = out.qtilde_bound_excess.max(op_norm(&qt.q) - bound);
    }
    for (j, &n) in penalties.iter().enumerate() {
        for i in 0..D {
            let end = qs[j].q.column(i).norm_squared();
            let rhs = 1.0 - end + growth[j][i];
            out.normal_mass_excess = out.normal_mass_excess.max(n * mass[j][i] - rhs);
        }
    }
    if path.steps.is_empty() {
        out.envelope_excess = 0.0;
        out.normal_mass_excess = 0.0;
        out.qtilde_bound_excess = 0.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{HalfLine, HalfSpace, Hemisphere};
    use crate::pathsim::{simulate_path, SimConfig};

    #[test]
    fn half_line_penalized_transport_is_exponential_of_local_time() {
        let m = HalfLine::new();
        let p = simulate_path(&m, &Vector::<1>::new(0.0), &SimConfig::new(1.0, 1e-3, 4), 0).unwrap();
        let qs = evolve_qn(&p, &m, 3.0).unwrap();
        let mut l = 0.0;
        for (k, q) in qs.iter().enumerate().skip(1) {
            l += p.steps[k - 1].dl;
            assert!((q[(0, 0)] - (-1.5 * l).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn half_line_limit_transport_is_indicator_of_no_contact() {
        let m = HalfLine::new();
        let p = simulate_path(&m, &Vector::<1>::new(0.3), &SimConfig::new(1.0, 1e-3, 4), 1).unwrap();
        let qs = evolve_q_limit(&p, &m).unwrap();
        let mut touched = false;
        for (k, q) in qs.iter().enumerate().skip(1) {
            touched |= p.steps[k - 1].hit;
            assert_eq!(q[(0, 0)], if touched { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn flat_tangential_direction_is_untouched() {
        let m = HalfSpace::<2>::new();
        let p = simulate_path(&m, &Vector::<2>::new(0.0, 0.0), &SimConfig::new(1.0, 1e-3, 4), 2).unwrap();
        for n in [1.0, 100.0] {
            let q = *evolve_qn(&p, &m, n).unwrap().last().unwrap();
            let v = q * Vector::<2>::new(0.0, 1.0);
            assert!((v - Vector::<2>::new(0.0, 1.0)).norm() < 1e-14);
        }
        let qt = evolve_qtilde(&p, &m).unwrap();
        assert!(qt.iter().all(|(q, _)| *q == Matrix::<2>::identity()));
    }

    #[test]
    fn hemisphere_transports_are_scalar_damping() {
        let m = Hemisphere;
        let cfg = SimConfig::new(1.0, 1e-3, 5);
        for i in 0..5 {
            let p = simulate_path(&m, &Vector::<2>::new(0.0, 0.0), &cfg, i).unwrap();
            let qt = evolve_qtilde(&p, &m).unwrap();
            for (k, (q, _)) in qt.iter().enumerate() {
                let expect = (-0.5 * k as f64 * p.dt).exp();
                assert!((op_norm(q) / expect - 1.0).abs() < 1e-2);
            }
            let qn = evolve_qn(&p, &m, 10.0).unwrap();
            let first_hit = p.steps.iter().position(|s| s.hit).unwrap_or(p.steps.len());
            for k in 0..=first_hit {
                assert!((op_norm(&qn[k]) / (-0.5 * k as f64 * p.dt).exp() - 1.0).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn penalized_transport_converges_to_limit() {
        let m = HalfSpace::<2>::new();
        let cfg = SimConfig::new(1.0, 1e-3, 6);
        for i in 0..20 {
            let p = simulate_path(&m, &Vector::<2>::new(0.1, 0.0), &cfg, i).unwrap();
            let lim = evolve_q_limit(&p, &m).unwrap();
            let mut prev = f64::INFINITY;
            for n in [1.0, 10.0, 100.0, 1000.0] {
                let qn = evolve_qn(&p, &m, n).unwrap();
                let d = qn.iter().zip(&lim).map(|(a, b)| max_abs(&(a - b))).fold(0.0, f64::max);
                assert!(d <= prev + 1e-15);
                prev = d;
            }
        }
    }

    #[test]
    fn nested_integral_vanishes_for_zero_schedule() {
        let m = HalfLine::new();
        let p = simulate_path(&m, &Vector::<1>::new(0.3), &SimConfig::new(1.0, 1e-2, 4), 0).unwrap();
        let r = double_integral_m(&p, &m, |_| 0.0, Penalty::Limit).unwrap();
        assert_eq!(r.m, 0.0);
    }

    #[test]
    fn nested_integral_matches_direct_double_sum_without_contacts() {
        let m = HalfLine::new();
        let p = simulate_path(&m, &Vector::<1>::new(10.0), &SimConfig::new(1.0, 1e-2, 4), 0).unwrap();
        let r = double_integral_m(&p, &m, |_| -1.0, Penalty::Finite(5.0)).unwrap();
        let mut inner = 0.0;
        let mut direct = 0.0;
        for s in &p.steps {
            direct += inner * s.db[0];
            inner -= s.db[0];
        }
        assert!((r.m + direct).abs() < 1e-12);
    }

    #[test]
    fn w_vanishes_on_half_space_and_for_zero_direction() {
        let m = HalfSpace::<3>::new();
        let p = simulate_path(&m, &Vector::<3>::new(0.1, 0.0, 0.0), &SimConfig::new(0.5, 1e-3, 4), 0).unwrap();
        let w = evolve_w(&p, &m, |t| 1.0 - t / 0.5, &Vector::<3>::new(1.0, 0.0, 0.0)).unwrap();
        assert!(w.iter().all(|w| w.norm() == 0.0));
        let h = Hemisphere;
        let p = simulate_path(&h, &Vector::<2>::new(0.0, 0.0), &SimConfig::new(0.5, 1e-3, 4), 0).unwrap();
        let w = evolve_w(&p, &h, |_| 1.0, &Vector::<2>::zeros()).unwrap();
        assert!(w.iter().all(|w| w.norm() == 0.0));
    }

    #[test]
    fn invariants_hold_on_sample_paths() {
        let m = Hemisphere;
        let cfg = SimConfig::new(1.0, 1e-3, 8);
        for i in 0..5 {
            let p = simulate_path(&m, &Hemisphere::chart_point(1.3, 0.0), &cfg, i).unwrap();
            let inv = path_invariants(&p, &m, &[1.0, 10.0, 100.0]).unwrap();
            assert!(inv.envelope_excess < 5e-3, "{inv:?}");
            assert!(inv.normal_mass_excess < 1e-9, "{inv:?}");
            assert!(inv.limit_normal_residual < 1e-6, "{inv:?}");
            assert!(inv.qtilde_inverse_residual < 1e-6, "{inv:?}");
            assert!(inv.qtilde_bound_excess < 5e-3, "{inv:?}");
        }
    }
}
