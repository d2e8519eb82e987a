//! Reflecting diffusion generated by `½L` on a chart, with boundary local time and
//! stochastic parallel transport.
//!
//! One step: `y = x + UΔB + (½Z − ½g^{ij}Γ^k_ij)dt`. If `b(y) < 0` the point is reflected
//! across the boundary and the local time grows by twice the reflection displacement, so that
//! `X = x₀ + B + ½l` reproduces the Skorokhod map on the half-line. Contacts between grid
//! points are detected with the Brownian-bridge crossing probability `exp(−2b(x)b(y)/dt)`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::Manifold;
use crate::linalg::{inv_sqrt_near_identity, max_abs, sym_inv_sqrt, Matrix, Vector};
use crate::{Error, Result};

/// Frame drift above which the frame is re-orthonormalized against `g`.
pub const FRAME_RESYNC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
    pub bridge_detection: bool,
}

impl SimConfig {
    pub fn new(t: f64, dt: f64, seed: u64) -> Self {
        SimConfig { t, dt, seed, bridge_detection: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::Config(format!("horizon T must be finite and ≥ 0, got {}", self.t)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("step dt must be > 0, got {}", self.dt)));
        }
        Ok(())
    }

    /// Number of steps; a step larger than `T` collapses to a single step of size `T`.
    pub fn n_steps(&self) -> usize {
        if self.t <= 0.0 {
            0
        } else {
            ((self.t / self.dt) - 1e-9).ceil().max(1.0) as usize
        }
    }

    /// Effective step `T / n_steps`.
    pub fn step(&self) -> f64 {
        match self.n_steps() {
            0 => 0.0,
            n => self.t / n as f64,
        }
    }
}

/// Independent RNG stream for one path.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// One step `t_k → t_{k+1}` of a discretized path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<const D: usize> {
    pub t: f64,
    pub dt: f64,
    pub x_prev: Vector<D>,
    pub u_prev: Matrix<D>,
    pub x: Vector<D>,
    pub u: Matrix<D>,
    /// Brownian increment in frame coordinates.
    pub db: Vector<D>,
    pub dl: f64,
    pub hit: bool,
    /// Boundary point used for boundary tensors when `hit` is set.
    pub contact: Vector<D>,
}

/// A stored path.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPath<const D: usize> {
    pub dt: f64,
    pub seed: u64,
    pub path_index: u64,
    pub x0: Vector<D>,
    pub u0: Matrix<D>,
    pub steps: Vec<StepRecord<D>>,
}

impl<const D: usize> DiffusionPath<D> {
    pub fn terminal(&self) -> Vector<D> {
        self.steps.last().map(|s| s.x).unwrap_or(self.x0)
    }

    pub fn terminal_frame(&self) -> Matrix<D> {
        self.steps.last().map(|s| s.u).unwrap_or(self.u0)
    }

    pub fn local_time(&self) -> f64 {
        self.steps.iter().map(|s| s.dl).sum()
    }

    /// `max_k |U_kᵀ g(x_k) U_k − I|`.
    pub fn frame_drift<M: Manifold<D> + ?Sized>(&self, model: &M) -> f64 {
        self.steps
            .iter()
            .map(|s| max_abs(&(s.u.transpose() * model.metric(&s.x) * s.u - Matrix::<D>::identity())))
            .fold(0.0, f64::max)
    }
}

/// Orthonormal frame at `x` used as `U₀`.
pub fn initial_frame<const D: usize, M: Manifold<D> + ?Sized>(model: &M, x: &Vector<D>) -> Matrix<D> {
    if model.is_flat() {
        Matrix::<D>::identity()
    } else {
        sym_inv_sqrt(&model.metric(x))
    }
}

/// Streaming simulator for one path.
pub struct PathStepper<'a, const D: usize, M: Manifold<D> + ?Sized> {
    model: &'a M,
    bridge_detection: bool,
    dt: f64,
    n_steps: usize,
    pub index: usize,
    pub x: Vector<D>,
    pub u: Matrix<D>,
    pub l: f64,
    path_index: u64,
    rng: ChaCha8Rng,
}

impl<'a, const D: usize, M: Manifold<D> + ?Sized> PathStepper<'a, D, M> {
    pub fn new(model: &'a M, x0: &Vector<D>, cfg: &SimConfig, path_index: u64) -> Result<Self> {
        cfg.validate()?;
        if model.boundary_fn(x0) < -1e-12 || !model.in_chart(x0) {
            return Err(Error::Config(format!("x0 = {:?} is outside the closed domain", x0.as_slice())));
        }
        Ok(PathStepper {
            model,
            bridge_detection: cfg.bridge_detection,
            dt: cfg.step(),
            n_steps: cfg.n_steps(),
            index: 0,
            x: *x0,
            u: initial_frame(model, x0),
            l: 0.0,
            path_index,
            rng: path_rng(cfg.seed, path_index),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self) -> f64 {
        self.index as f64 * self.dt
    }

    pub fn is_done(&self) -> bool {
        self.index >= self.n_steps
    }

    /// Advances one step; `None` after the horizon.
    pub fn step(&mut self) -> Option<Result<StepRecord<D>>> {
        if self.is_done() {
            return None;
        }
        Some(self.advance())
    }

    fn advance(&mut self) -> Result<StepRecord<D>> {
        let model = self.model;
        let dt = self.dt;
        let sd = dt.sqrt();
        let db = Vector::<D>::from_fn(|_, _| sd * self.rng.sample::<f64, _>(StandardNormal));
        let x = self.x;
        let drift = model.drift(&x) * 0.5 + model.ito_correction(&x);
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite drift at step {} of path {}", self.index, self.path_index)));
        }
        let y = x + self.u * db + drift * dt;
        let by = model.boundary_fn(&y);
        let (mut x_new, mut dl, mut hit, mut contact) = (y, 0.0, false, y);
        if by < 0.0 {
            x_new = model.reflect(&y);
            dl = 2.0 * (model.boundary_fn(&x_new) - by);
            hit = true;
            contact = model.project_to_boundary(&x_new);
        } else if self.bridge_detection {
            let bx = model.boundary_fn(&x).max(0.0);
            let p = (-2.0 * bx * by / dt).exp();
            let draw: f64 = self.rng.random();
            if draw < p {
                hit = true;
                contact = model.project_to_boundary(if bx < by { &x } else { &y });
            }
        }
        if !model.in_chart(&x_new) || x_new.iter().any(|v| !v.is_finite()) || model.boundary_fn(&x_new) < -1e-9 {
            return Err(Error::Numerical(format!(
                "path {} left the chart at step {}: {:?}",
                self.path_index,
                self.index,
                x_new.as_slice()
            )));
        }
        let u_new = if model.is_flat() { self.u } else { self.transport_frame(&x, &x_new) };
        let rec = StepRecord {
            t: self.time(),
            dt,
            x_prev: x,
            u_prev: self.u,
            x: x_new,
            u: u_new,
            db,
            dl,
            hit,
            contact,
        };
        self.x = x_new;
        self.u = u_new;
        self.l += dl;
        self.index += 1;
        Ok(rec)
    }

    /// Stratonovich midpoint update of `dU = −Γ(X)(∘dX)U`, then re-orthonormalization.
    fn transport_frame(&self, x: &Vector<D>, x_new: &Vector<D>) -> Matrix<D> {
        let dx = x_new - x;
        let contract = |p: &Vector<D>| -> Matrix<D> {
            let gam = self.model.christoffel(p);
            // (Γ(dx))^k_j = Γ^k_ij dx^i
            Matrix::<D>::from_fn(|k, j| (0..D).map(|i| gam[k][(i, j)] * dx[i]).sum())
        };
        let predictor = self.u - contract(x) * self.u;
        let mid = (x + x_new) * 0.5;
        let mut u = self.u - contract(&mid) * ((self.u + predictor) * 0.5);
        let s = u.transpose() * self.model.metric(x_new) * u;
        let drift = max_abs(&(s - Matrix::<D>::identity()));
        if drift > FRAME_RESYNC_TOL {
            u *= if drift < 0.05 { inv_sqrt_near_identity(&s) } else { sym_inv_sqrt(&s) };
        }
        u
    }
}

/// Simulates and stores a whole path.
pub fn simulate_path<const D: usize, M: Manifold<D> + ?Sized>(
    model: &M,
    x0: &Vector<D>,
    cfg: &SimConfig,
    path_index: u64,
) -> Result<DiffusionPath<D>> {
    let mut st = PathStepper::new(model, x0, cfg, path_index)?;
    let u0 = st.u;
    let mut steps = Vec::with_capacity(st.n_steps());
    while let Some(rec) = st.step() {
        steps.push(rec?);
    }
    Ok(DiffusionPath { dt: cfg.step(), seed: cfg.seed, path_index, x0: *x0, u0, steps })
}

/// Exact reflected Brownian motion on `[0, ∞)` at the grid times: `X = x₀ + W + ½l` with
/// `l_t = 2 max(0, −min_{s≤t}(x₀ + W_s))`, the running minimum sampled exactly between grid
/// points from the Brownian-bridge law.
pub fn skorokhod_exact_1d<M: Manifold<1> + ?Sized>(
    model: &M,
    x0: f64,
    cfg: &SimConfig,
    path_index: u64,
) -> Result<DiffusionPath<1>> {
    if !model.is_flat() || model.has_drift() || model.id() != crate::geometry::ModelId::HalfLine {
        return Err(Error::Config("the exact Skorokhod sampler needs the driftless half-line".into()));
    }
    cfg.validate()?;
    if x0 < 0.0 {
        return Err(Error::Config(format!("x0 = {x0} is outside [0, ∞)")));
    }
    let n = cfg.n_steps();
    let dt = cfg.step();
    let sd = dt.sqrt();
    let mut rng = path_rng(cfg.seed, path_index);
    let mut w = x0;
    let mut run_min = x0;
    let mut l = 0.0_f64;
    let mut steps = Vec::with_capacity(n);
    let one = Matrix::<1>::identity();
    let mut x_prev = x0;
    for k in 0..n {
        let db = sd * rng.sample::<f64, _>(StandardNormal);
        let u: f64 = rng.random();
        let a = w;
        let b = w + db;
        let bridge_min = 0.5 * (a + b - ((b - a).powi(2) - 2.0 * dt * (1.0 - u).ln()).sqrt());
        run_min = run_min.min(bridge_min);
        w = b;
        let l_new = 2.0 * (-run_min).max(0.0);
        let dl = l_new - l;
        l = l_new;
        let x = w + 0.5 * l;
        steps.push(StepRecord {
            t: k as f64 * dt,
            dt,
            x_prev: Vector::<1>::new(x_prev),
            u_prev: one,
            x: Vector::<1>::new(x),
            u: one,
            db: Vector::<1>::new(db),
            dl,
            hit: bridge_min < 0.0,
            contact: Vector::<1>::zeros(),
        });
        x_prev = x;
    }
    Ok(DiffusionPath { dt, seed: cfg.seed, path_index, x0: Vector::<1>::new(x0), u0: one, steps })
}

/// Writes paths as a little-endian binary trace.
///
/// Layout: magic `NBPATH01`, `u32` dimension `d`, `f64` dt, `u64` path count; then per path a
/// `u64` step count followed by per-step records of `d` f64 positions, `d` f64 Brownian
/// increments, `d·d` f64 frame entries (column-major), one f64 local-time increment and one
/// `u8` contact flag.
pub fn write_trace<const D: usize>(path: &Path, paths: &[DiffusionPath<D>]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"NBPATH01");
    buf.extend_from_slice(&(D as u32).to_le_bytes());
    buf.extend_from_slice(&paths.first().map(|p| p.dt).unwrap_or(0.0).to_le_bytes());
    buf.extend_from_slice(&(paths.len() as u64).to_le_bytes());
    for p in paths {
        buf.extend_from_slice(&(p.steps.len() as u64).to_le_bytes());
        for s in &p.steps {
            for v in s.x.iter().chain(s.db.iter()).chain(s.u.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&s.dl.to_le_bytes());
            buf.push(s.hit as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Draws a standard normal from any RNG.
pub fn standard_normal(rng: &mut dyn Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}
