//! Discrete-time control randomization.
//!
//! On a partition `0 = t_0 < ... < t_n = T` the agent draws `xi_i ~ N(0, I)`
//! and trades `H_{i-1}(xi_i) = m_{i-1} + v_{i-1} xi_i`, where `(m, v)` are
//! evaluated at the left endpoint `(t_{i-1}, Y_{i-1}, X_{i-1})`. The state
//! recursion is
//!
//! ```text
//! Y_i = Y_{i-1} + s(Y_{i-1}) (b dt + a dW + gamma dJ)
//! X_i = X_{i-1} + H_{i-1}(xi_i)^T (Y_i - Y_{i-1})
//! ```
//!
//! with `dJ` the exact sum of compound-Poisson jumps in `(t_{i-1}, t_i]` minus
//! `m1 dt`. The discrete integrators are
//! `W^n`, `M^n = sum eta_i ⊗ dW_i` and `L^n = sum (dJ_i, psi(dJ_i) eta_i)`,
//! collected as `Z^n = vec(W, M, L)` in `R^{D^2 + 3D}`.
//!
//! Random numbers are consumed per step in the fixed order `dW`, `xi`,
//! jump count, jump sizes, so [`sample_integrator_path`] reproduces the
//! integrator increments of [`DiscreteSimulator`] from the same stream.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::levy_model::{self, BlockLayout, FlatCoefficients, MarketModel};
use crate::linalg;
use crate::rng::{self, PathRng, Purpose};
use crate::stats::{self, Estimate};

// ---------------------------------------------------------------------------
// Partition

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    grid: Vec<f64>,
}

impl Partition {
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 || !(horizon > 0.0) {
            return Err(Error::Input(format!(
                "uniform partition needs n >= 1 and T > 0, got n = {n}, T = {horizon}"
            )));
        }
        let mut grid: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        grid[n] = horizon;
        Ok(Self { grid })
    }

    pub fn from_times(grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid[0] != 0.0 {
            return Err(Error::Input("partition must start at 0 and have >= 2 points".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("partition must be strictly increasing".into()));
        }
        Ok(Self { grid })
    }

    pub fn n(&self) -> usize {
        self.grid.len() - 1
    }
    pub fn times(&self) -> &[f64] {
        &self.grid
    }
    pub fn horizon(&self) -> f64 {
        self.grid[self.n()]
    }
    /// Length of step `i` in `1..=n`.
    pub fn dt(&self, i: usize) -> f64 {
        self.grid[i] - self.grid[i - 1]
    }
    pub fn mesh(&self) -> f64 {
        self.grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
    /// Largest `i` with `t_i <= t` (up to rounding).
    pub fn index_at_time(&self, t: f64) -> usize {
        let tol = 1e-12 * self.horizon();
        self.grid.partition_point(|&s| s <= t + tol).saturating_sub(1)
    }
}

// ---------------------------------------------------------------------------
// Controls

/// Linear randomized control `H(u) = m + v u` with `v` symmetric positive
/// definite, evaluated from left-endpoint information only.
pub trait DiscreteRandomizedControl: Sync {
    fn dim(&self) -> usize;

    /// Writes `m` (length D) and `v` (D x D, row-major) for step `step`
    /// (the interval `(t_{step-1}, t_step]`) given `t = t_{step-1}` and the
    /// state at that time.
    fn coefficients(&self, step: usize, t: f64, y: &[f64], x: f64, m: &mut [f64], v: &mut [f64]);

    /// True when the coefficients ignore `(y, x)`.
    fn is_deterministic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct ConstantControl {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ConstantControl {
    pub fn new(m: Vec<f64>, v: DMatrix<f64>) -> Result<Self> {
        let d = m.len();
        if v.shape() != (d, d) {
            return Err(Error::Input(format!("v must be {d}x{d}")));
        }
        check_linear_v(&v)?;
        Ok(Self {
            m,
            v: linalg::to_row_major(&v),
        })
    }

    /// `m` in every coordinate and `v = scale * I`.
    pub fn isotropic(dim: usize, m: f64, scale: f64) -> Result<Self> {
        Self::new(vec![m; dim], DMatrix::identity(dim, dim) * scale)
    }
}

impl DiscreteRandomizedControl for ConstantControl {
    fn dim(&self) -> usize {
        self.m.len()
    }
    fn coefficients(&self, _: usize, _: f64, _: &[f64], _: f64, m: &mut [f64], v: &mut [f64]) {
        m.copy_from_slice(&self.m);
        v.copy_from_slice(&self.v);
    }
    fn is_deterministic(&self) -> bool {
        true
    }
}

type FeedbackFn = dyn Fn(f64, &[f64], f64, &mut [f64], &mut [f64]) + Send + Sync;

/// Control whose `(m, v)` are arbitrary functions of `(t, y, x)`.
pub struct FeedbackControl {
    dim: usize,
    f: Box<FeedbackFn>,
}

impl FeedbackControl {
    pub fn new(
        dim: usize,
        f: impl Fn(f64, &[f64], f64, &mut [f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            f: Box::new(f),
        }
    }
}

impl DiscreteRandomizedControl for FeedbackControl {
    fn dim(&self) -> usize {
        self.dim
    }
    fn coefficients(&self, _: usize, t: f64, y: &[f64], x: f64, m: &mut [f64], v: &mut [f64]) {
        (self.f)(t, y, x, m, v)
    }
}

fn check_linear_v(v: &DMatrix<f64>) -> Result<()> {
    if linalg::max_asymmetry(v) > linalg::SYMMETRY_TOL * v.norm().max(1.0) {
        return Err(Error::Admissibility("control scale v is not symmetric".into()));
    }
    if !linalg::is_pd(v) {
        return Err(Error::Admissibility(format!(
            "control scale v is singular or indefinite (minimum eigenvalue {:e}); \
             the exploration entropy would be -inf",
            linalg::min_eigenvalue(v)
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Moment decomposition

/// `H(xi) = mu + vartheta eta` with `E eta = 0`, `Cov eta = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentDecomposition {
    pub mu: DVector<f64>,
    pub theta: DMatrix<f64>,
    pub vartheta: DMatrix<f64>,
}

impl MomentDecomposition {
    /// `eta = vartheta^{-1} (h - mu)`.
    pub fn eta(&self, h: &[f64]) -> Result<DVector<f64>> {
        let r = DVector::from_column_slice(h) - &self.mu;
        self.vartheta
            .clone()
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Admissibility("vartheta is singular".into()))
    }
}

/// Exact decomposition of `H(u) = m + v u`.
pub fn decompose_linear(m: &[f64], v: &DMatrix<f64>) -> Result<MomentDecomposition> {
    check_linear_v(v)?;
    let theta = linalg::symmetrize(&(v * v.transpose()));
    let vartheta = linalg::psd_sqrt(&theta)?;
    Ok(MomentDecomposition {
        mu: DVector::from_column_slice(m),
        theta,
        vartheta,
    })
}

/// Decomposition of a linear control at one step and state.
pub fn decompose_control(
    control: &dyn DiscreteRandomizedControl,
    step: usize,
    t: f64,
    y: &[f64],
    x: f64,
) -> Result<MomentDecomposition> {
    let d = control.dim();
    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d * d];
    control.coefficients(step, t, y, x, &mut m, &mut v);
    decompose_linear(&m, &DMatrix::from_row_slice(d, d, &v))
}

/// Monte Carlo moments of a general measurable `H`, with the standard errors
/// of each `mu` entry and each `theta` entry (row-major).
pub fn decompose_general(
    dim: usize,
    h: impl Fn(&[f64], &mut [f64]) + Sync,
    samples: usize,
    seed: u64,
) -> Result<(MomentDecomposition, Vec<f64>, Vec<f64>)> {
    if samples < 2 {
        return Err(Error::Input("need at least two samples".into()));
    }
    const CHUNK: usize = 4096;
    let chunks = samples.div_ceil(CHUNK);
    let draws: Vec<Vec<f64>> = rng::par_paths(chunks, seed, Purpose::Moments, |c, r| {
        let len = CHUNK.min(samples - c * CHUNK);
        let mut out = Vec::with_capacity(len * dim);
        let mut u = vec![0.0; dim];
        let mut val = vec![0.0; dim];
        for _ in 0..len {
            for ui in u.iter_mut() {
                *ui = r.sample(StandardNormal);
            }
            h(&u, &mut val);
            out.extend_from_slice(&val);
        }
        out
    });
    let flat: Vec<f64> = draws.concat();
    let col = |i: usize| -> Vec<f64> { flat.iter().skip(i).step_by(dim).copied().collect() };
    let cols: Vec<Vec<f64>> = (0..dim).map(col).collect();
    let mut mu = DVector::zeros(dim);
    let mut mu_se = vec![0.0; dim];
    for i in 0..dim {
        let e = stats::mean_se(&cols[i]);
        mu[i] = e.value;
        mu_se[i] = e.se;
    }
    let mut theta = DMatrix::zeros(dim, dim);
    let mut theta_se = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let prod: Vec<f64> = cols[i]
                .iter()
                .zip(&cols[j])
                .map(|(a, b)| (a - mu[i]) * (b - mu[j]))
                .collect();
            let e = stats::mean_se(&prod);
            theta[(i, j)] = e.value;
            theta_se[i * dim + j] = e.se;
        }
    }
    let theta = linalg::symmetrize(&theta);
    if !linalg::is_pd(&theta) {
        return Err(Error::Admissibility(
            "estimated covariance of H is singular; entropy would be -inf".into(),
        ));
    }
    let vartheta = linalg::psd_sqrt(&theta)?;
    Ok((MomentDecomposition { mu, theta, vartheta }, mu_se, theta_se))
}

// ---------------------------------------------------------------------------
// Simulation engine

/// Everything produced in one step, handed to visitors.
#[derive(Debug)]
pub struct StepRecord<'a> {
    /// Step index in `1..=n`.
    pub step: usize,
    pub t_prev: f64,
    pub dt: f64,
    pub dw: &'a [f64],
    pub xi: &'a [f64],
    pub h: &'a [f64],
    pub eta: &'a [f64],
    pub dj: &'a [f64],
    pub psi_dj: f64,
    pub jump_count: u32,
    pub y_prev: &'a [f64],
    pub y: &'a [f64],
    pub x_prev: f64,
    pub x: f64,
}

struct StepPlan {
    mu: Vec<f64>,
    v: Vec<f64>,
    vartheta_inv: Vec<f64>,
}

/// Reusable simulator for one `(model, partition, control)` triple.
pub struct DiscreteSimulator<'a> {
    model: &'a MarketModel,
    partition: Arc<Partition>,
    control: &'a dyn DiscreteRandomizedControl,
    flat: FlatCoefficients,
    plan: Option<Vec<StepPlan>>,
}

fn inv_sqrt_row_major(v: &DMatrix<f64>) -> Result<Vec<f64>> {
    let theta = linalg::symmetrize(&(v * v.transpose()));
    let vt = linalg::psd_sqrt(&theta)?;
    let inv = vt
        .try_inverse()
        .ok_or_else(|| Error::Admissibility("vartheta is singular".into()))?;
    Ok(linalg::to_row_major(&inv))
}

impl<'a> DiscreteSimulator<'a> {
    pub fn new(
        model: &'a MarketModel,
        partition: Arc<Partition>,
        control: &'a dyn DiscreteRandomizedControl,
    ) -> Result<Self> {
        let d = model.dim();
        if control.dim() != d {
            return Err(Error::Input(format!(
                "control dimension {} differs from model dimension {d}",
                control.dim()
            )));
        }
        if !(partition.mesh() > 0.0) {
            return Err(Error::Input("partition mesh must be positive".into()));
        }
        let plan = if control.is_deterministic() {
            let y = vec![0.0; d];
            let mut plan = Vec::with_capacity(partition.n());
            for i in 1..=partition.n() {
                let mut m = vec![0.0; d];
                let mut v = vec![0.0; d * d];
                control.coefficients(i, partition.times()[i - 1], &y, 0.0, &mut m, &mut v);
                let vm = DMatrix::from_row_slice(d, d, &v);
                check_linear_v(&vm)?;
                plan.push(StepPlan {
                    mu: m,
                    v,
                    vartheta_inv: inv_sqrt_row_major(&vm)?,
                });
            }
            Some(plan)
        } else {
            None
        };
        Ok(Self {
            model,
            partition,
            control,
            flat: model.flat(),
            plan,
        })
    }

    pub fn partition(&self) -> &Arc<Partition> {
        &self.partition
    }

    /// Simulates one path, calling `visit` after every step.
    pub fn run_path<R: Rng + ?Sized>(
        &self,
        x0: f64,
        y0: &[f64],
        rng: &mut R,
        mut visit: impl FnMut(&StepRecord),
    ) -> Result<()> {
        let d = self.flat.dim;
        let fc = &self.flat;
        let jumps = &self.model.jumps;
        let damping = &self.model.damping;
        let intensity = jumps.intensity();
        let m1: Vec<f64> = jumps.m1().iter().copied().collect();
        let mut y_prev = y0.to_vec();
        let mut y = y0.to_vec();
        let mut x = x0;
        let mut dw = vec![0.0; d];
        let mut xi = vec![0.0; d];
        let mut dj = vec![0.0; d];
        let mut e = vec![0.0; d];
        let mut h = vec![0.0; d];
        let mut eta = vec![0.0; d];
        let mut dy = vec![0.0; d];
        let mut m = vec![0.0; d];
        let mut v = vec![0.0; d * d];
        let mut vinv = vec![0.0; d * d];
        let times = self.partition.times();
        for i in 1..=self.partition.n() {
            let t_prev = times[i - 1];
            let dt = times[i] - t_prev;
            let sq = dt.sqrt();
            for k in 0..d {
                dw[k] = sq * rng.sample::<f64, _>(StandardNormal);
            }
            for k in 0..d {
                xi[k] = rng.sample(StandardNormal);
            }
            let count = levy_model::poisson_count(rng, intensity * dt);
            for k in 0..d {
                dj[k] = -m1[k] * dt;
            }
            for _ in 0..count {
                jumps.sample_size(rng, &mut e);
                for k in 0..d {
                    dj[k] += e[k];
                }
            }
            let psi_dj = levy_model::psi(damping, &dj);

            // control from left-endpoint information
            let (mu_s, v_s, vinv_s): (&[f64], &[f64], &[f64]) = match &self.plan {
                Some(p) => (&p[i - 1].mu, &p[i - 1].v, &p[i - 1].vartheta_inv),
                None => {
                    self.control.coefficients(i, t_prev, &y, x, &mut m, &mut v);
                    let vm = DMatrix::from_row_slice(d, d, &v);
                    check_linear_v(&vm).map_err(|err| {
                        Error::Admissibility(format!("at t = {t_prev}, y = {y:?}: {err}"))
                    })?;
                    vinv.copy_from_slice(&inv_sqrt_row_major(&vm)?);
                    (&m, &v, &vinv)
                }
            };
            for r in 0..d {
                let mut s = mu_s[r];
                for c in 0..d {
                    s += v_s[r * d + c] * xi[c];
                }
                h[r] = s;
            }
            for r in 0..d {
                let mut s = 0.0;
                for c in 0..d {
                    s += vinv_s[r * d + c] * (h[c] - mu_s[c]);
                }
                eta[r] = s;
            }

            // state update
            let scale = self.model.coeffs.scale(&y);
            for r in 0..d {
                let mut s = fc.b[r] * dt;
                for c in 0..d {
                    s += fc.a[r * d + c] * dw[c] + fc.gamma[r * d + c] * dj[c];
                }
                dy[r] = scale * s;
            }
            let x_prev = x;
            let mut gain = 0.0;
            for r in 0..d {
                gain += h[r] * dy[r];
            }
            x += gain;
            y_prev.copy_from_slice(&y);
            for r in 0..d {
                y[r] += dy[r];
            }
            visit(&StepRecord {
                step: i,
                t_prev,
                dt,
                dw: &dw,
                xi: &xi,
                h: &h,
                eta: &eta,
                dj: &dj,
                psi_dj,
                jump_count: count as u32,
                y_prev: &y_prev,
                y: &y,
                x_prev,
                x,
            });
        }
        Ok(())
    }

    /// Full scenario for one path.
    pub fn scenario<R: Rng + ?Sized>(&self, x0: f64, y0: &[f64], rng: &mut R) -> Result<DiscreteScenario> {
        let d = self.flat.dim;
        let n = self.partition.n();
        let lay = BlockLayout::new(d);
        let mut sc = DiscreteScenario {
            partition: Arc::clone(&self.partition),
            dim: d,
            dw: Vec::with_capacity(n * d),
            xi: Vec::with_capacity(n * d),
            eta: Vec::with_capacity(n * d),
            h: Vec::with_capacity(n * d),
            dj: Vec::with_capacity(n * d),
            jump_counts: Vec::with_capacity(n),
            z: vec![0.0; lay.len()],
            y: Vec::with_capacity((n + 1) * d),
            x: Vec::with_capacity(n + 1),
        };
        sc.y.extend_from_slice(y0);
        sc.x.push(x0);
        let mut z = vec![0.0; lay.len()];
        let mut dz = vec![0.0; lay.len()];
        self.run_path(x0, y0, rng, |s| {
            sc.dw.extend_from_slice(s.dw);
            sc.xi.extend_from_slice(s.xi);
            sc.eta.extend_from_slice(s.eta);
            sc.h.extend_from_slice(s.h);
            sc.dj.extend_from_slice(s.dj);
            sc.jump_counts.push(s.jump_count);
            sc.y.extend_from_slice(s.y);
            sc.x.push(s.x);
            integrator_increment(d, s.dw, s.eta, s.dj, s.psi_dj, &mut dz);
            for (a, b) in z.iter_mut().zip(&dz) {
                *a += b;
            }
            sc.z.extend_from_slice(&z);
        })?;
        Ok(sc)
    }
}

/// `dZ = (dW, eta ⊗ dW, dJ, psi(dJ) eta)`; the `M` entry `(k, l)` sits at
/// offset `k D + l` and holds `eta_k dW_l`.
pub fn integrator_increment(d: usize, dw: &[f64], eta: &[f64], dj: &[f64], psi_dj: f64, out: &mut [f64]) {
    out[..d].copy_from_slice(dw);
    for k in 0..d {
        for l in 0..d {
            out[d + k * d + l] = eta[k] * dw[l];
        }
    }
    let o = d + d * d;
    out[o..o + d].copy_from_slice(dj);
    for k in 0..d {
        out[o + d + k] = psi_dj * eta[k];
    }
}

/// Draws the integrator increments of one path for a linear control with
/// symmetric `v` (so `eta = xi`); no state or wealth is computed.
pub fn sample_integrator_path<R: Rng + ?Sized>(
    model: &MarketModel,
    partition: &Partition,
    rng: &mut R,
    mut visit: impl FnMut(usize, &[f64]),
) {
    let d = model.dim();
    let lay = BlockLayout::new(d);
    let jumps = &model.jumps;
    let intensity = jumps.intensity();
    let m1: Vec<f64> = jumps.m1().iter().copied().collect();
    let mut dw = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut dj = vec![0.0; d];
    let mut e = vec![0.0; d];
    let mut dz = vec![0.0; lay.len()];
    let times = partition.times();
    for i in 1..=partition.n() {
        let dt = times[i] - times[i - 1];
        let sq = dt.sqrt();
        for k in 0..d {
            dw[k] = sq * rng.sample::<f64, _>(StandardNormal);
        }
        for k in 0..d {
            xi[k] = rng.sample(StandardNormal);
        }
        let count = levy_model::poisson_count(rng, intensity * dt);
        for k in 0..d {
            dj[k] = -m1[k] * dt;
        }
        for _ in 0..count {
            jumps.sample_size(rng, &mut e);
            for k in 0..d {
                dj[k] += e[k];
            }
        }
        let p = levy_model::psi(&model.damping, &dj);
        integrator_increment(d, &dw, &xi, &dj, p, &mut dz);
        visit(i, &dz);
    }
}

/// `Z^n` at the requested times for `paths` independent paths; result is
/// indexed `[time][path]` with each entry of length `D^2 + 3D`.
pub fn sample_integrator_at_times(
    model: &MarketModel,
    partition: &Partition,
    times: &[f64],
    paths: usize,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let lay = BlockLayout::new(model.dim());
    let idx: Vec<usize> = times.iter().map(|&t| partition.index_at_time(t)).collect();
    let per_path: Vec<Vec<Vec<f64>>> = rng::par_paths(paths, seed, Purpose::Discrete, |_, r| {
        let mut z = vec![0.0; lay.len()];
        let mut out = vec![vec![0.0; lay.len()]; idx.len()];
        sample_integrator_path(model, partition, r, |i, dz| {
            for (a, b) in z.iter_mut().zip(dz) {
                *a += b;
            }
            for (k, &target) in idx.iter().enumerate() {
                if target == i {
                    out[k].copy_from_slice(&z);
                }
            }
        });
        out
    });
    (0..idx.len())
        .map(|k| per_path.iter().map(|p| p[k].clone()).collect())
        .collect()
}

/// Parallel map over simulated scenarios in path order.
pub fn map_scenarios<T: Send>(
    sim: &DiscreteSimulator,
    paths: usize,
    seed: u64,
    f: impl Fn(usize, &mut PathRng, &DiscreteSimulator) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    rng::par_paths(paths, seed, Purpose::Discrete, |p, r| f(p, r, sim))
        .into_iter()
        .collect()
}

/// Convenience wrapper simulating one full scenario.
pub fn simulate_discrete_scenario(
    model: &MarketModel,
    partition: &Partition,
    control: &dyn DiscreteRandomizedControl,
    x0: f64,
    y0: &[f64],
    rng: &mut PathRng,
) -> Result<DiscreteScenario> {
    let sim = DiscreteSimulator::new(model, Arc::new(partition.clone()), control)?;
    sim.scenario(x0, y0, rng)
}

// ---------------------------------------------------------------------------
// Scenario

/// One simulated path stored in flat, step-major buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScenario {
    pub partition: Arc<Partition>,
    pub dim: usize,
    /// `n * D` Brownian increments.
    pub dw: Vec<f64>,
    /// `n * D` exploration draws.
    pub xi: Vec<f64>,
    /// `n * D` decomposition residuals `vartheta^{-1}(H - mu)`.
    pub eta: Vec<f64>,
    /// `n * D` realized actions `H(xi)`.
    pub h: Vec<f64>,
    /// `n * D` compensated jump increments.
    pub dj: Vec<f64>,
    pub jump_counts: Vec<u32>,
    /// `(n + 1) * (D^2 + 3D)` integrator path, starting at zero.
    pub z: Vec<f64>,
    /// `(n + 1) * D` state path.
    pub y: Vec<f64>,
    /// `n + 1` wealth path.
    pub x: Vec<f64>,
}

impl DiscreteScenario {
    pub fn n(&self) -> usize {
        self.partition.n()
    }
    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.dim)
    }
    /// `Z^n_{t_k}`.
    pub fn z_at(&self, k: usize) -> &[f64] {
        let l = self.layout().len();
        &self.z[k * l..(k + 1) * l]
    }
    /// `Z^n_{t_i} - Z^n_{t_{i-1}}` for `i` in `1..=n`.
    pub fn z_increment(&self, i: usize) -> Vec<f64> {
        self.z_at(i)
            .iter()
            .zip(self.z_at(i - 1))
            .map(|(a, b)| a - b)
            .collect()
    }
    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.dim..(k + 1) * self.dim]
    }
    pub fn step_slice<'s>(&self, buf: &'s [f64], i: usize) -> &'s [f64] {
        &buf[(i - 1) * self.dim..i * self.dim]
    }
    pub fn terminal_wealth(&self) -> f64 {
        *self.x.last().expect("non-empty path")
    }

    /// CSV columns `path,t,W..,M..,J..,V..,Y..,X`.
    pub fn write_csv(&self, w: &mut dyn Write, path: usize, header: bool) -> Result<()> {
        let d = self.dim;
        let lay = self.layout();
        if header {
            let mut cols = vec!["path".to_string(), "t".to_string()];
            for k in 0..lay.len() {
                let (name, off) = match lay.block_of(k) {
                    "W" => ("W", lay.w().start),
                    "M" => ("M", lay.m().start),
                    "J" => ("J", lay.j().start),
                    _ => ("V", lay.v().start),
                };
                cols.push(format!("{name}{}", k - off));
            }
            for k in 0..d {
                cols.push(format!("Y{k}"));
            }
            cols.push("X".into());
            writeln!(w, "{}", cols.join(","))?;
        }
        for k in 0..=self.n() {
            let mut row = vec![path.to_string(), format!("{}", self.partition.times()[k])];
            row.extend(self.z_at(k).iter().map(|v| format!("{v}")));
            row.extend(self.y_at(k).iter().map(|v| format!("{v}")));
            row.push(format!("{}", self.x[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Statistics

/// `E|sum_{t_i <= t} eta_i dt_i|^2` per coordinate, estimated over scenarios.
pub fn lln_drift_statistic(scenarios: &[DiscreteScenario], t: f64) -> Vec<Estimate> {
    let Some(first) = scenarios.first() else {
        return Vec::new();
    };
    let d = first.dim;
    let per_path: Vec<Vec<f64>> = scenarios
        .iter()
        .map(|s| {
            let last = s.partition.index_at_time(t);
            let mut acc = vec![0.0; d];
            for i in 1..=last {
                let dt = s.partition.dt(i);
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += s.eta[(i - 1) * d + k] * dt;
                }
            }
            acc.into_iter().map(|a| a * a).collect()
        })
        .collect();
    (0..d)
        .map(|k| stats::mean_se(&per_path.iter().map(|v| v[k]).collect::<Vec<_>>()))
        .collect()
}

/// Streaming version of [`lln_drift_statistic`] that never stores paths.
pub fn lln_drift_study(
    sim: &DiscreteSimulator,
    x0: f64,
    y0: &[f64],
    t: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<Estimate>> {
    let last = sim.partition().index_at_time(t);
    let d = y0.len();
    let per_path = map_scenarios(sim, paths, seed, |_, r, sim| {
        let mut acc = vec![0.0; d];
        sim.run_path(x0, y0, r, |s| {
            if s.step <= last {
                for k in 0..d {
                    acc[k] += s.eta[k] * s.dt;
                }
            }
        })?;
        Ok(acc.into_iter().map(|a| a * a).collect::<Vec<f64>>())
    })?;
    Ok((0..d)
        .map(|k| stats::mean_se(&per_path.iter().map(|v| v[k]).collect::<Vec<_>>()))
        .collect())
}

// (step, t, y, x, h, eta) kept for the identity check
type StepSample = (usize, f64, Vec<f64>, f64, Vec<f64>, Vec<f64>);

/// Pooled moments of `eta` over all steps and paths.
#[derive(Debug, Clone)]
pub struct EtaMoments {
    /// Per coordinate.
    pub mean: Vec<Estimate>,
    /// Row-major `D x D`.
    pub cov: Vec<Estimate>,
    /// Largest `|H - (mu + vartheta eta)|` seen.
    pub max_identity_error: f64,
    pub samples: usize,
}

/// Checks `H(xi) = mu + vartheta eta` on every step and estimates the moments
/// of `eta`. Per-path sums are i.i.d. across paths, which gives the SEs.
pub fn eta_moments(
    sim: &DiscreteSimulator,
    x0: f64,
    y0: &[f64],
    paths: usize,
    seed: u64,
) -> Result<EtaMoments> {
    let d = y0.len();
    let n = sim.partition().n();
    let control = sim.control;
    let per_path = map_scenarios(sim, paths, seed, |_, r, sim| {
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d * d];
        let mut worst: f64 = 0.0;
        let mut check: Vec<StepSample> = Vec::new();
        sim.run_path(x0, y0, r, |s| {
            for k in 0..d {
                s1[k] += s.eta[k];
                for l in 0..d {
                    s2[k * d + l] += s.eta[k] * s.eta[l];
                }
            }
            if check.len() < 4 {
                check.push((s.step, s.t_prev, s.y_prev.to_vec(), s.x_prev, s.h.to_vec(), s.eta.to_vec()));
            }
        })?;
        for (step, t, y, x, h, eta) in check {
            let dec = decompose_control(control, step, t, &y, x)?;
            let recon = &dec.mu + &dec.vartheta * DVector::from_vec(eta);
            for k in 0..d {
                worst = worst.max((recon[k] - h[k]).abs());
            }
        }
        Ok((s1, s2, worst))
    })?;
    let nn = n as f64;
    let mean: Vec<Estimate> = (0..d)
        .map(|k| {
            let e = stats::mean_se(&per_path.iter().map(|p| p.0[k]).collect::<Vec<_>>());
            Estimate {
                value: e.value / nn,
                se: e.se / nn,
            }
        })
        .collect();
    let cov = (0..d * d)
        .map(|kl| {
            let (k, l) = (kl / d, kl % d);
            let e = stats::mean_se(&per_path.iter().map(|p| p.1[kl]).collect::<Vec<_>>());
            Estimate {
                value: e.value / nn - mean[k].value * mean[l].value,
                se: e.se / nn,
            }
        })
        .collect();
    Ok(EtaMoments {
        mean,
        cov,
        max_identity_error: per_path.iter().map(|p| p.2).fold(0.0, f64::max),
        samples: paths * n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_model::{canonical_model, constant_model, JumpLaw};
    use approx::assert_relative_eq;

    fn no_jump_model() -> MarketModel {
        canonical_model().without_jumps()
    }

    #[test]
    fn partition_basics() {
        let p = Partition::uniform(1.0, 4).unwrap();
        assert_eq!(p.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(p.index_at_time(0.5), 2);
        assert_eq!(p.index_at_time(0.6), 2);
        assert_eq!(p.index_at_time(1.0), 4);
        assert_relative_eq!(p.mesh(), 0.25);
        assert!(Partition::from_times(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(Partition::uniform(1.0, 0).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let d = decompose_linear(&[0.0, 0.0], &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(d.mu, DVector::zeros(2));
        assert_relative_eq!(d.theta, DMatrix::identity(2, 2), epsilon = 1e-15);
        let v = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let d = decompose_linear(&[1.0, 2.0], &v).unwrap();
        assert_relative_eq!(d.theta, DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 4.0]), epsilon = 1e-15);
        assert_relative_eq!(&d.vartheta * &d.vartheta, d.theta, epsilon = 1e-10);
        let eta = d.eta(&[1.5, 0.0]).unwrap();
        assert_relative_eq!(eta, DVector::from_vec(vec![1.0, -1.0]), epsilon = 1e-14);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(decompose_linear(&[0.0, 0.0], &singular), Err(Error::Admissibility(_))));
    }

    #[test]
    fn monte_carlo_moments_match_linear_decomposition() {
        let v = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 2.0]);
        let exact = decompose_linear(&[1.0, 2.0], &v).unwrap();
        let vv = v.clone();
        let (mc, mu_se, th_se) = decompose_general(
            2,
            move |u, out| {
                out[0] = 1.0 + vv[(0, 0)] * u[0] + vv[(0, 1)] * u[1];
                out[1] = 2.0 + vv[(1, 0)] * u[0] + vv[(1, 1)] * u[1];
            },
            1_000_000,
            17,
        )
        .unwrap();
        for k in 0..2 {
            assert!((mc.mu[k] - exact.mu[k]).abs() <= 4.0 * mu_se[k]);
            for l in 0..2 {
                assert!((mc.theta[(k, l)] - exact.theta[(k, l)]).abs() <= 4.0 * th_se[k * 2 + l]);
            }
        }
    }

    #[test]
    fn scenario_is_deterministic_and_consistent() {
        let model = canonical_model();
        let part = Partition::uniform(1.0, 64).unwrap();
        let ctl = ConstantControl::isotropic(1, 1.0, 1.0).unwrap();
        let a = simulate_discrete_scenario(&model, &part, &ctl, 1.0, &[0.0], &mut rng::stream(4, 2, Purpose::Discrete)).unwrap();
        let b = simulate_discrete_scenario(&model, &part, &ctl, 1.0, &[0.0], &mut rng::stream(4, 2, Purpose::Discrete)).unwrap();
        assert_eq!(a, b);
        let lay = a.layout();
        let n = a.n();
        // M^n = sum xi ⊗ dW and L increments are (dJ, psi(dJ) xi)
        let m_sum: f64 = (0..n).map(|i| a.xi[i] * a.dw[i]).sum();
        assert_relative_eq!(a.z_at(n)[lay.m().start], m_sum, epsilon = 1e-12);
        for i in 1..=n {
            let inc = a.z_increment(i);
            assert_relative_eq!(inc[lay.j().start], a.dj[i - 1], epsilon = 1e-12);
            let p = levy_model::psi(&model.damping, &[a.dj[i - 1]]);
            assert_relative_eq!(inc[lay.v().start], p * a.xi[i - 1], epsilon = 1e-12);
            assert_relative_eq!(a.eta[i - 1], a.xi[i - 1], epsilon = 1e-14);
        }
        // the integrator-only sampler sees the same numbers
        let mut z = vec![0.0; lay.len()];
        sample_integrator_path(&model, &part, &mut rng::stream(4, 2, Purpose::Discrete), |_, dz| {
            for (x, y) in z.iter_mut().zip(dz) {
                *x += y;
            }
        });
        for (x, y) in z.iter().zip(a.z_at(n)) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        let mut buf = Vec::new();
        a.write_csv(&mut buf, 0, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,t,W0,M0,J0,V0,Y0,X\n"));
        assert_eq!(text.lines().count(), n + 2);
    }

    fn terminal_mean(model: &MarketModel, n: usize, m: f64, v: f64, paths: usize) -> Estimate {
        let ctl = ConstantControl::isotropic(1, m, v).unwrap();
        let sim = DiscreteSimulator::new(model, Arc::new(Partition::uniform(1.0, n).unwrap()), &ctl).unwrap();
        let xs = map_scenarios(&sim, paths, 99, |_, r, sim| {
            let mut x = 1.0;
            sim.run_path(1.0, &[0.0], r, |s| x = s.x)?;
            Ok(x)
        })
        .unwrap();
        stats::mean_se(&xs)
    }

    #[test]
    fn drift_only_expectation() {
        let est = terminal_mean(&no_jump_model(), 32, 1.0, 1.0, 100_000);
        assert!(est.within(1.3, 4.0), "{est:?}");
        let est = terminal_mean(&canonical_model(), 256, 1.0, 1.0, 20_000);
        assert!(est.within(1.3, 4.0), "{est:?}");
    }

    #[test]
    fn vanishing_exploration_keeps_wealth_still() {
        let model = no_jump_model();
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let ctl = ConstantControl::isotropic(1, 0.0, eps).unwrap();
            let sim = DiscreteSimulator::new(&model, Arc::new(Partition::uniform(1.0, 32).unwrap()), &ctl).unwrap();
            let sq = map_scenarios(&sim, 2000, 5, |_, r, sim| {
                let mut x = 1.0;
                sim.run_path(1.0, &[0.0], r, |s| x = s.x)?;
                Ok((x - 1.0).powi(2))
            })
            .unwrap();
            let ms = stats::mean(&sq);
            assert!(ms < last);
            last = ms;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn lln_statistic_matches_orthogonality_identity() {
        let model = canonical_model();
        for n in [1usize, 16, 32] {
            let part = Arc::new(Partition::uniform(1.0, n).unwrap());
            let ctl = ConstantControl::isotropic(1, 1.0, 1.0).unwrap();
            let sim = DiscreteSimulator::new(&model, part.clone(), &ctl).unwrap();
            let est = lln_drift_study(&sim, 1.0, &[0.0], 1.0, 40_000, 3).unwrap();
            assert!(est[0].within(1.0 / n as f64, 4.0), "n = {n}: {:?}", est[0]);
            let scen: Vec<DiscreteScenario> = (0..2000)
                .map(|p| sim.scenario(1.0, &[0.0], &mut rng::stream(3, p, Purpose::Discrete)).unwrap())
                .collect();
            let stored = lln_drift_statistic(&scen, 1.0);
            assert!(stored[0].within(1.0 / n as f64, 4.0));
        }
    }

    #[test]
    fn feedback_control_uses_left_endpoint_state() {
        let model = constant_model(
            &[0.1, 0.05],
            &[0.2, 0.0, 0.05, 0.15],
            &[1.0, 0.0, 0.0, 1.0],
            0.5,
            JumpLaw::Atoms {
                atoms: vec![vec![0.1, 0.0], vec![0.0, -0.1]],
                probs: vec![0.5, 0.5],
            },
            0.5,
            1.0,
        )
        .unwrap();
        let ctl = FeedbackControl::new(2, |_, y, x, m, v| {
            m[0] = -x;
            m[1] = y[0];
            v.copy_from_slice(&[1.0 + y[1].abs(), 0.2, 0.2, 1.0]);
        });
        let sim = DiscreteSimulator::new(&model, Arc::new(Partition::uniform(1.0, 16).unwrap()), &ctl).unwrap();
        let mut rng = rng::stream(1, 0, Purpose::Discrete);
        let mut ok = true;
        sim.run_path(0.5, &[0.0, 0.0], &mut rng, |s| {
            let dec = decompose_control(&ctl, s.step, s.t_prev, s.y_prev, s.x_prev).unwrap();
            let recon = &dec.mu + &dec.vartheta * DVector::from_column_slice(s.eta);
            ok &= (recon[0] - s.h[0]).abs() < 1e-12 && (recon[1] - s.h[1]).abs() < 1e-12;
            ok &= (s.h[0] - (-s.x_prev + (1.0 + s.y_prev[1].abs()) * s.xi[0] + 0.2 * s.xi[1])).abs() < 1e-12;
        })
        .unwrap();
        assert!(ok);
        let moments = eta_moments(&sim, 0.5, &[0.0, 0.0], 4000, 8).unwrap();
        assert!(moments.max_identity_error < 1e-12);
        assert!(moments.mean[0].within(0.0, 4.0));
        assert!(moments.cov[1].within(0.0, 4.0));
        assert!(moments.cov[0].within(1.0, 4.0));
    }
}
