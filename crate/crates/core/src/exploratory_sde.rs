//! Continuous-time exploratory dynamics under Gaussian feedback laws.
//!
//! Noise is drawn once per path into a [`NoiseTape`]: a uniform fine grid
//! merged with the exact jump epochs, carrying Brownian increments for `W`
//! and the `D x D` sheet `𝒲` on every sub-interval plus the marks `(e, xi)`
//! of every jump. Euler–Maruyama runs between consecutive stops (coarse grid
//! points and jump epochs), so coarser schemes reuse the same tape by
//! aggregating increments.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::levy_model::{self, MarketModel};
use crate::linalg;
use crate::rng::{self, Purpose};
use crate::stats::{ColumnAcc, Estimate};

// ---------------------------------------------------------------------------
// Laws

/// Gaussian law `N(mean(t, x, y), cov(t, y))` used as a feedback control.
/// Matrices are row-major `D x D` slices.
pub trait GaussianFeedbackLaw: Send + Sync {
    fn dim(&self) -> usize;
    fn label(&self) -> String;
    fn mean(&self, t: f64, x: f64, y: &[f64], out: &mut [f64]);
    fn cov(&self, t: f64, y: &[f64], out: &mut [f64]);

    /// Symmetric square root of the covariance. Fails unless the covariance
    /// is positive definite.
    fn cov_sqrt(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let mut c = vec![0.0; d * d];
        self.cov(t, y, &mut c);
        let m = DMatrix::from_row_slice(d, d, &c);
        if !linalg::is_pd(&m) {
            return Err(not_pd(t, y, linalg::min_eigenvalue(&m)));
        }
        out.copy_from_slice(&linalg::to_row_major(&linalg::psd_sqrt(&m)?));
        Ok(())
    }

    /// `ln det cov(t, y)`, `-inf` when singular.
    fn log_det_cov(&self, t: f64, y: &[f64]) -> f64 {
        let d = self.dim();
        let mut c = vec![0.0; d * d];
        self.cov(t, y, &mut c);
        linalg::log_det_spd(&DMatrix::from_row_slice(d, d, &c)).unwrap_or(f64::NEG_INFINITY)
    }
}

fn not_pd(t: f64, y: &[f64], min_eig: f64) -> Error {
    Error::Admissibility(format!(
        "covariance is not positive definite at t = {t}, y = {y:?} (minimum eigenvalue {min_eig:e})"
    ))
}

/// State-independent law `N(m, cov)`.
#[derive(Debug, Clone)]
pub struct ConstantLaw {
    dim: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
    sqrt: Vec<f64>,
    log_det: f64,
}

impl ConstantLaw {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Input(format!("covariance must be {d}x{d}")));
        }
        if !linalg::is_pd(&cov) {
            return Err(Error::Admissibility(format!(
                "covariance is not positive definite (minimum eigenvalue {:e})",
                linalg::min_eigenvalue(&cov)
            )));
        }
        Ok(Self {
            dim: d,
            sqrt: linalg::to_row_major(&linalg::psd_sqrt(&cov)?),
            log_det: linalg::log_det_spd(&cov)?,
            cov: linalg::to_row_major(&cov),
            mean,
        })
    }

    /// `N(m 1, theta I)`.
    pub fn isotropic(dim: usize, m: f64, theta: f64) -> Result<Self> {
        Self::new(vec![m; dim], DMatrix::identity(dim, dim) * theta)
    }
}

impl GaussianFeedbackLaw for ConstantLaw {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> String {
        format!("constant(m={:?}, cov={:?})", self.mean, self.cov)
    }
    fn mean(&self, _: f64, _: f64, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.mean);
    }
    fn cov(&self, _: f64, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.cov);
    }
    fn cov_sqrt(&self, _: f64, _: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.sqrt);
        Ok(())
    }
    fn log_det_cov(&self, _: f64, _: &[f64]) -> f64 {
        self.log_det
    }
}

/// Another law with its mean scaled by `mean_factor` and covariance by `cov_factor`.
#[derive(Clone)]
pub struct PerturbedLaw {
    inner: Arc<dyn GaussianFeedbackLaw>,
    pub mean_factor: f64,
    pub cov_factor: f64,
}

impl PerturbedLaw {
    pub fn new(inner: Arc<dyn GaussianFeedbackLaw>, mean_factor: f64, cov_factor: f64) -> Result<Self> {
        if !(cov_factor > 0.0) || !mean_factor.is_finite() {
            return Err(Error::Input(format!(
                "perturbation needs finite mean factor and cov factor > 0, got {mean_factor}, {cov_factor}"
            )));
        }
        Ok(Self {
            inner,
            mean_factor,
            cov_factor,
        })
    }
}

impl GaussianFeedbackLaw for PerturbedLaw {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn label(&self) -> String {
        format!("perturbed({}, mean x{}, cov x{})", self.inner.label(), self.mean_factor, self.cov_factor)
    }
    fn mean(&self, t: f64, x: f64, y: &[f64], out: &mut [f64]) {
        self.inner.mean(t, x, y, out);
        out.iter_mut().for_each(|v| *v *= self.mean_factor);
    }
    fn cov(&self, t: f64, y: &[f64], out: &mut [f64]) {
        self.inner.cov(t, y, out);
        out.iter_mut().for_each(|v| *v *= self.cov_factor);
    }
    fn cov_sqrt(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner.cov_sqrt(t, y, out)?;
        let s = self.cov_factor.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
        Ok(())
    }
    fn log_det_cov(&self, t: f64, y: &[f64]) -> f64 {
        self.inner.log_det_cov(t, y) + self.dim() as f64 * self.cov_factor.ln()
    }
}

type MeanFn = dyn Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync;
type CovFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Law given by two closures.
pub struct FnLaw {
    dim: usize,
    label: String,
    mean: Box<MeanFn>,
    cov: Box<CovFn>,
}

impl FnLaw {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        mean: impl Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        cov: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            label: label.into(),
            mean: Box::new(mean),
            cov: Box::new(cov),
        }
    }
}

impl GaussianFeedbackLaw for FnLaw {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> String {
        self.label.clone()
    }
    fn mean(&self, t: f64, x: f64, y: &[f64], out: &mut [f64]) {
        (self.mean)(t, x, y, out)
    }
    fn cov(&self, t: f64, y: &[f64], out: &mut [f64]) {
        (self.cov)(t, y, out)
    }
}

/// Differential entropy `(D/2) ln(2 pi e) + (1/2) ln det Θ(t, y)`; `-inf`
/// when Θ is singular (the law is then not admissible).
pub fn entropy_rate(law: &dyn GaussianFeedbackLaw, t: f64, _x: f64, y: &[f64]) -> f64 {
    gaussian_entropy(law.dim(), law.log_det_cov(t, y))
}

pub fn gaussian_entropy(dim: usize, log_det: f64) -> f64 {
    0.5 * dim as f64 * (2.0 * PI * std::f64::consts::E).ln() + 0.5 * log_det
}

// ---------------------------------------------------------------------------
// Noise tape

/// Marker in [`NoiseTape::grid`] for nodes that are jump epochs.
pub const OFF_GRID: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct TapeJump {
    /// Node at which the jump happens.
    pub node: usize,
    pub e: Vec<f64>,
    pub xi: Vec<f64>,
}

/// One path of driving noise on a fine uniform grid merged with jump epochs.
#[derive(Debug, Clone)]
pub struct NoiseTape {
    pub dim: usize,
    pub horizon: f64,
    pub fine_n: usize,
    /// Node times, starting at 0 and ending at the horizon.
    pub times: Vec<f64>,
    /// Fine-grid index of each node or [`OFF_GRID`].
    pub grid: Vec<u32>,
    /// `W` increments per sub-interval, `D` each.
    pub dw: Vec<f64>,
    /// `𝒲` increments per sub-interval, `D^2` each, row-major.
    pub dsheet: Vec<f64>,
    pub jumps: Vec<TapeJump>,
}

/// Increments between two stops of a (possibly coarser) scheme.
#[derive(Debug)]
pub struct Segment<'a> {
    pub t0: f64,
    pub dt: f64,
    pub dw: &'a [f64],
    pub dsheet: &'a [f64],
    /// Jump at the end of the segment.
    pub jump: Option<&'a TapeJump>,
    /// Coarse grid index of the end point, when it is a grid point.
    pub grid: Option<usize>,
}

impl NoiseTape {
    /// Draws jump epochs with their marks first, then the Brownian
    /// increments of every sub-interval in time order.
    pub fn generate<R: Rng + ?Sized>(model: &MarketModel, fine_n: usize, rng: &mut R) -> Result<Self> {
        if fine_n == 0 {
            return Err(Error::Input("noise tape needs at least one step".into()));
        }
        let d = model.dim();
        let horizon = model.horizon;
        let mut epochs: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
        if model.jumps.is_active() {
            let count = levy_model::poisson_count(rng, model.jumps.intensity() * horizon);
            for _ in 0..count {
                let t = horizon * rng.random::<f64>();
                let mut e = vec![0.0; d];
                model.jumps.sample_size(rng, &mut e);
                let xi = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                epochs.push((t, e, xi));
            }
            epochs.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let cap = fine_n + 1 + epochs.len();
        let mut times = Vec::with_capacity(cap);
        let mut grid = Vec::with_capacity(cap);
        let mut jumps = Vec::with_capacity(epochs.len());
        times.push(0.0);
        grid.push(0);
        let mut next = epochs.into_iter().peekable();
        for i in 1..=fine_n {
            let ti = horizon * i as f64 / fine_n as f64;
            while let Some((t, _, _)) = next.peek() {
                if *t >= ti || *t <= *times.last().expect("non-empty") {
                    break;
                }
                let (t, e, xi) = next.next().expect("peeked");
                times.push(t);
                grid.push(OFF_GRID);
                jumps.push(TapeJump {
                    node: times.len() - 1,
                    e,
                    xi,
                });
            }
            times.push(ti);
            grid.push(i as u32);
        }
        // an epoch landing exactly on a grid point is applied there
        for (t, e, xi) in next {
            let node = times.partition_point(|s| *s < t).min(times.len() - 1);
            jumps.push(TapeJump { node, e, xi });
        }
        jumps.sort_by_key(|j| j.node);
        let k = times.len() - 1;
        let mut dw = Vec::with_capacity(k * d);
        let mut dsheet = Vec::with_capacity(k * d * d);
        for j in 0..k {
            let sq = (times[j + 1] - times[j]).sqrt();
            for _ in 0..d {
                dw.push(sq * rng.sample::<f64, _>(StandardNormal));
            }
            for _ in 0..d * d {
                dsheet.push(sq * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(Self {
            dim: d,
            horizon,
            fine_n,
            times,
            grid,
            dw,
            dsheet,
            jumps,
        })
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Calls `f` for every segment of the scheme whose grid keeps every
    /// `factor`-th fine point, with jump epochs as additional stops.
    pub fn for_each_segment(&self, factor: usize, mut f: impl FnMut(&Segment) -> Result<()>) -> Result<()> {
        if factor == 0 || !self.fine_n.is_multiple_of(factor) {
            return Err(Error::Input(format!(
                "coarsening factor {factor} must divide the fine step count {}",
                self.fine_n
            )));
        }
        let d = self.dim;
        let mut dw = vec![0.0; d];
        let mut ds = vec![0.0; d * d];
        let zero_dw = vec![0.0; d];
        let zero_ds = vec![0.0; d * d];
        let mut t0 = 0.0;
        let mut jp = 0;
        for k in 0..self.intervals() {
            for (a, b) in dw.iter_mut().zip(&self.dw[k * d..(k + 1) * d]) {
                *a += b;
            }
            for (a, b) in ds.iter_mut().zip(&self.dsheet[k * d * d..(k + 1) * d * d]) {
                *a += b;
            }
            let end = k + 1;
            let g = self.grid[end];
            let on_grid = g != OFF_GRID && (g as usize).is_multiple_of(factor);
            let mut jump = None;
            if jp < self.jumps.len() && self.jumps[jp].node == end {
                jump = Some(&self.jumps[jp]);
            }
            if on_grid || jump.is_some() {
                f(&Segment {
                    t0,
                    dt: self.times[end] - t0,
                    dw: &dw,
                    dsheet: &ds,
                    jump,
                    grid: on_grid.then(|| g as usize / factor),
                })?;
                // a second jump at the same node is applied as a zero-length segment
                while jump.is_some() && jp + 1 < self.jumps.len() && self.jumps[jp + 1].node == end {
                    jp += 1;
                    f(&Segment {
                        t0: self.times[end],
                        dt: 0.0,
                        dw: &zero_dw,
                        dsheet: &zero_ds,
                        jump: Some(&self.jumps[jp]),
                        grid: None,
                    })?;
                }
                if jump.is_some() {
                    jp += 1;
                }
                dw.iter_mut().for_each(|v| *v = 0.0);
                ds.iter_mut().for_each(|v| *v = 0.0);
                t0 = self.times[end];
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Euler scheme

/// State after a segment, handed to visitors.
#[derive(Debug)]
pub struct EulerState<'a> {
    pub t: f64,
    pub x: f64,
    pub y: &'a [f64],
    pub grid: Option<usize>,
    pub jumped: bool,
}

/// Result of one Euler path.
#[derive(Debug, Clone, Copy)]
pub struct PathOutcome {
    pub terminal: f64,
    /// `∫ entropy_rate ds`, trapezoidal in `t` with `y` frozen per segment.
    pub entropy_integral: f64,
}

/// Scratch buffers for [`euler_on_tape`].
pub struct EulerScratch {
    mu: Vec<f64>,
    sq: Vec<f64>,
    sqa: Vec<f64>,
    dy: Vec<f64>,
    y: Vec<f64>,
}

impl EulerScratch {
    pub fn new(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            sq: vec![0.0; d * d],
            sqa: vec![0.0; d * d],
            dy: vec![0.0; d],
            y: vec![0.0; d],
        }
    }
}

/// Euler–Maruyama for the exploratory wealth and price state on a tape:
/// between stops
/// `dX = mu^T (b - gamma m1) dt + mu^T a dW + tr[Θ^{1/2} a d𝒲^T]`, and at a
/// jump with mark `(e, xi)`: `dX = (mu + Θ^{1/2} xi)^T gamma e`, `dY = gamma e`.
#[allow(clippy::too_many_arguments)]
pub fn euler_on_tape(
    model: &MarketModel,
    law: &dyn GaussianFeedbackLaw,
    tape: &NoiseTape,
    factor: usize,
    x0: f64,
    y0: &[f64],
    with_entropy: bool,
    scratch: &mut EulerScratch,
    mut visit: impl FnMut(&EulerState),
) -> Result<PathOutcome> {
    let d = model.dim();
    let (b, a, g) = model.coeffs.base();
    let gm1 = g * model.jumps.m1();
    let EulerScratch { mu, sq, sqa, dy, y } = scratch;
    y.copy_from_slice(y0);
    let mut x = x0;
    let mut ent = 0.0;
    tape.for_each_segment(factor, |seg| {
        if seg.dt > 0.0 {
            law.mean(seg.t0, x, y, mu);
            law.cov_sqrt(seg.t0, y, sq)?;
            let s = model.coeffs.scale(y);
            let mut dx = 0.0;
            for r in 0..d {
                let mut v = (b[r] - gm1[r]) * seg.dt;
                for c in 0..d {
                    v += a[(r, c)] * seg.dw[c];
                }
                dy[r] = s * v;
                dx += mu[r] * dy[r];
            }
            for r in 0..d {
                for c in 0..d {
                    let mut v = 0.0;
                    for k in 0..d {
                        v += sq[r * d + k] * a[(k, c)];
                    }
                    sqa[r * d + c] = s * v;
                }
            }
            for (p, q) in sqa.iter().zip(seg.dsheet) {
                dx += p * q;
            }
            if with_entropy {
                let h0 = gaussian_entropy(d, law.log_det_cov(seg.t0, y));
                let h1 = gaussian_entropy(d, law.log_det_cov(seg.t0 + seg.dt, y));
                ent += 0.5 * (h0 + h1) * seg.dt;
            }
            x += dx;
            for r in 0..d {
                y[r] += dy[r];
            }
        }
        let t = seg.t0 + seg.dt;
        if let Some(j) = seg.jump {
            law.mean(t, x, y, mu);
            law.cov_sqrt(t, y, sq)?;
            let s = model.coeffs.scale(y);
            let mut dx = 0.0;
            for r in 0..d {
                let mut ge = 0.0;
                for c in 0..d {
                    ge += g[(r, c)] * j.e[c];
                }
                ge *= s;
                let mut h = mu[r];
                for c in 0..d {
                    h += sq[r * d + c] * j.xi[c];
                }
                dx += h * ge;
                dy[r] = ge;
            }
            x += dx;
            for r in 0..d {
                y[r] += dy[r];
            }
        }
        visit(&EulerState {
            t,
            x,
            y,
            grid: seg.grid,
            jumped: seg.jump.is_some(),
        });
        Ok(())
    })?;
    Ok(PathOutcome {
        terminal: x,
        entropy_integral: ent,
    })
}

// ---------------------------------------------------------------------------
// Cost estimation

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Times at which `E X_t` is reported (rounded to the grid).
    pub snapshot_times: Vec<f64>,
    /// Number of leading paths recorded on the grid.
    pub record_paths: usize,
    /// Keep every terminal wealth.
    pub keep_terminal: bool,
}

impl SimConfig {
    pub fn new(steps: usize, paths: usize, seed: u64) -> Result<Self> {
        if steps == 0 || paths == 0 {
            return Err(Error::Input(format!("need steps >= 1 and paths >= 1, got {steps}, {paths}")));
        }
        Ok(Self {
            steps,
            paths,
            seed,
            snapshot_times: Vec::new(),
            record_paths: 0,
            keep_terminal: false,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostEstimate {
    /// Estimate of `E[(X_T - ŵ)^2] - λ E ∫ entropy ds`.
    pub value: f64,
    pub se: f64,
    pub terminal_mean: Estimate,
    pub terminal_second_moment: Estimate,
    pub quadratic_loss: Estimate,
    pub entropy_integral: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordedPath {
    pub path: usize,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    /// Row-major `(len(t), D)`.
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExploratoryRun {
    pub label: String,
    pub cost: CostEstimate,
    /// `(t, E X_t)` at the snapshot times.
    pub snapshots: Vec<(f64, Estimate)>,
    #[serde(skip)]
    pub terminal: Option<Vec<f64>>,
    pub recorded: Vec<RecordedPath>,
}

impl ExploratoryRun {
    /// CSV `path,t,X,Y0..` of the recorded paths.
    pub fn paths_csv(&self) -> String {
        use std::fmt::Write as _;
        let d = self.recorded.first().map(|p| p.y.len() / p.t.len().max(1)).unwrap_or(0);
        let mut out = String::from("path,t,X");
        for k in 0..d {
            let _ = write!(out, ",Y{k}");
        }
        out.push('\n');
        for p in &self.recorded {
            for (i, t) in p.t.iter().enumerate() {
                let _ = write!(out, "{},{},{}", p.path, t, p.x[i]);
                for k in 0..d {
                    let _ = write!(out, ",{}", p.y[i * d + k]);
                }
                out.push('\n');
            }
        }
        out
    }
}

struct RunAcc {
    cols: ColumnAcc,
    terminal: Vec<(usize, f64)>,
    err: Option<Error>,
}

/// Monte Carlo estimate of the entropy-regularized cost of `law`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_exploratory(
    model: &MarketModel,
    law: &dyn GaussianFeedbackLaw,
    x0: f64,
    y0: &[f64],
    config: &SimConfig,
    w_hat: f64,
    lambda: f64,
) -> Result<ExploratoryRun> {
    let d = model.dim();
    if law.dim() != d || y0.len() != d {
        return Err(Error::Input(format!("law and initial state must have dimension {d}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Input(format!("lambda must be >= 0, got {lambda}")));
    }
    if config.steps == 0 || config.paths == 0 {
        return Err(Error::Input("need steps >= 1 and paths >= 1".into()));
    }
    let with_entropy = lambda > 0.0;
    let n = config.steps;
    let snaps: Vec<usize> = config
        .snapshot_times
        .iter()
        .map(|&t| ((t / model.horizon) * n as f64).round().clamp(0.0, n as f64) as usize)
        .collect();
    let cols = 5 + snaps.len();
    let acc = rng::par_accumulate(
        config.paths,
        config.seed,
        Purpose::Exploratory,
        || RunAcc {
            cols: ColumnAcc::new(cols),
            terminal: Vec::new(),
            err: None,
        },
        |acc, p, r| {
            if acc.err.is_some() {
                return;
            }
            let mut row = vec![0.0; cols];
            for (k, &i) in snaps.iter().enumerate() {
                if i == 0 {
                    row[5 + k] = x0;
                }
            }
            let out = NoiseTape::generate(model, n, r).and_then(|tape| {
                let mut scratch = EulerScratch::new(d);
                euler_on_tape(model, law, &tape, 1, x0, y0, with_entropy, &mut scratch, |s| {
                    if let Some(i) = s.grid {
                        for (k, &target) in snaps.iter().enumerate() {
                            if target == i {
                                row[5 + k] = s.x;
                            }
                        }
                    }
                })
            });
            match out {
                Ok(o) => {
                    let loss = (o.terminal - w_hat).powi(2);
                    let ent = if with_entropy { o.entropy_integral } else { 0.0 };
                    row[0] = loss - lambda * ent;
                    row[1] = o.terminal;
                    row[2] = o.terminal * o.terminal;
                    row[3] = ent;
                    row[4] = loss;
                    acc.cols.push(&row);
                    if config.keep_terminal {
                        acc.terminal.push((p, o.terminal));
                    }
                }
                Err(e) => acc.err = Some(e),
            }
        },
        |a, b| {
            if a.err.is_none() {
                a.err = b.err;
            }
            a.cols.merge(&b.cols);
            a.terminal.extend(b.terminal);
        },
    );
    if let Some(e) = acc.err {
        return Err(e);
    }
    let c = &acc.cols;
    let cost = c.estimate(0);
    let recorded = record_paths(model, law, x0, y0, config)?;
    Ok(ExploratoryRun {
        label: law.label(),
        cost: CostEstimate {
            value: cost.value,
            se: cost.se,
            terminal_mean: c.estimate(1),
            terminal_second_moment: c.estimate(2),
            quadratic_loss: c.estimate(4),
            entropy_integral: c.estimate(3),
        },
        snapshots: snaps
            .iter()
            .enumerate()
            .map(|(k, &i)| (model.horizon * i as f64 / n as f64, c.estimate(5 + k)))
            .collect(),
        terminal: config.keep_terminal.then(|| {
            let mut t = acc.terminal;
            t.sort_by_key(|p| p.0);
            t.into_iter().map(|p| p.1).collect()
        }),
        recorded,
    })
}

fn record_paths(
    model: &MarketModel,
    law: &dyn GaussianFeedbackLaw,
    x0: f64,
    y0: &[f64],
    config: &SimConfig,
) -> Result<Vec<RecordedPath>> {
    let d = model.dim();
    let n = config.steps;
    (0..config.record_paths.min(config.paths))
        .map(|p| {
            let mut r = rng::stream(config.seed, p as u64, Purpose::Exploratory);
            let tape = NoiseTape::generate(model, n, &mut r)?;
            let mut rec = RecordedPath {
                path: p,
                t: vec![0.0],
                x: vec![x0],
                y: y0.to_vec(),
            };
            let mut scratch = EulerScratch::new(d);
            euler_on_tape(model, law, &tape, 1, x0, y0, false, &mut scratch, |s| {
                if s.grid.is_some() {
                    rec.t.push(s.t);
                    rec.x.push(s.x);
                    rec.y.extend_from_slice(s.y);
                }
            })?;
            Ok(rec)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Admissibility

#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityRow {
    pub t: f64,
    pub x: f64,
    pub y: Vec<f64>,
    /// `mu^T A mu + tr[A Θ]`.
    pub diffusion: f64,
    /// `∫ |(mu + Θ^{1/2} u)^T gamma e|^2 nu(de) phi(u) du`.
    pub jump: f64,
    /// `mu^T Σ mu`.
    pub mean_part: f64,
    /// `tr[Σ Θ]`.
    pub cov_part: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityReport {
    pub rows: Vec<AdmissibilityRow>,
    pub max: f64,
    pub mean: f64,
    pub blow_up: bool,
}

/// Integrand values above this are flagged as blow-up.
pub const BLOW_UP_LEVEL: f64 = 1e12;

/// Evaluates the integrability integrand at the given `(t, x, y)` states.
pub fn admissibility_probe(
    model: &MarketModel,
    law: &dyn GaussianFeedbackLaw,
    states: &[(f64, f64, Vec<f64>)],
) -> AdmissibilityReport {
    let d = model.dim();
    let mut rows = Vec::with_capacity(states.len());
    let mut mu = vec![0.0; d];
    let mut cov = vec![0.0; d * d];
    for (t, x, y) in states {
        law.mean(*t, *x, y, &mut mu);
        law.cov(*t, y, &mut cov);
        let muv = nalgebra::DVector::from_column_slice(&mu);
        let th = DMatrix::from_row_slice(d, d, &cov);
        let am = model.a_matrix(y);
        let g = model.coeffs.gamma(y);
        let gm = &g * model.jumps.m2() * g.transpose();
        let quad = |m: &DMatrix<f64>| muv.dot(&(m * &muv));
        let diffusion = quad(&am) + (&am * &th).trace();
        let jump = quad(&gm) + (&gm * &th).trace();
        let sig = am + gm;
        let mean_part = quad(&sig);
        let cov_part = (&sig * &th).trace();
        rows.push(AdmissibilityRow {
            t: *t,
            x: *x,
            y: y.clone(),
            diffusion,
            jump,
            mean_part,
            cov_part,
            total: diffusion + jump,
        });
    }
    let max = rows.iter().map(|r| r.total).fold(f64::NEG_INFINITY, f64::max);
    let mean = rows.iter().map(|r| r.total).sum::<f64>() / rows.len().max(1) as f64;
    let blow_up = rows.iter().any(|r| !r.total.is_finite() || r.total > BLOW_UP_LEVEL);
    AdmissibilityReport {
        rows,
        max,
        mean,
        blow_up,
    }
}

// ---------------------------------------------------------------------------
// Wang–Zhou dynamics

#[derive(Debug, Clone, Serialize)]
pub struct WangZhouRun {
    pub terminal_mean: Estimate,
    pub terminal_second_moment: Estimate,
    pub snapshots: Vec<(f64, Estimate)>,
}

/// Euler scheme for
/// `dX = -rho^2 (X - ŵ) ds + sqrt(rho^2 (X - ŵ)^2 + (λ/2) e^{rho^2 (T - s)}) dW`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_wang_zhou(
    rho: f64,
    lambda: f64,
    w_hat: f64,
    x0: f64,
    horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    snapshot_times: &[f64],
) -> Result<WangZhouRun> {
    if steps == 0 || paths == 0 || !(horizon > 0.0) || !(lambda >= 0.0) {
        return Err(Error::Input("invalid Wang–Zhou simulation settings".into()));
    }
    let dt = horizon / steps as f64;
    let sq = dt.sqrt();
    let r2 = rho * rho;
    let snaps: Vec<usize> = snapshot_times
        .iter()
        .map(|&t| ((t / horizon) * steps as f64).round().clamp(0.0, steps as f64) as usize)
        .collect();
    let cols = 2 + snaps.len();
    let acc = rng::par_accumulate(
        paths,
        seed,
        Purpose::Exploratory,
        || ColumnAcc::new(cols),
        |acc, _, r| {
            let mut row = vec![0.0; cols];
            let mut x = x0;
            for (k, &i) in snaps.iter().enumerate() {
                if i == 0 {
                    row[2 + k] = x;
                }
            }
            for i in 0..steps {
                let s = i as f64 * dt;
                let u = x - w_hat;
                let vol = (r2 * u * u + 0.5 * lambda * (r2 * (horizon - s)).exp()).sqrt();
                x += -r2 * u * dt + vol * sq * r.sample::<f64, _>(StandardNormal);
                for (k, &target) in snaps.iter().enumerate() {
                    if target == i + 1 {
                        row[2 + k] = x;
                    }
                }
            }
            row[0] = x;
            row[1] = x * x;
            acc.push(&row);
        },
        |a, b| a.merge(&b),
    );
    Ok(WangZhouRun {
        terminal_mean: acc.estimate(0),
        terminal_second_moment: acc.estimate(1),
        snapshots: snaps
            .iter()
            .enumerate()
            .map(|(k, &i)| (horizon * i as f64 / steps as f64, acc.estimate(2 + k)))
            .collect(),
    })
}
