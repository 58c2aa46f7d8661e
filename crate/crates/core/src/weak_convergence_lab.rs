//! Empirical checks of the weak limit of the discrete integrators.
//!
//! The law of `Z^n_t` is compared with the Lévy limit `vec(W, 𝒲, L)` through
//! characteristic functions on a finite probe grid, through sums of test
//! functions vanishing near zero, and through the truncated first and second
//! moments that converge to the predictable characteristics `B` and `C~`.
//!
//! For linear controls with symmetric `v` the residual `eta` equals the
//! exploration draw `xi`, so the law of `Z^n` does not depend on the control;
//! the studies below sample `Z^n` directly.

use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::levy_model::{self, BlockLayout, MarketModel};
use crate::quadrature;
use crate::randomized_discrete::{self as rd, ConstantControl, DiscreteSimulator, Partition};
use crate::rng::{self, Purpose};
use crate::stats::{self, ColumnAcc, Estimate};

/// Minimum sample count accepted by the CF estimator.
pub const MIN_CF_SAMPLES: usize = 1000;
/// Absolute slack for cells that are exactly zero on both sides.
const EXACT_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Probe grid

#[derive(Debug, Clone, Serialize)]
pub struct ProbeGrid {
    pub probes: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub times: Vec<f64>,
}

impl ProbeGrid {
    pub fn new(probes: Vec<Vec<f64>>, labels: Vec<String>, times: Vec<f64>) -> Result<Self> {
        if probes.len() != labels.len() || probes.is_empty() || times.is_empty() {
            return Err(Error::Input("probe grid needs matching probes/labels and >= 1 time".into()));
        }
        if !probes.iter().any(|u| u.iter().all(|x| *x == 0.0)) {
            return Err(Error::Input("probe grid must contain u = 0".into()));
        }
        let norms: Vec<f64> = probes.iter().map(|u| norm(u)).filter(|r| *r > 0.0).collect();
        let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = norms.iter().copied().fold(0.0, f64::max);
        if !(hi >= 100.0 * lo) {
            return Err(Error::Input(format!(
                "probe norms must span two orders of magnitude, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { probes, labels, times })
    }

    /// 24 probes stratified by block and norm, from 0.1 to 50.
    pub fn default_for(dim: usize, times: Vec<f64>) -> Self {
        let lay = BlockLayout::new(dim);
        let mut probes = Vec::new();
        let mut labels = Vec::new();
        let mut add = |parts: &[(&str, f64)]| {
            let mut u = vec![0.0; lay.len()];
            let mut label = Vec::new();
            for (block, r) in parts {
                let range = match *block {
                    "W" => lay.w(),
                    "M" => lay.m(),
                    "J" => lay.j(),
                    _ => lay.v(),
                };
                let scale = r / (range.len() as f64).sqrt();
                for k in range {
                    u[k] = scale;
                }
                label.push(format!("{block}{r}"));
            }
            probes.push(u);
            labels.push(if label.is_empty() { "0".into() } else { label.join("+") });
        };
        add(&[]);
        for r in [0.1, 1.0, 3.0] {
            add(&[("W", r)]);
        }
        for r in [0.1, 1.0, 3.0] {
            add(&[("M", r)]);
        }
        for r in [0.5, 5.0, 20.0, 50.0] {
            add(&[("J", r)]);
        }
        for r in [1.0, 10.0, 30.0, 50.0] {
            add(&[("V", r)]);
        }
        add(&[("W", 1.0), ("M", 1.0)]);
        add(&[("W", 1.0), ("J", 5.0)]);
        add(&[("M", 1.0), ("V", 30.0)]);
        add(&[("J", 5.0), ("V", 30.0)]);
        add(&[("J", 20.0), ("V", 50.0)]);
        add(&[("W", 0.5), ("M", 0.5), ("J", 5.0), ("V", 20.0)]);
        add(&[("J", -5.0)]);
        add(&[("W", 1.0), ("M", -2.0)]);
        add(&[("J", -10.0), ("V", 20.0)]);
        Self::new(probes, labels, times).expect("default probe grid is valid")
    }
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Characteristic functions

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfEstimate {
    pub value: Complex64,
    pub se_re: f64,
    pub se_im: f64,
}

impl CfEstimate {
    /// Standard error of the complex estimate as a whole.
    pub fn se(&self) -> f64 {
        self.se_re.hypot(self.se_im)
    }

    fn from_acc(acc: &ColumnAcc, re: usize, im: usize) -> Self {
        let r = acc.estimate(re);
        let i = acc.estimate(im);
        Self {
            value: Complex64::new(r.value, i.value),
            se_re: r.se,
            se_im: i.se,
        }
    }
}

/// `(1/N) sum exp(i u·z)` with per-component standard errors.
pub fn empirical_cf(samples: &[Vec<f64>], u: &[f64]) -> Result<CfEstimate> {
    if samples.len() < MIN_CF_SAMPLES {
        return Err(Error::Input(format!(
            "empirical CF needs >= {MIN_CF_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let mut acc = ColumnAcc::new(2);
    for z in samples {
        let (s, c) = dot(u, z).sin_cos();
        acc.push(&[c, s]);
    }
    Ok(CfEstimate::from_acc(&acc, 0, 1))
}

/// Limit CF `exp(-t kappa(u))`.
pub fn limit_cf(model: &MarketModel, u: &[f64], t: f64) -> Result<Complex64> {
    Ok((-levy_model::limit_char_exponent(model, u)? * t).exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct CfRow {
    pub n: usize,
    pub t: f64,
    pub probe: usize,
    pub label: String,
    pub norm: f64,
    pub empirical_re: f64,
    pub empirical_im: f64,
    pub limit_re: f64,
    pub limit_im: f64,
    pub gap: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub n: usize,
    pub sup_gap: f64,
    pub max_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FunctionalRow {
    pub name: String,
    pub statistic: f64,
    pub se: f64,
    pub limit: f64,
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<CfRow>,
    pub grids: Vec<GridSummary>,
    pub functionals: Vec<FunctionalRow>,
    pub tolerance: f64,
    pub se_factor: f64,
    pub trend_factor: f64,
    pub finest_pass: bool,
    pub trend_pass: bool,
}

impl ConvergenceReport {
    pub fn pass(&self) -> bool {
        self.finest_pass && self.trend_pass && self.functionals.iter().all(|f| f.pass)
    }

    fn finest_n(&self) -> usize {
        self.grids.iter().map(|g| g.n).max().unwrap_or(0)
    }

    fn row_pass(&self, r: &CfRow) -> bool {
        r.gap <= self.tolerance + self.se_factor * r.se
    }

    /// Long format: `n,block,probe,t,gap,se,pass`; `pass` is judged against
    /// the finest-grid criterion.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,block,probe,t,gap,se,pass\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6e},{:.6e},{}",
                r.n,
                r.label,
                r.probe,
                r.t,
                r.gap,
                r.se,
                if self.row_pass(r) { "PASS" } else { "FAIL" }
            );
        }
        for f in &self.functionals {
            let _ = writeln!(
                out,
                "{},{},functional,,{:.6e},{:.6e},{}",
                self.finest_n(),
                f.name,
                f.gap,
                f.se,
                if f.pass { "PASS" } else { "FAIL" }
            );
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "status": if self.pass() { "PASS" } else { "FAIL" },
            "finest_pass": self.finest_pass,
            "trend_pass": self.trend_pass,
            "tolerance": self.tolerance,
            "se_factor": self.se_factor,
            "trend_factor": self.trend_factor,
            "grids": self.grids,
            "functionals": self.functionals,
        })
    }
}

/// Thresholds of the CF study.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CfThresholds {
    /// Absolute CF tolerance at the finest grid.
    pub tolerance: f64,
    /// SE multiplier at the finest grid.
    pub se_factor: f64,
    /// Combined-SE multiplier of the monotone-trend check.
    pub trend_factor: f64,
}

impl Default for CfThresholds {
    fn default() -> Self {
        Self {
            tolerance: 0.02,
            se_factor: 3.0,
            trend_factor: 2.0,
        }
    }
}

/// CF comparison for each `n` in `grid_family` (uniform grids on `[0, T]`),
/// with an independent seed per grid.
pub fn cf_convergence_study(
    model: &MarketModel,
    grid_family: &[usize],
    probe: &ProbeGrid,
    paths: usize,
    seed: u64,
    thresholds: CfThresholds,
) -> Result<ConvergenceReport> {
    if grid_family.is_empty() {
        return Err(Error::Input("empty grid family".into()));
    }
    let lay = BlockLayout::new(model.dim());
    if probe.probes.iter().any(|u| u.len() != lay.len()) {
        return Err(Error::Input(format!("probes must have length {}", lay.len())));
    }
    let limits: Vec<Vec<Complex64>> = probe
        .times
        .iter()
        .map(|&t| probe.probes.iter().map(|u| limit_cf(model, u, t)).collect())
        .collect::<Result<_>>()?;
    let np = probe.probes.len();
    let nt = probe.times.len();
    let mut rows = Vec::new();
    let mut grids = Vec::new();
    for &n in grid_family {
        let part = Partition::uniform(model.horizon, n)?;
        let idx: Vec<usize> = probe.times.iter().map(|&t| part.index_at_time(t)).collect();
        let acc = rng::par_accumulate(
            paths,
            rng::derive_seed(seed, n as u64),
            Purpose::Discrete,
            || ColumnAcc::new(2 * np * nt),
            |acc, _, r| {
                let mut z = vec![0.0; lay.len()];
                let mut row = vec![0.0; 2 * np * nt];
                rd::sample_integrator_path(model, &part, r, |i, dz| {
                    for (a, b) in z.iter_mut().zip(dz) {
                        *a += b;
                    }
                    for (ti, &target) in idx.iter().enumerate() {
                        if target == i {
                            for (pi, u) in probe.probes.iter().enumerate() {
                                let (s, c) = dot(u, &z).sin_cos();
                                let k = 2 * (ti * np + pi);
                                row[k] = c;
                                row[k + 1] = s;
                            }
                        }
                    }
                });
                acc.push(&row);
            },
            |a, b| a.merge(&b),
        );
        let mut sup_gap: f64 = 0.0;
        let mut max_se: f64 = 0.0;
        for (ti, &t) in probe.times.iter().enumerate() {
            for (pi, u) in probe.probes.iter().enumerate() {
                let k = 2 * (ti * np + pi);
                let est = CfEstimate::from_acc(&acc, k, k + 1);
                let lim = limits[ti][pi];
                let gap = (est.value - lim).norm();
                sup_gap = sup_gap.max(gap);
                max_se = max_se.max(est.se());
                rows.push(CfRow {
                    n,
                    t,
                    probe: pi,
                    label: probe.labels[pi].clone(),
                    norm: norm(u),
                    empirical_re: est.value.re,
                    empirical_im: est.value.im,
                    limit_re: lim.re,
                    limit_im: lim.im,
                    gap,
                    se: est.se(),
                });
            }
        }
        grids.push(GridSummary { n, sup_gap, max_se });
    }
    let finest = *grid_family.iter().max().expect("non-empty");
    let finest_pass = rows
        .iter()
        .filter(|r| r.n == finest)
        .all(|r| r.gap <= thresholds.tolerance + thresholds.se_factor * r.se);
    let trend_pass = grids.windows(2).all(|w| {
        let slack = thresholds.trend_factor * w[0].max_se.hypot(w[1].max_se);
        w[1].sup_gap <= w[0].sup_gap + slack
    });
    Ok(ConvergenceReport {
        rows,
        grids,
        functionals: Vec::new(),
        tolerance: thresholds.tolerance,
        se_factor: thresholds.se_factor,
        trend_factor: thresholds.trend_factor,
        finest_pass,
        trend_pass,
    })
}

// ---------------------------------------------------------------------------
// Test functions and truncation

/// `phi_r(s)`: 0 for `s <= r`, 1 for `s >= 2r`, quintic in between.
fn bump(s: f64, r: f64) -> f64 {
    1.0 - smooth_cutoff((s - r) / r)
}

/// `1 - smootherstep(x)` clamped to `[0, 1]`: 1 for `x <= 0`, 0 for `x >= 1`.
fn smooth_cutoff(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    1.0 - x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

type TestFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Bounded continuous functions that vanish on a ball around 0.
#[derive(Clone)]
pub enum TestFunction {
    Zero,
    /// `phi_r(|z_L|)` with `z_L` the jump block `(J, V)`.
    JumpBump { radius: f64 },
    /// `phi_r(|z_L|) * min(|z_L|^2, 1)`.
    JumpBumpSquare { radius: f64 },
    /// User function claimed to vanish for `|z| < radius`.
    Custom { name: String, radius: f64, f: Arc<TestFn> },
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl TestFunction {
    pub fn name(&self) -> String {
        match self {
            TestFunction::Zero => "zero".into(),
            TestFunction::JumpBump { radius } => format!("jump_bump_{radius}"),
            TestFunction::JumpBumpSquare { radius } => format!("jump_bump_square_{radius}"),
            TestFunction::Custom { name, .. } => name.clone(),
        }
    }

    pub fn eval(&self, lay: &BlockLayout, z: &[f64]) -> f64 {
        let jump_norm = || {
            let s = lay.j().start;
            norm(&z[s..lay.v().end])
        };
        match self {
            TestFunction::Zero => 0.0,
            TestFunction::JumpBump { radius } => bump(jump_norm(), *radius),
            TestFunction::JumpBumpSquare { radius } => {
                let r = jump_norm();
                bump(r, *radius) * (r * r).min(1.0)
            }
            TestFunction::Custom { f, .. } => f(z),
        }
    }

    /// Rejects functions that do not vanish near the origin.
    pub fn validate(&self, lay: &BlockLayout) -> Result<()> {
        let radius = match self {
            TestFunction::Zero => return Ok(()),
            TestFunction::JumpBump { radius }
            | TestFunction::JumpBumpSquare { radius }
            | TestFunction::Custom { radius, .. } => *radius,
        };
        if !(radius > 0.0) {
            return Err(Error::Input(format!("test function radius must be > 0, got {radius}")));
        }
        let pts = levy_model::halton_box(&vec![0.0; lay.len()], radius, 512);
        for p in pts {
            let r = norm(&p);
            if r >= radius {
                continue;
            }
            let v = self.eval(lay, &p);
            if v != 0.0 {
                return Err(Error::Input(format!(
                    "test function {} is {v} at |z| = {r} < {radius}; it must vanish near 0",
                    self.name()
                )));
            }
        }
        Ok(())
    }
}

/// `h(z) = z chi(|z|)` with `chi = 1` on `[0, inner]`, `0` beyond `outer`,
/// and a quintic (C^2) transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Truncation {
    pub inner: f64,
    pub outer: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            inner: 0.5,
            outer: 1.0,
        }
    }
}

impl Truncation {
    pub fn chi(&self, r: f64) -> f64 {
        smooth_cutoff((r - self.inner) / (self.outer - self.inner))
    }

    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        let c = self.chi(norm(z));
        for (o, x) in out.iter_mut().zip(z) {
            *o = c * x;
        }
    }
}

/// Visits `(z, weight)` for `z = (0, 0, e, psi(e) xi)` under the jump-size
/// law times a Gauss–Hermite rule in `xi`; weights are probabilities.
fn for_each_jump_point(model: &MarketModel, mut f: impl FnMut(&[f64], f64)) -> Result<()> {
    let d = model.dim();
    let lay = BlockLayout::new(d);
    let rule = quadrature::gauss_hermite(quadrature::nodes_per_dim(d, quadrature::DEFAULT_NODES));
    let mut z = vec![0.0; lay.len()];
    model.jumps.for_each_node(|e, we| {
        let p = levy_model::psi(&model.damping, e);
        z[lay.j()].copy_from_slice(e);
        quadrature::for_each_tensor(&rule, d, |xi, wx| {
            for k in 0..d {
                z[lay.v().start + k] = p * xi[k];
            }
            f(&z, we * wx);
        });
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FunctionalCheck {
    pub name: String,
    pub statistic: Estimate,
    pub limit: f64,
    pub gap: f64,
}

impl FunctionalCheck {
    pub fn pass(&self, n_se: f64) -> bool {
        self.gap <= n_se * self.statistic.se + EXACT_FLOOR
    }
}

/// `sum_{t_i <= t} E g(Delta_i Z^n)` against `t * intensity * E g(0, e, psi(e) xi)`.
pub fn jump_functional_check(
    model: &MarketModel,
    partition: &Partition,
    g: &TestFunction,
    t: f64,
    paths: usize,
    seed: u64,
) -> Result<FunctionalCheck> {
    let lay = BlockLayout::new(model.dim());
    g.validate(&lay)?;
    let mut lim = 0.0;
    if model.jumps.is_active() {
        for_each_jump_point(model, |z, w| lim += w * g.eval(&lay, z))?;
    }
    let limit = t * model.jumps.intensity() * lim;
    let last = partition.index_at_time(t);
    let acc = rng::par_accumulate(
        paths,
        seed,
        Purpose::Discrete,
        || ColumnAcc::new(1),
        |acc, _, r| {
            let mut s = 0.0;
            rd::sample_integrator_path(model, partition, r, |i, dz| {
                if i <= last {
                    s += g.eval(&lay, dz);
                }
            });
            acc.push(&[s]);
        },
        |a, b| a.merge(&b),
    );
    let statistic = acc.estimate(0);
    Ok(FunctionalCheck {
        name: g.name(),
        gap: (statistic.value - limit).abs(),
        statistic,
        limit,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CharacteristicRow {
    /// `"B"` or `"C"`.
    pub kind: String,
    pub k: usize,
    pub l: usize,
    pub label: String,
    pub empirical: Estimate,
    pub analytic: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CharacteristicsReport {
    pub n: usize,
    pub t: f64,
    pub n_se: f64,
    pub rows: Vec<CharacteristicRow>,
}

impl CharacteristicsReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, kind: &str, k: usize, l: usize) -> Option<&CharacteristicRow> {
        self.rows.iter().find(|r| r.kind == kind && r.k == k && r.l == l)
    }
}

/// Truncated drift and modified second characteristic:
/// `sum_i E h(Delta_i Z)` vs `B_t = t ∫ (h(z) - z) nu_L(dz)` and
/// `sum_i E (h_k h_l)(Delta_i Z)` vs
/// `C~_t = t (I on the W and 𝒲 blocks) + t ∫ h_k h_l nu_L(dz)`.
pub fn characteristics_check(
    model: &MarketModel,
    partition: &Partition,
    h: &Truncation,
    t: f64,
    paths: usize,
    seed: u64,
    n_se: f64,
) -> Result<CharacteristicsReport> {
    let lay = BlockLayout::new(model.dim());
    let len = lay.len();
    let pairs: Vec<(usize, usize)> = (0..len).flat_map(|k| (k..len).map(move |l| (k, l))).collect();
    let cols = len + pairs.len();

    let mut b_lim = vec![0.0; len];
    let mut c_lim = vec![0.0; pairs.len()];
    if model.jumps.is_active() {
        let mut hz = vec![0.0; len];
        for_each_jump_point(model, |z, w| {
            h.apply(z, &mut hz);
            for k in 0..len {
                b_lim[k] += w * (hz[k] - z[k]);
            }
            for (p, &(k, l)) in pairs.iter().enumerate() {
                c_lim[p] += w * hz[k] * hz[l];
            }
        })?;
    }
    let lam = model.jumps.intensity();
    for v in b_lim.iter_mut() {
        *v *= t * lam;
    }
    let continuous = lay.m().end;
    for (p, &(k, l)) in pairs.iter().enumerate() {
        c_lim[p] *= t * lam;
        if k == l && k < continuous {
            c_lim[p] += t;
        }
    }

    let last = partition.index_at_time(t);
    let acc = rng::par_accumulate(
        paths,
        seed,
        Purpose::Discrete,
        || ColumnAcc::new(cols),
        |acc, _, r| {
            let mut row = vec![0.0; cols];
            let mut hz = vec![0.0; len];
            rd::sample_integrator_path(model, partition, r, |i, dz| {
                if i > last {
                    return;
                }
                h.apply(dz, &mut hz);
                for k in 0..len {
                    row[k] += hz[k];
                }
                for (p, &(k, l)) in pairs.iter().enumerate() {
                    row[len + p] += hz[k] * hz[l];
                }
            });
            acc.push(&row);
        },
        |a, b| a.merge(&b),
    );

    let label = |k: usize| {
        let b = lay.block_of(k);
        let off = match b {
            "W" => lay.w().start,
            "M" => lay.m().start,
            "J" => lay.j().start,
            _ => lay.v().start,
        };
        format!("{b}{}", k - off)
    };
    let mut rows = Vec::new();
    for k in 0..len {
        let e = acc.estimate(k);
        rows.push(CharacteristicRow {
            kind: "B".into(),
            k,
            l: k,
            label: label(k),
            pass: (e.value - b_lim[k]).abs() <= n_se * e.se + EXACT_FLOOR,
            empirical: e,
            analytic: b_lim[k],
        });
    }
    for (p, &(k, l)) in pairs.iter().enumerate() {
        let e = acc.estimate(len + p);
        rows.push(CharacteristicRow {
            kind: "C".into(),
            k,
            l,
            label: format!("{},{}", label(k), label(l)),
            pass: (e.value - c_lim[p]).abs() <= n_se * e.se + EXACT_FLOOR,
            empirical: e,
            analytic: c_lim[p],
        });
    }
    Ok(CharacteristicsReport {
        n: partition.n(),
        t,
        n_se,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Independence

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationCell {
    pub left: usize,
    pub right: usize,
    pub corr: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorizationCell {
    pub probe: usize,
    pub gap: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndependenceReport {
    pub samples: usize,
    pub correlations: Vec<CorrelationCell>,
    pub factorization: Vec<FactorizationCell>,
    /// Largest `|corr|` with the SE of that cell.
    pub max_abs_corr: Estimate,
    /// Largest CF-factorization gap with the SE of that cell.
    pub max_cf_gap: Estimate,
}

impl IndependenceReport {
    /// Every cell within `n_se` standard errors of zero.
    pub fn pass(&self, n_se: f64) -> bool {
        self.correlations.iter().all(|c| c.corr.abs() <= n_se * c.se)
            && self.factorization.iter().all(|c| c.gap <= n_se * c.se)
    }

    /// Largest cell statistic in units of its own SE.
    pub fn max_z(&self) -> f64 {
        let zc = self.correlations.iter().map(|c| c.corr.abs() / c.se);
        let zf = self.factorization.iter().map(|c| c.gap / c.se);
        zc.chain(zf).fold(0.0, f64::max)
    }
}

/// Eight probe pairs `(a, b)` stratified over block pairs.
pub fn default_factorization_probes(dim: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d2 = dim * dim;
    let w = |r: f64| -> Vec<f64> {
        let mut v = vec![0.0; dim + d2];
        let s = r / (dim as f64).sqrt();
        v[..dim].iter_mut().for_each(|x| *x = s);
        v
    };
    let m = |r: f64| -> Vec<f64> {
        let mut v = vec![0.0; dim + d2];
        let s = r / (d2 as f64).sqrt();
        v[dim..].iter_mut().for_each(|x| *x = s);
        v
    };
    let j = |rj: f64, rv: f64| -> Vec<f64> {
        let s = 1.0 / (dim as f64).sqrt();
        let mut v = vec![rj * s; dim];
        v.extend(std::iter::repeat_n(rv * s, dim));
        v
    };
    let add = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| x + y).collect() };
    vec![
        (w(1.0), j(5.0, 0.0)),
        (w(1.0), j(0.0, 30.0)),
        (m(1.0), j(5.0, 0.0)),
        (m(1.0), j(0.0, 30.0)),
        (w(0.5), j(10.0, 0.0)),
        (w(2.0), j(0.0, 50.0)),
        (add(w(1.0), m(1.0)), j(5.0, 20.0)),
        (m(2.0), j(20.0, 0.0)),
    ]
}

/// Cross-correlations between every left and right coordinate, SE
/// `(1 - r^2)/sqrt(N)`, and `|phi_XY(a, b) - phi_X(a) phi_Y(b)|` with an
/// influence-function SE.
pub fn independence_check(
    left: &[Vec<f64>],
    right: &[Vec<f64>],
    probes: &[(Vec<f64>, Vec<f64>)],
) -> Result<IndependenceReport> {
    let n = left.len();
    if n < 10_000 || right.len() != n {
        return Err(Error::Input(format!(
            "independence check needs >= 10^4 paired samples, got {n} and {}",
            right.len()
        )));
    }
    let nl = left[0].len();
    let nr = right[0].len();
    let col = |s: &[Vec<f64>], k: usize| -> Vec<f64> { s.iter().map(|v| v[k]).collect() };
    let sqrt_n = (n as f64).sqrt();
    let mut correlations = Vec::new();
    for a in 0..nl {
        let x = col(left, a);
        for b in 0..nr {
            let y = col(right, b);
            let r = stats::correlation(&x, &y);
            correlations.push(CorrelationCell {
                left: a,
                right: b,
                corr: r,
                se: ((1.0 - r * r) / sqrt_n).max(f64::MIN_POSITIVE),
            });
        }
    }
    let mut factorization = Vec::new();
    for (p, (a, b)) in probes.iter().enumerate() {
        if a.len() != nl || b.len() != nr {
            return Err(Error::Input(format!("probe pair {p} has the wrong length")));
        }
        let ex: Vec<Complex64> = left.iter().map(|x| Complex64::from_polar(1.0, dot(a, x))).collect();
        let ey: Vec<Complex64> = right.iter().map(|y| Complex64::from_polar(1.0, dot(b, y))).collect();
        let mean = |v: &[Complex64]| -> Complex64 {
            let re: Vec<f64> = v.iter().map(|c| c.re).collect();
            let im: Vec<f64> = v.iter().map(|c| c.im).collect();
            Complex64::new(stats::mean(&re), stats::mean(&im))
        };
        let exy: Vec<Complex64> = ex.iter().zip(&ey).map(|(x, y)| x * y).collect();
        let (px, py, pxy) = (mean(&ex), mean(&ey), mean(&exy));
        let infl: Vec<Complex64> = (0..n).map(|k| exy[k] - py * ex[k] - px * ey[k]).collect();
        let re: Vec<f64> = infl.iter().map(|c| c.re).collect();
        let im: Vec<f64> = infl.iter().map(|c| c.im).collect();
        let se = (stats::variance(&re) + stats::variance(&im)).sqrt() / sqrt_n;
        factorization.push(FactorizationCell {
            probe: p,
            gap: (pxy - px * py).norm(),
            se,
        });
    }
    let max_abs_corr = correlations
        .iter()
        .max_by(|a, b| a.corr.abs().total_cmp(&b.corr.abs()))
        .map(|c| Estimate { value: c.corr.abs(), se: c.se })
        .unwrap_or(Estimate::exact(0.0));
    let max_cf_gap = factorization
        .iter()
        .max_by(|a, b| a.gap.total_cmp(&b.gap))
        .map(|c| Estimate { value: c.gap, se: c.se })
        .unwrap_or(Estimate::exact(0.0));
    Ok(IndependenceReport {
        samples: n,
        correlations,
        factorization,
        max_abs_corr,
        max_cf_gap,
    })
}

/// Splits samples of `Z` into the Brownian part `(W, 𝒲)` and the jump part `L`.
pub fn split_brownian_jump(dim: usize, samples: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let lay = BlockLayout::new(dim);
    let cut = lay.m().end;
    samples
        .iter()
        .map(|z| (z[..cut].to_vec(), z[cut..].to_vec()))
        .unzip()
}

/// Independence of `(W_T, 𝒲_T)` and `L_T` for `Z^n` on a uniform grid.
pub fn integrator_independence(
    model: &MarketModel,
    n: usize,
    paths: usize,
    seed: u64,
) -> Result<IndependenceReport> {
    let part = Partition::uniform(model.horizon, n)?;
    let mut at_t = rd::sample_integrator_at_times(model, &part, &[model.horizon], paths, seed);
    let (left, right) = split_brownian_jump(model.dim(), &at_t.remove(0));
    independence_check(&left, &right, &default_factorization_probes(model.dim()))
}

// ---------------------------------------------------------------------------
// Sample-state demonstration

#[derive(Debug, Clone, Serialize)]
pub struct SampleStateDemo {
    pub n: usize,
    pub paths: usize,
    /// `corr(X_T - x0, W_T^1)` with SE `(1 - r^2)/sqrt(N)`.
    pub corr: Estimate,
    pub variance: Estimate,
    /// `tr(A) T`.
    pub target_variance: f64,
}

/// Wealth under the randomized control `m = 0, v = I` without jumps: the
/// sample state is uncorrelated with `W` and has variance `tr(A) T`.
pub fn sample_state_demo(
    model: &MarketModel,
    n: usize,
    paths: usize,
    seed: u64,
    x0: f64,
    y0: &[f64],
) -> Result<SampleStateDemo> {
    if model.jumps.is_active() {
        return Err(Error::Input("the sample-state demonstration runs without jumps".into()));
    }
    let d = model.dim();
    let ctl = ConstantControl::isotropic(d, 0.0, 1.0)?;
    let sim = DiscreteSimulator::new(model, Arc::new(Partition::uniform(model.horizon, n)?), &ctl)?;
    let out = rd::map_scenarios(&sim, paths, seed, |_, r, sim| {
        let mut w = 0.0;
        let mut x = x0;
        sim.run_path(x0, y0, r, |s| {
            w += s.dw[0];
            x = s.x;
        })?;
        Ok((x - x0, w))
    })?;
    let (dx, w): (Vec<f64>, Vec<f64>) = out.into_iter().unzip();
    let r = stats::correlation(&dx, &w);
    Ok(SampleStateDemo {
        n,
        paths,
        corr: Estimate {
            value: r,
            se: (1.0 - r * r) / (paths as f64).sqrt(),
        },
        variance: stats::variance_se(&dx),
        target_variance: model.a_matrix(y0).trace() * model.horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_model::canonical_model;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn cf_estimator_basics() {
        let zeros = vec![vec![0.0; 4]; 2000];
        let one = empirical_cf(&zeros, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(one.value, Complex64::new(1.0, 0.0));
        let mut r = rng::stream(1, 0, Purpose::Synthetic);
        let g: Vec<Vec<f64>> = (0..100_000).map(|_| vec![r.sample(StandardNormal)]).collect();
        assert_eq!(empirical_cf(&g, &[0.0]).unwrap().value, Complex64::new(1.0, 0.0));
        let est = empirical_cf(&g, &[1.0]).unwrap();
        let bound = 4.0 / (g.len() as f64).sqrt();
        assert!((est.value.re - (-0.5f64).exp()).abs() <= bound);
        assert!(est.value.im.abs() <= bound);
        assert!(est.se_re <= 1.0 / (g.len() as f64).sqrt());
        let neg = empirical_cf(&g, &[-1.0]).unwrap();
        assert_eq!(neg.value, est.value.conj());
        assert!(est.value.norm() <= 1.0);
        assert!(empirical_cf(&g[..10], &[1.0]).is_err());
    }

    #[test]
    fn default_probe_grid_shape() {
        let g = ProbeGrid::default_for(1, vec![0.5, 1.0]);
        assert_eq!(g.probes.len(), 24);
        assert!(g.probes.iter().all(|u| u.len() == 4));
        let g2 = ProbeGrid::default_for(2, vec![1.0]);
        assert!(g2.probes.iter().all(|u| u.len() == 10));
        assert!(ProbeGrid::new(vec![vec![1.0]], vec!["a".into()], vec![1.0]).is_err());
    }

    #[test]
    fn brownian_probes_have_no_discretization_error() {
        let model = canonical_model().without_jumps();
        let probes = vec![vec![0.0; 4], vec![0.1, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0], vec![10.0, 0.0, 0.0, 0.0]];
        let labels = (0..4).map(|k| k.to_string()).collect();
        let grid = ProbeGrid::new(probes, labels, vec![0.5, 1.0]).unwrap();
        let rep = cf_convergence_study(&model, &[4, 16], &grid, 20_000, 3, CfThresholds::default()).unwrap();
        for r in &rep.rows {
            assert!(r.gap <= 3.0 * r.se + 1e-12, "{r:?}");
        }
    }

    #[test]
    fn m_block_variance_tends_to_horizon() {
        let model = canonical_model();
        let part = Partition::uniform(1.0, 256).unwrap();
        let z = rd::sample_integrator_at_times(&model, &part, &[1.0], 20_000, 6);
        let m: Vec<f64> = z[0].iter().map(|v| v[1]).collect();
        let est = stats::variance_se(&m);
        assert!(est.within(1.0, 4.0), "{est:?}");
    }

    #[test]
    fn functional_examples() {
        let model = canonical_model();
        let part = Partition::uniform(1.0, 128).unwrap();
        let zero = jump_functional_check(&model, &part, &TestFunction::Zero, 1.0, 2000, 1).unwrap();
        assert_eq!(zero.statistic.value, 0.0);
        assert_eq!(zero.limit, 0.0);
        let bumpf = TestFunction::JumpBump { radius: 0.05 };
        let at0 = jump_functional_check(&model, &part, &bumpf, 0.0, 2000, 1).unwrap();
        assert_eq!(at0.statistic.value, 0.0);
        assert_eq!(at0.limit, 0.0);
        let c = jump_functional_check(&model, &part, &bumpf, 1.0, 50_000, 2).unwrap();
        assert_relative_eq!(c.limit, 1.0, epsilon = 1e-12);
        assert!(c.pass(4.0), "{c:?}");
        let bad = TestFunction::Custom {
            name: "identity".into(),
            radius: 0.1,
            f: Arc::new(|z: &[f64]| z[0]),
        };
        assert!(matches!(
            jump_functional_check(&model, &part, &bad, 1.0, 10, 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn characteristics_without_jumps() {
        let model = canonical_model().without_jumps();
        let part = Partition::uniform(1.0, 1024).unwrap();
        let rep = characteristics_check(&model, &part, &Truncation::default(), 1.0, 10_000, 4, 4.0).unwrap();
        assert!(rep.pass(), "{:?}", rep.rows.iter().filter(|r| !r.pass).collect::<Vec<_>>());
        assert_eq!(rep.row("C", 0, 0).unwrap().analytic, 1.0);
        assert_eq!(rep.row("C", 1, 1).unwrap().analytic, 1.0);
        assert_eq!(rep.row("C", 2, 2).unwrap().analytic, 0.0);
        assert_eq!(rep.row("C", 0, 1).unwrap().analytic, 0.0);
    }

    #[test]
    fn truncation_is_identity_near_zero() {
        let h = Truncation::default();
        let mut out = [0.0; 2];
        h.apply(&[0.3, 0.2], &mut out);
        assert_eq!(out, [0.3, 0.2]);
        h.apply(&[1.0, 1.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert!(h.chi(0.75) > 0.0 && h.chi(0.75) < 1.0);
    }

    #[test]
    fn independence_detects_correlation() {
        let mut r = rng::stream(2, 0, Purpose::Synthetic);
        let n = 20_000;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = r.sample(StandardNormal);
            let y: f64 = r.sample(StandardNormal);
            let z: f64 = r.sample(StandardNormal);
            a.push(vec![x]);
            b.push(vec![y]);
            c.push(vec![0.5 * x + 0.75f64.sqrt() * z]);
        }
        let probes = vec![(vec![1.0], vec![1.0]), (vec![0.5], vec![2.0])];
        let indep = independence_check(&a, &b, &probes).unwrap();
        assert!(indep.pass(4.0), "{indep:?}");
        let dep = independence_check(&a, &c, &probes).unwrap();
        assert!(dep.max_abs_corr.value > 10.0 * dep.max_abs_corr.se);
        assert!(!dep.pass(4.0));
    }
}
