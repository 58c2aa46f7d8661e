//! Market model: coefficient field, finite-activity jump measure and damping.
//!
//! The jump part `J` is a compensated compound Poisson process with rate
//! `intensity` and jump-size law `jump_law`, so the Lévy measure is
//! `nu = intensity * law`. Moments `m1 = ∫ e nu(de)` and `m2 = ∫ e e^T nu(de)`
//! therefore already carry the intensity factor.
//!
//! The state process is
//! `dY = b(Y) dt + a(Y) dW + gamma(Y) dJ`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::{self, Rule};

const PROB_SUM_TOL: f64 = 1e-12;
const K_CONST_TOL: f64 = 1e-10;
/// Largest supported state dimension.
pub const MAX_DIM: usize = 16;
/// Default number of Σ positive-definiteness probes.
pub const DEFAULT_PROBES: usize = 32;

// ---------------------------------------------------------------------------
// Jumps

#[derive(Debug, Clone, PartialEq)]
pub enum JumpLaw {
    Atoms { atoms: Vec<Vec<f64>>, probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: DMatrix<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

impl JumpLaw {
    pub fn name(&self) -> &'static str {
        match self {
            JumpLaw::Atoms { .. } => "atoms",
            JumpLaw::Gaussian { .. } => "gaussian",
            JumpLaw::Uniform { .. } => "uniform",
        }
    }
}

#[derive(Debug, Clone)]
pub struct JumpSpec {
    dim: usize,
    intensity: f64,
    law: JumpLaw,
    m1: DVector<f64>,
    m2: DMatrix<f64>,
    // row-major factor L with L L^T = cov, Gaussian law only
    factor: Vec<f64>,
    quad_nodes: usize,
}

impl JumpSpec {
    pub fn new(dim: usize, intensity: f64, law: JumpLaw) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::ModelValidation(format!("dimension {dim} outside 1..={MAX_DIM}")));
        }
        if !(intensity >= 0.0 && intensity.is_finite()) {
            return Err(Error::ModelValidation(format!(
                "jump intensity must be finite and >= 0, got {intensity}"
            )));
        }
        let bad_dim = |what: &str, n: usize| {
            Error::ModelValidation(format!("{what} has length {n}, expected dimension {dim}"))
        };
        let mut factor = Vec::new();
        let (mean, second) = match &law {
            JumpLaw::Atoms { atoms, probs } => {
                if atoms.is_empty() || atoms.len() != probs.len() {
                    return Err(Error::ModelValidation(format!(
                        "{} atoms but {} probabilities",
                        atoms.len(),
                        probs.len()
                    )));
                }
                if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
                    return Err(Error::ModelValidation(format!("negative atom probability {p}")));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::ModelValidation(format!(
                        "atom probabilities sum to {total}, not 1"
                    )));
                }
                let mut m = DVector::zeros(dim);
                let mut s = DMatrix::zeros(dim, dim);
                for (e, &p) in atoms.iter().zip(probs) {
                    if e.len() != dim {
                        return Err(bad_dim("atom", e.len()));
                    }
                    let v = DVector::from_column_slice(e);
                    m += &v * p;
                    s += &v * v.transpose() * p;
                }
                (m, s)
            }
            JumpLaw::Gaussian { mean, cov } => {
                if mean.len() != dim {
                    return Err(bad_dim("gaussian mean", mean.len()));
                }
                if cov.nrows() != dim || cov.ncols() != dim {
                    return Err(bad_dim("gaussian covariance", cov.nrows()));
                }
                let root = linalg::psd_sqrt(cov).map_err(|e| {
                    Error::ModelValidation(format!("gaussian jump covariance: {e}"))
                })?;
                factor = linalg::to_row_major(&root);
                let m = DVector::from_column_slice(mean);
                let s = cov + &m * m.transpose();
                (m, s)
            }
            JumpLaw::Uniform { lower, upper } => {
                if lower.len() != dim {
                    return Err(bad_dim("uniform lower corner", lower.len()));
                }
                if upper.len() != dim {
                    return Err(bad_dim("uniform upper corner", upper.len()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
                    return Err(Error::ModelValidation(
                        "uniform box needs lower < upper in every coordinate".into(),
                    ));
                }
                let m = DVector::from_iterator(
                    dim,
                    lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)),
                );
                let mut s = &m * m.transpose();
                for i in 0..dim {
                    s[(i, i)] += (upper[i] - lower[i]).powi(2) / 12.0;
                }
                (m, s)
            }
        };
        let m2 = linalg::symmetrize(&(second * intensity));
        if !linalg::is_psd(&m2, 1e-10) {
            return Err(Error::ModelValidation(
                "jump second-moment matrix is not positive semidefinite".into(),
            ));
        }
        let quad_nodes = quadrature::nodes_per_dim(dim, quadrature::DEFAULT_NODES);
        Ok(Self {
            dim,
            intensity,
            law,
            m1: mean * intensity,
            m2,
            factor,
            quad_nodes,
        })
    }

    /// No jumps at all.
    pub fn none(dim: usize) -> Self {
        Self::new(
            dim,
            0.0,
            JumpLaw::Atoms {
                atoms: vec![vec![0.0; dim]],
                probs: vec![1.0],
            },
        )
        .expect("zero jump spec is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn intensity(&self) -> f64 {
        self.intensity
    }
    pub fn law(&self) -> &JumpLaw {
        &self.law
    }
    pub fn m1(&self) -> &DVector<f64> {
        &self.m1
    }
    pub fn m2(&self) -> &DMatrix<f64> {
        &self.m2
    }
    pub fn is_active(&self) -> bool {
        self.intensity > 0.0
    }
    /// Quadrature nodes per dimension for continuous laws.
    pub fn quadrature_nodes(&self) -> usize {
        self.quad_nodes
    }

    /// Draws one jump size into `out`.
    pub fn sample_size<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.law {
            JumpLaw::Atoms { atoms, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = atoms.len() - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                out.copy_from_slice(&atoms[pick]);
            }
            JumpLaw::Gaussian { mean, .. } => {
                let d = self.dim;
                let mut z = [0.0f64; MAX_DIM];
                let z = &mut z[..d];
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                for i in 0..d {
                    let mut s = mean[i];
                    for j in 0..d {
                        s += self.factor[i * d + j] * z[j];
                    }
                    out[i] = s;
                }
            }
            JumpLaw::Uniform { lower, upper } => {
                for i in 0..self.dim {
                    out[i] = rng.random_range(lower[i]..upper[i]);
                }
            }
        }
    }

    /// Visits the support of the jump-size law with probability weights:
    /// exact atoms, or a tensor Gauss rule for continuous laws.
    pub fn for_each_node(&self, mut f: impl FnMut(&[f64], f64)) -> Result<()> {
        match &self.law {
            JumpLaw::Atoms { atoms, probs } => {
                for (e, &p) in atoms.iter().zip(probs) {
                    f(e, p);
                }
                Ok(())
            }
            JumpLaw::Gaussian { mean, .. } => {
                let d = self.dim;
                let rule = self.checked_rule(quadrature::gauss_hermite)?;
                let mut e = vec![0.0; d];
                quadrature::for_each_tensor(&rule, d, |z, w| {
                    for i in 0..d {
                        e[i] = mean[i]
                            + (0..d).map(|j| self.factor[i * d + j] * z[j]).sum::<f64>();
                    }
                    f(&e, w);
                });
                Ok(())
            }
            JumpLaw::Uniform { lower, upper } => {
                let d = self.dim;
                let rule = self.checked_rule(quadrature::gauss_legendre)?;
                let scale = 0.5f64.powi(d as i32);
                let mut e = vec![0.0; d];
                quadrature::for_each_tensor(&rule, d, |x, w| {
                    for i in 0..d {
                        e[i] = 0.5 * (lower[i] + upper[i]) + 0.5 * (upper[i] - lower[i]) * x[i];
                    }
                    f(&e, w * scale);
                });
                Ok(())
            }
        }
    }

    fn checked_rule(&self, make: fn(usize) -> Rule) -> Result<Rule> {
        if self.quad_nodes < 4 {
            return Err(Error::UnsupportedLaw(format!(
                "{} jump law in dimension {} exceeds the tensor quadrature budget",
                self.law.name(),
                self.dim
            )));
        }
        Ok(make(self.quad_nodes))
    }

    /// `E[f(e)]` under the jump-size law (no intensity factor).
    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        self.for_each_node(|e, w| acc += w * f(e))?;
        Ok(acc)
    }
}

/// Poisson draw that is cheap for the small means of per-step jump counts.
pub fn poisson_count<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 30.0 {
        let u: f64 = rng.random();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    }
}

// ---------------------------------------------------------------------------
// Damping

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Damping {
    pub c: f64,
}

impl Damping {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::ModelValidation(format!("damping c must be > 0, got {c}")));
        }
        Ok(Self { c })
    }
}

/// `psi(x) = sqrt(|x|^2 + c^2) - c`, evaluated without cancellation.
pub fn psi(damping: &Damping, x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let c = damping.c;
    r2 / ((r2 + c * c).sqrt() + c)
}

// ---------------------------------------------------------------------------
// Coefficients

/// Smooth bounded scalar profile `s(y) = base + amplitude (1 + tanh(slope * ybar)) / 2`
/// with `ybar` the coordinate mean; `U(y) = s(y) I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleProfile {
    pub base: f64,
    pub amplitude: f64,
    pub slope: f64,
}

impl ScaleProfile {
    pub fn eval(&self, y: &[f64]) -> f64 {
        let ybar = if y.is_empty() { 0.0 } else { y.iter().sum::<f64>() / y.len() as f64 };
        self.base + self.amplitude * 0.5 * (1.0 + (self.slope * ybar).tanh())
    }

    /// Uniform lower bound `delta` with `U(y) >= delta I`.
    pub fn lower_bound(&self) -> f64 {
        self.base + self.amplitude.min(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientField {
    Constant {
        b: DVector<f64>,
        a: DMatrix<f64>,
        gamma: DMatrix<f64>,
    },
    Proportional {
        u: ScaleProfile,
        b_tilde: DVector<f64>,
        a_tilde: DMatrix<f64>,
        gamma_tilde: DMatrix<f64>,
    },
}

impl CoefficientField {
    pub fn dim(&self) -> usize {
        match self {
            CoefficientField::Constant { b, .. } => b.len(),
            CoefficientField::Proportional { b_tilde, .. } => b_tilde.len(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientField::Constant { .. })
    }

    /// Both families are a scalar multiple of fixed base coefficients:
    /// `(b, a, gamma)(y) = scale(y) * base`.
    pub fn scale(&self, y: &[f64]) -> f64 {
        match self {
            CoefficientField::Constant { .. } => 1.0,
            CoefficientField::Proportional { u, .. } => u.eval(y),
        }
    }

    pub fn base(&self) -> (&DVector<f64>, &DMatrix<f64>, &DMatrix<f64>) {
        match self {
            CoefficientField::Constant { b, a, gamma } => (b, a, gamma),
            CoefficientField::Proportional {
                b_tilde,
                a_tilde,
                gamma_tilde,
                ..
            } => (b_tilde, a_tilde, gamma_tilde),
        }
    }

    pub fn b(&self, y: &[f64]) -> DVector<f64> {
        self.base().0 * self.scale(y)
    }
    pub fn a(&self, y: &[f64]) -> DMatrix<f64> {
        self.base().1 * self.scale(y)
    }
    pub fn gamma(&self, y: &[f64]) -> DMatrix<f64> {
        self.base().2 * self.scale(y)
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone)]
pub struct MarketModel {
    pub coeffs: CoefficientField,
    pub jumps: JumpSpec,
    pub damping: Damping,
    pub horizon: f64,
}

/// Row-major copies of the base coefficients for inner loops.
#[derive(Debug, Clone)]
pub struct FlatCoefficients {
    pub dim: usize,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `gamma_base * m1`, the per-unit-scale jump compensator direction.
    pub gamma_m1: Vec<f64>,
}

impl MarketModel {
    /// Builds and validates the model, probing Σ around `center`.
    pub fn new(
        coeffs: CoefficientField,
        jumps: JumpSpec,
        damping: Damping,
        horizon: f64,
        center: &[f64],
    ) -> Result<Self> {
        let d = coeffs.dim();
        if d == 0 || d > MAX_DIM {
            return Err(Error::ModelValidation(format!("dimension {d} outside 1..={MAX_DIM}")));
        }
        let (_, a, g) = coeffs.base();
        if a.shape() != (d, d) || g.shape() != (d, d) {
            return Err(Error::ModelValidation(format!(
                "coefficient matrices must be {d}x{d}, got a {:?} and gamma {:?}",
                a.shape(),
                g.shape()
            )));
        }
        if jumps.dim() != d {
            return Err(Error::ModelValidation(format!(
                "jump dimension {} differs from model dimension {d}",
                jumps.dim()
            )));
        }
        if center.len() != d {
            return Err(Error::ModelValidation(format!(
                "probe centre has length {}, expected {d}",
                center.len()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::ModelValidation(format!("horizon must be > 0, got {horizon}")));
        }
        if let CoefficientField::Proportional { u, .. } = &coeffs {
            if !(u.lower_bound() > 0.0) || !u.slope.is_finite() {
                return Err(Error::ModelValidation(format!(
                    "U(y) must be bounded below by a positive multiple of I, got profile {u:?}"
                )));
            }
        }
        let model = Self {
            coeffs,
            jumps,
            damping,
            horizon,
        };
        model.validate_at(&halton_box(center, 1.0, DEFAULT_PROBES))?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    /// Σ must be positive definite at each probe; for the proportional family
    /// `b^T Σ^{-1} b` must not vary across probes.
    pub fn validate_at(&self, probes: &[Vec<f64>]) -> Result<()> {
        let mut k_ref: Option<f64> = None;
        for y in probes {
            let s = sigma_matrix(self, y)?;
            let k = quad_form_inv(&s, &self.coeffs.b(y))?;
            if let Some(k0) = k_ref {
                if (k - k0).abs() > K_CONST_TOL * k0.abs().max(1.0) {
                    return Err(Error::ModelValidation(format!(
                        "b^T Σ^-1 b varies across y: {k0} vs {k} at y = {y:?}"
                    )));
                }
            } else {
                k_ref = Some(k);
            }
        }
        Ok(())
    }

    pub fn a_matrix(&self, y: &[f64]) -> DMatrix<f64> {
        let a = self.coeffs.a(y);
        &a * a.transpose()
    }

    /// `K = b^T Σ^{-1} b`, constant for both supported families.
    pub fn k_value(&self) -> Result<f64> {
        let y0 = vec![0.0; self.dim()];
        quad_form_inv(&sigma_matrix(self, &y0)?, &self.coeffs.b(&y0))
    }

    pub fn flat(&self) -> FlatCoefficients {
        let (b, a, g) = self.coeffs.base();
        let gm1 = g * self.jumps.m1();
        FlatCoefficients {
            dim: self.dim(),
            b: b.iter().copied().collect(),
            a: linalg::to_row_major(a),
            gamma: linalg::to_row_major(g),
            gamma_m1: gm1.iter().copied().collect(),
        }
    }

    /// Same model with the jumps switched off.
    pub fn without_jumps(&self) -> Self {
        Self {
            jumps: JumpSpec::none(self.dim()),
            ..self.clone()
        }
    }
}

fn quad_form_inv(s: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64> {
    let chol = s.clone().cholesky().ok_or_else(|| {
        Error::ModelValidation("Σ is not positive definite".into())
    })?;
    Ok(b.dot(&chol.solve(b)))
}

/// `Σ(y) = A(y) + gamma(y) m2 gamma(y)^T`.
pub fn sigma_matrix(model: &MarketModel, y: &[f64]) -> Result<DMatrix<f64>> {
    let g = model.coeffs.gamma(y);
    let s = linalg::symmetrize(&(model.a_matrix(y) + &g * model.jumps.m2() * g.transpose()));
    if !linalg::is_pd(&s) {
        return Err(Error::ModelValidation(format!(
            "Σ(y) is not positive definite at y = {y:?} (minimum eigenvalue {:e})",
            linalg::min_eigenvalue(&s)
        )));
    }
    Ok(s)
}

/// Draws `(e, psi(e) xi)` with `e` from the jump-size law and `xi ~ N(0, I)`.
pub fn sample_augmented_jump<R: Rng + ?Sized>(model: &MarketModel, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let d = model.dim();
    let mut e = vec![0.0; d];
    model.jumps.sample_size(rng, &mut e);
    let scale = psi(&model.damping, &e);
    let v = (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (e, v)
}

/// Layout of a vector in `R^{D^2 + 3D}`: `(W, M, J, V)` with `M` of length `D^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub dim: usize,
}

impl BlockLayout {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
    pub fn len(&self) -> usize {
        self.dim * self.dim + 3 * self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn w(&self) -> std::ops::Range<usize> {
        0..self.dim
    }
    pub fn m(&self) -> std::ops::Range<usize> {
        self.dim..self.dim + self.dim * self.dim
    }
    pub fn j(&self) -> std::ops::Range<usize> {
        let s = self.dim + self.dim * self.dim;
        s..s + self.dim
    }
    pub fn v(&self) -> std::ops::Range<usize> {
        let s = 2 * self.dim + self.dim * self.dim;
        s..s + self.dim
    }
    /// Block name of coordinate `k`.
    pub fn block_of(&self, k: usize) -> &'static str {
        if self.w().contains(&k) {
            "W"
        } else if self.m().contains(&k) {
            "M"
        } else if self.j().contains(&k) {
            "J"
        } else {
            "V"
        }
    }
}

/// Characteristic exponent `kappa` of `vec(W, 𝒲, L)` at time 1, so that
/// `E exp(i u·Z_t) = exp(-t kappa(u))`.
pub fn limit_char_exponent(model: &MarketModel, u: &[f64]) -> Result<Complex64> {
    let lay = BlockLayout::new(model.dim());
    if u.len() != lay.len() {
        return Err(Error::Input(format!(
            "probe has length {}, expected {}",
            u.len(),
            lay.len()
        )));
    }
    let sq = |r: std::ops::Range<usize>| u[r].iter().map(|x| x * x).sum::<f64>();
    let gauss = 0.5 * sq(lay.w()) + 0.5 * sq(lay.m());
    if !model.jumps.is_active() {
        return Ok(Complex64::new(gauss, 0.0));
    }
    let uj = &u[lay.j()];
    let uv2 = sq(lay.v());
    let mut acc = Complex64::new(0.0, 0.0);
    model.jumps.for_each_node(|e, w| {
        let ue: f64 = uj.iter().zip(e).map(|(a, b)| a * b).sum();
        let p = psi(&model.damping, e);
        let damp = (-0.5 * p * p * uv2).exp();
        acc += w * (Complex64::new(1.0 - damp * ue.cos(), -damp * ue.sin() + ue));
    })?;
    Ok(Complex64::new(gauss, 0.0) + acc * model.jumps.intensity())
}

/// Halton points in the box `center ± half_width`.
pub fn halton_box(center: &[f64], half_width: f64, count: usize) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    (1..=count as u64)
        .map(|i| {
            center
                .iter()
                .enumerate()
                .map(|(d, c)| c + half_width * (2.0 * radical_inverse(i, PRIMES[d % 16]) - 1.0))
                .collect()
        })
        .collect()
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

// ---------------------------------------------------------------------------
// Config-file representation

/// A vector entry: a list, or a scalar broadcast to every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorInput {
    Scalar(f64),
    List(Vec<f64>),
}

impl VectorInput {
    pub fn to_vec(&self, dim: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            VectorInput::Scalar(s) => Ok(vec![*s; dim]),
            VectorInput::List(v) if v.len() == dim => Ok(v.clone()),
            VectorInput::List(v) => Err(Error::Config(format!(
                "{what}: expected {dim} entries, got {}",
                v.len()
            ))),
        }
    }
}

/// A matrix entry: a list of rows, or a scalar `s` meaning `s I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixInput {
    pub fn to_matrix(&self, dim: usize, what: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixInput::Scalar(s) => Ok(DMatrix::identity(dim, dim) * *s),
            MatrixInput::Rows(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("{what}: expected a {dim}x{dim} matrix")));
                }
                Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoefficientsConfig {
    Constant {
        b: VectorInput,
        a: MatrixInput,
        gamma: MatrixInput,
    },
    Proportional {
        base: f64,
        amplitude: f64,
        slope: f64,
        b_tilde: VectorInput,
        a_tilde: MatrixInput,
        gamma_tilde: MatrixInput,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum JumpLawConfig {
    Atoms {
        atoms: Vec<VectorInput>,
        probs: Vec<f64>,
    },
    Gaussian {
        mean: VectorInput,
        cov: MatrixInput,
    },
    Uniform {
        lower: VectorInput,
        upper: VectorInput,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpsConfig {
    pub intensity: f64,
    pub law: JumpLawConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dimension: usize,
    pub horizon: f64,
    pub coefficients: CoefficientsConfig,
    pub jumps: JumpsConfig,
    pub damping: Damping,
}

impl ModelConfig {
    pub fn build(&self, center: &[f64]) -> Result<MarketModel> {
        let d = self.dimension;
        if d == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        let coeffs = match &self.coefficients {
            CoefficientsConfig::Constant { b, a, gamma } => CoefficientField::Constant {
                b: DVector::from_vec(b.to_vec(d, "coefficients.b")?),
                a: a.to_matrix(d, "coefficients.a")?,
                gamma: gamma.to_matrix(d, "coefficients.gamma")?,
            },
            CoefficientsConfig::Proportional {
                base,
                amplitude,
                slope,
                b_tilde,
                a_tilde,
                gamma_tilde,
            } => CoefficientField::Proportional {
                u: ScaleProfile {
                    base: *base,
                    amplitude: *amplitude,
                    slope: *slope,
                },
                b_tilde: DVector::from_vec(b_tilde.to_vec(d, "coefficients.b_tilde")?),
                a_tilde: a_tilde.to_matrix(d, "coefficients.a_tilde")?,
                gamma_tilde: gamma_tilde.to_matrix(d, "coefficients.gamma_tilde")?,
            },
        };
        let law = match &self.jumps.law {
            JumpLawConfig::Atoms { atoms, probs } => JumpLaw::Atoms {
                atoms: atoms
                    .iter()
                    .map(|a| a.to_vec(d, "jumps.law.atoms"))
                    .collect::<Result<_>>()?,
                probs: probs.clone(),
            },
            JumpLawConfig::Gaussian { mean, cov } => JumpLaw::Gaussian {
                mean: mean.to_vec(d, "jumps.law.mean")?,
                cov: cov.to_matrix(d, "jumps.law.cov")?,
            },
            JumpLawConfig::Uniform { lower, upper } => JumpLaw::Uniform {
                lower: lower.to_vec(d, "jumps.law.lower")?,
                upper: upper.to_vec(d, "jumps.law.upper")?,
            },
        };
        let jumps = JumpSpec::new(d, self.jumps.intensity, law)?;
        MarketModel::new(coeffs, jumps, Damping::new(self.damping.c)?, self.horizon, center)
    }
}

/// The shipped desk-scale model: D = 1, T = 1, b = 0.3, a = 0.2, gamma = 1,
/// jumps ±0.1 with probability 1/2 each at rate 1, damping c = 0.5.
pub fn canonical_model() -> MarketModel {
    constant_model(
        &[0.3],
        &[0.2],
        &[1.0],
        1.0,
        JumpLaw::Atoms {
            atoms: vec![vec![0.1], vec![-0.1]],
            probs: vec![0.5, 0.5],
        },
        0.5,
        1.0,
    )
    .expect("canonical model is valid")
}

/// Constant-coefficient model from row-major slices.
pub fn constant_model(
    b: &[f64],
    a: &[f64],
    gamma: &[f64],
    intensity: f64,
    law: JumpLaw,
    c: f64,
    horizon: f64,
) -> Result<MarketModel> {
    let d = b.len();
    MarketModel::new(
        CoefficientField::Constant {
            b: DVector::from_column_slice(b),
            a: DMatrix::from_row_slice(d, d, a),
            gamma: DMatrix::from_row_slice(d, d, gamma),
        },
        JumpSpec::new(d, intensity, law)?,
        Damping::new(c)?,
        horizon,
        &vec![0.0; d],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};
    use crate::stats;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sigma_examples() {
        let m = canonical_model();
        assert_relative_eq!(sigma_matrix(&m, &[0.0]).unwrap()[(0, 0)], 0.05, epsilon = 1e-15);
        let no_gamma = constant_model(
            &[0.3],
            &[0.2],
            &[0.0],
            1.0,
            JumpLaw::Atoms {
                atoms: vec![vec![0.1], vec![-0.1]],
                probs: vec![0.5, 0.5],
            },
            0.5,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(sigma_matrix(&no_gamma, &[0.0]).unwrap()[(0, 0)], 0.04, epsilon = 1e-15);
        let two = constant_model(
            &[0.1, 0.2],
            &[1.0, 0.0, 0.0, 1.0],
            &[1.0, 0.0, 0.0, 1.0],
            1.0,
            JumpLaw::Gaussian {
                mean: vec![0.0, 0.0],
                cov: DMatrix::identity(2, 2),
            },
            0.5,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(
            sigma_matrix(&two, &[0.0, 0.0]).unwrap(),
            DMatrix::identity(2, 2) * 2.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let err = constant_model(
            &[0.3],
            &[0.0],
            &[0.0],
            0.0,
            JumpLaw::Atoms {
                atoms: vec![vec![0.1]],
                probs: vec![1.0],
            },
            0.5,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ModelValidation(ref s) if s.contains("y =")));
    }

    #[test]
    fn atom_probabilities_must_sum_to_one() {
        let law = JumpLaw::Atoms {
            atoms: vec![vec![0.1], vec![-0.1]],
            probs: vec![0.5, 0.5 + 1e-9],
        };
        assert!(JumpSpec::new(1, 1.0, law).is_err());
        assert!(JumpSpec::new(1, -1.0, JumpLaw::Atoms { atoms: vec![vec![0.0]], probs: vec![1.0] }).is_err());
    }

    #[test]
    fn psi_examples() {
        let d = Damping::new(0.5).unwrap();
        assert_eq!(psi(&d, &[0.0]), 0.0);
        assert_relative_eq!(psi(&d, &[1.0]), 1.25f64.sqrt() - 0.5, epsilon = 1e-15);
        assert_relative_eq!(psi(&d, &[3.0, 4.0]), 25.25f64.sqrt() - 0.5, epsilon = 1e-14);
        assert_relative_eq!(psi(&d, &[3.0, 4.0]), 4.524938, epsilon = 1e-6);
    }

    #[test]
    fn moments_agree_with_sampling() {
        let laws = [
            JumpLaw::Atoms {
                atoms: vec![vec![0.1, -0.2], vec![-0.3, 0.05], vec![0.0, 0.4]],
                probs: vec![0.2, 0.5, 0.3],
            },
            JumpLaw::Gaussian {
                mean: vec![0.05, -0.1],
                cov: DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.02]),
            },
            JumpLaw::Uniform {
                lower: vec![-0.2, 0.0],
                upper: vec![0.3, 0.1],
            },
        ];
        let n = 1_000_000;
        for law in laws {
            let spec = JumpSpec::new(2, 2.0, law).unwrap();
            let mut rng = rng::stream(11, 0, Purpose::Synthetic);
            let mut e = [0.0; 2];
            let mut cols: Vec<Vec<f64>> = (0..5).map(|_| Vec::with_capacity(n)).collect();
            for _ in 0..n {
                spec.sample_size(&mut rng, &mut e);
                cols[0].push(2.0 * e[0]);
                cols[1].push(2.0 * e[1]);
                cols[2].push(2.0 * e[0] * e[0]);
                cols[3].push(2.0 * e[0] * e[1]);
                cols[4].push(2.0 * e[1] * e[1]);
            }
            let targets = [
                spec.m1()[0],
                spec.m1()[1],
                spec.m2()[(0, 0)],
                spec.m2()[(0, 1)],
                spec.m2()[(1, 1)],
            ];
            for (c, t) in cols.iter().zip(targets) {
                let est = stats::mean_se(c);
                assert!(est.within(t, 4.0), "{} vs {t}", est.value);
            }
            let q = spec.expect(|e| e[0] * e[1]).unwrap() * 2.0;
            assert_relative_eq!(q, spec.m2()[(0, 1)], epsilon = 1e-12);
        }
    }

    #[test]
    fn augmented_jump_moments() {
        let m = canonical_model();
        let mut rng = rng::stream(5, 0, Purpose::Synthetic);
        let n = 1_000_000;
        let mut vs = Vec::with_capacity(n);
        let mut v2 = Vec::with_capacity(n);
        for _ in 0..n {
            let (e, v) = sample_augmented_jump(&m, &mut rng);
            assert!(e[0] == 0.1 || e[0] == -0.1);
            vs.push(v[0]);
            v2.push(v[0] * v[0]);
        }
        assert!(stats::mean_se(&vs).within(0.0, 4.0));
        let target = (0.26f64.sqrt() - 0.5).powi(2);
        assert_relative_eq!(target, 9.8e-5, epsilon = 1e-6);
        assert!(stats::mean_se(&v2).within(target, 4.0));

        let point = constant_model(
            &[0.3],
            &[0.2],
            &[1.0],
            1.0,
            JumpLaw::Atoms {
                atoms: vec![vec![0.25]],
                probs: vec![1.0],
            },
            0.5,
            1.0,
        )
        .unwrap();
        for _ in 0..100 {
            assert_eq!(sample_augmented_jump(&point, &mut rng).0, vec![0.25]);
        }
    }

    #[test]
    fn exponent_examples() {
        let m = canonical_model();
        let mut u = vec![0.0; 4];
        assert_eq!(limit_char_exponent(&m, &u).unwrap(), Complex64::new(0.0, 0.0));
        u[0] = 1.0;
        assert_relative_eq!(limit_char_exponent(&m, &u).unwrap().re, 0.5, epsilon = 1e-15);
        u[0] = 0.0;
        u[2] = 5.0;
        let k = limit_char_exponent(&m, &u).unwrap();
        assert_relative_eq!(k.re, 1.0 - 0.5f64.cos(), epsilon = 1e-14);
        assert_relative_eq!(k.im, 0.0, epsilon = 1e-14);
        assert_relative_eq!(k.re, 0.122417, epsilon = 1e-6);
    }

    #[test]
    fn exponent_matches_brute_force_cf() {
        let m = canonical_model();
        let n = 1_000_000usize;
        let u = [0.0, 0.0, 5.0, 30.0];
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        let mut rng = rng::stream(21, 0, Purpose::Synthetic);
        for _ in 0..n {
            let count = poisson_count(&mut rng, 1.0);
            let mut j = -m.jumps.m1()[0];
            let mut v = 0.0;
            for _ in 0..count {
                let (e, x) = sample_augmented_jump(&m, &mut rng);
                j += e[0];
                v += x[0];
            }
            let phase = u[2] * j + u[3] * v;
            re.push(phase.cos());
            im.push(phase.sin());
        }
        let cf = (-limit_char_exponent(&m, &u).unwrap()).exp();
        assert!(stats::mean_se(&re).within(cf.re, 4.0));
        assert!(stats::mean_se(&im).within(cf.im, 4.0));
    }

    #[test]
    fn augmented_measure_second_moment_bound() {
        let m = constant_model(
            &[0.1, 0.2],
            &[0.3, 0.0, 0.1, 0.2],
            &[1.0, 0.0, 0.0, 1.0],
            1.5,
            JumpLaw::Uniform {
                lower: vec![-0.5, -0.2],
                upper: vec![0.4, 0.6],
            },
            0.5,
            1.0,
        )
        .unwrap();
        let mut rng = rng::stream(3, 0, Purpose::Synthetic);
        let n = 200_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let (e, v) = sample_augmented_jump(&m, &mut rng);
                m.jumps.intensity() * (e.iter().chain(&v).map(|x| x * x).sum::<f64>())
            })
            .collect();
        let est = stats::mean_se(&vals);
        let bound = 3.0 * m.jumps.m2().trace();
        assert!(est.value <= bound + 4.0 * est.se);
    }

    #[test]
    fn proportional_family_has_constant_k() {
        let cfg: ModelConfig = toml::from_str(
            r#"
            dimension = 2
            horizon = 1.0
            [coefficients]
            variant = "proportional"
            base = 0.8
            amplitude = 0.5
            slope = 1.3
            b_tilde = [0.2, 0.1]
            a_tilde = [[0.3, 0.0], [0.05, 0.25]]
            gamma_tilde = 1.0
            [jumps]
            intensity = 1.0
            [jumps.law]
            kind = "gaussian"
            mean = 0.0
            cov = 0.01
            [damping]
            c = 0.5
            "#,
        )
        .unwrap();
        let m = cfg.build(&[0.0, 0.0]).unwrap();
        let k0 = m.k_value().unwrap();
        for y in halton_box(&[0.0, 0.0], 3.0, 16) {
            let s = sigma_matrix(&m, &y).unwrap();
            let b = m.coeffs.b(&y);
            let k = b.dot(&(linalg::spd_inverse(&s).unwrap() * &b));
            assert_relative_eq!(k, k0, epsilon = 1e-12);
            assert!(linalg::is_psd(&(s - m.a_matrix(&y)), 1e-12));
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad = r#"
            dimension = 1
            horizon = 1.0
            colour = "blue"
            [coefficients]
            variant = "constant"
            b = 0.3
            a = 0.2
            gamma = 1.0
            [jumps]
            intensity = 1.0
            [jumps.law]
            kind = "atoms"
            atoms = [0.1, -0.1]
            probs = [0.5, 0.5]
            [damping]
            c = 0.5
        "#;
        assert!(toml::from_str::<ModelConfig>(bad).is_err());
        let good = bad.replace("colour = \"blue\"", "");
        let m = toml::from_str::<ModelConfig>(&good).unwrap().build(&[0.0]).unwrap();
        assert_relative_eq!(m.k_value().unwrap(), 1.8, epsilon = 1e-12);
        let typo = good.replace("gamma = 1.0", "gamma = 1.0\nbeta = 2.0");
        assert!(toml::from_str::<ModelConfig>(&typo).is_err());
    }

    proptest! {
        #[test]
        fn psi_is_one_lipschitz(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
            c in 0.01f64..3.0,
        ) {
            let d = Damping::new(c).unwrap();
            let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!((psi(&d, &x) - psi(&d, &y)).abs() <= dist + 1e-12);
            prop_assert!(psi(&d, &x) > 0.0 || x.iter().all(|v| *v == 0.0));
        }

        #[test]
        fn exponent_has_nonnegative_real_part_and_symmetry(
            u in proptest::collection::vec(-60.0f64..60.0, 4),
        ) {
            let m = canonical_model();
            let k = limit_char_exponent(&m, &u).unwrap();
            prop_assert!(k.re >= -1e-14);
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            let kn = limit_char_exponent(&m, &neg).unwrap();
            prop_assert!((kn - k.conj()).norm() < 1e-12);
        }
    }
}
