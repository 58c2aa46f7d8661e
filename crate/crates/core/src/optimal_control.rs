//! Closed-form optimal exploratory control for the two solvable coefficient
//! families, the quadratic value function, the HJB residual, the explicit
//! optimal wealth and the Lagrange multiplier.
//!
//! For both families `b^T Σ^{-1} b = K` is constant and `α(t) = e^{-(T-t)K}`
//! does not depend on `y`, so `𝓜_α = α b`, `𝓢_α = α Σ` and the optimal mean
//! `-(x - ŵ) Σ^{-1} b` does not depend on `α`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exploratory_sde::{self as es, EulerScratch, GaussianFeedbackLaw, NoiseTape};
use crate::levy_model::{self, CoefficientField, JumpLaw, MarketModel, ScaleProfile};
use crate::linalg;
use crate::quadrature;
use crate::rng::{self, Purpose};
use crate::stats::{ColumnAcc, Estimate};

/// Nested Monte Carlo settings for `β` in the proportional family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeynmanKacSettings {
    /// Time steps on `[t, T]`.
    pub grid: usize,
    pub paths: usize,
    pub seed: u64,
}

impl Default for FeynmanKacSettings {
    fn default() -> Self {
        Self {
            grid: 64,
            paths: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BetaRep {
    /// `β(t) = -(T-t)^2 (λD/4) K - (T-t)(λ/2) log_term`,
    /// `log_term = ln((λπ)^D / det Σ)`.
    Closed { log_term: f64 },
    FeynmanKac(FeynmanKacSettings),
}

/// Solution `(α, β)` of the PIDE system together with `λ` and `ŵ`.
#[derive(Debug, Clone)]
pub struct AlphaBeta {
    model: MarketModel,
    k: f64,
    lambda: f64,
    w_hat: f64,
    beta: BetaRep,
    /// `Σ~^{-1} b~` of the base coefficients.
    g: DVector<f64>,
    sigma_base: DMatrix<f64>,
}

impl AlphaBeta {
    pub fn model(&self) -> &MarketModel {
        &self.model
    }
    pub fn k(&self) -> f64 {
        self.k
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn w_hat(&self) -> f64 {
        self.w_hat
    }
    pub fn beta_rep(&self) -> &BetaRep {
        &self.beta
    }
    pub fn horizon(&self) -> f64 {
        self.model.horizon
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (-(self.horizon() - t) * self.k).exp()
    }

    /// `β(t, y)`; exact for the constant family.
    pub fn beta(&self, t: f64, y: &[f64]) -> Result<Estimate> {
        let tau = self.horizon() - t;
        let d = self.model.dim() as f64;
        match &self.beta {
            BetaRep::Closed { log_term } => {
                if self.lambda == 0.0 {
                    return Ok(Estimate::exact(0.0));
                }
                Ok(Estimate::exact(
                    -tau * tau * self.lambda * d / 4.0 * self.k - tau * self.lambda / 2.0 * log_term,
                ))
            }
            BetaRep::FeynmanKac(s) => self.beta_feynman_kac(t, y, s),
        }
    }

    /// Same `β` representation with another multiplier.
    pub fn with_w_hat(&self, w_hat: f64) -> Self {
        Self {
            w_hat,
            ..self.clone()
        }
    }

    /// Deliberately wrong `α = e^{-(T-t)k}`, for residual checks.
    pub fn with_k(&self, k: f64) -> Self {
        Self { k, ..self.clone() }
    }

    /// `Σ^{-1} b` at `y` (equal to `𝓢_α^{-1} 𝓜_α`).
    pub fn feedback_direction(&self, y: &[f64]) -> DVector<f64> {
        &self.g / self.model.coeffs.scale(y)
    }

    fn fk_integrand(&self, s: f64, y: &[f64]) -> f64 {
        let d = self.model.dim() as f64;
        let scale = self.model.coeffs.scale(y);
        let log_det = d * self.alpha(s).ln() + 2.0 * d * scale.ln() + log_det(&self.sigma_base);
        -0.5 * self.lambda * (d * (self.lambda * PI).ln() - log_det)
    }

    fn beta_feynman_kac(&self, t: f64, y: &[f64], s: &FeynmanKacSettings) -> Result<Estimate> {
        if self.lambda == 0.0 || t >= self.horizon() {
            return Ok(Estimate::exact(0.0));
        }
        if s.grid == 0 || s.paths < 2 {
            return Err(Error::Input("Feynman–Kac needs grid >= 1 and paths >= 2".into()));
        }
        let d = self.model.dim();
        let dt = (self.horizon() - t) / s.grid as f64;
        let sq = dt.sqrt();
        let (b, a, gm) = self.model.coeffs.base();
        let jumps = &self.model.jumps;
        let m1 = jumps.m1();
        let acc = rng::par_accumulate(
            s.paths,
            s.seed,
            Purpose::FeynmanKac,
            || ColumnAcc::new(1),
            |acc, _, r| {
                let mut y = y.to_vec();
                let mut dw = vec![0.0; d];
                let mut dj = vec![0.0; d];
                let mut e = vec![0.0; d];
                let mut f_prev = self.fk_integrand(t, &y);
                let mut integral = 0.0;
                for i in 0..s.grid {
                    let s_prev = t + i as f64 * dt;
                    for w in dw.iter_mut() {
                        *w = sq * rand::Rng::sample::<f64, _>(r, StandardNormal);
                    }
                    for k in 0..d {
                        dj[k] = -m1[k] * dt;
                    }
                    if jumps.is_active() {
                        for _ in 0..levy_model::poisson_count(r, jumps.intensity() * dt) {
                            jumps.sample_size(r, &mut e);
                            for k in 0..d {
                                dj[k] += e[k];
                            }
                        }
                    }
                    let scale = self.model.coeffs.scale(&y);
                    for row in 0..d {
                        let mut v = b[row] * dt;
                        for c in 0..d {
                            v += a[(row, c)] * dw[c] + gm[(row, c)] * dj[c];
                        }
                        y[row] += scale * v;
                    }
                    let f_next = self.fk_integrand(s_prev + dt, &y);
                    integral += 0.5 * (f_prev + f_next) * dt;
                    f_prev = f_next;
                }
                acc.push(&[integral]);
            },
            |x, z| x.merge(&z),
        );
        Ok(acc.estimate(0))
    }
}

fn log_det(s: &DMatrix<f64>) -> f64 {
    linalg::log_det_spd(s).expect("Σ validated positive definite")
}

/// Solves for `(α, β)`. The proportional family uses the default
/// Feynman–Kac settings.
pub fn solve_alpha_beta(model: &MarketModel, lambda: f64, w_hat: f64) -> Result<AlphaBeta> {
    solve_alpha_beta_with(model, lambda, w_hat, FeynmanKacSettings::default())
}

pub fn solve_alpha_beta_with(
    model: &MarketModel,
    lambda: f64,
    w_hat: f64,
    fk: FeynmanKacSettings,
) -> Result<AlphaBeta> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Input(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let d = model.dim();
    let (b, a, gm) = model.coeffs.base();
    let sigma_base = linalg::symmetrize(&(a * a.transpose() + gm * model.jumps.m2() * gm.transpose()));
    let g = linalg::spd_inverse(&sigma_base)? * b;
    let k = b.dot(&g);
    // K must be the same everywhere for α to be y-independent
    let probes = levy_model::halton_box(&vec![0.0; d], 3.0, 16);
    for y in &probes {
        let ky = model.coeffs.b(y).dot(&(levy_model::sigma_matrix(model, y)?.cholesky().expect("PD").solve(&model.coeffs.b(y))));
        if (ky - k).abs() > 1e-9 * k.abs().max(1.0) {
            return Err(Error::NotImplemented(format!(
                "b^T Σ^-1 b varies with y ({k} vs {ky}); α then solves the general PIDE system, which is out of scope"
            )));
        }
    }
    let beta = match &model.coeffs {
        CoefficientField::Constant { .. } => {
            if b.iter().all(|v| *v == 0.0) {
                return Err(Error::Domain("constant family requires b != 0".into()));
            }
            let log_term = if lambda > 0.0 {
                d as f64 * (lambda * PI).ln() - log_det(&sigma_base)
            } else {
                0.0
            };
            BetaRep::Closed { log_term }
        }
        CoefficientField::Proportional { .. } => BetaRep::FeynmanKac(fk),
    };
    Ok(AlphaBeta {
        model: model.clone(),
        k,
        lambda,
        w_hat,
        beta,
        g,
        sigma_base,
    })
}

/// `𝓜_α(t, y) = α(t) b(y)`.
pub fn script_m(ab: &AlphaBeta, t: f64, y: &[f64]) -> DVector<f64> {
    ab.model.coeffs.b(y) * ab.alpha(t)
}

/// `𝓢_α(t, y) = α(t) Σ(y)`.
pub fn script_s(ab: &AlphaBeta, t: f64, y: &[f64]) -> Result<DMatrix<f64>> {
    Ok(levy_model::sigma_matrix(&ab.model, y)? * ab.alpha(t))
}

/// `v(t, x, y) = α(t)(x - ŵ)^2 + β(t, y)`.
pub fn value_function(ab: &AlphaBeta, t: f64, x: f64, y: &[f64]) -> Result<f64> {
    Ok(value_estimate(ab, t, x, y)?.value)
}

pub fn value_estimate(ab: &AlphaBeta, t: f64, x: f64, y: &[f64]) -> Result<Estimate> {
    let beta = ab.beta(t, y)?;
    Ok(Estimate {
        value: ab.alpha(t) * (x - ab.w_hat).powi(2) + beta.value,
        se: beta.se,
    })
}

/// Value function of the no-jump one-dimensional problem in the Wang–Zhou form.
#[allow(clippy::too_many_arguments)]
pub fn wang_zhou_value(t: f64, x: f64, rho: f64, sigma: f64, lambda: f64, w_hat: f64, horizon: f64) -> f64 {
    let tau = horizon - t;
    let r2 = rho * rho;
    let entropy = if lambda == 0.0 {
        0.0
    } else {
        lambda / 2.0 * (r2 / 2.0 * tau * tau + tau * (lambda * PI / (sigma * sigma)).ln())
    };
    (-r2 * tau).exp() * (x - w_hat).powi(2) - entropy
}

/// `E X*_t = ŵ + (x0 - ŵ) e^{-K t}`.
pub fn mean_wealth_curve(k: f64, x0: f64, w_hat: f64, t: f64) -> f64 {
    w_hat + (x0 - w_hat) * (-k * t).exp()
}

/// `ŵ = (ẑ e^{KT} - x0) / (e^{KT} - 1)`.
pub fn lagrange_multiplier_closed(k: f64, horizon: f64, x0: f64, z_hat: f64) -> Result<f64> {
    if !(k > 0.0) || !(horizon > 0.0) {
        return Err(Error::Domain(format!(
            "closed multiplier needs K > 0 and T > 0, got K = {k}, T = {horizon}"
        )));
    }
    let e = (k * horizon).exp();
    Ok((z_hat * e - x0) / (e - 1.0))
}

// ---------------------------------------------------------------------------
// Optimal law

/// Treatment of `λ = 0`, where the optimal covariance degenerates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LambdaZeroMode {
    /// Refuse: the entropy of a point mass is `-inf`.
    Strict,
    /// Use `ε` in place of `λ` in the covariance.
    Regularized(f64),
    /// Classical mean-variance: covariance 0.
    Classical,
}

/// `N(-(x - ŵ) Σ(y)^{-1} b(y), (λ/2) 𝓢_α(t, y)^{-1})`.
#[derive(Debug, Clone)]
pub struct OptimalLaw {
    dim: usize,
    k: f64,
    horizon: f64,
    w_hat: f64,
    /// `λ` used in the covariance; 0 in classical mode.
    lambda_cov: f64,
    g: Vec<f64>,
    inv: Vec<f64>,
    inv_sqrt: Vec<f64>,
    log_det_base: f64,
    profile: Option<ScaleProfile>,
    pub warning: Option<String>,
}

impl OptimalLaw {
    fn scale(&self, y: &[f64]) -> f64 {
        self.profile.map_or(1.0, |p| p.eval(y))
    }

    fn cov_factor(&self, t: f64, y: &[f64]) -> f64 {
        let s = self.scale(y);
        let alpha = (-(self.horizon - t) * self.k).exp();
        self.lambda_cov / (2.0 * alpha * s * s)
    }

    pub fn is_degenerate(&self) -> bool {
        self.lambda_cov == 0.0
    }
}

impl GaussianFeedbackLaw for OptimalLaw {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> String {
        "optimal".into()
    }
    fn mean(&self, _: f64, x: f64, y: &[f64], out: &mut [f64]) {
        let f = -(x - self.w_hat) / self.scale(y);
        for (o, g) in out.iter_mut().zip(&self.g) {
            *o = f * g;
        }
    }
    fn cov(&self, t: f64, y: &[f64], out: &mut [f64]) {
        let f = self.cov_factor(t, y);
        for (o, v) in out.iter_mut().zip(&self.inv) {
            *o = f * v;
        }
    }
    fn cov_sqrt(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        let f = self.cov_factor(t, y).sqrt();
        for (o, v) in out.iter_mut().zip(&self.inv_sqrt) {
            *o = f * v;
        }
        Ok(())
    }
    fn log_det_cov(&self, t: f64, y: &[f64]) -> f64 {
        if self.lambda_cov == 0.0 {
            return f64::NEG_INFINITY;
        }
        self.dim as f64 * self.cov_factor(t, y).ln() - self.log_det_base
    }
}

pub fn optimal_law(ab: &AlphaBeta, mode: LambdaZeroMode) -> Result<OptimalLaw> {
    let (lambda_cov, warning) = if ab.lambda > 0.0 {
        (ab.lambda, None)
    } else {
        match mode {
            LambdaZeroMode::Strict => {
                return Err(Error::Admissibility(
                    "λ = 0 makes the optimal covariance vanish and its entropy -inf; \
                     use the regularized or classical mode"
                        .into(),
                ))
            }
            LambdaZeroMode::Regularized(eps) if eps > 0.0 => (
                eps,
                Some(format!("λ = 0: covariance regularized with ε = {eps}")),
            ),
            LambdaZeroMode::Regularized(eps) => {
                return Err(Error::Input(format!("regularization ε must be > 0, got {eps}")))
            }
            LambdaZeroMode::Classical => (0.0, Some("λ = 0: classical mode, covariance 0".into())),
        }
    };
    let inv = linalg::spd_inverse(&ab.sigma_base)?;
    let profile = match &ab.model.coeffs {
        CoefficientField::Proportional { u, .. } => Some(*u),
        CoefficientField::Constant { .. } => None,
    };
    Ok(OptimalLaw {
        dim: ab.model.dim(),
        k: ab.k,
        horizon: ab.horizon(),
        w_hat: ab.w_hat,
        lambda_cov,
        g: ab.g.iter().copied().collect(),
        inv_sqrt: linalg::to_row_major(&linalg::spd_inv_sqrt(&ab.sigma_base)?),
        inv: linalg::to_row_major(&inv),
        log_det_base: log_det(&ab.sigma_base),
        profile,
        warning,
    })
}

// ---------------------------------------------------------------------------
// HJB residual

#[derive(Debug, Clone, Serialize)]
pub struct HjbRow {
    pub t: f64,
    pub x: f64,
    pub y: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HjbReport {
    pub rows: Vec<HjbRow>,
    pub max_abs: f64,
    pub tolerance: f64,
}

impl HjbReport {
    pub fn pass(&self) -> bool {
        self.max_abs <= self.tolerance
    }
}

/// Residual tolerance for atom jump laws (exact integrals).
pub const HJB_TOL_ATOMS: f64 = 1e-8;
/// Residual tolerance when the jump integral is itself a quadrature.
pub const HJB_TOL_QUADRATURE: f64 = 1e-6;

/// 27 probes: three times, three wealths around `ŵ` and three prices.
pub fn default_hjb_probes(ab: &AlphaBeta) -> Vec<(f64, f64, Vec<f64>)> {
    let d = ab.model.dim();
    let t_max = ab.horizon();
    let mut out = Vec::with_capacity(27);
    for t in [0.0, 0.5 * t_max, 0.9 * t_max] {
        for dx in [-1.5, 0.0, 1.0] {
            for y in [-0.5, 0.0, 0.5] {
                out.push((t, ab.w_hat + dx, vec![y; d]));
            }
        }
    }
    out
}

/// Plugs `v = α(x - ŵ)^2 + β` and the closed-form minimizers into the HJB
/// equation. `∂_t` is a central difference, `∂_x` and `∂_xx` are exact
/// differences of the quadratic, and the jump integral is the jump-law
/// quadrature times a Gauss–Hermite rule in the exploration mark.
pub fn hjb_residual(ab: &AlphaBeta, probes: &[(f64, f64, Vec<f64>)]) -> Result<HjbReport> {
    if !ab.model.coeffs.is_constant() {
        return Err(Error::NotImplemented(
            "HJB residual is implemented for the constant-coefficient family".into(),
        ));
    }
    let model = &ab.model;
    let d = model.dim();
    let law = optimal_law(ab, LambdaZeroMode::Classical)?;
    let tolerance = match model.jumps.law() {
        JumpLaw::Atoms { .. } => HJB_TOL_ATOMS,
        _ => HJB_TOL_QUADRATURE,
    };
    let rule = quadrature::gauss_hermite(quadrature::nodes_per_dim(d, 16));
    // Steps follow the problem scales: time by 1/K, wealth by the diffusion
    // scale of X. Central differences are exact in x for any step.
    let ht = 1e-5 / ab.k.max(1.0);
    let mut rows = Vec::with_capacity(probes.len());
    let mut mu = vec![0.0; d];
    let mut sq = vec![0.0; d * d];
    for (t, x, y) in probes {
        let (t, x) = (*t, *x);
        law.mean(t, x, y, &mut mu);
        law.cov_sqrt(t, y, &mut sq)?;
        let muv = DVector::from_column_slice(&mu);
        let sqm = DMatrix::from_row_slice(d, d, &sq);
        let theta = &sqm * &sqm;
        let am = model.a_matrix(y);
        let spread = muv.dot(&(&am * &muv)) + (&am * &theta).trace();
        let hx = 0.5 * spread.sqrt().max(1.0);
        let v = |t: f64, x: f64| value_function(ab, t, x, y);
        let v0 = v(t, x)?;
        let vt = (v(t + ht, x)? - v(t - ht, x)?) / (2.0 * ht);
        let (vp, vm) = (v(t, x + hx)?, v(t, x - hx)?);
        let vx = (vp - vm) / (2.0 * hx);
        let vxx = (vp - 2.0 * v0 + vm) / (hx * hx);
        let bm = model.coeffs.b(y);
        let gm = model.coeffs.gamma(y);
        let mut jump = 0.0;
        if model.jumps.is_active() {
            let mut err = None;
            model.jumps.for_each_node(|e, we| {
                let ge = &gm * DVector::from_column_slice(e);
                quadrature::for_each_tensor(&rule, d, |u, wu| {
                    let h = &muv + &sqm * DVector::from_column_slice(u);
                    let delta = h.dot(&ge);
                    match v(t, x + delta) {
                        Ok(vj) => jump += we * wu * (vj - v0 - vx * delta),
                        Err(e) => err = Some(e),
                    }
                });
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            jump *= model.jumps.intensity();
        }
        let generator = vx * muv.dot(&bm) + 0.5 * vxx * spread + jump;
        let entropy = if ab.lambda > 0.0 {
            ab.lambda * es::entropy_rate(&law, t, x, y)
        } else {
            0.0
        };
        rows.push(HjbRow {
            t,
            x,
            y: y.clone(),
            residual: vt + generator - entropy,
        });
    }
    let max_abs = rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    Ok(HjbReport {
        rows,
        max_abs,
        tolerance,
    })
}

// ---------------------------------------------------------------------------
// Explicit optimal wealth

/// Weight of `d[M, Z]` at a jump in the explicit formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BracketWeight {
    /// `Δ[M, Z] / ℰ(-Z)_s` with the post-jump value; this is the exact
    /// solution of the linear wealth equation.
    PostJump,
    /// `Δ[M, Z] / ℰ(-Z)_{s-}`.
    PreJump,
}

/// `Z`, `M` and the Doléans–Dade exponential along one noise tape.
#[derive(Debug, Clone)]
pub struct StochasticExponentialPath {
    pub times: Vec<f64>,
    pub z: Vec<f64>,
    /// Cumulative `[Z, Z]^c`.
    pub zz_c: Vec<f64>,
    /// `(node, (1 - ΔZ) e^{ΔZ})` at every jump.
    pub jump_factors: Vec<(usize, f64)>,
    /// `ℰ(-Z)`.
    pub exp: Vec<f64>,
    pub m: Vec<f64>,
    /// Cumulative `[M, Z]`.
    pub mz: Vec<f64>,
    /// `∫ dM / ℰ_- + ∫ d[M, Z] / ℰ` under the chosen bracket weight.
    pub integral: Vec<f64>,
}

impl StochasticExponentialPath {
    /// `X* = ŵ + (x0 - ŵ + sqrt(λ/2) I) ℰ(-Z)` at node `k`.
    pub fn wealth(&self, k: usize, x0: f64, w_hat: f64, lambda: f64) -> f64 {
        w_hat + (x0 - w_hat + (0.5 * lambda).sqrt() * self.integral[k]) * self.exp[k]
    }

    pub fn last(&self) -> usize {
        self.times.len() - 1
    }
}

/// Loadings of `Z` and `M` on the base noise.
struct ExplicitCoeffs {
    d: usize,
    /// `dZ` drift per unit time: `g^T (b~ - gamma~ m1)`.
    z_drift: f64,
    /// `a~^T g`: loading of `dZ` on `dW`.
    z_w: Vec<f64>,
    /// `gamma~^T g`: `ΔZ = z_j · e`.
    z_j: Vec<f64>,
    /// `g^T A~ g`.
    zz_rate: f64,
    /// `Σ~^{-1/2} a~`, row-major: `dM = α^{-1/2} tr[(Σ~^{-1/2} a~) d𝒲^T]`.
    m_sheet: Vec<f64>,
    /// `Σ~^{-1/2}` and `gamma~` for the jump part of `M`.
    inv_sqrt: DMatrix<f64>,
    gamma: DMatrix<f64>,
}

impl ExplicitCoeffs {
    fn new(ab: &AlphaBeta) -> Result<Self> {
        let (b, a, gm) = ab.model.coeffs.base();
        let g = &ab.g;
        let inv_sqrt = linalg::spd_inv_sqrt(&ab.sigma_base)?;
        Ok(Self {
            d: b.len(),
            z_drift: g.dot(&(b - gm * ab.model.jumps.m1())),
            z_w: (a.transpose() * g).iter().copied().collect(),
            z_j: (gm.transpose() * g).iter().copied().collect(),
            zz_rate: g.dot(&(a * a.transpose() * g)),
            m_sheet: linalg::to_row_major(&(&inv_sqrt * a)),
            inv_sqrt,
            gamma: gm.clone(),
        })
    }

    fn delta_z(&self, e: &[f64]) -> f64 {
        self.z_j.iter().zip(e).map(|(p, q)| p * q).sum()
    }
}

const DEGENERATE_TOL: f64 = 1e-12;

/// Rejects atom laws with an atom where `ΔZ = 1`.
pub fn check_jump_sizes(ab: &AlphaBeta) -> Result<()> {
    let c = ExplicitCoeffs::new(ab)?;
    if let JumpLaw::Atoms { atoms, .. } = ab.model.jumps.law() {
        if !ab.model.jumps.is_active() {
            return Ok(());
        }
        for e in atoms {
            let dz = c.delta_z(e);
            if (1.0 - dz).abs() <= DEGENERATE_TOL {
                return Err(Error::DegenerateJump(format!(
                    "atom {e:?} gives ΔZ = 1; the explicit solution requires ΔZ != 1"
                )));
            }
        }
    }
    Ok(())
}

/// Builds `Z`, `M`, `ℰ(-Z)` and the integral term on every tape node.
pub fn stochastic_exponential_path(
    ab: &AlphaBeta,
    tape: &NoiseTape,
    weight: BracketWeight,
) -> Result<StochasticExponentialPath> {
    let c = ExplicitCoeffs::new(ab)?;
    exponential_from_coeffs(ab, &c, tape, weight)
}

fn exponential_from_coeffs(
    ab: &AlphaBeta,
    c: &ExplicitCoeffs,
    tape: &NoiseTape,
    weight: BracketWeight,
) -> Result<StochasticExponentialPath> {
    let d = c.d;
    let k = tape.intervals();
    let mut p = StochasticExponentialPath {
        times: tape.times.clone(),
        z: Vec::with_capacity(k + 1),
        zz_c: Vec::with_capacity(k + 1),
        jump_factors: Vec::with_capacity(tape.jumps.len()),
        exp: Vec::with_capacity(k + 1),
        m: Vec::with_capacity(k + 1),
        mz: Vec::with_capacity(k + 1),
        integral: Vec::with_capacity(k + 1),
    };
    let (mut z, mut zz, mut m, mut mz, mut integral) = (0.0, 0.0, 0.0, 0.0, 0.0);
    // log of the product of jump factors, tracked in signed form
    let mut jump_prod = 1.0;
    p.z.push(0.0);
    p.zz_c.push(0.0);
    p.exp.push(1.0);
    p.m.push(0.0);
    p.mz.push(0.0);
    p.integral.push(0.0);
    let mut jp = 0;
    for i in 0..k {
        let t0 = tape.times[i];
        let dt = tape.times[i + 1] - t0;
        let dw = &tape.dw[i * d..(i + 1) * d];
        let ds = &tape.dsheet[i * d * d..(i + 1) * d * d];
        let e_prev = *p.exp.last().expect("non-empty");
        let mut dz = c.z_drift * dt;
        for (l, w) in c.z_w.iter().zip(dw) {
            dz += l * w;
        }
        let ra = ab.alpha(t0).powf(-0.5);
        let dm: f64 = ra * c.m_sheet.iter().zip(ds).map(|(l, w)| l * w).sum::<f64>();
        z += dz;
        zz += c.zz_rate * dt;
        m += dm;
        integral += dm / e_prev;
        let mut e_now = (-z - 0.5 * zz).exp() * jump_prod;
        while jp < tape.jumps.len() && tape.jumps[jp].node == i + 1 {
            let j = &tape.jumps[jp];
            let t = tape.times[i + 1];
            let dzj = c.delta_z(&j.e);
            if (1.0 - dzj).abs() <= DEGENERATE_TOL {
                return Err(Error::DegenerateJump(format!(
                    "ΔZ = 1 at t = {t}; the explicit solution requires ΔZ != 1"
                )));
            }
            let xi = DVector::from_column_slice(&j.xi);
            let ge = &c.gamma * DVector::from_column_slice(&j.e);
            let dmj = ab.alpha(t).powf(-0.5) * (&c.inv_sqrt * xi).dot(&ge);
            let factor = (1.0 - dzj) * dzj.exp();
            let e_minus = e_now;
            z += dzj;
            jump_prod *= factor;
            e_now = (-z - 0.5 * zz).exp() * jump_prod;
            m += dmj;
            mz += dmj * dzj;
            integral += dmj / e_minus
                + match weight {
                    BracketWeight::PostJump => dmj * dzj / e_now,
                    BracketWeight::PreJump => dmj * dzj / e_minus,
                };
            p.jump_factors.push((i + 1, factor));
            jp += 1;
        }
        p.z.push(z);
        p.zz_c.push(zz);
        p.exp.push(e_now);
        p.m.push(m);
        p.mz.push(mz);
        p.integral.push(integral);
    }
    Ok(p)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplicitConfig {
    /// Steps of the fine tape on which the explicit solution is built.
    pub fine_steps: usize,
    /// Euler grids compared against it; each must divide `fine_steps`.
    pub euler_steps: Vec<usize>,
    pub paths: usize,
    pub seed: u64,
    pub weight: BracketWeight,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelGap {
    pub n: usize,
    /// RMS of `X*_T - X^Euler_T`.
    pub rms_wealth: Estimate,
    /// RMS of `ℰ(-Z)_T` against Euler for `dℰ = ℰ_- d(-Z)`.
    pub rms_exponential: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplicitRun {
    pub fine_steps: usize,
    pub paths: usize,
    pub terminal_mean: Estimate,
    pub exponential_mean: Estimate,
    pub levels: Vec<LevelGap>,
    /// `rms(n) / rms(2n)` for consecutive levels.
    pub wealth_ratios: Vec<f64>,
    pub exponential_ratios: Vec<f64>,
}

fn rms(acc: &ColumnAcc, k: usize) -> Estimate {
    let ms = acc.estimate(k);
    let r = ms.value.max(0.0).sqrt();
    Estimate {
        value: r,
        se: if r > 0.0 { ms.se / (2.0 * r) } else { 0.0 },
    }
}

/// Explicit optimal wealth on a fine tape and Euler solutions of the optimal
/// wealth equation on coarser grids driven by the same noise.
pub fn simulate_optimal_wealth_explicit(
    ab: &AlphaBeta,
    x0: f64,
    y0: &[f64],
    config: &ExplicitConfig,
) -> Result<ExplicitRun> {
    let model = &ab.model;
    let d = model.dim();
    check_jump_sizes(ab)?;
    if !(ab.lambda >= 0.0) {
        return Err(Error::Input("lambda must be >= 0".into()));
    }
    for &n in &config.euler_steps {
        if n == 0 || !config.fine_steps.is_multiple_of(n) {
            return Err(Error::Input(format!(
                "Euler grid {n} must divide the fine step count {}",
                config.fine_steps
            )));
        }
    }
    let coeffs = ExplicitCoeffs::new(ab)?;
    let law = optimal_law(ab, LambdaZeroMode::Classical)?;
    let nl = config.euler_steps.len();
    let cols = 2 + 2 * nl;
    struct Acc {
        cols: ColumnAcc,
        err: Option<Error>,
    }
    let acc = rng::par_accumulate(
        config.paths,
        config.seed,
        Purpose::NoiseTape,
        || Acc {
            cols: ColumnAcc::new(cols),
            err: None,
        },
        |acc, _, r| {
            if acc.err.is_some() {
                return;
            }
            let res = (|| -> Result<Vec<f64>> {
                let tape = NoiseTape::generate(model, config.fine_steps, r)?;
                let path = exponential_from_coeffs(ab, &coeffs, &tape, config.weight)?;
                let last = path.last();
                let x_star = path.wealth(last, x0, ab.w_hat, ab.lambda);
                let e_star = path.exp[last];
                let mut row = vec![0.0; cols];
                row[0] = x_star;
                row[1] = e_star;
                let mut scratch = EulerScratch::new(d);
                for (l, &n) in config.euler_steps.iter().enumerate() {
                    let factor = config.fine_steps / n;
                    let out = es::euler_on_tape(model, &law, &tape, factor, x0, y0, false, &mut scratch, |_| {})?;
                    row[2 + l] = (out.terminal - x_star).powi(2);
                    let e_euler = euler_exponential(&coeffs, &tape, factor)?;
                    row[2 + nl + l] = (e_euler - e_star).powi(2);
                }
                Ok(row)
            })();
            match res {
                Ok(row) => acc.cols.push(&row),
                Err(e) => acc.err = Some(e),
            }
        },
        |a, b| {
            if a.err.is_none() {
                a.err = b.err;
            }
            a.cols.merge(&b.cols);
        },
    );
    if let Some(e) = acc.err {
        return Err(e);
    }
    let c = &acc.cols;
    let levels: Vec<LevelGap> = config
        .euler_steps
        .iter()
        .enumerate()
        .map(|(l, &n)| LevelGap {
            n,
            rms_wealth: rms(c, 2 + l),
            rms_exponential: rms(c, 2 + nl + l),
        })
        .collect();
    let ratios = |f: fn(&LevelGap) -> f64| -> Vec<f64> { levels.windows(2).map(|w| f(&w[0]) / f(&w[1])).collect() };
    Ok(ExplicitRun {
        fine_steps: config.fine_steps,
        paths: config.paths,
        terminal_mean: c.estimate(0),
        exponential_mean: c.estimate(1),
        wealth_ratios: ratios(|g| g.rms_wealth.value),
        exponential_ratios: ratios(|g| g.rms_exponential.value),
        levels,
    })
}

/// Euler for `dℰ = ℰ_- d(-Z)` on the coarse scheme of the tape.
fn euler_exponential(c: &ExplicitCoeffs, tape: &NoiseTape, factor: usize) -> Result<f64> {
    let mut e = 1.0;
    tape.for_each_segment(factor, |seg| {
        let mut dz = c.z_drift * seg.dt;
        for (l, w) in c.z_w.iter().zip(seg.dw) {
            dz += l * w;
        }
        e -= e * dz;
        if let Some(j) = seg.jump {
            e -= e * c.delta_z(&j.e);
        }
        Ok(())
    })?;
    Ok(e)
}

// ---------------------------------------------------------------------------
// Lagrange multiplier by Monte Carlo

#[derive(Debug, Clone, Serialize)]
pub struct MultiplierEstimate {
    pub w_hat: f64,
    pub se: f64,
    pub method: String,
    /// `E ℰ(-Z)_T`.
    pub exponential_mean: Estimate,
    /// `E[I_T ℰ(-Z)_T]`.
    pub weighted_integral_mean: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplierConfig {
    pub fine_steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub weight: BracketWeight,
}

/// `ŵ = (ẑ - sqrt(λ/2) E[I ℰ_T] - x0 E ℰ_T) / (1 - E ℰ_T)` with a
/// delta-method standard error. `ab.w_hat()` is not used.
pub fn lagrange_multiplier_mc(ab: &AlphaBeta, x0: f64, z_hat: f64, config: &MultiplierConfig) -> Result<MultiplierEstimate> {
    check_jump_sizes(ab)?;
    if config.fine_steps == 0 || config.paths < 2 {
        return Err(Error::Input("multiplier MC needs fine_steps >= 1 and paths >= 2".into()));
    }
    let coeffs = ExplicitCoeffs::new(ab)?;
    struct Acc {
        cols: ColumnAcc,
        err: Option<Error>,
    }
    let acc = rng::par_accumulate(
        config.paths,
        config.seed,
        Purpose::NoiseTape,
        || Acc {
            cols: ColumnAcc::new(3),
            err: None,
        },
        |acc, _, r| {
            if acc.err.is_some() {
                return;
            }
            let res = NoiseTape::generate(&ab.model, config.fine_steps, r)
                .and_then(|tape| exponential_from_coeffs(ab, &coeffs, &tape, config.weight));
            match res {
                Ok(p) => {
                    let k = p.last();
                    let e = p.exp[k];
                    let ie = p.integral[k] * e;
                    acc.cols.push(&[e, ie, e * ie]);
                }
                Err(e) => acc.err = Some(e),
            }
        },
        |a, b| {
            if a.err.is_none() {
                a.err = b.err;
            }
            a.cols.merge(&b.cols);
        },
    );
    if let Some(e) = acc.err {
        return Err(e);
    }
    let c = &acc.cols;
    let eb = c.estimate(0);
    let ea = c.estimate(1);
    let denom = 1.0 - eb.value;
    if denom.abs() <= 3.0 * eb.se {
        return Err(Error::Inconclusive(format!(
            "1 - E ℰ(-Z)_T = {denom:e} is within 3 SE ({:e}) of 0",
            eb.se
        )));
    }
    let s = (0.5 * ab.lambda).sqrt();
    let num = z_hat - s * ea.value - x0 * eb.value;
    let w_hat = num / denom;
    let da = -s / denom;
    let db = (num - x0 * denom) / (denom * denom);
    let n = c.n as f64;
    let cov_ab = (c.mean(2) - ea.value * eb.value) * n / (n - 1.0) / n;
    let var = da * da * ea.se * ea.se + db * db * eb.se * eb.se + 2.0 * da * db * cov_ab;
    Ok(MultiplierEstimate {
        w_hat,
        se: var.max(0.0).sqrt(),
        method: "monte-carlo".into(),
        exponential_mean: eb,
        weighted_integral_mean: ea,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_model::{canonical_model, constant_model, JumpLaw};
    use approx::assert_relative_eq;

    const W_HAT: f64 = 1.479_213_450_606_002_4;

    fn canonical_ab() -> AlphaBeta {
        let model = canonical_model();
        let w = lagrange_multiplier_closed(model.k_value().unwrap(), 1.0, 1.0, 1.4).unwrap();
        solve_alpha_beta(&model, 0.1, w).unwrap()
    }

    fn no_jump_d1(rho: f64, sigma: f64) -> MarketModel {
        constant_model(&[rho * sigma], &[sigma], &[1.0], 0.0, JumpLaw::Atoms { atoms: vec![vec![0.0]], probs: vec![1.0] }, 0.5, 1.0)
            .unwrap()
    }

    #[test]
    fn canonical_closed_forms() {
        let ab = canonical_ab();
        assert_relative_eq!(ab.k(), 1.8, epsilon = 1e-12);
        assert_relative_eq!(ab.alpha(0.0), 0.165_298_888_221_586_5, epsilon = 1e-12);
        assert_eq!(ab.alpha(1.0), 1.0);
        assert_eq!(ab.beta(1.0, &[0.0]).unwrap().value, 0.0);
        assert_relative_eq!(ab.beta(0.0, &[0.0]).unwrap().value, -0.136_893_853_320_467_27, epsilon = 1e-12);
        assert_relative_eq!(ab.w_hat(), W_HAT, epsilon = 1e-12);
        assert_relative_eq!(value_function(&ab, 0.0, 1.0, &[0.0]).unwrap(), -0.098_933_702_321_156_75, epsilon = 1e-12);
        assert_eq!(value_function(&ab, 1.0, ab.w_hat(), &[0.0]).unwrap(), 0.0);
        assert_relative_eq!(value_function(&ab, 1.0, ab.w_hat() + 2.0, &[0.0]).unwrap(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(script_m(&ab, 0.0, &[0.0])[0], (-1.8f64).exp() * 0.3, epsilon = 1e-15);
        assert_relative_eq!(script_s(&ab, 0.0, &[0.0]).unwrap()[(0, 0)], 0.05 * (-1.8f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(script_s(&ab, 1.0, &[0.3]).unwrap()[(0, 0)], 0.05, epsilon = 1e-15);
        let zero = solve_alpha_beta(&canonical_model(), 0.0, 1.0).unwrap();
        assert_eq!(zero.beta(0.3, &[0.0]).unwrap().value, 0.0);
    }

    #[test]
    fn multiplier_and_mean_curve() {
        assert_relative_eq!(lagrange_multiplier_closed(1.8, 1.0, 1.0, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(lagrange_multiplier_closed(1.8, 1.0, 1.0, 1.4).unwrap(), W_HAT, epsilon = 1e-12);
        assert!((lagrange_multiplier_closed(1.8, 40.0, 1.0, 1.4).unwrap() - 1.4).abs() < 1e-12);
        assert!(matches!(lagrange_multiplier_closed(0.0, 1.0, 1.0, 1.4), Err(Error::Domain(_))));
        let w = lagrange_multiplier_closed(1.8, 1.0, 1.0, 1.4).unwrap();
        assert_eq!(mean_wealth_curve(1.8, 1.0, w, 0.0), 1.0);
        assert_relative_eq!(mean_wealth_curve(1.8, 1.0, w, 1.0), 1.4, epsilon = 1e-12);
        assert_relative_eq!(mean_wealth_curve(1.8, 1.0, w, 0.5), 1.284_379_801_050_001_6, epsilon = 1e-12);
    }

    #[test]
    fn optimal_law_examples() {
        let ab = canonical_ab();
        let law = optimal_law(&ab, LambdaZeroMode::Strict).unwrap();
        let mut m = [0.0];
        law.mean(0.3, ab.w_hat(), &[0.2], &mut m);
        assert_eq!(m[0], 0.0);
        law.mean(0.0, 1.0, &[0.0], &mut m);
        assert_relative_eq!(m[0], -6.0 * (1.0 - ab.w_hat()), epsilon = 1e-12);
        let mut c = [0.0];
        law.cov(0.0, &[0.0], &mut c);
        assert_relative_eq!(c[0], 1.8f64.exp(), epsilon = 1e-12);
        let zero = solve_alpha_beta(&canonical_model(), 0.0, 1.0).unwrap();
        assert!(optimal_law(&zero, LambdaZeroMode::Strict).is_err());
        assert!(optimal_law(&zero, LambdaZeroMode::Regularized(1e-3)).unwrap().warning.is_some());
        assert!(optimal_law(&zero, LambdaZeroMode::Classical).unwrap().is_degenerate());
    }

    #[test]
    fn theta_increases_with_lambda() {
        let model = canonical_model();
        let l1 = optimal_law(&solve_alpha_beta(&model, 0.1, 1.0).unwrap(), LambdaZeroMode::Strict).unwrap();
        let l2 = optimal_law(&solve_alpha_beta(&model, 0.2, 1.0).unwrap(), LambdaZeroMode::Strict).unwrap();
        for t in [0.0, 0.4, 0.99] {
            let (mut c1, mut c2) = ([0.0], [0.0]);
            l1.cov(t, &[0.0], &mut c1);
            l2.cov(t, &[0.0], &mut c2);
            assert!(c2[0] > c1[0]);
        }
    }

    #[test]
    fn wang_zhou_identity() {
        let (rho, sigma, lam) = (1.5, 0.2, 0.1);
        let model = no_jump_d1(rho, sigma);
        let w = 1.0;
        let ab = solve_alpha_beta(&model, lam, w).unwrap();
        let general = value_function(&ab, 0.0, w - 0.5, &[0.0]).unwrap();
        assert!((general - wang_zhou_value(0.0, w - 0.5, rho, sigma, lam, w, 1.0)).abs() <= 1e-12);
        assert_eq!(wang_zhou_value(1.0, 3.0, rho, sigma, lam, 1.0, 1.0), 4.0);
        assert_relative_eq!(
            wang_zhou_value(0.2, 3.0, rho, sigma, 0.0, 1.0, 1.0),
            (-rho * rho * 0.8f64).exp() * 4.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn hjb_examples() {
        let ab = canonical_ab();
        let probes = default_hjb_probes(&ab);
        assert_eq!(probes.len(), 27);
        let rep = hjb_residual(&ab, &probes).unwrap();
        assert!(rep.pass(), "{}", rep.max_abs);
        let bad = hjb_residual(&ab.with_k(1.01 * ab.k()), &probes).unwrap();
        assert!(bad.max_abs > 1e-3, "{}", bad.max_abs);
        let nj = solve_alpha_beta(&canonical_model().without_jumps(), 0.1, 1.2).unwrap();
        let rep = hjb_residual(&nj, &default_hjb_probes(&nj)).unwrap();
        assert!(rep.max_abs <= 1e-10 * 10.0, "{}", rep.max_abs);
    }

    #[test]
    fn script_s_matches_atom_sum_in_d2() {
        let model = constant_model(
            &[0.3, 0.1],
            &[0.2, 0.05, 0.0, 0.15],
            &[1.0, 0.2, -0.1, 0.8],
            1.5,
            JumpLaw::Atoms {
                atoms: vec![vec![0.1, 0.0], vec![-0.05, 0.2], vec![0.0, -0.1]],
                probs: vec![0.3, 0.3, 0.4],
            },
            0.5,
            1.0,
        )
        .unwrap();
        let ab = solve_alpha_beta(&model, 0.1, 1.0).unwrap();
        let t = 0.3;
        let s = script_s(&ab, t, &[0.0, 0.0]).unwrap();
        let a = model.a_matrix(&[0.0, 0.0]);
        let g = model.coeffs.gamma(&[0.0, 0.0]);
        let mut ee = DMatrix::<f64>::zeros(2, 2);
        model
            .jumps
            .for_each_node(|e, w| {
                let v = DVector::from_column_slice(e);
                ee += &v * v.transpose() * (w * ab.alpha(t) * 1.5);
            })
            .unwrap();
        let direct = a * ab.alpha(t) + &g * ee * g.transpose();
        assert!((s - direct).abs().max() <= 1e-12);
        let dir = linalg::spd_inverse(&script_s(&ab, t, &[0.0, 0.0]).unwrap()).unwrap() * script_m(&ab, t, &[0.0, 0.0]);
        assert!((dir - ab.feedback_direction(&[0.0, 0.0])).abs().max() <= 1e-12);
    }

    #[test]
    fn degenerate_jump_is_rejected() {
        // b = 1, a = 0.2, one atom e: ΔZ = e / (0.04 + e^2) = 1 at the root below
        let e = (1.0 - 0.84f64.sqrt()) / 2.0;
        let model = constant_model(&[1.0], &[0.2], &[1.0], 1.0, JumpLaw::Atoms { atoms: vec![vec![e]], probs: vec![1.0] }, 0.5, 1.0)
            .unwrap();
        let ab = solve_alpha_beta(&model, 0.1, 1.0).unwrap();
        assert!((ab.feedback_direction(&[0.0])[0] * e - 1.0).abs() < 1e-12);
        assert!(matches!(check_jump_sizes(&ab), Err(Error::DegenerateJump(_))));
        assert!(check_jump_sizes(&canonical_ab()).is_ok());
    }

    #[test]
    fn exponential_path_invariants() {
        let ab = canonical_ab();
        let mut r = rng::stream(11, 0, Purpose::NoiseTape);
        let tape = NoiseTape::generate(ab.model(), 256, &mut r).unwrap();
        let p = stochastic_exponential_path(&ab, &tape, BracketWeight::PostJump).unwrap();
        assert_eq!(p.exp[0], 1.0);
        let k = p.last();
        let prod: f64 = p.jump_factors.iter().map(|(_, f)| f).product();
        assert_relative_eq!(p.exp[k], (-p.z[k] - 0.5 * p.zz_c[k]).exp() * prod, max_relative = 1e-12);
        assert_relative_eq!(p.zz_c[k], 1.44, epsilon = 1e-12);
        for &(node, f) in &p.jump_factors {
            assert!(node > 0 && (f - 0.4 * 0.6f64.exp()).abs().min((f - 1.6 * (-0.6f64).exp()).abs()) < 1e-12);
        }
        // x0 = ŵ and λ = 0 keep the wealth at ŵ
        let ab0 = solve_alpha_beta(ab.model(), 0.0, 1.3).unwrap();
        let p0 = stochastic_exponential_path(&ab0, &tape, BracketWeight::PostJump).unwrap();
        assert!(p0.times.iter().enumerate().all(|(k, _)| p0.wealth(k, 1.3, 1.3, 0.0) == 1.3));
    }

    #[test]
    fn explicit_solution_solves_the_wealth_equation_at_jumps() {
        // one jump and no diffusion: Euler on the jump is exact, so only the
        // post-jump weighting reproduces it
        let model = constant_model(&[0.2], &[1e-9], &[1.0], 3.0, JumpLaw::Atoms { atoms: vec![vec![0.1], vec![-0.1]], probs: vec![0.5, 0.5] }, 0.5, 1.0)
            .unwrap();
        let ab = solve_alpha_beta(&model, 0.1, 1.2).unwrap();
        let law = optimal_law(&ab, LambdaZeroMode::Strict).unwrap();
        let mut r = rng::stream(5, 0, Purpose::NoiseTape);
        let tape = NoiseTape::generate(&model, 4096, &mut r).unwrap();
        assert!(!tape.jumps.is_empty());
        let post = stochastic_exponential_path(&ab, &tape, BracketWeight::PostJump).unwrap();
        let pre = stochastic_exponential_path(&ab, &tape, BracketWeight::PreJump).unwrap();
        let mut scratch = EulerScratch::new(1);
        let euler = es::euler_on_tape(&model, &law, &tape, 1, 1.0, &[0.0], false, &mut scratch, |_| {}).unwrap();
        let k = post.last();
        let gap_post = (post.wealth(k, 1.0, 1.2, 0.1) - euler.terminal).abs();
        let gap_pre = (pre.wealth(k, 1.0, 1.2, 0.1) - euler.terminal).abs();
        assert!(gap_post < 5e-3, "{gap_post}");
        assert!(gap_pre > 2.0 * gap_post, "{gap_pre} vs {gap_post}");
    }

    #[test]
    fn feynman_kac_reduces_to_closed_form() {
        use crate::levy_model::{CoefficientField, Damping, JumpSpec, ScaleProfile};
        let base = canonical_model();
        let (b, a, g) = base.coeffs.base();
        let prop = MarketModel::new(
            CoefficientField::Proportional {
                u: ScaleProfile { base: 1.0, amplitude: 0.0, slope: 1.0 },
                b_tilde: b.clone(),
                a_tilde: a.clone(),
                gamma_tilde: g.clone(),
            },
            JumpSpec::new(1, 1.0, base.jumps.law().clone()).unwrap(),
            Damping::new(0.5).unwrap(),
            1.0,
            &[0.0],
        )
        .unwrap();
        let fk = FeynmanKacSettings { grid: 16, paths: 500, seed: 1 };
        let abp = solve_alpha_beta_with(&prop, 0.1, W_HAT, fk).unwrap();
        let abc = solve_alpha_beta(&base, 0.1, W_HAT).unwrap();
        for t in [0.0, 0.5] {
            let p = abp.beta(t, &[0.0]).unwrap();
            let c = abc.beta(t, &[0.0]).unwrap().value;
            assert!((p.value - c).abs() <= 3.0 * p.se + 1e-12, "{p:?} vs {c}");
        }
        let law = optimal_law(&abp, LambdaZeroMode::Strict).unwrap();
        let mut m = [0.0];
        law.mean(0.0, 1.0, &[0.3], &mut m);
        assert_relative_eq!(m[0], -6.0 * (1.0 - W_HAT), epsilon = 1e-9);
    }

    #[test]
    fn proportional_mean_cancels_alpha() {
        use crate::levy_model::{CoefficientField, Damping, JumpSpec, ScaleProfile};
        let base = canonical_model();
        let (b, a, g) = base.coeffs.base();
        let u = ScaleProfile { base: 0.5, amplitude: 1.0, slope: 2.0 };
        let prop = MarketModel::new(
            CoefficientField::Proportional { u, b_tilde: b.clone(), a_tilde: a.clone(), gamma_tilde: g.clone() },
            JumpSpec::new(1, 1.0, base.jumps.law().clone()).unwrap(),
            Damping::new(0.5).unwrap(),
            1.0,
            &[0.0],
        )
        .unwrap();
        let ab = solve_alpha_beta_with(&prop, 0.1, 1.0, FeynmanKacSettings { grid: 8, paths: 200, seed: 3 }).unwrap();
        for y in [-1.0, 0.0, 0.7] {
            let m = script_m(&ab, 0.2, &[y]);
            let s = script_s(&ab, 0.2, &[y]).unwrap();
            assert_relative_eq!(m[0], (-0.8 * 1.8f64).exp() * u.eval(&[y]) * 0.3, epsilon = 1e-12);
            let dir = m[0] / s[(0, 0)];
            let direct = prop.coeffs.b(&[y])[0] / levy_model::sigma_matrix(&prop, &[y]).unwrap()[(0, 0)];
            assert!((dir - direct).abs() <= 1e-12);
        }
    }
}
