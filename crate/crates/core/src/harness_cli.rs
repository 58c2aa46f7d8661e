//! Experiment runner: config loading, experiment dispatch and report files.
//!
//! A run resolves a config file plus command-line overrides into an
//! [`ExperimentConfig`], executes one experiment and produces an
//! [`ExperimentReport`] whose rows each carry a PASS/FAIL status. Reports are
//! written into a fresh directory per run and never overwrite earlier runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exploratory_sde::{self as es, ConstantLaw, GaussianFeedbackLaw, PerturbedLaw, SimConfig};
use crate::levy_model::{MarketModel, ModelConfig, VectorInput};
use crate::optimal_control::{
    self as oc, AlphaBeta, BracketWeight, ExplicitConfig, FeynmanKacSettings, LambdaZeroMode, MultiplierConfig,
};
use crate::rng;
use crate::stats::Estimate;
use crate::weak_convergence_lab::{self as wcl, CfThresholds, ProbeGrid};

/// Environment variable overriding the output directory.
pub const ENV_OUT: &str = "JUMPEX_OUT";
/// Environment variable fixing the worker thread count.
pub const ENV_THREADS: &str = "JUMPEX_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Characteristic-function convergence of the discrete integrator.
    Converge,
    /// Monte Carlo cost of the optimal and perturbed laws against the value function.
    ValueCheck,
    /// Closed-form and Monte Carlo Lagrange multiplier.
    Lagrange,
    /// HJB residual of the closed-form solution.
    Hjb,
    /// Sample-state demonstration without jumps.
    DemoSampleState,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Converge => "converge",
            Experiment::ValueCheck => "value-check",
            Experiment::Lagrange => "lagrange",
            Experiment::Hjb => "hjb",
            Experiment::DemoSampleState => "demo-sample-state",
        }
    }

    pub fn all() -> [Experiment; 5] {
        [
            Experiment::Converge,
            Experiment::ValueCheck,
            Experiment::Lagrange,
            Experiment::Hjb,
            Experiment::DemoSampleState,
        ]
    }

    fn defaults(self) -> RunSettings {
        let base = RunSettings {
            paths: Some(20_000),
            steps: Some(256),
            n_grid: None,
            fine_steps: None,
            probe_times: None,
        };
        match self {
            Experiment::Converge => RunSettings {
                n_grid: Some(vec![16, 32, 64, 128, 256, 512, 1024]),
                probe_times: Some(vec![0.5, 1.0]),
                ..base
            },
            Experiment::Lagrange => RunSettings {
                fine_steps: Some(64),
                ..base
            },
            _ => base,
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::all().into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Experiment::all().iter().map(|e| e.name()).collect();
            Error::Input(format!("unknown experiment '{s}'; valid names: {}", names.join(", ")))
        })
    }
}

// ---------------------------------------------------------------------------
// Config

/// Run-size settings; every field is optional so tables can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub n_grid: Option<Vec<usize>>,
    pub fine_steps: Option<usize>,
    pub probe_times: Option<Vec<f64>>,
}

impl RunSettings {
    fn or(self, fallback: RunSettings) -> RunSettings {
        RunSettings {
            paths: self.paths.or(fallback.paths),
            steps: self.steps.or(fallback.steps),
            n_grid: self.n_grid.or(fallback.n_grid),
            fine_steps: self.fine_steps.or(fallback.fine_steps),
            probe_times: self.probe_times.or(fallback.probe_times),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_z_hat")]
    pub z_hat: f64,
    #[serde(default = "default_y0")]
    pub y0: VectorInput,
    /// Fixed multiplier; the closed form from `z_hat` when absent.
    #[serde(default)]
    pub w_hat: Option<f64>,
    /// `strict`, `classical` or `regularized:<eps>`.
    #[serde(default = "default_lambda_zero")]
    pub lambda_zero: String,
}

fn default_lambda() -> f64 {
    0.1
}
fn default_x0() -> f64 {
    1.0
}
fn default_z_hat() -> f64 {
    1.4
}
fn default_y0() -> VectorInput {
    VectorInput::Scalar(0.0)
}
fn default_lambda_zero() -> String {
    "regularized:1e-6".into()
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            x0: default_x0(),
            z_hat: default_z_hat(),
            y0: default_y0(),
            w_hat: None,
            lambda_zero: default_lambda_zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub cf_tolerance: f64,
    pub cf_se_factor: f64,
    pub cf_trend_factor: f64,
    /// Optimal-law cost within this many SE of `v`.
    pub value_se: f64,
    /// Perturbed-law cost at least `v` minus this many SE.
    pub perturbed_se: f64,
    pub multiplier_se: f64,
    /// `E X*_T` within this many SE of `z_hat`.
    pub mean_se: f64,
    /// Residual bound; chosen from the jump law when absent.
    pub hjb_tolerance: Option<f64>,
    pub hjb_perturbation: f64,
    pub hjb_detection: f64,
    pub demo_se: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        let cf = CfThresholds::default();
        Self {
            cf_tolerance: cf.tolerance,
            cf_se_factor: cf.se_factor,
            cf_trend_factor: cf.trend_factor,
            value_se: 3.0,
            perturbed_se: 2.0,
            multiplier_se: 3.0,
            mean_se: 3.0,
            hjb_tolerance: None,
            hjb_perturbation: 1.01,
            hjb_detection: 1e-3,
            demo_se: 4.0,
        }
    }
}

/// On-disk config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Path to a separate model file, relative to this config.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub fine_steps: Option<usize>,
    #[serde(default)]
    pub probe_times: Option<Vec<f64>>,
    /// Competing laws for `value-check`.
    #[serde(default = "default_laws")]
    pub laws: Vec<String>,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub feynman_kac: Option<FeynmanKacConfig>,
    /// Per-experiment run settings keyed by experiment name.
    #[serde(default)]
    pub experiments: BTreeMap<String, RunSettings>,
}

fn default_seed() -> u64 {
    1
}

fn default_laws() -> Vec<String> {
    vec!["perturbed:0.5".into(), "perturbed:1.5".into(), "perturbed:1,2".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeynmanKacConfig {
    pub grid: usize,
    pub paths: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Fully resolved settings of one run. Serialized verbatim into reports.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelConfig,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub n_grid: Vec<usize>,
    pub fine_steps: usize,
    pub probe_times: Vec<f64>,
    pub laws: Vec<String>,
    pub problem: ProblemConfig,
    pub thresholds: Thresholds,
    pub feynman_kac: FeynmanKacConfig,
    #[serde(skip)]
    pub out: PathBuf,
}

fn parse_config_text(text: &str, path: &Path) -> Result<ConfigFile> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        Some("json") => serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        _ => Err(Error::Config(format!(
            "{}: config must have a .toml or .json extension",
            path.display()
        ))),
    }
}

fn read_model_file(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        _ => Err(Error::Config(format!("{}: model file must be .toml or .json", path.display()))),
    }
}

impl ExperimentConfig {
    /// Reads `path` and applies overrides: command line, then
    /// `experiments.<name>`, then top-level keys, then built-in defaults.
    /// The output directory additionally honours `JUMPEX_OUT`.
    pub fn load(path: &Path, experiment: Experiment, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file = parse_config_text(&text, path)?;
        let env_out = std::env::var_os(ENV_OUT).map(PathBuf::from);
        Self::resolve(file, path.parent().unwrap_or(Path::new(".")), experiment, overrides, env_out)
    }

    pub fn resolve(
        file: ConfigFile,
        base_dir: &Path,
        experiment: Experiment,
        overrides: &Overrides,
        env_out: Option<PathBuf>,
    ) -> Result<Self> {
        let model = match (file.model, &file.model_file) {
            (Some(m), None) => m,
            (None, Some(p)) => read_model_file(&base_dir.join(p))?,
            (Some(_), Some(_)) => return Err(Error::Config("give either `model` or `model_file`, not both".into())),
            (None, None) => return Err(Error::Config("missing `model` table or `model_file`".into())),
        };
        for name in file.experiments.keys() {
            name.parse::<Experiment>()
                .map_err(|e| Error::Config(format!("experiments.{name}: {e}")))?;
        }
        let top = RunSettings {
            paths: file.paths,
            steps: file.steps,
            n_grid: file.n_grid,
            fine_steps: file.fine_steps,
            probe_times: file.probe_times,
        };
        let cli = RunSettings {
            paths: overrides.paths,
            steps: overrides.steps,
            ..Default::default()
        };
        let section = file.experiments.get(experiment.name()).cloned().unwrap_or_default();
        let s = cli.or(section).or(top).or(experiment.defaults());
        let fk = file.feynman_kac.unwrap_or(FeynmanKacConfig {
            grid: 64,
            paths: 10_000,
        });
        let cfg = Self {
            experiment,
            model,
            seed: overrides.seed.unwrap_or(file.seed),
            paths: s.paths.unwrap_or(20_000),
            steps: s.steps.unwrap_or(256),
            n_grid: s.n_grid.unwrap_or_default(),
            fine_steps: s.fine_steps.unwrap_or(64),
            probe_times: s.probe_times.unwrap_or_default(),
            laws: file.laws,
            problem: file.problem,
            thresholds: file.thresholds,
            feynman_kac: fk,
            out: overrides
                .out
                .clone()
                .or(env_out)
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("reports")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::Config(format!("{name}: {msg}")));
        if self.paths < 2 {
            return field("paths", format!("must be >= 2, got {}", self.paths));
        }
        if self.steps == 0 {
            return field("steps", "must be >= 1".into());
        }
        if self.fine_steps == 0 {
            return field("fine_steps", "must be >= 1".into());
        }
        if self.experiment == Experiment::Converge && self.n_grid.is_empty() {
            return field("n_grid", "converge needs at least one grid".into());
        }
        if self.n_grid.contains(&0) {
            return field("n_grid", "grid sizes must be >= 1".into());
        }
        if !(self.problem.lambda >= 0.0) || !self.problem.lambda.is_finite() {
            return field("problem.lambda", format!("must be finite and >= 0, got {}", self.problem.lambda));
        }
        parse_lambda_zero(&self.problem.lambda_zero)?;
        self.problem.y0.to_vec(self.model.dimension, "problem.y0")?;
        if self.feynman_kac.grid == 0 || self.feynman_kac.paths < 2 {
            return field("feynman_kac", "needs grid >= 1 and paths >= 2".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved config (output directory excluded).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn build_model(&self) -> Result<MarketModel> {
        let y0 = self.y0()?;
        self.model.build(&y0)
    }

    pub fn y0(&self) -> Result<Vec<f64>> {
        self.problem.y0.to_vec(self.model.dimension, "problem.y0")
    }
}

pub fn parse_lambda_zero(s: &str) -> Result<LambdaZeroMode> {
    match s {
        "strict" => Ok(LambdaZeroMode::Strict),
        "classical" => Ok(LambdaZeroMode::Classical),
        _ => match s.strip_prefix("regularized:").map(str::parse::<f64>) {
            Some(Ok(eps)) if eps > 0.0 => Ok(LambdaZeroMode::Regularized(eps)),
            _ => Err(Error::Config(format!(
                "problem.lambda_zero: expected strict, classical or regularized:<eps > 0>, got '{s}'"
            ))),
        },
    }
}

/// Parses `optimal`, `perturbed:<mean factor>[,<cov factor>]` or
/// `constant:<mean>,<variance>` (isotropic).
pub fn parse_law(spec: &str, optimal: &Arc<dyn GaussianFeedbackLaw>) -> Result<Arc<dyn GaussianFeedbackLaw>> {
    let bad = || Error::Config(format!("laws: cannot parse '{spec}'"));
    let nums = |s: &str| -> Result<Vec<f64>> { s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect() };
    if spec == "optimal" {
        return Ok(optimal.clone());
    }
    if let Some(rest) = spec.strip_prefix("perturbed:") {
        let v = nums(rest)?;
        let (mf, cf) = match v.as_slice() {
            [m] => (*m, 1.0),
            [m, c] => (*m, *c),
            _ => return Err(bad()),
        };
        return Ok(Arc::new(PerturbedLaw::new(optimal.clone(), mf, cf)?));
    }
    if let Some(rest) = spec.strip_prefix("constant:") {
        let v = nums(rest)?;
        let [m, var] = v.as_slice() else {
            return Err(bad());
        };
        return Ok(Arc::new(ConstantLaw::isotropic(optimal.dim(), *m, *var)?));
    }
    Err(bad())
}

// ---------------------------------------------------------------------------
// Report

/// A number with its uncertainty: an SE or the marker `exact`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub value: f64,
    pub se: Option<f64>,
}

impl Cell {
    pub fn exact(value: f64) -> Self {
        Self { value, se: None }
    }

    pub fn se_text(&self) -> String {
        self.se.map_or_else(|| "exact".to_string(), |s| format!("{s:e}"))
    }
}

impl From<Estimate> for Cell {
    fn from(e: Estimate) -> Self {
        Self {
            value: e.value,
            se: if e.se == 0.0 { None } else { Some(e.se) },
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Cell", 2)?;
        st.serialize_field("value", &self.value)?;
        match self.se {
            Some(se) => st.serialize_field("se", &se)?,
            None => st.serialize_field("se", "exact")?,
        }
        st.end()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub estimate: Cell,
    pub target: Option<Cell>,
    /// The acceptance rule in words.
    pub tolerance: String,
    pub pass: bool,
}

impl CheckRow {
    fn info(name: impl Into<String>, estimate: Cell) -> Self {
        Self {
            name: name.into(),
            estimate,
            target: None,
            tolerance: "reported".into(),
            pass: true,
        }
    }

    /// `|estimate - target| <= k * sqrt(se_e^2 + se_t^2)`.
    fn within(name: impl Into<String>, estimate: Cell, target: Cell, k: f64) -> Self {
        let se = estimate.se.unwrap_or(0.0).hypot(target.se.unwrap_or(0.0));
        Self {
            name: name.into(),
            estimate,
            target: Some(target),
            tolerance: format!("|diff| <= {k} SE"),
            pass: (estimate.value - target.value).abs() <= k * se,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub file: String,
    #[serde(skip)]
    pub content: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub config_digest: String,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub config: ExperimentConfig,
    pub rows: Vec<CheckRow>,
    pub pass: bool,
    pub warnings: Vec<String>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn failing_rows(&self) -> Vec<&CheckRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    /// JSON of everything except the wall clock.
    pub fn body_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_clock_seconds");
        }
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# experiment: {}", self.experiment.name());
        let _ = writeln!(out, "# config_digest: {}", self.config_digest);
        let _ = writeln!(out, "# seed: {}", self.seed);
        let _ = writeln!(
            out,
            "# thresholds: {}",
            serde_json::to_string(&self.thresholds).expect("thresholds serialize")
        );
        let _ = writeln!(out, "# status: {}", if self.pass { "PASS" } else { "FAIL" });
        let _ = writeln!(out, "# wall_clock_seconds: {:.3}", self.wall_clock_seconds);
        out.push_str("name,estimate,estimate_se,target,target_se,tolerance,status\n");
        for r in &self.rows {
            let (t, tse) = match r.target {
                Some(c) => (format!("{:e}", c.value), c.se_text()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{:e},{},{},{},{},{}",
                csv_field(&r.name),
                r.estimate.value,
                r.estimate.se_text(),
                t,
                tse,
                csv_field(&r.tolerance),
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        out
    }

    /// Human-readable summary for the terminal.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} [{}] seed {} digest {}\n",
            self.experiment.name(),
            if self.pass { "PASS" } else { "FAIL" },
            self.seed,
            &self.config_digest[..12]
        );
        for r in &self.rows {
            let target = r
                .target
                .map(|c| format!(" target {}", short(c)))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "  {:<4} {:<32} {}{} [{}]",
                if r.pass { "PASS" } else { "FAIL" },
                r.name,
                short(r.estimate),
                target,
                r.tolerance
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
        out
    }
}

fn short(c: Cell) -> String {
    let num = |v: f64| {
        if v != 0.0 && v.abs() < 1e-3 {
            format!("{v:.3e}")
        } else {
            format!("{v:.6}")
        }
    };
    match c.se {
        Some(se) => format!("{} ± {:.2e}", num(c.value), se),
        None => format!("{} (exact)", num(c.value)),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub json: bool,
    pub csv: bool,
}

impl Formats {
    pub const BOTH: Formats = Formats { json: true, csv: true };
}

/// Writes the report into a new directory `<out>/<experiment>-<digest>-runNNN`
/// and returns it. Existing directories are never touched.
pub fn write_report(report: &ExperimentReport, out: &Path, formats: Formats) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stem = format!("{}-{}", report.experiment.name(), &report.config_digest[..12]);
    let dir = (1..)
        .map(|k| out.join(format!("{stem}-run{k:03}")))
        .find_map(|d| match fs::create_dir(&d) {
            Ok(()) => Some(Ok(d)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => None,
            Err(e) => Some(Err(e)),
        })
        .expect("unbounded search")?;
    let write_new = |name: &str, content: &str| -> Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(dir.join(name))?;
        f.write_all(content.as_bytes())?;
        Ok(())
    };
    if formats.json {
        write_new("report.json", &report.to_json())?;
    }
    if formats.csv {
        write_new("report.csv", &report.to_csv())?;
    }
    for a in &report.artifacts {
        write_new(&a.file, &a.content)?;
    }
    Ok(dir)
}

// ---------------------------------------------------------------------------
// Experiments

/// Runs the configured experiment.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let model = config.build_model()?;
    let mut out = Outcome::default();
    match config.experiment {
        Experiment::Converge => converge(config, &model, &mut out)?,
        Experiment::ValueCheck => value_check(config, &model, &mut out)?,
        Experiment::Lagrange => lagrange(config, &model, &mut out)?,
        Experiment::Hjb => hjb(config, &model, &mut out)?,
        Experiment::DemoSampleState => demo_sample_state(config, &model, &mut out)?,
    }
    Ok(ExperimentReport {
        experiment: config.experiment,
        config_digest: config.digest(),
        seed: config.seed,
        thresholds: config.thresholds.clone(),
        config: config.clone(),
        pass: out.rows.iter().all(|r| r.pass),
        rows: out.rows,
        warnings: out.warnings,
        artifacts: out.artifacts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Default)]
struct Outcome {
    rows: Vec<CheckRow>,
    warnings: Vec<String>,
    artifacts: Vec<Artifact>,
}

impl Outcome {
    fn artifact(&mut self, file: &str, content: String) {
        self.artifacts.push(Artifact {
            file: file.into(),
            content,
        });
    }
}

fn w_hat(config: &ExperimentConfig, model: &MarketModel) -> Result<f64> {
    match config.problem.w_hat {
        Some(w) => Ok(w),
        None => oc::lagrange_multiplier_closed(model.k_value()?, model.horizon, config.problem.x0, config.problem.z_hat),
    }
}

fn alpha_beta(config: &ExperimentConfig, model: &MarketModel) -> Result<AlphaBeta> {
    let fk = FeynmanKacSettings {
        grid: config.feynman_kac.grid,
        paths: config.feynman_kac.paths,
        seed: rng::derive_seed(config.seed, 0xFEED),
    };
    oc::solve_alpha_beta_with(model, config.problem.lambda, w_hat(config, model)?, fk)
}

fn converge(config: &ExperimentConfig, model: &MarketModel, out: &mut Outcome) -> Result<()> {
    let th = &config.thresholds;
    let probe = ProbeGrid::default_for(model.dim(), config.probe_times.clone());
    let thresholds = CfThresholds {
        tolerance: th.cf_tolerance,
        se_factor: th.cf_se_factor,
        trend_factor: th.cf_trend_factor,
    };
    let rep = wcl::cf_convergence_study(model, &config.n_grid, &probe, config.paths, config.seed, thresholds)?;
    for g in &rep.grids {
        out.rows.push(CheckRow::info(
            format!("sup CF gap n={}", g.n),
            Cell {
                value: g.sup_gap,
                se: Some(g.max_se),
            },
        ));
    }
    let last = rep.grids.last().expect("non-empty grid family");
    let finest_ok = rep
        .rows
        .iter()
        .filter(|r| r.n == last.n)
        .all(|r| r.gap <= th.cf_tolerance + th.cf_se_factor * r.se);
    out.rows.push(CheckRow {
        name: format!("finest grid n={}", last.n),
        estimate: Cell {
            value: last.sup_gap,
            se: Some(last.max_se),
        },
        target: Some(Cell::exact(0.0)),
        tolerance: format!("gap <= {} + {} SE at every probe", th.cf_tolerance, th.cf_se_factor),
        pass: finest_ok,
    });
    let mut worst_rise = f64::NEG_INFINITY;
    let mut trend_ok = true;
    for w in rep.grids.windows(2) {
        let rise = w[1].sup_gap - w[0].sup_gap;
        worst_rise = worst_rise.max(rise);
        trend_ok &= rise <= th.cf_trend_factor * w[0].max_se.hypot(w[1].max_se);
    }
    out.rows.push(CheckRow {
        name: "gap trend".into(),
        estimate: Cell {
            value: if rep.grids.len() > 1 { worst_rise } else { 0.0 },
            se: Some(rep.grids.iter().map(|g| g.max_se).fold(0.0, f64::max)),
        },
        target: Some(Cell::exact(0.0)),
        tolerance: format!("non-increasing within {} SE", th.cf_trend_factor),
        pass: trend_ok,
    });
    out.artifact("cf_rows.csv", rep.to_csv());
    Ok(())
}

fn value_check(config: &ExperimentConfig, model: &MarketModel, out: &mut Outcome) -> Result<()> {
    let th = &config.thresholds;
    let p = &config.problem;
    let y0 = config.y0()?;
    let ab = alpha_beta(config, model)?;
    let law = oc::optimal_law(&ab, parse_lambda_zero(&p.lambda_zero)?)?;
    if let Some(w) = &law.warning {
        out.warnings.push(w.clone());
    }
    let optimal: Arc<dyn GaussianFeedbackLaw> = Arc::new(law);
    let v: Cell = oc::value_estimate(&ab, 0.0, p.x0, &y0)?.into();
    out.rows.push(CheckRow::info("alpha(0)", Cell::exact(ab.alpha(0.0))));
    out.rows.push(CheckRow::info("beta(0)", ab.beta(0.0, &y0)?.into()));
    out.rows.push(CheckRow::info("w_hat", Cell::exact(ab.w_hat())));
    out.rows.push(CheckRow::info("v_opt", v));
    let sim = SimConfig::new(config.steps, config.paths, config.seed)?;
    let run = es::simulate_exploratory(model, optimal.as_ref(), p.x0, &y0, &sim, ab.w_hat(), p.lambda)?;
    out.rows.push(CheckRow::within(
        "cost[optimal]",
        Cell {
            value: run.cost.value,
            se: Some(run.cost.se),
        },
        v,
        th.value_se,
    ));
    for spec in &config.laws {
        let law = parse_law(spec, &optimal)?;
        let r = es::simulate_exploratory(model, law.as_ref(), p.x0, &y0, &sim, ab.w_hat(), p.lambda)?;
        let se = r.cost.se.hypot(v.se.unwrap_or(0.0));
        out.rows.push(CheckRow {
            name: format!("cost[{spec}]"),
            estimate: Cell {
                value: r.cost.value,
                se: Some(r.cost.se),
            },
            target: Some(v),
            tolerance: format!(">= target - {} SE", th.perturbed_se),
            pass: r.cost.value >= v.value - th.perturbed_se * se,
        });
    }
    let mut table = String::from("t,x,v,v_se\n");
    for i in 0..=4 {
        let t = model.horizon * i as f64 / 4.0;
        for j in 0..=8 {
            let x = p.x0 - 1.0 + 0.25 * j as f64;
            let c: Cell = oc::value_estimate(&ab, t, x, &y0)?.into();
            let _ = writeln!(table, "{t},{x},{:e},{}", c.value, c.se_text());
        }
    }
    out.artifact("value_table.csv", table);
    Ok(())
}

fn lagrange(config: &ExperimentConfig, model: &MarketModel, out: &mut Outcome) -> Result<()> {
    let th = &config.thresholds;
    let p = &config.problem;
    let y0 = config.y0()?;
    let closed = oc::lagrange_multiplier_closed(model.k_value()?, model.horizon, p.x0, p.z_hat)?;
    let ab = oc::solve_alpha_beta_with(
        model,
        p.lambda,
        closed,
        FeynmanKacSettings {
            grid: 1,
            paths: 2,
            seed: 0,
        },
    )?;
    let mc = oc::lagrange_multiplier_mc(
        &ab,
        p.x0,
        p.z_hat,
        &MultiplierConfig {
            fine_steps: config.fine_steps,
            paths: config.paths,
            seed: rng::derive_seed(config.seed, 1),
            weight: BracketWeight::PostJump,
        },
    )?;
    let run = oc::simulate_optimal_wealth_explicit(
        &ab,
        p.x0,
        &y0,
        &ExplicitConfig {
            fine_steps: config.fine_steps,
            euler_steps: Vec::new(),
            paths: config.paths,
            seed: rng::derive_seed(config.seed, 2),
            weight: BracketWeight::PostJump,
        },
    )?;
    out.rows.push(CheckRow::info("w_hat closed form", Cell::exact(closed)));
    out.rows.push(CheckRow::within(
        "w_hat Monte Carlo",
        Cell {
            value: mc.w_hat,
            se: Some(mc.se),
        },
        Cell::exact(closed),
        th.multiplier_se,
    ));
    out.rows.push(CheckRow::within(
        "E X*_T",
        run.terminal_mean.into(),
        Cell::exact(p.z_hat),
        th.mean_se,
    ));
    let json = serde_json::json!([
        {"w_hat": closed, "se": "exact", "method": "closed-form"},
        {"w_hat": mc.w_hat, "se": mc.se, "method": mc.method},
    ]);
    out.artifact("multiplier.json", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn hjb(config: &ExperimentConfig, model: &MarketModel, out: &mut Outcome) -> Result<()> {
    let th = &config.thresholds;
    let ab = oc::solve_alpha_beta(model, config.problem.lambda, w_hat(config, model)?)?;
    let probes = oc::default_hjb_probes(&ab);
    let rep = oc::hjb_residual(&ab, &probes)?;
    let tol = th.hjb_tolerance.unwrap_or(rep.tolerance);
    let mut table = String::from("t,x,y,residual\n");
    for r in &rep.rows {
        let y: Vec<String> = r.y.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(table, "{},{},{},{:e}", r.t, r.x, y.join(";"), r.residual);
    }
    out.rows.push(CheckRow {
        name: format!("max |residual| over {} probes", rep.rows.len()),
        estimate: Cell::exact(rep.max_abs),
        target: Some(Cell::exact(0.0)),
        tolerance: format!("<= {tol:e}"),
        pass: rep.max_abs <= tol,
    });
    let bad = oc::hjb_residual(&ab.with_k(th.hjb_perturbation * ab.k()), &probes)?;
    out.rows.push(CheckRow {
        name: format!("perturbed K x{}", th.hjb_perturbation),
        estimate: Cell::exact(bad.max_abs),
        target: None,
        tolerance: format!("> {:e}", th.hjb_detection),
        pass: bad.max_abs > th.hjb_detection,
    });
    out.artifact("hjb_residuals.csv", table);
    Ok(())
}

fn demo_sample_state(config: &ExperimentConfig, model: &MarketModel, out: &mut Outcome) -> Result<()> {
    let th = &config.thresholds;
    let y0 = config.y0()?;
    if model.jumps.is_active() {
        out.warnings.push("jumps removed for the sample-state demonstration".into());
    }
    let demo = wcl::sample_state_demo(&model.without_jumps(), config.steps, config.paths, config.seed, config.problem.x0, &y0)?;
    out.rows.push(CheckRow::within("corr(X_T - x0, W_T)", demo.corr.into(), Cell::exact(0.0), th.demo_se));
    out.rows.push(CheckRow::within(
        "Var(X_T - x0)",
        demo.variance.into(),
        Cell::exact(demo.target_variance),
        th.demo_se,
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANONICAL: &str = include_str!("../../../configs/canonical.toml");

    fn canonical(experiment: Experiment) -> ExperimentConfig {
        let file: ConfigFile = toml::from_str(CANONICAL).unwrap();
        ExperimentConfig::resolve(file, Path::new("."), experiment, &Overrides::default(), None).unwrap()
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::all() {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
            assert_eq!(e.to_possible_value().unwrap().get_name(), e.name());
        }
        let err = "fit".parse::<Experiment>().unwrap_err().to_string();
        assert!(err.contains("value-check") && err.contains("demo-sample-state"));
    }

    #[test]
    fn override_precedence() {
        let mut file: ConfigFile = toml::from_str(CANONICAL).unwrap();
        file.paths = Some(111);
        file.experiments.insert(
            "hjb".into(),
            RunSettings {
                paths: Some(222),
                ..Default::default()
            },
        );
        let ov = Overrides {
            steps: Some(7),
            ..Default::default()
        };
        let c = ExperimentConfig::resolve(file.clone(), Path::new("."), Experiment::Hjb, &ov, Some("env".into())).unwrap();
        assert_eq!((c.paths, c.steps), (222, 7));
        assert_eq!(c.out, PathBuf::from("env"));
        let ov = Overrides {
            paths: Some(5),
            out: Some("cli".into()),
            ..Default::default()
        };
        let c = ExperimentConfig::resolve(file, Path::new("."), Experiment::Lagrange, &ov, Some("env".into())).unwrap();
        assert_eq!(c.paths, 5);
        assert_eq!(c.out, PathBuf::from("cli"));
    }

    #[test]
    fn digest_ignores_output_directory() {
        let a = canonical(Experiment::Hjb);
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = CANONICAL.replace("seed =", "sede =");
        let err = parse_config_text(&bad, Path::new("c.toml")).unwrap_err().to_string();
        assert!(err.contains("sede"), "{err}");
        let mut file: ConfigFile = toml::from_str(CANONICAL).unwrap();
        file.problem.lambda_zero = "sometimes".into();
        let err = ExperimentConfig::resolve(file, Path::new("."), Experiment::Hjb, &Overrides::default(), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("problem.lambda_zero"), "{err}");
        assert!(parse_config_text("", Path::new("c.yaml")).is_err());
    }

    #[test]
    fn law_strings() {
        let ab = oc::solve_alpha_beta(&crate::levy_model::canonical_model(), 0.1, 1.2).unwrap();
        let opt: Arc<dyn GaussianFeedbackLaw> = Arc::new(oc::optimal_law(&ab, LambdaZeroMode::Strict).unwrap());
        let mut m = [0.0];
        parse_law("perturbed:0.5", &opt).unwrap().mean(0.0, 1.0, &[0.0], &mut m);
        assert!((m[0] - 0.5 * 6.0 * 0.2).abs() < 1e-12);
        let mut c = [0.0];
        parse_law("constant:0.1,0.3", &opt).unwrap().cov(0.0, &[0.0], &mut c);
        assert_eq!(c[0], 0.3);
        assert_eq!(parse_law("optimal", &opt).unwrap().label(), "optimal");
        for bad in ["perturbed:", "constant:1", "gaussian:1,2", "perturbed:1,2,3"] {
            assert!(parse_law(bad, &opt).is_err(), "{bad}");
        }
    }

    #[test]
    fn value_check_row_matches_closed_form() {
        let mut c = canonical(Experiment::ValueCheck);
        c.paths = 2_000;
        c.steps = 32;
        c.laws.clear();
        let rep = run(&c).unwrap();
        let v = rep.rows.iter().find(|r| r.name == "v_opt").unwrap();
        assert!((v.estimate.value - (-0.098_933_702_321_156_75)).abs() < 1e-12);
        assert_eq!(v.estimate.se, None);
        let csv = rep.to_csv();
        assert!(csv.contains("# seed: ") && csv.contains("# thresholds: {"));
        assert!(csv.lines().filter(|l| !l.starts_with('#')).skip(1).all(|l| l.contains("exact") || l.split(',').nth(2).unwrap().contains('e')));
    }

    #[test]
    fn hjb_report_and_determinism() {
        let c = canonical(Experiment::Hjb);
        let a = run(&c).unwrap();
        assert!(a.pass, "{}", a.summary());
        let b = run(&c).unwrap();
        assert_eq!(a.body_json(), b.body_json());
    }

    #[test]
    fn reports_are_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let rep = run(&canonical(Experiment::Hjb)).unwrap();
        let first = write_report(&rep, dir.path(), Formats::BOTH).unwrap();
        let before = fs::read_to_string(first.join("report.json")).unwrap();
        let second = write_report(&rep, dir.path(), Formats { json: true, csv: false }).unwrap();
        assert_ne!(first, second);
        assert_eq!(fs::read_to_string(first.join("report.json")).unwrap(), before);
        assert!(second.join("report.json").exists() && !second.join("report.csv").exists());
        assert!(second.join("hjb_residuals.csv").exists());
    }
}
