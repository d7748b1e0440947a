//! Experiment configuration, read from and echoed as TOML.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use ispppa::solver::Schedule;
use ispppa::{LossFamily, ModelKind, Regularizer};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;

/// Regularizer with the data-scaled `λ` rule: `λ = λ_c ‖Aᵀb‖_∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerSpec {
    Zero,
    L1 { lambda_c: f64 },
    Mcp { lambda_c1: f64, lambda_c2: f64 },
    /// Absolute weight; no data scaling.
    SqL2 { lambda: f64 },
}

impl RegularizerSpec {
    pub fn resolve(&self, atb_inf: f64) -> Result<Regularizer> {
        Ok(match *self {
            RegularizerSpec::Zero => Regularizer::Zero,
            RegularizerSpec::L1 { lambda_c } => Regularizer::l1(lambda_c * atb_inf)?,
            RegularizerSpec::Mcp { lambda_c1, lambda_c2 } => Regularizer::mcp(lambda_c1 * atb_inf, lambda_c2 * atb_inf)?,
            RegularizerSpec::SqL2 { lambda } => Regularizer::sq_l2(lambda)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub loss: LossFamily,
    pub model: ModelKind,
    /// Per-sample multiplier of the loss.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "sum")]
    pub objective: Normalization,
    pub regularizer: RegularizerSpec,
}

/// How the data objective `Σᵢ ℓᵢ + r` is handed to the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `f(·; sᵢ) = n·scale·ℓᵢ`, so `E f = Σ ℓᵢ`.
    Sum,
    /// The same problem divided by `n`: `f(·; sᵢ) = scale·ℓᵢ` and `r/n`.
    Mean,
}

fn sum() -> Normalization {
    Normalization::Sum
}

impl ProblemSpec {
    /// Per-sample loss multiplier and regularizer for `n` samples with
    /// `‖Aᵀb‖_∞ = atb_inf`.
    pub fn resolve(&self, n: usize, atb_inf: f64) -> Result<(f64, Regularizer)> {
        let reg = self.regularizer.resolve(atb_inf)?;
        Ok(match self.objective {
            Normalization::Sum => (self.scale * n as f64, reg),
            Normalization::Mean => (self.scale, scale_regularizer(reg, 1.0 / n as f64)?),
        })
    }
}

/// `c · r`.
pub fn scale_regularizer(reg: Regularizer, c: f64) -> Result<Regularizer> {
    Ok(match reg {
        Regularizer::Zero => Regularizer::Zero,
        Regularizer::L1 { lambda } => Regularizer::l1(c * lambda)?,
        Regularizer::SqL2 { lambda } => Regularizer::sq_l2(c * lambda)?,
        // c·(λ₁|t| − t²/(2λ₂)) is MCP with (cλ₁, λ₂/c).
        Regularizer::Mcp { lambda1, lambda2 } => Regularizer::mcp(c * lambda1, lambda2 / c)?,
    })
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    Zero,
    /// The planted vector scaled by `start_scale`.
    Planted,
    /// A seeded random direction of length `start_scale · ‖x*‖`.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub batch_size: usize,
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "zero_start")]
    pub start: Start,
    #[serde(default = "one")]
    pub start_scale: f64,
}

fn zero_start() -> Start {
    Start::Zero
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    Fgap,
    Kkt,
    MeGrad,
    Dist2,
    InnerIters,
    WallMs,
}

impl Diagnostic {
    pub fn column(self) -> &'static str {
        match self {
            Diagnostic::Fgap => "fgap",
            Diagnostic::Kkt => "kkt",
            Diagnostic::MeGrad => "me_grad",
            Diagnostic::Dist2 => "dist2",
            Diagnostic::InnerIters => "inner_iters",
            Diagnostic::WallMs => "wall_ms",
        }
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Diagnostic::Fgap | Diagnostic::Dist2)
    }
}

/// Step used inside the KKT residual `‖x − prox_{αr}(x − α∇F(x))‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KktStep {
    Value(f64),
    Rule(KktRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KktRule {
    InverseRhoBar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    pub list: Vec<Diagnostic>,
    #[serde(default = "unit_step")]
    pub kkt_alpha: KktStep,
    /// Overrides `2(η̄ + τ̄) + 1`.
    #[serde(default)]
    pub rho_bar: Option<f64>,
    /// Reports `min_{i ≤ k} kkt_i²` over every iterate instead of `kkt_k`.
    #[serde(default)]
    pub kkt_running_min_squared: bool,
    /// Accuracy of the proximal maps behind `me_grad`.
    #[serde(default = "me_tol")]
    pub me_tol: f64,
    /// Fraction (in log k) of the tail used by the rate fits.
    #[serde(default = "half")]
    pub fit_window: f64,
}

fn unit_step() -> KktStep {
    KktStep::Value(1.0)
}

fn me_tol() -> f64 {
    1e-8
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Target KKT residual of the reference point.
    pub tol: f64,
    #[serde(default = "max_iter")]
    pub max_iter: usize,
    /// Extra random starts for nonconvex problems.
    #[serde(default)]
    pub restarts: usize,
}

fn max_iter() -> usize {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub problem: ProblemSpec,
    pub schedule: Schedule,
    pub run: RunSpec,
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        ensure!(self.run.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.run.iterations >= 1, "iterations must be at least 1");
        ensure!(self.run.trials >= 1, "trials must be at least 1");
        ensure!(self.problem.scale > 0.0, "scale must be positive");
        ensure!(
            self.diagnostics.fit_window > 0.0 && self.diagnostics.fit_window <= 1.0,
            "fit_window must lie in (0, 1]"
        );
        if self.diagnostics.list.iter().any(|d| d.needs_reference()) {
            ensure!(self.reference.is_some(), "fgap and dist2 need a [reference] section");
        }
        Ok(())
    }
}
