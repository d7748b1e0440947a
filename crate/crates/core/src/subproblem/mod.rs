//! The per-iteration subproblem
//! `min_y Σᵢ H_i(a_iᵀy) + r(y) + ‖y − x̄‖²_M/(2α)` and its certificates.

mod criteria;
mod dual;
mod mm;
pub mod pieces;

use serde::{Deserialize, Serialize};

pub use criteria::{check_criterion, check_scb_with_dual, CriterionOutcome};
pub use dual::{
    dual_gradient, dual_objective, duality_gap, shifted_dual_objective, solve_dual, DualMethod, DualOptions, DualSolution,
    DualStart,
};
pub use mm::{solve_majorize_minimize, MmSolution};
pub use pieces::ScalarPiece;

use crate::error::{check_dim, Error, Result};
use crate::linalg::max_eigenvalue_psd;
use crate::metric::{Metric, MetricKind};
use crate::model::MinibatchModel;
use crate::prox::{Regularizer, SmoothFn};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// `‖x − prox^M_{αΦ}(x̄)‖_M ≤ ε`.
    Sca,
    /// `Φ(x) − Φ* ≤ (1 − τα)/(2α) ε²`.
    Scb,
    /// `dist_{M⁻¹}(0, ∂Φ(x)) ≤ (1 − τα)/α · ε`.
    Scc,
}

impl Criterion {
    /// Acceptance threshold on the criterion's witness.
    pub fn threshold(&self, eps: f64, alpha: f64, tau: f64) -> f64 {
        let c = 1.0 - tau * alpha;
        match self {
            Criterion::Sca => eps,
            Criterion::Scb => c / (2.0 * alpha) * eps * eps,
            Criterion::Scc => c / alpha * eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Witness {
    /// The candidate is the exact minimizer (closed form).
    Exact,
    /// Upper bound on `‖x − x̂‖_M`.
    Distance(f64),
    /// Upper bound on `Φ(x) − Φ*` from a dual point.
    Gap { gap: f64 },
    /// A subgradient element and its `M⁻¹`-norm.
    Subgradient { element: Vector, norm: f64 },
}

/// Evidence that a candidate meets a criterion at accuracy `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemCertificate {
    pub criterion: Criterion,
    pub eps: f64,
    pub witness: Witness,
    pub threshold: f64,
    pub inner_iterations: usize,
}

impl SubproblemCertificate {
    fn exact(eps: f64) -> Self {
        Self {
            criterion: Criterion::Scc,
            eps,
            witness: Witness::Exact,
            threshold: 0.0,
            inner_iterations: 0,
        }
    }

    pub fn witness_value(&self) -> f64 {
        match &self.witness {
            Witness::Exact => 0.0,
            Witness::Distance(d) => *d,
            Witness::Gap { gap } => *gap,
            Witness::Subgradient { norm, .. } => *norm,
        }
    }
}

/// One strongly convex subproblem of the outer loop.
#[derive(Debug, Clone)]
pub struct SubproblemInstance {
    pub pieces: Vec<ScalarPiece>,
    /// `A_S`, one row per piece.
    pub rows: Matrix,
    pub reg: Regularizer,
    pub metric: Metric,
    pub alpha: f64,
    pub anchor: Vector,
    /// Weak-convexity constant `τ` of model plus regularizer.
    pub tau: f64,
}

impl SubproblemInstance {
    /// Builds and validates an instance. `tau` is raised to the intrinsic
    /// weak-convexity modulus of the pieces and regularizer if smaller.
    pub fn new(
        pieces: Vec<ScalarPiece>,
        rows: Matrix,
        reg: Regularizer,
        metric: Metric,
        alpha: f64,
        anchor: Vector,
        tau: f64,
    ) -> Result<Self> {
        check_dim(rows.nrows(), pieces.len())?;
        check_dim(rows.ncols(), anchor.len())?;
        check_dim(metric.dim(), anchor.len())?;
        reg.validate()?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must be positive, got {alpha}"),
            });
        }
        if let MetricKind::GramAugmented { factor, .. } = metric.kind() {
            if factor.shape() != rows.shape() || factor != &rows {
                return Err(Error::InvalidParameter {
                    name: "metric",
                    reason: "Gram factor does not match the batch rows".into(),
                });
            }
        }
        let intrinsic = reg.weak_convexity()
            + pieces
                .iter()
                .zip(rows.row_iter())
                .map(|(p, a)| p.weak_convexity() * a.norm_squared())
                .sum::<f64>();
        let tau = tau.max(intrinsic);
        if !(alpha * tau < 1.0) {
            return Err(Error::StepOutOfRange { alpha, limit: 1.0 / tau });
        }
        Ok(Self {
            pieces,
            rows,
            reg,
            metric,
            alpha,
            anchor,
            tau,
        })
    }

    /// The subproblem of a minibatch model centered at its anchor.
    pub fn from_minibatch(mb: &MinibatchModel<'_>, reg: Regularizer, metric: Metric, alpha: f64, tau: f64) -> Result<Self> {
        Self::new(mb.pieces(), mb.rows(), reg, metric, alpha, mb.center.clone(), tau)
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    pub fn m(&self) -> usize {
        self.pieces.len()
    }

    /// `τ_p` in `M = I + ατ_p A_SᵀA_S`; zero for the identity metric.
    pub fn precond_tau(&self) -> Option<f64> {
        match self.metric.kind() {
            MetricKind::Identity => Some(0.0),
            MetricKind::GramAugmented { scale, .. } => Some(scale / self.alpha),
            MetricKind::Diagonal(_) => None,
        }
    }

    /// `Σ H_i(a_iᵀy)`.
    pub fn model_value(&self, y: &Vector) -> f64 {
        let z = &self.rows * y;
        self.pieces.iter().zip(z.iter()).map(|(p, &t)| p.value(t)).sum()
    }

    /// `Φ(y) = Σ H_i(a_iᵀy) + r(y) + ‖y − x̄‖²_M/(2α)`.
    pub fn objective(&self, y: &Vector) -> f64 {
        self.model_value(y) + self.reg.value(y) + self.metric.quad_unchecked(&(y - &self.anchor)) / (2.0 * self.alpha)
    }

    /// Gradient of the model part (subgradient selection at kinks).
    pub fn model_gradient(&self, y: &Vector) -> Vector {
        let z = &self.rows * y;
        let g = Vector::from_fn(z.len(), |i, _| self.pieces[i].derivative(z[i]));
        self.rows.tr_mul(&g)
    }

    pub fn is_smooth(&self) -> bool {
        self.pieces.iter().all(ScalarPiece::is_smooth)
    }

    pub fn is_convex_model(&self) -> bool {
        self.pieces.iter().all(ScalarPiece::is_convex)
    }

    /// Weakly convex pieces, or kinked pieces under the identity metric,
    /// are handled by majorize–minimize rather than the dual directly.
    pub fn needs_majorization(&self) -> bool {
        !self.is_convex_model()
            || (self.metric.is_identity() && self.pieces.iter().any(|p| matches!(p, ScalarPiece::AbsAffine { .. })))
    }

    /// The smooth model part as a [`SmoothFn`], when every piece is smooth.
    pub fn smooth_model(&self) -> Result<BatchSmooth> {
        if !self.is_smooth() {
            return Err(Error::Unsupported("model has nonsmooth pieces".into()));
        }
        BatchSmooth::new(self.rows.clone(), self.pieces.clone())
    }
}

/// `y ↦ Σ H_i(a_iᵀy)` for smooth pieces.
#[derive(Debug, Clone)]
pub struct BatchSmooth {
    rows: Matrix,
    pieces: Vec<ScalarPiece>,
    lipschitz: f64,
}

impl BatchSmooth {
    pub fn new(rows: Matrix, pieces: Vec<ScalarPiece>) -> Result<Self> {
        check_dim(rows.nrows(), pieces.len())?;
        let curv = Vector::from_iterator(pieces.len(), pieces.iter().map(|p| p.curvature_bound().sqrt()));
        let scaled = Matrix::from_diagonal(&curv) * &rows;
        let lipschitz = weighted_gram_norm(&scaled);
        Ok(Self { rows, pieces, lipschitz })
    }
}

impl SmoothFn for BatchSmooth {
    fn dim(&self) -> usize {
        self.rows.ncols()
    }
    fn value(&self, x: &Vector) -> f64 {
        let z = &self.rows * x;
        self.pieces.iter().zip(z.iter()).map(|(p, &t)| p.value(t)).sum()
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let z = &self.rows * x;
        let g = Vector::from_fn(z.len(), |i, _| self.pieces[i].derivative(z[i]));
        self.rows.tr_mul(&g)
    }
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// `‖B‖₂²` with a small safety margin, via the smaller Gram matrix.
pub(crate) fn weighted_gram_norm(b: &Matrix) -> f64 {
    if b.nrows() == 0 {
        return 0.0;
    }
    let g = if b.nrows() <= b.ncols() { b * b.transpose() } else { b.tr_mul(b) };
    let top = if g.nrows() <= 256 {
        g.symmetric_eigenvalues().max()
    } else {
        max_eigenvalue_psd(&g, 1e-10)
    };
    top.max(0.0) * 1.05
}

/// Exact solve when the model is affine and the metric is the identity:
/// `prox_{αr}(x̄ − α ḡ)`.
pub fn solve_closed_form(inst: &SubproblemInstance) -> Result<Vector> {
    if !inst.metric.is_identity() {
        return Err(Error::Unsupported("closed form requires the identity metric".into()));
    }
    if !inst.pieces.iter().all(|p| matches!(p, ScalarPiece::Affine { .. })) {
        return Err(Error::Unsupported("closed form requires an affine model".into()));
    }
    let g = inst.model_gradient(&inst.anchor);
    inst.reg.prox(inst.alpha, &(&inst.anchor - g * inst.alpha))
}

/// Exact solve for a single piece with identity metric and no regularizer:
/// the minimizer moves along `a` by a one-dimensional prox.
pub fn solve_single_sample(inst: &SubproblemInstance) -> Result<Vector> {
    if inst.m() != 1 || !inst.metric.is_identity() || inst.reg != Regularizer::Zero {
        return Err(Error::Unsupported(
            "single-sample solve needs one piece, identity metric and no regularizer".into(),
        ));
    }
    let a = inst.rows.row(0).transpose();
    let a2 = a.norm_squared();
    if a2 == 0.0 {
        return Ok(inst.anchor.clone());
    }
    let t0 = a.dot(&inst.anchor);
    let t = inst.pieces[0].prox(inst.alpha * a2, t0);
    Ok(&inst.anchor + a * ((t - t0) / a2))
}

/// Outcome of [`solve`].
#[derive(Debug, Clone)]
pub struct Solved {
    pub point: Vector,
    pub certificate: SubproblemCertificate,
    /// Final dual iterate, when a dual method was used.
    pub dual: Option<Vector>,
}

/// Dispatches to the cheapest solver that certifies accuracy `eps`:
/// closed form, single-sample exact solve, majorize–minimize (weakly convex
/// pieces), or the dual method.
pub fn solve(inst: &SubproblemInstance, eps: f64, opts: &DualOptions) -> Result<Solved> {
    if inst.metric.is_identity() {
        if inst.pieces.iter().all(|p| matches!(p, ScalarPiece::Affine { .. })) {
            return Ok(Solved {
                point: solve_closed_form(inst)?,
                certificate: SubproblemCertificate::exact(eps),
                dual: None,
            });
        }
        if inst.m() == 1 && inst.reg == Regularizer::Zero {
            return Ok(Solved {
                point: solve_single_sample(inst)?,
                certificate: SubproblemCertificate::exact(eps),
                dual: None,
            });
        }
    }
    if inst.needs_majorization() {
        if eps <= 0.0 {
            return Err(Error::Unsupported("exact mode for kinked or weakly convex pieces".into()));
        }
        let mm = solve_majorize_minimize(inst, eps, opts.max_iter)?;
        return Ok(Solved {
            point: mm.point,
            certificate: SubproblemCertificate {
                criterion: Criterion::Sca,
                eps,
                witness: Witness::Distance(mm.dist_bound),
                threshold: eps,
                inner_iterations: mm.iterations,
            },
            dual: None,
        });
    }
    if eps <= 0.0 {
        return Err(Error::Unsupported(
            "exact mode needs an affine model or a single sample with identity metric".into(),
        ));
    }
    let sol = solve_dual(inst, eps, opts)?;
    Ok(Solved {
        point: sol.point,
        certificate: sol.certificate,
        dual: Some(sol.xi),
    })
}
