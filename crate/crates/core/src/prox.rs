//! Separable regularizers, their proximal maps, and a reference proximal
//! solver for smooth + regularizer composites under a metric.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::max_eigenvalue_psd;
use crate::metric::Metric;
use crate::{Matrix, Vector};

/// Separable regularizer `r(x) = Σᵢ ρ(xᵢ)`.
///
/// `Mcp` is the minimax concave penalty
/// `ρ(t) = λ₁|t| − t²/(2λ₂)` for `|t| ≤ λ₁λ₂` and `λ₁²λ₂/2` beyond, which is
/// `1/λ₂`-weakly convex. `SqL2` is `(λ/2)‖x‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    Zero,
    L1 { lambda: f64 },
    Mcp { lambda1: f64, lambda2: f64 },
    SqL2 { lambda: f64 },
}

impl Regularizer {
    pub fn l1(lambda: f64) -> Result<Self> {
        let r = Regularizer::L1 { lambda };
        r.validate()?;
        Ok(r)
    }

    pub fn mcp(lambda1: f64, lambda2: f64) -> Result<Self> {
        let r = Regularizer::Mcp { lambda1, lambda2 };
        r.validate()?;
        Ok(r)
    }

    pub fn sq_l2(lambda: f64) -> Result<Self> {
        let r = Regularizer::SqL2 { lambda };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, v: f64| Error::InvalidParameter {
            name,
            reason: format!("must be finite and nonnegative, got {v}"),
        };
        match *self {
            Regularizer::Zero => Ok(()),
            Regularizer::L1 { lambda } | Regularizer::SqL2 { lambda } => {
                if lambda >= 0.0 && lambda.is_finite() {
                    Ok(())
                } else {
                    Err(bad("lambda", lambda))
                }
            }
            Regularizer::Mcp { lambda1, lambda2 } => {
                if !(lambda1 >= 0.0 && lambda1.is_finite()) {
                    return Err(bad("lambda1", lambda1));
                }
                if !(lambda2 > 0.0 && lambda2.is_finite()) {
                    return Err(Error::InvalidParameter {
                        name: "lambda2",
                        reason: format!("must be finite and positive, got {lambda2}"),
                    });
                }
                Ok(())
            }
        }
    }

    /// Weak-convexity constant θ̄: `r + (θ̄/2)‖·‖²` is convex.
    pub fn weak_convexity(&self) -> f64 {
        match *self {
            Regularizer::Mcp { lambda2, .. } => 1.0 / lambda2,
            _ => 0.0,
        }
    }

    /// Supremum of admissible proximal steps, `1/θ̄`.
    pub fn max_step(&self) -> f64 {
        match *self {
            Regularizer::Mcp { lambda2, .. } => lambda2,
            _ => f64::INFINITY,
        }
    }

    pub fn check_step(&self, alpha: f64) -> Result<()> {
        let limit = self.max_step();
        if alpha > 0.0 && alpha.is_finite() && alpha < limit {
            Ok(())
        } else {
            Err(Error::StepOutOfRange { alpha, limit })
        }
    }

    pub fn value_scalar(&self, t: f64) -> f64 {
        match *self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { lambda } => lambda * t.abs(),
            Regularizer::SqL2 { lambda } => 0.5 * lambda * t * t,
            Regularizer::Mcp { lambda1, lambda2 } => {
                let a = t.abs();
                if a <= lambda1 * lambda2 {
                    lambda1 * a - a * a / (2.0 * lambda2)
                } else {
                    0.5 * lambda1 * lambda1 * lambda2
                }
            }
        }
    }

    pub fn value(&self, x: &Vector) -> f64 {
        match *self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { lambda } => lambda * x.lp_norm(1),
            Regularizer::SqL2 { lambda } => 0.5 * lambda * x.norm_squared(),
            Regularizer::Mcp { .. } => x.iter().map(|&t| self.value_scalar(t)).sum(),
        }
    }

    /// Scalar prox without step validation.
    pub fn prox_scalar(&self, alpha: f64, t: f64) -> f64 {
        match *self {
            Regularizer::Zero => t,
            Regularizer::L1 { lambda } => soft_threshold(t, alpha * lambda),
            Regularizer::SqL2 { lambda } => t / (1.0 + alpha * lambda),
            Regularizer::Mcp { lambda1, lambda2 } => {
                let a = t.abs();
                if a <= alpha * lambda1 {
                    0.0
                } else if a <= lambda1 * lambda2 {
                    t.signum() * (a - alpha * lambda1) / (1.0 - alpha / lambda2)
                } else {
                    t
                }
            }
        }
    }

    /// An element of the generalized derivative of `t ↦ prox_scalar(α, t)`.
    pub fn prox_derivative_scalar(&self, alpha: f64, t: f64) -> f64 {
        match *self {
            Regularizer::Zero => 1.0,
            Regularizer::SqL2 { lambda } => 1.0 / (1.0 + alpha * lambda),
            Regularizer::L1 { lambda } => {
                if t.abs() <= alpha * lambda {
                    0.0
                } else {
                    1.0
                }
            }
            Regularizer::Mcp { lambda1, lambda2 } => {
                let a = t.abs();
                if a <= alpha * lambda1 {
                    0.0
                } else if a <= lambda1 * lambda2 {
                    1.0 / (1.0 - alpha / lambda2)
                } else {
                    1.0
                }
            }
        }
    }

    /// `argmin_y r(y) + ‖y − x‖²/(2α)`, coordinatewise.
    pub fn prox(&self, alpha: f64, x: &Vector) -> Result<Vector> {
        self.check_step(alpha)?;
        Ok(self.prox_unchecked(alpha, x))
    }

    pub(crate) fn prox_unchecked(&self, alpha: f64, x: &Vector) -> Vector {
        match *self {
            Regularizer::Zero => x.clone(),
            _ => x.map(|t| self.prox_scalar(alpha, t)),
        }
    }

    /// Moreau envelope `min_y r(y) + ‖y − x‖²/(2α)`.
    pub fn moreau_env(&self, alpha: f64, x: &Vector) -> Result<f64> {
        self.check_step(alpha)?;
        Ok(self.moreau_env_unchecked(alpha, x))
    }

    pub(crate) fn moreau_env_unchecked(&self, alpha: f64, x: &Vector) -> f64 {
        x.iter()
            .map(|&t| {
                let p = self.prox_scalar(alpha, t);
                self.value_scalar(p) + (p - t) * (p - t) / (2.0 * alpha)
            })
            .sum()
    }

    /// Regular subdifferential of the scalar penalty at `t` as an interval.
    pub fn subdiff_scalar(&self, t: f64) -> (f64, f64) {
        let d = match *self {
            Regularizer::Zero => 0.0,
            Regularizer::SqL2 { lambda } => lambda * t,
            Regularizer::L1 { lambda } => {
                if t == 0.0 {
                    return (-lambda, lambda);
                }
                lambda * t.signum()
            }
            Regularizer::Mcp { lambda1, lambda2 } => {
                let a = t.abs();
                if t == 0.0 {
                    return (-lambda1, lambda1);
                }
                if a <= lambda1 * lambda2 {
                    t.signum() * (lambda1 - a / lambda2)
                } else {
                    0.0
                }
            }
        };
        (d, d)
    }

    /// Element of `∂r(x)` closest to `target` in the Euclidean norm.
    pub fn nearest_subgradient(&self, x: &Vector, target: &Vector) -> Vector {
        Vector::from_fn(x.len(), |i, _| {
            let (lo, hi) = self.subdiff_scalar(x[i]);
            target[i].clamp(lo, hi)
        })
    }
}

#[inline]
pub fn soft_threshold(t: f64, k: f64) -> f64 {
    if t > k {
        t - k
    } else if t < -k {
        t + k
    } else {
        0.0
    }
}

/// Continuously differentiable part of a composite objective.
pub trait SmoothFn: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    /// Global Lipschitz constant of the gradient.
    fn lipschitz(&self) -> f64;
    /// Lower bound on the Hessian spectrum; negative for weakly convex parts.
    fn curvature_floor(&self) -> f64 {
        0.0
    }
}

/// The zero function on `ℝᵈ`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroFn(pub usize);

impl SmoothFn for ZeroFn {
    fn dim(&self) -> usize {
        self.0
    }
    fn value(&self, _: &Vector) -> f64 {
        0.0
    }
    fn gradient(&self, _: &Vector) -> Vector {
        Vector::zeros(self.0)
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
}

/// `½xᵀHx + cᵀx + k` with symmetric `H`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    hessian: Matrix,
    linear: Vector,
    constant: f64,
    lipschitz: f64,
    floor: f64,
}

impl Quadratic {
    pub fn new(hessian: Matrix, linear: Vector, constant: f64) -> Result<Self> {
        check_dim(hessian.nrows(), linear.len())?;
        check_dim(hessian.nrows(), hessian.ncols())?;
        let eig = hessian.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        let (lo, hi) = if eig.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        Ok(Self {
            hessian,
            linear,
            constant,
            lipschitz: lo.abs().max(hi.abs()),
            floor: lo,
        })
    }

    /// `½‖Ax − b‖²` scaled by `weight`.
    pub fn least_squares(a: &Matrix, b: &Vector, weight: f64) -> Result<Self> {
        check_dim(a.nrows(), b.len())?;
        Self::new(a.tr_mul(a) * weight, -a.tr_mul(b) * weight, 0.5 * weight * b.norm_squared())
    }
}

impl SmoothFn for Quadratic {
    fn dim(&self) -> usize {
        self.linear.len()
    }
    fn value(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }
    fn gradient(&self, x: &Vector) -> Vector {
        &self.hessian * x + &self.linear
    }
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
    fn curvature_floor(&self) -> f64 {
        self.floor
    }
}

/// `φ = g + r` with smooth `g` and separable `r`.
#[derive(Clone, Copy)]
pub struct Composite<'a> {
    pub smooth: &'a dyn SmoothFn,
    pub reg: Regularizer,
}

impl<'a> Composite<'a> {
    pub fn new(smooth: &'a dyn SmoothFn, reg: Regularizer) -> Self {
        Self { smooth, reg }
    }

    pub fn dim(&self) -> usize {
        self.smooth.dim()
    }

    pub fn value(&self, x: &Vector) -> f64 {
        self.smooth.value(x) + self.reg.value(x)
    }

    /// Weak-convexity modulus of `g + r`.
    pub fn weak_convexity(&self) -> f64 {
        (self.reg.weak_convexity() - self.smooth.curvature_floor()).max(0.0)
    }
}

impl std::fmt::Debug for Composite<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Composite")
            .field("dim", &self.dim())
            .field("reg", &self.reg)
            .finish()
    }
}

/// Output of the reference proximal solver.
#[derive(Debug, Clone)]
pub struct ProxEstimate {
    pub point: Vector,
    /// Certified bound on the Euclidean distance from `point` to the exact
    /// proximal point.
    pub dist_bound: f64,
    pub iterations: usize,
}

const ORACLE_MAX_ITER: usize = 1_000_000;

/// High-accuracy `prox^M_{αφ}(x̄) = argmin_y φ(y) + ‖y − x̄‖²_M/(2α)`.
///
/// Accelerated proximal gradient with adaptive restart on the split
/// `[g + ‖· − x̄‖²_M/(2α)] + r`. Stops once the strong-convexity certificate
/// bounds the distance to the minimizer by `tol`.
pub fn prox_oracle(
    f: &Composite<'_>,
    alpha: f64,
    metric: &Metric,
    anchor: &Vector,
    tol: f64,
) -> Result<ProxEstimate> {
    let d = f.dim();
    check_dim(d, anchor.len())?;
    check_dim(d, metric.dim())?;
    f.reg.check_step(alpha)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: format!("must be positive, got {tol}"),
        });
    }
    let strong = metric.lambda_min() / alpha + f.smooth.curvature_floor() - f.reg.weak_convexity();
    if !(strong > 0.0) {
        return Err(Error::StepOutOfRange {
            alpha,
            limit: metric.lambda_min() / f.weak_convexity().max(f64::MIN_POSITIVE),
        });
    }
    let lip = f.smooth.lipschitz() + metric.lambda_max() / alpha;
    let step = 1.0 / lip;

    let grad = |y: &Vector| -> Vector {
        let mut g = f.smooth.gradient(y);
        g += metric.apply_unchecked(&(y - anchor)) / alpha;
        g
    };
    let objective = |y: &Vector| f.value(y) + metric.quad_unchecked(&(y - anchor)) / (2.0 * alpha);
    // r is applied with a step at most α/λ_max(M) ≤ α < 1/θ̄.
    let forward_backward = |y: &Vector| -> Vector {
        let z = y - grad(y) * step;
        f.reg.prox_unchecked(step, &z)
    };

    let mut x = anchor.clone();
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut prev_obj = objective(&x);
    for iter in 1..=ORACLE_MAX_ITER {
        let next = forward_backward(&y);
        let resid = (&y - &next).norm();
        // (y − T y)/step − ∇s(y) + ∇s(T y) ∈ ∂Φ(T y).
        let bound = (1.0 / step + lip) * resid / strong;
        if bound <= tol {
            return Ok(ProxEstimate {
                point: next,
                dist_bound: bound,
                iterations: iter,
            });
        }
        let obj = objective(&next);
        // Restart momentum; a plain step (t = 1) is always taken so that
        // roundoff in the objective cannot stall the loop.
        if t > 1.0 && (obj > prev_obj || (&y - &next).dot(&(&next - &x)) > 0.0) {
            t = 1.0;
            y = x.clone();
            prev_obj = objective(&x);
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        t = t_next;
        x = next;
        prev_obj = obj;
    }
    let resid = (&x - forward_backward(&x)).norm();
    Err(Error::NonConvergence {
        solver: "prox_oracle",
        iterations: ORACLE_MAX_ITER,
        residual: resid,
    })
}

/// Gradient of the Moreau envelope `e^M_{φ/ρ̄}` at `x`:
/// `ρ̄ M (x − prox^M_{φ/ρ̄}(x))`.
pub fn moreau_grad(f: &Composite<'_>, rho_bar: f64, metric: &Metric, x: &Vector, tol: f64) -> Result<Vector> {
    if !(rho_bar > 0.0) {
        return Err(Error::InvalidParameter {
            name: "rho_bar",
            reason: format!("must be positive, got {rho_bar}"),
        });
    }
    let p = prox_oracle(f, 1.0 / rho_bar, metric, x, tol)?;
    Ok(metric.apply_unchecked(&(x - p.point)) * rho_bar)
}

/// `e^M_{αφ}(x) = min_y φ(y) + ‖y − x‖²_M/(2α)` via the reference solver.
pub fn moreau_env_composite(f: &Composite<'_>, alpha: f64, metric: &Metric, x: &Vector, tol: f64) -> Result<f64> {
    let p = prox_oracle(f, alpha, metric, x, tol)?;
    Ok(f.value(&p.point) + metric.quad_unchecked(&(&p.point - x)) / (2.0 * alpha))
}

/// Largest eigenvalue of `AᵀA`, i.e. `‖A‖₂²`.
pub fn gram_lipschitz(a: &Matrix) -> f64 {
    if a.nrows() <= a.ncols() {
        max_eigenvalue_psd(&(a * a.transpose()), 1e-12)
    } else {
        max_eigenvalue_psd(&a.tr_mul(a), 1e-12)
    }
}
