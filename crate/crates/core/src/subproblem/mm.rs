//! Majorize–minimize for identity-metric subproblems whose pieces have no
//! useful dual Newton system: `w|t² − b|` (weakly convex) and `w|c + st|`.
//!
//! At `y_j` each `w|t² − b|` is bounded above by
//! `w|2t_j t − t_j² − b| + w(t − t_j)²`, and `Σ w_i (a_iᵀd)²` by
//! `(σ/2)‖Ad‖²` with `σ = 2 max w_i`. The surrogate
//! `Σ convex pieces + r + ‖y − x̄‖²/(2α) + (σ/2)‖A(y − y_j)‖²` is a
//! subproblem with metric `I + ασAᵀA`, which the Newton dual solves well
//! even for kinked pieces. When no weakly convex piece is present `σ` is a
//! free proximal weight.
//!
//! With `D_j = surrogate − Φ ≤ c_D‖y − y_j‖²`, strong convexity `μ` of `Φ`
//! and `μ'` of the surrogate, exact surrogate minimizers satisfy
//! `‖y_{j+1} − ŷ‖ ≤ q‖y_j − ŷ‖` with `q² = 2c_D/(μ + μ')`. An inexact
//! minimizer within `δ` then obeys
//! `‖y_{j+1} − ŷ‖ ≤ (δ + q‖y_{j+1} − y_j‖)/(1 − q)`.

use super::{solve_dual, weighted_gram_norm, DualOptions, DualStart, ScalarPiece, SubproblemInstance};
use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::{Matrix, Vector};

#[derive(Debug, Clone)]
pub struct MmSolution {
    pub point: Vector,
    /// Certified bound on `‖point − ŷ‖₂`.
    pub dist_bound: f64,
    pub iterations: usize,
}

/// Contraction targeted when `σ` is free.
const FREE_CONTRACTION: f64 = 0.1;

pub fn solve_majorize_minimize(inst: &SubproblemInstance, eps: f64, max_iter: usize) -> Result<MmSolution> {
    if !inst.metric.is_identity() {
        return Err(Error::Unsupported("majorize-minimize requires the identity metric".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter {
            name: "eps",
            reason: format!("must be positive, got {eps}"),
        });
    }
    let alpha = inst.alpha;
    let theta = inst.reg.weak_convexity();
    let a_norm2 = weighted_gram_norm(&inst.rows);
    let w_max = inst
        .pieces
        .iter()
        .filter_map(|p| match *p {
            ScalarPiece::AbsSquare { weight, .. } => Some(weight),
            _ => None,
        })
        .fold(0.0_f64, f64::max);
    let weights = Vector::from_iterator(
        inst.m(),
        inst.pieces.iter().map(|p| match *p {
            ScalarPiece::AbsSquare { weight, .. } => weight.sqrt(),
            _ => 0.0,
        }),
    );
    // λ_max(AᵀWA) over the weakly convex rows.
    let curv = 2.0 * weighted_gram_norm(&(Matrix::from_diagonal(&weights) * &inst.rows));
    let base = 1.0 / alpha - theta;
    let (sigma, q) = if w_max > 0.0 {
        let sigma = 2.0 * w_max;
        let q2 = (curv + sigma * a_norm2) / (2.0 * base - curv);
        (sigma, q2.sqrt())
    } else {
        let sigma = if a_norm2 > 0.0 {
            FREE_CONTRACTION * FREE_CONTRACTION * 2.0 * base / a_norm2
        } else {
            0.0
        };
        (sigma, FREE_CONTRACTION)
    };
    if !(2.0 * base > curv && q < 1.0) {
        return Err(Error::StepOutOfRange {
            alpha,
            limit: 1.0 / (theta + 1.5 * curv + sigma * a_norm2 / 2.0),
        });
    }
    let delta = 0.25 * eps * (1.0 - q);
    let metric = if sigma > 0.0 {
        Metric::gram_augmented(inst.rows.clone(), alpha * sigma)?
    } else {
        Metric::identity(inst.dim())
    };
    let mut opts = DualOptions::default();

    let mut y = inst.anchor.clone();
    let mut total_inner = 0;
    for it in 1..=max_iter {
        let z = &inst.rows * &y;
        let pieces: Vec<ScalarPiece> = inst
            .pieces
            .iter()
            .zip(z.iter())
            .map(|(p, &t0)| match *p {
                ScalarPiece::AbsSquare { target, weight } => ScalarPiece::AbsAffine {
                    offset: -t0 * t0 - target,
                    slope: 2.0 * t0,
                    weight,
                },
                other => other,
            })
            .collect();
        // ‖y − x̄‖²/(2α) + (σ/2)‖A(y − y_j)‖² = ‖y − x̂‖²_M/(2α) + const.
        let anchor = if sigma > 0.0 {
            metric.solve(&(&inst.anchor + inst.rows.tr_mul(&z) * (alpha * sigma)))?
        } else {
            inst.anchor.clone()
        };
        let surrogate = SubproblemInstance::new(pieces, inst.rows.clone(), inst.reg, metric.clone(), alpha, anchor, theta)?;
        let solved = solve_dual(&surrogate, delta, &opts)?;
        total_inner += solved.iterations;
        opts.start = DualStart::Given(solved.xi);
        let step = (&solved.point - &y).norm();
        y = solved.point;
        let bound = (delta + q * step) / (1.0 - q);
        if bound <= eps {
            return Ok(MmSolution {
                point: y,
                dist_bound: bound,
                iterations: it.max(total_inner),
            });
        }
    }
    Err(Error::NonConvergence {
        solver: "majorize-minimize",
        iterations: max_iter,
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prox::Regularizer;

    #[test]
    fn scalar_phase_problem_matches_grid() {
        // min w|y² − b| + w|(2y)² − b₂| + (y − x̄)²/(2α) in one dimension.
        let rows = Matrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let pieces = vec![
            ScalarPiece::AbsSquare { target: 1.0, weight: 0.2 },
            ScalarPiece::AbsSquare { target: 2.0, weight: 0.1 },
        ];
        let anchor = Vector::from_element(1, 0.3);
        let inst = SubproblemInstance::new(pieces, rows, Regularizer::Zero, Metric::identity(1), 0.2, anchor, 0.0).unwrap();
        let sol = solve_majorize_minimize(&inst, 1e-6, 10_000).unwrap();
        let grid = (0..=400_000)
            .map(|i| -2.0 + 4.0 * i as f64 / 400_000.0)
            .map(|t| (inst.objective(&Vector::from_element(1, t)), t))
            .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        assert!((sol.point[0] - grid.1).abs() < 2e-5, "{} vs {}", sol.point[0], grid.1);
        assert!(sol.dist_bound <= 1e-6);
    }

    #[test]
    fn rejects_steps_without_contraction() {
        let rows = Matrix::from_row_slice(1, 1, &[1.0]);
        let inst = SubproblemInstance {
            pieces: vec![ScalarPiece::AbsSquare { target: 1.0, weight: 1.0 }],
            rows,
            reg: Regularizer::Zero,
            metric: Metric::identity(1),
            alpha: 0.45,
            anchor: Vector::zeros(1),
            tau: 2.0,
        };
        assert!(matches!(solve_majorize_minimize(&inst, 1e-6, 10), Err(Error::StepOutOfRange { .. })));
    }
}
