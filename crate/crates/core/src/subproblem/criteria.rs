//! Checking a candidate against one of the three inexactness criteria.
//!
//! Every witness is an upper bound on the quantity the criterion constrains,
//! so acceptance is conservative.

use super::{
    duality_gap, solve_dual, solve_majorize_minimize, Criterion, DualOptions, SubproblemCertificate, SubproblemInstance,
    Witness,
};
use crate::error::{check_dim, Error, Result};
use crate::prox::{prox_oracle, Composite};
use crate::Vector;

#[derive(Debug, Clone, PartialEq)]
pub enum CriterionOutcome {
    Certified(SubproblemCertificate),
    Rejected { criterion: Criterion, witness: f64, threshold: f64 },
}

impl CriterionOutcome {
    pub fn is_certified(&self) -> bool {
        matches!(self, CriterionOutcome::Certified(_))
    }

    /// The witness value, whether or not it passed.
    pub fn witness(&self) -> f64 {
        match self {
            CriterionOutcome::Certified(c) => c.witness_value(),
            CriterionOutcome::Rejected { witness, .. } => *witness,
        }
    }
}

fn verdict(criterion: Criterion, eps: f64, witness: Witness, value: f64, threshold: f64, iters: usize) -> CriterionOutcome {
    if value <= threshold {
        CriterionOutcome::Certified(SubproblemCertificate {
            criterion,
            eps,
            witness,
            threshold,
            inner_iterations: iters,
        })
    } else {
        CriterionOutcome::Rejected {
            criterion,
            witness: value,
            threshold,
        }
    }
}

/// Checks `candidate` against `criterion` at accuracy `eps`. Reference
/// minimizers and dual points are computed to accuracy `oracle_tol`, which
/// should be well below `eps`.
pub fn check_criterion(
    criterion: Criterion,
    inst: &SubproblemInstance,
    candidate: &Vector,
    eps: f64,
    oracle_tol: f64,
) -> Result<CriterionOutcome> {
    check_dim(inst.dim(), candidate.len())?;
    let threshold = criterion.threshold(eps, inst.alpha, inst.tau);
    match criterion {
        Criterion::Sca => {
            let (reference, dist, iters) = reference_minimizer(inst, oracle_tol)?;
            let value = inst.metric.m_norm(&(candidate - &reference))? + dist;
            Ok(verdict(criterion, eps, Witness::Distance(value), value, threshold, iters))
        }
        Criterion::Scb => {
            let opts = DualOptions::default();
            let sol = solve_dual(inst, oracle_tol, &opts)?;
            check_scb_with_dual(inst, candidate, eps, &sol.xi)
        }
        Criterion::Scc => {
            if !inst.is_smooth() {
                return Err(Error::Unsupported("subgradient criterion needs smooth pieces".into()));
            }
            let mut g = inst.model_gradient(candidate);
            g += inst.metric.apply(&(candidate - &inst.anchor))? / inst.alpha;
            let s = inst.reg.nearest_subgradient(candidate, &(-&g));
            let element = g + s;
            let norm = inst.metric.m_inv_norm(&element)?;
            Ok(verdict(criterion, eps, Witness::Subgradient { element, norm }, norm, threshold, 0))
        }
    }
}

/// The gap criterion with a caller-supplied dual point.
pub fn check_scb_with_dual(inst: &SubproblemInstance, candidate: &Vector, eps: f64, xi: &Vector) -> Result<CriterionOutcome> {
    let threshold = Criterion::Scb.threshold(eps, inst.alpha, inst.tau);
    let gap = duality_gap(inst, candidate, xi)?;
    Ok(verdict(Criterion::Scb, eps, Witness::Gap { gap }, gap, threshold, 0))
}

/// A reference minimizer with a certified bound on its `M`-distance to the
/// exact one.
fn reference_minimizer(inst: &SubproblemInstance, tol: f64) -> Result<(Vector, f64, usize)> {
    if inst.needs_majorization() {
        let mm = solve_majorize_minimize(inst, tol, 1_000_000)?;
        return Ok((mm.point, mm.dist_bound, mm.iterations));
    }
    if inst.is_smooth() {
        let smooth = inst.smooth_model()?;
        let f = Composite::new(&smooth, inst.reg);
        let lmax = inst.metric.lambda_max();
        let est = prox_oracle(&f, inst.alpha, &inst.metric, &inst.anchor, tol / lmax.sqrt())?;
        return Ok((est.point, lmax.sqrt() * est.dist_bound, est.iterations));
    }
    let sol = solve_dual(inst, tol, &DualOptions::default())?;
    Ok((sol.point, tol, sol.iterations))
}
