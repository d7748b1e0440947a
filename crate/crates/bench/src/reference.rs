//! Deterministic full-batch solves that supply `x̂*` and `φ̂*`.
//!
//! Convex regularizers use accelerated proximal gradient with gradient-based
//! restarts. The MCP problem uses plain proximal gradient from several starts
//! and keeps the lowest objective. Both stop on the proximal-gradient KKT
//! residual.

use anyhow::{bail, Result};
use ispppa::diagnostics::kkt_residual;
use ispppa::{Regularizer, SmoothFn, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct RefSolution {
    pub x: Vector,
    pub value: f64,
    /// KKT residual of `x` at step `kkt_alpha`.
    pub kkt: f64,
    pub kkt_alpha: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RefOptions {
    pub tol: f64,
    pub kkt_alpha: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

pub fn reference_solve(f: &dyn SmoothFn, reg: &Regularizer, start: &Vector, opts: &RefOptions) -> Result<RefSolution> {
    if reg.weak_convexity() == 0.0 {
        return accelerated(f, reg, start, opts);
    }
    let mut best = proximal_gradient(f, reg, start, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let radius = best.x.norm().max(1.0) / (f.dim() as f64).sqrt();
    for _ in 0..opts.restarts {
        let x0 = Vector::from_fn(f.dim(), |_, _| radius * rng.sample::<f64, _>(StandardNormal));
        let sol = proximal_gradient(f, reg, &x0, opts)?;
        if sol.value < best.value {
            best = sol;
        }
    }
    Ok(best)
}

fn finish(f: &dyn SmoothFn, reg: &Regularizer, x: Vector, kkt: f64, opts: &RefOptions, iterations: usize) -> RefSolution {
    RefSolution {
        value: f.value(&x) + reg.value(&x),
        x,
        kkt,
        kkt_alpha: opts.kkt_alpha,
        iterations,
    }
}

fn accelerated(f: &dyn SmoothFn, reg: &Regularizer, start: &Vector, opts: &RefOptions) -> Result<RefSolution> {
    // A zero loss has L = 0; any finite step is then exact.
    let step = 1.0 / f.lipschitz().max(f64::MIN_POSITIVE.sqrt());
    let mut x = start.clone();
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut kkt = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let x_new = reg.prox(step, &(&y - f.gradient(&y) * step))?;
        if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
            t = 1.0;
            y = x_new.clone();
        } else {
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
            t = t_new;
        }
        x = x_new;
        if it % 10 == 0 {
            kkt = kkt_residual(&x, f, reg, opts.kkt_alpha)?;
            if kkt <= opts.tol {
                return Ok(finish(f, reg, x, kkt, opts, it));
            }
        }
    }
    bail!(
        "reference solver reached {} iterations with KKT residual {kkt:e} > {:e}",
        opts.max_iter,
        opts.tol
    )
}

fn proximal_gradient(f: &dyn SmoothFn, reg: &Regularizer, start: &Vector, opts: &RefOptions) -> Result<RefSolution> {
    let step = (1.0 / f.lipschitz().max(f64::MIN_POSITIVE.sqrt())).min(0.5 * reg.max_step());
    let mut x = start.clone();
    let mut kkt = f64::INFINITY;
    for it in 0..opts.max_iter {
        let g = f.gradient(&x);
        kkt = (&x - reg.prox(opts.kkt_alpha, &(&x - &g * opts.kkt_alpha))?).norm();
        if kkt <= opts.tol {
            return Ok(finish(f, reg, x, kkt, opts, it));
        }
        x = reg.prox(step, &(&x - g * step))?;
    }
    bail!(
        "reference solver reached {} iterations with KKT residual {kkt:e} > {:e}",
        opts.max_iter,
        opts.tol
    )
}
