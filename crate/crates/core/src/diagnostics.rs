//! Stationarity measures, distances to a reference solution, and log-log
//! rate fitting over traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::metric::Metric;
use crate::model::{DataMatrix, LossFamily, ModelFunction, ModelKind};
use crate::prox::{prox_oracle, Composite, ProxEstimate, Regularizer, SmoothFn};
use crate::subproblem::{solve_dual, solve_majorize_minimize, BatchSmooth, DualOptions, ScalarPiece, SubproblemInstance};
use crate::{Matrix, Vector};

/// `‖x − prox_{αr}(x − α∇F(x))‖₂`.
pub fn kkt_residual(x: &Vector, f: &dyn SmoothFn, reg: &Regularizer, alpha: f64) -> Result<f64> {
    check_dim(f.dim(), x.len())?;
    let step = x - f.gradient(x) * alpha;
    Ok((x - reg.prox(alpha, &step)?).norm())
}

/// Factors `(1 − c, 1 + c)` with `c = αL/(1 − αθ̄)` relating the
/// proximal-gradient residual to `‖x − prox_{αφ}(x)‖₂`.
pub fn kkt_sandwich(alpha_l: f64, alpha_theta: f64) -> Result<(f64, f64)> {
    if !(alpha_theta < 1.0) || alpha_theta < 0.0 || alpha_l < 0.0 {
        return Err(Error::InvalidParameter {
            name: "alpha_theta",
            reason: format!("need 0 ≤ αθ̄ < 1 and αL ≥ 0, got αθ̄ = {alpha_theta}, αL = {alpha_l}"),
        });
    }
    let c = alpha_l / (1.0 - alpha_theta);
    Ok((1.0 - c, 1.0 + c))
}

/// `Σᵢ H_i(a_iᵀx) + r(x)`: the shape every objective in the crate takes.
#[derive(Debug, Clone)]
pub struct PieceSum {
    pub rows: Matrix,
    pub pieces: Vec<ScalarPiece>,
    pub reg: Regularizer,
}

impl PieceSum {
    pub fn new(rows: Matrix, pieces: Vec<ScalarPiece>, reg: Regularizer) -> Result<Self> {
        check_dim(rows.nrows(), pieces.len())?;
        reg.validate()?;
        Ok(Self { rows, pieces, reg })
    }

    /// `(1/n) Σ scale · ℓ(a_iᵀx; b_i) + r(x)`.
    pub fn finite_sum(data: &DataMatrix, loss: LossFamily, scale: f64, reg: Regularizer) -> Result<Self> {
        let model = ModelFunction::new(ModelKind::ProximalPoint, loss, scale)?;
        let w = 1.0 / data.n() as f64;
        let pieces = data.b().iter().map(|&b| model.piece(0.0, b, w)).collect();
        Self::new(data.a().clone(), pieces, reg)
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn value(&self, x: &Vector) -> f64 {
        let z = &self.rows * x;
        self.pieces.iter().zip(z.iter()).map(|(p, &t)| p.value(t)).sum::<f64>() + self.reg.value(x)
    }

    /// Weak-convexity constant of the whole sum.
    pub fn weak_convexity(&self) -> f64 {
        self.reg.weak_convexity()
            + self
                .pieces
                .iter()
                .zip(self.rows.row_iter())
                .map(|(p, a)| p.weak_convexity() * a.norm_squared())
                .sum::<f64>()
    }
}

/// An objective whose proximal map can be computed with a certificate.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    Composite(&'a Composite<'a>),
    Pieces(&'a PieceSum),
}

impl Objective<'_> {
    pub fn value(&self, x: &Vector) -> f64 {
        match self {
            Objective::Composite(c) => c.value(x),
            Objective::Pieces(p) => p.value(x),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Composite(c) => c.dim(),
            Objective::Pieces(p) => p.dim(),
        }
    }
}

/// `prox^M_{αφ}(x)` with a certified Euclidean distance bound `≤ tol`.
pub fn prox_point(phi: Objective<'_>, alpha: f64, metric: &Metric, x: &Vector, tol: f64) -> Result<ProxEstimate> {
    match phi {
        Objective::Composite(c) => prox_oracle(c, alpha, metric, x, tol),
        Objective::Pieces(p) => {
            check_dim(p.dim(), x.len())?;
            let inst = SubproblemInstance::new(p.pieces.clone(), p.rows.clone(), p.reg, metric.clone(), alpha, x.clone(), 0.0)?;
            if inst.needs_majorization() {
                let mm = solve_majorize_minimize(&inst, tol, 1_000_000)?;
                return Ok(ProxEstimate {
                    point: mm.point,
                    dist_bound: mm.dist_bound,
                    iterations: mm.iterations,
                });
            }
            if inst.is_smooth() {
                let smooth = BatchSmooth::new(p.rows.clone(), p.pieces.clone())?;
                return prox_oracle(&Composite::new(&smooth, p.reg), alpha, metric, x, tol);
            }
            // The gap certificate bounds the M-distance, which dominates the
            // Euclidean one for metrics with λ_min ≥ 1.
            let scale = metric.lambda_min().min(1.0).sqrt();
            let sol = solve_dual(&inst, tol * scale, &DualOptions::default())?;
            Ok(ProxEstimate {
                point: sol.point,
                dist_bound: tol,
                iterations: sol.iterations,
            })
        }
    }
}

/// `∇e^M_{φ/ρ̄}(x) = ρ̄ M (x − prox^M_{φ/ρ̄}(x))`.
pub fn me_grad(phi: Objective<'_>, rho_bar: f64, metric: &Metric, x: &Vector, tol: f64) -> Result<Vector> {
    if !(rho_bar > 0.0) {
        return Err(Error::InvalidParameter {
            name: "rho_bar",
            reason: format!("must be positive, got {rho_bar}"),
        });
    }
    let p = prox_point(phi, 1.0 / rho_bar, metric, x, tol)?;
    Ok(metric.apply(&(x - p.point))? * rho_bar)
}

/// `‖∇e^M_{φ/ρ̄}(x)‖₂`; the prox is computed to Euclidean accuracy `tol`, so
/// the result is within `ρ̄ λ_max(M) tol` of the exact value.
pub fn me_grad_norm(phi: Objective<'_>, rho_bar: f64, metric: &Metric, x: &Vector, tol: f64) -> Result<f64> {
    Ok(me_grad(phi, rho_bar, metric, x, tol)?.norm())
}

/// `e^M_{αφ}(x)`.
pub fn moreau_env(phi: Objective<'_>, alpha: f64, metric: &Metric, x: &Vector, tol: f64) -> Result<f64> {
    let p = prox_point(phi, alpha, metric, x, tol)?;
    Ok(phi.value(&p.point) + metric.quad(&(&p.point - x))? / (2.0 * alpha))
}

/// Default `ρ̄ = 2(η̄ + τ̄) + 1` for Moreau-envelope diagnostics.
pub fn default_rho_bar(eta_bar: f64, tau_bar: f64) -> f64 {
    2.0 * (eta_bar + tau_bar) + 1.0
}

pub fn dist_to_solution(x: &Vector, x_ref: &Vector) -> Result<f64> {
    check_dim(x_ref.len(), x.len())?;
    Ok((x - x_ref).norm())
}

/// `φ(x) − φ_ref`, clipped below at zero.
pub fn fgap(phi_x: f64, phi_ref: f64) -> f64 {
    (phi_x - phi_ref).max(0.0)
}

/// Resolution of `fgap` given a reference point with proximal-gradient
/// residual `kkt_tol`: `max(10 L tol², 64 ε_mach |φ_ref|)`.
pub fn fgap_floor(smooth_lipschitz: f64, kkt_tol: f64, phi_ref: f64) -> f64 {
    (10.0 * smooth_lipschitz * kkt_tol * kkt_tol).max(64.0 * f64::EPSILON * phi_ref.abs())
}

/// Smallest `(φ(x_ref + t u) − φ_ref)/t²` over random unit directions `u` and
/// lengths `t ∈ (0, radius]`: an empirical quadratic-growth constant.
pub fn quadratic_growth_estimate(
    phi: &dyn Fn(&Vector) -> f64,
    x_ref: &Vector,
    phi_ref: f64,
    rays: usize,
    radius: f64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for _ in 0..rays {
        let u = Vector::from_fn(x_ref.len(), |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        for j in 1..=8 {
            let t = radius * 0.5f64.powi(j - 1) * (0.5 + 0.5 * rng.random::<f64>());
            let c = (phi(&(x_ref + &u * t)) - phi_ref) / (t * t);
            best = best.min(c);
        }
    }
    best
}

/// Least-squares fit of `log v = intercept + slope · log k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub k_min: f64,
    pub k_max: f64,
    pub slope: f64,
    pub intercept: f64,
    pub rms: f64,
    pub points: usize,
}

/// Fits the last `window` fraction (in `log k`) of the series.
pub fn fit_rate(ks: &[f64], values: &[f64], window: f64) -> Result<RateFit> {
    check_dim(ks.len(), values.len())?;
    if ks.is_empty() {
        return Err(Error::Empty("rate series"));
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "window",
            reason: format!("must lie in (0, 1], got {window}"),
        });
    }
    let lo = ks.iter().cloned().fold(f64::INFINITY, f64::min).ln();
    let hi = ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ln();
    let cut = hi - window * (hi - lo);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let (mut k_min, mut k_max) = (f64::INFINITY, 0.0_f64);
    for (&k, &v) in ks.iter().zip(values) {
        if k.ln() < cut - 1e-12 {
            continue;
        }
        if !(v > 0.0) {
            return Err(Error::NonPositiveSeries { k: k as usize, value: v });
        }
        xs.push(k.ln());
        ys.push(v.ln());
        k_min = k_min.min(k);
        k_max = k_max.max(k);
    }
    if xs.len() < 10 {
        return Err(Error::InvalidParameter {
            name: "window",
            reason: format!("needs at least 10 points, found {}", xs.len()),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(RateFit {
        k_min,
        k_max,
        slope,
        intercept,
        rms,
        points: xs.len(),
    })
}

/// Elementwise mean of equally indexed series.
pub fn average_series(series: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = series.first().ok_or(Error::Empty("series"))?;
    for s in series {
        check_dim(first.len(), s.len())?;
    }
    let n = series.len() as f64;
    Ok((0..first.len()).map(|i| series.iter().map(|s| s[i]).sum::<f64>() / n).collect())
}

/// `min_{i ≤ k} v_i` for each `k`.
pub fn running_min(values: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .iter()
        .map(|&v| {
            best = best.min(v);
            best
        })
        .collect()
}
