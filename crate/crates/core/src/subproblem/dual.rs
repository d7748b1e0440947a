//! Dual of the subproblem in the batch variable `ξ ∈ Rᵐ`.
//!
//! With `M = I + ατ_p AᵀA` the dual function is
//! `Ψ(ξ) = (τ_p/2)‖u‖² − e_{H/τ_p}(u) + ‖v‖²/(2α) − e_{αr}(v)` where
//! `u = ξ/τ_p + Ax̄` and `v = x̄ − αAᵀξ`; with `M = I` the first two terms are
//! replaced by `H*(ξ)`. Primal candidates are `x̃ = prox_{αr}(v)`.
//!
//! The literal `Ψ` and the primal value are both of order `‖x̄‖²_M/(2α)`, so
//! their sum loses every significant digit long before the termination
//! threshold is reached. The solver works with `Ψ̃ = Ψ − ‖x̄‖²_M/(2α)`,
//! expanded so that nothing large cancels, and evaluates the duality gap as a
//! sum of nonnegative terms:
//!
//! gram: `Σᵢ [h_i(z_i) − h_i(y_i)] + Σⱼ [q_j(c_j) − q_j(x̃_j)]`, with
//! `h_i(t) = H_i(t) + (τ_p/2)(t − u_i)²`, `y = prox_{H/τ_p}(u)`, `z = Ac`,
//! `q_j(t) = r(t) + (t − v_j)²/(2α)`;
//!
//! identity: `Σᵢ [H_i(z_i) + H_i*(ξ_i) − z_iξ_i] + Σⱼ [q_j(c_j) − q_j(x̃_j)]`.

use nalgebra::Cholesky;

use super::{weighted_gram_norm, Criterion, ScalarPiece, SubproblemCertificate, SubproblemInstance, Witness};
use crate::error::{check_dim, Error, Result};
use crate::metric::MetricKind;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualMethod {
    /// Newton when the generalized Hessian is available, else accelerated
    /// gradient.
    #[default]
    Auto,
    Newton,
    Accelerated,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum DualStart {
    /// `ξ₀ = ∇H(Ax̄)`.
    #[default]
    Warm,
    Zero,
    Given(Vector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualOptions {
    pub method: DualMethod,
    pub start: DualStart,
    /// Iteration cap of the accelerated method.
    pub max_iter: usize,
    pub newton_max_iter: usize,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            method: DualMethod::Auto,
            start: DualStart::Warm,
            max_iter: 10_000,
            newton_max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub xi: Vector,
    /// `x̃ = prox_{αr}(x̄ − αAᵀξ)`.
    pub point: Vector,
    pub gap: f64,
    pub certificate: SubproblemCertificate,
    pub iterations: usize,
    pub method: DualMethod,
}

#[derive(Debug, Clone, Copy)]
enum Form {
    Gram { tau: f64 },
    Identity,
}

fn form(inst: &SubproblemInstance) -> Result<Form> {
    if !inst.is_convex_model() {
        return Err(Error::Unsupported("dual requires convex pieces".into()));
    }
    match inst.metric.kind() {
        MetricKind::Identity => Ok(Form::Identity),
        MetricKind::GramAugmented { scale, .. } => Ok(Form::Gram { tau: scale / inst.alpha }),
        MetricKind::Diagonal(_) => Err(Error::Unsupported("dual for diagonal metrics".into())),
    }
}

/// Everything the solver needs at one dual point.
struct Eval {
    xi: Vector,
    point: Vector,
    /// `prox_{H/τ_p}(u)` (gram form) or `∇H*(ξ)` when defined (identity).
    y: Option<Vector>,
    /// `v = x̄ − αAᵀξ`.
    v: Vector,
    grad_smooth: Vector,
    psi: f64,
    gap: f64,
}

struct Ctx<'a> {
    inst: &'a SubproblemInstance,
    form: Form,
    ax_bar: Vector,
}

impl<'a> Ctx<'a> {
    fn new(inst: &'a SubproblemInstance) -> Result<Self> {
        let form = form(inst)?;
        Ok(Self {
            inst,
            form,
            ax_bar: &inst.rows * &inst.anchor,
        })
    }

    fn eval(&self, xi: Vector) -> Eval {
        let inst = self.inst;
        let alpha = inst.alpha;
        let at_xi = inst.rows.tr_mul(&xi);
        let v = &inst.anchor - &at_xi * alpha;
        let point = inst.reg.prox_unchecked(alpha, &v);
        let z = &inst.rows * &point;

        let x_part: f64 = (0..point.len())
            .map(|j| {
                let dx = point[j] - inst.anchor[j];
                inst.reg.value_scalar(point[j]) + dx * dx / (2.0 * alpha) + point[j] * at_xi[j]
            })
            .sum();

        match self.form {
            Form::Gram { tau } => {
                let mut y = Vector::zeros(xi.len());
                let mut h_part = 0.0;
                let mut gap = 0.0;
                for (i, p) in inst.pieces.iter().enumerate() {
                    let c = self.ax_bar[i];
                    let u = xi[i] / tau + c;
                    let yi = p.prox(1.0 / tau, u);
                    y[i] = yi;
                    h_part += xi[i] * yi - p.value(yi) - 0.5 * tau * (yi - c) * (yi - c);
                    let dz = z[i] - yi;
                    gap += p.diff(z[i], yi) + 0.5 * tau * dz * (z[i] + yi - 2.0 * c) - xi[i] * dz;
                }
                let grad_smooth = &y - &z;
                Eval {
                    xi,
                    point,
                    y: Some(y),
                    v,
                    grad_smooth,
                    psi: h_part - x_part,
                    gap: gap.max(0.0),
                }
            }
            Form::Identity => {
                let conj: f64 = inst.pieces.iter().zip(xi.iter()).map(|(p, &s)| p.conj(s)).sum();
                let gap: f64 = inst
                    .pieces
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.fenchel_gap(z[i], xi[i]))
                    .sum();
                let y: Option<Vec<f64>> = inst
                    .pieces
                    .iter()
                    .zip(xi.iter())
                    .map(|(p, &s)| p.conj_derivative(s))
                    .collect();
                Eval {
                    point,
                    y: y.map(|y| Vector::from_vec(y)),
                    v,
                    grad_smooth: -z,
                    psi: conj - x_part,
                    gap,
                    xi,
                }
            }
        }
    }

    /// Gradient of `Ψ` (identity form: only when `H*` is differentiable).
    fn gradient(&self, e: &Eval) -> Option<Vector> {
        match self.form {
            Form::Gram { .. } => Some(e.grad_smooth.clone()),
            Form::Identity => e.y.as_ref().map(|y| y + &e.grad_smooth),
        }
    }

    /// Diagonal part of a generalized Hessian of `Ψ` at `e`.
    fn hessian_diag(&self, e: &Eval) -> Option<Vector> {
        let inst = self.inst;
        let mut diag = Vector::zeros(inst.m());
        for (i, p) in inst.pieces.iter().enumerate() {
            diag[i] = match self.form {
                Form::Gram { tau } => p.prox_derivative(1.0 / tau, e.xi[i] / tau + self.ax_bar[i]) / tau,
                Form::Identity => p.conj_second_derivative(e.xi[i])?,
            };
            if !diag[i].is_finite() {
                return None;
            }
        }
        Some(diag)
    }

    /// Solves `(D + αAJAᵀ) d = −g` for the Newton direction, where `J` is
    /// the derivative of `prox_{αr}` at `v`. When `m` exceeds the number of
    /// active coordinates plus small-`D` rows, the large-`D` rows are
    /// eliminated through `w = αJAᵀd`, leaving the quasi-definite system
    /// `[K Bᵀ; B −D_Z] [w; −d_Z] = [−A_Fᵀ D_F⁻¹ g_F; −g_Z]` with
    /// `K = (αJ)⁻¹ + A_Fᵀ D_F⁻¹ A_F` on the active coordinates.
    fn newton_direction(&self, e: &Eval, g: &Vector) -> Option<Vector> {
        let inst = self.inst;
        let (m, alpha) = (inst.m(), inst.alpha);
        let diag = self.hessian_diag(e)?;
        let jac = e.v.map(|t| inst.reg.prox_derivative_scalar(alpha, t));
        let support: Vec<usize> = (0..jac.len()).filter(|&j| jac[j] > 0.0).collect();
        let cut = 1e-6 * diag.max();
        let (free, kink): (Vec<usize>, Vec<usize>) = (0..m).partition(|&i| cut > 0.0 && diag[i] >= cut);
        let shift = 1e-12 * (1.0 + diag.max());

        if support.len() + kink.len() >= m {
            let mut aj = inst.rows.clone();
            for (j, mut col) in aj.column_iter_mut().enumerate() {
                col *= jac[j];
            }
            let mut h = &aj * inst.rows.transpose() * alpha;
            for i in 0..m {
                h[(i, i)] += diag[i] + shift;
            }
            return Cholesky::new(h).map(|c| -c.solve(g));
        }

        let (s, z) = (support.len(), kink.len());
        let a = &inst.rows;
        let mut sys = Matrix::zeros(s + z, s + z);
        let mut rhs = Vector::zeros(s + z);
        for (p, &j) in support.iter().enumerate() {
            sys[(p, p)] = 1.0 / (alpha * jac[j]);
        }
        for &i in &free {
            let inv = 1.0 / diag[i];
            for (p, &j) in support.iter().enumerate() {
                let aij = a[(i, j)] * inv;
                if aij == 0.0 {
                    continue;
                }
                rhs[p] -= aij * g[i];
                for (q, &l) in support.iter().enumerate() {
                    sys[(p, q)] += aij * a[(i, l)];
                }
            }
        }
        for (r, &i) in kink.iter().enumerate() {
            for (p, &j) in support.iter().enumerate() {
                sys[(s + r, p)] = a[(i, j)];
                sys[(p, s + r)] = a[(i, j)];
            }
            sys[(s + r, s + r)] = -(diag[i] + shift);
            rhs[s + r] = -g[i];
        }
        // nalgebra's LU panics on an empty system.
        let sol = if s + z == 0 { rhs } else { sys.lu().solve(&rhs)? };
        let mut d = Vector::zeros(m);
        for &i in &free {
            let aw: f64 = support.iter().enumerate().map(|(p, &j)| a[(i, j)] * sol[p]).sum();
            d[i] = -(g[i] + aw) / diag[i];
        }
        for (r, &i) in kink.iter().enumerate() {
            d[i] = -sol[s + r];
        }
        d.iter().all(|v| v.is_finite()).then_some(d)
    }

    fn newton_available(&self) -> bool {
        match self.form {
            Form::Gram { .. } => true,
            Form::Identity => self
                .inst
                .pieces
                .iter()
                .all(|p| matches!(p, ScalarPiece::Logistic { .. } | ScalarPiece::Squared { .. })),
        }
    }

    fn step_limit(&self, xi: &Vector, d: &Vector) -> f64 {
        match self.form {
            Form::Gram { .. } => 1.0,
            Form::Identity => self
                .inst
                .pieces
                .iter()
                .enumerate()
                .map(|(i, p)| p.conj_step_limit(xi[i], d[i]))
                .fold(1.0, f64::min),
        }
    }

    /// Moves a starting point into the interior of `dom H*`.
    fn interior(&self, mut xi: Vector) -> Vector {
        if let Form::Identity = self.form {
            for (i, p) in self.inst.pieces.iter().enumerate() {
                xi[i] = match *p {
                    ScalarPiece::Logistic { label, weight } if label != 0.0 => {
                        let q = (-label * xi[i] / weight).clamp(1e-12, 1.0 - 1e-12);
                        -q * weight / label
                    }
                    _ => p.prox_conj(1.0, xi[i]),
                };
            }
        }
        xi
    }

    fn start(&self, start: &DualStart) -> Result<Vector> {
        let m = self.inst.m();
        let xi = match start {
            DualStart::Warm => Vector::from_fn(m, |i, _| self.inst.pieces[i].derivative(self.ax_bar[i])),
            DualStart::Zero => Vector::zeros(m),
            DualStart::Given(xi) => {
                check_dim(m, xi.len())?;
                xi.clone()
            }
        };
        Ok(self.interior(xi))
    }
}

/// The dual function `Ψ(ξ)` as written, including its large constant.
pub fn dual_objective(inst: &SubproblemInstance, xi: &Vector) -> Result<f64> {
    check_dim(inst.m(), xi.len())?;
    let alpha = inst.alpha;
    let v = &inst.anchor - inst.rows.tr_mul(xi) * alpha;
    let x_part = v.norm_squared() / (2.0 * alpha) - inst.reg.moreau_env_unchecked(alpha, &v);
    match form(inst)? {
        Form::Gram { tau } => {
            let u = xi / tau + &inst.rows * &inst.anchor;
            let env: f64 = inst
                .pieces
                .iter()
                .zip(u.iter())
                .map(|(p, &ui)| {
                    let y = p.prox(1.0 / tau, ui);
                    p.value(y) + 0.5 * tau * (y - ui) * (y - ui)
                })
                .sum();
            Ok(0.5 * tau * u.norm_squared() - env + x_part)
        }
        Form::Identity => {
            let conj: f64 = inst.pieces.iter().zip(xi.iter()).map(|(p, &s)| p.conj(s)).sum();
            Ok(conj + x_part)
        }
    }
}

/// `∇Ψ(ξ) = prox_{H/τ_p}(u) − Ax̃` (gram) or `∇H*(ξ) − Ax̃` (identity).
pub fn dual_gradient(inst: &SubproblemInstance, xi: &Vector) -> Result<Vector> {
    check_dim(inst.m(), xi.len())?;
    let ctx = Ctx::new(inst)?;
    let e = ctx.eval(xi.clone());
    ctx.gradient(&e)
        .ok_or_else(|| Error::Unsupported("conjugate of a nonsmooth piece is not differentiable".into()))
}

/// `Ψ(ξ) − ‖x̄‖²_M/(2α)`, evaluated without large intermediate terms.
pub fn shifted_dual_objective(inst: &SubproblemInstance, xi: &Vector) -> Result<f64> {
    check_dim(inst.m(), xi.len())?;
    Ok(Ctx::new(inst)?.eval(xi.clone()).psi)
}

/// Upper bound `Φ(c) + Ψ(ξ) − ‖x̄‖²_M/(2α) ≥ Φ(c) − min Φ`.
pub fn duality_gap(inst: &SubproblemInstance, candidate: &Vector, xi: &Vector) -> Result<f64> {
    check_dim(inst.dim(), candidate.len())?;
    check_dim(inst.m(), xi.len())?;
    let ctx = Ctx::new(inst)?;
    let e = ctx.eval(xi.clone());
    let alpha = inst.alpha;
    let z = &inst.rows * candidate;
    let h_gap: f64 = match ctx.form {
        Form::Gram { tau } => {
            let y = e.y.as_ref().expect("gram form keeps y");
            inst.pieces
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let dz = z[i] - y[i];
                    p.diff(z[i], y[i]) + 0.5 * tau * dz * (z[i] + y[i] - 2.0 * ctx.ax_bar[i]) - xi[i] * dz
                })
                .sum()
        }
        Form::Identity => inst
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| p.fenchel_gap(z[i], xi[i]))
            .sum(),
    };
    let q_gap: f64 = (0..candidate.len())
        .map(|j| {
            let (c, x) = (candidate[j], e.point[j]);
            inst.reg.value_scalar(c) - inst.reg.value_scalar(x) + (c - x) * (c + x - 2.0 * e.v[j]) / (2.0 * alpha)
        })
        .sum();
    Ok(h_gap + q_gap)
}

/// Solves the dual until the gap at `x̃` certifies accuracy `eps` in the
/// `M`-norm; never returns an uncertified point.
pub fn solve_dual(inst: &SubproblemInstance, eps: f64, opts: &DualOptions) -> Result<DualSolution> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter {
            name: "eps",
            reason: format!("dual termination needs eps > 0, got {eps}"),
        });
    }
    let ctx = Ctx::new(inst)?;
    let threshold = Criterion::Scb.threshold(eps, inst.alpha, inst.tau);
    let xi0 = ctx.start(&opts.start)?;
    let use_newton = match opts.method {
        DualMethod::Auto | DualMethod::Newton => ctx.newton_available(),
        DualMethod::Accelerated => false,
    };
    if opts.method == DualMethod::Newton && !use_newton {
        return Err(Error::Unsupported("Newton dual needs differentiable conjugates".into()));
    }

    let finish = |e: Eval, iterations: usize, method: DualMethod| DualSolution {
        certificate: SubproblemCertificate {
            criterion: Criterion::Scb,
            eps,
            witness: Witness::Gap { gap: e.gap },
            threshold,
            inner_iterations: iterations,
        },
        xi: e.xi,
        point: e.point,
        gap: e.gap,
        iterations,
        method,
    };

    let mut start = ctx.eval(xi0);
    let mut spent = 0;
    if start.gap <= threshold {
        return Ok(finish(start, 0, if use_newton { DualMethod::Newton } else { DualMethod::Accelerated }));
    }
    if use_newton {
        match newton(&ctx, start, threshold, opts.newton_max_iter) {
            Ok((e, it)) => return Ok(finish(e, it, DualMethod::Newton)),
            Err((best, it)) => {
                start = best;
                spent = it;
            }
        }
    }
    let (e, it) = accelerated(&ctx, start, threshold, opts.max_iter)?;
    Ok(finish(e, spent + it, DualMethod::Accelerated))
}

/// Damped semismooth Newton; on stagnation hands back the best point.
fn newton(ctx: &Ctx<'_>, start: Eval, threshold: f64, max_iter: usize) -> std::result::Result<(Eval, usize), (Eval, usize)> {
    let mut cur = start;
    for it in 1..=max_iter {
        let Some(g) = ctx.gradient(&cur) else {
            return Err((cur, it));
        };
        let Some(d) = ctx.newton_direction(&cur, &g) else {
            return Err((cur, it));
        };
        let slope = g.dot(&d);
        let mut s = ctx.step_limit(&cur.xi, &d);
        let mut accepted = None;
        for _ in 0..40 {
            let trial = ctx.eval(&cur.xi + &d * s);
            let armijo = trial.psi <= cur.psi + 1e-4 * s * slope;
            if trial.gap.is_finite() && (armijo || trial.gap < cur.gap) {
                accepted = Some(trial);
                break;
            }
            s *= 0.5;
        }
        let Some(next) = accepted else {
            return Err((cur, it));
        };
        cur = next;
        if cur.gap <= threshold {
            return Ok((cur, it));
        }
    }
    Err((cur, max_iter))
}

/// FISTA on `Ψ` with function-value restarts. In the identity form the
/// conjugate terms are handled by their proximal maps.
fn accelerated(ctx: &Ctx<'_>, start: Eval, threshold: f64, max_iter: usize) -> Result<(Eval, usize)> {
    let inst = ctx.inst;
    let theta = inst.reg.weak_convexity();
    let smooth_lip = inst.alpha * weighted_gram_norm(&inst.rows) / (1.0 - inst.alpha * theta);
    let lip = match ctx.form {
        Form::Gram { tau } => 1.0 / tau + smooth_lip,
        Form::Identity => smooth_lip,
    }
    .max(f64::MIN_POSITIVE.sqrt());
    let step = 1.0 / lip;

    // Gram form: `grad_smooth` is the full gradient. Identity form: it is
    // the gradient of the envelope part and `H*` enters through its prox.
    let forward_backward = |w: &Eval| -> Vector {
        let trial = &w.xi - &w.grad_smooth * step;
        match ctx.form {
            Form::Gram { .. } => trial,
            Form::Identity => Vector::from_fn(trial.len(), |i, _| inst.pieces[i].prox_conj(step, trial[i])),
        }
    };

    let mut x = start;
    let mut best_gap = x.gap;
    let mut w = ctx.eval(x.xi.clone());
    let mut t = 1.0_f64;
    for it in 1..=max_iter {
        let next = ctx.eval(forward_backward(&w));
        best_gap = best_gap.min(next.gap);
        if next.gap <= threshold {
            return Ok((next, it));
        }
        if next.psi > x.psi {
            t = 1.0;
            w = ctx.eval(x.xi.clone());
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let extrapolated = &next.xi + (&next.xi - &x.xi) * momentum;
        t = t_next;
        x = next;
        w = ctx.eval(extrapolated);
    }
    Err(Error::NonConvergence {
        solver: "dual accelerated gradient",
        iterations: max_iter,
        residual: best_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::Metric;
    use crate::prox::{prox_oracle, Composite, Regularizer};
    use crate::subproblem::BatchSmooth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Matrix {
        Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vector {
        Vector::from_fn(d, |_, _| scale * rng.random_range(-1.0..1.0))
    }

    fn logistic_instance(rng: &mut ChaCha8Rng, m: usize, d: usize, gram: bool, reg: Regularizer) -> SubproblemInstance {
        let rows = random_matrix(rng, m, d);
        let pieces = (0..m)
            .map(|_| ScalarPiece::Logistic {
                label: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                weight: rng.random_range(0.5..3.0),
            })
            .collect();
        let alpha = rng.random_range(0.2..2.0);
        let metric = if gram {
            Metric::build_subsampled(&rows, alpha, rng.random_range(0.1..5.0)).unwrap()
        } else {
            Metric::identity(d)
        };
        let anchor = random_vector(rng, d, 2.0);
        SubproblemInstance::new(pieces, rows, reg, metric, alpha, anchor, 0.0).unwrap()
    }

    #[test]
    fn zero_functions_reduce_to_the_anchor_constant() {
        // Envelopes of zero functions vanish, so Ψ(0) = ‖x̄‖²_M/(2α) and the
        // shifted dual is zero.
        let rows = Matrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let pieces = vec![ScalarPiece::Affine { offset: 0.0, slope: 0.0, weight: 1.0 }; 2];
        let metric = Metric::build_subsampled(&rows, 0.7, 2.0).unwrap();
        let anchor = Vector::from_vec(vec![0.3, -1.2]);
        let expect = metric.quad(&anchor).unwrap() / (2.0 * 0.7);
        let inst = SubproblemInstance::new(pieces, rows, Regularizer::Zero, metric, 0.7, anchor, 0.0).unwrap();
        let psi = dual_objective(&inst, &Vector::zeros(2)).unwrap();
        assert!((psi - expect).abs() < 1e-12, "{psi} vs {expect}");
        assert!(shifted_dual_objective(&inst, &Vector::zeros(2)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scalar_quadratic_dual_matches_hand_assembly() {
        // H(y) = ½(y − b)², r = 0, d = m = 1, A = a.
        let (a, b, alpha, tau, xb) = (1.5, 0.4, 0.8, 2.0, 0.9);
        let rows = Matrix::from_element(1, 1, a);
        let metric = Metric::build_subsampled(&rows, alpha, tau).unwrap();
        let inst = SubproblemInstance::new(
            vec![ScalarPiece::Squared { target: b, weight: 1.0 }],
            rows,
            Regularizer::Zero,
            metric,
            alpha,
            Vector::from_element(1, xb),
            0.0,
        )
        .unwrap();
        // e_{H/τ}(u) = min_y ½(y−b)² + (τ/2)(y−u)² = τ/(2(1+τ)) (u−b)²; e_{α·0}(v) = 0.
        let u = a * xb;
        let v = xb;
        let expect = 0.5 * tau * u * u - tau / (2.0 * (1.0 + tau)) * (u - b) * (u - b) + v * v / (2.0 * alpha);
        let psi = dual_objective(&inst, &Vector::zeros(1)).unwrap();
        assert!((psi - expect).abs() < 1e-12, "{psi} vs {expect}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for gram in [true, false] {
            for reg in [Regularizer::Zero, Regularizer::sq_l2(0.3).unwrap(), Regularizer::l1(0.2).unwrap()] {
                let inst = logistic_instance(&mut rng, 3, 4, gram, reg);
                let ctx = Ctx::new(&inst).unwrap();
                let xi = ctx.start(&DualStart::Warm).unwrap() * 0.7;
                let g = dual_gradient(&inst, &xi).unwrap();
                for i in 0..3 {
                    let h = 1e-6;
                    let mut p = xi.clone();
                    p[i] += h;
                    let mut q = xi.clone();
                    q[i] -= h;
                    let fd = (dual_objective(&inst, &p).unwrap() - dual_objective(&inst, &q).unwrap()) / (2.0 * h);
                    assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()), "gram={gram} {reg:?}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn shifted_dual_differs_by_the_anchor_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for gram in [true, false] {
            let inst = logistic_instance(&mut rng, 4, 3, gram, Regularizer::l1(0.1).unwrap());
            let ctx = Ctx::new(&inst).unwrap();
            let xi = ctx.start(&DualStart::Warm).unwrap();
            let shift = inst.metric.quad(&inst.anchor).unwrap() / (2.0 * inst.alpha);
            let lit = dual_objective(&inst, &xi).unwrap();
            let sh = shifted_dual_objective(&inst, &xi).unwrap();
            assert!((lit - shift - sh).abs() < 1e-10 * (1.0 + lit.abs()), "{lit} {shift} {sh}");
        }
    }

    #[test]
    fn stable_gap_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for gram in [true, false] {
            let inst = logistic_instance(&mut rng, 3, 5, gram, Regularizer::mcp(0.5, 2.0).unwrap());
            if inst.alpha * inst.tau >= 1.0 {
                continue;
            }
            let ctx = Ctx::new(&inst).unwrap();
            let xi = ctx.start(&DualStart::Warm).unwrap();
            let c = random_vector(&mut rng, 5, 1.0);
            let direct = inst.objective(&c) + dual_objective(&inst, &xi).unwrap()
                - inst.metric.quad(&inst.anchor).unwrap() / (2.0 * inst.alpha);
            let stable = duality_gap(&inst, &c, &xi).unwrap();
            assert!(stable >= 0.0);
            assert!((direct - stable).abs() < 1e-9 * (1.0 + direct.abs()), "{direct} vs {stable}");
        }
    }

    #[test]
    fn weak_duality_along_random_dual_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..40 {
            let reg = match trial % 3 {
                0 => Regularizer::l1(0.3).unwrap(),
                1 => Regularizer::mcp(0.4, 3.0).unwrap(),
                _ => Regularizer::sq_l2(0.5).unwrap(),
            };
            let inst = logistic_instance(&mut rng, 4, 3, trial % 2 == 0, reg);
            if inst.alpha * inst.tau >= 1.0 {
                continue;
            }
            let ctx = Ctx::new(&inst).unwrap();
            for _ in 0..10 {
                let xi = ctx.interior(random_vector(&mut rng, 4, 3.0));
                let c = random_vector(&mut rng, 3, 3.0);
                assert!(duality_gap(&inst, &c, &xi).unwrap() >= -1e-10);
            }
        }
    }

    fn oracle(inst: &SubproblemInstance, tol: f64) -> Vector {
        let smooth = BatchSmooth::new(inst.rows.clone(), inst.pieces.clone()).unwrap();
        let f = Composite::new(&smooth, inst.reg);
        prox_oracle(&f, inst.alpha, &inst.metric, &inst.anchor, tol).unwrap().point
    }

    #[test]
    fn small_logistic_batch_is_within_eps_of_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for gram in [true, false] {
            for method in [DualMethod::Newton, DualMethod::Accelerated] {
                let inst = logistic_instance(&mut rng, 4, 3, gram, Regularizer::l1(0.2).unwrap());
                let eps = 1e-3;
                let opts = DualOptions { method, ..Default::default() };
                let sol = solve_dual(&inst, eps, &opts).unwrap();
                assert_eq!(sol.method, method);
                let truth = oracle(&inst, 1e-9);
                let dist = inst.metric.m_norm(&(&sol.point - truth)).unwrap();
                assert!(dist <= eps, "gram={gram} {method:?}: {dist}");
            }
        }
    }

    #[test]
    fn quadratic_instance_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, d) = (3, 4);
        let rows = random_matrix(&mut rng, m, d);
        let targets = random_vector(&mut rng, m, 1.0);
        let w = 1.3;
        let (alpha, lambda) = (0.6, 0.25);
        let pieces = targets.iter().map(|&b| ScalarPiece::Squared { target: b, weight: w }).collect();
        let metric = Metric::build_subsampled(&rows, alpha, 1.5).unwrap();
        let anchor = random_vector(&mut rng, d, 1.0);
        let inst =
            SubproblemInstance::new(pieces, rows.clone(), Regularizer::sq_l2(lambda).unwrap(), metric.clone(), alpha, anchor.clone(), 0.0)
                .unwrap();
        // (wAᵀA + λI + M/α) y = wAᵀb + Mx̄/α.
        let mdense = metric.dense();
        let lhs = rows.tr_mul(&rows) * w + Matrix::identity(d, d) * lambda + &mdense / alpha;
        let rhs = rows.tr_mul(&targets) * w + &mdense * &anchor / alpha;
        let exact = lhs.lu().solve(&rhs).unwrap();
        let eps = 1e-6;
        let sol = solve_dual(&inst, eps, &DualOptions::default()).unwrap();
        assert!(metric.m_norm(&(&sol.point - exact)).unwrap() <= eps);
    }

    #[test]
    fn loose_tolerance_stops_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inst = logistic_instance(&mut rng, 3, 3, true, Regularizer::Zero);
        let eps = 10.0 * inst.metric.m_norm(&inst.anchor).unwrap() + 100.0;
        let opts = DualOptions { start: DualStart::Zero, ..Default::default() };
        let sol = solve_dual(&inst, eps, &opts).unwrap();
        assert!(sol.iterations <= 1);
    }

    #[test]
    fn nonsmooth_pieces_use_accelerated_method() {
        let rows = Matrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 1.0]);
        let pieces = vec![
            ScalarPiece::AbsAffine { offset: -1.0, slope: 2.0, weight: 0.5 },
            ScalarPiece::AbsAffine { offset: 0.4, slope: -1.0, weight: 0.5 },
        ];
        let inst = SubproblemInstance::new(
            pieces,
            rows,
            Regularizer::l1(0.1).unwrap(),
            Metric::identity(2),
            0.5,
            Vector::from_vec(vec![1.0, -1.0]),
            0.0,
        )
        .unwrap();
        let sol = solve_dual(&inst, 1e-4, &DualOptions::default()).unwrap();
        assert_eq!(sol.method, DualMethod::Accelerated);
        // Grid oracle on the 2-d objective.
        let mut best = (f64::INFINITY, Vector::zeros(2));
        let n = 800;
        for i in 0..=n {
            for j in 0..=n {
                let y = Vector::from_vec(vec![-1.0 + 3.0 * i as f64 / n as f64, -2.0 + 3.0 * j as f64 / n as f64]);
                let v = inst.objective(&y);
                if v < best.0 {
                    best = (v, y);
                }
            }
        }
        assert!((&sol.point - &best.1).norm() < 1e-2);
        assert!(inst.objective(&sol.point) <= best.0 + 1e-8);
    }

    #[test]
    fn exhausted_cap_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inst = logistic_instance(&mut rng, 4, 3, false, Regularizer::l1(0.1).unwrap());
        let opts = DualOptions {
            method: DualMethod::Accelerated,
            start: DualStart::Zero,
            max_iter: 2,
            ..Default::default()
        };
        let err = solve_dual(&inst, 1e-12, &opts).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn reduced_newton_system_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (m, d) = (30, 4);
        let rows = random_matrix(&mut rng, m, d);
        let pieces: Vec<ScalarPiece> = (0..m)
            .map(|i| {
                if i % 3 == 0 {
                    ScalarPiece::AbsAffine { offset: rng.random_range(-1.0..1.0), slope: 1.0, weight: 0.3 }
                } else {
                    ScalarPiece::Logistic { label: 1.0, weight: 0.7 }
                }
            })
            .collect();
        let alpha = 0.4;
        let metric = Metric::build_subsampled(&rows, alpha, 0.8).unwrap();
        let inst = SubproblemInstance::new(pieces, rows.clone(), Regularizer::l1(0.3).unwrap(), metric, alpha, random_vector(&mut rng, d, 1.0), 0.0)
            .unwrap();
        let ctx = Ctx::new(&inst).unwrap();
        let e = ctx.eval(random_vector(&mut rng, m, 0.5));
        let g = ctx.gradient(&e).unwrap();
        let dir = ctx.newton_direction(&e, &g).unwrap();
        // Residual of the unreduced system.
        let diag = ctx.hessian_diag(&e).unwrap();
        let jac = e.v.map(|t| inst.reg.prox_derivative_scalar(alpha, t));
        let h = &rows * Matrix::from_diagonal(&jac) * rows.transpose() * alpha + Matrix::from_diagonal(&diag);
        let resid = (&h * &dir + &g).norm();
        assert!(resid < 1e-8 * (1.0 + g.norm()), "{resid}");
    }

    #[test]
    fn fully_thresholded_newton_step_is_diagonal() {
        // A huge l1 weight zeroes every coordinate, leaving an empty reduced
        // system: the step is −g/D.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let inst = logistic_instance(&mut rng, 3, 5, false, Regularizer::l1(1e6).unwrap());
        let ctx = Ctx::new(&inst).unwrap();
        let e = ctx.eval(ctx.start(&DualStart::Warm).unwrap());
        let g = ctx.gradient(&e).unwrap();
        let diag = ctx.hessian_diag(&e).unwrap();
        let dir = ctx.newton_direction(&e, &g).unwrap();
        let expect = -g.component_div(&diag);
        assert!((&dir - &expect).norm() <= 1e-9 * expect.norm(), "{dir} vs {expect}");
        assert!(solve_dual(&inst, 1e-8, &DualOptions::default()).is_ok());
    }
}
