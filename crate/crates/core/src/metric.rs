//! Preconditioners `M` used in the proximal term `‖x − x̄‖²_M / (2α)`.

use std::sync::OnceLock;

use nalgebra::Cholesky;
use nalgebra::Dyn;

use crate::error::{check_dim, Error, Result};
use crate::linalg::spectral_norm;
use crate::{Matrix, Vector};

/// Dense solves are used up to this dimension; larger problems use CG.
const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone)]
pub enum MetricKind {
    Identity,
    /// `M = diag(w)` with strictly positive weights.
    Diagonal(Vector),
    /// `M = I + scale · BᵀB`.
    GramAugmented { factor: Matrix, scale: f64 },
}

/// A self-adjoint positive-definite operator on `ℝᵈ`.
///
/// Metrics are immutable once built. Factorizations and spectral estimates
/// are computed lazily on first use and cached.
#[derive(Debug, Clone)]
pub struct Metric {
    kind: MetricKind,
    dim: usize,
    chol: OnceLock<Option<Cholesky<f64, Dyn>>>,
    factor_norm: OnceLock<f64>,
}

impl Metric {
    pub fn identity(dim: usize) -> Self {
        Self::from_kind(MetricKind::Identity, dim)
    }

    pub fn diagonal(weights: Vector) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: format!("diagonal entries must be positive and finite, got {w}"),
            });
        }
        let dim = weights.len();
        Ok(Self::from_kind(MetricKind::Diagonal(weights), dim))
    }

    /// `M = I + scale · BᵀB` with `scale ≥ 0`.
    pub fn gram_augmented(factor: Matrix, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "scale",
                reason: format!("must be finite and nonnegative, got {scale}"),
            });
        }
        let dim = factor.ncols();
        Ok(Self::from_kind(MetricKind::GramAugmented { factor, scale }, dim))
    }

    /// The subsampled preconditioner `I + α τ A_SᵀA_S`.
    pub fn build_subsampled(rows: &Matrix, alpha: f64, tau: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must be positive, got {alpha}"),
            });
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tau",
                reason: format!("must be positive, got {tau}"),
            });
        }
        if rows.nrows() == 0 {
            return Err(Error::Empty("batch rows"));
        }
        Self::gram_augmented(rows.clone(), alpha * tau)
    }

    fn from_kind(kind: MetricKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            chol: OnceLock::new(),
            factor_norm: OnceLock::new(),
        }
    }

    pub fn kind(&self) -> &MetricKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        match &self.kind {
            MetricKind::Identity => true,
            MetricKind::GramAugmented { scale, factor } => *scale == 0.0 || factor.nrows() == 0,
            MetricKind::Diagonal(_) => false,
        }
    }

    /// `Mx`.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim, x.len())?;
        Ok(self.apply_unchecked(x))
    }

    pub(crate) fn apply_unchecked(&self, x: &Vector) -> Vector {
        match &self.kind {
            MetricKind::Identity => x.clone(),
            MetricKind::Diagonal(w) => w.component_mul(x),
            MetricKind::GramAugmented { factor, scale } => {
                let bx = factor * x;
                x + factor.tr_mul(&bx) * *scale
            }
        }
    }

    /// `⟨x, Mx⟩`, evaluated without forming `Mx` for the Gram kind.
    pub fn quad(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.quad_unchecked(x))
    }

    pub(crate) fn quad_unchecked(&self, x: &Vector) -> f64 {
        match &self.kind {
            MetricKind::Identity => x.norm_squared(),
            MetricKind::Diagonal(w) => w.iter().zip(x.iter()).map(|(w, v)| w * v * v).sum(),
            MetricKind::GramAugmented { factor, scale } => {
                x.norm_squared() + scale * (factor * x).norm_squared()
            }
        }
    }

    /// `‖x‖_M = √⟨x, Mx⟩`.
    pub fn m_norm(&self, x: &Vector) -> Result<f64> {
        Ok(self.quad(x)?.max(0.0).sqrt())
    }

    /// `M⁻¹x`.
    pub fn solve(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim, x.len())?;
        let out = match &self.kind {
            MetricKind::Identity => x.clone(),
            MetricKind::Diagonal(w) => x.component_div(w),
            MetricKind::GramAugmented { .. } if self.dim <= DENSE_LIMIT => {
                let chol = self
                    .chol
                    .get_or_init(|| Cholesky::new(self.dense()))
                    .as_ref()
                    .ok_or_else(|| Error::SolveFailure("metric is not positive definite".into()))?;
                chol.solve(x)
            }
            MetricKind::GramAugmented { .. } => self.solve_cg(x)?,
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolveFailure("non-finite solution".into()));
        }
        Ok(out)
    }

    fn solve_cg(&self, rhs: &Vector) -> Result<Vector> {
        let tol = 1e-12 * rhs.norm().max(f64::MIN_POSITIVE);
        let mut x = Vector::zeros(self.dim);
        let mut r = rhs.clone();
        let mut p = r.clone();
        let mut rr = r.norm_squared();
        for _ in 0..(10 * self.dim).max(100) {
            if rr.sqrt() <= tol {
                return Ok(x);
            }
            let mp = self.apply_unchecked(&p);
            let step = rr / p.dot(&mp);
            x.axpy(step, &p, 1.0);
            r.axpy(-step, &mp, 1.0);
            let next = r.norm_squared();
            p = &r + &p * (next / rr);
            rr = next;
        }
        Err(Error::SolveFailure(format!(
            "conjugate gradient stalled at residual {:e}",
            rr.sqrt()
        )))
    }

    /// `‖x‖_{M⁻¹} = √⟨x, M⁻¹x⟩`.
    pub fn m_inv_norm(&self, x: &Vector) -> Result<f64> {
        let y = self.solve(x)?;
        let q = x.dot(&y);
        if q < -1e-12 * x.norm_squared() {
            return Err(Error::SolveFailure(format!(
                "negative quadratic form {q:e} in inverse norm"
            )));
        }
        Ok(q.max(0.0).sqrt())
    }

    /// Materialized `d × d` matrix.
    pub fn dense(&self) -> Matrix {
        match &self.kind {
            MetricKind::Identity => Matrix::identity(self.dim, self.dim),
            MetricKind::Diagonal(w) => Matrix::from_diagonal(w),
            MetricKind::GramAugmented { factor, scale } => {
                let mut m = factor.tr_mul(factor) * *scale;
                for i in 0..self.dim {
                    m[(i, i)] += 1.0;
                }
                m
            }
        }
    }

    /// `‖B‖₂` for the Gram kind (0 otherwise), estimated once.
    pub fn factor_norm(&self) -> f64 {
        *self.factor_norm.get_or_init(|| match &self.kind {
            MetricKind::GramAugmented { factor, .. } => spectral_norm(factor, 1e-10),
            _ => 0.0,
        })
    }

    /// Upper bound on the largest eigenvalue of `M`.
    pub fn lambda_max(&self) -> f64 {
        match &self.kind {
            MetricKind::Identity => 1.0,
            MetricKind::Diagonal(w) => w.max(),
            MetricKind::GramAugmented { scale, .. } => {
                // Small safety margin on the power-iteration estimate.
                1.0 + scale * (self.factor_norm() * (1.0 + 1e-8)).powi(2)
            }
        }
    }

    /// Lower bound on the smallest eigenvalue of `M`.
    pub fn lambda_min(&self) -> f64 {
        match &self.kind {
            MetricKind::Identity | MetricKind::GramAugmented { .. } => 1.0,
            MetricKind::Diagonal(w) => w.min(),
        }
    }

    /// Constants `(μ, L)` with `μ‖x‖_M ≤ ‖x‖₂ ≤ L‖x‖_M`.
    pub fn equivalence_constants(&self) -> (f64, f64) {
        (1.0 / self.lambda_max().sqrt(), 1.0 / self.lambda_min().sqrt())
    }
}

/// Stepsize and preconditioner-weight schedule `α_k = α₀k^{−β}`,
/// `τ_k = τ₀k^{η}` for the subsampled Gram preconditioner, together with the
/// data spectral norm `‖A‖₂` that bounds every subsampled Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSchedule {
    pub alpha0: f64,
    pub beta: f64,
    pub tau0: f64,
    pub eta: f64,
    pub data_norm: f64,
}

impl MetricSchedule {
    pub fn new(alpha0: f64, beta: f64, tau0: f64, eta: f64, data_norm: f64) -> Result<Self> {
        if !(alpha0 > 0.0) {
            return Err(Error::InvalidParameter {
                name: "alpha0",
                reason: format!("must be positive, got {alpha0}"),
            });
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("must lie in [0, 1], got {beta}"),
            });
        }
        if !(tau0 >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "tau0",
                reason: format!("must be nonnegative, got {tau0}"),
            });
        }
        if !(eta < beta - 1.0) {
            return Err(Error::InvalidParameter {
                name: "eta",
                reason: format!("need eta < beta - 1 for summable alpha*tau, got eta = {eta}, beta = {beta}"),
            });
        }
        if !(data_norm >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "data_norm",
                reason: format!("must be nonnegative, got {data_norm}"),
            });
        }
        Ok(Self { alpha0, beta, tau0, eta, data_norm })
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha0 * (k.max(1) as f64).powf(-self.beta)
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.tau0 * (k.max(1) as f64).powf(self.eta)
    }

    /// `α_k τ_k = α₀τ₀ k^{η−β}`; index 0 is read as the base constant `α₀τ₀`.
    pub fn alpha_tau(&self, k: usize) -> f64 {
        self.alpha0 * self.tau0 * (k.max(1) as f64).powf(self.eta - self.beta)
    }

    /// `μ_k = (1 + α_kτ_k‖A‖²)^{−1/2}`.
    pub fn mu(&self, k: usize) -> f64 {
        (1.0 + self.alpha_tau(k) * self.data_norm.powi(2)).powf(-0.5)
    }

    /// `μ_∞ = (1 + α₀τ₀‖A‖²)^{−1/2}`.
    pub fn mu_inf(&self) -> f64 {
        self.mu(0)
    }

    /// `L_k = L_∞ = 1`.
    pub fn l_inf(&self) -> f64 {
        1.0
    }

    /// `ρ_0 = 1`, `ρ_k = (1 + α_{k−1}τ_{k−1}‖A‖²)^{1/2}` for `k ≥ 1`.
    pub fn rho(&self, k: usize) -> f64 {
        self.log_rho(k).exp()
    }

    fn log_rho(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            0.5 * (self.alpha_tau(k - 1) * self.data_norm.powi(2)).ln_1p()
        }
    }

    /// `ln ν_k = Σ_{i<k} ln ρ_i`.
    pub fn log_nu(&self, k: usize) -> f64 {
        (0..k).map(|i| self.log_rho(i)).sum()
    }

    /// `Σ_{k≥0} α_kτ_k = α₀τ₀(1 + ζ(β − η))`.
    pub fn alpha_tau_sum(&self) -> f64 {
        self.alpha0 * self.tau0 * (1.0 + zeta(self.beta - self.eta))
    }

    /// `ln Σ` with `Σ = exp(½‖A‖² Σ_k α_kτ_k) ≥ ν_∞`. Stays finite when
    /// `Σ` itself overflows.
    pub fn log_nu_bound(&self) -> f64 {
        0.5 * self.data_norm.powi(2) * self.alpha_tau_sum()
    }

    /// Upper bound on `ν_∞`; `+∞` if it exceeds the double range.
    pub fn nu_bound(&self) -> f64 {
        self.log_nu_bound().exp()
    }
}

/// Riemann zeta for real `s > 1` by Euler–Maclaurin summation.
pub fn zeta(s: f64) -> f64 {
    assert!(s > 1.0, "zeta requires s > 1");
    const N: usize = 32;
    let head: f64 = (1..N).map(|k| (k as f64).powf(-s)).sum();
    let n = N as f64;
    let mut tail = n.powf(1.0 - s) / (s - 1.0) + 0.5 * n.powf(-s);
    // Bernoulli corrections B2/2!, B4/4!, B6/6!.
    let mut rising = s;
    let mut power = n.powf(-s - 1.0);
    for (coef, next) in [(1.0 / 12.0, 1.0), (-1.0 / 720.0, 3.0), (1.0 / 30240.0, 5.0)] {
        tail += coef * rising * power;
        rising *= (s + next) * (s + next + 1.0);
        power /= n * n;
    }
    head + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> Vector {
        Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn apply_examples() {
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(Metric::identity(3).apply(&x).unwrap(), x);

        let m = Metric::gram_augmented(Matrix::identity(2, 2), 1.0).unwrap();
        let y = m.apply(&Vector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(y, Vector::from_vec(vec![2.0, 0.0]));

        let m = Metric::gram_augmented(Matrix::from_row_slice(1, 2, &[1.0, 1.0]), 2.0).unwrap();
        let v = Vector::from_vec(vec![1.0, -1.0]);
        assert_eq!(m.apply(&v).unwrap(), v);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = Metric::identity(3);
        let err = m.apply(&Vector::zeros(2)).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 3, got: 2 });
        assert!(m.m_inv_norm(&Vector::zeros(4)).is_err());
    }

    #[test]
    fn norm_examples() {
        let x = Vector::from_vec(vec![3.0, 4.0]);
        assert_eq!(Metric::identity(2).m_norm(&x).unwrap(), 5.0);
        assert_eq!(Metric::identity(2).m_inv_norm(&x).unwrap(), 5.0);

        let two = Metric::gram_augmented(Matrix::identity(2, 2), 1.0).unwrap();
        assert_relative_eq!(
            two.m_norm(&Vector::from_vec(vec![1.0, 0.0])).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            two.m_inv_norm(&Vector::from_vec(vec![2.0, 0.0])).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn norms_match_dense_assembly_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let b = random_matrix(&mut rng, 3, 4);
            let c = rng.random_range(0.1..5.0);
            let m = Metric::gram_augmented(b.clone(), c).unwrap();
            let dense = Matrix::identity(4, 4) + b.transpose() * &b * c;
            let inv = dense.clone().try_inverse().unwrap();
            let x = random_vector(&mut rng, 4);
            let expect = x.dot(&(&dense * &x)).sqrt();
            assert_relative_eq!(m.m_norm(&x).unwrap(), expect, max_relative = 1e-12);
            let expect_inv = x.dot(&(&inv * &x)).sqrt();
            assert_relative_eq!(m.m_inv_norm(&x).unwrap(), expect_inv, max_relative = 1e-10);
        }
    }

    #[test]
    fn subsampled_examples() {
        let m = Metric::build_subsampled(&Matrix::identity(2, 2), 1.0, 1.0).unwrap();
        assert_eq!(m.dense(), Matrix::identity(2, 2) * 2.0);

        let m = Metric::build_subsampled(&Matrix::from_row_slice(1, 2, &[1.0, 0.0]), 0.5, 2.0).unwrap();
        assert_eq!(m.dense(), Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 1.0])));

        assert!(Metric::build_subsampled(&Matrix::identity(2, 2), 0.0, 1.0).is_err());
        assert!(Metric::build_subsampled(&Matrix::identity(2, 2), 1.0, -1.0).is_err());
        assert!(Metric::build_subsampled(&Matrix::zeros(0, 2), 1.0, 1.0).is_err());
    }

    #[test]
    fn subsampled_top_eigenvalue_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = random_matrix(&mut rng, 16, 100);
        let m = Metric::build_subsampled(&rows, 0.1, 10.0).unwrap();
        // Independent oracle: plain power iteration on the assembled matrix.
        let dense = m.dense();
        let mut v = Vector::from_element(100, 1.0);
        let mut lam = 0.0;
        for _ in 0..5000 {
            let w = &dense * &v;
            lam = w.norm() / v.norm();
            v = w.normalize();
        }
        let expect = 1.0 + rows.clone().svd(false, false).singular_values.max().powi(2);
        assert_relative_eq!(lam, expect, max_relative = 1e-8);
        assert_relative_eq!(m.lambda_max(), expect, max_relative = 1e-6);
    }

    #[test]
    fn self_adjoint_and_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_matrix(&mut rng, 5, 8);
        let metrics = [
            Metric::identity(8),
            Metric::diagonal(Vector::from_fn(8, |i, _| 0.5 + i as f64)).unwrap(),
            Metric::gram_augmented(b, 2.5).unwrap(),
        ];
        for m in &metrics {
            for _ in 0..100 {
                let x = random_vector(&mut rng, 8);
                let y = random_vector(&mut rng, 8);
                let lhs = x.dot(&m.apply(&y).unwrap());
                let rhs = m.apply(&x).unwrap().dot(&y);
                assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
                assert!(x.dot(&m.apply(&x).unwrap()) > 0.0);
            }
        }
    }

    #[test]
    fn cauchy_schwarz_equality_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Metric::gram_augmented(random_matrix(&mut rng, 3, 6), 1.7).unwrap();
        for _ in 0..50 {
            let x = random_vector(&mut rng, 6);
            let mx = m.apply(&x).unwrap();
            let lhs = m.m_inv_norm(&mx).unwrap() * m.m_norm(&x).unwrap();
            let rhs = x.dot(&mx);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn equivalence_constants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = Metric::gram_augmented(random_matrix(&mut rng, 4, 6), 3.0).unwrap();
        let (mu, l) = m.equivalence_constants();
        assert_eq!(l, 1.0);
        for _ in 0..100 {
            let x = random_vector(&mut rng, 6);
            let e = x.norm();
            let mn = m.m_norm(&x).unwrap();
            let mi = m.m_inv_norm(&x).unwrap();
            assert!(mu * mn <= e * (1.0 + 1e-12) && e <= l * mn * (1.0 + 1e-12));
            assert!(mi / l <= e * (1.0 + 1e-12) && e * mu <= mi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn cg_branch_agrees_with_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = random_matrix(&mut rng, 6, 10);
        let m = Metric::gram_augmented(b, 0.7).unwrap();
        let x = random_vector(&mut rng, 10);
        let direct = m.solve(&x).unwrap();
        let cg = m.solve_cg(&x).unwrap();
        assert!((direct - cg).norm() < 1e-10);
    }

    #[test]
    fn zeta_matches_partial_sums() {
        for s in [1.5, 1.95, 2.0, 2.45, 3.0] {
            // Partial sum to N plus the integral tail bracket.
            let n = 200_000usize;
            let partial: f64 = (1..=n).rev().map(|k| (k as f64).powf(-s)).sum();
            let tail_lo = ((n + 1) as f64).powf(1.0 - s) / (s - 1.0);
            let tail_hi = (n as f64).powf(1.0 - s) / (s - 1.0);
            let z = zeta(s);
            assert!(z >= partial + tail_lo - 1e-10 && z <= partial + tail_hi + 1e-10, "s = {s}");
        }
        assert_relative_eq!(zeta(2.0), std::f64::consts::PI.powi(2) / 6.0, max_relative = 1e-13);
    }

    #[test]
    fn schedule_rejects_non_summable_weights() {
        assert!(MetricSchedule::new(1.0, 0.5, 1.0, -0.5, 1.0).is_err());
        assert!(MetricSchedule::new(1.0, 0.5, 1.0, -0.51, 1.0).is_ok());
    }

    #[test]
    fn nu_bound_trivial_when_data_norm_is_zero() {
        let s = MetricSchedule::new(50.0, 1.0, 10.0, -0.95, 0.0).unwrap();
        assert_eq!(s.nu_bound(), 1.0);
        assert_eq!(s.log_nu(1000), 0.0);
    }

    #[test]
    fn nu_bound_unit_schedule() {
        // α₀τ₀ = 1, ‖A‖ = 1, η − β = −2: Σ_{k≥0} α_kτ_k = 1 + ζ(2).
        let s = MetricSchedule::new(1.0, 1.0, 1.0, -1.0, 1.0).unwrap();
        let sum: f64 = 1.0 + (1..=2_000_000u64).map(|k| 1.0 / (k as f64).powi(2)).sum::<f64>();
        assert_relative_eq!(s.nu_bound(), (0.5 * sum).exp(), max_relative = 1e-6);
        assert_relative_eq!(s.alpha_tau_sum() - 1.0, std::f64::consts::PI.powi(2) / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn accumulated_nu_stays_below_bound() {
        for beta in [0.55, 0.75, 0.9, 1.0] {
            let s = MetricSchedule::new(50.0, beta, 10.0, -0.95, 1.3).unwrap();
            let mut prev = 0.0;
            let mut log_nu = 0.0;
            for k in 0..10_000 {
                log_nu += s.log_rho(k);
                assert!(s.rho(k) >= 1.0);
                assert!(log_nu >= prev);
                prev = log_nu;
            }
            assert!(log_nu <= s.log_nu_bound());
            assert_relative_eq!(log_nu, s.log_nu(10_000), max_relative = 1e-12);
        }
    }
}
