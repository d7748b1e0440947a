//! Stochastic losses `f(x; s) = scale · ℓ(a_sᵀx; b_s)` and their model
//! functions `f_x(·; s)`.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::spectral_norm;
use crate::prox::{Regularizer, SmoothFn};
use crate::subproblem::pieces::{sigmoid, softplus, ScalarPiece};
use crate::{Matrix, Vector};

/// Sample matrix `A` (one row per sample) and responses `b`.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    a: Matrix,
    b: Vector,
    norm: OnceLock<f64>,
    max_row_sq: OnceLock<f64>,
}

impl DataMatrix {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        check_dim(a.nrows(), b.len())?;
        if a.nrows() == 0 {
            return Err(Error::Empty("data matrix"));
        }
        Ok(Self {
            a,
            b,
            norm: OnceLock::new(),
            max_row_sq: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// `a_iᵀx`.
    #[inline]
    pub fn row_dot(&self, i: usize, x: &Vector) -> f64 {
        self.a.row(i).tr_dot(x)
    }

    pub fn row(&self, i: usize) -> Vector {
        self.a.row(i).transpose()
    }

    /// Submatrix with rows `indices` (repeats allowed).
    pub fn rows(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(indices.len(), self.d(), |r, c| self.a[(indices[r], c)])
    }

    /// `‖A‖₂`, computed once.
    pub fn spectral_norm(&self) -> f64 {
        *self.norm.get_or_init(|| spectral_norm(&self.a, 1e-12))
    }

    /// `max_i ‖a_i‖₂²`.
    pub fn max_row_norm_sq(&self) -> f64 {
        *self
            .max_row_sq
            .get_or_init(|| self.a.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    /// `log(1 + exp(−b t))`.
    Logistic,
    /// `½(t − b)²`.
    Squared,
    /// `|t² − b|`, the robust phase-retrieval loss.
    PhaseRetrieval,
}

impl LossFamily {
    /// Unscaled loss as a function of `t = aᵀx`.
    pub fn value(&self, t: f64, b: f64) -> f64 {
        match self {
            LossFamily::Logistic => softplus(-b * t),
            LossFamily::Squared => 0.5 * (t - b) * (t - b),
            LossFamily::PhaseRetrieval => (t * t - b).abs(),
        }
    }

    /// Derivative in `t`; at kinks of the phase loss the zero element of `∂|·|`.
    pub fn derivative(&self, t: f64, b: f64) -> f64 {
        match self {
            LossFamily::Logistic => -b * sigmoid(-b * t),
            LossFamily::Squared => t - b,
            LossFamily::PhaseRetrieval => {
                let c = t * t - b;
                if c > 0.0 {
                    2.0 * t
                } else if c < 0.0 {
                    -2.0 * t
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, LossFamily::PhaseRetrieval)
    }

    /// Bound on `ℓ''(t)` (labels are ±1 for the logistic loss).
    fn curvature(&self) -> f64 {
        match self {
            LossFamily::Logistic => 0.25,
            LossFamily::Squared => 1.0,
            LossFamily::PhaseRetrieval => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `f(x) + ⟨g, y − x⟩` with `g ∈ ∂f(x)`.
    Subgradient,
    /// `h(c(x) + ∇c(x)(y − x))`; only the phase loss has a nonlinear inner map.
    ProxLinear,
    /// The loss itself.
    ProximalPoint,
}

/// A family of one-sided models `f_x(·; s)` for `f(·; s) = scale · ℓ(aᵀ·; b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFunction {
    pub kind: ModelKind,
    pub loss: LossFamily,
    /// Per-sample multiplier; the finite-sum experiments use `scale = n`.
    pub scale: f64,
}

impl ModelFunction {
    pub fn new(kind: ModelKind, loss: LossFamily, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "scale",
                reason: format!("must be positive and finite, got {scale}"),
            });
        }
        Ok(Self { kind, loss, scale })
    }

    /// `f(y; s)`.
    pub fn loss_value(&self, y: &Vector, a: &Vector, b: f64) -> f64 {
        self.scale * self.loss.value(a.dot(y), b)
    }

    /// The model `f_x(·; s)` as a scalar piece acting on `aᵀy`, where
    /// `center_t = aᵀx`. `weight` multiplies the per-sample scale.
    pub fn piece(&self, center_t: f64, b: f64, weight: f64) -> ScalarPiece {
        let w = self.scale * weight;
        let t0 = center_t;
        match (self.kind, self.loss) {
            (ModelKind::Subgradient, loss) => {
                let g = loss.derivative(t0, b);
                ScalarPiece::Affine {
                    offset: loss.value(t0, b) - g * t0,
                    slope: g,
                    weight: w,
                }
            }
            (_, LossFamily::Logistic) => ScalarPiece::Logistic { label: b, weight: w },
            (_, LossFamily::Squared) => ScalarPiece::Squared { target: b, weight: w },
            (ModelKind::ProxLinear, LossFamily::PhaseRetrieval) => ScalarPiece::AbsAffine {
                offset: -t0 * t0 - b,
                slope: 2.0 * t0,
                weight: w,
            },
            (ModelKind::ProximalPoint, LossFamily::PhaseRetrieval) => ScalarPiece::AbsSquare { target: b, weight: w },
        }
    }

    /// `f_center(y; s)`.
    pub fn eval_model(&self, center: &Vector, y: &Vector, a: &Vector, b: f64) -> Result<f64> {
        check_dim(a.len(), center.len())?;
        check_dim(a.len(), y.len())?;
        Ok(self.piece(a.dot(center), b, 1.0).value(a.dot(y)))
    }

    /// Quadratic-error constant `η̄` for rows with `‖a‖² ≤ row_norm_sq`:
    /// `|f_x(y) − f(y)| ≤ (η̄/2)‖y − x‖²`. `None` when no such bound exists.
    pub fn eta_bar(&self, row_norm_sq: f64) -> Option<f64> {
        match (self.kind, self.loss) {
            (ModelKind::ProximalPoint, _) => Some(0.0),
            (ModelKind::ProxLinear, LossFamily::PhaseRetrieval) => Some(2.0 * self.scale * row_norm_sq),
            (ModelKind::ProxLinear, _) => Some(0.0),
            (ModelKind::Subgradient, LossFamily::PhaseRetrieval) => None,
            (ModelKind::Subgradient, loss) => Some(self.scale * loss.curvature() * row_norm_sq),
        }
    }

    /// Weak-convexity constant `τ̄` of `f_x(·; s) + r`.
    pub fn tau_bar(&self, row_norm_sq: f64, reg: &Regularizer) -> f64 {
        let own = match (self.kind, self.loss) {
            (ModelKind::ProximalPoint, LossFamily::PhaseRetrieval) => 2.0 * self.scale * row_norm_sq,
            _ => 0.0,
        };
        own + reg.weak_convexity()
    }

    /// Growth function `G_Lip(t)` of the local Lipschitz constant.
    pub fn g_lip(&self, t: f64) -> f64 {
        match self.loss {
            LossFamily::Logistic => 1.0,
            LossFamily::Squared | LossFamily::PhaseRetrieval => t,
        }
    }
}

/// The minibatch average `(1/m) Σ_{i∈S} f_x(·; s_i)` around a center.
#[derive(Debug, Clone)]
pub struct MinibatchModel<'a> {
    pub data: &'a DataMatrix,
    pub model: ModelFunction,
    pub center: Vector,
    pub indices: Vec<usize>,
}

impl<'a> MinibatchModel<'a> {
    pub fn new(data: &'a DataMatrix, model: ModelFunction, center: Vector, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        check_dim(data.d(), center.len())?;
        if let Some(&i) = indices.iter().find(|&&i| i >= data.n()) {
            return Err(Error::InvalidParameter {
                name: "indices",
                reason: format!("sample {i} out of range for {} rows", data.n()),
            });
        }
        Ok(Self { data, model, center, indices })
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    /// `A_S`, one row per batch entry.
    pub fn rows(&self) -> Matrix {
        self.data.rows(&self.indices)
    }

    /// Scalar pieces `H_i` with weights `scale/m`, so that the batch model is
    /// `Σᵢ H_i(a_iᵀy)`.
    pub fn pieces(&self) -> Vec<ScalarPiece> {
        let w = 1.0 / self.m() as f64;
        self.indices
            .iter()
            .map(|&i| {
                let t0 = self.data.row_dot(i, &self.center);
                self.model.piece(t0, self.data.b()[i], w)
            })
            .collect()
    }

    /// `f̄_x(y; S)`.
    pub fn eval(&self, y: &Vector) -> Result<f64> {
        check_dim(self.data.d(), y.len())?;
        let pieces = self.pieces();
        Ok(self
            .indices
            .iter()
            .zip(&pieces)
            .map(|(&i, p)| p.value(self.data.row_dot(i, y)))
            .sum())
    }

    /// `(1/m) Σ f(y; s_i)`, the sampled loss itself.
    pub fn eval_loss(&self, y: &Vector) -> f64 {
        let m = self.m() as f64;
        self.indices
            .iter()
            .map(|&i| self.model.scale * self.model.loss.value(self.data.row_dot(i, y), self.data.b()[i]))
            .sum::<f64>()
            / m
    }

    /// Gradient (or subgradient selection) of the batch model at its center.
    pub fn gradient_at_center(&self) -> Vector {
        let mut g = Vector::zeros(self.data.d());
        for (&i, p) in self.indices.iter().zip(self.pieces()) {
            let t0 = self.data.row_dot(i, &self.center);
            let coef = p.derivative(t0);
            if coef != 0.0 {
                for (gj, aj) in g.iter_mut().zip(self.data.a().row(i).iter()) {
                    *gj += coef * aj;
                }
            }
        }
        g
    }
}

/// `max 2|f_x(y; s) − f(y; s)| / ‖y − x‖²` over random triples: `x` standard
/// normal, `y − x` uniform in direction with length in `(0, radius]`, `s`
/// uniform over the rows of `data`.
pub fn empirical_eta(model: &ModelFunction, data: &DataMatrix, trials: usize, radius: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = data.d();
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let i = rng.random_range(0..data.n());
        let x = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dir = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let len = radius * (1.0 - rng.random::<f64>());
        let y = &x + dir * len;
        let a = data.row(i);
        let b = data.b()[i];
        let model_val = model.piece(a.dot(&x), b, 1.0).value(a.dot(&y));
        let loss_val = model.loss_value(&y, &a, b);
        let dist_sq = (&y - &x).norm_squared();
        if dist_sq > 0.0 {
            worst = worst.max(2.0 * (model_val - loss_val).abs() / dist_sq);
        }
    }
    worst
}

/// `F(x) = (1/n) Σᵢ scale · ℓ(a_iᵀx; b_i)` for a smooth loss family.
#[derive(Debug, Clone)]
pub struct EmpiricalRisk<'a> {
    data: &'a DataMatrix,
    loss: LossFamily,
    scale: f64,
}

impl<'a> EmpiricalRisk<'a> {
    pub fn new(data: &'a DataMatrix, loss: LossFamily, scale: f64) -> Result<Self> {
        if !loss.is_smooth() {
            return Err(Error::Unsupported(format!("{loss:?} loss is not differentiable")));
        }
        Ok(Self { data, loss, scale })
    }

    pub fn data(&self) -> &DataMatrix {
        self.data
    }

    fn weights(&self) -> f64 {
        self.scale / self.data.n() as f64
    }
}

impl SmoothFn for EmpiricalRisk<'_> {
    fn dim(&self) -> usize {
        self.data.d()
    }

    fn value(&self, x: &Vector) -> f64 {
        let t = self.data.a() * x;
        let b = self.data.b();
        self.weights() * t.iter().zip(b.iter()).map(|(&t, &b)| self.loss.value(t, b)).sum::<f64>()
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let t = self.data.a() * x;
        let b = self.data.b();
        let g = Vector::from_fn(t.len(), |i, _| self.loss.derivative(t[i], b[i]));
        self.data.a().tr_mul(&g) * self.weights()
    }

    fn lipschitz(&self) -> f64 {
        self.weights() * self.loss.curvature() * self.data.spectral_norm().powi(2)
    }
}

/// `(1/n) Σᵢ scale · ℓ(a_iᵀx; b_i)` for any family.
pub fn risk_value(data: &DataMatrix, loss: LossFamily, scale: f64, x: &Vector) -> f64 {
    let t = data.a() * x;
    scale / data.n() as f64 * t.iter().zip(data.b().iter()).map(|(&t, &b)| loss.value(t, b)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_data(seed: u64, n: usize, d: usize, loss: LossFamily) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = Vector::from_fn(n, |_, _| match loss {
            LossFamily::Logistic => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            LossFamily::Squared => rng.sample(StandardNormal),
            LossFamily::PhaseRetrieval => rng.sample::<f64, _>(StandardNormal).powi(2),
        });
        DataMatrix::new(a, b).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn subgradient_model_on_squared_loss_is_taylor() {
        let m = ModelFunction::new(ModelKind::Subgradient, LossFamily::Squared, 1.0).unwrap();
        let a = v(&[1.0, 2.0]);
        let b = 0.5;
        let x0 = v(&[0.3, -0.1]);
        let delta = v(&[0.7, 0.2]);
        let y = &x0 + &delta;
        let r = a.dot(&x0) - b;
        let expect = 0.5 * r * r + r * a.dot(&delta);
        assert_relative_eq!(m.eval_model(&x0, &y, &a, b).unwrap(), expect, epsilon = 1e-14);
    }

    #[test]
    fn prox_linear_phase_example() {
        let m = ModelFunction::new(ModelKind::ProxLinear, LossFamily::PhaseRetrieval, 1.0).unwrap();
        let val = m.eval_model(&v(&[1.0, 0.0]), &v(&[2.0, 0.0]), &v(&[1.0, 0.0]), 1.0).unwrap();
        // Symbolic expansion: c(x) = 0, ∇c(x)(y − x) = 2·1·1.
        assert_eq!(val, 2.0);
    }

    #[test]
    fn models_are_anchored() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for loss in [LossFamily::Logistic, LossFamily::Squared, LossFamily::PhaseRetrieval] {
            let data = toy_data(1, 50, 4, loss);
            for kind in [ModelKind::Subgradient, ModelKind::ProxLinear, ModelKind::ProximalPoint] {
                let m = ModelFunction::new(kind, loss, 3.0).unwrap();
                for _ in 0..1000 {
                    let i = rng.random_range(0..50);
                    let x = Vector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let a = data.row(i);
                    let b = data.b()[i];
                    let f = m.loss_value(&x, &a, b);
                    let fm = m.eval_model(&x, &x, &a, b).unwrap();
                    assert!((f - fm).abs() <= 1e-14 * f.abs().max(1.0), "{kind:?} {loss:?}");
                }
            }
        }
    }

    #[test]
    fn minibatch_is_mean_of_models() {
        let data = toy_data(2, 10, 3, LossFamily::Logistic);
        let m = ModelFunction::new(ModelKind::ProximalPoint, LossFamily::Logistic, 1.0).unwrap();
        let y = v(&[0.1, 0.2, -0.3]);
        let c = Vector::zeros(3);
        let one = MinibatchModel::new(&data, m, c.clone(), vec![4]).unwrap();
        let single = m.eval_model(&c, &y, &data.row(4), data.b()[4]).unwrap();
        assert_relative_eq!(one.eval(&y).unwrap(), single, epsilon = 1e-15);
        let twice = MinibatchModel::new(&data, m, c.clone(), vec![4, 4]).unwrap();
        assert_relative_eq!(twice.eval(&y).unwrap(), single, epsilon = 1e-15);
        let pair = MinibatchModel::new(&data, m, c.clone(), vec![1, 7]).unwrap();
        let swapped = MinibatchModel::new(&data, m, c, vec![7, 1]).unwrap();
        assert_relative_eq!(pair.eval(&y).unwrap(), swapped.eval(&y).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn minibatch_mean_of_hand_values() {
        // Squared loss with a = e₁: values ½(y₁ − b)² = 1 and 3 at y₁ = 0.
        let a = Matrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = v(&[2f64.sqrt(), 6f64.sqrt()]);
        let data = DataMatrix::new(a, b).unwrap();
        let m = ModelFunction::new(ModelKind::ProximalPoint, LossFamily::Squared, 1.0).unwrap();
        let mb = MinibatchModel::new(&data, m, v(&[0.0]), vec![0, 1]).unwrap();
        assert_relative_eq!(mb.eval(&v(&[0.0])).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let data = toy_data(2, 10, 3, LossFamily::Squared);
        let m = ModelFunction::new(ModelKind::ProximalPoint, LossFamily::Squared, 1.0).unwrap();
        assert_eq!(
            MinibatchModel::new(&data, m, Vector::zeros(3), vec![]).unwrap_err(),
            Error::Empty("minibatch")
        );
    }

    #[test]
    fn empirical_eta_respects_constants() {
        for loss in [LossFamily::Squared, LossFamily::Logistic, LossFamily::PhaseRetrieval] {
            let data = toy_data(3, 40, 5, loss);
            let row_sq = data.max_row_norm_sq();
            for kind in [ModelKind::Subgradient, ModelKind::ProxLinear, ModelKind::ProximalPoint] {
                let m = ModelFunction::new(kind, loss, 1.0).unwrap();
                let eta = empirical_eta(&m, &data, 2000, 2.0, 17);
                match m.eta_bar(row_sq) {
                    Some(bound) => assert!(eta <= bound * (1.0 + 1e-10), "{kind:?} {loss:?}: {eta} > {bound}"),
                    None => assert!(eta > 0.0),
                }
                if kind == ModelKind::ProximalPoint {
                    assert_eq!(eta, 0.0);
                }
            }
        }
    }

    #[test]
    fn risk_gradient_matches_finite_differences() {
        for loss in [LossFamily::Logistic, LossFamily::Squared] {
            let data = toy_data(6, 30, 4, loss);
            let f = EmpiricalRisk::new(&data, loss, 30.0).unwrap();
            let x = v(&[0.2, -0.4, 0.1, 0.3]);
            let g = f.gradient(&x);
            for j in 0..4 {
                let mut e = Vector::zeros(4);
                e[j] = 1e-6;
                let fd = (f.value(&(&x + &e)) - f.value(&(&x - &e))) / 2e-6;
                assert_relative_eq!(g[j], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
            assert_relative_eq!(f.value(&x), risk_value(&data, loss, 30.0, &x), max_relative = 1e-14);
        }
        assert!(EmpiricalRisk::new(&toy_data(6, 5, 2, LossFamily::PhaseRetrieval), LossFamily::PhaseRetrieval, 1.0).is_err());
    }

    #[test]
    fn batch_gradient_matches_model_derivative() {
        let data = toy_data(8, 12, 3, LossFamily::Logistic);
        let m = ModelFunction::new(ModelKind::ProximalPoint, LossFamily::Logistic, 2.0).unwrap();
        let c = v(&[0.5, -0.2, 0.9]);
        let mb = MinibatchModel::new(&data, m, c.clone(), vec![0, 3, 3, 11]).unwrap();
        let g = mb.gradient_at_center();
        for j in 0..3 {
            let mut e = Vector::zeros(3);
            e[j] = 1e-6;
            let fd = (mb.eval(&(&c + &e)).unwrap() - mb.eval(&(&c - &e)).unwrap()) / 2e-6;
            assert_relative_eq!(g[j], fd, max_relative = 1e-7, epsilon = 1e-9);
        }
    }
}
