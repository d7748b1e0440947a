//! Scalar building blocks `H_i(t)` of the minibatch model `Σᵢ H_i(a_iᵀy)`.
//!
//! Every model in the zoo is a function of the inner products `a_iᵀy` only,
//! so the subproblem machinery works on these one-dimensional pieces. Weights
//! already include the per-sample scale and the `1/m` minibatch factor.

use serde::{Deserialize, Serialize};

/// One scalar piece `t ↦ H(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalarPiece {
    /// `w · log(1 + exp(−label · t))`.
    Logistic { label: f64, weight: f64 },
    /// `w · ½(t − target)²`.
    Squared { target: f64, weight: f64 },
    /// `w · |offset + slope · t|`.
    AbsAffine { offset: f64, slope: f64, weight: f64 },
    /// `w · (offset + slope · t)`.
    Affine { offset: f64, slope: f64, weight: f64 },
    /// `w · |t² − target|`; weakly convex with modulus `2w`.
    AbsSquare { target: f64, weight: f64 },
}

const CLAMP: f64 = 50.0;

/// `log(1 + eᶻ)` with the asymptotic branches beyond `|z| > 50`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > CLAMP {
        z
    } else if z < -CLAMP {
        z.exp()
    } else if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `1 / (1 + e⁻ᶻ)`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + x) − x`, accurate near zero.
fn log1p_minus(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        let mut term = x;
        let mut sum = 0.0;
        for k in 2..12 {
            term *= -x;
            sum += term / k as f64;
        }
        sum
    } else {
        x.ln_1p() - x
    }
}

/// `KL(p ‖ q)` for Bernoulli laws, with `q = σ(m)` passed through its logit.
fn bernoulli_kl(p: f64, m: f64) -> f64 {
    if p <= 0.0 {
        return softplus(m);
    }
    if p >= 1.0 {
        return softplus(-m);
    }
    let q = sigmoid(m);
    let qc = sigmoid(-m);
    let delta = p - q;
    if q == 0.0 || qc == 0.0 || (delta / q).abs() > 0.5 || (delta / qc).abs() > 0.5 {
        // Far from q the expansion cancels badly; the direct form does not.
        let direct = p * (p.ln() + softplus(-m)) + (1.0 - p) * ((1.0 - p).ln() + softplus(m));
        return direct.max(0.0);
    }
    delta * delta / (q * qc) + p * log1p_minus(delta / q) + (1.0 - p) * log1p_minus(-delta / qc)
}

impl ScalarPiece {
    pub fn weight(&self) -> f64 {
        match *self {
            ScalarPiece::Logistic { weight, .. }
            | ScalarPiece::Squared { weight, .. }
            | ScalarPiece::AbsAffine { weight, .. }
            | ScalarPiece::Affine { weight, .. }
            | ScalarPiece::AbsSquare { weight, .. } => weight,
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(
            self,
            ScalarPiece::Logistic { .. } | ScalarPiece::Squared { .. } | ScalarPiece::Affine { .. }
        )
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, ScalarPiece::AbsSquare { .. })
    }

    /// Weak-convexity modulus of the piece.
    pub fn weak_convexity(&self) -> f64 {
        match *self {
            ScalarPiece::AbsSquare { weight, .. } => 2.0 * weight,
            _ => 0.0,
        }
    }

    /// Upper bound on the second derivative where it exists.
    pub fn curvature_bound(&self) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => 0.25 * weight * label * label,
            ScalarPiece::Squared { weight, .. } => weight,
            ScalarPiece::AbsSquare { weight, .. } => 2.0 * weight,
            _ => 0.0,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => weight * softplus(-label * t),
            ScalarPiece::Squared { target, weight } => 0.5 * weight * (t - target) * (t - target),
            ScalarPiece::AbsAffine { offset, slope, weight } => weight * (offset + slope * t).abs(),
            ScalarPiece::Affine { offset, slope, weight } => weight * (offset + slope * t),
            ScalarPiece::AbsSquare { target, weight } => weight * (t * t - target).abs(),
        }
    }

    /// Derivative, or the zero-preferring subgradient selection at kinks.
    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => -label * weight * sigmoid(-label * t),
            ScalarPiece::Squared { target, weight } => weight * (t - target),
            ScalarPiece::AbsAffine { offset, slope, weight } => weight * slope * sign0(offset + slope * t),
            ScalarPiece::Affine { slope, weight, .. } => weight * slope,
            ScalarPiece::AbsSquare { target, weight } => 2.0 * weight * t * sign0(t * t - target),
        }
    }

    /// Second derivative where defined (0 on affine stretches and kinks).
    pub fn second_derivative(&self, t: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => {
                let s = sigmoid(-label * t);
                weight * label * label * s * (1.0 - s)
            }
            ScalarPiece::Squared { weight, .. } => weight,
            ScalarPiece::AbsSquare { target, weight } => 2.0 * weight * sign0(t * t - target),
            _ => 0.0,
        }
    }

    /// `H(t₁) − H(t₀)` without cancellation when the two are close.
    pub fn diff(&self, t1: f64, t0: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => {
                let (m1, m0) = (-label * t1, -label * t0);
                let dm = m1 - m0;
                if dm.abs() > 700.0 {
                    return weight * (softplus(m1) - softplus(m0));
                }
                weight * (sigmoid(m0) * dm.exp_m1()).ln_1p()
            }
            ScalarPiece::Squared { target, weight } => 0.5 * weight * (t1 - t0) * (t1 + t0 - 2.0 * target),
            ScalarPiece::AbsAffine { offset, slope, weight } => {
                let (v1, v0) = (offset + slope * t1, offset + slope * t0);
                if v1 >= 0.0 && v0 >= 0.0 {
                    weight * slope * (t1 - t0)
                } else if v1 <= 0.0 && v0 <= 0.0 {
                    -weight * slope * (t1 - t0)
                } else {
                    weight * (v1.abs() - v0.abs())
                }
            }
            ScalarPiece::Affine { slope, weight, .. } => weight * slope * (t1 - t0),
            ScalarPiece::AbsSquare { target, weight } => {
                let (v1, v0) = (t1 * t1 - target, t0 * t0 - target);
                if v1 >= 0.0 && v0 >= 0.0 {
                    weight * (t1 - t0) * (t1 + t0)
                } else if v1 <= 0.0 && v0 <= 0.0 {
                    -weight * (t1 - t0) * (t1 + t0)
                } else {
                    weight * (v1.abs() - v0.abs())
                }
            }
        }
    }

    /// `argmin_t H(t) + (t − z)²/(2λ)`. The weakly convex piece needs
    /// `2λw < 1` for the minimizer to be unique.
    pub fn prox(&self, lambda: f64, z: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => logistic_prox(label, weight, lambda, z),
            ScalarPiece::Squared { target, weight } => (z + lambda * weight * target) / (1.0 + lambda * weight),
            ScalarPiece::AbsAffine { offset, slope, weight } => {
                if slope == 0.0 {
                    return z;
                }
                let v = offset + slope * z;
                let cap = lambda * weight * slope * slope;
                if v.abs() <= cap {
                    -offset / slope
                } else {
                    z - lambda * weight * slope * v.signum()
                }
            }
            ScalarPiece::Affine { slope, weight, .. } => z - lambda * weight * slope,
            ScalarPiece::AbsSquare { target, weight } => {
                let c = 2.0 * lambda * weight;
                let objective = |t: f64| weight * (t * t - target).abs() + (t - z) * (t - z) / (2.0 * lambda);
                let mut best = (f64::INFINITY, z);
                let mut consider = |t: f64| {
                    let val = objective(t);
                    if val < best.0 {
                        best = (val, t);
                    }
                };
                let outer = z / (1.0 + c);
                if outer * outer >= target {
                    consider(outer);
                }
                if target > 0.0 {
                    // Inside the kinks the objective is concave once c ≥ 1.
                    if c < 1.0 {
                        let inner = z / (1.0 - c);
                        if inner * inner <= target {
                            consider(inner);
                        }
                    }
                    let root = target.sqrt();
                    consider(root.copysign(z));
                    consider(-root.copysign(z));
                }
                best.1
            }
        }
    }

    /// Derivative of `z ↦ prox(λ, z)` (a generalized Jacobian element at
    /// kinks of the prox map).
    pub fn prox_derivative(&self, lambda: f64, z: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { .. } | ScalarPiece::Squared { .. } => {
                let y = self.prox(lambda, z);
                1.0 / (1.0 + lambda * self.second_derivative(y))
            }
            ScalarPiece::Affine { .. } => 1.0,
            ScalarPiece::AbsAffine { offset, slope, weight } => {
                if slope == 0.0 {
                    return 1.0;
                }
                if (offset + slope * z).abs() <= lambda * weight * slope * slope {
                    0.0
                } else {
                    1.0
                }
            }
            ScalarPiece::AbsSquare { .. } => {
                let y = self.prox(lambda, z);
                1.0 / (1.0 + lambda * self.second_derivative(y))
            }
        }
    }

    /// Convex conjugate `H*(ξ)`; `+∞` outside the domain.
    pub fn conj(&self, xi: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => {
                let p = -label * xi / weight;
                if !(0.0..=1.0).contains(&p) {
                    return f64::INFINITY;
                }
                weight * (xlogx(p) + xlogx(1.0 - p))
            }
            ScalarPiece::Squared { target, weight } => xi * target + xi * xi / (2.0 * weight),
            ScalarPiece::AbsAffine { offset, slope, weight } => {
                if slope == 0.0 {
                    return if xi == 0.0 { -weight * offset.abs() } else { f64::INFINITY };
                }
                let g = xi / slope;
                if g.abs() <= weight {
                    -g * offset
                } else {
                    f64::INFINITY
                }
            }
            ScalarPiece::Affine { offset, slope, weight } => {
                if xi == weight * slope {
                    -weight * offset
                } else {
                    f64::INFINITY
                }
            }
            ScalarPiece::AbsSquare { .. } => f64::NAN,
        }
    }

    /// `(H*)'(ξ)` for the strictly convex smooth pieces.
    pub fn conj_derivative(&self, xi: f64) -> Option<f64> {
        match *self {
            ScalarPiece::Logistic { label, weight } => {
                let p = -label * xi / weight;
                Some(-label * (p.ln() - (-p).ln_1p()))
            }
            ScalarPiece::Squared { target, weight } => Some(target + xi / weight),
            _ => None,
        }
    }

    /// `(H*)''(ξ)` for the strictly convex smooth pieces.
    pub fn conj_second_derivative(&self, xi: f64) -> Option<f64> {
        match *self {
            ScalarPiece::Logistic { label, weight } => {
                let p = -label * xi / weight;
                Some(label * label / (weight * p * (1.0 - p)))
            }
            ScalarPiece::Squared { weight, .. } => Some(1.0 / weight),
            _ => None,
        }
    }

    /// Largest `s ≤ 1` keeping `ξ + s·d` inside the conjugate's domain, with
    /// a margin for the logistic piece whose conjugate is steep at the ends.
    pub(crate) fn conj_step_limit(&self, xi: f64, d: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => {
                let p = -label * xi / weight;
                let dp = -label * d / weight;
                if dp > 0.0 {
                    (0.995 * (1.0 - p) / dp).min(1.0)
                } else if dp < 0.0 {
                    (0.995 * p / -dp).min(1.0)
                } else {
                    1.0
                }
            }
            _ => 1.0,
        }
    }

    /// `prox_{λH*}(v) = v − λ prox_{H/λ}(v/λ)`.
    pub fn prox_conj(&self, lambda: f64, v: f64) -> f64 {
        match *self {
            // Exact projections avoid roundoff pushing ξ off the domain.
            ScalarPiece::Affine { slope, weight, .. } => weight * slope,
            ScalarPiece::AbsAffine { slope, weight, .. } => {
                if slope == 0.0 {
                    return 0.0;
                }
                let y = self.prox(1.0 / lambda, v / lambda);
                let xi = v - lambda * y;
                let cap = weight * slope.abs();
                xi.clamp(-cap, cap)
            }
            ScalarPiece::Logistic { label, weight } => {
                let y = self.prox(1.0 / lambda, v / lambda);
                let xi = v - lambda * y;
                // Domain is −label·ξ/w ∈ [0, 1].
                let lo = if label > 0.0 { -weight * label } else { 0.0 };
                let hi = if label > 0.0 { 0.0 } else { -weight * label };
                xi.clamp(lo, hi)
            }
            _ => v - lambda * self.prox(1.0 / lambda, v / lambda),
        }
    }

    /// Fenchel–Young gap `H(z) + H*(ξ) − zξ ≥ 0`, evaluated in closed forms
    /// that stay accurate when the gap is tiny.
    pub fn fenchel_gap(&self, z: f64, xi: f64) -> f64 {
        match *self {
            ScalarPiece::Logistic { label, weight } => {
                let p = -label * xi / weight;
                if !(-1e-12..=1.0 + 1e-12).contains(&p) {
                    return f64::INFINITY;
                }
                weight * bernoulli_kl(p.clamp(0.0, 1.0), -label * z)
            }
            ScalarPiece::Squared { target, weight } => {
                let r = weight * (z - target) - xi;
                r * r / (2.0 * weight)
            }
            ScalarPiece::AbsAffine { offset, slope, weight } => {
                let v = offset + slope * z;
                if slope == 0.0 {
                    return if xi == 0.0 { 0.0 } else { f64::INFINITY };
                }
                let g = xi / slope;
                if g.abs() > weight * (1.0 + 1e-12) {
                    return f64::INFINITY;
                }
                (weight * v.abs() - g * v).max(0.0)
            }
            ScalarPiece::Affine { slope, weight, .. } => {
                let r = weight * slope - xi;
                if r.abs() > 1e-12 * (weight * slope).abs().max(f64::MIN_POSITIVE) {
                    return f64::INFINITY;
                }
                z * r
            }
            ScalarPiece::AbsSquare { .. } => f64::NAN,
        }
    }
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Solves `t − z − λℓwσ(−ℓt) = 0`, monotone in `t`, by Newton's method
/// safeguarded by bisection on `[z, z + λw]` (mirrored for `ℓ < 0`). A
/// Newton step that leaves the bracket or fails to halve the previous step
/// is replaced by bisection, which rules out cycling when `λw` is large.
fn logistic_prox(label: f64, weight: f64, lambda: f64, z: f64) -> f64 {
    let reach = lambda * weight * label.abs();
    if reach == 0.0 {
        return z;
    }
    let residual = |t: f64| t - z - lambda * label * weight * sigmoid(-label * t);
    let (mut lo, mut hi) = if label > 0.0 { (z, z + reach) } else { (z - reach, z) };
    let mut t = z;
    let mut last_step = hi - lo;
    for _ in 0..400 {
        let r = residual(t);
        if r == 0.0 {
            return t;
        }
        if r > 0.0 {
            hi = hi.min(t);
        } else {
            lo = lo.max(t);
        }
        let s = sigmoid(-label * t);
        let slope = 1.0 + lambda * weight * label * label * s * (1.0 - s);
        let newton = r / slope;
        if newton.abs() <= 4.0 * f64::EPSILON * t.abs().max(1e-300) {
            return t - newton;
        }
        let mut next = t - newton;
        if !(next > lo && next < hi) || 2.0 * newton.abs() > last_step {
            next = 0.5 * (lo + hi);
        }
        if hi - lo <= 4.0 * f64::EPSILON * t.abs().max(1e-300) {
            return next;
        }
        last_step = (next - t).abs();
        t = next;
    }
    t
}
