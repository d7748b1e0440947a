//! The outer stochastic loop: sample a batch, build the metric, solve the
//! model subproblem to the scheduled accuracy, repeat.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metric::Metric;
use crate::model::{DataMatrix, MinibatchModel, ModelFunction};
use crate::prox::Regularizer;
use crate::subproblem::{solve, DualOptions, SubproblemInstance};
use crate::Vector;

/// `G(t) = offset + slope · t`, the growth of the local Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Growth {
    pub offset: f64,
    pub slope: f64,
}

impl Growth {
    /// `G(t) = t`.
    pub const IDENTITY: Growth = Growth { offset: 0.0, slope: 1.0 };

    pub fn eval(&self, t: f64) -> f64 {
        self.offset + self.slope * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stepsize {
    Constant { alpha0: f64 },
    /// `α₀ k^{−β}`.
    Polynomial { alpha0: f64, beta: f64 },
    /// `α₀ k^{−β} / max{1, G(‖x_k‖)}`.
    LipschitzRegularized { alpha0: f64, beta: f64, growth: Growth },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Accuracy {
    /// `ε_k = γ α_k²`.
    Quadratic { gamma: f64 },
    /// `ε_k = γ α_k^{3/2}`.
    ThreeHalves { gamma: f64 },
    /// Exact subproblem solves.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preconditioner {
    Identity,
    /// `M_k = I + α_k τ_k A_SᵀA_S` with `τ_k = τ₀ k^η`.
    Subsampled { tau0: f64, eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stepsize: Stepsize,
    pub accuracy: Accuracy,
    pub preconditioner: Preconditioner,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                })
            }
        };
        let exponent = |b: f64| {
            if (0.0..=1.0).contains(&b) {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name: "beta",
                    reason: format!("must lie in [0, 1], got {b}"),
                })
            }
        };
        match self.stepsize {
            Stepsize::Constant { alpha0 } => positive("alpha0", alpha0)?,
            Stepsize::Polynomial { alpha0, beta } | Stepsize::LipschitzRegularized { alpha0, beta, .. } => {
                positive("alpha0", alpha0)?;
                exponent(beta)?;
            }
        }
        match self.accuracy {
            Accuracy::Quadratic { gamma } | Accuracy::ThreeHalves { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                return Err(Error::InvalidParameter {
                    name: "gamma",
                    reason: format!("must be finite and nonnegative, got {gamma}"),
                })
            }
            _ => {}
        }
        if let Preconditioner::Subsampled { tau0, eta } = self.preconditioner {
            positive("tau0", tau0)?;
            if !eta.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "eta",
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(())
    }

    pub fn stepsize_at(&self, k: usize, x: &Vector) -> f64 {
        stepsize_at(self, k, x)
    }

    pub fn eps_at(&self, alpha: f64) -> f64 {
        match self.accuracy {
            Accuracy::Quadratic { gamma } => gamma * alpha * alpha,
            Accuracy::ThreeHalves { gamma } => gamma * alpha.powf(1.5),
            Accuracy::Zero => 0.0,
        }
    }

    /// `τ_k` of the subsampled preconditioner.
    pub fn precond_tau(&self, k: usize) -> Option<f64> {
        match self.preconditioner {
            Preconditioner::Identity => None,
            Preconditioner::Subsampled { tau0, eta } => Some(tau0 * (k.max(1) as f64).powf(eta)),
        }
    }
}

/// `α_k` for iteration `k ≥ 1` at the current iterate `x_k`.
pub fn stepsize_at(schedule: &Schedule, k: usize, x: &Vector) -> f64 {
    let k = k.max(1) as f64;
    match schedule.stepsize {
        Stepsize::Constant { alpha0 } => alpha0,
        Stepsize::Polynomial { alpha0, beta } => alpha0 * k.powf(-beta),
        Stepsize::LipschitzRegularized { alpha0, beta, growth } => {
            alpha0 * k.powf(-beta) / growth.eval(x.norm()).max(1.0)
        }
    }
}

/// A finite-sum instance `min (1/n) Σ f(x; s_i) + r(x)` with its model.
#[derive(Debug, Clone)]
pub struct Problem {
    pub data: DataMatrix,
    pub model: ModelFunction,
    pub reg: Regularizer,
    pub x1: Vector,
    /// Weak-convexity constant `τ̄` of model plus regularizer.
    pub tau_bar: f64,
    /// Model accuracy constant `η̄`, when one exists.
    pub eta_bar: Option<f64>,
}

impl Problem {
    /// Starts from `x₁ = 0`.
    pub fn new(data: DataMatrix, model: ModelFunction, reg: Regularizer) -> Result<Self> {
        reg.validate()?;
        let row_sq = data.max_row_norm_sq();
        let x1 = Vector::zeros(data.d());
        Ok(Self {
            tau_bar: model.tau_bar(row_sq, &reg),
            eta_bar: model.eta_bar(row_sq),
            data,
            model,
            reg,
            x1,
        })
    }

    pub fn with_start(mut self, x1: Vector) -> Result<Self> {
        check_dim(self.data.d(), x1.len())?;
        self.x1 = x1;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.data.d()
    }

    /// `φ(x) = (1/n) Σ f(x; s_i) + r(x)`.
    pub fn objective(&self, x: &Vector) -> f64 {
        let n = self.data.n() as f64;
        let z = self.data.a() * x;
        let loss: f64 = z
            .iter()
            .zip(self.data.b().iter())
            .map(|(&t, &b)| self.model.loss.value(t, b))
            .sum();
        self.model.scale * loss / n + self.reg.value(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Snapshots {
    /// All `k ≤ 100`, then about 100 per decade.
    #[default]
    Thinned,
    Full,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Selects an independent random stream for the same seed.
    pub trial: u64,
    pub snapshots: Snapshots,
    pub dual: DualOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            trial: 0,
            snapshots: Snapshots::Thinned,
            dual: DualOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    pub k: usize,
    pub alpha: f64,
    pub eps: f64,
    pub batch: Vec<usize>,
    pub inner_iterations: usize,
    pub wall_ms: f64,
    /// `x_k`, the iterate the k-th subproblem is centered at.
    pub x: Option<Vector>,
}

#[derive(Debug, Clone)]
pub struct IterateTrace {
    pub records: Vec<IterateRecord>,
    /// `α_k` for every `k = 1..K`, kept for output sampling.
    pub alphas: Vec<f64>,
    /// `x_{K+1}`.
    pub final_iterate: Vector,
    pub schedule: Schedule,
    pub seed: u64,
    pub trial: u64,
    pub batch_size: usize,
}

impl IterateTrace {
    pub fn iterations(&self) -> usize {
        self.alphas.len()
    }

    /// Stored `x_k`, if any.
    pub fn snapshot(&self, k: usize) -> Option<&Vector> {
        let pos = self.records.binary_search_by_key(&k, |r| r.k).ok()?;
        self.records[pos].x.as_ref()
    }

    /// `(k, x_k)` for every stored snapshot.
    pub fn snapshots(&self) -> impl Iterator<Item = (usize, &Vector)> {
        self.records.iter().filter_map(|r| r.x.as_ref().map(|x| (r.k, x)))
    }
}

/// Iterations recorded by the thinned trace: every `k ≤ 100`, then
/// `round(10^{j/100})`, and the last one.
pub fn thinned_indices(iterations: usize) -> BTreeSet<usize> {
    let mut keep: BTreeSet<usize> = (1..=iterations.min(100)).collect();
    let mut j = 200;
    loop {
        let k = 10f64.powf(j as f64 / 100.0).round() as usize;
        if k > iterations {
            break;
        }
        keep.insert(k);
        j += 1;
    }
    if iterations > 0 {
        keep.insert(iterations);
    }
    keep
}

fn batch_rng(seed: u64, trial: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng.set_word_pos((k as u128) << 32);
    rng
}

/// Draws the i.i.d. batch of iteration `k`.
pub fn draw_batch(n: usize, m: usize, seed: u64, trial: u64, k: usize) -> Vec<usize> {
    let mut rng = batch_rng(seed, trial, k);
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

/// Runs `iterations` steps. Deterministic in all arguments.
pub fn run(
    problem: &Problem,
    schedule: &Schedule,
    batch_size: usize,
    iterations: usize,
    seed: u64,
    opts: &RunOptions,
) -> Result<IterateTrace> {
    run_with(problem, schedule, batch_size, iterations, seed, opts, |_, _| {})
}

/// [`run`] with a callback seeing every `(k, x_k)` before step `k`, and
/// `(K + 1, x_{K+1})` at the end.
pub fn run_with(
    problem: &Problem,
    schedule: &Schedule,
    batch_size: usize,
    iterations: usize,
    seed: u64,
    opts: &RunOptions,
    mut observe: impl FnMut(usize, &Vector),
) -> Result<IterateTrace> {
    schedule.validate()?;
    if batch_size == 0 {
        return Err(Error::Empty("minibatch"));
    }
    if iterations == 0 {
        return Err(Error::Empty("iterations"));
    }
    let n = problem.data.n();
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let keep = match opts.snapshots {
        Snapshots::Thinned => thinned_indices(iterations),
        Snapshots::Full => (1..=iterations).collect(),
        Snapshots::None => BTreeSet::new(),
    };
    let recorded = thinned_indices(iterations);

    let mut x = problem.x1.clone();
    let mut records = Vec::with_capacity(recorded.len().max(keep.len()));
    let mut alphas = Vec::with_capacity(iterations);
    for k in 1..=iterations {
        observe(k, &x);
        let start = Instant::now();
        let alpha = schedule.stepsize_at(k, &x);
        if !(alpha * problem.tau_bar < 1.0) {
            return Err(Error::StepOutOfRange {
                alpha,
                limit: 1.0 / problem.tau_bar,
            });
        }
        let eps = schedule.eps_at(alpha);
        let batch = draw_batch(n, batch_size, seed, opts.trial, k);
        let mb = MinibatchModel::new(&problem.data, problem.model, x.clone(), batch.clone())?;
        let rows = mb.rows();
        let metric = match schedule.precond_tau(k) {
            None => Metric::identity(problem.dim()),
            Some(tau) => Metric::build_subsampled(&rows, alpha, tau)?,
        };
        let inst = SubproblemInstance::new(mb.pieces(), rows, problem.reg, metric, alpha, x.clone(), problem.tau_bar)?;
        let solved = solve(&inst, eps, &opts.dual).map_err(|e| Error::Uncertified {
            iteration: k,
            source: Box::new(e),
        })?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if recorded.contains(&k) || keep.contains(&k) {
            records.push(IterateRecord {
                k,
                alpha,
                eps,
                batch,
                inner_iterations: solved.certificate.inner_iterations,
                wall_ms,
                x: keep.contains(&k).then(|| x.clone()),
            });
        }
        alphas.push(alpha);
        x = solved.point;
    }
    observe(iterations + 1, &x);
    Ok(IterateTrace {
        records,
        alphas,
        final_iterate: x,
        schedule: *schedule,
        seed,
        trial: opts.trial,
        batch_size,
    })
}

/// Draws `i*` with `P(i* = k) = α_k / Σα_i`.
pub fn sample_index(alphas: &[f64], seed: u64) -> Result<usize> {
    if alphas.is_empty() {
        return Err(Error::Empty("stepsizes"));
    }
    let dist = WeightedIndex::new(alphas).map_err(|e| Error::InvalidParameter {
        name: "alphas",
        reason: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(dist.sample(&mut rng) + 1)
}

/// The randomized output iterate `x_{i*}`.
pub fn sample_output(trace: &IterateTrace, seed: u64) -> Result<Vector> {
    let k = sample_index(&trace.alphas, seed)?;
    trace.snapshot(k).cloned().ok_or(Error::MissingSnapshot(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LossFamily, ModelKind};
    use crate::Matrix;

    fn poly(alpha0: f64, beta: f64) -> Schedule {
        Schedule {
            stepsize: Stepsize::Polynomial { alpha0, beta },
            accuracy: Accuracy::Zero,
            preconditioner: Preconditioner::Identity,
        }
    }

    #[test]
    fn stepsize_examples() {
        let x = Vector::from_vec(vec![2.0, 0.0]);
        let c = Schedule {
            stepsize: Stepsize::Constant { alpha0: 0.1 },
            ..poly(1.0, 0.0)
        };
        assert_eq!(c.stepsize_at(17, &x), 0.1);
        assert_eq!(poly(50.0, 1.0).stepsize_at(50, &x), 1.0);
        let l = Schedule {
            stepsize: Stepsize::LipschitzRegularized {
                alpha0: 1.0,
                beta: 0.5,
                growth: Growth::IDENTITY,
            },
            ..poly(1.0, 0.0)
        };
        assert_eq!(l.stepsize_at(4, &x), 0.25);
    }

    #[test]
    fn accuracy_kinds() {
        let mut s = poly(1.0, 0.5);
        s.accuracy = Accuracy::Quadratic { gamma: 0.01 };
        assert!((s.eps_at(0.5) - 0.0025).abs() < 1e-15);
        s.accuracy = Accuracy::ThreeHalves { gamma: 2.0 };
        assert!((s.eps_at(0.25) - 0.25).abs() < 1e-15);
        s.accuracy = Accuracy::Zero;
        assert_eq!(s.eps_at(0.3), 0.0);
    }

    #[test]
    fn thinning_keeps_early_and_log_spaced() {
        let keep = thinned_indices(100_000);
        assert!((1..=100).all(|k| keep.contains(&k)));
        assert!(keep.contains(&100_000));
        assert!(keep.len() > 350 && keep.len() < 450, "{}", keep.len());
        assert_eq!(thinned_indices(5).len(), 5);
    }

    fn one_sample_problem(model: ModelKind) -> Problem {
        let data = DataMatrix::new(Matrix::from_row_slice(1, 2, &[1.0, 2.0]), Vector::from_vec(vec![0.5])).unwrap();
        Problem::new(data, ModelFunction::new(model, LossFamily::Squared, 1.0).unwrap(), Regularizer::l1(0.1).unwrap())
            .unwrap()
            .with_start(Vector::from_vec(vec![1.0, -1.0]))
            .unwrap()
    }

    #[test]
    fn one_exact_subgradient_step_is_prox_gradient() {
        let p = one_sample_problem(ModelKind::Subgradient);
        let s = poly(0.3, 0.0);
        let tr = run(&p, &s, 1, 1, 3, &RunOptions::default()).unwrap();
        let a = Vector::from_vec(vec![1.0, 2.0]);
        let x1 = &p.x1;
        let g = &a * (a.dot(x1) - 0.5);
        let expect = p.reg.prox(0.3, &(x1 - g * 0.3)).unwrap();
        assert!((tr.final_iterate - expect).norm() < 1e-15);
    }

    #[test]
    fn zero_problem_is_a_fixed_point() {
        let data = DataMatrix::new(Matrix::zeros(3, 2), Vector::zeros(3)).unwrap();
        let model = ModelFunction::new(ModelKind::Subgradient, LossFamily::Squared, 1.0).unwrap();
        let p = Problem::new(data, model, Regularizer::Zero)
            .unwrap()
            .with_start(Vector::from_vec(vec![0.4, -2.0]))
            .unwrap();
        let tr = run(&p, &poly(1.0, 0.5), 2, 50, 1, &RunOptions::default()).unwrap();
        assert_eq!(tr.final_iterate, p.x1);
        assert!(tr.snapshots().all(|(_, x)| x == &p.x1));
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let p = one_sample_problem(ModelKind::ProximalPoint);
        let mut s = poly(0.5, 0.6);
        s.accuracy = Accuracy::Quadratic { gamma: 0.01 };
        let a = run(&p, &s, 2, 200, 9, &RunOptions::default()).unwrap();
        let b = run(&p, &s, 2, 200, 9, &RunOptions::default()).unwrap();
        assert_eq!(a.final_iterate, b.final_iterate);
        assert_eq!(a.alphas, b.alphas);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!((ra.k, &ra.batch, &ra.x), (rb.k, &rb.batch, &rb.x));
        }
    }

    #[test]
    fn batches_depend_on_trial_and_iteration() {
        let a = draw_batch(1000, 16, 5, 0, 1);
        assert_eq!(a, draw_batch(1000, 16, 5, 0, 1));
        assert_ne!(a, draw_batch(1000, 16, 5, 1, 1));
        assert_ne!(a, draw_batch(1000, 16, 5, 0, 2));
    }

    #[test]
    fn infeasible_step_is_rejected() {
        let data = DataMatrix::new(Matrix::from_row_slice(1, 1, &[1.0]), Vector::from_vec(vec![1.0])).unwrap();
        let model = ModelFunction::new(ModelKind::Subgradient, LossFamily::Squared, 1.0).unwrap();
        let p = Problem::new(data, model, Regularizer::mcp(1.0, 0.5).unwrap()).unwrap();
        let err = run(&p, &poly(0.6, 0.0), 1, 3, 0, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::StepOutOfRange { .. }));
    }

    #[test]
    fn single_step_output_is_the_start() {
        let p = one_sample_problem(ModelKind::Subgradient);
        let opts = RunOptions {
            snapshots: Snapshots::Full,
            ..Default::default()
        };
        let tr = run(&p, &poly(0.3, 0.0), 1, 1, 0, &opts).unwrap();
        for seed in 0..20 {
            assert_eq!(sample_output(&tr, seed).unwrap(), p.x1);
        }
    }

    #[test]
    fn output_index_frequencies() {
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for s in 0..draws {
            counts[sample_index(&[1.0; 4], s as u64).unwrap() - 1] += 1;
        }
        let sd = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 0.25 * draws as f64).abs() < 3.0 * sd, "{counts:?}");
        }
        let ones = (0..draws).filter(|&s| sample_index(&[3.0, 1.0], s as u64).unwrap() == 1).count();
        let sd = (draws as f64 * 0.75 * 0.25).sqrt();
        assert!((ones as f64 - 0.75 * draws as f64).abs() < 3.0 * sd);
    }

    #[test]
    fn thinned_trace_cannot_sample_missing_iterates() {
        let p = one_sample_problem(ModelKind::Subgradient);
        let opts = RunOptions {
            snapshots: Snapshots::None,
            ..Default::default()
        };
        let tr = run(&p, &poly(0.3, 0.0), 1, 3, 0, &opts).unwrap();
        assert!(matches!(sample_output(&tr, 1), Err(Error::MissingSnapshot(_))));
    }
}
