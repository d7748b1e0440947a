//! Seeded trials, per-record diagnostics, trial averaging and artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ispppa::diagnostics::{
    average_series, default_rho_bar, fgap, fit_rate, kkt_residual, me_grad_norm, Objective, PieceSum, RateFit,
};
use ispppa::model::EmpiricalRisk;
use ispppa::prox::Quadratic;
use ispppa::solver::{run_with, RunOptions};
use ispppa::{DataMatrix, LossFamily, Metric, ModelFunction, Problem, Regularizer, SmoothFn, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::{Diagnostic, ExperimentConfig, KktRule, KktStep, Start};
use crate::dataset::{gen_synthetic, Dataset};
use crate::reference::{reference_solve, RefOptions, RefSolution};

/// Everything a trial needs, built once per experiment.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub data: DataMatrix,
    pub problem: Problem,
    pub reg: Regularizer,
    pub scale: f64,
    pub rho_bar: Option<f64>,
    pub kkt_alpha: Option<f64>,
    pub reference: Option<RefSolution>,
    pub pieces: Option<PieceSum>,
    /// `F` in Gram form for the squared loss, where per-iterate gradients
    /// would otherwise cost a pass over the data.
    quadratic: Option<Quadratic>,
}

/// `‖Aᵀb‖_∞`, the scale of the regularization rule.
pub fn atb_inf(data: &DataMatrix) -> f64 {
    data.a().tr_mul(data.b()).amax()
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let dataset = gen_synthetic(&config.dataset)?;
    let data = dataset.data_matrix()?;
    let (scale, reg) = config.problem.resolve(data.n(), atb_inf(&data))?;
    let model = ModelFunction::new(config.problem.model, config.problem.loss, scale)?;
    let x1 = match config.run.start {
        Start::Zero => Vector::zeros(data.d()),
        Start::Planted => &dataset.x_star * config.run.start_scale,
        Start::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed ^ 0x5eed);
            let u = Vector::from_fn(data.d(), |_, _| StandardNormal.sample(&mut rng)).normalize();
            u * (config.run.start_scale * dataset.x_star.norm())
        }
    };
    let problem = Problem::new(data.clone(), model, reg)?.with_start(x1)?;
    let diags = &config.diagnostics;
    let rho_bar = diags
        .rho_bar
        .or_else(|| problem.eta_bar.map(|eta| default_rho_bar(eta, problem.tau_bar)));
    let kkt_alpha = match diags.kkt_alpha {
        KktStep::Value(a) => Some(a),
        KktStep::Rule(KktRule::InverseRhoBar) => rho_bar.map(|r| 1.0 / r),
    };
    let wants = |d: Diagnostic| diags.list.contains(&d);
    if wants(Diagnostic::MeGrad) && rho_bar.is_none() {
        bail!("me_grad needs diagnostics.rho_bar: the model has no accuracy constant");
    }
    let quadratic = match config.problem.loss {
        LossFamily::Squared => Some(Quadratic::least_squares(data.a(), data.b(), scale / data.n() as f64)?),
        _ => None,
    };
    let risk = EmpiricalRisk::new(&data, config.problem.loss, scale);
    let reference = match &config.reference {
        Some(spec) => {
            let f: &dyn SmoothFn = match &quadratic {
                Some(q) => q,
                None => risk.as_ref().map_err(|e| e.clone())?,
            };
            let opts = RefOptions {
                tol: spec.tol,
                kkt_alpha: kkt_alpha.context("the reference solve needs a KKT step")?,
                max_iter: spec.max_iter,
                restarts: spec.restarts,
                seed: config.run.seed,
            };
            Some(reference_solve(f, &reg, &Vector::zeros(data.d()), &opts)?)
        }
        None => None,
    };
    let pieces = if wants(Diagnostic::MeGrad) {
        Some(PieceSum::finite_sum(&data, config.problem.loss, scale, reg)?)
    } else {
        None
    };
    Ok(Prepared {
        config: config.clone(),
        dataset,
        data,
        problem,
        reg,
        scale,
        rho_bar,
        kkt_alpha,
        reference,
        pieces,
        quadratic,
    })
}

/// Diagnostic columns of one run or of the trial average, on a shared `k` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub k: Vec<usize>,
    pub alpha: Vec<f64>,
    pub eps: Vec<f64>,
    pub columns: BTreeMap<Diagnostic, Vec<f64>>,
}

impl Series {
    pub fn column(&self, d: Diagnostic) -> Option<&[f64]> {
        self.columns.get(&d).map(Vec::as_slice)
    }
}

/// Largest `‖x_k‖₂` seen over a trial, with the series.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub series: Series,
    pub max_norm: f64,
    pub final_iterate: Vector,
}

impl Prepared {
    pub fn kkt(&self, x: &Vector) -> Result<f64> {
        let alpha = self.kkt_alpha.context("kkt needs a step")?;
        match &self.quadratic {
            Some(q) => Ok(kkt_residual(x, q, &self.reg, alpha)?),
            None => {
                let f = EmpiricalRisk::new(&self.data, self.config.problem.loss, self.scale)?;
                Ok(kkt_residual(x, &f, &self.reg, alpha)?)
            }
        }
    }

    pub fn me_grad(&self, x: &Vector) -> Result<f64> {
        let pieces = self.pieces.as_ref().context("me_grad was not prepared")?;
        let rho = self.rho_bar.context("me_grad needs rho_bar")?;
        Ok(me_grad_norm(
            Objective::Pieces(pieces),
            rho,
            &Metric::identity(self.data.d()),
            x,
            self.config.diagnostics.me_tol,
        )?)
    }

    pub fn run_trial(&self, trial: u64) -> Result<TrialResult> {
        let cfg = &self.config;
        let diags = &cfg.diagnostics;
        let running = diags.kkt_running_min_squared && diags.list.contains(&Diagnostic::Kkt);
        let mut best_sq = f64::INFINITY;
        let mut running_min = Vec::new();
        let mut max_norm = 0.0_f64;
        let mut observe_err = None;
        let opts = RunOptions {
            trial,
            ..Default::default()
        };
        let trace = run_with(
            &self.problem,
            &cfg.schedule,
            cfg.run.batch_size,
            cfg.run.iterations,
            cfg.run.seed,
            &opts,
            |_, x| {
                max_norm = max_norm.max(x.norm());
                if running && observe_err.is_none() {
                    match self.kkt(x) {
                        Ok(v) => best_sq = best_sq.min(v * v),
                        Err(e) => observe_err = Some(e),
                    }
                    running_min.push(best_sq);
                }
            },
        )?;
        if let Some(e) = observe_err {
            return Err(e);
        }
        let mut series = Series {
            k: Vec::new(),
            alpha: Vec::new(),
            eps: Vec::new(),
            columns: BTreeMap::new(),
        };
        for rec in &trace.records {
            let x = rec.x.as_ref().context("thinned record without iterate")?;
            series.k.push(rec.k);
            series.alpha.push(rec.alpha);
            series.eps.push(rec.eps);
            for &d in &diags.list {
                let v = match d {
                    Diagnostic::Fgap => {
                        let r = self.reference.as_ref().context("fgap needs a reference")?;
                        fgap(self.problem.objective(x), r.value)
                    }
                    Diagnostic::Kkt if running => running_min[rec.k - 1],
                    Diagnostic::Kkt => self.kkt(x)?,
                    Diagnostic::MeGrad => self.me_grad(x)?,
                    Diagnostic::Dist2 => {
                        let r = self.reference.as_ref().context("dist2 needs a reference")?;
                        (x - &r.x).norm_squared()
                    }
                    Diagnostic::InnerIters => rec.inner_iterations as f64,
                    Diagnostic::WallMs => rec.wall_ms,
                };
                series.columns.entry(d).or_default().push(v);
            }
        }
        Ok(TrialResult {
            series,
            max_norm,
            final_iterate: trace.final_iterate,
        })
    }
}

/// Pointwise mean over trials that share a `k` grid.
pub fn average(trials: &[Series]) -> Result<Series> {
    let first = trials.first().context("no trials")?;
    if trials.iter().any(|t| t.k != first.k) {
        bail!("trials do not share a k grid");
    }
    let mean = |f: &dyn Fn(&Series) -> Vec<f64>| -> Result<Vec<f64>> {
        Ok(average_series(&trials.iter().map(f).collect::<Vec<_>>())?)
    };
    let mut columns = BTreeMap::new();
    for &d in first.columns.keys() {
        columns.insert(d, mean(&|s: &Series| s.columns[&d].clone())?);
    }
    Ok(Series {
        k: first.k.clone(),
        alpha: mean(&|s: &Series| s.alpha.clone())?,
        eps: mean(&|s: &Series| s.eps.clone())?,
        columns,
    })
}

pub struct ExperimentResult {
    pub trials: Vec<TrialResult>,
    pub mean: Series,
}

/// Thread cap from `ISPPPA_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("ISPPPA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_experiment(prep: &Prepared) -> Result<ExperimentResult> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(thread_cap()).build()?;
    let trials: Vec<TrialResult> = pool.install(|| {
        (0..prep.config.run.trials as u64)
            .into_par_iter()
            .map(|t| prep.run_trial(t))
            .collect::<Result<_>>()
    })?;
    let series: Vec<Series> = trials.iter().map(|t| t.series.clone()).collect();
    let mean = average(&series)?;
    Ok(ExperimentResult { trials, mean })
}

/// Column order of the CSV; absent diagnostics are skipped.
const ORDER: [Diagnostic; 6] = [
    Diagnostic::Fgap,
    Diagnostic::Kkt,
    Diagnostic::MeGrad,
    Diagnostic::Dist2,
    Diagnostic::InnerIters,
    Diagnostic::WallMs,
];

pub fn to_csv(series: &Series) -> String {
    let cols: Vec<Diagnostic> = ORDER.iter().copied().filter(|d| series.columns.contains_key(d)).collect();
    let mut out = String::from("k,alpha,eps");
    for d in &cols {
        out.push(',');
        out.push_str(d.column());
    }
    out.push('\n');
    for (i, k) in series.k.iter().enumerate() {
        write!(out, "{k},{:?},{:?}", series.alpha[i], series.eps[i]).unwrap();
        for d in &cols {
            write!(out, ",{:?}", series.columns[d][i]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<Series> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty CSV")?.split(',').collect();
    if header.len() < 3 || header[..3] != ["k", "alpha", "eps"] {
        bail!("CSV header must start with k,alpha,eps");
    }
    let cols: Vec<Diagnostic> = header[3..]
        .iter()
        .map(|h| {
            ORDER
                .iter()
                .copied()
                .find(|d| d.column() == *h)
                .with_context(|| format!("unknown column {h:?}"))
        })
        .collect::<Result<_>>()?;
    let mut s = Series {
        k: Vec::new(),
        alpha: Vec::new(),
        eps: Vec::new(),
        columns: cols.iter().map(|&d| (d, Vec::new())).collect(),
    };
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            bail!("line {} has {} fields, expected {}", n + 2, fields.len(), header.len());
        }
        s.k.push(fields[0].parse()?);
        s.alpha.push(fields[1].parse()?);
        s.eps.push(fields[2].parse()?);
        for (d, f) in cols.iter().zip(&fields[3..]) {
            s.columns.get_mut(d).unwrap().push(f.parse()?);
        }
    }
    Ok(s)
}

/// Rate fits for every fittable column present.
pub fn fit_columns(series: &Series, window: f64) -> Vec<(Diagnostic, Result<RateFit>)> {
    let ks: Vec<f64> = series.k.iter().map(|&k| k as f64).collect();
    [Diagnostic::Fgap, Diagnostic::Kkt, Diagnostic::MeGrad, Diagnostic::Dist2]
        .into_iter()
        .filter_map(|d| {
            series
                .column(d)
                .map(|v| (d, fit_rate(&ks, v, window).map_err(anyhow::Error::from)))
        })
        .collect()
}

pub fn fit_report(series: &Series, window: f64) -> String {
    let mut out = String::new();
    for (d, fit) in fit_columns(series, window) {
        match fit {
            Ok(f) => writeln!(
                out,
                "{} slope = {:.4} intercept = {:.4} rms = {:.3e} window = [{}, {}] points = {}",
                d.column(),
                f.slope,
                f.intercept,
                f.rms,
                f.k_min,
                f.k_max,
                f.points
            ),
            Err(e) => writeln!(out, "{} fit failed: {e}", d.column()),
        }
        .unwrap();
    }
    out
}

/// Writes CSV, fit report, plot and resolved config; returns the CSV path.
pub fn write_artifacts(prep: &Prepared, result: &ExperimentResult, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let name = &prep.config.name;
    let csv = out.join(format!("{name}.csv"));
    fs::write(&csv, to_csv(&result.mean))?;
    fs::write(
        out.join(format!("{name}.fit.txt")),
        fit_report(&result.mean, prep.config.diagnostics.fit_window),
    )?;
    fs::write(out.join(format!("{name}.svg")), crate::plot::svg(&result.mean, name))?;
    fs::write(out.join(format!("{name}.resolved.toml")), prep.config.to_toml()?)?;
    Ok(csv)
}
