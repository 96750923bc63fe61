//! MAC orchestration: Z initialization, the alternating Z/g/F steps under a
//! growing quadratic penalty, early stopping and final model assembly. Also
//! hosts the two-step (no auxiliary coordinates) baseline.

use std::time::{Duration, Instant};

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::features::{
    kmeans_centers, median_pairwise_distance, FeatureMap, RbfCenters, RbfMapParams,
};
use crate::fstep::{build_gram, solve_weights, GramCache};
use crate::linsvm::{ova_targets, train_ova, OvaSvm, SvmParams};
use crate::rng;
use crate::zstep::{z_multiclass, ZResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Basis {
    /// Gaussian RBFs with this many k-means centers.
    Rbf { centers: usize },
    /// `Φ(x) = x`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    /// Median pairwise distance between the centers.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// I.i.d. standard normal coordinates.
    Random,
    /// Every point at its class's vertex of a regular simplex.
    Simplex,
}

/// Hyperparameters and solver controls for [`train_mac`].
#[derive(Debug, Clone, PartialEq)]
pub struct MacConfig {
    pub latent_dim: usize,
    pub basis: Basis,
    pub sigma: Sigma,
    pub lambda: f64,
    pub c: f64,
    /// Overrides `c` per class when set.
    pub class_c: Option<Vec<f64>>,
    pub mu0: f64,
    pub mu_factor: f64,
    pub mu_max_stages: usize,
    /// Relative change of the penalty objective that ends a stage.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub init: InitStrategy,
    /// Pairwise vertex distance for simplex initialization.
    pub simplex_scale: f64,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub svm_tol: f64,
    pub svm_max_epochs: usize,
    pub z_tol: f64,
    pub kmeans_iters: usize,
}

impl Default for MacConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            basis: Basis::Rbf { centers: 100 },
            sigma: Sigma::Auto,
            lambda: 1e-4,
            c: 1.0,
            class_c: None,
            mu0: 2.0,
            mu_factor: 1.5,
            mu_max_stages: 20,
            inner_tol: 1e-4,
            inner_max_iters: 50,
            init: InitStrategy::Simplex,
            simplex_scale: 4.0,
            patience: 1,
            seed: 0,
            svm_tol: 1e-6,
            svm_max_epochs: 2000,
            z_tol: 1e-8,
            kmeans_iters: 100,
        }
    }
}

impl MacConfig {
    /// Checks every bound; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if self.latent_dim < 1 {
            return Err(invalid("latent-dim must be >= 1"));
        }
        if let Basis::Rbf { centers } = self.basis {
            if centers < 1 {
                return Err(invalid("centers must be >= 1"));
            }
        }
        if let Sigma::Fixed(s) = self.sigma {
            positive("sigma", s)?;
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        positive("c", self.c)?;
        if let Some(cs) = &self.class_c {
            for &c in cs {
                positive("class c", c)?;
            }
        }
        positive("mu0", self.mu0)?;
        if !(self.mu_factor > 1.0) || !self.mu_factor.is_finite() {
            return Err(invalid(format!("mu-factor must be > 1, got {}", self.mu_factor)));
        }
        if self.mu_max_stages < 1 {
            return Err(invalid("mu-stages must be >= 1"));
        }
        positive("inner-tol", self.inner_tol)?;
        if self.inner_max_iters < 1 {
            return Err(invalid("inner-iters must be >= 1"));
        }
        positive("simplex-scale", self.simplex_scale)?;
        if self.patience < 1 {
            return Err(invalid("patience must be >= 1"));
        }
        positive("svm-tol", self.svm_tol)?;
        positive("z-tol", self.z_tol)?;
        Ok(())
    }

    fn svm_params(&self) -> SvmParams {
        SvmParams {
            c: self.c,
            tol: self.svm_tol,
            max_epochs: self.svm_max_epochs,
        }
    }

    fn class_penalties(&self, k: usize) -> Result<Vec<f64>> {
        match &self.class_c {
            Some(cs) if cs.len() == k => Ok(cs.clone()),
            Some(cs) => Err(invalid(format!("{} class penalties for {k} classes", cs.len()))),
            None => Ok(vec![self.c; k]),
        }
    }
}

/// `K` vertices (rows) of a regular simplex with edge length `scale`,
/// centered at the origin.
///
/// The simplex lives in `K − 1` dimensions; with `L ≥ K − 1` the extra
/// coordinates are zero, with `L < K − 1` the first `L` coordinates are kept
/// (an orthogonal projection, so edges are no longer all equal).
pub fn simplex_vertices(k: usize, l: usize, scale: f64) -> DMatrix<f64> {
    // Helmert basis of the plane orthogonal to (1, …, 1)
    let edge = std::f64::consts::SQRT_2;
    DMatrix::from_fn(k, l, |vertex, axis| {
        let j = axis + 1;
        if j >= k {
            return 0.0;
        }
        let norm = ((j * (j + 1)) as f64).sqrt();
        let entry = if vertex < j {
            -1.0
        } else if vertex == j {
            j as f64
        } else {
            0.0
        };
        entry / norm * scale / edge
    })
}

/// Initial auxiliary coordinates, `L × N`.
pub fn init_z(cfg: &MacConfig, labels: &[usize], k: usize) -> DMatrix<f64> {
    let l = cfg.latent_dim;
    match cfg.init {
        InitStrategy::Simplex => {
            let v = simplex_vertices(k, l, cfg.simplex_scale);
            DMatrix::from_fn(l, labels.len(), |i, n| v[(labels[n], i)])
        }
        InitStrategy::Random => {
            let mut r = rng::stream(cfg.seed, rng::STREAM_INIT_Z);
            let values: Vec<f64> = (0..l * labels.len())
                .map(|_| StandardNormal.sample(&mut r))
                .collect();
            DMatrix::from_vec(l, labels.len(), values)
        }
    }
}

/// Hinge slacks of every machine on every column of `z`, `K × N`.
pub fn hinge_slacks(svms: &OvaSvm, z: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let k = svms.class_count();
    DMatrix::from_fn(k, z.ncols(), |class, n| {
        let y = if labels[n] == class { 1.0 } else { -1.0 };
        (1.0 - y * svms.machines[class].decision(z.column(n).as_slice())).max(0.0)
    })
}

fn slack_cost(svms: &OvaSvm, xi: &DMatrix<f64>) -> f64 {
    svms.machines
        .iter()
        .enumerate()
        .map(|(class, m)| m.c * xi.row(class).iter().sum::<f64>())
        .sum()
}

/// Penalty objective
/// `λ‖W‖² + Σ_k(½(‖w_k‖² + b_k²) + C_k Σ_n ξ_nk) + μ/2 Σ_n ‖z_n − WΦ(x_n)‖²`.
///
/// `xi` (`K × N`) defaults to the hinge slacks of `(svms, z)`. `C_k` is
/// taken from each machine.
pub fn penalty_objective(
    lambda: f64,
    w: &DMatrix<f64>,
    svms: &OvaSvm,
    z: &DMatrix<f64>,
    xi: Option<&DMatrix<f64>>,
    mu: f64,
    phi: &DMatrix<f64>,
    labels: &[usize],
) -> f64 {
    let owned;
    let xi = match xi {
        Some(x) => x,
        None => {
            owned = hinge_slacks(svms, z, labels);
            &owned
        }
    };
    let residual = (z - w * phi).norm_squared();
    lambda * w.norm_squared() + svms.regularizer() + slack_cost(svms, xi) + 0.5 * mu * residual
}

/// Nested objective: the penalty objective's slack and regularizer terms
/// with `z_n = WΦ(x_n)` and slacks at their optimum (hinges).
pub fn nested_objective(
    lambda: f64,
    w: &DMatrix<f64>,
    svms: &OvaSvm,
    phi: &DMatrix<f64>,
    labels: &[usize],
) -> f64 {
    let fz = w * phi;
    let xi = hinge_slacks(svms, &fz, labels);
    lambda * w.norm_squared() + svms.regularizer() + slack_cost(svms, &xi)
}

/// Fraction of mismatched labels. Both slices must have equal length.
fn mismatch_rate(pred: &[usize], truth: &[usize]) -> f64 {
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / truth.len().max(1) as f64
}

/// Per-class collapsed classifier `v_k = Wᵀw_k`, `b_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Collapsed {
    /// `K × M`, row `k` is `v_kᵀ`.
    pub v: DMatrix<f64>,
    pub b: Vec<f64>,
}

impl Collapsed {
    /// Scores `v_kᵀΦ(x_n) + b_k` for each column of `phi`, `K × N`.
    pub fn scores(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = &self.v * phi;
        for (k, &b) in self.b.iter().enumerate() {
            s.row_mut(k).add_scalar_mut(b);
        }
        s
    }
}

pub fn collapse(map: &RbfMapParams, svms: &OvaSvm) -> Collapsed {
    let k = svms.class_count();
    let m = map.w.ncols();
    let mut v = DMatrix::zeros(k, m);
    for (class, machine) in svms.machines.iter().enumerate() {
        let vk = map.w.transpose() * &machine.w;
        v.row_mut(class).copy_from(&vk.transpose());
    }
    Collapsed {
        v,
        b: svms.machines.iter().map(|m| m.b).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Validation error stopped improving.
    ValidationPlateau,
    /// Every penalty stage ran.
    StagesExhausted,
    /// Wall-clock budget used up (baseline only).
    Budget,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::ValidationPlateau => "validation-plateau",
            StopReason::StagesExhausted => "stages-exhausted",
            StopReason::Budget => "budget",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSummary {
    pub config: MacConfig,
    pub stop_reason: StopReason,
    /// Penalty stages run.
    pub stages: usize,
    /// Total inner iterations over all stages.
    pub iterations: usize,
    /// Stage whose snapshot was returned.
    pub selected_stage: usize,
}

/// `g ∘ F` plus its collapsed form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub map: RbfMapParams,
    pub svms: OvaSvm,
    pub collapsed: Collapsed,
    pub summary: TrainingSummary,
}

impl TrainedModel {
    pub fn assemble(map: RbfMapParams, svms: OvaSvm, summary: TrainingSummary) -> Self {
        let collapsed = collapse(&map, &svms);
        Self {
            map,
            svms,
            collapsed,
            summary,
        }
    }

    /// Latent projections `F(X)`, `L × N`, for inputs `N × D`.
    pub fn latent(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(&self.map.w * self.map.features.design(x)?)
    }

    /// Two-stage prediction `argmax_k g_k(F(x))`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(self.svms.predict_columns(&self.latent(x)?))
    }

    /// Prediction through `v_kᵀΦ(x) + b_k`.
    pub fn predict_collapsed(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let scores = self.collapsed.scores(&self.map.features.design(x)?);
        Ok(scores
            .column_iter()
            .map(|c| crate::linsvm::argmax(c.as_slice()))
            .collect())
    }
}

/// One logged inner iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub stage: usize,
    pub iteration: usize,
    pub mu: f64,
    pub penalty: f64,
    pub nested: f64,
    pub train_error: f64,
    /// Filled on the last iteration of a stage when a validation set exists.
    pub val_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Z,
    G,
    F,
}

/// Penalty objective after one block step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub stage: usize,
    pub iteration: usize,
    pub step: Step,
    pub objective: f64,
    /// Sub-optimality the step's solver may leave (duality gap bound).
    pub solver_slack: f64,
}

/// Final optimization state.
#[derive(Debug, Clone)]
pub struct MacState {
    /// Auxiliary coordinates, `L × N` (one column per point).
    pub z: DMatrix<f64>,
    /// Slacks, `K × N`.
    pub xi: DMatrix<f64>,
    pub mu: f64,
    pub history: Vec<HistoryRecord>,
    pub steps: Vec<StepRecord>,
}

/// Everything the block steps share for one training set.
struct Problem<'a> {
    cfg: &'a MacConfig,
    labels: &'a [usize],
    k: usize,
    phi: DMatrix<f64>,
    gram: GramCache,
    penalties: Vec<f64>,
    targets: Vec<Vec<f64>>,
}

impl<'a> Problem<'a> {
    fn new(cfg: &'a MacConfig, train: &'a Dataset) -> Result<(Self, FeatureMap)> {
        cfg.validate()?;
        let features = build_features(cfg, &train.x)?;
        let phi = features.design(&train.x)?;
        let gram = build_gram(&phi)?;
        let k = train.k;
        let penalties = cfg.class_penalties(k)?;
        // per-point targets y_n^k, one vector of length K per point
        let targets = train
            .y
            .iter()
            .map(|&c| (0..k).map(|j| if j == c { 1.0 } else { -1.0 }).collect())
            .collect();
        Ok((
            Self {
                cfg,
                labels: &train.y,
                k,
                phi,
                gram,
                penalties,
                targets,
            },
            features,
        ))
    }

    fn g_step(&self, z: &DMatrix<f64>, warm: Option<&[Vec<f64>]>) -> Result<crate::linsvm::OvaFit> {
        train_ova(
            z,
            self.labels,
            self.k,
            &self.cfg.svm_params(),
            Some(&self.penalties),
            warm,
        )
    }

    fn f_step(&mut self, z: &DMatrix<f64>, mu: f64) -> Result<DMatrix<f64>> {
        solve_weights(&mut self.gram, &self.phi, z, self.cfg.lambda, mu)
    }

    /// New `Z`, its slacks, and the certified sub-optimality of the step in
    /// penalty-objective units.
    fn z_step(&self, w: &DMatrix<f64>, svms: &OvaSvm, mu: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
        let fz = w * &self.phi;
        let c: Vec<f64> = self.penalties.iter().map(|ck| 2.0 * ck / mu).collect();
        let l = fz.nrows();
        let results: Vec<ZResult> = (0..fz.ncols())
            .into_par_iter()
            .map(|n| {
                z_multiclass(
                    fz.column(n).as_slice(),
                    svms,
                    &self.targets[n],
                    &c,
                    self.cfg.z_tol,
                )
            })
            .collect::<Result<_>>()?;
        let unconverged = results.iter().filter(|r| !r.converged).count();
        if unconverged > 0 {
            log::warn!("Z-step: {unconverged} point(s) hit the sweep cap");
        }
        let gap: f64 = results
            .iter()
            .enumerate()
            .map(|(n, r)| match r.dual_trace.last() {
                Some(&dual) => (r.objective(fz.column(n).as_slice(), &c) - dual).max(0.0),
                None => 0.0,
            })
            .sum();
        let z = DMatrix::from_fn(l, results.len(), |i, n| results[n].z[i]);
        let xi = DMatrix::from_fn(self.k, results.len(), |j, n| results[n].xi[j]);
        Ok((z, xi, 0.5 * mu * gap))
    }

    fn penalty(&self, w: &DMatrix<f64>, svms: &OvaSvm, z: &DMatrix<f64>, mu: f64) -> f64 {
        penalty_objective(self.cfg.lambda, w, svms, z, None, mu, &self.phi, self.labels)
    }

    fn train_error(&self, w: &DMatrix<f64>, svms: &OvaSvm) -> f64 {
        mismatch_rate(&svms.predict_columns(&(w * &self.phi)), self.labels)
    }
}

fn build_features(cfg: &MacConfig, x: &DMatrix<f64>) -> Result<FeatureMap> {
    match cfg.basis {
        Basis::Linear => Ok(FeatureMap::Linear { dim: x.ncols() }),
        Basis::Rbf { centers } => {
            let km = kmeans_centers(x, centers, cfg.kmeans_iters, cfg.seed)?;
            let sigma = match cfg.sigma {
                Sigma::Fixed(s) => s,
                Sigma::Auto => median_pairwise_distance(&km.centers),
            };
            debug!("k-means: {} centers, sse {:.6e}, sigma {sigma}", centers, km.sse());
            Ok(FeatureMap::Rbf(RbfCenters::new(km.centers, sigma)?))
        }
    }
}

fn check_finite(value: f64, what: &str, stage: usize, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} became non-finite at stage {stage}, iteration {iteration}"
        )))
    }
}

fn gap_slack(fit: &crate::linsvm::OvaFit, params: &SvmParams) -> f64 {
    fit.gaps.iter().sum::<f64>().max(0.0) + params.tol * fit.gaps.len() as f64
}

/// Trains `g ∘ F` by auxiliary coordinates.
///
/// Without a validation set every stage runs and the final state is
/// returned. With one, the validation error is measured at the end of each
/// stage; training stops after `patience` stages without strict improvement
/// and the best stage's model is returned.
pub fn train_mac(
    cfg: &MacConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<(TrainedModel, MacState)> {
    let (mut problem, features) = Problem::new(cfg, train)?;
    if let Some(v) = val {
        if v.dim() != train.dim() {
            return Err(invalid(format!(
                "validation set has {} features, training set {}",
                v.dim(),
                train.dim()
            )));
        }
    }
    let phi_val = val.map(|v| features.design(&v.x)).transpose()?;

    let mut z = init_z(cfg, &train.y, train.k);
    let mut mu = cfg.mu0;
    let first = problem.g_step(&z, None)?;
    let mut svms = first.ova;
    let mut alphas = first.alphas;
    let mut w = problem.f_step(&z, mu)?;

    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut xi = hinge_slacks(&svms, &z, &train.y);
    let mut best: Option<(f64, usize, DMatrix<f64>, OvaSvm)> = None;
    let mut bad_stages = 0;
    let mut stop_reason = StopReason::StagesExhausted;
    let mut stages = 0;
    let mut iterations = 0;

    for stage in 0..cfg.mu_max_stages {
        if stage > 0 {
            mu *= cfg.mu_factor;
        }
        stages += 1;
        let mut prev = problem.penalty(&w, &svms, &z, mu);
        for it in 0..cfg.inner_max_iters {
            iterations += 1;
            let clock = Instant::now();
            let (z_new, xi_new, z_slack) = problem.z_step(&w, &svms, mu)?;
            let t_z = clock.elapsed();
            z = z_new;
            xi = xi_new;
            let obj = penalty_objective(cfg.lambda, &w, &svms, &z, Some(&xi), mu, &problem.phi, &train.y);
            check_finite(obj, "penalty objective after Z-step", stage, it)?;
            steps.push(StepRecord { stage, iteration: it, step: Step::Z, objective: obj, solver_slack: z_slack });

            let clock = Instant::now();
            let fit = problem.g_step(&z, Some(&alphas))?;
            let t_g = clock.elapsed();
            let slack = gap_slack(&fit, &cfg.svm_params());
            svms = fit.ova;
            alphas = fit.alphas;
            xi = fit.xi;
            let obj = penalty_objective(cfg.lambda, &w, &svms, &z, Some(&xi), mu, &problem.phi, &train.y);
            check_finite(obj, "penalty objective after g-step", stage, it)?;
            steps.push(StepRecord { stage, iteration: it, step: Step::G, objective: obj, solver_slack: slack });

            let clock = Instant::now();
            w = problem.f_step(&z, mu)?;
            debug!("stage {stage} iteration {it}: Z {t_z:?}, g {t_g:?}, F {:?}", clock.elapsed());
            let cur = penalty_objective(cfg.lambda, &w, &svms, &z, Some(&xi), mu, &problem.phi, &train.y);
            check_finite(cur, "penalty objective after F-step", stage, it)?;
            steps.push(StepRecord { stage, iteration: it, step: Step::F, objective: cur, solver_slack: 0.0 });

            let nested = nested_objective(cfg.lambda, &w, &svms, &problem.phi, &train.y);
            check_finite(nested, "nested objective", stage, it)?;
            history.push(HistoryRecord {
                stage,
                iteration: it,
                mu,
                penalty: cur,
                nested,
                train_error: problem.train_error(&w, &svms),
                val_error: None,
            });
            let change = (prev - cur).abs() / prev.abs().max(f64::MIN_POSITIVE);
            prev = cur;
            if change < cfg.inner_tol {
                break;
            }
        }

        let last = history.last_mut().expect("at least one inner iteration");
        info!(
            "stage {stage}: mu {mu}, penalty {:.6e}, nested {:.6e}, train error {:.4}",
            last.penalty, last.nested, last.train_error
        );
        if let (Some(v), Some(phi_v)) = (val, phi_val.as_ref()) {
            let err = mismatch_rate(&svms.predict_columns(&(&w * phi_v)), &v.y);
            last.val_error = Some(err);
            let improved = best.as_ref().is_none_or(|(e, ..)| err < *e);
            if improved {
                best = Some((err, stage, w.clone(), svms.clone()));
                bad_stages = 0;
            } else {
                bad_stages += 1;
                if bad_stages >= cfg.patience {
                    stop_reason = StopReason::ValidationPlateau;
                    break;
                }
            }
        }
    }

    let (selected_stage, w_out, svms_out) = match best {
        Some((_, s, bw, bs)) => (s, bw, bs),
        None => (stages - 1, w.clone(), svms.clone()),
    };
    let map = RbfMapParams::new(features, w_out, cfg.lambda)?;
    let summary = TrainingSummary {
        config: cfg.clone(),
        stop_reason,
        stages,
        iterations,
        selected_stage,
    };
    let model = TrainedModel::assemble(map, svms_out, summary);
    let state = MacState {
        z,
        xi,
        mu,
        history,
        steps,
    };
    Ok((model, state))
}

/// Nested objective of the two-step baseline at a point in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub seconds: f64,
    pub round: usize,
    pub nested: f64,
}

/// Subgradient steps taken on `W` per baseline round.
pub const SUBGRADIENT_STEPS: usize = 20;

/// Subgradient descent on `W` for the nested objective with `g` fixed.
///
/// Step `t` (counted across calls through `step_counter`) has length
/// `η₀ / √(t + 1)`; the best iterate seen is returned.
pub fn subgradient_f_step(
    w: &DMatrix<f64>,
    svms: &OvaSvm,
    phi: &DMatrix<f64>,
    labels: &[usize],
    lambda: f64,
    eta0: f64,
    steps: usize,
    step_counter: &mut usize,
) -> DMatrix<f64> {
    let k = svms.class_count();
    let mut current = w.clone();
    let mut best = current.clone();
    let mut best_obj = nested_objective(lambda, &current, svms, phi, labels);
    let targets: Vec<Vec<f64>> = (0..k).map(|c| ova_targets(labels, c)).collect();
    for _ in 0..steps {
        let fz = &current * phi;
        let mut grad = &current * (2.0 * lambda);
        for (class, machine) in svms.machines.iter().enumerate() {
            let y = &targets[class];
            // Σ over margin violators of y_n φ_n
            let mut active = DVector::zeros(phi.nrows());
            for n in 0..phi.ncols() {
                let m = y[n] * machine.decision(fz.column(n).as_slice());
                if m < 1.0 {
                    active.axpy(y[n], &phi.column(n), 1.0);
                }
            }
            grad -= (&machine.w * active.transpose()) * machine.c;
        }
        let eta = eta0 / ((*step_counter + 1) as f64).sqrt();
        *step_counter += 1;
        current -= grad * eta;
        let obj = nested_objective(lambda, &current, svms, phi, labels);
        if obj < best_obj {
            best_obj = obj;
            best = current.clone();
        }
    }
    best
}

/// Alternates a g-step on `F(X)` with a subgradient F-step on the nested
/// objective, starting from the same initialization as [`train_mac`].
/// Runs until `budget` elapses or `max_rounds` rounds complete.
pub fn two_step_baseline(
    cfg: &MacConfig,
    train: &Dataset,
    budget: Duration,
    max_rounds: Option<usize>,
) -> Result<(TrainedModel, Vec<TracePoint>)> {
    if cfg.basis == Basis::Linear {
        return Err(invalid("two-step baseline expects an RBF basis"));
    }
    let start = Instant::now();
    let (mut problem, features) = Problem::new(cfg, train)?;
    let z = init_z(cfg, &train.y, train.k);
    let first = problem.g_step(&z, None)?;
    let mut svms = first.ova;
    let mut alphas = first.alphas;
    let mut w = problem.f_step(&z, cfg.mu0)?;

    // η₀ from a bound on the hinge subgradient norm
    let phi_norms: f64 = problem.phi.column_iter().map(|c| c.norm()).sum();
    let mut trace = vec![TracePoint {
        seconds: start.elapsed().as_secs_f64(),
        round: 0,
        nested: nested_objective(cfg.lambda, &w, &svms, &problem.phi, &train.y),
    }];
    let mut best = (trace[0].nested, w.clone(), svms.clone());
    let mut counter = 0;
    let mut round = 0;
    let stop_reason = loop {
        if start.elapsed() >= budget {
            break StopReason::Budget;
        }
        if max_rounds.is_some_and(|m| round >= m) {
            break StopReason::StagesExhausted;
        }
        round += 1;
        let fz = &w * &problem.phi;
        let fit = problem.g_step(&fz, Some(&alphas))?;
        svms = fit.ova;
        alphas = fit.alphas;

        let wscale: f64 = svms
            .machines
            .iter()
            .map(|m| m.c * m.w.norm())
            .sum::<f64>()
            * phi_norms;
        let eta0 = w.norm().max(1.0) / (2.0 * cfg.lambda * w.norm() + wscale).max(1e-12);
        w = subgradient_f_step(
            &w,
            &svms,
            &problem.phi,
            &train.y,
            cfg.lambda,
            eta0,
            SUBGRADIENT_STEPS,
            &mut counter,
        );
        let nested = nested_objective(cfg.lambda, &w, &svms, &problem.phi, &train.y);
        check_finite(nested, "two-step nested objective", 0, round)?;
        trace.push(TracePoint {
            seconds: start.elapsed().as_secs_f64(),
            round,
            nested,
        });
        if nested < best.0 {
            best = (nested, w.clone(), svms.clone());
        }
    };
    let _ = &mut problem;
    let (_, bw, bs) = best;
    let map = RbfMapParams::new(features, bw, cfg.lambda)?;
    let summary = TrainingSummary {
        config: cfg.clone(),
        stop_reason,
        stages: round,
        iterations: round,
        selected_stage: round,
    };
    Ok((TrainedModel::assemble(map, bs, summary), trace))
}

/// Runs `f` on a dedicated pool of `threads` workers (`0` = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_spirals;
    use crate::linsvm::BinarySvm;

    fn pairwise(v: &DMatrix<f64>) -> Vec<f64> {
        let mut d = Vec::new();
        for i in 0..v.nrows() {
            for j in i + 1..v.nrows() {
                d.push((v.row(i) - v.row(j)).norm());
            }
        }
        d
    }

    #[test]
    fn simplex_triangle_and_segment() {
        let t = simplex_vertices(3, 2, 1.0);
        assert!(pairwise(&t).iter().all(|d| (d - 1.0).abs() < 1e-12));
        assert!(t.row_sum().amax() < 1e-12);

        let s = simplex_vertices(2, 1, 3.0);
        assert!((s[(0, 0)] + 1.5).abs() < 1e-15);
        assert!((s[(1, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn simplex_tetrahedron_and_padding() {
        let t = simplex_vertices(4, 3, 2.0);
        assert!(pairwise(&t).iter().all(|d| (d - 2.0).abs() < 1e-10));
        let padded = simplex_vertices(4, 6, 2.0);
        assert!(pairwise(&padded).iter().all(|d| (d - 2.0).abs() < 1e-10));
        assert!(padded.columns(3, 3).amax() == 0.0);
        // projection to fewer dimensions loses equal spacing
        let flat = simplex_vertices(4, 2, 2.0);
        let d = pairwise(&flat);
        assert!(d.iter().any(|x| (x - 2.0).abs() > 1e-3));
    }

    #[test]
    fn init_simplex_and_random() {
        let cfg = MacConfig { latent_dim: 1, init: InitStrategy::Simplex, simplex_scale: 2.0, ..Default::default() };
        let z = init_z(&cfg, &[0, 1, 1, 0], 2);
        for (a, b) in z.iter().zip([-1.0, 1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-15);
        }

        let cfg = MacConfig { latent_dim: 3, init: InitStrategy::Random, seed: 5, ..Default::default() };
        let labels = vec![0, 1, 2, 0];
        assert_eq!(init_z(&cfg, &labels, 3), init_z(&cfg, &labels, 3));

        let cfg = MacConfig { latent_dim: 2, init: InitStrategy::Simplex, ..Default::default() };
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let z = init_z(&cfg, &labels, 3);
        assert!(crate::baselines::within_class_scatter(&z, &labels) < 1e-24);
    }

    fn tiny_problem() -> (DMatrix<f64>, OvaSvm, DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
        // L = 1, M = 1, N = 2, K = 2
        let w = DMatrix::from_element(1, 1, 0.5);
        let svms = OvaSvm {
            machines: vec![
                BinarySvm { w: DVector::from_vec(vec![2.0]), b: 0.5, c: 3.0 },
                BinarySvm { w: DVector::from_vec(vec![-1.0]), b: 0.0, c: 3.0 },
            ],
        };
        let phi = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let z = DMatrix::from_row_slice(1, 2, &[0.25, -1.5]);
        (w, svms, phi, z, vec![0, 1])
    }

    #[test]
    fn penalty_objective_by_hand() {
        let (w, svms, phi, z, labels) = tiny_problem();
        // machine 0 (y = +1, −1): margins 2·0.25+0.5 = 1 → 0; −(2·−1.5+0.5) = 2.5 → 0
        // machine 1 (y = −1, +1): −(−0.25) = 0.25 → 0.75; 1.5 → 0
        // reg: ½(4+0.25) + ½(1) = 2.625; λ‖W‖² = 0.1·0.25
        // residual: (0.25−0.5)² + (−1.5+1)² = 0.0625 + 0.25 = 0.3125
        let expected = 0.025 + 2.625 + 3.0 * 0.75 + 0.5 * 2.0 * 0.3125;
        let got = penalty_objective(0.1, &w, &svms, &z, None, 2.0, &phi, &labels);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        // linear in μ
        let doubled = penalty_objective(0.1, &w, &svms, &z, None, 4.0, &phi, &labels);
        assert!((doubled - got - 0.5 * 2.0 * 0.3125).abs() < 1e-12);
    }

    #[test]
    fn nested_equals_penalty_on_constraint() {
        let (w, svms, phi, _, labels) = tiny_problem();
        let z = &w * &phi;
        let xi = hinge_slacks(&svms, &z, &labels);
        let p = penalty_objective(0.1, &w, &svms, &z, Some(&xi), 7.0, &phi, &labels);
        let n = nested_objective(0.1, &w, &svms, &phi, &labels);
        assert!((p - n).abs() < 1e-14);
    }

    #[test]
    fn zero_residual_zero_slack_objective_is_regularizer() {
        let svms = OvaSvm {
            machines: vec![
                BinarySvm { w: DVector::from_vec(vec![1.0]), b: 0.0, c: 1.0 },
                BinarySvm { w: DVector::from_vec(vec![-1.0]), b: 0.0, c: 1.0 },
            ],
        };
        let w = DMatrix::zeros(1, 1);
        let phi = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let z = DMatrix::zeros(1, 2);
        // all margins are 0 → slacks 1 each unless z is far out; use explicit xi = 0
        let xi = DMatrix::zeros(2, 2);
        let v = penalty_objective(0.3, &w, &svms, &z, Some(&xi), 2.0, &phi, &[0, 1]);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn collapse_identity_and_equivalence() {
        let svms = OvaSvm {
            machines: vec![
                BinarySvm { w: DVector::from_vec(vec![1.0, 2.0]), b: 0.1, c: 1.0 },
                BinarySvm { w: DVector::from_vec(vec![-1.0, 0.5]), b: -0.2, c: 1.0 },
            ],
        };
        let map = RbfMapParams::new(FeatureMap::Linear { dim: 2 }, DMatrix::identity(2, 2), 0.0).unwrap();
        let col = collapse(&map, &svms);
        assert_eq!(col.v.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);
        assert_eq!(col.v.row(1).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.5]);
    }

    #[test]
    fn mu_schedule_and_monotone_blocks_on_small_spirals() {
        let ds = gen_spirals(2, 100, 0.025, 1.5, 0).unwrap();
        let cfg = MacConfig {
            basis: Basis::Rbf { centers: 30 },
            sigma: Sigma::Fixed(0.3),
            mu_max_stages: 4,
            ..Default::default()
        };
        let (model, state) = train_mac(&cfg, &ds, None).unwrap();
        let mut mus: Vec<f64> = state.history.iter().map(|h| h.mu).collect();
        mus.dedup();
        assert_eq!(mus, vec![2.0, 3.0, 4.5, 6.75]);
        let mut prev: Option<&StepRecord> = None;
        for s in &state.steps {
            if let Some(p) = prev {
                if p.stage == s.stage {
                    let allowed = 1e-9 * p.objective.abs() + s.solver_slack;
                    assert!(s.objective <= p.objective + allowed, "{p:?} -> {s:?}");
                }
            }
            prev = Some(s);
        }
        assert_eq!(model.summary.stop_reason, StopReason::StagesExhausted);
    }

    #[test]
    fn early_stopping_returns_best_stage() {
        let ds = gen_spirals(2, 150, 0.025, 1.5, 1).unwrap();
        let parts = crate::data::split(&ds, &crate::data::SplitSpec::new(vec![0.8, 0.2], 0).unwrap()).unwrap();
        let cfg = MacConfig {
            basis: Basis::Rbf { centers: 40 },
            sigma: Sigma::Fixed(0.3),
            mu_max_stages: 15,
            ..Default::default()
        };
        let (model, state) = train_mac(&cfg, &parts[0], Some(&parts[1])).unwrap();
        let vals: Vec<(usize, f64)> = state
            .history
            .iter()
            .filter_map(|h| h.val_error.map(|e| (h.stage, e)))
            .collect();
        let best = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let chosen = vals.iter().find(|v| v.0 == model.summary.selected_stage).unwrap();
        assert_eq!(chosen.1, best);
        if model.summary.stop_reason == StopReason::ValidationPlateau {
            assert!(vals.len() < 15);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let ds = gen_spirals(2, 10, 0.0, 1.5, 0).unwrap();
        let bad = MacConfig { mu_factor: 1.0, ..Default::default() };
        let err = train_mac(&bad, &ds, None).unwrap_err().to_string();
        assert!(err.contains("mu-factor"), "{err}");
        let bad = MacConfig { basis: Basis::Rbf { centers: 50 }, ..Default::default() };
        assert!(train_mac(&bad, &ds, None).is_err());
    }

    #[test]
    fn subgradient_with_zero_classifier_shrinks_weights() {
        let svms = OvaSvm {
            machines: vec![
                BinarySvm { w: DVector::zeros(2), b: 0.3, c: 1.0 },
                BinarySvm { w: DVector::zeros(2), b: -0.3, c: 1.0 },
            ],
        };
        let phi = DMatrix::from_fn(4, 10, |i, j| ((i + 2 * j) % 5) as f64 / 5.0);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let w0 = DMatrix::from_element(2, 4, 1.0);
        let mut counter = 0;
        let w = subgradient_f_step(&w0, &svms, &phi, &labels, 0.5, 0.2, 200, &mut counter);
        assert!(w.norm() < 1e-2 * w0.norm(), "{}", w.norm());
    }

    #[test]
    fn baseline_g_step_on_collapsed_layout_has_no_slack() {
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let cfg = MacConfig { latent_dim: 2, c: 1e6, ..Default::default() };
        let fz = init_z(&cfg, &labels, 3);
        let fit = train_ova(&fz, &labels, 3, &SvmParams { c: 1e6, ..Default::default() }, None, None).unwrap();
        assert!(fit.xi.amax() < 1e-6);
    }
}
