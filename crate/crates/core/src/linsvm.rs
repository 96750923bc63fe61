//! Linear SVMs on latent points: a binary hinge-loss trainer and the
//! one-vs-all multiclass wrapper.
//!
//! The binary trainer runs dual coordinate descent on
//!
//! ```text
//! min_α ½ αᵀQα − Σα   s.t. 0 ≤ α_n ≤ C,   Q_nm = y_n y_m (z_nᵀz_m + 1)
//! ```
//!
//! i.e. the bias is folded into `w` as the weight of a constant feature equal
//! to 1. The matching primal is `½(‖w‖² + b²) + C Σ ξ_n`, so the bias carries
//! a small ridge; every objective in this crate uses the same convention.
//! Points are visited in index order, which makes training deterministic.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub w: DVector<f64>,
    pub b: f64,
    pub c: f64,
}

impl BinarySvm {
    pub fn decision(&self, z: &[f64]) -> f64 {
        self.w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    /// `½(‖w‖² + b²)`, the regularizer minimized by the trainer.
    pub fn regularizer(&self) -> f64 {
        0.5 * (self.w.norm_squared() + self.b * self.b)
    }
}

/// Solver controls shared by binary and one-vs-all training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-6,
            max_epochs: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub svm: BinarySvm,
    /// Hinge slacks `max(0, 1 − y_n(wᵀz_n + b))`.
    pub xi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub primal: f64,
    pub dual_gap: f64,
    pub converged: bool,
    /// Duality gap after every epoch.
    pub gap_trace: Vec<f64>,
}

/// Trains a binary linear SVM on the columns of `z` (`L × N`) with targets
/// `y_n ∈ {−1, +1}`.
pub fn train_binary(z: &DMatrix<f64>, y: &[f64], params: &SvmParams) -> Result<BinaryFit> {
    train_binary_warm(z, y, params, None)
}

/// As [`train_binary`], starting the dual from `warm` (clipped into the box).
pub fn train_binary_warm(
    z: &DMatrix<f64>,
    y: &[f64],
    params: &SvmParams,
    warm: Option<&[f64]>,
) -> Result<BinaryFit> {
    let (l, n) = z.shape();
    let c = params.c;
    if !(c > 0.0) || !c.is_finite() {
        return Err(invalid(format!("C must be positive, got {c}")));
    }
    if !(params.tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {}", params.tol)));
    }
    if y.len() != n {
        return Err(invalid(format!("{n} points but {} targets", y.len())));
    }
    if y.iter().any(|&t| t != 1.0 && t != -1.0) {
        return Err(invalid("binary targets must be +1 or -1"));
    }
    if !y.contains(&1.0) || !y.contains(&-1.0) {
        return Err(invalid("binary SVM needs both classes present"));
    }

    let zs = z.as_slice();
    let col = |i: usize| &zs[i * l..(i + 1) * l];
    let qdiag: Vec<f64> = (0..n)
        .map(|i| col(i).iter().map(|v| v * v).sum::<f64>() + 1.0)
        .collect();
    let mut alpha: Vec<f64> = match warm {
        Some(a) if a.len() == n => a.iter().map(|v| v.clamp(0.0, c)).collect(),
        Some(a) => return Err(invalid(format!("warm start has {} entries, need {n}", a.len()))),
        None => vec![0.0; n],
    };

    // augmented weights: w[..l] is w, w[l] is b
    let rebuild = |alpha: &[f64]| {
        let mut w = vec![0.0; l + 1];
        for i in 0..n {
            let s = alpha[i] * y[i];
            if s != 0.0 {
                for (wj, zj) in w.iter_mut().zip(col(i)) {
                    *wj += s * zj;
                }
                w[l] += s;
            }
        }
        w
    };
    let measure = |w: &[f64], alpha: &[f64]| {
        let half_norm = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        let hinge: f64 = (0..n)
            .map(|i| {
                let m = y[i] * (dot(&w[..l], col(i)) + w[l]);
                (1.0 - m).max(0.0)
            })
            .sum();
        let primal = half_norm + c * hinge;
        let dual = alpha.iter().sum::<f64>() - half_norm;
        (primal, primal - dual)
    };

    let mut w = rebuild(&alpha);
    let mut gap_trace = Vec::new();
    let mut converged = false;
    let (mut primal, mut gap) = measure(&w, &alpha);
    if gap <= params.tol * (1.0 + primal.abs()) {
        converged = true;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = rng::stream(0, rng::STREAM_SVM_ORDER);
    let mut epoch = 0;
    while !converged && epoch < params.max_epochs {
        order.shuffle(&mut shuffler);
        for &i in &order {
            let zi = col(i);
            let g = y[i] * (dot(&w[..l], zi) + w[l]) - 1.0;
            let a = alpha[i];
            let pg = if a <= 0.0 {
                g.min(0.0)
            } else if a >= c {
                g.max(0.0)
            } else {
                g
            };
            if pg.abs() > 1e-15 {
                let next = (a - g / qdiag[i]).clamp(0.0, c);
                let step = (next - a) * y[i];
                if step != 0.0 {
                    alpha[i] = next;
                    for (wj, zj) in w.iter_mut().zip(zi) {
                        *wj += step * zj;
                    }
                    w[l] += step;
                }
            }
        }
        epoch += 1;
        w = rebuild(&alpha);
        (primal, gap) = measure(&w, &alpha);
        gap_trace.push(gap);
        if gap <= params.tol * (1.0 + primal.abs()) {
            converged = true;
        }
    }

    let svm = BinarySvm {
        w: DVector::from_column_slice(&w[..l]),
        b: w[l],
        c,
    };
    let xi = (0..n)
        .map(|i| (1.0 - y[i] * svm.decision(col(i))).max(0.0))
        .collect();
    Ok(BinaryFit {
        svm,
        xi,
        alpha,
        primal,
        dual_gap: gap,
        converged,
        gap_trace,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-vs-all targets for class `k`: +1 for members, −1 otherwise.
pub fn ova_targets(labels: &[usize], k: usize) -> Vec<f64> {
    labels
        .iter()
        .map(|&c| if c == k { 1.0 } else { -1.0 })
        .collect()
}

/// `K` binary machines sharing one latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct OvaSvm {
    pub machines: Vec<BinarySvm>,
}

impl OvaSvm {
    pub fn class_count(&self) -> usize {
        self.machines.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.machines.first().map_or(0, |m| m.w.len())
    }

    pub fn decision_values(&self, z: &[f64]) -> Vec<f64> {
        self.machines.iter().map(|m| m.decision(z)).collect()
    }

    /// Label with the largest decision value; ties go to the smaller index.
    pub fn predict(&self, z: &[f64]) -> usize {
        argmax(&self.decision_values(z))
    }

    /// Predictions for every column of `z` (`L × N`).
    pub fn predict_columns(&self, z: &DMatrix<f64>) -> Vec<usize> {
        z.column_iter()
            .map(|c| self.predict(c.as_slice()))
            .collect()
    }

    pub fn regularizer(&self) -> f64 {
        self.machines.iter().map(BinarySvm::regularizer).sum()
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct OvaFit {
    pub ova: OvaSvm,
    /// Slacks, `K × N`.
    pub xi: DMatrix<f64>,
    pub alphas: Vec<Vec<f64>>,
    pub gaps: Vec<f64>,
    pub converged: bool,
}

/// Trains one machine per class. `per_class_c` overrides `params.c`;
/// `warm` supplies per-class dual starting points. Machines train in
/// parallel and do not interact.
pub fn train_ova(
    z: &DMatrix<f64>,
    labels: &[usize],
    k: usize,
    params: &SvmParams,
    per_class_c: Option<&[f64]>,
    warm: Option<&[Vec<f64>]>,
) -> Result<OvaFit> {
    if k < 2 {
        return Err(invalid(format!("one-vs-all needs K >= 2, got {k}")));
    }
    if labels.len() != z.ncols() {
        return Err(invalid(format!(
            "{} points but {} labels",
            z.ncols(),
            labels.len()
        )));
    }
    let mut present = vec![false; k];
    for &c in labels {
        if c >= k {
            return Err(invalid(format!("label {c} out of range for {k} classes")));
        }
        present[c] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(invalid(format!("class {missing} has no training points")));
    }
    if let Some(cs) = per_class_c {
        if cs.len() != k {
            return Err(invalid(format!("{} per-class penalties for {k} classes", cs.len())));
        }
    }
    if let Some(w) = warm {
        if w.len() != k {
            return Err(invalid(format!("{} warm starts for {k} classes", w.len())));
        }
    }

    let fits: Vec<BinaryFit> = (0..k)
        .into_par_iter()
        .map(|class| {
            let mut p = *params;
            if let Some(cs) = per_class_c {
                p.c = cs[class];
            }
            let targets = ova_targets(labels, class);
            train_binary_warm(z, &targets, &p, warm.map(|w| w[class].as_slice()))
        })
        .collect::<Result<_>>()?;

    let n = z.ncols();
    let xi = DMatrix::from_fn(k, n, |class, i| fits[class].xi[i]);
    let converged = fits.iter().all(|f| f.converged);
    let gaps = fits.iter().map(|f| f.dual_gap).collect();
    let mut machines = Vec::with_capacity(k);
    let mut alphas = Vec::with_capacity(k);
    for f in fits {
        machines.push(f.svm);
        alphas.push(f.alpha);
    }
    Ok(OvaFit {
        ova: OvaSvm { machines },
        xi,
        alphas,
        gaps,
        converged,
    })
}
