//! RBF basis machinery: k-means centers, the Gaussian design matrix and the
//! linear read-out `F(x) = W Φ(x)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::rng;

/// Gaussian basis centers (`M × D`, one per row) sharing one width.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfCenters {
    pub centers: DMatrix<f64>,
    pub sigma: f64,
}

impl RbfCenters {
    pub fn new(centers: DMatrix<f64>, sigma: f64) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(invalid("need at least one center"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("rbf width must be positive, got {sigma}")));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(invalid("centers contain non-finite values"));
        }
        Ok(Self { centers, sigma })
    }

    pub fn len(&self) -> usize {
        self.centers.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.nrows() == 0
    }
}

/// The basis `Φ` used by `F`: Gaussian RBFs, or the identity (linear `F`).
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Rbf(RbfCenters),
    Linear { dim: usize },
}

impl FeatureMap {
    /// Number of basis functions `M` (equal to `D` in linear mode).
    pub fn basis_count(&self) -> usize {
        match self {
            FeatureMap::Rbf(c) => c.len(),
            FeatureMap::Linear { dim } => *dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Rbf(c) => c.centers.ncols(),
            FeatureMap::Linear { dim } => *dim,
        }
    }

    /// `Φ(X)`, `M × N`.
    pub fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(invalid(format!(
                "inputs have {} features, map expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        match self {
            FeatureMap::Rbf(c) => rbf_design_matrix(x, c),
            FeatureMap::Linear { .. } => Ok(x.transpose()),
        }
    }
}

/// `Φ[m, n] = exp(−‖x_n − c_m‖² / 2σ²)`, one column per row of `x`.
pub fn rbf_design_matrix(x: &DMatrix<f64>, centers: &RbfCenters) -> Result<DMatrix<f64>> {
    if !(centers.sigma > 0.0) {
        return Err(invalid(format!("rbf width must be positive, got {}", centers.sigma)));
    }
    if x.ncols() != centers.centers.ncols() {
        return Err(invalid(format!(
            "inputs have {} features, centers have {}",
            x.ncols(),
            centers.centers.ncols()
        )));
    }
    let m = centers.len();
    let inv = 1.0 / (2.0 * centers.sigma * centers.sigma);
    let c = &centers.centers;
    let columns: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|n| {
            (0..m)
                .map(|j| (-sq_dist_rows(x, n, c, j) * inv).exp())
                .collect()
        })
        .collect();
    Ok(DMatrix::from_vec(m, x.nrows(), columns.concat()))
}

fn sq_dist_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|d| {
            let t = a[(i, d)] - b[(j, d)];
            t * t
        })
        .sum()
}

/// Median Euclidean distance over all pairs of distinct centers. Falls back
/// to 1 when fewer than two centers exist or every pair coincides.
pub fn median_pairwise_distance(centers: &DMatrix<f64>) -> f64 {
    let m = centers.nrows();
    let mut d: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..m).map(move |j| sq_dist_rows(centers, i, centers, j).sqrt())
        })
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, &mut med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Outcome of k-means: centers plus the per-iteration objective trace.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: DMatrix<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned center, after each
    /// assignment step.
    pub sse_trace: Vec<f64>,
}

impl KMeans {
    pub fn sse(&self) -> f64 {
        *self.sse_trace.last().expect("k-means records at least one iteration")
    }
}

/// Lloyd's k-means with D²-weighted seeding.
///
/// Empty clusters are re-seeded at the point farthest from its current
/// center.
pub fn kmeans_centers(x: &DMatrix<f64>, m: usize, max_iter: usize, seed: u64) -> Result<KMeans> {
    let n = x.nrows();
    if m < 1 || m > n {
        return Err(invalid(format!("k-means needs 1 <= M <= N, got M={m}, N={n}")));
    }
    let mut rng = rng::stream(seed, rng::STREAM_KMEANS);
    let d = x.ncols();

    // seeding
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut seeds = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist_rows(x, i, x, first)).collect();
    while seeds.len() < m {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        seeds.push(pick);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist_rows(x, i, x, pick));
        }
    }
    let mut centers = DMatrix::from_fn(m, d, |j, c| x[(seeds[j], c)]);

    let mut assignment = vec![usize::MAX; n];
    let mut sse_trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for j in 0..m {
                    let dist = sq_dist_rows(x, i, &centers, j);
                    if dist < best.1 {
                        best = (j, dist);
                    }
                }
                best
            })
            .collect();
        let changed = assigned
            .iter()
            .zip(&assignment)
            .any(|(&(j, _), &old)| j != old);
        for (slot, &(j, _)) in assignment.iter_mut().zip(&assigned) {
            *slot = j;
        }
        sse_trace.push(assigned.iter().map(|&(_, dist)| dist).sum());
        if !changed {
            break;
        }

        let mut sums = DMatrix::<f64>::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &j) in assignment.iter().enumerate() {
            counts[j] += 1;
            for c in 0..d {
                sums[(j, c)] += x[(i, c)];
            }
        }
        for j in 0..m {
            if counts[j] > 0 {
                for c in 0..d {
                    centers[(j, c)] = sums[(j, c)] / counts[j] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..m).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut spread: Vec<(usize, f64)> = (0..n)
                .map(|i| (i, sq_dist_rows(x, i, &centers, assignment[i])))
                .collect();
            spread.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (&j, &(i, _)) in empty.iter().zip(&spread) {
                for c in 0..d {
                    centers[(j, c)] = x[(i, c)];
                }
            }
        }
    }
    Ok(KMeans {
        centers,
        assignment,
        sse_trace,
    })
}

/// Parameters of `F`: the basis, the read-out weights `W` (`L × M`) and the
/// ridge coefficient `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfMapParams {
    pub features: FeatureMap,
    pub w: DMatrix<f64>,
    pub lambda: f64,
}

impl RbfMapParams {
    pub fn new(features: FeatureMap, w: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if w.ncols() != features.basis_count() {
            return Err(invalid(format!(
                "W has {} columns, basis has {} functions",
                w.ncols(),
                features.basis_count()
            )));
        }
        if !(lambda >= 0.0) {
            return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { features, w, lambda })
    }

    pub fn latent_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `F(x)` for a single input vector.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let row = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let phi = self.features.design(&row)?;
        Ok(&self.w * phi.column(0))
    }
}

/// `Ẑ = W Φ`.
pub fn map_latent(params: &RbfMapParams, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if phi.nrows() != params.w.ncols() {
        return Err(invalid(format!(
            "Φ has {} rows, W has {} columns",
            phi.nrows(),
            params.w.ncols()
        )));
    }
    Ok(&params.w * phi)
}
