//! Reference methods and diagnostics: PCA, nearest neighbor, a linear SVM on
//! raw inputs, and scatter/error metrics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::linsvm::{train_ova, OvaSvm, SvmParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `L × D`, orthonormal rows.
    pub components: DMatrix<f64>,
    /// Variance of the data along each component, descending.
    pub explained_variance: Vec<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and eigenvectors as columns.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let total = a.norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Top-`l` principal directions of `x` (`N × D`). Uses the `D × D`
/// covariance when `D ≤ N` and the `N × N` Gram matrix otherwise.
/// Variances are population variances (divided by `N`).
pub fn pca_fit(x: &DMatrix<f64>, l: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if l < 1 || l > n.min(d) {
        return Err(invalid(format!("PCA dimension {l} outside 1..={}", n.min(d))));
    }
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut components = DMatrix::zeros(l, d);
    let mut explained = Vec::with_capacity(l);
    if d <= n {
        let cov = centered.transpose() * &centered / n as f64;
        let (values, vectors) = symmetric_eigen(&cov);
        for i in 0..l {
            components.row_mut(i).copy_from(&vectors.column(i).transpose());
            explained.push(values[i].max(0.0));
        }
    } else {
        let gram = &centered * centered.transpose() / n as f64;
        let (values, vectors) = symmetric_eigen(&gram);
        for i in 0..l {
            let dir = centered.transpose() * vectors.column(i);
            let norm = dir.norm();
            if norm > 0.0 {
                components.row_mut(i).copy_from(&(dir / norm).transpose());
            }
            explained.push(values[i].max(0.0));
        }
    }
    // sign: largest-magnitude entry positive
    for mut row in components.row_iter_mut() {
        let mut imax = 0;
        for j in 1..row.len() {
            if row[j].abs() > row[imax].abs() {
                imax = j;
            }
        }
        if row[imax] < 0.0 {
            row.neg_mut();
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
    })
}

/// Projections onto the components, `N × L`.
pub fn pca_project(model: &PcaModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.mean.len() {
        return Err(invalid(format!(
            "PCA fitted on {} features, got {}",
            model.mean.len(),
            x.ncols()
        )));
    }
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= model.mean.transpose();
    }
    Ok(centered * model.components.transpose())
}

/// 1-nearest-neighbor labels for the rows of `queries`; ties go to the
/// lowest training index.
pub fn nn_classify(train: &Dataset, queries: &DMatrix<f64>) -> Result<Vec<usize>> {
    if queries.ncols() != train.dim() {
        return Err(invalid(format!(
            "queries have {} features, training set {}",
            queries.ncols(),
            train.dim()
        )));
    }
    Ok((0..queries.nrows())
        .into_par_iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for i in 0..train.len() {
                let d: f64 = (0..train.dim())
                    .map(|j| (queries[(q, j)] - train.x[(i, j)]).powi(2))
                    .sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            train.y[best.0]
        })
        .collect())
}

/// Mean squared distance of each point to its class centroid. `z` holds one
/// point per column.
pub fn within_class_scatter(z: &DMatrix<f64>, y: &[usize]) -> f64 {
    let k = y.iter().max().map_or(0, |m| m + 1);
    let l = z.nrows();
    let mut sums = DMatrix::<f64>::zeros(l, k);
    let mut counts = vec![0usize; k];
    for (n, &c) in y.iter().enumerate() {
        counts[c] += 1;
        let mut col = sums.column_mut(c);
        col += z.column(n);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mut col = sums.column_mut(c);
            col /= counts[c] as f64;
        }
    }
    let total: f64 = y
        .iter()
        .enumerate()
        .map(|(n, &c)| (z.column(n) - sums.column(c)).norm_squared())
        .sum();
    total / y.len().max(1) as f64
}

pub fn error_rate(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// `counts[true][pred]`.
pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p < k && t < k {
            counts[t][p] += 1;
        }
    }
    counts
}

/// One-vs-all linear SVM trained directly on the inputs.
pub fn linear_svm_on_inputs(train: &Dataset, params: &SvmParams) -> Result<OvaSvm> {
    Ok(train_ova(&train.x.transpose(), &train.y, train.k, params, None, None)?.ova)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_spirals, split, SplitSpec};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = crate::rng::stream(seed, 300);
        DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn jacobi_matches_dense_eigensolver() {
        let x = random(50, 5, 1);
        let model = pca_fit(&x, 5).unwrap();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= model.mean.transpose();
        }
        let cov = centered.transpose() * &centered / 50.0;
        let oracle = nalgebra::SymmetricEigen::new(cov);
        let mut pairs: Vec<(f64, DVector<f64>)> = oracle
            .eigenvalues
            .iter()
            .zip(oracle.eigenvectors.column_iter())
            .map(|(&v, c)| (v, c.into_owned()))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (i, (val, vec)) in pairs.iter().enumerate() {
            assert!((model.explained_variance[i] - val).abs() < 1e-8);
            let row = model.components.row(i).transpose();
            let align = row.dot(vec).abs();
            assert!((align - 1.0).abs() < 1e-8, "component {i}: {align}");
        }
    }

    #[test]
    fn components_orthonormal_and_variances_match() {
        let x = random(40, 6, 2);
        let model = pca_fit(&x, 3).unwrap();
        let gram = &model.components * model.components.transpose();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-8);
        let proj = pca_project(&model, &x).unwrap();
        for i in 0..3 {
            let col = proj.column(i);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 40.0;
            assert!((var - model.explained_variance[i]).abs() <= 1e-8 * (1.0 + var));
            assert!(col.mean().abs() < 1e-12);
        }
        assert!(model.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn subspace_data_reconstructs_exactly() {
        let basis = random(2, 5, 3);
        let coeffs = random(30, 2, 4);
        let x = &coeffs * &basis;
        let model = pca_fit(&x, 2).unwrap();
        let proj = pca_project(&model, &x).unwrap();
        let mut recon = proj * &model.components;
        for mut row in recon.row_iter_mut() {
            row += model.mean.transpose();
        }
        assert!((recon - x).amax() < 1e-8);
    }

    #[test]
    fn two_points_component_along_difference() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 2.0]);
        let model = pca_fit(&x, 1).unwrap();
        let dir = DVector::from_vec(vec![2.0, 1.0]).normalize();
        assert!((model.components.row(0).transpose().dot(&dir).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dual_pca_for_wide_data() {
        let x = random(6, 20, 5);
        let wide = pca_fit(&x, 3).unwrap();
        let proj = pca_project(&wide, &x).unwrap();
        for i in 0..3 {
            let var = proj.column(i).iter().map(|v| v * v).sum::<f64>() / 6.0;
            assert!((var - wide.explained_variance[i]).abs() <= 1e-8 * (1.0 + var));
        }
        let gram = &wide.components * wide.components.transpose();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn projection_preserves_inner_products_in_subspace() {
        let x = random(30, 4, 6);
        let model = pca_fit(&x, 2).unwrap();
        // points already in the component subspace (relative to the mean)
        let a = model.components.row(0) * 2.0 + model.components.row(1) * -0.5;
        let b = model.components.row(0) * 0.3 + model.components.row(1) * 1.5;
        let pts = DMatrix::from_rows(&[a.clone() + model.mean.transpose(), b.clone() + model.mean.transpose()]);
        let proj = pca_project(&model, &pts).unwrap();
        assert!((proj.row(0).dot(&proj.row(1)) - a.dot(&b)).abs() < 1e-10);
    }

    #[test]
    fn pca_range_errors() {
        assert!(pca_fit(&random(5, 3, 0), 0).is_err());
        assert!(pca_fit(&random(5, 3, 0), 4).is_err());
    }

    #[test]
    fn nn_self_and_ties() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 2.0, 5.0]);
        let train = Dataset::new(x.clone(), vec![1, 0, 1], 2).unwrap();
        assert_eq!(nn_classify(&train, &x).unwrap(), vec![1, 0, 1]);
        let q = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert_eq!(nn_classify(&train, &q).unwrap(), vec![1]);
    }

    #[test]
    fn nn_on_two_spirals_is_accurate() {
        let ds = gen_spirals(2, 1000, 0.025, 1.5, 0).unwrap();
        let parts = split(&ds, &SplitSpec::new(vec![0.8, 0.2], 0).unwrap()).unwrap();
        let pred = nn_classify(&parts[0], &parts[1].x).unwrap();
        assert!(error_rate(&pred, &parts[1].y).unwrap() < 0.05);
    }

    #[test]
    fn scatter_cases() {
        let z = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, -2.0, -2.0]);
        assert_eq!(within_class_scatter(&z, &[0, 0, 1, 1]), 0.0);
        let z = DMatrix::from_row_slice(2, 4, &[0.0, 2.0, 5.0, 5.0, 0.0, 0.0, 1.0, 3.0]);
        assert!((within_class_scatter(&z, &[0, 0, 1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scatter_invariances() {
        let z = random(3, 20, 7);
        let y: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let base = within_class_scatter(&z, &y);
        let shifted = z.map(|v| v + 3.5);
        assert!((within_class_scatter(&shifted, &y) - base).abs() < 1e-12);
        let perm: Vec<usize> = (0..20).rev().collect();
        let zp = DMatrix::from_fn(3, 20, |i, j| z[(i, perm[j])]);
        let yp: Vec<usize> = perm.iter().map(|&j| y[j]).collect();
        assert!((within_class_scatter(&zp, &yp) - base).abs() < 1e-12);
    }

    #[test]
    fn error_rate_cases() {
        assert_eq!(error_rate(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(error_rate(&[1, 0, 1], &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(error_rate(&[0, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.25);
        assert!(error_rate(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn raw_linear_svm_fails_on_spirals() {
        let ds = gen_spirals(2, 200, 0.025, 1.5, 0).unwrap();
        let svm = linear_svm_on_inputs(&ds, &SvmParams::default()).unwrap();
        let pred = svm.predict_columns(&ds.x.transpose());
        assert!(error_rate(&pred, &ds.y).unwrap() > 0.2);
    }
}
