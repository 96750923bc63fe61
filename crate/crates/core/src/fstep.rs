//! The F-step: ridge regression of the auxiliary coordinates onto the basis.
//!
//! With `Φ` and `Z` fixed, the `W`-dependent part of the penalty objective is
//! `λ‖W‖² + μ/2 ‖Z − WΦ‖²`. Dividing by `μ/2` shows the minimizer solves
//! `(ΦΦᵀ + τI) Wᵀ = Φ Zᵀ` with `τ = 2λ/μ`. The Gram matrix `ΦΦᵀ` never changes
//! during training; its shifted Cholesky factor is rebuilt only when `τ`
//! (i.e. `μ`) changes.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

/// Largest basis size accepted by [`build_gram`].
pub const MAX_BASIS: usize = 10_000;

const BLOCK: usize = 96;

#[derive(Debug, Clone)]
pub struct GramCache {
    gram: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
    tau: f64,
    factorizations: usize,
}

/// `G = ΦΦᵀ` for `Φ` of shape `M × N`.
pub fn build_gram(phi: &DMatrix<f64>) -> Result<GramCache> {
    let m = phi.nrows();
    if m == 0 || m > MAX_BASIS {
        return Err(invalid(format!("basis size {m} outside 1..={MAX_BASIS}")));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("design matrix has non-finite entries".into()));
    }
    let mut gram = phi * phi.transpose();
    for j in 0..m {
        for i in j + 1..m {
            let v = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(GramCache {
        gram,
        factor: None,
        tau: f64::NAN,
        factorizations: 0,
    })
}

impl GramCache {
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Lower-triangular factor of `G + τI` for the current shift, if any.
    pub fn factor(&self) -> Option<&DMatrix<f64>> {
        self.factor.as_ref()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Number of factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    /// Makes sure a factor of `G + τI` is cached.
    pub fn ensure_factor(&mut self, tau: f64) -> Result<()> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(invalid(format!("shift must be finite and >= 0, got {tau}")));
        }
        if self.factor.is_some() && self.tau.to_bits() == tau.to_bits() {
            return Ok(());
        }
        let m = self.gram.nrows();
        let shifted = |extra: f64| {
            let mut a = self.gram.clone();
            for i in 0..m {
                a[(i, i)] += tau + extra;
            }
            a
        };
        let mut a = shifted(0.0);
        self.factorizations += 1;
        if let Err(pivot) = cholesky_in_place(&mut a) {
            if tau == 0.0 {
                return Err(Error::Numeric(format!(
                    "Gram matrix is singular at pivot {pivot}; use lambda > 0"
                )));
            }
            let bump = 1e-10 * self.gram.trace() / m as f64;
            warn!("shifted Gram not positive definite at pivot {pivot}; retrying with +{bump:e} on the diagonal");
            a = shifted(bump);
            cholesky_in_place(&mut a).map_err(|pivot| {
                Error::Numeric(format!(
                    "Gram matrix not positive definite at pivot {pivot} even after perturbation"
                ))
            })?;
        }
        self.factor = Some(a);
        self.tau = tau;
        Ok(())
    }

    /// Solves `(G + τI) X = rhs` column by column with the cached factor.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = self
            .factor
            .as_ref()
            .ok_or_else(|| invalid("no factorization cached"))?;
        let m = l.nrows();
        if rhs.nrows() != m {
            return Err(invalid(format!("rhs has {} rows, Gram is {m}x{m}", rhs.nrows())));
        }
        let cols: Vec<Vec<f64>> = (0..rhs.ncols())
            .into_par_iter()
            .map(|c| {
                let mut x: Vec<f64> = rhs.column(c).iter().copied().collect();
                solve_factored(l, &mut x);
                x
            })
            .collect();
        Ok(DMatrix::from_vec(m, rhs.ncols(), cols.concat()))
    }
}

/// Solves `L Lᵀ x = b` in place.
fn solve_factored(l: &DMatrix<f64>, x: &mut [f64]) {
    let m = l.nrows();
    let data = l.as_slice();
    for p in 0..m {
        let col = &data[p * m..(p + 1) * m];
        x[p] /= col[p];
        let xp = x[p];
        for i in p + 1..m {
            x[i] -= col[i] * xp;
        }
    }
    for i in (0..m).rev() {
        let col = &data[i * m..(i + 1) * m];
        let mut s = x[i];
        for p in i + 1..m {
            s -= col[p] * x[p];
        }
        x[i] = s / col[i];
    }
}

/// Blocked right-looking Cholesky. On success the lower triangle holds `L`
/// and the strict upper triangle is zeroed; on failure returns the pivot.
pub(crate) fn cholesky_in_place(a: &mut DMatrix<f64>) -> std::result::Result<(), usize> {
    let n = a.nrows();
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = max_diag * 1e-14 * n as f64;
    let mut k0 = 0;
    while k0 < n {
        let b = BLOCK.min(n - k0);
        {
            let data = a.as_mut_slice();
            for j in k0..k0 + b {
                let (left, right) = data.split_at_mut(j * n);
                let col_j = &mut right[..n];
                for p in k0..j {
                    let col_p = &left[p * n..(p + 1) * n];
                    let ljp = col_p[j];
                    if ljp != 0.0 {
                        for i in j..n {
                            col_j[i] -= ljp * col_p[i];
                        }
                    }
                }
                let d = col_j[j];
                if !(d > floor) || !d.is_finite() {
                    return Err(j);
                }
                let ljj = d.sqrt();
                col_j[j] = ljj;
                for v in &mut col_j[j + 1..n] {
                    *v /= ljj;
                }
            }
        }
        let rest = n - k0 - b;
        if rest > 0 {
            let panel = a.view((k0 + b, k0), (rest, b)).clone_owned();
            let mut trailing = a.view_mut((k0 + b, k0 + b), (rest, rest));
            trailing.gemm(-1.0, &panel, &panel.transpose(), 1.0);
        }
        k0 += b;
    }
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    Ok(())
}

/// Returns `W` (`L × M`) minimizing `λ‖W‖² + μ/2 ‖Z − WΦ‖²`.
pub fn solve_weights(
    cache: &mut GramCache,
    phi: &DMatrix<f64>,
    z: &DMatrix<f64>,
    lambda: f64,
    mu: f64,
) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(mu > 0.0) {
        return Err(invalid(format!("mu must be > 0, got {mu}")));
    }
    if phi.nrows() != cache.gram.nrows() || phi.ncols() != z.ncols() {
        return Err(invalid(format!(
            "shape mismatch: Φ {}x{}, Z {}x{}, Gram {}",
            phi.nrows(),
            phi.ncols(),
            z.nrows(),
            z.ncols(),
            cache.gram.nrows()
        )));
    }
    cache.ensure_factor(2.0 * lambda / mu)?;
    let rhs = phi * z.transpose();
    Ok(cache.solve(&rhs)?.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = crate::rng::stream(seed, 1000);
        DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
    }

    // Independent evaluation of λ‖W‖² + μ/2 ‖Z − WΦ‖² with explicit loops.
    fn block_objective(w: &DMatrix<f64>, phi: &DMatrix<f64>, z: &DMatrix<f64>, lambda: f64, mu: f64) -> f64 {
        let mut reg = 0.0;
        for v in w.iter() {
            reg += v * v;
        }
        let mut fit = 0.0;
        for n in 0..phi.ncols() {
            for l in 0..w.nrows() {
                let mut pred = 0.0;
                for m in 0..phi.nrows() {
                    pred += w[(l, m)] * phi[(m, n)];
                }
                fit += (z[(l, n)] - pred).powi(2);
            }
        }
        lambda * reg + 0.5 * mu * fit
    }

    #[test]
    fn gram_of_identity_and_single_column() {
        let g = build_gram(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(g.gram(), &DMatrix::identity(4, 4));

        let v = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let g = build_gram(&v).unwrap();
        assert_eq!(g.gram(), &(&v * v.transpose()));
    }

    #[test]
    fn gram_matches_triple_loop() {
        let phi = random(5, 7, 3);
        let g = build_gram(&phi).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for n in 0..7 {
                    s += phi[(i, n)] * phi[(j, n)];
                }
                assert!((g.gram()[(i, j)] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gram_rejects_non_finite() {
        let mut phi = random(3, 4, 0);
        phi[(1, 2)] = f64::NAN;
        assert!(matches!(build_gram(&phi), Err(Error::Numeric(_))));
    }

    #[test]
    fn blocked_cholesky_reconstructs() {
        // larger than one block to exercise the trailing update
        let phi = random(250, 300, 8);
        let mut g = build_gram(&phi).unwrap();
        g.ensure_factor(0.3).unwrap();
        let l = g.factor().unwrap();
        let mut target = g.gram().clone();
        for i in 0..250 {
            target[(i, i)] += 0.3;
        }
        let diff = (l * l.transpose() - &target).abs().max();
        assert!(diff <= 1e-8 * target.abs().max(), "{diff}");
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let phi = random(5, 12, 1);
        let mut g = build_gram(&phi).unwrap();
        let w = solve_weights(&mut g, &phi, &DMatrix::zeros(2, 12), 0.1, 2.0).unwrap();
        assert_eq!(w, DMatrix::zeros(2, 5));
    }

    #[test]
    fn interpolates_with_square_phi_and_no_ridge() {
        let phi = random(6, 6, 2) + DMatrix::identity(6, 6) * 3.0;
        let z = random(3, 6, 4);
        let mut g = build_gram(&phi).unwrap();
        let w = solve_weights(&mut g, &phi, &z, 0.0, 2.0).unwrap();
        assert!((&w * &phi - &z).abs().max() < 1e-10);
    }

    #[test]
    fn finite_difference_gradient_vanishes() {
        let (l, m, n, lambda, mu) = (2, 5, 20, 0.1, 2.0);
        let phi = random(m, n, 5);
        let z = random(l, n, 6);
        let mut g = build_gram(&phi).unwrap();
        let w = solve_weights(&mut g, &phi, &z, lambda, mu).unwrap();
        let h = 1e-6;
        let mut max_grad: f64 = 0.0;
        for i in 0..l {
            for j in 0..m {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[(i, j)] += h;
                wm[(i, j)] -= h;
                let d = (block_objective(&wp, &phi, &z, lambda, mu)
                    - block_objective(&wm, &phi, &z, lambda, mu))
                    / (2.0 * h);
                max_grad = max_grad.max(d.abs());
            }
        }
        let scale = block_objective(&w, &phi, &z, lambda, mu);
        assert!(max_grad <= 1e-5 * (1.0 + scale), "{max_grad}");
    }

    #[test]
    fn normal_equation_residual_and_convexity() {
        let phi = random(8, 40, 11);
        let z = random(3, 40, 12);
        let (lambda, mu) = (0.05, 3.0);
        let mut g = build_gram(&phi).unwrap();
        let w = solve_weights(&mut g, &phi, &z, lambda, mu).unwrap();

        let tau = 2.0 * lambda / mu;
        let shifted = g.gram() + DMatrix::identity(8, 8) * tau;
        let rhs = &phi * z.transpose();
        let resid = (&shifted * w.transpose() - &rhs).abs().max();
        assert!(resid <= 1e-8 * (1.0 + rhs.abs().max()));

        let base = block_objective(&w, &phi, &z, lambda, mu);
        for s in 0..100 {
            let mut dir = random(3, 8, 100 + s);
            dir /= dir.norm();
            let perturbed = block_objective(&(&w + dir * 1e-3), &phi, &z, lambda, mu);
            assert!(perturbed >= base);
        }
    }

    #[test]
    fn factorization_reused_until_shift_changes() {
        let phi = random(4, 10, 0);
        let z = random(2, 10, 1);
        let mut g = build_gram(&phi).unwrap();
        solve_weights(&mut g, &phi, &z, 0.1, 2.0).unwrap();
        solve_weights(&mut g, &phi, &z, 0.1, 2.0).unwrap();
        assert_eq!(g.factorizations(), 1);
        solve_weights(&mut g, &phi, &z, 0.1, 3.0).unwrap();
        assert_eq!(g.factorizations(), 2);
    }

    #[test]
    fn singular_gram_without_ridge_is_an_error() {
        let phi = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let mut g = build_gram(&phi).unwrap();
        let err = solve_weights(&mut g, &phi, &DMatrix::zeros(1, 3), 0.0, 2.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("lambda")));
        // a ridge makes it solvable
        assert!(solve_weights(&mut g, &phi, &DMatrix::zeros(1, 3), 1e-3, 2.0).is_ok());
    }
}
