#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use macsvm::linsvm::{BinarySvm, OvaSvm};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (r.gen_range(lo.ln()..hi.ln())).exp()
}

pub fn gauss_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller
            let u: f64 = r.gen_range(f64::EPSILON..1.0);
            let v: f64 = r.gen_range(0.0..1.0);
            scale * (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect()
}

pub fn random_ova(r: &mut ChaCha8Rng, k: usize, l: usize) -> OvaSvm {
    let machines = (0..k)
        .map(|_| BinarySvm {
            w: DVector::from_vec(gauss_vec(r, l, 1.0)),
            b: r.gen_range(-1.0..1.0),
            c: 1.0,
        })
        .collect();
    OvaSvm { machines }
}

/// A separable binary problem in `l` dimensions: points in the unit cube
/// at least `gap` away from a random hyperplane. Columns are points.
pub fn separable_instance(r: &mut ChaCha8Rng, l: usize, n: usize, gap: f64) -> (DMatrix<f64>, Vec<f64>) {
    let normal = DVector::from_vec(gauss_vec(r, l, 1.0)).normalize();
    let offset = r.gen_range(-0.3..0.3);
    loop {
        let mut z = DMatrix::zeros(l, n);
        let mut y = Vec::with_capacity(n);
        let mut filled = 0;
        while filled < n {
            let p = DVector::from_fn(l, |_, _| r.gen_range(-1.0..1.0));
            let s = normal.dot(&p) + offset;
            if s.abs() < gap {
                continue;
            }
            z.set_column(filled, &p);
            y.push(s.signum());
            filled += 1;
        }
        if y.contains(&1.0) && y.contains(&-1.0) {
            return (z, y);
        }
    }
}

/// Hard-margin SVM with the bias regularized, solved exactly by enumerating
/// candidate support sets.
///
/// With `z̃ = (z, 1)` the problem is `min ½‖u‖²` s.t. `y_i uᵀz̃_i ≥ 1`.
/// The optimum has at most `dim z̃` support vectors; for each subset `S` the
/// equality-constrained solution `u = Z̃_S (Z̃_Sᵀ Z̃_S)⁻¹ y_S` is kept when it
/// satisfies every constraint and its multipliers are nonnegative.
/// Returns `(w, b, multipliers)`.
pub fn hard_margin_oracle(z: &DMatrix<f64>, y: &[f64]) -> (DVector<f64>, f64, Vec<f64>) {
    let (l, n) = z.shape();
    let d = l + 1;
    let aug = |i: usize| {
        let mut v = DVector::zeros(d);
        v.rows_mut(0, l).copy_from(&z.column(i));
        v[l] = 1.0;
        v
    };
    let points: Vec<DVector<f64>> = (0..n).map(aug).collect();
    let mut best: Option<(f64, DVector<f64>, Vec<f64>)> = None;
    let mut subset = Vec::new();
    fn visit(
        start: usize,
        n: usize,
        max: usize,
        subset: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]),
    ) {
        if !subset.is_empty() {
            f(subset);
        }
        if subset.len() == max {
            return;
        }
        for i in start..n {
            subset.push(i);
            visit(i + 1, n, max, subset, f);
            subset.pop();
        }
    }
    let mut consider = |s: &[usize]| {
        let m = s.len();
        let g = DMatrix::from_fn(m, m, |a, b| points[s[a]].dot(&points[s[b]]));
        let ys = DVector::from_fn(m, |a, _| y[s[a]]);
        let Some(chol) = g.clone().cholesky() else { return };
        // y_i uᵀz̃_i = 1 ⇔ uᵀz̃_i = y_i
        let coef = chol.solve(&ys);
        if (&g * &coef - &ys).amax() > 1e-9 {
            return;
        }
        // u = Σ α_i y_i z̃_i ⇒ α_i = coef_i y_i
        let alpha: Vec<f64> = coef.iter().zip(s).map(|(c, &i)| c * y[i]).collect();
        if alpha.iter().any(|&a| a < -1e-12) {
            return;
        }
        let mut u = DVector::zeros(d);
        for (a, &i) in coef.iter().zip(s) {
            u.axpy(*a, &points[i], 1.0);
        }
        if (0..n).any(|i| y[i] * u.dot(&points[i]) < 1.0 - 1e-9) {
            return;
        }
        let norm = u.norm_squared();
        if best.as_ref().is_none_or(|(b, _, _)| norm < *b) {
            let mut full = vec![0.0; n];
            for (a, &i) in alpha.iter().zip(s) {
                full[i] = *a;
            }
            best = Some((norm, u, full));
        }
    };
    visit(0, n, d, &mut subset, &mut consider);
    let (_, u, alpha) = best.expect("separable data has a hard-margin solution");
    (u.rows(0, l).into_owned(), u[l], alpha)
}

/// One-vs-all targets of a point of class `y`.
pub fn targets(y: usize, k: usize) -> Vec<f64> {
    (0..k).map(|j| if j == y { 1.0 } else { -1.0 }).collect()
}
