//! The Z-step: for each training point, the auxiliary coordinate `z` and
//! slacks `ξ` minimizing
//!
//! ```text
//! ‖z − F(x)‖² + Σ_k c_k ξ_k   s.t.  y_k (w_kᵀz + b_k) ≥ 1 − ξ_k,  ξ_k ≥ 0
//! ```
//!
//! with `c_k = 2 C_k / μ` (the per-point terms of the penalty objective
//! divided by `μ/2`). Stationarity gives `z = F(x) + ½ Σ_k λ_k y_k w_k`,
//! so `z` moves from `F(x)` along the machines' normals. One machine has a
//! closed form with three cases; several machines are solved through the
//! `K`-dimensional box-constrained dual.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linsvm::OvaSvm;

/// Which bound a machine's multiplier `λ_k` ended at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZCase {
    /// `λ = 0`: `F(x)` already has margin ≥ 1 for this machine.
    OnCorrectSide,
    /// `0 < λ < c`: `z` lands exactly on the margin hyperplane.
    ProjectedToMargin,
    /// `λ = c`: the move is capped and a positive slack remains.
    Capped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZResult {
    pub z: DVector<f64>,
    pub xi: Vec<f64>,
    pub cases: Vec<ZCase>,
    /// Multipliers of the margin constraints (`λ₁` per machine).
    pub multipliers: Vec<f64>,
    pub converged: bool,
    /// Dual objective after each coordinate-ascent sweep (multiclass only).
    pub dual_trace: Vec<f64>,
}

impl ZResult {
    /// `‖z − F(x)‖² + Σ c_k ξ_k`.
    pub fn objective(&self, fx: &[f64], c: &[f64]) -> f64 {
        let dist: f64 = self.z.iter().zip(fx).map(|(a, b)| (a - b) * (a - b)).sum();
        dist + self.xi.iter().zip(c).map(|(x, ck)| x * ck).sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn case_of(lambda: f64, c: f64) -> ZCase {
    if lambda <= 0.0 {
        ZCase::OnCorrectSide
    } else if lambda >= c {
        ZCase::Capped
    } else {
        ZCase::ProjectedToMargin
    }
}

/// Closed-form Z-step for a single machine.
pub fn z_binary(fx: &[f64], y: f64, w: &[f64], b: f64, c: f64) -> ZResult {
    let margin = y * (dot(w, fx) + b);
    let ww = dot(w, w);
    let (lambda, case) = if margin >= 1.0 {
        (0.0, ZCase::OnCorrectSide)
    } else if ww < 1e-30 {
        // the constraint no longer depends on z
        (c, ZCase::Capped)
    } else {
        let free = 2.0 * (1.0 - margin) / ww;
        if free < c {
            (free, ZCase::ProjectedToMargin)
        } else {
            (c, ZCase::Capped)
        }
    };
    let z = if lambda > 0.0 && ww >= 1e-30 {
        let step = 0.5 * lambda * y;
        DVector::from_iterator(fx.len(), fx.iter().zip(w).map(|(f, wi)| f + step * wi))
    } else {
        DVector::from_column_slice(fx)
    };
    let xi = (1.0 - y * (dot(w, z.as_slice()) + b)).max(0.0);
    ZResult {
        z,
        xi: vec![xi],
        cases: vec![case],
        multipliers: vec![lambda],
        converged: true,
        dual_trace: Vec::new(),
    }
}

/// The dual data shared by the multiclass solver and the oracle.
struct Dual {
    gram: DMatrix<f64>,
    r: Vec<f64>,
    /// Signed normals `y_k w_k`, one column per machine.
    normals: DMatrix<f64>,
}

fn check_inputs(fx: &[f64], ova: &OvaSvm, targets: &[f64], c: &[f64]) -> Result<()> {
    let k = ova.class_count();
    if k == 0 {
        return Err(invalid("need at least one machine"));
    }
    if targets.len() != k || c.len() != k {
        return Err(invalid(format!(
            "{k} machines but {} targets and {} penalties",
            targets.len(),
            c.len()
        )));
    }
    if ova.machines.iter().any(|m| m.w.len() != fx.len()) {
        return Err(invalid("machine dimension differs from the point"));
    }
    if c.iter().any(|&ck| !(ck > 0.0)) {
        return Err(invalid("penalties must be positive"));
    }
    if targets.iter().any(|&t| t != 1.0 && t != -1.0) {
        return Err(invalid("targets must be +1 or -1"));
    }
    Ok(())
}

fn dual_data(fx: &[f64], ova: &OvaSvm, targets: &[f64]) -> Dual {
    let k = ova.class_count();
    let l = fx.len();
    let normals = DMatrix::from_fn(l, k, |i, j| targets[j] * ova.machines[j].w[i]);
    let gram = normals.transpose() * &normals;
    let r = ova
        .machines
        .iter()
        .zip(targets)
        .map(|(m, &y)| 1.0 - y * m.decision(fx))
        .collect();
    Dual { gram, r, normals }
}

fn dual_value(d: &Dual, lambda: &[f64]) -> f64 {
    let lam = DVector::from_column_slice(lambda);
    -0.25 * lam.dot(&(&d.gram * &lam)) + dot(&d.r, lambda)
}

fn assemble(fx: &[f64], ova: &OvaSvm, targets: &[f64], d: &Dual, lambda: &[f64]) -> (DVector<f64>, Vec<f64>) {
    let mut z = DVector::from_column_slice(fx);
    for (j, &lj) in lambda.iter().enumerate() {
        if lj != 0.0 {
            z.axpy(0.5 * lj, &d.normals.column(j), 1.0);
        }
    }
    let xi = ova
        .machines
        .iter()
        .zip(targets)
        .map(|(m, &y)| (1.0 - y * m.decision(z.as_slice())).max(0.0))
        .collect();
    (z, xi)
}

/// Multipliers for a fixed pattern: bounds as the pattern says, free ones
/// solving their active margin equations (minimum-norm when singular).
fn solve_pattern(d: &Dual, c: &[f64], pattern: &[ZCase]) -> Option<Vec<f64>> {
    let k = pattern.len();
    let free: Vec<usize> = (0..k)
        .filter(|&j| pattern[j] == ZCase::ProjectedToMargin)
        .collect();
    let mut lambda: Vec<f64> = (0..k)
        .map(|j| if pattern[j] == ZCase::Capped { c[j] } else { 0.0 })
        .collect();
    if free.is_empty() {
        return Some(lambda);
    }
    let f = free.len();
    let g_ff = DMatrix::from_fn(f, f, |a, b| d.gram[(free[a], free[b])]);
    let rhs = DVector::from_fn(f, |a, _| {
        let j = free[a];
        2.0 * d.r[j]
            - (0..k)
                .filter(|i| !free.contains(i))
                .map(|i| d.gram[(j, i)] * lambda[i])
                .sum::<f64>()
    });
    let svd = g_ff.clone().svd(true, true);
    let sol = svd.solve(&rhs, 1e-12 * (1.0 + g_ff.amax())).ok()?;
    if (&g_ff * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
        return None;
    }
    for (a, &j) in free.iter().enumerate() {
        lambda[j] = sol[a];
    }
    Some(lambda)
}

/// Whether `(z, λ)` satisfies the KKT conditions implied by `pattern`.
fn pattern_consistent(
    ova: &OvaSvm,
    targets: &[f64],
    c: &[f64],
    pattern: &[ZCase],
    lambda: &[f64],
    z: &DVector<f64>,
    slack: f64,
) -> bool {
    (0..pattern.len()).all(|j| {
        let m = targets[j] * ova.machines[j].decision(z.as_slice());
        match pattern[j] {
            ZCase::OnCorrectSide => m >= 1.0 - slack,
            ZCase::ProjectedToMargin => {
                lambda[j] >= -slack * c[j] && lambda[j] <= c[j] * (1.0 + 1e-12) + slack
            }
            ZCase::Capped => m <= 1.0 + slack,
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn gap_closed(
    fx: &[f64],
    ova: &OvaSvm,
    targets: &[f64],
    c: &[f64],
    d: &Dual,
    lambda: &[f64],
    dual: f64,
    tol: f64,
) -> bool {
    let (z, xi) = assemble(fx, ova, targets, d, lambda);
    let primal = (&z - DVector::from_column_slice(fx)).norm_squared()
        + xi.iter().zip(c).map(|(x, ck)| x * ck).sum::<f64>();
    primal - dual <= tol * (1.0 + primal.abs())
}

/// Exact solve of the dual box QP by a primal active-set method on
/// `q(λ) = ¼λᵀGλ − rᵀλ`, started from `start`.
///
/// On the free face a Newton step is taken through the pseudo-inverse; if
/// the gradient has a component in the null space of `G` (several margins
/// active in too few dimensions) the step instead follows that component,
/// along which `q` decreases linearly, to the nearest bound. Every step
/// decreases `q`. Returns `None` if the iteration cap is reached.
fn active_set(d: &Dual, c: &[f64], start: &[f64]) -> Option<Vec<f64>> {
    let k = start.len();
    let mut lambda: Vec<f64> = start.iter().zip(c).map(|(l, &ck)| l.clamp(0.0, ck)).collect();
    // 0: at lower bound, 1: free, 2: at upper bound
    let mut state: Vec<u8> = lambda
        .iter()
        .zip(c)
        .map(|(&l, &ck)| if l <= 0.0 { 0 } else if l >= ck { 2 } else { 1 })
        .collect();
    let scale = 1.0
        + d.r.iter().fold(0.0f64, |m, r| m.max(r.abs()))
        + d.gram.amax() * c.iter().fold(0.0f64, |m, &ck| m.max(ck));
    let gradient = |lambda: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|j| 0.5 * (0..k).map(|i| d.gram[(j, i)] * lambda[i]).sum::<f64>() - d.r[j])
            .collect()
    };
    for _ in 0..ACTIVE_SET_ITERS * (k + 1) {
        let free: Vec<usize> = (0..k).filter(|&j| state[j] == 1).collect();
        let g = gradient(&lambda);
        let mut moved = false;
        if !free.is_empty() {
            let f = free.len();
            let h = DMatrix::from_fn(f, f, |a, b| 0.5 * d.gram[(free[a], free[b])]);
            let gf = DVector::from_fn(f, |a, _| g[free[a]]);
            let eig = h.symmetric_eigen();
            let top = eig.eigenvalues.iter().fold(0.0f64, |m, &e| m.max(e));
            let cutoff = 1e-12 * top.max(1e-300);
            let mut null = DVector::zeros(f);
            let mut newton = DVector::zeros(f);
            for (i, &e) in eig.eigenvalues.iter().enumerate() {
                let v = eig.eigenvectors.column(i);
                let proj = v.dot(&gf);
                if e > cutoff {
                    newton.axpy(-proj / e, &v, 1.0);
                } else {
                    null.axpy(-proj, &v, 1.0);
                }
            }
            let (dir, unbounded) = if null.amax() > 1e-14 * scale {
                (null, true)
            } else {
                (newton, false)
            };
            // largest feasible step and the coordinate that blocks it
            let mut alpha = if unbounded { f64::INFINITY } else { 1.0 };
            let mut block = None;
            for (a, &j) in free.iter().enumerate() {
                let step = if dir[a] > 0.0 {
                    (c[j] - lambda[j]) / dir[a]
                } else if dir[a] < 0.0 {
                    -lambda[j] / dir[a]
                } else {
                    continue;
                };
                if step < alpha {
                    alpha = step;
                    block = Some((j, dir[a] > 0.0));
                }
            }
            if !alpha.is_finite() {
                return None;
            }
            if alpha > 0.0 && dir.amax() > 0.0 {
                for (a, &j) in free.iter().enumerate() {
                    lambda[j] = (lambda[j] + alpha * dir[a]).clamp(0.0, c[j]);
                }
                moved = true;
            }
            if let Some((j, upper)) = block {
                lambda[j] = if upper { c[j] } else { 0.0 };
                state[j] = if upper { 2 } else { 0 };
                continue;
            }
            if unbounded {
                continue;
            }
        }
        let g = if moved { gradient(&lambda) } else { g };
        // release the bound multiplier whose gradient points most into the box
        let eps = 1e-12 * scale;
        let mut worst = None;
        let mut worst_val = eps;
        for j in 0..k {
            let pull = match state[j] {
                0 => -g[j],
                2 => g[j],
                _ => continue,
            };
            if pull > worst_val {
                worst_val = pull;
                worst = Some(j);
            }
        }
        match worst {
            Some(j) => state[j] = 1,
            None => return Some(lambda),
        }
    }
    None
}

/// Iteration cap of [`active_set`], per multiplier.
const ACTIVE_SET_ITERS: usize = 10;

/// Coordinate-ascent sweeps before the exact finish is tried, and between
/// retries if it fails.
const FINISH_EVERY: usize = 8;

/// Sweep cap for [`z_multiclass`].
pub const MAX_SWEEPS: usize = 10_000;

/// Multiclass Z-step by cyclic coordinate ascent on the dual
/// `max −¼λᵀGλ + rᵀλ` over `λ ∈ Π[0, c_k]`.
///
/// Stops when the primal-dual gap is at most `tol · (1 + primal)`; since
/// the primal is 1-strongly convex in `z` this bounds `‖z − z*‖² ≤ gap`.
///
/// When the active margins are degenerate (more active machines than
/// latent dimensions, as in the simplex layout) coordinate ascent crawls;
/// every few sweeps an exact active-set solve is started from the current
/// iterate and accepted if it does not lower the dual.
pub fn z_multiclass(
    fx: &[f64],
    ova: &OvaSvm,
    targets: &[f64],
    c: &[f64],
    tol: f64,
) -> Result<ZResult> {
    check_inputs(fx, ova, targets, c)?;
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    let k = ova.class_count();
    let d = dual_data(fx, ova, targets);
    let mut lambda = vec![0.0; k];
    let mut dual_trace = Vec::new();
    let mut converged = d.r.iter().all(|&r| r <= 0.0);

    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        for j in 0..k {
            let gjj = d.gram[(j, j)];
            let next = if gjj <= 1e-30 {
                if d.r[j] > 0.0 {
                    c[j]
                } else {
                    0.0
                }
            } else {
                let cross: f64 = (0..k)
                    .filter(|&i| i != j)
                    .map(|i| d.gram[(j, i)] * lambda[i])
                    .sum();
                ((2.0 * d.r[j] - cross) / gjj).clamp(0.0, c[j])
            };
            lambda[j] = next;
        }
        sweeps += 1;
        let dual = dual_value(&d, &lambda);
        dual_trace.push(dual);
        // z is unique even when λ is not, so the gap alone decides
        converged = gap_closed(fx, ova, targets, c, &d, &lambda, dual, tol);
        if !converged && sweeps % FINISH_EVERY == 0 {
            if let Some(exact) = active_set(&d, c, &lambda) {
                let value = dual_value(&d, &exact);
                if value >= dual {
                    lambda = exact;
                    dual_trace.push(value);
                    converged = gap_closed(fx, ova, targets, c, &d, &lambda, value, tol);
                }
            }
        }
    }

    let (z, xi) = assemble(fx, ova, targets, &d, &lambda);
    let cases = lambda.iter().zip(c).map(|(&l, &ck)| case_of(l, ck)).collect();
    Ok(ZResult {
        z,
        xi,
        cases,
        multipliers: lambda,
        converged,
        dual_trace,
    })
}

/// Largest `K` accepted by [`z_oracle`].
pub const ORACLE_MAX_MACHINES: usize = 12;

/// Exact Z-step by enumeration, for testing.
///
/// Every machine's multiplier is either at 0, at `c_k`, or free with its
/// margin constraint active. For each of the `3^K` patterns the free
/// multipliers solve the active equations; patterns satisfying all KKT
/// conditions are kept and the one with the least primal objective wins.
pub fn z_oracle(fx: &[f64], ova: &OvaSvm, targets: &[f64], c: &[f64]) -> Result<ZResult> {
    check_inputs(fx, ova, targets, c)?;
    let k = ova.class_count();
    if k > ORACLE_MAX_MACHINES {
        return Err(invalid(format!(
            "enumeration oracle supports at most {ORACLE_MAX_MACHINES} machines, got {k}"
        )));
    }
    let d = dual_data(fx, ova, targets);
    let scale = 1.0 + d.r.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let fx_vec = DVector::from_column_slice(fx);

    let mut best: Option<(f64, Vec<f64>, Vec<ZCase>)> = None;
    let mut fallback: Option<(f64, Vec<f64>, Vec<ZCase>)> = None;
    let patterns = 3usize.pow(k as u32);
    for code in 0..patterns {
        let mut pattern = Vec::with_capacity(k);
        let mut rest = code;
        for _ in 0..k {
            pattern.push(match rest % 3 {
                0 => ZCase::OnCorrectSide,
                1 => ZCase::ProjectedToMargin,
                _ => ZCase::Capped,
            });
            rest /= 3;
        }
        let Some(lambda) = solve_pattern(&d, c, &pattern) else {
            continue;
        };
        let (z, xi) = assemble(fx, ova, targets, &d, &lambda);
        let objective = (&z - &fx_vec).norm_squared()
            + xi.iter().zip(c).map(|(x, ck)| x * ck).sum::<f64>();
        let feasible = pattern_consistent(ova, targets, c, &pattern, &lambda, &z, 1e-9 * scale);
        let candidate = (objective, lambda, pattern);
        let slot = if feasible { &mut best } else { &mut fallback };
        if slot.as_ref().is_none_or(|(o, _, _)| objective < *o) {
            *slot = Some(candidate);
        }
    }
    let (_, mut lambda, _) = best
        .or(fallback)
        .expect("at least the all-zero pattern is evaluated");
    for (l, &ck) in lambda.iter_mut().zip(c) {
        *l = l.clamp(0.0, ck);
    }
    let (z, xi) = assemble(fx, ova, targets, &d, &lambda);
    let cases = lambda.iter().zip(c).map(|(&l, &ck)| case_of(l, ck)).collect();
    Ok(ZResult {
        z,
        xi,
        cases,
        multipliers: lambda,
        converged: true,
        dual_trace: Vec::new(),
    })
}

/// Worst violations of the Z-step KKT system at a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖z − F(x) − ½ Σ λ_k y_k w_k‖_∞`.
    pub stationarity: f64,
    /// `max_k max(|λ_k (m_k + ξ_k − 1)|, |(c_k − λ_k) ξ_k|)`.
    pub complementarity: f64,
    /// Largest violation of `m_k ≥ 1 − ξ_k`, `ξ_k ≥ 0`, `0 ≤ λ_k ≤ c_k`.
    pub feasibility: f64,
}

pub fn kkt_residuals(fx: &[f64], ova: &OvaSvm, targets: &[f64], c: &[f64], res: &ZResult) -> KktResiduals {
    let mut expected = DVector::from_column_slice(fx);
    for (j, m) in ova.machines.iter().enumerate() {
        expected.axpy(0.5 * res.multipliers[j] * targets[j], &m.w, 1.0);
    }
    let stationarity = (&res.z - expected).amax();
    let mut complementarity: f64 = 0.0;
    let mut feasibility: f64 = 0.0;
    for (j, m) in ova.machines.iter().enumerate() {
        let margin = targets[j] * m.decision(res.z.as_slice());
        let (lam, xi) = (res.multipliers[j], res.xi[j]);
        complementarity = complementarity
            .max((lam * (margin + xi - 1.0)).abs())
            .max(((c[j] - lam) * xi).abs());
        feasibility = feasibility
            .max(1.0 - xi - margin)
            .max(-xi)
            .max(-lam)
            .max(lam - c[j]);
    }
    KktResiduals {
        stationarity,
        complementarity,
        feasibility: feasibility.max(0.0),
    }
}
