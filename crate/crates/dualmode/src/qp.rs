//! Dense operator-splitting solver for the planners' convex subproblems:
//!
//! ```text
//! minimize   0.5 x' P x + q' x
//! subject to l <= A x <= u
//! ```
//!
//! ADMM with over-relaxation on a Ruiz-equilibrated copy of the problem;
//! the (P + sigma I + A' R A) system is factored once per solve and reused
//! every iteration, with R refreshed only when the primal/dual residual
//! ratio drifts far. At every residual check the solver also attempts a
//! polish step: it reads the active set off the multiplier signs, solves
//! that equality-constrained subproblem directly, and adopts the result
//! when it passes the same tolerance test. Termination checks the
//! residuals of the original, unscaled problem, so the tolerances keep
//! their meaning whatever the data magnitudes are. No randomness, no
//! wall-clock dependence: identical inputs give identical iterates, and
//! warm starts resume from a previous solution's primal/dual pair.
//! Residuals are always reported so callers can decide what "solved"
//! means for them.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Rows with `u - l` below this are treated as equalities and get a
/// stiffer penalty, mirroring common operator-splitting practice.
const EQUALITY_GAP: f64 = 1e-10;
const EQUALITY_RHO_SCALE: f64 = 1e3;
const RUIZ_ITERATIONS: usize = 10;

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct QpSettings {
    /// Absolute tolerance on both residual infinity norms.
    pub eps_abs: f64,
    /// Relative tolerance, scaled by the magnitude of the quantities each
    /// residual compares.
    pub eps_rel: f64,
    pub max_iterations: usize,
    /// Initial constraint penalty.
    pub rho: f64,
    /// Primal regularization; keeps the KKT system positive definite.
    pub sigma: f64,
    /// Over-relaxation in (1, 2).
    pub alpha: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-9,
            max_iterations: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Row multipliers; positive entries push against the upper bound,
    /// negative against the lower.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
}

impl QpProblem {
    fn validate(&self) -> Result<()> {
        let n = self.p.nrows();
        let m = self.a.nrows();
        if self.p.ncols() != n || self.q.len() != n || self.a.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "inconsistent qp dimensions: P {}x{}, q {}, A {}x{}",
                self.p.nrows(),
                self.p.ncols(),
                self.q.len(),
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.l.len() != m || self.u.len() != m {
            return Err(Error::InvalidArgument(format!(
                "bound lengths ({}, {}) do not match {m} rows",
                self.l.len(),
                self.u.len()
            )));
        }
        for i in 0..m {
            if !(self.l[i] <= self.u[i]) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has l {} > u {}",
                    self.l[i], self.u[i]
                )));
            }
        }
        let finite = self.p.iter().all(|v| v.is_finite())
            && self.q.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite qp data".into()));
        }
        Ok(())
    }
}

struct Kkt {
    chol: Cholesky<f64, Dyn>,
    rho_vec: DVector<f64>,
}

fn factor(p_sym: &DMatrix<f64>, a: &DMatrix<f64>, sigma: f64, rho: f64, is_eq: &[bool]) -> Result<Kkt> {
    let n = p_sym.nrows();
    let m = a.nrows();
    let rho_vec = DVector::from_fn(m, |i, _| {
        if is_eq[i] {
            rho * EQUALITY_RHO_SCALE
        } else {
            rho
        }
    });
    let mut kkt = p_sym.clone();
    for i in 0..n {
        kkt[(i, i)] += sigma;
    }
    // kkt += A' diag(rho) A
    for r in 0..m {
        let row = a.row(r);
        let w = rho_vec[r];
        for i in 0..n {
            let ai = row[i];
            if ai == 0.0 {
                continue;
            }
            for j in 0..n {
                kkt[(i, j)] += w * ai * row[j];
            }
        }
    }
    let chol = kkt
        .cholesky()
        .ok_or_else(|| Error::NumericFailure("qp kkt factorization failed".into()))?;
    Ok(Kkt { chol, rho_vec })
}

/// Diagonal scaling `x = D x~`, rows by `E`, cost by `c`; the scaled data
/// are `P~ = c D P D`, `q~ = c D q`, `A~ = E A D`, `l~ = E l`, `u~ = E u`,
/// and multipliers recover as `y = E y~ / c`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

/// Candidate from one polish attempt, still in scaled coordinates.
struct Polished {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
}

/// Keep only an independent subset of the candidate rows, equalities and
/// heavy rows first, so the polish KKT system stays well posed. A dropped
/// dependent row is either consistent with the kept ones (then the
/// solution pins it anyway) or a wrong active-set guess (then the
/// caller's residual test rejects the polish).
fn independent_subset(
    candidate: &[(usize, f64, i8)],
    a: &DMatrix<f64>,
    weight: &[f64],
    n: usize,
) -> Vec<(usize, f64, i8)> {
    let mut order: Vec<usize> = (0..candidate.len()).collect();
    order.sort_by(|&s, &t| {
        let (is_, _, ks) = candidate[s];
        let (it, _, kt) = candidate[t];
        ((kt == 0) as i32)
            .cmp(&((ks == 0) as i32))
            .then_with(|| weight[it].total_cmp(&weight[is_]))
            .then_with(|| is_.cmp(&it))
    });
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = vec![false; candidate.len()];
    for &t in &order {
        let mut v = a.row(candidate[t].0).transpose().into_owned();
        let original = v.norm();
        if original <= 1e-12 {
            continue;
        }
        for b in &basis {
            let c = v.dot(b);
            v -= c * b;
        }
        let remaining = v.norm();
        if remaining > 1e-8 * original {
            basis.push(v / remaining);
            keep[t] = true;
        }
        if basis.len() == n {
            break;
        }
    }
    candidate
        .iter()
        .enumerate()
        .filter_map(|(t, row)| if keep[t] { Some(*row) } else { None })
        .collect()
}

/// Solve the equality-constrained QP on the active set implied by the
/// multiplier signs (rows pushing down are pinned to `l`, rows pushing up
/// to `u`, equality rows always pinned), via a regularized KKT
/// factorization with iterative refinement toward the unregularized
/// system. The guess is then repaired for a bounded number of rounds:
/// rows whose multiplier comes back with the wrong sign are released and
/// rows the trial point violates are pinned at the violated bound.
fn polish(
    p_sym: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    is_eq: &[bool],
    y: &DVector<f64>,
) -> Option<Polished> {
    let n = p_sym.nrows();
    let m = a.nrows();
    let mut candidate: Vec<(usize, f64, i8)> = Vec::new();
    // Rows pinned after a violation outrank the original sign guesses in
    // the independence pruning, otherwise a dependent violated row would
    // be re-dropped every round.
    let mut weight: Vec<f64> = y.iter().map(|v| v.abs()).collect();
    for i in 0..m {
        if is_eq[i] {
            candidate.push((i, l[i], 0));
        } else if y[i] < 0.0 && l[i].is_finite() {
            candidate.push((i, l[i], -1));
        } else if y[i] > 0.0 && u[i].is_finite() {
            candidate.push((i, u[i], 1));
        }
    }

    let mut trace: Vec<String> = Vec::new();
    for _ in 0..10 {
        let active = independent_subset(&candidate, a, &weight, n);
        let k = active.len();
        let dim = n + k;
        let delta = 1e-9;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(p_sym);
        for i in 0..n {
            kkt[(i, i)] += delta;
        }
        for (r, (row, _, _)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(*row, j)];
                kkt[(j, n + r)] = a[(*row, j)];
            }
            kkt[(n + r, n + r)] = -delta;
        }
        let mut rhs = DVector::<f64>::zeros(dim);
        for j in 0..n {
            rhs[j] = -q[j];
        }
        for (r, (_, bound, _)) in active.iter().enumerate() {
            rhs[n + r] = *bound;
        }
        let lu = kkt.clone().lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..2 {
            // Refine against the unregularized system the factorization
            // only approximates.
            let mut resid = rhs.clone();
            let kv = &kkt * &sol;
            for i in 0..n {
                resid[i] -= kv[i] - delta * sol[i];
            }
            for i in n..dim {
                resid[i] -= kv[i] + delta * sol[i];
            }
            let correction = lu.solve(&resid)?;
            sol += correction;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let wrong: Vec<usize> = active
            .iter()
            .enumerate()
            .filter_map(|(r, (row, _, kind))| {
                let nu = sol[n + r];
                if (*kind > 0 && nu < -1e-9) || (*kind < 0 && nu > 1e-9) {
                    Some(*row)
                } else {
                    None
                }
            })
            .collect();
        let x = sol.rows(0, n).into_owned();
        let ax = a * &x;
        let mut in_active = vec![false; m];
        for (row, _, _) in &active {
            in_active[*row] = true;
        }
        let mut additions: Vec<(usize, f64, i8)> = Vec::new();
        for i in 0..m {
            if in_active[i] {
                continue;
            }
            let tol = 1e-10 * (1.0 + ax[i].abs());
            if l[i].is_finite() && l[i] - ax[i] > tol {
                additions.push((i, l[i], -1));
                weight[i] = 1e30 + (l[i] - ax[i]);
            } else if u[i].is_finite() && ax[i] - u[i] > tol {
                additions.push((i, u[i], 1));
                weight[i] = 1e30 + (ax[i] - u[i]);
            }
        }
        if wrong.is_empty() && additions.is_empty() {
            let mut y_pol = DVector::<f64>::zeros(m);
            for (r, (row, _, _)) in active.iter().enumerate() {
                y_pol[*row] = sol[n + r];
            }
            let z = ax.zip_zip_map(l, u, |v, lo, hi| v.clamp(lo, hi));
            return Some(Polished { x, y: y_pol, z });
        }
        trace.push(format!(
            "k={k} wrong={:?} add={:?}",
            wrong,
            additions.iter().map(|(r, _, s)| (*r, *s)).collect::<Vec<_>>()
        ));
        candidate = active
            .into_iter()
            .filter(|(row, _, _)| !wrong.contains(row))
            .chain(additions)
            .collect();
    }
    eprintln!("polish exhausted: {}", trace.join(" | "));
    None
}

/// Modified Ruiz equilibration: alternately normalize the infinity norms
/// of the stacked [P; A] columns and the A rows, then normalize the cost.
/// Factors are clamped so degenerate (all-zero) rows and columns pass
/// through untouched.
fn equilibrate(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, Scaling) {
    let n = p.nrows();
    let m = a.nrows();
    let mut ps = p.clone();
    let mut qs = q.clone();
    let mut as_ = a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;

    let norm_factor = |norm: f64| 1.0 / norm.clamp(1e-8, 1e8).sqrt();
    for _ in 0..RUIZ_ITERATIONS {
        let mut delta = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut col: f64 = 0.0;
            for i in 0..n {
                col = col.max(ps[(i, j)].abs());
            }
            for r in 0..m {
                col = col.max(as_[(r, j)].abs());
            }
            if col > 0.0 {
                delta[j] = norm_factor(col);
            }
        }
        for i in 0..n {
            for j in 0..n {
                ps[(i, j)] *= delta[i] * delta[j];
            }
            qs[i] *= delta[i];
            d[i] *= delta[i];
        }
        for r in 0..m {
            let mut row: f64 = 0.0;
            for j in 0..n {
                as_[(r, j)] *= delta[j];
                row = row.max(as_[(r, j)].abs());
            }
            if row > 0.0 {
                let er = norm_factor(row);
                for j in 0..n {
                    as_[(r, j)] *= er;
                }
                e[r] *= er;
            }
        }
        // Cost normalization keeps rho meaningful against the curvature.
        let mut mean_col = 0.0;
        for j in 0..n {
            let mut col: f64 = 0.0;
            for i in 0..n {
                col = col.max(ps[(i, j)].abs());
            }
            mean_col += col / n as f64;
        }
        let cost_norm = mean_col.max(qs.amax());
        if cost_norm > 1e-12 {
            let gamma = 1.0 / cost_norm.clamp(1e-8, 1e8);
            ps *= gamma;
            qs *= gamma;
            c *= gamma;
        }
    }
    (ps, qs, as_, Scaling { d, e, c })
}

/// Solve the QP, optionally warm-starting from a previous solution of a
/// nearby problem. Always returns the final iterate with its residuals;
/// `converged` says whether `eps_abs` was reached.
pub fn solve(
    problem: &QpProblem,
    warm: Option<&QpSolution>,
    settings: &QpSettings,
) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.p.nrows();
    let m = problem.a.nrows();
    let p_orig = 0.5 * (&problem.p + problem.p.transpose());
    let at_orig = problem.a.transpose();
    let is_eq: Vec<bool> = (0..m)
        .map(|i| problem.u[i] - problem.l[i] < EQUALITY_GAP)
        .collect();

    let (p_sym, q, a, scaling) = equilibrate(&p_orig, &problem.q, &problem.a);
    let a_t = a.transpose();
    let l = problem.l.zip_map(&scaling.e, |v, s| v * s);
    let u = problem.u.zip_map(&scaling.e, |v, s| v * s);

    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some(w) = warm {
        if w.x.len() == n && w.y.len() == m {
            x = w.x.zip_map(&scaling.d, |v, s| v / s);
            y = w.y.zip_map(&scaling.e, |v, s| scaling.c * v / s);
        }
    }
    let mut z = (&a * &x).zip_zip_map(&l, &u, |v, lo, hi| v.clamp(lo, hi));

    let mut rho = settings.rho;
    let mut kkt = factor(&p_sym, &a, settings.sigma, rho, &is_eq)?;

    let mut primal_residual = f64::INFINITY;
    let mut dual_residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    // Polish attempts back off geometrically while they keep failing, so
    // a problem the active-set guess cannot crack does not pay the KKT
    // factorization cost at every residual check.
    let mut next_polish = 25;
    let mut polish_failures: u32 = 0;

    // Residuals and magnitudes of the original, unscaled problem, for a
    // scaled-space iterate.
    let residuals = |xs: &DVector<f64>, ys: &DVector<f64>, zs: &DVector<f64>| {
        let x_u = xs.zip_map(&scaling.d, |v, s| v * s);
        let y_u = ys.zip_map(&scaling.e, |v, s| v * s / scaling.c);
        let z_u = zs.zip_map(&scaling.e, |v, s| v / s);
        let ax = &problem.a * &x_u;
        let px = &p_orig * &x_u;
        let aty = &at_orig * &y_u;
        let rp = if m > 0 { (&ax - &z_u).amax() } else { 0.0 };
        let rd = (&px + &problem.q + &aty).amax();
        let prim_scale = if m > 0 { ax.amax().max(z_u.amax()) } else { 0.0 };
        let dual_scale = px
            .amax()
            .max(problem.q.amax())
            .max(if m > 0 { aty.amax() } else { 0.0 });
        (rp, rd, prim_scale, dual_scale)
    };

    // Iteration workspaces; the hot loop must not allocate.
    let mut work_m = DVector::zeros(m);
    let mut x_tilde = DVector::zeros(n);

    while iterations < settings.max_iterations {
        iterations += 1;

        for i in 0..m {
            work_m[i] = kkt.rho_vec[i] * z[i] - y[i];
        }
        x_tilde.copy_from(&q);
        x_tilde.neg_mut();
        x_tilde.axpy(settings.sigma, &x, 1.0);
        x_tilde.gemv(1.0, &a_t, &work_m, 1.0);
        kkt.chol.solve_mut(&mut x_tilde);
        work_m.gemv(1.0, &a, &x_tilde, 0.0);

        let alpha = settings.alpha;
        x.axpy(alpha, &x_tilde, 1.0 - alpha);
        for i in 0..m {
            let relaxed = alpha * work_m[i] + (1.0 - alpha) * z[i];
            let next = (relaxed + y[i] / kkt.rho_vec[i]).clamp(l[i], u[i]);
            y[i] += kkt.rho_vec[i] * (relaxed - next);
            z[i] = next;
        }

        if iterations % 25 == 0 || iterations == settings.max_iterations {
            let last = iterations == settings.max_iterations;
            let (rp, rd, prim_scale, dual_scale) = residuals(&x, &y, &z);
            primal_residual = rp;
            dual_residual = rd;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure(format!(
                    "qp iterates diverged at iteration {iterations} (primal {primal_residual:.3e}, dual {dual_residual:.3e})"
                )));
            }
            converged = rp <= settings.eps_abs + settings.eps_rel * prim_scale
                && rd <= settings.eps_abs + settings.eps_rel * dual_scale;
            if iterations >= next_polish || last || converged {
                let mut polish_ok = false;
                if let Some(pol) = polish(&p_sym, &q, &a, &l, &u, &is_eq, &y) {
                    let (pp, pd, pps, pds) = residuals(&pol.x, &pol.y, &pol.z);
                    polish_ok = pp <= settings.eps_abs + settings.eps_rel * pps
                        && pd <= settings.eps_abs + settings.eps_rel * pds;
                    eprintln!(
                        "polish candidate it {iterations} pp {pp:.3e} pd {pd:.3e} vs rp {rp:.3e} rd {rd:.3e} ok {polish_ok}"
                    );
                    let adopt = if polish_ok {
                        !converged || (pp <= rp && pd <= rd)
                    } else {
                        (converged || last) && pp <= rp && pd <= rd
                    };
                    if adopt {
                        x = pol.x;
                        y = pol.y;
                        z = pol.z;
                        primal_residual = pp;
                        dual_residual = pd;
                        converged = converged || polish_ok;
                    }
                }
                if polish_ok {
                    polish_failures = 0;
                    next_polish = iterations + 25;
                } else {
                    polish_failures += 1;
                    next_polish = iterations + (25usize << polish_failures.min(5));
                }
            }
            if converged {
                break;
            }
            // Rebalance the penalty when the scale-normalized residuals
            // drift apart.
            if iterations % 200 == 0 && m > 0 {
                let rel_prim = rp / prim_scale.max(1e-30);
                let rel_dual = rd / dual_scale.max(1e-30);
                let ratio = (rel_prim / rel_dual.max(1e-30)).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    rho = (rho * ratio).clamp(1e-6, 1e6);
                    kkt = factor(&p_sym, &a, settings.sigma, rho, &is_eq)?;
                }
            }
        }
    }

    Ok(QpSolution {
        x: x.zip_map(&scaling.d, |v, s| v * s),
        y: y.zip_map(&scaling.e, |v, s| v * s / scaling.c),
        iterations,
        primal_residual,
        dual_residual,
        converged,
    })
}
