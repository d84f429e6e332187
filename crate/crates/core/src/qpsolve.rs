//! Operator-splitting (ADMM) solver for `min p' Q p  s.t.  l <= A p <= u`,
//! and a dense KKT solve for equality-only problems used as an oracle.
//!
//! The leading `n_eq` equality rows are eliminated exactly through a
//! null-space parameterization `p = p0 + N x`. The remaining interval rows are
//! handled with the OSQP iteration: Ruiz equilibration, a single cached
//! Cholesky factor of `P + sigma I + A' R A` with fixed penalty, over-relaxation,
//! and a final polish that re-solves the KKT system on the active set.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qpbuild::QpProblem;

const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const EQUALITY_RHO_FACTOR: f64 = 1e3;
const POLISH_DELTA: f64 = 1e-9;
const POLISH_REFINE_ITERS: usize = 8;
const POLISH_ROUNDS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solver settings: {0}")]
    Settings(&'static str),
    #[error("problem dimensions are inconsistent")]
    Dimensions,
    #[error("factorization failed")]
    Factorization,
    #[error("singular KKT system")]
    SingularKkt,
    #[error("equality constraints are rank deficient")]
    RankDeficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iters: 4000,
            check_interval: 25,
            scaling_iters: 10,
            polish: true,
        }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<(), SolveError> {
        let positive = [self.rho, self.sigma, self.eps_abs, self.eps_rel];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SolveError::Settings("rho, sigma and tolerances must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(SolveError::Settings("alpha must lie in (0, 2)"));
        }
        if self.max_iters == 0 || self.check_interval == 0 {
            return Err(SolveError::Settings("iteration counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    MaxIters,
    PrimalInfeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Solved => "solved",
            SolveStatus::MaxIters => "max_iters",
            SolveStatus::PrimalInfeasible => "primal_infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub p: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub solve_time: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

/// Interval-constrained QP in OSQP form: `min 1/2 x'Px + q'x, l <= Ax <= u`.
struct IntervalQp {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

/// Equality rows eliminated as `p = particular + basis * x`.
struct Reduction {
    particular: DVector<f64>,
    basis: DMatrix<f64>,
}

/// Null-space parameterization of `A_eq p = b_eq` from the SVD of the
/// row-normalized system, padded to square so the full right basis is
/// available.
fn eliminate_equalities(
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    n: usize,
) -> Result<Reduction, SolveError> {
    let m = a_eq.nrows();
    if m == 0 {
        return Ok(Reduction {
            particular: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
        });
    }
    if m > n {
        return Err(SolveError::RankDeficient);
    }
    let mut padded = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for i in 0..m {
        let norm = a_eq.row(i).norm();
        if norm == 0.0 {
            return Err(SolveError::RankDeficient);
        }
        for j in 0..n {
            padded[(i, j)] = a_eq[(i, j)] / norm;
        }
        rhs[i] = b_eq[i] / norm;
    }
    let svd = padded.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or(SolveError::Factorization)?;
    let v_t = svd.v_t.as_ref().ok_or(SolveError::Factorization)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > 1e-12 * n as f64 * largest.max(1.0))
        .count();
    if rank < m {
        return Err(SolveError::RankDeficient);
    }

    let pinv_apply = |b: &DVector<f64>| -> DVector<f64> {
        let mut x = DVector::zeros(n);
        for &i in &order[..rank] {
            let coeff = u.column(i).dot(b) / svd.singular_values[i];
            x.axpy(coeff, &v_t.row(i).transpose(), 1.0);
        }
        x
    };
    let mut particular = pinv_apply(&rhs);
    let resid = &rhs - &padded * &particular;
    particular += pinv_apply(&resid);

    let mut basis = DMatrix::zeros(n, n - rank);
    for (c, &i) in order[rank..].iter().enumerate() {
        basis.set_column(c, &v_t.row(i).transpose());
    }
    Ok(Reduction { particular, basis })
}

/// Ruiz-equilibrated copy of an [`IntervalQp`]. Original quantities relate as
/// `x = D x_s`, `A = E^-1 A_s D^-1`, `P = P_s / (c D D)`, `y = E y_s / c`.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn clamp_scale(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

fn equilibrate(qp: &IntervalQp, iters: usize) -> Scaled {
    let n = qp.p.nrows();
    let m = qp.a.nrows();
    let mut p = qp.p.clone();
    let mut q = qp.q.clone();
    let mut a = qp.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    let mut delta_d = DVector::zeros(n);
    let mut delta_e = DVector::zeros(m);

    for _ in 0..iters {
        for j in 0..n {
            let mut col = p.column(j).amax();
            if m > 0 {
                col = col.max(a.column(j).amax());
            }
            delta_d[j] = 1.0 / clamp_scale(col).sqrt();
        }
        for i in 0..m {
            delta_e[i] = 1.0 / clamp_scale(a.row(i).amax()).sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= delta_d[i] * delta_d[j];
            }
            for i in 0..m {
                a[(i, j)] *= delta_e[i] * delta_d[j];
            }
        }
        q.component_mul_assign(&delta_d);
        d.component_mul_assign(&delta_d);
        e.component_mul_assign(&delta_e);

        let mean_col = (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64;
        let gamma = 1.0 / clamp_scale(mean_col.max(q.amax()));
        p *= gamma;
        q *= gamma;
        c *= gamma;
    }

    let lower = qp.lower.component_mul(&e);
    let upper = qp.upper.component_mul(&e);
    Scaled {
        p,
        q,
        a,
        lower,
        upper,
        d,
        e,
        c,
    }
}

struct Residuals {
    primal: f64,
    dual: f64,
    eps_primal: f64,
    eps_dual: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        self.primal <= self.eps_primal && self.dual <= self.eps_dual
    }
}

fn inf_norm_scaled(v: &DVector<f64>, scale: impl Fn(usize) -> f64) -> f64 {
    v.iter()
        .enumerate()
        .fold(0.0, |acc, (i, x)| acc.max((x * scale(i)).abs()))
}

/// Unscaled residuals for a scaled iterate `(x, z, y)`.
fn residuals(
    s: &Scaled,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    settings: &SolverSettings,
) -> Residuals {
    let ax = &s.a * x;
    let px = &s.p * x;
    let aty = s.a.tr_mul(y);
    let inv_e = |i: usize| 1.0 / s.e[i];
    let inv_cd = |j: usize| 1.0 / (s.c * s.d[j]);
    let primal = inf_norm_scaled(&(&ax - z), inv_e);
    let dual = inf_norm_scaled(&(&px + &s.q + &aty), inv_cd);
    let eps_primal = settings.eps_abs
        + settings.eps_rel * inf_norm_scaled(&ax, inv_e).max(inf_norm_scaled(z, inv_e));
    let eps_dual = settings.eps_abs
        + settings.eps_rel
            * inf_norm_scaled(&px, inv_cd)
                .max(inf_norm_scaled(&aty, inv_cd))
                .max(inf_norm_scaled(&s.q, inv_cd));
    Residuals {
        primal,
        dual,
        eps_primal,
        eps_dual,
    }
}

fn check_problem(problem: &QpProblem) -> Result<(), SolveError> {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    if problem.cost.ncols() != n
        || problem.constraints.ncols() != n
        || problem.lower.len() != m
        || problem.upper.len() != m
        || problem.n_eq > m
    {
        return Err(SolveError::Dimensions);
    }
    if (0..problem.n_eq).any(|i| problem.lower[i] != problem.upper[i]) {
        return Err(SolveError::Dimensions);
    }
    Ok(())
}

struct Inner {
    x: DVector<f64>,
    status: SolveStatus,
    iterations: usize,
    primal: f64,
    dual: f64,
    polished: bool,
}

/// Solve the interval-constrained QP.
pub fn solve(problem: &QpProblem, settings: &SolverSettings) -> Result<Solution, SolveError> {
    settings.validate()?;
    check_problem(problem)?;
    let started = Instant::now();
    let n = problem.num_vars();
    let n_eq = problem.n_eq;
    let m_in = problem.num_constraints() - n_eq;

    let (a_eq, b_eq) = problem.equality_rows();
    let red = eliminate_equalities(&a_eq, &b_eq, n)?;
    let a_in = problem.constraints.rows(n_eq, m_in);
    // Objective p'Qp = 1/2 p'(2Q)p; substitute p = p0 + N x.
    let p_full = &problem.cost * 2.0;
    let pn = &p_full * &red.basis;
    let reduced = IntervalQp {
        p: red.basis.tr_mul(&pn),
        q: red.basis.tr_mul(&(&p_full * &red.particular)),
        a: &a_in * &red.basis,
        lower: problem.lower.rows(n_eq, m_in) - &a_in * &red.particular,
        upper: problem.upper.rows(n_eq, m_in) - &a_in * &red.particular,
    };

    let inner = if reduced.p.nrows() == 0 {
        fixed_point(&reduced, settings)
    } else {
        admm(&reduced, settings)?
    };

    let p = &red.particular + &red.basis * &inner.x;
    let eq_residual = if n_eq > 0 {
        (&a_eq * &p - &b_eq).amax()
    } else {
        0.0
    };
    Ok(Solution {
        p,
        status: inner.status,
        iterations: inner.iterations,
        solve_time: started.elapsed().as_secs_f64(),
        primal_residual: inner.primal.max(eq_residual),
        dual_residual: inner.dual,
        polished: inner.polished,
    })
}

/// Equalities pin every coefficient: only feasibility remains to check.
fn fixed_point(qp: &IntervalQp, settings: &SolverSettings) -> Inner {
    let violation = (0..qp.lower.len())
        .map(|i| (qp.lower[i] - 0.0).max(0.0 - qp.upper[i]).max(0.0))
        .fold(0.0, f64::max);
    let bound = qp.lower.amax().max(qp.upper.amax());
    let status = if violation <= settings.eps_abs + settings.eps_rel * bound {
        SolveStatus::Solved
    } else {
        SolveStatus::PrimalInfeasible
    };
    Inner {
        x: DVector::zeros(0),
        status,
        iterations: 0,
        primal: violation,
        dual: 0.0,
        polished: false,
    }
}

fn admm(qp: &IntervalQp, settings: &SolverSettings) -> Result<Inner, SolveError> {
    let n = qp.p.nrows();
    let m = qp.a.nrows();
    let s = equilibrate(qp, settings.scaling_iters);

    let rho: DVector<f64> = DVector::from_fn(m, |i, _| {
        if s.lower[i] == s.upper[i] {
            settings.rho * EQUALITY_RHO_FACTOR
        } else {
            settings.rho
        }
    });
    let mut kkt = s.p.clone();
    for i in 0..n {
        kkt[(i, i)] += settings.sigma;
    }
    let mut ra = s.a.clone();
    for (i, mut row) in ra.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    kkt += s.a.tr_mul(&ra);
    let chol: Cholesky<f64, Dyn> = kkt.cholesky().ok_or(SolveError::Factorization)?;

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    let mut rhs = DVector::zeros(n);
    let mut work_m = DVector::zeros(m);
    let mut x_tilde = DVector::zeros(n);
    let mut z_tilde = DVector::zeros(m);

    let alpha = settings.alpha;
    let mut status = SolveStatus::MaxIters;
    let mut iterations = settings.max_iters;
    let mut last_primal = f64::INFINITY;
    let mut stalled_checks = 0usize;
    let mut res = residuals(&s, &x, &z, &y, settings);

    for iter in 1..=settings.max_iters {
        // rhs = sigma x - q + A'(rho z - y)
        for i in 0..m {
            work_m[i] = rho[i] * z[i] - y[i];
        }
        s.a.tr_mul_to(&work_m, &mut rhs);
        rhs.axpy(settings.sigma, &x, 1.0);
        rhs -= &s.q;
        x_tilde.copy_from(&rhs);
        chol.solve_mut(&mut x_tilde);
        s.a.mul_to(&x_tilde, &mut z_tilde);

        x.axpy(alpha, &x_tilde, 1.0 - alpha);
        for i in 0..m {
            let relaxed = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = (relaxed + y[i] / rho[i]).clamp(s.lower[i], s.upper[i]);
            y[i] += rho[i] * (relaxed - z_new);
            z[i] = z_new;
        }

        if iter % settings.check_interval == 0 || iter == settings.max_iters {
            res = residuals(&s, &x, &z, &y, settings);
            if res.converged() {
                status = SolveStatus::Solved;
                iterations = iter;
                break;
            }
            if res.primal > 1e3 * res.eps_primal && res.primal > 0.9 * last_primal {
                stalled_checks += 1;
                if stalled_checks >= 10 {
                    status = SolveStatus::PrimalInfeasible;
                    iterations = iter;
                    break;
                }
            } else {
                stalled_checks = 0;
            }
            last_primal = res.primal;
        }
    }

    let mut polished = false;
    if settings.polish && status != SolveStatus::PrimalInfeasible {
        if let Some((px, _py, pres)) = polish(&s, &x, &z, &y, settings) {
            let primal_ok = pres.primal <= res.primal.max(res.eps_primal * 1e-3);
            let dual_ok = pres.dual <= res.dual.max(res.eps_dual);
            if primal_ok && dual_ok {
                x = px;
                res = pres;
                polished = true;
                if res.converged() {
                    status = SolveStatus::Solved;
                }
            }
        }
    }

    Ok(Inner {
        x: x.component_mul(&s.d),
        status,
        iterations,
        primal: res.primal,
        dual: res.dual,
        polished,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Active {
    Lower,
    Upper,
}

/// Re-solve the equality-constrained problem on the guessed active set, then
/// grow the set with any rows the polished point violates.
fn polish(
    s: &Scaled,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    settings: &SolverSettings,
) -> Option<(DVector<f64>, DVector<f64>, Residuals)> {
    let n = x.len();
    let m = z.len();
    let mut active: Vec<Option<Active>> = (0..m)
        .map(|i| {
            if s.lower[i] == s.upper[i] || z[i] - s.lower[i] < -y[i] {
                Some(Active::Lower)
            } else if s.upper[i] - z[i] < y[i] {
                Some(Active::Upper)
            } else {
                None
            }
        })
        .collect();

    for _ in 0..POLISH_ROUNDS {
        let rows: Vec<usize> = (0..m).filter(|&i| active[i].is_some()).collect();
        let k = rows.len();
        let dim = n + k;
        let mut mat = DMatrix::zeros(dim, dim);
        mat.view_mut((0, 0), (n, n)).copy_from(&s.p);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..n {
                mat[(n + r, j)] = s.a[(i, j)];
                mat[(j, n + r)] = s.a[(i, j)];
            }
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-&s.q));
        for (r, &i) in rows.iter().enumerate() {
            rhs[n + r] = match active[i] {
                Some(Active::Upper) => s.upper[i],
                _ => s.lower[i],
            };
        }
        let mut reg = mat.clone();
        for i in 0..n {
            reg[(i, i)] += POLISH_DELTA;
        }
        for i in n..dim {
            reg[(i, i)] -= POLISH_DELTA;
        }
        let lu = reg.lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..POLISH_REFINE_ITERS {
            let resid = &rhs - &mat * &sol;
            let step = lu.solve(&resid)?;
            sol += step;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let xp = sol.rows(0, n).into_owned();
        let mut yp = DVector::zeros(m);
        for (r, &i) in rows.iter().enumerate() {
            yp[i] = sol[n + r];
        }
        let ax = &s.a * &xp;
        let mut grew = false;
        for i in 0..m {
            if active[i].is_some() {
                continue;
            }
            let tol = 1e-9 * (1.0 + s.upper[i].abs().max(s.lower[i].abs()));
            if ax[i] > s.upper[i] + tol {
                active[i] = Some(Active::Upper);
                grew = true;
            } else if ax[i] < s.lower[i] - tol {
                active[i] = Some(Active::Lower);
                grew = true;
            }
        }
        if !grew {
            let zp = ax.zip_zip_map(&s.lower, &s.upper, |v, l, u| v.clamp(l, u));
            let res = residuals(s, &xp, &zp, &yp, settings);
            return Some((xp, yp, res));
        }
    }
    None
}

/// Exact minimizer of `p' Q p` subject to `A p = b` from the stationarity
/// system `[2Q A'; A 0] [p; lambda] = [0; b]`.
pub fn solve_kkt_equality(
    cost: &DMatrix<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
) -> Result<DVector<f64>, SolveError> {
    let n = cost.nrows();
    let m = a_eq.nrows();
    if cost.ncols() != n || a_eq.ncols() != n || b_eq.len() != m {
        return Err(SolveError::Dimensions);
    }
    crate::qpbuild::check_equality_rank(a_eq).map_err(|_| SolveError::SingularKkt)?;
    let dim = n + m;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(cost * 2.0));
    kkt.view_mut((n, 0), (m, n)).copy_from(a_eq);
    kkt.view_mut((0, n), (n, m)).copy_from(&a_eq.transpose());
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(n, m).copy_from(b_eq);
    let lu = kkt.clone().full_piv_lu();
    let mut sol = lu.solve(&rhs).ok_or(SolveError::SingularKkt)?;
    let resid = &rhs - &kkt * &sol;
    if let Some(step) = lu.solve(&resid) {
        sol += step;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::SingularKkt);
    }
    Ok(sol.rows(0, n).into_owned())
}
