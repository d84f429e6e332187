//! Per-joint minimum-jerk QP assembly.
//!
//! Decision vector: the stacked segment coefficients `[p_1; ...; p_N]`, each
//! block of length `degree + 1`. Every row uses the normalized-time basis of
//! [`crate::poly`] with the `D^-k` derivative scaling.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{fill_time_basis, MIN_DEGREE};

/// Ridge added to the cost diagonal; the jerk Gram matrix is singular on
/// polynomials of degree <= 2.
pub const COST_REGULARIZATION: f64 = 1e-9;

/// Equality rows for `n` segments.
pub fn equality_row_count(segments: usize) -> usize {
    4 * segments + 2
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpBuildError {
    #[error("waypoints: empty")]
    Empty,
    #[error("degree {0} is below the minimum of {MIN_DEGREE}")]
    Degree(usize),
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("control frequency must be positive, got {0}")]
    Frequency(f64),
    #[error("velocity and acceleration limits must be positive")]
    Limits,
    #[error("non-finite boundary state or waypoint")]
    NonFinite,
    #[error("equality constraints are rank deficient ({rows} rows, {cols} unknowns)")]
    RankDeficient { rows: usize, cols: usize },
}

/// One joint's target position and the time allotted to reach it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointWaypoint {
    pub position: f64,
    pub duration: f64,
}

/// `(q, qd, qdd)` at the start of the plan.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryState {
    pub q: f64,
    pub qd: f64,
    pub qdd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub v_max: f64,
    pub a_max: f64,
}

/// `min p' Q p  s.t.  lower <= A p <= upper`; the first `n_eq` rows are
/// equalities (`lower == upper`).
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub cost: DMatrix<f64>,
    pub constraints: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub n_eq: usize,
    pub degree: usize,
    pub durations: Vec<f64>,
}

impl QpProblem {
    pub fn num_vars(&self) -> usize {
        self.cost.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.nrows()
    }

    pub fn segments(&self) -> usize {
        self.durations.len()
    }

    pub fn equality_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        (
            self.constraints.rows(0, self.n_eq).into_owned(),
            self.lower.rows(0, self.n_eq).into_owned(),
        )
    }

    /// Value of the objective `p' Q p`.
    pub fn objective(&self, p: &DVector<f64>) -> f64 {
        p.dot(&(&self.cost * p))
    }

    pub fn to_dump(&self) -> QpDump {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        QpDump {
            degree: self.degree,
            durations: self.durations.clone(),
            n_eq: self.n_eq,
            cost: rows(&self.cost),
            constraints: rows(&self.constraints),
            lower: self.lower.iter().copied().collect(),
            upper: self.upper.iter().copied().collect(),
        }
    }

    pub fn write_json<W: Write>(&self, writer: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(writer, &self.to_dump())
    }
}

/// Dense row-major JSON form of a [`QpProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDump {
    pub degree: usize,
    pub durations: Vec<f64>,
    pub n_eq: usize,
    pub cost: Vec<Vec<f64>>,
    pub constraints: Vec<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn check_degree(degree: usize) -> Result<(), QpBuildError> {
    if degree < MIN_DEGREE {
        Err(QpBuildError::Degree(degree))
    } else {
        Ok(())
    }
}

fn check_duration(d: f64) -> Result<(), QpBuildError> {
    if d.is_finite() && d > 0.0 {
        Ok(())
    } else {
        Err(QpBuildError::Duration(d))
    }
}

/// Normalized sample instants for a segment: `max(2, round(f_c * D))` points
/// evenly covering `[0, 1]` including both ends.
pub fn sample_points(duration: f64, control_frequency: f64) -> Vec<f64> {
    let count = ((control_frequency * duration).round() as usize).max(2);
    (0..count)
        .map(|j| j as f64 / (count - 1) as f64)
        .collect()
}

/// Jerk Gram matrix over explicit normalized sample points.
pub fn jerk_cost_from_samples(degree: usize, duration: f64, samples: &[f64]) -> DMatrix<f64> {
    let n = degree + 1;
    let mut row = vec![0.0; n];
    let mut q = DMatrix::zeros(n, n);
    for &u in samples {
        fill_time_basis(&mut row, u, 3, duration);
        for a in 0..n {
            if row[a] == 0.0 {
                continue;
            }
            for b in 0..n {
                q[(a, b)] += row[a] * row[b];
            }
        }
    }
    q
}

pub fn jerk_cost_matrix(
    degree: usize,
    duration: f64,
    control_frequency: f64,
) -> Result<DMatrix<f64>, QpBuildError> {
    check_degree(degree)?;
    check_duration(duration)?;
    if !(control_frequency.is_finite() && control_frequency > 0.0) {
        return Err(QpBuildError::Frequency(control_frequency));
    }
    Ok(jerk_cost_from_samples(
        degree,
        duration,
        &sample_points(duration, control_frequency),
    ))
}

/// Boundary, pass-through and continuity rows, in order: initial (q, qd, qdd),
/// terminal (q, qd, qdd), then for each interior junction the pass-through row
/// followed by the three continuity rows.
pub fn build_equality(
    waypoints: &[JointWaypoint],
    initial: BoundaryState,
    degree: usize,
) -> Result<(DMatrix<f64>, DVector<f64>), QpBuildError> {
    check_degree(degree)?;
    if waypoints.is_empty() {
        return Err(QpBuildError::Empty);
    }
    for w in waypoints {
        check_duration(w.duration)?;
        if !w.position.is_finite() {
            return Err(QpBuildError::NonFinite);
        }
    }
    if ![initial.q, initial.qd, initial.qdd].iter().all(|v| v.is_finite()) {
        return Err(QpBuildError::NonFinite);
    }

    let n_seg = waypoints.len();
    let width = degree + 1;
    let rows = equality_row_count(n_seg);
    let mut a = DMatrix::zeros(rows, width * n_seg);
    let mut b = DVector::zeros(rows);
    let mut basis = vec![0.0; width];
    let mut put = |a: &mut DMatrix<f64>, row: usize, seg: usize, u: f64, k: usize, sign: f64| {
        fill_time_basis(&mut basis, u, k, waypoints[seg].duration);
        for (j, v) in basis.iter().enumerate() {
            a[(row, seg * width + j)] += sign * v;
        }
    };

    let initial_values = [initial.q, initial.qd, initial.qdd];
    for k in 0..3 {
        put(&mut a, k, 0, 0.0, k, 1.0);
        b[k] = initial_values[k];
    }
    let last = n_seg - 1;
    for k in 0..3 {
        put(&mut a, 3 + k, last, 1.0, k, 1.0);
    }
    b[3] = waypoints[last].position;

    let mut row = 6;
    for seg in 0..last {
        put(&mut a, row, seg, 1.0, 0, 1.0);
        b[row] = waypoints[seg].position;
        row += 1;
        for k in 0..3 {
            put(&mut a, row, seg, 1.0, k, 1.0);
            put(&mut a, row, seg + 1, 0.0, k, -1.0);
            row += 1;
        }
    }
    debug_assert_eq!(row, rows);
    Ok((a, b))
}

/// Two-sided velocity and acceleration rows at every cost sample: for each
/// sample, the velocity row then the acceleration row.
pub fn build_inequality(
    degree: usize,
    durations: &[f64],
    control_frequency: f64,
    limits: JointLimits,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>), QpBuildError> {
    check_degree(degree)?;
    if !(control_frequency.is_finite() && control_frequency > 0.0) {
        return Err(QpBuildError::Frequency(control_frequency));
    }
    if !(limits.v_max > 0.0 && limits.a_max > 0.0 && limits.v_max.is_finite() && limits.a_max.is_finite()) {
        return Err(QpBuildError::Limits);
    }
    for &d in durations {
        check_duration(d)?;
    }
    let width = degree + 1;
    let grids: Vec<Vec<f64>> = durations
        .iter()
        .map(|&d| sample_points(d, control_frequency))
        .collect();
    let rows: usize = grids.iter().map(|g| 2 * g.len()).sum();
    let mut a = DMatrix::zeros(rows, width * durations.len());
    let mut lower = DVector::zeros(rows);
    let mut upper = DVector::zeros(rows);
    let mut basis = vec![0.0; width];
    let mut row = 0;
    for (seg, grid) in grids.iter().enumerate() {
        let d = durations[seg];
        for &u in grid {
            for (k, bound) in [(1, limits.v_max), (2, limits.a_max)] {
                fill_time_basis(&mut basis, u, k, d);
                for (j, v) in basis.iter().enumerate() {
                    a[(row, seg * width + j)] = *v;
                }
                lower[row] = -bound;
                upper[row] = bound;
                row += 1;
            }
        }
    }
    Ok((a, lower, upper))
}

/// Full per-joint problem: block-diagonal jerk cost (plus ridge), equality
/// rows as tight intervals, then the sampled limit rows.
pub fn assemble_qp(
    waypoints: &[JointWaypoint],
    initial: BoundaryState,
    degree: usize,
    control_frequency: f64,
    limits: JointLimits,
) -> Result<QpProblem, QpBuildError> {
    let (a_eq, b_eq) = build_equality(waypoints, initial, degree)?;
    check_equality_rank(&a_eq)?;
    let durations: Vec<f64> = waypoints.iter().map(|w| w.duration).collect();
    let (a_in, l_in, u_in) = build_inequality(degree, &durations, control_frequency, limits)?;

    let width = degree + 1;
    let n = width * waypoints.len();
    let mut cost = DMatrix::zeros(n, n);
    for (seg, &d) in durations.iter().enumerate() {
        let block = jerk_cost_matrix(degree, d, control_frequency)?;
        cost.view_mut((seg * width, seg * width), (width, width))
            .copy_from(&block);
    }
    for i in 0..n {
        cost[(i, i)] += COST_REGULARIZATION;
    }

    let n_eq = a_eq.nrows();
    let m = n_eq + a_in.nrows();
    let mut constraints = DMatrix::zeros(m, n);
    constraints.view_mut((0, 0), (n_eq, n)).copy_from(&a_eq);
    constraints
        .view_mut((n_eq, 0), (a_in.nrows(), n))
        .copy_from(&a_in);
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    lower.rows_mut(0, n_eq).copy_from(&b_eq);
    upper.rows_mut(0, n_eq).copy_from(&b_eq);
    lower.rows_mut(n_eq, a_in.nrows()).copy_from(&l_in);
    upper.rows_mut(n_eq, a_in.nrows()).copy_from(&u_in);

    Ok(QpProblem {
        cost,
        constraints,
        lower,
        upper,
        n_eq,
        degree,
        durations,
    })
}

/// Rows are normalized before the singular-value test so the `D^-k` scaling
/// does not masquerade as rank loss.
pub fn check_equality_rank(a_eq: &DMatrix<f64>) -> Result<(), QpBuildError> {
    let (rows, cols) = a_eq.shape();
    let err = QpBuildError::RankDeficient { rows, cols };
    if rows > cols {
        return Err(err);
    }
    let mut normalized = a_eq.clone();
    for mut r in normalized.row_iter_mut() {
        let norm = r.norm();
        if norm == 0.0 {
            return Err(err);
        }
        r /= norm;
    }
    let gram = &normalized * normalized.transpose();
    let eig = gram.symmetric_eigenvalues();
    let max = eig.max();
    if eig.min() <= 1e-12 * max.max(1.0) {
        return Err(err);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LIMITS: JointLimits = JointLimits {
        v_max: 2.0,
        a_max: 10.0,
    };

    fn wp(position: f64, duration: f64) -> JointWaypoint {
        JointWaypoint { position, duration }
    }

    #[test]
    fn single_sample_gram() {
        let d = 0.7;
        let q = jerk_cost_from_samples(5, d, &[0.0]);
        for i in 0..6 {
            for j in 0..6 {
                let expected = if (i, j) == (3, 3) { 36.0 * d.powi(-6) } else { 0.0 };
                assert_abs_diff_eq!(q[(i, j)], expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (degree, d, fc) in [(4, 0.3, 100.0), (5, 1.0, 100.0), (6, 0.04, 100.0), (5, 2.5, 50.0)] {
            let q = jerk_cost_matrix(degree, d, fc).unwrap();
            assert_eq!(q, q.transpose());
            for _ in 0..1000 {
                let x = DVector::from_fn(degree + 1, |_, _| rng.gen_range(-1.0..1.0));
                assert!(x.dot(&(&q * &x)) >= 0.0);
            }
        }
    }

    #[test]
    fn gram_matches_integral() {
        // b'''[3] = 6 for every u, so the per-sample mean of Q[3][3] is the
        // integral of 36 over [0, 1].
        let q = jerk_cost_matrix(5, 1.0, 100.0).unwrap();
        let samples = sample_points(1.0, 100.0).len() as f64;
        assert!((q[(3, 3)] / samples - 36.0).abs() <= 0.36);
        // Q[5][5]/samples approximates the integral of (60u^2)^2 = 720.
        assert!((q[(5, 5)] / samples - 720.0).abs() / 720.0 < 0.02);
    }

    #[test]
    fn cost_rejects_bad_inputs() {
        assert!(jerk_cost_matrix(5, 0.0, 100.0).is_err());
        assert!(jerk_cost_matrix(5, 1.0, 0.0).is_err());
        assert!(jerk_cost_matrix(3, 1.0, 100.0).is_err());
    }

    #[test]
    fn sample_count_floor() {
        assert_eq!(sample_points(0.01, 100.0).len(), 2);
        assert_eq!(sample_points(1.0, 10.0).len(), 10);
        let pts = sample_points(0.5, 100.0);
        assert_eq!(pts.len(), 50);
        assert_eq!(pts[0], 0.0);
        assert_eq!(pts[49], 1.0);
    }

    #[test]
    fn equality_single_segment() {
        let (a, b) = build_equality(&[wp(1.0, 1.0)], BoundaryState::default(), 5).unwrap();
        assert_eq!(a.shape(), (6, 6));
        assert_eq!(b.as_slice(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn equality_two_segments_block_banded() {
        let (a, _) =
            build_equality(&[wp(1.0, 1.0), wp(2.0, 0.5)], BoundaryState::default(), 5).unwrap();
        assert_eq!(a.shape(), (10, 12));
        // Initial rows only touch block 0.
        for r in 0..3 {
            assert!((6..12).all(|c| a[(r, c)] == 0.0));
        }
        // Continuity rows 7..10 touch both blocks.
        for r in 7..10 {
            assert!((0..6).any(|c| a[(r, c)] != 0.0));
            assert!((6..12).any(|c| a[(r, c)] != 0.0));
        }
    }

    #[test]
    fn equality_errors() {
        assert_eq!(
            build_equality(&[], BoundaryState::default(), 5),
            Err(QpBuildError::Empty)
        );
        let bad = BoundaryState {
            q: f64::NAN,
            ..Default::default()
        };
        assert_eq!(
            build_equality(&[wp(1.0, 1.0)], bad, 5),
            Err(QpBuildError::NonFinite)
        );
        assert!(build_equality(&[wp(1.0, -1.0)], BoundaryState::default(), 5).is_err());
    }

    #[test]
    fn inequality_counts_and_rest_feasible() {
        let (a, l, u) = build_inequality(5, &[1.0], 10.0, LIMITS).unwrap();
        assert_eq!(a.nrows(), 20);
        let ap = &a * DVector::zeros(6);
        for i in 0..20 {
            assert!(l[i] < ap[i] && ap[i] < u[i]);
        }
        assert_eq!(
            build_inequality(5, &[1.0], 10.0, JointLimits { v_max: 0.0, a_max: 1.0 }),
            Err(QpBuildError::Limits)
        );
    }

    #[test]
    fn assembled_dimensions_and_blocks() {
        let wps: Vec<_> = (1..=5).map(|i| wp(0.1 * i as f64, 0.2)).collect();
        let qp = assemble_qp(&wps, BoundaryState::default(), 5, 100.0, LIMITS).unwrap();
        assert_eq!(qp.num_vars(), 30);
        assert_eq!(qp.n_eq, 22);
        assert_eq!(qp.cost, qp.cost.transpose());
        for i in 0..30 {
            for j in 0..30 {
                if i / 6 != j / 6 {
                    assert_eq!(qp.cost[(i, j)], 0.0);
                }
            }
        }
        for r in 0..qp.num_constraints() {
            assert!(qp.lower[r] <= qp.upper[r]);
            assert!(qp.constraints.row(r).iter().any(|v| *v != 0.0));
        }
        for r in 0..qp.n_eq {
            assert_eq!(qp.lower[r], qp.upper[r]);
        }
        let eig = qp.cost.clone().symmetric_eigenvalues();
        assert!(eig.min() >= -1e-10);
    }

    #[test]
    fn assembly_is_deterministic() {
        let wps = [wp(0.3, 0.5), wp(-0.2, 0.4), wp(0.1, 0.3)];
        let s0 = BoundaryState { q: 0.1, qd: 0.2, qdd: -0.3 };
        let a = assemble_qp(&wps, s0, 5, 100.0, LIMITS).unwrap();
        let b = assemble_qp(&wps, s0, 5, 100.0, LIMITS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_check() {
        // Degree 4 with a single segment has 5 unknowns for 6 rows.
        assert!(matches!(
            assemble_qp(&[wp(1.0, 1.0)], BoundaryState::default(), 4, 100.0, LIMITS),
            Err(QpBuildError::RankDeficient { .. })
        ));
        for n in 2..=5 {
            let wps: Vec<_> = (0..n).map(|i| wp(i as f64, 0.3)).collect();
            assert!(assemble_qp(&wps, BoundaryState::default(), 4, 100.0, LIMITS).is_ok());
        }
        let dup = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(check_equality_rank(&dup).is_err());
    }

    #[test]
    fn json_dump_is_row_major() {
        let qp = assemble_qp(&[wp(1.0, 1.0)], BoundaryState::default(), 5, 10.0, LIMITS).unwrap();
        let mut buf = Vec::new();
        qp.write_json(&mut buf).unwrap();
        let dump: QpDump = serde_json::from_slice(&buf).unwrap();
        assert_eq!(dump.n_eq, 6);
        assert_eq!(dump.constraints.len(), 6 + 20);
        assert_eq!(dump.constraints[3], vec![1.0; 6]);
        assert_eq!(dump.cost[3][3], qp.cost[(3, 3)]);
    }
}
