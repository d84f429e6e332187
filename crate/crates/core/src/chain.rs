//! Serial-chain kinematics: forward kinematics, the geometric Jacobian and a
//! seeded damped-least-squares inverse kinematics solver.
//!
//! Orientation is expressed as roll/pitch/yaw applied intrinsically Z-Y-X,
//! i.e. `R = Rz(yaw) * Ry(pitch) * Rx(roll)`, everywhere in the crate.

use std::fs;
use std::path::Path;

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix6xX, Rotation3, Translation3, Unit, UnitQuaternion,
    Vector3, Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type JointVector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("dimension mismatch: expected {expected} joints, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid chain: {0}")]
    Invalid(String),
    #[error("ik did not converge after {iterations} iterations (position error {position_error:.3e} m, orientation error {orientation_error:.3e} rad)")]
    NoConvergence {
        iterations: usize,
        position_error: f64,
        orientation_error: f64,
    },
    #[error("chain file: {0}")]
    Io(String),
}

/// End-effector pose: base-frame translation plus roll/pitch/yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    /// `(roll, pitch, yaw)`.
    pub orientation: Vector3<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: Vector3<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.orientation.x,
            self.orientation.y,
            self.orientation.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.orientation.x, self.orientation.y, self.orientation.z)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position),
            UnitQuaternion::from_rotation_matrix(&self.rotation()),
        )
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let (roll, pitch, yaw) = iso.rotation.euler_angles();
        Self {
            position: iso.translation.vector,
            orientation: Vector3::new(roll, pitch, yaw),
        }
    }
}

/// One revolute joint: a fixed offset from the parent joint frame followed by
/// a rotation about `axis` (expressed in the offset frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub axis: Unit<Vector3<f64>>,
    pub offset: Isometry3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub min: f64,
    pub max: f64,
}

impl JointLimit {
    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    joints: Vec<Joint>,
    joint_limits: Vec<JointLimit>,
    v_max: Vec<f64>,
    a_max: Vec<f64>,
    control_frequency: f64,
    ee_offset: Isometry3<f64>,
}

impl ChainConfig {
    pub fn new(
        joints: Vec<Joint>,
        joint_limits: Vec<JointLimit>,
        v_max: Vec<f64>,
        a_max: Vec<f64>,
        control_frequency: f64,
        ee_offset: Isometry3<f64>,
    ) -> Result<Self, ChainError> {
        let dof = joints.len();
        if dof == 0 {
            return Err(ChainError::Invalid("dof must be at least 1".into()));
        }
        for (name, len) in [
            ("joint_limits", joint_limits.len()),
            ("v_max", v_max.len()),
            ("a_max", a_max.len()),
        ] {
            if len != dof {
                return Err(ChainError::Invalid(format!(
                    "{name} has {len} entries, expected {dof}"
                )));
            }
        }
        for (i, lim) in joint_limits.iter().enumerate() {
            if !(lim.min.is_finite() && lim.max.is_finite() && lim.min < lim.max) {
                return Err(ChainError::Invalid(format!(
                    "joint {i}: limits must satisfy min < max"
                )));
            }
        }
        if v_max.iter().chain(&a_max).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ChainError::Invalid(
                "velocity and acceleration limits must be positive".into(),
            ));
        }
        if !(control_frequency.is_finite() && control_frequency > 0.0) {
            return Err(ChainError::Invalid(
                "control_frequency must be positive".into(),
            ));
        }
        Ok(Self {
            joints,
            joint_limits,
            v_max,
            a_max,
            control_frequency,
            ee_offset,
        })
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_limits(&self) -> &[JointLimit] {
        &self.joint_limits
    }

    pub fn v_max(&self) -> &[f64] {
        &self.v_max
    }

    pub fn a_max(&self) -> &[f64] {
        &self.a_max
    }

    pub fn control_frequency(&self) -> f64 {
        self.control_frequency
    }

    pub fn ee_offset(&self) -> &Isometry3<f64> {
        &self.ee_offset
    }

    pub fn clamp(&self, q: &mut JointVector) {
        for (v, lim) in q.iter_mut().zip(&self.joint_limits) {
            *v = lim.clamp(*v);
        }
    }

    pub fn within_limits(&self, q: &JointVector, tol: f64) -> bool {
        q.iter()
            .zip(&self.joint_limits)
            .all(|(v, lim)| *v >= lim.min - tol && *v <= lim.max + tol)
    }

    fn check_input(&self, q: &JointVector) -> Result<(), ChainError> {
        if q.len() != self.dof() {
            return Err(ChainError::Dimension {
                expected: self.dof(),
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(ChainError::NonFinite);
        }
        Ok(())
    }

    /// World frame of every joint (after its offset, before its rotation)
    /// and the end-effector frame.
    fn frames(&self, q: &JointVector) -> (Vec<Isometry3<f64>>, Isometry3<f64>) {
        let mut current = Isometry3::identity();
        let mut frames = Vec::with_capacity(self.dof());
        for (joint, angle) in self.joints.iter().zip(q.iter()) {
            current *= joint.offset;
            frames.push(current);
            current *= UnitQuaternion::from_axis_angle(&joint.axis, *angle);
        }
        (frames, current * self.ee_offset)
    }

    pub fn ee_transform(&self, q: &JointVector) -> Result<Isometry3<f64>, ChainError> {
        self.check_input(q)?;
        Ok(self.frames(q).1)
    }

    pub fn forward_kinematics(&self, q: &JointVector) -> Result<Pose, ChainError> {
        self.ee_transform(q).map(|t| Pose::from_isometry(&t))
    }

    /// Geometric Jacobian in the base frame; rows 0..3 are linear, 3..6 angular.
    pub fn jacobian(&self, q: &JointVector) -> Result<Matrix6xX<f64>, ChainError> {
        self.check_input(q)?;
        let (frames, ee) = self.frames(q);
        let p_ee = ee.translation.vector;
        let mut jac = Matrix6xX::zeros(self.dof());
        for (i, (frame, joint)) in frames.iter().zip(&self.joints).enumerate() {
            let z = frame.rotation * joint.axis.into_inner();
            let lin = z.cross(&(p_ee - frame.translation.vector));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        Ok(jac)
    }

    pub fn inverse_kinematics(
        &self,
        target: &Pose,
        seed: &JointVector,
        settings: &IkSettings,
    ) -> Result<JointVector, ChainError> {
        self.check_input(seed)?;
        if !target.is_finite() {
            return Err(ChainError::NonFinite);
        }
        let goal = target.to_isometry();
        let mut q = seed.clone();
        self.clamp(&mut q);
        let mut err = pose_error(&goal, &self.frames(&q).1);
        let mut cost = err.norm_squared();
        let mut lambda = settings.damping;
        let dof = self.dof();

        for _ in 0..settings.max_iters {
            if settings.converged(&err) {
                return Ok(q);
            }
            let jac = self.jacobian(&q)?;
            let jt = jac.transpose();
            let mut normal: DMatrix<f64> = &jt * &jac;
            for d in 0..dof {
                normal[(d, d)] += lambda;
            }
            let rhs = &jt * err;
            let step = match normal.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut candidate = &q + step;
            self.clamp(&mut candidate);
            let cand_err = pose_error(&goal, &self.frames(&candidate).1);
            let cand_cost = cand_err.norm_squared();
            if cand_cost < cost {
                q = candidate;
                err = cand_err;
                cost = cand_cost;
                lambda = (lambda / 10.0).max(settings.min_damping);
            } else {
                lambda = (lambda * 10.0).min(settings.max_damping);
            }
        }
        let (pos, ori) = split_error(&err);
        if settings.converged(&err) || (pos <= settings.accept_position && ori <= settings.accept_orientation)
        {
            Ok(q)
        } else {
            Err(ChainError::NoConvergence {
                iterations: settings.max_iters,
                position_error: pos,
                orientation_error: ori,
            })
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, ChainError> {
        let file: ChainFile =
            serde_json::from_str(text).map_err(|e| ChainError::Io(e.to_string()))?;
        file.try_into()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ChainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ChainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_file(&self) -> ChainFile {
        ChainFile {
            dof: self.dof(),
            joints: self
                .joints
                .iter()
                .map(|j| JointEntry {
                    axis: j.axis.into_inner().into(),
                    offset: OffsetEntry::from_isometry(&j.offset),
                })
                .collect(),
            joint_limits: self.joint_limits.iter().map(|l| [l.min, l.max]).collect(),
            v_max: self.v_max.clone(),
            a_max: self.a_max.clone(),
            control_frequency: self.control_frequency,
            ee_offset: OffsetEntry::from_isometry(&self.ee_offset),
        }
    }
}

/// Damped-least-squares settings. Iteration stops once both error components
/// fall below the `tol_*` values; after `max_iters` an iterate is still
/// accepted if it meets the looser `accept_*` bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkSettings {
    pub damping: f64,
    pub min_damping: f64,
    pub max_damping: f64,
    pub max_iters: usize,
    pub tol_position: f64,
    pub tol_orientation: f64,
    pub accept_position: f64,
    pub accept_orientation: f64,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            min_damping: 1e-12,
            max_damping: 1e8,
            max_iters: 200,
            tol_position: 1e-10,
            tol_orientation: 1e-10,
            accept_position: 1e-4,
            accept_orientation: 1e-3,
        }
    }
}

impl IkSettings {
    fn converged(&self, err: &Vector6<f64>) -> bool {
        let (pos, ori) = split_error(err);
        pos <= self.tol_position && ori <= self.tol_orientation
    }
}

fn split_error(err: &Vector6<f64>) -> (f64, f64) {
    (
        err.fixed_rows::<3>(0).norm(),
        err.fixed_rows::<3>(3).norm(),
    )
}

/// Stacked (position, rotation-vector) error taking `current` to `goal`,
/// both in the base frame.
pub fn pose_error(goal: &Isometry3<f64>, current: &Isometry3<f64>) -> Vector6<f64> {
    let dp = goal.translation.vector - current.translation.vector;
    let dr = (goal.rotation * current.rotation.inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Position distance (m) and rotation angle (rad) between two poses.
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    let err = pose_error(&a.to_isometry(), &b.to_isometry());
    split_error(&err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetEntry {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OffsetEntry {
    fn to_isometry(&self) -> Isometry3<f64> {
        Pose::from_array([
            self.xyz[0],
            self.xyz[1],
            self.xyz[2],
            self.rpy[0],
            self.rpy[1],
            self.rpy[2],
        ])
        .to_isometry()
    }

    fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let a = Pose::from_isometry(iso).to_array();
        Self {
            xyz: [a[0], a[1], a[2]],
            rpy: [a[3], a[4], a[5]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEntry {
    pub axis: [f64; 3],
    #[serde(default = "zero_offset")]
    pub offset: OffsetEntry,
}

fn zero_offset() -> OffsetEntry {
    OffsetEntry {
        xyz: [0.0; 3],
        rpy: [0.0; 3],
    }
}

/// On-disk chain description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFile {
    pub dof: usize,
    pub joints: Vec<JointEntry>,
    pub joint_limits: Vec<[f64; 2]>,
    pub v_max: Vec<f64>,
    pub a_max: Vec<f64>,
    pub control_frequency: f64,
    #[serde(default = "zero_offset")]
    pub ee_offset: OffsetEntry,
}

impl TryFrom<ChainFile> for ChainConfig {
    type Error = ChainError;

    fn try_from(file: ChainFile) -> Result<Self, Self::Error> {
        if file.dof != file.joints.len() {
            return Err(ChainError::Invalid(format!(
                "dof is {} but {} joints are listed",
                file.dof,
                file.joints.len()
            )));
        }
        let mut joints = Vec::with_capacity(file.dof);
        for (i, entry) in file.joints.iter().enumerate() {
            let axis = Vector3::from(entry.axis);
            let norm = axis.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(ChainError::Invalid(format!(
                    "joint {i}: axis must be a unit vector"
                )));
            }
            if entry.offset.xyz.iter().chain(&entry.offset.rpy).any(|v| !v.is_finite()) {
                return Err(ChainError::NonFinite);
            }
            joints.push(Joint {
                axis: Unit::new_normalize(axis),
                offset: entry.offset.to_isometry(),
            });
        }
        ChainConfig::new(
            joints,
            file.joint_limits
                .iter()
                .map(|l| JointLimit { min: l[0], max: l[1] })
                .collect(),
            file.v_max,
            file.a_max,
            file.control_frequency,
            file.ee_offset.to_isometry(),
        )
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub const TWO_LINK: &str = include_str!("../../../fixtures/two_link.json");
    pub const SIX_DOF: &str = include_str!("../../../fixtures/six_dof.json");

    pub fn two_link() -> ChainConfig {
        ChainConfig::from_json_str(TWO_LINK).unwrap()
    }

    pub fn six_dof() -> ChainConfig {
        ChainConfig::from_json_str(SIX_DOF).unwrap()
    }

    pub fn six_dof_home() -> JointVector {
        JointVector::from_vec(vec![0.0, -1.2, 1.5, -1.9, -1.5708, 0.0])
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn qv(v: &[f64]) -> JointVector {
        JointVector::from_column_slice(v)
    }

    #[test]
    fn planar_straight_arm() {
        let chain = two_link();
        let pose = chain.forward_kinematics(&qv(&[0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(pose.position, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(pose.orientation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn planar_base_rotation() {
        let chain = two_link();
        let pose = chain.forward_kinematics(&qv(&[FRAC_PI_2, 0.0])).unwrap();
        assert_abs_diff_eq!(pose.position, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(pose.orientation.z, FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let chain = two_link();
        assert_eq!(
            chain.forward_kinematics(&qv(&[0.0])),
            Err(ChainError::Dimension {
                expected: 2,
                got: 1
            })
        );
        assert_eq!(
            chain.forward_kinematics(&qv(&[0.0, f64::NAN])),
            Err(ChainError::NonFinite)
        );
        assert!(chain.jacobian(&qv(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn six_dof_matches_matrix_product_oracle() {
        // Frozen from an independent 4x4 homogeneous-matrix product
        // (tools/fk_oracle.py), then Z-Y-X Euler extraction.
        let chain = six_dof();
        for (q, expected) in ORACLE_FK {
            let pose = chain.forward_kinematics(&qv(q)).unwrap();
            let got = pose.to_array();
            for k in 0..6 {
                assert_abs_diff_eq!(got[k], expected[k], epsilon = 1e-12);
            }
        }
    }

    include!("../../../fixtures/fk_oracle.rs.in");

    #[test]
    fn planar_jacobian_lever_arm() {
        let chain = two_link();
        let jac = chain.jacobian(&qv(&[0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(jac[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jac[(1, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jac[(2, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jac[(1, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_joint_angular_row_is_axis() {
        let axis = Vector3::new(1.0, 2.0, 2.0) / 3.0;
        let chain = ChainConfig::new(
            vec![Joint {
                axis: Unit::new_normalize(axis),
                offset: Isometry3::identity(),
            }],
            vec![JointLimit { min: -3.0, max: 3.0 }],
            vec![1.0],
            vec![1.0],
            100.0,
            Isometry3::translation(1.0, 0.0, 0.0),
        )
        .unwrap();
        let jac = chain.jacobian(&qv(&[0.3])).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(jac[(3 + k, 0)], axis[k], epsilon = 1e-12);
        }
    }

    /// Central differences of FK: linear rows from position, angular rows
    /// from the rotation-vector of R(q+h) R(q-h)^T / 2h.
    fn finite_difference_jacobian(chain: &ChainConfig, q: &JointVector, h: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(6, chain.dof());
        for i in 0..chain.dof() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let tp = chain.ee_transform(&qp).unwrap();
            let tm = chain.ee_transform(&qm).unwrap();
            let dp = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
            let dr = (tp.rotation * tm.rotation.inverse()).scaled_axis() / (2.0 * h);
            for k in 0..3 {
                out[(k, i)] = dp[k];
                out[(3 + k, i)] = dr[k];
            }
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for chain in [two_link(), six_dof()] {
            for _ in 0..50 {
                let q = JointVector::from_fn(chain.dof(), |i, _| {
                    let l = chain.joint_limits()[i];
                    rng.gen_range(l.min..l.max)
                });
                let jac = chain.jacobian(&q).unwrap();
                let fd = finite_difference_jacobian(&chain, &q, 1e-6);
                for (a, b) in jac.iter().zip(fd.iter()) {
                    assert!((a - b).abs() <= 1e-5, "jacobian {a} vs fd {b}");
                }
            }
        }
    }

    #[test]
    fn ik_matches_cosine_law() {
        let chain = two_link();
        // Closed form for unit links reaching (x, y): elbow angle from the
        // law of cosines, shoulder from the target bearing.
        let (x, y) = (1.0_f64, 1.0_f64);
        let c2 = (x * x + y * y - 2.0) / 2.0;
        let q2 = c2.acos();
        let q1 = y.atan2(x) - (q2.sin()).atan2(1.0 + q2.cos());
        let target = Pose::from_array([x, y, 0.0, 0.0, 0.0, q1 + q2]);
        let q = chain
            .inverse_kinematics(&target, &qv(&[0.0, 1.0]), &IkSettings::default())
            .unwrap();
        assert_abs_diff_eq!(q[0], q1, epsilon = 1e-8);
        assert_abs_diff_eq!(q[1], q2, epsilon = 1e-8);
        assert_abs_diff_eq!(q[0], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(q[1], FRAC_PI_2, epsilon = 1e-8);
    }

    #[test]
    fn ik_fixed_point_returns_seed() {
        let chain = six_dof();
        let seed = six_dof_home();
        let target = chain.forward_kinematics(&seed).unwrap();
        let q = chain
            .inverse_kinematics(&target, &seed, &IkSettings::default())
            .unwrap();
        assert_eq!(q, seed);
    }

    #[test]
    fn ik_round_trip_six_dof() {
        let chain = six_dof();
        let settings = IkSettings::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q_true = JointVector::from_fn(6, |i, _| {
                let l = chain.joint_limits()[i];
                rng.gen_range(l.min + 0.1..l.max - 0.1)
            });
            let seed = q_true.map(|v| v + rng.gen_range(-0.1..0.1));
            let target = chain.forward_kinematics(&q_true).unwrap();
            let q = chain.inverse_kinematics(&target, &seed, &settings).unwrap();
            let (dp, dr) = pose_distance(&chain.forward_kinematics(&q).unwrap(), &target);
            assert!(dp <= 1e-4 && dr <= 1e-3, "round trip error {dp} m, {dr} rad");
            assert!(chain.within_limits(&q, 0.0));
        }
    }

    #[test]
    fn ik_unreachable_target_fails() {
        let chain = two_link();
        let target = Pose::from_array([5.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let err = chain
            .inverse_kinematics(&target, &qv(&[0.1, 0.1]), &IkSettings::default())
            .unwrap_err();
        assert!(matches!(err, ChainError::NoConvergence { .. }));
    }

    #[test]
    fn ik_output_respects_limits() {
        let chain = two_link();
        // Reachable only with q2 = pi/2 + something beyond the limit.
        let target = Pose::from_array([0.2, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let res = chain.inverse_kinematics(&target, &qv(&[0.0, 2.5]), &IkSettings::default());
        if let Ok(q) = res {
            assert!(chain.within_limits(&q, 0.0));
        }
    }

    #[test]
    fn ik_is_deterministic() {
        let chain = six_dof();
        let target = chain
            .forward_kinematics(&qv(&[0.2, -1.0, 1.2, -1.5, -1.3, 0.4]))
            .unwrap();
        let a = chain
            .inverse_kinematics(&target, &six_dof_home(), &IkSettings::default())
            .unwrap();
        let b = chain
            .inverse_kinematics(&target, &six_dof_home(), &IkSettings::default())
            .unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn chain_file_validation() {
        let mut file = two_link().to_file();
        file.v_max[0] = 0.0;
        assert!(ChainConfig::try_from(file.clone()).is_err());
        file.v_max[0] = 1.0;
        file.joint_limits[1] = [1.0, -1.0];
        assert!(ChainConfig::try_from(file.clone()).is_err());
        file.joint_limits[1] = [-1.0, 1.0];
        file.dof = 3;
        assert!(ChainConfig::try_from(file.clone()).is_err());
        file.dof = 2;
        file.joints[0].axis = [0.0, 0.0, 2.0];
        assert!(ChainConfig::try_from(file).is_err());
    }

    #[test]
    fn chain_file_round_trip() {
        let chain = six_dof();
        let text = serde_json::to_string(&chain.to_file()).unwrap();
        let back = ChainConfig::from_json_str(&text).unwrap();
        let q = six_dof_home();
        let a = chain.ee_transform(&q).unwrap();
        let b = back.ee_transform(&q).unwrap();
        assert!((a.translation.vector - b.translation.vector).norm() < 1e-12);
    }
}
