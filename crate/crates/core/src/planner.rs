//! Cartesian request to multi-joint trajectory: seeded IK per waypoint, then
//! one QP per joint over the shared segment durations.

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainConfig, ChainError, IkSettings, JointVector, Pose};
use crate::poly::{JointTrajectory, Segment, DEFAULT_DEGREE, MIN_DEGREE};
use crate::qpbuild::{assemble_qp, BoundaryState, JointLimits, JointWaypoint, QpBuildError};
use crate::qpsolve::{solve, SolveError, SolveStatus, SolverSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("{0}")]
    Validation(String),
    #[error("ik failed at waypoint {index}: {source}")]
    Ik { index: usize, source: ChainError },
    #[error("qp failed for joint {joint}: {reason}")]
    Qp { joint: usize, reason: String },
    #[error("time {t} is before the plan epoch {epoch}")]
    BeforeEpoch { t: f64, epoch: f64 },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

impl PlanError {
    /// Pipeline stage that produced the error.
    pub fn stage(&self) -> &'static str {
        match self {
            PlanError::Validation(_) => "validation",
            PlanError::Ik { .. } => "ik",
            PlanError::Qp { .. } => "qp",
            PlanError::BeforeEpoch { .. } => "time",
            PlanError::Chain(_) => "chain",
        }
    }
}

/// Target pose and the time allotted to reach it from the previous waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "WaypointRecord", into = "WaypointRecord")]
pub struct CartesianWaypoint {
    pub pose: Pose,
    pub duration: f64,
}

impl CartesianWaypoint {
    pub fn new(pose: Pose, duration: f64) -> Self {
        Self { pose, duration }
    }
}

/// Wire and file form: `{"pose":[x,y,z,roll,pitch,yaw],"duration":s}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaypointRecord {
    pub pose: [f64; 6],
    pub duration: f64,
}

impl From<WaypointRecord> for CartesianWaypoint {
    fn from(r: WaypointRecord) -> Self {
        Self::new(Pose::from_array(r.pose), r.duration)
    }
}

impl From<CartesianWaypoint> for WaypointRecord {
    fn from(w: CartesianWaypoint) -> Self {
        Self {
            pose: w.pose.to_array(),
            duration: w.duration,
        }
    }
}

/// Parse a waypoint list file (a JSON array of waypoint records).
pub fn parse_waypoints(text: &str) -> Result<Vec<CartesianWaypoint>, PlanError> {
    serde_json::from_str(text).map_err(|e| PlanError::Validation(format!("waypoints: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RequestType {
    #[default]
    #[serde(rename = "rt-move-cartesian")]
    RtMoveCartesian,
}

impl RequestType {
    pub fn as_str(&self) -> &'static str {
        match self {
            RequestType::RtMoveCartesian => "rt-move-cartesian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub robot_id: String,
    pub request_type: RequestType,
    pub waypoints: Vec<CartesianWaypoint>,
    pub request_id: String,
}

impl PlanRequest {
    pub fn new(
        robot_id: impl Into<String>,
        request_id: impl Into<String>,
        waypoints: Vec<CartesianWaypoint>,
    ) -> Self {
        Self {
            robot_id: robot_id.into(),
            request_type: RequestType::RtMoveCartesian,
            waypoints,
            request_id: request_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: JointVector,
    pub qd: JointVector,
    pub qdd: JointVector,
    pub timestamp: f64,
}

impl RobotState {
    pub fn at_rest(q: JointVector, timestamp: f64) -> Self {
        let n = q.len();
        Self {
            q,
            qd: JointVector::zeros(n),
            qdd: JointVector::zeros(n),
            timestamp,
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).chain(self.qdd.iter()).all(|v| v.is_finite())
            && self.timestamp.is_finite()
    }
}

/// Per-joint solver outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSolveStats {
    pub status: SolveStatus,
    pub iterations: usize,
    pub solve_time: f64,
}

/// A solved request. Trajectory times are local; absolute time `t` maps to
/// `t - epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub joints: Vec<JointTrajectory>,
    pub joint_waypoints: Vec<JointVector>,
    pub epoch: f64,
    pub request_id: String,
    pub initial: RobotState,
    pub stats: Vec<JointSolveStats>,
    /// Wall time spent in IK plus all QP solves.
    pub plan_time: f64,
}

impl Plan {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// `T_N`, local.
    pub fn duration(&self) -> f64 {
        self.joints[0].total_time()
    }

    pub fn end_time(&self) -> f64 {
        self.epoch + self.duration()
    }

    /// Local times `T_1..T_N`.
    pub fn waypoint_times(&self) -> Vec<f64> {
        self.joints[0].segments().iter().map(Segment::end_time).collect()
    }

    pub fn solve_time(&self) -> f64 {
        self.stats.iter().map(|s| s.solve_time).sum()
    }

    /// Commanded `(q, qd, qdd)` at absolute time `t`; holds past `T_N`.
    pub fn state_at(&self, t: f64) -> Result<RobotState, PlanError> {
        if !(t >= self.epoch) {
            return Err(PlanError::BeforeEpoch {
                t,
                epoch: self.epoch,
            });
        }
        let local = t - self.epoch;
        let n = self.dof();
        let mut state = RobotState::at_rest(JointVector::zeros(n), t);
        for (j, traj) in self.joints.iter().enumerate() {
            let s = traj.sample(local);
            state.q[j] = s.q;
            state.qd[j] = s.qd;
            state.qdd[j] = s.qdd;
        }
        Ok(state)
    }

    /// Largest `q`/`qd`/`qdd` jump over all interior junctions and joints.
    pub fn max_junction_residual(&self) -> f64 {
        self.joints
            .iter()
            .flat_map(|t| t.junction_residuals())
            .map(|r| r.max_abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|qd|` or `|qdd|` at `T_N`.
    pub fn terminal_residual(&self) -> f64 {
        self.joints
            .iter()
            .map(|t| {
                let s = t.terminal();
                s.qd.abs().max(s.qdd.abs())
            })
            .fold(0.0, f64::max)
    }

    /// Largest `|q(T_i) - d_i|`.
    pub fn pass_through_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, traj) in self.joints.iter().enumerate() {
            for (seg, target) in traj.segments().iter().zip(&self.joint_waypoints) {
                worst = worst.max((seg.eval_local(1.0, 0) - target[j]).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerSettings {
    pub degree: usize,
    pub solver: SolverSettings,
    pub ik: IkSettings,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            solver: SolverSettings::default(),
            ik: IkSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Planner {
    chain: Arc<ChainConfig>,
    settings: PlannerSettings,
}

impl Planner {
    pub fn new(chain: Arc<ChainConfig>, settings: PlannerSettings) -> Result<Self, PlanError> {
        if settings.degree < MIN_DEGREE {
            return Err(PlanError::Validation(format!(
                "degree {} is below the minimum of {MIN_DEGREE}",
                settings.degree
            )));
        }
        Ok(Self { chain, settings })
    }

    pub fn with_defaults(chain: Arc<ChainConfig>) -> Self {
        Self {
            chain,
            settings: PlannerSettings::default(),
        }
    }

    pub fn chain(&self) -> &Arc<ChainConfig> {
        &self.chain
    }

    pub fn settings(&self) -> &PlannerSettings {
        &self.settings
    }

    /// Shortest accepted segment: two control ticks.
    pub fn min_duration(&self) -> f64 {
        2.0 / self.chain.control_frequency()
    }

    pub fn validate(&self, request: &PlanRequest) -> Result<(), PlanError> {
        if request.waypoints.is_empty() {
            return Err(PlanError::Validation("waypoints: empty".into()));
        }
        let min = self.min_duration();
        for (i, w) in request.waypoints.iter().enumerate() {
            // Small slack so that exactly 2/f_c survives float round-off.
            if !(w.duration.is_finite() && w.duration >= min * (1.0 - 1e-9)) {
                return Err(PlanError::Validation(format!(
                    "waypoint {i}: duration {} is below the minimum of {min} s",
                    w.duration
                )));
            }
            if !w.pose.is_finite() {
                return Err(PlanError::Validation(format!("waypoint {i}: non-finite pose")));
            }
        }
        Ok(())
    }

    fn validate_state(&self, s0: &RobotState) -> Result<(), PlanError> {
        let dof = self.chain.dof();
        for v in [&s0.q, &s0.qd, &s0.qdd] {
            if v.len() != dof {
                return Err(ChainError::Dimension {
                    expected: dof,
                    got: v.len(),
                }
                .into());
            }
        }
        if !s0.is_finite() {
            return Err(PlanError::Validation("initial state: non-finite".into()));
        }
        if !self.chain.within_limits(&s0.q, 1e-9) {
            return Err(PlanError::Validation("initial state: outside joint limits".into()));
        }
        Ok(())
    }

    /// Seeded IK chain: waypoint `i` starts from the solution of `i - 1`,
    /// the first from `q0`.
    pub fn solve_ik(
        &self,
        waypoints: &[CartesianWaypoint],
        q0: &JointVector,
    ) -> Result<Vec<JointVector>, PlanError> {
        let mut seed = q0.clone();
        let mut out = Vec::with_capacity(waypoints.len());
        for (index, w) in waypoints.iter().enumerate() {
            let q = self
                .chain
                .inverse_kinematics(&w.pose, &seed, &self.settings.ik)
                .map_err(|source| PlanError::Ik { index, source })?;
            seed = q.clone();
            out.push(q);
        }
        Ok(out)
    }

    /// Plan `request` from `s0`; the plan epoch is `s0.timestamp`.
    pub fn plan(&self, request: &PlanRequest, s0: &RobotState) -> Result<Plan, PlanError> {
        self.validate(request)?;
        self.validate_state(s0)?;
        let started = std::time::Instant::now();
        let targets = self.solve_ik(&request.waypoints, &s0.q)?;
        let durations: Vec<f64> = request.waypoints.iter().map(|w| w.duration).collect();
        let fc = self.chain.control_frequency();

        let mut joints = Vec::with_capacity(self.chain.dof());
        let mut stats = Vec::with_capacity(self.chain.dof());
        for j in 0..self.chain.dof() {
            let wps: Vec<JointWaypoint> = targets
                .iter()
                .zip(&durations)
                .map(|(q, &duration)| JointWaypoint {
                    position: q[j],
                    duration,
                })
                .collect();
            let initial = BoundaryState {
                q: s0.q[j],
                qd: s0.qd[j],
                qdd: s0.qdd[j],
            };
            let limits = JointLimits {
                v_max: self.chain.v_max()[j],
                a_max: self.chain.a_max()[j],
            };
            let qp = assemble_qp(&wps, initial, self.settings.degree, fc, limits)
                .map_err(|e: QpBuildError| qp_error(j, e.to_string()))?;
            let sol = solve(&qp, &self.settings.solver)
                .map_err(|e: SolveError| qp_error(j, e.to_string()))?;
            if sol.status != SolveStatus::Solved {
                return Err(qp_error(j, sol.status.to_string()));
            }
            joints.push(trajectory_from_coeffs(sol.p.as_slice(), self.settings.degree, &durations)?);
            stats.push(JointSolveStats {
                status: sol.status,
                iterations: sol.iterations,
                solve_time: sol.solve_time,
            });
        }

        Ok(Plan {
            joints,
            joint_waypoints: targets,
            epoch: s0.timestamp,
            request_id: request.request_id.clone(),
            initial: s0.clone(),
            stats,
            plan_time: started.elapsed().as_secs_f64(),
        })
    }

    /// Replace `active` at `t_now`, starting from its commanded reference.
    /// On error the caller keeps `active`.
    pub fn preempt(&self, active: &Plan, t_now: f64, request: &PlanRequest) -> Result<Plan, PlanError> {
        self.validate(request)?;
        let s0 = active.state_at(t_now)?;
        self.plan(request, &s0)
    }

    /// Commanded state and its end-effector pose at absolute time `t`.
    pub fn reference_at(&self, plan: &Plan, t: f64) -> Result<(RobotState, Pose), PlanError> {
        let state = plan.state_at(t)?;
        let pose = self.chain.forward_kinematics(&state.q)?;
        Ok((state, pose))
    }

    /// Plan a single constant-pose hold at `q` (no IK, no QP).
    pub fn hold(&self, q: JointVector, epoch: f64, request_id: impl Into<String>) -> Result<Plan, PlanError> {
        let degree = self.settings.degree;
        let d = self.min_duration();
        let joints = q
            .iter()
            .map(|&qj| {
                let mut coeffs = vec![0.0; degree + 1];
                coeffs[0] = qj;
                trajectory_from_coeffs(&coeffs, degree, &[d])
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Plan {
            joints,
            joint_waypoints: vec![q.clone()],
            epoch,
            request_id: request_id.into(),
            initial: RobotState::at_rest(q, epoch),
            stats: Vec::new(),
            plan_time: 0.0,
        })
    }
}

fn qp_error(joint: usize, reason: String) -> PlanError {
    PlanError::Qp { joint, reason }
}

fn trajectory_from_coeffs(
    p: &[f64],
    degree: usize,
    durations: &[f64],
) -> Result<JointTrajectory, PlanError> {
    let width = degree + 1;
    let mut start = 0.0;
    let mut segments = Vec::with_capacity(durations.len());
    for (i, &d) in durations.iter().enumerate() {
        let seg = Segment::new(p[i * width..(i + 1) * width].to_vec(), start, d)
            .map_err(|e| PlanError::Validation(e.to_string()))?;
        start = seg.end_time();
        segments.push(seg);
    }
    JointTrajectory::new(segments).map_err(|e| PlanError::Validation(e.to_string()))
}

/// Pose helper for building requests: `base` translated by `delta`, same
/// orientation.
pub fn offset_pose(base: &Pose, delta: Vector3<f64>) -> Pose {
    Pose::new(base.position + delta, base.orientation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::fixtures::{six_dof, six_dof_home};
    use proptest::prelude::*;

    fn planner() -> Planner {
        Planner::with_defaults(Arc::new(six_dof()))
    }

    fn home_pose(p: &Planner) -> Pose {
        p.chain().forward_kinematics(&six_dof_home()).unwrap()
    }

    fn line_request(p: &Planner, n: usize, d: f64) -> PlanRequest {
        let base = home_pose(p);
        let wps = (1..=n)
            .map(|i| {
                let s = i as f64 / n as f64;
                CartesianWaypoint::new(offset_pose(&base, Vector3::new(0.0, 0.15 * s, -0.05 * s)), d)
            })
            .collect();
        PlanRequest::new("arm", "line", wps)
    }

    fn circle_request(p: &Planner, n: usize, d: f64) -> PlanRequest {
        let base = home_pose(p);
        let r = 0.06;
        let wps = (1..=n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                CartesianWaypoint::new(
                    offset_pose(&base, Vector3::new(0.0, r * a.sin(), r * (1.0 - a.cos()))),
                    d,
                )
            })
            .collect();
        PlanRequest::new("arm", "circle", wps)
    }

    fn check_plan_invariants(p: &Planner, plan: &Plan) {
        assert!(plan.pass_through_error() <= 1e-6, "pass {}", plan.pass_through_error());
        assert!(plan.max_junction_residual() <= 1e-6, "junction {}", plan.max_junction_residual());
        assert!(plan.terminal_residual() <= 1e-6, "terminal {}", plan.terminal_residual());
        let fc = p.chain().control_frequency();
        let ticks = (plan.duration() * fc).round() as usize;
        for k in 0..=ticks {
            let s = plan.state_at(plan.epoch + k as f64 / fc).unwrap();
            for j in 0..plan.dof() {
                assert!(s.qd[j].abs() <= p.chain().v_max()[j] + 1e-6);
                assert!(s.qdd[j].abs() <= p.chain().a_max()[j] + 1e-6);
            }
        }
    }

    #[test]
    fn line_request_spans_seven_segments() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let plan = p.plan(&line_request(&p, 7, 0.5), &s0).unwrap();
        assert!((plan.duration() - 3.5).abs() < 1e-12);
        assert_eq!(plan.joint_waypoints.len(), 7);
        let times = plan.waypoint_times();
        for (i, w) in plan.joint_waypoints.iter().enumerate() {
            let s = plan.state_at(times[i]).unwrap();
            assert!((&s.q - w).amax() <= 1e-6);
        }
        check_plan_invariants(&p, &plan);
    }

    #[test]
    fn circle_request_spans_nine_seconds() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 2.0);
        let plan = p.plan(&circle_request(&p, 18, 0.5), &s0).unwrap();
        assert!((plan.duration() - 9.0).abs() < 1e-12);
        assert!((plan.end_time() - 11.0).abs() < 1e-12);
        check_plan_invariants(&p, &plan);
    }

    #[test]
    fn reference_at_epoch_and_end() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 1.0);
        let plan = p.plan(&line_request(&p, 3, 0.5), &s0).unwrap();
        let (start, _) = p.reference_at(&plan, 1.0).unwrap();
        assert!((&start.q - &s0.q).amax() <= 1e-9);
        assert!(start.qd.amax() <= 1e-9 && start.qdd.amax() <= 1e-9);
        let (end, pose) = p.reference_at(&plan, plan.end_time()).unwrap();
        assert!((&end.q - plan.joint_waypoints.last().unwrap()).amax() <= 1e-6);
        assert_eq!(end.qd.amax(), 0.0);
        assert_eq!(end.qdd.amax(), 0.0);
        let (dp, _) = crate::chain::pose_distance(&pose, &plan_target(&p, &line_request(&p, 3, 0.5)));
        assert!(dp <= 1e-4);
        assert!(matches!(p.reference_at(&plan, 0.5), Err(PlanError::BeforeEpoch { .. })));
    }

    fn plan_target(_p: &Planner, r: &PlanRequest) -> Pose {
        r.waypoints.last().unwrap().pose
    }

    #[test]
    fn single_waypoint_at_current_pose_holds() {
        let p = planner();
        let q0 = six_dof_home();
        let s0 = RobotState::at_rest(q0.clone(), 0.0);
        let req = PlanRequest::new("arm", "hold", vec![CartesianWaypoint::new(home_pose(&p), 1.0)]);
        let plan = p.plan(&req, &s0).unwrap();
        for k in 0..=100 {
            let s = plan.state_at(k as f64 * 0.01).unwrap();
            assert!((&s.q - &q0).amax() <= 1e-8);
            assert!(s.qd.amax() <= 1e-8);
        }
        for traj in &plan.joints {
            let c = traj.segments()[0].coeffs();
            assert!(c[3..].iter().all(|v| v.abs() <= 1e-8), "{c:?}");
        }
    }

    #[test]
    fn validation_messages() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let empty = PlanRequest::new("arm", "e", vec![]);
        assert_eq!(p.plan(&empty, &s0).unwrap_err().to_string(), "waypoints: empty");
        let mut req = line_request(&p, 2, 0.5);
        req.waypoints[1].duration = 0.0;
        let err = p.plan(&req, &s0).unwrap_err();
        assert!(err.to_string().contains("duration"), "{err}");
        req.waypoints[1].duration = 0.015;
        assert!(p.plan(&req, &s0).unwrap_err().to_string().contains("duration"));
        req.waypoints[1].duration = 0.02;
        req.waypoints[1].pose = req.waypoints[0].pose;
        assert!(p.plan(&req, &s0).is_ok());
    }

    #[test]
    fn unreachable_waypoint_rejects_request() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let mut req = line_request(&p, 3, 0.5);
        req.waypoints[1].pose.position = Vector3::new(3.0, 0.0, 0.0);
        match p.plan(&req, &s0) {
            Err(PlanError::Ik { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infeasible_timing_rejects_request() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let base = home_pose(&p);
        let req = PlanRequest::new(
            "arm",
            "fast",
            vec![CartesianWaypoint::new(offset_pose(&base, Vector3::new(0.0, 0.3, 0.0)), 0.05)],
        );
        let err = p.plan(&req, &s0).unwrap_err();
        assert_eq!(err.stage(), "qp", "{err}");
    }

    #[test]
    fn planning_is_deterministic() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let req = circle_request(&p, 6, 0.5);
        let a = p.plan(&req, &s0).unwrap();
        let b = p.plan(&req, &s0).unwrap();
        assert_eq!(a.joints, b.joints);
        assert_eq!(a.joint_waypoints, b.joint_waypoints);
    }

    #[test]
    fn preempt_starts_from_reference() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let base = home_pose(&p);
        let first = PlanRequest::new(
            "arm",
            "a",
            vec![CartesianWaypoint::new(offset_pose(&base, Vector3::new(0.0, 0.1, 0.0)), 1.5)],
        );
        let active = p.plan(&first, &s0).unwrap();
        let second = PlanRequest::new(
            "arm",
            "b",
            vec![CartesianWaypoint::new(offset_pose(&base, Vector3::new(0.0, 0.05, 0.05)), 1.5)],
        );
        let next = p.preempt(&active, 1.0, &second).unwrap();
        assert_eq!(next.epoch, 1.0);
        let old = active.state_at(1.0).unwrap();
        let new = next.state_at(1.0).unwrap();
        assert!((&old.q - &new.q).amax() <= 1e-9);
        assert!((&old.qd - &new.qd).amax() <= 1e-9);
        assert!((&old.qdd - &new.qdd).amax() <= 1e-9);
    }

    #[test]
    fn preempt_with_remaining_goal_is_smooth() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let req = line_request(&p, 1, 1.0);
        let active = p.plan(&req, &s0).unwrap();
        let same = PlanRequest::new("arm", "same", vec![CartesianWaypoint::new(req.waypoints[0].pose, 1.0)]);
        let next = p.preempt(&active, 1.5, &same).unwrap();
        let end = active.state_at(1.5).unwrap();
        for k in 0..=100 {
            let s = next.state_at(1.5 + k as f64 * 0.01).unwrap();
            assert!((&s.q - &end.q).amax() <= 1e-6);
        }
    }

    #[test]
    fn failed_preempt_leaves_active_plan() {
        let p = planner();
        let s0 = RobotState::at_rest(six_dof_home(), 0.0);
        let active = p.plan(&line_request(&p, 2, 0.5), &s0).unwrap();
        let snapshot = active.clone();
        let mut bad = line_request(&p, 2, 0.5);
        bad.waypoints[0].pose.position.x = 5.0;
        assert!(p.preempt(&active, 0.3, &bad).is_err());
        assert_eq!(active, snapshot);
    }

    #[test]
    fn teleop_preemptions_are_continuous() {
        let p = planner();
        let fc = p.chain().control_frequency();
        let base = home_pose(&p);
        // Starts at rest on the home pose.
        let master = |t: f64| {
            let t = t.max(0.0);
            offset_pose(
                &base,
                Vector3::new(
                    0.02 * (1.0 - (0.7 * t).cos()),
                    0.04 * (1.0 - (0.9 * t).cos()),
                    -0.03 * (1.0 - (1.3 * t).cos()),
                ),
            )
        };
        let mut active = p.hold(six_dof_home(), 0.0, "init").unwrap();
        let mut worst: f64 = 0.0;
        for k in 1..=110usize {
            let t_now = k as f64 * 0.04;
            let wps = (0..5)
                .map(|i| CartesianWaypoint::new(master(t_now - 0.16 + 0.04 * i as f64), 0.04))
                .collect();
            let req = PlanRequest::new("arm", format!("r{k}"), wps);
            let next = p.preempt(&active, t_now, &req).unwrap_or_else(|e| panic!("k={k}: {e}"));
            let a = active.state_at(t_now).unwrap();
            let b = next.state_at(t_now).unwrap();
            worst = worst
                .max((&a.q - &b.q).amax())
                .max((&a.qd - &b.qd).amax())
                .max((&a.qdd - &b.qdd).amax());
            assert!(next.max_junction_residual() <= 1e-6);
            active = next;
        }
        assert!(worst <= 1e-6, "worst jump {worst}");
        assert!((fc - 100.0).abs() < 1e-12);
    }

    #[test]
    fn waypoint_record_roundtrip() {
        let w = CartesianWaypoint::new(Pose::from_array([0.1, -0.2, 0.3, 0.01, 0.02, -0.03]), 0.5);
        let text = serde_json::to_string(&w).unwrap();
        assert_eq!(text, r#"{"pose":[0.1,-0.2,0.3,0.01,0.02,-0.03],"duration":0.5}"#);
        let back: CartesianWaypoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, w);
        assert!(parse_waypoints("[]").unwrap().is_empty());
        assert!(parse_waypoints("{").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_small_moves_keep_invariants(
            dx in -0.05f64..0.05, dy in -0.05f64..0.05, dz in -0.05f64..0.05,
            n in 1usize..4, d in 0.3f64..1.0,
        ) {
            let p = planner();
            let base = home_pose(&p);
            let wps = (1..=n)
                .map(|i| {
                    let s = i as f64 / n as f64;
                    CartesianWaypoint::new(offset_pose(&base, Vector3::new(dx * s, dy * s, dz * s)), d)
                })
                .collect();
            let s0 = RobotState::at_rest(six_dof_home(), 0.0);
            let plan = p.plan(&PlanRequest::new("arm", "p", wps), &s0).unwrap();
            check_plan_invariants(&p, &plan);
            let s = plan.state_at(0.0).unwrap();
            prop_assert!((&s.q - &s0.q).amax() <= 1e-9);
        }
    }
}
