//! Execution side: a fixed-rate dispatch loop over an atomically swappable
//! plan, a simulated arm standing in for the driver, and a scenario runner
//! driving both on a simulated clock.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{pose_distance, ChainConfig, ChainError, JointVector, Pose};
use crate::planner::{CartesianWaypoint, Plan, PlanError, PlanRequest, Planner, PlannerSettings, RobotState};

/// Slack on the inter-tick step bound `v_max / f_c`.
pub const TICK_STEP_SLACK: f64 = 1e-3;
/// Tolerance on sampled limit compliance.
pub const LIMIT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("clock regression: tick at {t} after {previous}")]
    ClockRegression { previous: f64, t: f64 },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("scenario: {0}")]
    Script(String),
    #[error("request {id} at t={t}: expected {expected}, got {got}{}", reason.as_ref().map(|r| format!(" ({r})")).unwrap_or_default())]
    Expectation {
        id: String,
        t: f64,
        expected: String,
        got: String,
        reason: Option<String>,
    },
    #[error("assertion failed at t={t}: {message}")]
    Assertion { t: f64, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Atomically replaceable handle on the active plan. Readers get a whole
/// plan, never a mixture.
#[derive(Debug)]
pub struct PlanSlot(RwLock<Arc<Plan>>);

impl PlanSlot {
    pub fn new(plan: Plan) -> Self {
        Self(RwLock::new(Arc::new(plan)))
    }

    pub fn load(&self) -> Arc<Plan> {
        self.0.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn store(&self, plan: Arc<Plan>) {
        *self.0.write().unwrap_or_else(|e| e.into_inner()) = plan;
    }
}

/// Encoder side of a simulated arm. `q_enc += (q_ref - q_enc) dt / lag` per
/// tick (exact copy at zero lag), plus optional Gaussian measurement noise.
#[derive(Debug, Clone)]
pub struct SimArm {
    chain: Arc<ChainConfig>,
    tracking_lag: f64,
    noise_std: f64,
    state: RobotState,
    rng: ChaCha8Rng,
}

impl SimArm {
    pub fn new(
        chain: Arc<ChainConfig>,
        initial: RobotState,
        tracking_lag: f64,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self, RuntimeError> {
        if !(tracking_lag >= 0.0 && tracking_lag.is_finite()) {
            return Err(RuntimeError::Script(format!("tracking_lag must be >= 0, got {tracking_lag}")));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(RuntimeError::Script(format!("noise_std must be >= 0, got {noise_std}")));
        }
        if initial.dof() != chain.dof() {
            return Err(ChainError::Dimension {
                expected: chain.dof(),
                got: initial.dof(),
            }
            .into());
        }
        Ok(Self {
            chain,
            tracking_lag,
            noise_std,
            state: initial,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn ideal(chain: Arc<ChainConfig>, initial: RobotState) -> Self {
        Self::new(chain, initial, 0.0, 0.0, 0).expect("zero lag and noise are valid")
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    /// Advance by `dt` toward `reference` and return the measured state.
    pub fn step(&mut self, reference: &RobotState, dt: f64) -> RobotState {
        if self.tracking_lag == 0.0 {
            self.state = reference.clone();
        } else if dt > 0.0 {
            let gain = (dt / self.tracking_lag).min(1.0);
            let prev = self.state.clone();
            self.state.q += (&reference.q - &prev.q) * gain;
            self.state.qd = (&self.state.q - &prev.q) / dt;
            self.state.qdd = (&self.state.qd - &prev.qd) / dt;
            self.state.timestamp = reference.timestamp;
            self.chain.clamp(&mut self.state.q);
        } else {
            self.state.timestamp = reference.timestamp;
        }
        let mut measured = self.state.clone();
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("finite std");
            for v in measured.q.iter_mut() {
                *v += normal.sample(&mut self.rng);
            }
            self.chain.clamp(&mut measured.q);
        }
        measured
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub t: f64,
    pub reference: RobotState,
    pub encoder: RobotState,
    pub ee_pose_ref: Pose,
    pub ee_pose_enc: Pose,
    /// `None` while the initial hold is active.
    pub active_request_id: Option<String>,
}

/// Request side of a session; clones share the plan slot and serialize
/// their replans.
#[derive(Debug, Clone)]
pub struct Intake {
    planner: Arc<Planner>,
    slot: Arc<PlanSlot>,
    lock: Arc<Mutex<()>>,
}

impl Intake {
    /// Replan from the commanded reference at `t_now` and swap the result in.
    /// On error the active plan is left untouched.
    pub fn submit(&self, request: &PlanRequest, t_now: f64) -> Result<Arc<Plan>, PlanError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let active = self.slot.load();
        let t_from = t_now.max(active.epoch);
        let plan = Arc::new(self.planner.preempt(&active, t_from, request)?);
        self.slot.store(plan.clone());
        Ok(plan)
    }

    pub fn active(&self) -> Arc<Plan> {
        self.slot.load()
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }
}

/// Dispatch side of a session.
#[derive(Debug)]
pub struct Session {
    planner: Arc<Planner>,
    slot: Arc<PlanSlot>,
    arm: SimArm,
    intake: Intake,
    last_t: Option<f64>,
}

/// Request id carried by the initial hold plan.
const HOLD_ID: &str = "";

impl Session {
    /// Start holding `initial.q` from `initial.timestamp`.
    pub fn new(planner: Planner, arm: SimArm) -> Result<Self, RuntimeError> {
        let initial = arm.state().clone();
        if !planner.chain().within_limits(&initial.q, 1e-9) {
            return Err(RuntimeError::Script("initial state outside joint limits".into()));
        }
        let hold = planner.hold(initial.q.clone(), initial.timestamp, HOLD_ID)?;
        let planner = Arc::new(planner);
        let slot = Arc::new(PlanSlot::new(hold));
        let intake = Intake {
            planner: planner.clone(),
            slot: slot.clone(),
            lock: Arc::new(Mutex::new(())),
        };
        Ok(Self {
            planner,
            slot,
            arm,
            intake,
            last_t: None,
        })
    }

    pub fn intake(&self) -> Intake {
        self.intake.clone()
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn active(&self) -> Arc<Plan> {
        self.slot.load()
    }

    /// Evaluate the active plan at `t`, advance the arm and return the record.
    pub fn tick(&mut self, t: f64) -> Result<TelemetryRecord, RuntimeError> {
        if let Some(previous) = self.last_t {
            if !(t > previous) {
                return Err(RuntimeError::ClockRegression { previous, t });
            }
        }
        let plan = self.slot.load();
        // A plan swapped in between reading the clock and loading the slot
        // may start marginally after `t`.
        let mut reference = plan.state_at(t.max(plan.epoch))?;
        reference.timestamp = t;
        let dt = self.last_t.map_or(0.0, |p| t - p);
        let encoder = self.arm.step(&reference, dt);
        let chain = self.planner.chain();
        let ee_pose_ref = chain.forward_kinematics(&reference.q)?;
        let ee_pose_enc = if encoder.q == reference.q {
            ee_pose_ref
        } else {
            chain.forward_kinematics(&encoder.q)?
        };
        self.last_t = Some(t);
        Ok(TelemetryRecord {
            t,
            reference,
            encoder,
            ee_pose_ref,
            ee_pose_enc,
            active_request_id: (plan.request_id != HOLD_ID).then(|| plan.request_id.clone()),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetryLog {
    pub records: Vec<TelemetryRecord>,
}

impl TelemetryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One row per tick: time, request, reference q/qd/qdd, encoder q, and
    /// both end-effector poses.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RuntimeError> {
        let mut out = csv::Writer::from_writer(writer);
        let dof = self.records.first().map_or(0, |r| r.reference.dof());
        let mut header = vec!["t".to_string(), "request".to_string()];
        for prefix in ["q", "qd", "qdd", "q_enc"] {
            header.extend((0..dof).map(|j| format!("{prefix}{j}")));
        }
        for prefix in ["ref", "enc"] {
            header.extend(["x", "y", "z", "roll", "pitch", "yaw"].iter().map(|c| format!("{prefix}_{c}")));
        }
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![format!("{}", r.t), r.active_request_id.clone().unwrap_or_default()];
            for v in [&r.reference.q, &r.reference.qd, &r.reference.qdd, &r.encoder.q] {
                row.extend(v.iter().map(|x| format!("{x:e}")));
            }
            for p in [&r.ee_pose_ref, &r.ee_pose_enc] {
                row.extend(p.to_array().iter().map(|x| format!("{x:e}")));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    #[default]
    Accepted,
    Rejected,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScenarioAction {
    SendRequest {
        id: String,
        waypoints: Vec<CartesianWaypoint>,
        #[serde(default)]
        expect: Expectation,
    },
    /// Chase target: `position + velocity (t - t_event)` until the next move.
    MoveTarget {
        position: [f64; 3],
        #[serde(default)]
        velocity: [f64; 3],
    },
    /// `check` is `at_rest` or `pose_near` (with `pose`).
    Assert {
        check: String,
        #[serde(default = "default_assert_tol")]
        tol: f64,
        #[serde(default)]
        pose: Option<[f64; 6]>,
    },
}

fn default_assert_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub t: f64,
    #[serde(flatten)]
    pub action: ScenarioAction,
}

/// Low-rate perception loop: observe the target, send a single-waypoint
/// request toward it, and declare a grasp once it has stopped moving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaseConfig {
    pub start: f64,
    pub period: f64,
    pub segment_duration: f64,
    pub grasp_threshold: f64,
    pub grasp_cycles: usize,
    /// Tool orientation for every chase waypoint; defaults to the start pose.
    #[serde(default)]
    pub orientation: Option<[f64; 3]>,
}

/// Buffered streaming of a recorded master pose log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleopConfig {
    /// CSV with `timestamp,x,y,z,roll,pitch,yaw`, relative to the script.
    pub master_log: String,
    pub rate: f64,
    pub buffer: usize,
    pub segment_duration: f64,
    #[serde(default)]
    pub start: f64,
    /// Uniform receipt delay in `[-jitter, +jitter]` s.
    #[serde(default)]
    pub jitter: f64,
}

fn default_robot() -> String {
    "arm".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    /// Chain file, relative to the script.
    pub chain: String,
    pub fc: f64,
    pub duration: f64,
    #[serde(default = "default_robot")]
    pub robot: String,
    pub initial_q: Vec<f64>,
    #[serde(default)]
    pub tracking_lag: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    #[serde(default)]
    pub chase: Option<ChaseConfig>,
    #[serde(default)]
    pub teleop: Option<TeleopConfig>,
    /// Request whose Cartesian path is compared against the polyline through
    /// its start pose and waypoints.
    #[serde(default)]
    pub path_check: Option<String>,
    #[serde(default)]
    pub planner: Option<PlannerSettings>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ScenarioScript {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut script: Self = serde_json::from_str(&text)
            .map_err(|e| RuntimeError::Script(format!("{}: {e}", path.display())))?;
        script.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(script)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    /// Load the chain, overriding its control frequency with `fc`.
    pub fn load_chain(&self) -> Result<ChainConfig, RuntimeError> {
        let chain = ChainConfig::from_path(self.resolve(&self.chain))?;
        let mut file = chain.to_file();
        file.control_frequency = self.fc;
        Ok(ChainConfig::try_from(file)?)
    }
}

/// One master sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MasterSample {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl MasterSample {
    pub fn pose(&self) -> Pose {
        Pose::from_array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw])
    }
}

pub fn read_master_log(path: impl AsRef<Path>) -> Result<Vec<MasterSample>, RuntimeError> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows: Vec<MasterSample> = reader.deserialize().collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(RuntimeError::Script("master log is empty".into()));
    }
    if rows.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(RuntimeError::Script("master log timestamps must increase".into()));
    }
    Ok(rows)
}

/// Linear interpolation of the master position, clamped at both ends.
fn master_position(log: &[MasterSample], t: f64) -> Vector3<f64> {
    let at = |s: &MasterSample| Vector3::new(s.x, s.y, s.z);
    let i = log.partition_point(|s| s.timestamp <= t);
    if i == 0 {
        return at(&log[0]);
    }
    if i == log.len() {
        return at(&log[log.len() - 1]);
    }
    let (a, b) = (&log[i - 1], &log[i]);
    let w = (t - a.timestamp) / (b.timestamp - a.timestamp);
    at(a) * (1.0 - w) + at(b) * w
}

/// Latest master sample at or before `t` (the first one for earlier times).
fn master_latest(log: &[MasterSample], t: f64) -> &MasterSample {
    // Tolerate round-off on the nominal sample grid.
    let i = log.partition_point(|s| s.timestamp <= t + 1e-9);
    &log[i.saturating_sub(1)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub id: String,
    pub t: f64,
    pub accepted: bool,
    pub preempted_active: bool,
    pub reason: Option<String>,
    pub solve_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub fc: f64,
    pub ticks: usize,
    pub duration: f64,
    pub requests: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub preemptions: usize,
    /// Worst interior junction jump over all accepted plans.
    pub max_junction_discontinuity: f64,
    /// Worst jump between old and new reference at a preemption instant.
    pub max_preemption_discontinuity: f64,
    /// Worst `|qd|`/`|qdd|` at `T_N` over all accepted plans.
    pub max_terminal_residual: f64,
    pub max_pass_through_error: f64,
    pub limit_violations: usize,
    pub max_velocity_ratio: f64,
    pub max_acceleration_ratio: f64,
    /// Worst `|q_k - q_{k-1}| / (v_max / f_c)` over ticks and joints.
    pub max_tick_step_ratio: f64,
    pub solve_times: Vec<f64>,
    pub median_solve_time: Option<f64>,
    pub max_solve_time: Option<f64>,
    pub max_path_error: Option<f64>,
    pub pipeline_delay: Option<f64>,
    pub grasp_time: Option<f64>,
    pub final_rest_residual: f64,
    pub final_position_error: Option<f64>,
    pub final_orientation_error: Option<f64>,
    pub max_tracking_error: f64,
    pub outcomes: Vec<RequestOutcome>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub log: TelemetryLog,
    pub report: ScenarioReport,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Distance from `p` to the polyline through `points`.
pub fn polyline_distance(points: &[Vector3<f64>], p: &Vector3<f64>) -> f64 {
    if points.len() == 1 {
        return (p - points[0]).norm();
    }
    points
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            let len2 = d.norm_squared();
            let s = if len2 > 0.0 { ((p - w[0]).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
            (p - (w[0] + d * s)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Lag `tau` minimizing the mean squared distance between the commanded
/// end-effector position at `t` and the master position at `t - tau`, over
/// `records` inside `[t0, t1]`. Grid search on the tick spacing, refined
/// by a parabola through the best three points.
pub fn estimate_delay(
    records: &[TelemetryRecord],
    master: &[MasterSample],
    t0: f64,
    t1: f64,
    max_lag: f64,
    step: f64,
) -> Option<f64> {
    let window: Vec<&TelemetryRecord> = records.iter().filter(|r| r.t >= t0 && r.t <= t1).collect();
    if window.is_empty() {
        return None;
    }
    let cost = |tau: f64| -> f64 {
        window
            .iter()
            .map(|r| (r.ee_pose_ref.position - master_position(master, r.t - tau)).norm_squared())
            .sum::<f64>()
            / window.len() as f64
    };
    let steps = (max_lag / step).round() as usize;
    let costs: Vec<f64> = (0..=steps).map(|k| cost(k as f64 * step)).collect();
    let best = (0..costs.len()).min_by(|&a, &b| costs[a].total_cmp(&costs[b]))?;
    let mut tau = best as f64 * step;
    if best > 0 && best < steps {
        let (a, b, c) = (costs[best - 1], costs[best], costs[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom > 0.0 {
            tau += 0.5 * step * (a - c) / denom;
        }
    }
    Some(tau)
}

enum Pending {
    Script(ScenarioAction),
    Teleop(PlanRequest),
}

struct Queued {
    t: f64,
    order: usize,
    item: Pending,
}

struct TargetMotion {
    t: f64,
    position: Vector3<f64>,
    velocity: Vector3<f64>,
}

impl TargetMotion {
    fn at(&self, t: f64) -> Vector3<f64> {
        self.position + self.velocity * (t - self.t).max(0.0)
    }
}

/// Execute `script` on a simulated clock at `fc`.
pub fn run_scenario(script: &ScenarioScript) -> Result<ScenarioOutcome, RuntimeError> {
    let chain = Arc::new(script.load_chain()?);
    run_scenario_with(script, chain)
}

pub fn run_scenario_with(
    script: &ScenarioScript,
    chain: Arc<ChainConfig>,
) -> Result<ScenarioOutcome, RuntimeError> {
    if !(script.fc > 0.0 && script.duration > 0.0) {
        return Err(RuntimeError::Script("fc and duration must be positive".into()));
    }
    let fc = script.fc;
    let planner = Planner::new(chain.clone(), script.planner.unwrap_or_default())?;
    let q0 = JointVector::from_vec(script.initial_q.clone());
    let arm = SimArm::new(
        chain.clone(),
        RobotState::at_rest(q0.clone(), 0.0),
        script.tracking_lag,
        script.noise_std,
        script.seed,
    )?;
    let mut session = Session::new(planner, arm)?;
    let intake = session.intake();
    let start_pose = chain.forward_kinematics(&q0)?;

    let mut queue: Vec<Queued> = script
        .events
        .iter()
        .enumerate()
        .map(|(order, e)| Queued {
            t: e.t,
            order,
            item: Pending::Script(e.action.clone()),
        })
        .collect();

    let master = match &script.teleop {
        Some(cfg) => {
            let log = read_master_log(script.resolve(&cfg.master_log))?;
            queue.extend(teleop_requests(cfg, &log, &script.robot, script.seed, queue.len())?);
            Some(log)
        }
        None => None,
    };
    queue.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.order.cmp(&b.order)));
    let mut queue = queue.into_iter().peekable();

    let mut target: Option<TargetMotion> = None;
    let mut chase_state = ChaseState::default();
    let chase_orientation = script
        .chase
        .as_ref()
        .and_then(|c| c.orientation)
        .map_or(start_pose.orientation, |o| Vector3::new(o[0], o[1], o[2]));

    let ticks = (script.duration * fc).round() as usize;
    let mut log = TelemetryLog {
        records: Vec::with_capacity(ticks + 1),
    };
    let mut outcomes = Vec::new();
    let mut plans: Vec<(Arc<Plan>, Option<Arc<Plan>>)> = Vec::new();
    let mut last_target_pose: Option<Pose> = None;

    let submit = |request: &PlanRequest,
                  t: f64,
                  outcomes: &mut Vec<RequestOutcome>,
                  plans: &mut Vec<(Arc<Plan>, Option<Arc<Plan>>)>|
     -> Result<bool, PlanError> {
        let before = intake.active();
        let running = before.request_id != HOLD_ID && t < before.end_time();
        match intake.submit(request, t) {
            Ok(plan) => {
                outcomes.push(RequestOutcome {
                    id: request.request_id.clone(),
                    t,
                    accepted: true,
                    preempted_active: running,
                    reason: None,
                    solve_time: Some(plan.solve_time()),
                });
                plans.push((plan, (before.request_id != HOLD_ID).then_some(before)));
                Ok(true)
            }
            Err(e) => {
                outcomes.push(RequestOutcome {
                    id: request.request_id.clone(),
                    t,
                    accepted: false,
                    preempted_active: false,
                    reason: Some(format!("{}: {e}", e.stage())),
                    solve_time: None,
                });
                Ok(false)
            }
        }
    };

    for k in 0..=ticks {
        let t = k as f64 / fc;

        // Events due by this tick are applied before it is dispatched.
        while let Some(q) = queue.peek() {
            if q.t > t {
                break;
            }
            let q = queue.next().expect("peeked");
            match q.item {
                Pending::Script(ScenarioAction::SendRequest { id, waypoints, expect }) => {
                    let request = PlanRequest::new(script.robot.clone(), id.clone(), waypoints.clone());
                    let accepted = submit(&request, q.t, &mut outcomes, &mut plans)?;
                    check_expectation(&id, q.t, expect, accepted, outcomes.last())?;
                    if accepted {
                        last_target_pose = waypoints.last().map(|w| w.pose);
                    }
                }
                Pending::Script(ScenarioAction::MoveTarget { position, velocity }) => {
                    target = Some(TargetMotion {
                        t: q.t,
                        position: Vector3::from(position),
                        velocity: Vector3::from(velocity),
                    });
                }
                Pending::Script(ScenarioAction::Assert { check, tol, pose }) => {
                    let state = intake.active().state_at(q.t.max(intake.active().epoch))?;
                    run_assert(&chain, &state, q.t, &check, tol, pose)?;
                }
                Pending::Teleop(request) => {
                    let accepted = submit(&request, q.t, &mut outcomes, &mut plans)?;
                    if accepted {
                        last_target_pose = request.waypoints.last().map(|w| w.pose);
                    }
                }
            }
        }

        if let (Some(cfg), Some(motion)) = (&script.chase, &target) {
            if let Some(pose) = chase_state.cycle(cfg, t, fc, motion, chase_orientation) {
                let id = format!("chase-{}", chase_state.cycles);
                let request = PlanRequest::new(
                    script.robot.clone(),
                    id,
                    vec![CartesianWaypoint::new(pose, cfg.segment_duration)],
                );
                if submit(&request, t, &mut outcomes, &mut plans)? {
                    last_target_pose = Some(pose);
                }
            }
        }

        log.records.push(session.tick(t)?);
    }

    let report = build_report(
        script,
        &chain,
        &log,
        outcomes,
        &plans,
        master.as_deref(),
        chase_state.grasp_time,
        last_target_pose,
        &start_pose,
    );
    Ok(ScenarioOutcome { log, report })
}

#[derive(Default)]
struct ChaseState {
    cycles: usize,
    next_due: Option<f64>,
    last_observation: Option<Vector3<f64>>,
    still: usize,
    grasp_time: Option<f64>,
}

impl ChaseState {
    /// Returns the pose to chase if a perception cycle fires at `t`.
    fn cycle(
        &mut self,
        cfg: &ChaseConfig,
        t: f64,
        fc: f64,
        motion: &TargetMotion,
        orientation: Vector3<f64>,
    ) -> Option<Pose> {
        if self.grasp_time.is_some() {
            return None;
        }
        let due = *self.next_due.get_or_insert(cfg.start);
        if t + 0.5 / fc < due {
            return None;
        }
        self.cycles += 1;
        self.next_due = Some(due + cfg.period);
        let observed = motion.at(t);
        if let Some(prev) = self.last_observation {
            if (observed - prev).norm() < cfg.grasp_threshold {
                self.still += 1;
            } else {
                self.still = 0;
            }
        }
        self.last_observation = Some(observed);
        if self.still >= cfg.grasp_cycles {
            self.grasp_time = Some(t);
            log::info!("grasp at t={t:.3}");
            return None;
        }
        Some(Pose::new(observed, orientation))
    }
}

fn teleop_requests(
    cfg: &TeleopConfig,
    master: &[MasterSample],
    robot: &str,
    seed: u64,
    order_base: usize,
) -> Result<Vec<Queued>, RuntimeError> {
    if !(cfg.rate > 0.0 && cfg.buffer > 0 && cfg.segment_duration > 0.0 && cfg.jitter >= 0.0) {
        return Err(RuntimeError::Script("teleop: rate, buffer and segment_duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e1e);
    let period = 1.0 / cfg.rate;
    let last = master[master.len() - 1].timestamp;
    let mut out = Vec::new();
    let mut k = 1usize;
    loop {
        let sent = cfg.start + k as f64 * period;
        if sent > last + 1e-9 {
            break;
        }
        let waypoints = (0..cfg.buffer)
            .map(|i| {
                let s = sent - (cfg.buffer - 1 - i) as f64 * period;
                CartesianWaypoint::new(master_latest(master, s).pose(), cfg.segment_duration)
            })
            .collect();
        let delay = if cfg.jitter > 0.0 {
            rand::Rng::gen_range(&mut rng, -cfg.jitter..=cfg.jitter)
        } else {
            0.0
        };
        out.push(Queued {
            t: (sent + delay).max(0.0),
            order: order_base + k,
            item: Pending::Teleop(PlanRequest::new(robot, format!("teleop-{k}"), waypoints)),
        });
        k += 1;
    }
    Ok(out)
}

fn check_expectation(
    id: &str,
    t: f64,
    expect: Expectation,
    accepted: bool,
    outcome: Option<&RequestOutcome>,
) -> Result<(), RuntimeError> {
    let ok = match expect {
        Expectation::Accepted => accepted,
        Expectation::Rejected => !accepted,
        Expectation::Any => true,
    };
    if ok {
        return Ok(());
    }
    Err(RuntimeError::Expectation {
        id: id.to_string(),
        t,
        expected: format!("{expect:?}").to_lowercase(),
        got: if accepted { "accepted" } else { "rejected" }.into(),
        reason: outcome.and_then(|o| o.reason.clone()),
    })
}

fn run_assert(
    chain: &ChainConfig,
    state: &RobotState,
    t: f64,
    check: &str,
    tol: f64,
    pose: Option<[f64; 6]>,
) -> Result<(), RuntimeError> {
    match check {
        "at_rest" => {
            let r = state.qd.amax().max(state.qdd.amax());
            if r > tol {
                return Err(RuntimeError::Assertion {
                    t,
                    message: format!("not at rest: max |qd|,|qdd| = {r:e}"),
                });
            }
        }
        "pose_near" => {
            let want = Pose::from_array(pose.ok_or_else(|| RuntimeError::Script("pose_near needs pose".into()))?);
            let got = chain.forward_kinematics(&state.q)?;
            let (dp, da) = pose_distance(&want, &got);
            if dp > tol || da > tol.max(1e-3) {
                return Err(RuntimeError::Assertion {
                    t,
                    message: format!("pose off by {dp:e} m, {da:e} rad"),
                });
            }
        }
        other => return Err(RuntimeError::Script(format!("unknown assertion {other:?}"))),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    script: &ScenarioScript,
    chain: &ChainConfig,
    log: &TelemetryLog,
    outcomes: Vec<RequestOutcome>,
    plans: &[(Arc<Plan>, Option<Arc<Plan>>)],
    master: Option<&[MasterSample]>,
    grasp_time: Option<f64>,
    last_target: Option<Pose>,
    start_pose: &Pose,
) -> ScenarioReport {
    let fc = script.fc;
    let mut r = ScenarioReport {
        name: script.name.clone(),
        fc,
        ticks: log.len(),
        duration: script.duration,
        requests: outcomes.len(),
        accepted: outcomes.iter().filter(|o| o.accepted).count(),
        rejected: outcomes.iter().filter(|o| !o.accepted).count(),
        preemptions: outcomes.iter().filter(|o| o.preempted_active).count(),
        grasp_time,
        ..Default::default()
    };

    for (plan, previous) in plans {
        r.max_junction_discontinuity = r.max_junction_discontinuity.max(plan.max_junction_residual());
        r.max_terminal_residual = r.max_terminal_residual.max(plan.terminal_residual());
        r.max_pass_through_error = r.max_pass_through_error.max(plan.pass_through_error());
        r.solve_times.push(plan.solve_time());
        if let Some(prev) = previous {
            if let (Ok(a), Ok(b)) = (prev.state_at(plan.epoch), plan.state_at(plan.epoch)) {
                let jump = (&a.q - &b.q).amax().max((&a.qd - &b.qd).amax()).max((&a.qdd - &b.qdd).amax());
                r.max_preemption_discontinuity = r.max_preemption_discontinuity.max(jump);
            }
        }
    }
    r.median_solve_time = median(&r.solve_times);
    r.max_solve_time = r.solve_times.iter().copied().reduce(f64::max);

    let v = chain.v_max();
    let a = chain.a_max();
    for (i, rec) in log.records.iter().enumerate() {
        let mut violated = false;
        for j in 0..chain.dof() {
            let (qd, qdd) = (rec.reference.qd[j].abs(), rec.reference.qdd[j].abs());
            violated |= qd > v[j] + LIMIT_TOL || qdd > a[j] + LIMIT_TOL;
            r.max_velocity_ratio = r.max_velocity_ratio.max(qd / v[j]);
            r.max_acceleration_ratio = r.max_acceleration_ratio.max(qdd / a[j]);
            if i > 0 {
                let dq = (rec.reference.q[j] - log.records[i - 1].reference.q[j]).abs();
                r.max_tick_step_ratio = r.max_tick_step_ratio.max(dq / (v[j] / fc));
            }
        }
        r.limit_violations += usize::from(violated);
        r.max_tracking_error = r.max_tracking_error.max((&rec.reference.q - &rec.encoder.q).amax());
    }

    if let Some(last) = log.records.last() {
        r.final_rest_residual = last.reference.qd.amax().max(last.reference.qdd.amax());
        if let Some(target) = last_target {
            let (dp, da) = pose_distance(&target, &last.ee_pose_ref);
            r.final_position_error = Some(dp);
            r.final_orientation_error = Some(da);
        }
    }

    if let Some(id) = &script.path_check {
        if let Some((plan, _)) = plans.iter().find(|(p, _)| &p.request_id == id) {
            let mut points = Vec::with_capacity(plan.joint_waypoints.len() + 1);
            let from = chain
                .forward_kinematics(&plan.initial.q)
                .map_or(start_pose.position, |p| p.position);
            points.push(from);
            points.extend(
                plan.joint_waypoints
                    .iter()
                    .filter_map(|q| chain.forward_kinematics(q).ok())
                    .map(|p| p.position),
            );
            r.max_path_error = log
                .records
                .iter()
                .filter(|rec| rec.active_request_id.as_deref() == Some(id.as_str()))
                .map(|rec| polyline_distance(&points, &rec.ee_pose_ref.position))
                .reduce(f64::max);
        }
    }

    if let (Some(cfg), Some(master)) = (&script.teleop, master) {
        let t0 = cfg.start + 1.0;
        let t1 = master[master.len() - 1].timestamp;
        r.pipeline_delay = estimate_delay(&log.records, master, t0, t1, 0.5, 1.0 / fc);
    }

    r.outcomes = outcomes;
    r
}
