//! Line-delimited JSON interface: request/ack/telemetry wire types, the
//! request handler shared by the live server and tests, and the solve-time
//! benchmark.

pub mod bench;
pub mod server;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::planner::{CartesianWaypoint, PlanRequest, RequestType};
use crate::runtime::{Intake, TelemetryRecord};

/// Request type that subscribes the connection to a robot's telemetry.
pub const SUBSCRIBE_TYPE: &str = "subscribe-telemetry";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: String,
    pub robot: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub waypoints: Vec<CartesianWaypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub id: String,
    pub status: AckStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Ack {
    pub fn accepted(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            status: AckStatus::Accepted,
            reason: None,
        }
    }

    pub fn rejected(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            status: AckStatus::Rejected,
            reason: Some(reason.into()),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == AckStatus::Accepted
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("ack serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub robot: String,
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    pub pose: [f64; 6],
    pub request: String,
}

impl TelemetryMessage {
    pub fn from_record(robot: &str, r: &TelemetryRecord) -> Self {
        Self {
            robot: robot.to_string(),
            t: r.t,
            q: r.reference.q.iter().copied().collect(),
            qd: r.reference.qd.iter().copied().collect(),
            qdd: r.reference.qdd.iter().copied().collect(),
            pose: r.ee_pose_ref.to_array(),
            request: r.active_request_id.clone().unwrap_or_default(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("telemetry serializes")
    }
}

/// Outcome of one inbound line.
#[derive(Debug, Clone, PartialEq)]
pub enum Handled {
    Ack(Ack),
    /// Accepted subscription to the named robot's telemetry.
    Subscribe(Ack, String),
}

impl Handled {
    pub fn ack(&self) -> &Ack {
        match self {
            Handled::Ack(a) | Handled::Subscribe(a, _) => a,
        }
    }
}

/// Time source for request receipt; the live server uses wall time since
/// start, tests can inject their own.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

#[derive(Debug, Clone)]
pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }

    pub fn start(&self) -> Instant {
        self.start
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Robot id to request intake.
#[derive(Clone)]
pub struct Service {
    robots: BTreeMap<String, Intake>,
    clock: Arc<dyn Clock>,
}

impl Service {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            robots: BTreeMap::new(),
            clock,
        }
    }

    pub fn add_robot(&mut self, id: impl Into<String>, intake: Intake) {
        self.robots.insert(id.into(), intake);
    }

    pub fn robots(&self) -> impl Iterator<Item = &str> {
        self.robots.keys().map(String::as_str)
    }

    pub fn intake(&self, robot: &str) -> Option<&Intake> {
        self.robots.get(robot)
    }

    /// Parse, validate and plan one request line at the current clock time.
    pub fn handle_line(&self, line: &str) -> Handled {
        self.handle_line_at(line, self.clock.now())
    }

    pub fn handle_line_at(&self, line: &str, t_now: f64) -> Handled {
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) => return Handled::Ack(Ack::rejected("", "parse")),
        };
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let request: WireRequest = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => return Handled::Ack(Ack::rejected(id, format!("parse: {e}"))),
        };
        let Some(intake) = self.robots.get(&request.robot) else {
            return Handled::Ack(Ack::rejected(id, format!("unknown robot: {}", request.robot)));
        };
        if request.kind == SUBSCRIBE_TYPE {
            return Handled::Subscribe(Ack::accepted(id), request.robot);
        }
        if request.kind != RequestType::RtMoveCartesian.as_str() {
            return Handled::Ack(Ack::rejected(id, format!("unsupported type: {}", request.kind)));
        }
        let plan_request = PlanRequest::new(request.robot, request.id, request.waypoints);
        match intake.submit(&plan_request, t_now) {
            Ok(_) => Handled::Ack(Ack::accepted(id)),
            Err(e) => Handled::Ack(Ack::rejected(id, format!("{}: {e}", e.stage()))),
        }
    }
}
