use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rtmove::chain::{ChainConfig, JointVector};
use rtmove::iface::server::{start, RobotSpec, ServerConfig, ServerHandle};
use rtmove::iface::{Ack, AckStatus, TelemetryMessage};
use rtmove::planner::PlannerSettings;

fn home() -> JointVector {
    JointVector::from_vec(vec![0.0, -1.2, 1.5, -1.9, -1.5708, 0.0])
}

fn chain() -> Arc<ChainConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/six_dof.json");
    Arc::new(ChainConfig::from_path(path).unwrap())
}

fn server(capacity: usize) -> ServerHandle {
    start(ServerConfig {
        addr: "127.0.0.1:0".into(),
        robots: vec![RobotSpec { id: "arm".into(), chain: chain(), initial_q: home() }],
        settings: PlannerSettings::default(),
        queue_capacity: capacity,
    })
    .unwrap()
}

fn request(id: &str, dy: f64, d: f64) -> String {
    let mut p = chain().forward_kinematics(&home()).unwrap().to_array();
    p[1] += dy;
    serde_json::json!({"id": id, "robot": "arm", "type": "rt-move-cartesian",
        "waypoints": [{"pose": p, "duration": d}]})
    .to_string()
}

fn connect(h: &ServerHandle) -> (TcpStream, BufReader<TcpStream>) {
    let s = TcpStream::connect(h.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    let r = BufReader::new(s.try_clone().unwrap());
    (s, r)
}

fn read_line(r: &mut BufReader<TcpStream>) -> String {
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    line
}

#[test]
fn acks_arrive_in_order_under_a_flood() {
    let h = server(64);
    let (mut s, mut r) = connect(&h);
    let mut batch = String::new();
    for i in 0..40 {
        if i % 7 == 3 {
            batch.push_str("garbage\n");
        } else {
            batch.push_str(&request(&format!("r{i}"), 0.001 * (i % 5) as f64, 0.5));
            batch.push('\n');
        }
    }
    s.write_all(batch.as_bytes()).unwrap();
    for i in 0..40 {
        let ack: Ack = serde_json::from_str(&read_line(&mut r)).unwrap();
        if i % 7 == 3 {
            assert_eq!(ack.status, AckStatus::Rejected);
            assert_eq!(ack.reason.as_deref(), Some("parse"));
        } else {
            assert_eq!(ack.id, format!("r{i}"));
            assert_eq!(ack.status, AckStatus::Accepted, "{ack:?}");
        }
    }
    drop(s);
    h.shutdown();
}

#[test]
fn telemetry_streams_at_control_rate() {
    let h = server(256);
    let (mut s, mut r) = connect(&h);
    s.write_all(b"{\"id\":\"sub\",\"robot\":\"arm\",\"type\":\"subscribe-telemetry\"}\n").unwrap();
    let mut got_ack = false;
    let mut msgs = Vec::new();
    let started = Instant::now();
    while msgs.len() < 50 && started.elapsed() < Duration::from_secs(20) {
        let line = read_line(&mut r);
        if let Ok(ack) = serde_json::from_str::<Ack>(&line) {
            assert_eq!(ack.status, AckStatus::Accepted);
            got_ack = true;
            s.write_all(format!("{}\n", request("move", 0.03, 1.0)).as_bytes()).unwrap();
            continue;
        }
        msgs.push(serde_json::from_str::<TelemetryMessage>(&line).unwrap());
    }
    assert!(got_ack);
    assert_eq!(msgs.len(), 50);
    assert!(msgs.windows(2).all(|w| w[1].t > w[0].t));
    assert_eq!(msgs[0].q.len(), 6);
    let span = msgs[49].t - msgs[0].t;
    // 49 intervals at 100 Hz, generous slack for a loaded host.
    assert!(span > 0.3 && span < 5.0, "{span}");
    drop(s);
    h.shutdown();
}

#[test]
fn idle_subscriber_does_not_stall_dispatch() {
    let h = server(4);
    let (mut s, _r) = connect(&h);
    s.write_all(b"{\"id\":\"sub\",\"robot\":\"arm\",\"type\":\"subscribe-telemetry\"}\n").unwrap();
    let before = h.dispatch_stats()[0].1.ticks;
    std::thread::sleep(Duration::from_millis(600));
    let after = h.dispatch_stats()[0].1.ticks;
    // 60 ticks nominal at 100 Hz.
    assert!(after - before >= 30, "{before} -> {after}");
    drop(s);
    h.shutdown();
}
