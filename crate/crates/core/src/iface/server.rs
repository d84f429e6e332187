//! Live service: one dispatch thread per robot ticking on the wall clock,
//! one reader and one writer thread per connection.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::chain::{ChainConfig, JointVector};
use crate::planner::{Planner, PlannerSettings, RobotState};
use crate::runtime::{Session, SimArm};

use super::{Clock, Handled, Service, TelemetryMessage, WallClock};

const POLL: Duration = Duration::from_millis(20);

pub struct RobotSpec {
    pub id: String,
    pub chain: Arc<ChainConfig>,
    pub initial_q: JointVector,
}

pub struct ServerConfig {
    pub addr: String,
    pub robots: Vec<RobotSpec>,
    pub settings: PlannerSettings,
    /// Per-connection outbound queue; a telemetry subscriber whose queue is
    /// full is disconnected.
    pub queue_capacity: usize,
}

/// Dispatch timing observed on the wall clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DispatchStats {
    pub ticks: u64,
    pub max_lateness: f64,
}

struct Subscriber {
    conn: u64,
    robot: String,
    tx: SyncSender<String>,
    stream: Option<TcpStream>,
}

type Subscribers = Arc<Mutex<Vec<Subscriber>>>;

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    stats: Arc<Mutex<Vec<(String, DispatchStats)>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn dispatch_stats(&self) -> Vec<(String, DispatchStats)> {
        self.stats.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    /// Block until the stop flag is raised elsewhere.
    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

pub fn start(config: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(&config.addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let clock = Arc::new(WallClock::new());
    let subscribers: Subscribers = Arc::new(Mutex::new(Vec::new()));
    let stats = Arc::new(Mutex::new(Vec::new()));
    let mut service = Service::new(clock.clone());
    let mut threads = Vec::new();

    for (idx, spec) in config.robots.into_iter().enumerate() {
        let planner = Planner::new(spec.chain.clone(), config.settings)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        let arm = SimArm::ideal(spec.chain.clone(), RobotState::at_rest(spec.initial_q, 0.0));
        let session = Session::new(planner, arm)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        service.add_robot(spec.id.clone(), session.intake());
        stats
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((spec.id.clone(), DispatchStats::default()));
        let fc = spec.chain.control_frequency();
        let (stop, subs, clock, stats) = (stop.clone(), subscribers.clone(), clock.clone(), stats.clone());
        threads.push(std::thread::spawn(move || {
            dispatch_loop(session, spec.id, fc, &*clock, &stop, &subs, &stats, idx)
        }));
    }

    let capacity = config.queue_capacity.max(1);
    let service = Arc::new(service);
    let accept_stop = stop.clone();
    threads.push(std::thread::spawn(move || {
        let mut conns: Vec<JoinHandle<()>> = Vec::new();
        let next_conn = AtomicU64::new(0);
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let (svc, stop, subs) = (service.clone(), accept_stop.clone(), subscribers.clone());
                    let conn = next_conn.fetch_add(1, Ordering::Relaxed);
                    conns.push(std::thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, conn, &svc, &stop, &subs, capacity) {
                            log::debug!("connection closed: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
                Err(e) => log::warn!("accept failed: {e}"),
            }
            conns.retain(|c| !c.is_finished());
        }
        for c in conns {
            let _ = c.join();
        }
    }));

    Ok(ServerHandle {
        addr,
        stop,
        threads,
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn dispatch_loop(
    mut session: Session,
    robot: String,
    fc: f64,
    clock: &dyn Clock,
    stop: &AtomicBool,
    subs: &Subscribers,
    stats: &Mutex<Vec<(String, DispatchStats)>>,
    idx: usize,
) {
    let mut k: u64 = 0;
    while !stop.load(Ordering::SeqCst) {
        let scheduled = k as f64 / fc;
        let now = clock.now();
        if now < scheduled {
            std::thread::sleep(Duration::from_secs_f64((scheduled - now).min(0.05)));
            continue;
        }
        let record = match session.tick(now) {
            Ok(r) => r,
            Err(e) => {
                log::error!("{robot}: dispatch stopped: {e}");
                return;
            }
        };
        {
            let mut s = stats.lock().unwrap_or_else(|e| e.into_inner());
            s[idx].1.ticks += 1;
            s[idx].1.max_lateness = s[idx].1.max_lateness.max(now - scheduled);
        }
        let line = TelemetryMessage::from_record(&robot, &record).to_line();
        fan_out(&mut subs.lock().unwrap_or_else(|e| e.into_inner()), &robot, &line);
        // Late ticks are dispatched back to back rather than skipped.
        k += 1;
    }
}

/// Queue `line` for every subscriber of `robot`, dropping any whose queue is
/// full so the dispatch loop never blocks.
fn fan_out(subs: &mut Vec<Subscriber>, robot: &str, line: &str) {
    subs.retain(|s| {
        if s.robot != robot {
            return true;
        }
        match s.tx.try_send(line.to_string()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                log::warn!("{robot}: dropping slow telemetry consumer");
                if let Some(stream) = &s.stream {
                    let _ = stream.shutdown(Shutdown::Both);
                }
                false
            }
            Err(TrySendError::Disconnected(_)) => false,
        }
    });
}

fn writer_loop(mut stream: TcpStream, rx: Receiver<String>) {
    for line in rx {
        if stream.write_all(line.as_bytes()).and_then(|_| stream.write_all(b"\n")).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Write);
}

fn serve_connection(
    stream: TcpStream,
    conn: u64,
    service: &Service,
    stop: &AtomicBool,
    subs: &Subscribers,
    capacity: usize,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL * 5))?;
    let (tx, rx) = sync_channel::<String>(capacity);
    let writer_stream = stream.try_clone()?;
    let writer = std::thread::spawn(move || writer_loop(writer_stream, rx));
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut buf = Vec::new();
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => break Ok(()),
            Ok(_) => {
                if buf.last() != Some(&b'\n') {
                    // EOF without a terminator: treat the remainder as a line.
                    let line = String::from_utf8_lossy(&buf).into_owned();
                    buf.clear();
                    respond(&line, conn, service, &tx, subs, &stream)?;
                    continue;
                }
                let line = String::from_utf8_lossy(&buf[..buf.len() - 1]).trim_end_matches('\r').to_string();
                buf.clear();
                if line.trim().is_empty() {
                    continue;
                }
                respond(&line, conn, service, &tx, subs, &stream)?;
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => break Err(e),
        }
    };
    subs.lock().unwrap_or_else(|e| e.into_inner()).retain(|s| s.conn != conn);
    drop(tx);
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
    result
}

fn respond(
    line: &str,
    conn: u64,
    service: &Service,
    tx: &SyncSender<String>,
    subs: &Subscribers,
    stream: &TcpStream,
) -> io::Result<()> {
    let handled = service.handle_line(line);
    let ack = handled.ack().to_line();
    tx.send(ack).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "writer closed"))?;
    if let Handled::Subscribe(_, robot) = handled {
        subs.lock().unwrap_or_else(|e| e.into_inner()).push(Subscriber {
            conn,
            robot,
            tx: tx.clone(),
            stream: Some(stream.try_clone()?),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(conn: u64, robot: &str, capacity: usize) -> (Subscriber, Receiver<String>) {
        let (tx, rx) = sync_channel(capacity);
        (Subscriber { conn, robot: robot.into(), tx, stream: None }, rx)
    }

    #[test]
    fn full_queue_drops_only_that_subscriber() {
        let (slow, _slow_rx) = sub(0, "arm", 2);
        let (fast, fast_rx) = sub(1, "arm", 2);
        let (other, other_rx) = sub(2, "other", 1);
        let mut subs = vec![slow, fast, other];
        for i in 0..5 {
            fan_out(&mut subs, "arm", &format!("m{i}"));
            while fast_rx.try_recv().is_ok() {}
        }
        let conns: Vec<u64> = subs.iter().map(|s| s.conn).collect();
        assert_eq!(conns, vec![1, 2]);
        assert!(other_rx.try_recv().is_err());
    }

    #[test]
    fn closed_receiver_is_pruned() {
        let (gone, rx) = sub(0, "arm", 4);
        drop(rx);
        let mut subs = vec![gone];
        fan_out(&mut subs, "arm", "x");
        assert!(subs.is_empty());
    }
}
