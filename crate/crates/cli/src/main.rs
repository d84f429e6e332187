use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use rtmove::chain::{ChainConfig, JointVector};
use rtmove::iface::bench::{self, BenchConfig};
use rtmove::iface::server::{self, RobotSpec, ServerConfig};
use rtmove::planner::{parse_waypoints, PlanRequest, Planner, PlannerSettings, RobotState};
use rtmove::poly::export_csv;
use rtmove::runtime::{run_scenario, ScenarioScript};

#[derive(Parser)]
#[command(name = "rtmove", version, about = "Minimum-jerk Cartesian waypoint planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a waypoint file offline and write the sampled trajectory.
    Plan {
        chain: PathBuf,
        waypoints: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated start configuration (defaults to all zeros).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        initial_q: Option<Vec<f64>>,
        #[arg(long = "L", default_value_t = 5)]
        degree: usize,
    },
    /// Serve line-delimited JSON requests on a TCP port.
    Serve {
        chain: PathBuf,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "arm")]
        robot: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        initial_q: Option<Vec<f64>>,
        /// Stop after this many seconds instead of running until killed.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 256)]
        queue: usize,
    },
    /// Run a scenario script on the simulated clock.
    Sim {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Override the teleop receipt jitter (s).
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time per-request QP solves on a streamed random workload.
    Bench {
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long = "L", default_value_t = 5)]
        degree: usize,
        #[arg(long, default_value_t = 6)]
        joints: usize,
        #[arg(long, default_value_t = 400)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn initial_q(chain: &ChainConfig, q: Option<Vec<f64>>) -> Result<JointVector> {
    let q = q.unwrap_or_else(|| vec![0.0; chain.dof()]);
    if q.len() != chain.dof() {
        bail!("initial-q: expected {} values, got {}", chain.dof(), q.len());
    }
    Ok(JointVector::from_vec(q))
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("{}", path.display()))?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan { chain, waypoints, out, initial_q: q0, degree } => {
            let chain = Arc::new(ChainConfig::from_path(&chain)?);
            let text = std::fs::read_to_string(&waypoints)
                .with_context(|| format!("{}", waypoints.display()))?;
            let wps = parse_waypoints(&text)?;
            let settings = PlannerSettings { degree, ..PlannerSettings::default() };
            let planner = Planner::new(chain.clone(), settings)?;
            let s0 = RobotState::at_rest(initial_q(&chain, q0)?, 0.0);
            let plan = planner.plan(&PlanRequest::new("arm", "offline", wps), &s0)?;
            if let Some(path) = out {
                export_csv(&plan.joints, chain.control_frequency(), create(&path)?)?;
            }
            let summary = json!({
                "segments": plan.joint_waypoints.len(),
                "duration": plan.duration(),
                "max_junction_discontinuity": plan.max_junction_residual(),
                "terminal_residual": plan.terminal_residual(),
                "pass_through_error": plan.pass_through_error(),
                "solve_time_s": plan.solve_time(),
                "iterations": plan.stats.iter().map(|s| s.iterations).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Serve { chain, port, host, robot, initial_q: q0, duration, queue } => {
            let chain = Arc::new(ChainConfig::from_path(&chain)?);
            let q0 = initial_q(&chain, q0)?;
            let handle = server::start(ServerConfig {
                addr: format!("{host}:{port}"),
                robots: vec![RobotSpec { id: robot, chain, initial_q: q0 }],
                settings: PlannerSettings::default(),
                queue_capacity: queue,
            })?;
            println!("listening on {}", handle.local_addr());
            std::io::stdout().flush()?;
            match duration {
                Some(secs) => {
                    std::thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
                    let stats = handle.dispatch_stats();
                    handle.shutdown();
                    for (id, s) in stats {
                        println!("{id}: {} ticks, max lateness {:.6} s", s.ticks, s.max_lateness);
                    }
                }
                None => handle.join(),
            }
        }
        Command::Sim { scenario, out, report, jitter, seed } => {
            let mut script = ScenarioScript::from_path(&scenario)?;
            if let Some(j) = jitter {
                match script.teleop.as_mut() {
                    Some(t) => t.jitter = j,
                    None => bail!("--jitter applies only to teleop scenarios"),
                }
            }
            if let Some(s) = seed {
                script.seed = s;
            }
            let outcome = run_scenario(&script)?;
            if let Some(path) = out {
                outcome.log.write_csv(create(&path)?)?;
            }
            if let Some(path) = report {
                let mut w = create(&path)?;
                serde_json::to_writer_pretty(&mut w, &outcome.report)?;
                w.write_all(b"\n")?;
            }
            let r = &outcome.report;
            let summary = json!({
                "name": r.name,
                "ticks": r.ticks,
                "accepted": r.accepted,
                "rejected": r.rejected,
                "preemptions": r.preemptions,
                "max_junction_discontinuity": r.max_junction_discontinuity,
                "max_preemption_discontinuity": r.max_preemption_discontinuity,
                "limit_violations": r.limit_violations,
                "max_tick_step_ratio": r.max_tick_step_ratio,
                "median_solve_time": r.median_solve_time,
                "max_path_error": r.max_path_error,
                "pipeline_delay": r.pipeline_delay,
                "grasp_time": r.grasp_time,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Bench { n, degree, joints, samples, out, seed } => {
            let cfg = BenchConfig { n, degree, joints, samples, seed, ..BenchConfig::default() };
            let records = bench::run(&cfg)?;
            if let Some(path) = out {
                bench::write_jsonl(&records, create(&path)?)?;
            }
            println!("{}", serde_json::to_string_pretty(&bench::summarize(&records))?);
        }
    }
    Ok(())
}
