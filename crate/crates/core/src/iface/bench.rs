//! Solve-time study: a stream of buffered joint-space requests at a fixed
//! update rate, each preempting the previous plan, timing only the QP work.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::poly::{JointTrajectory, Segment};
use crate::qpbuild::{assemble_qp, BoundaryState, JointLimits, JointWaypoint, QpBuildError};
use crate::qpsolve::{solve, SolveError, SolveStatus, SolverSettings};
use crate::runtime::median;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Waypoints per request.
    pub n: usize,
    pub degree: usize,
    pub joints: usize,
    pub samples: usize,
    pub seed: u64,
    /// Segment duration; also the update period.
    pub duration: f64,
    pub control_frequency: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub solver: SolverSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 5,
            degree: 5,
            joints: 6,
            samples: 400,
            seed: 0,
            duration: 0.05,
            control_frequency: 100.0,
            v_max: 2.0,
            a_max: 10.0,
            solver: SolverSettings::default(),
        }
    }
}

/// One request's timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n: usize,
    #[serde(rename = "L")]
    pub degree: usize,
    pub joints: usize,
    pub solve_time_s: f64,
    /// Largest iteration count over the joints.
    pub iterations: usize,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub samples: usize,
    pub solved: usize,
    pub median_s: f64,
    pub p90_s: f64,
    pub max_s: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bench: {0}")]
    Config(String),
    #[error(transparent)]
    Build(#[from] QpBuildError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Smooth per-joint reference: a sum of two random sinusoids, slow enough
/// that every buffered window can come to rest within its horizon.
struct JointPath {
    center: f64,
    terms: [(f64, f64, f64); 2],
}

impl JointPath {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut term = || (rng.gen_range(0.02..0.08), rng.gen_range(0.3..1.5), rng.gen_range(0.0..std::f64::consts::TAU));
        Self {
            center: 0.0,
            terms: [term(), term()],
        }
        .with_center(rng.gen_range(-1.0..1.0))
    }

    fn with_center(mut self, c: f64) -> Self {
        self.center = c;
        self
    }

    fn at(&self, t: f64) -> f64 {
        self.center + self.terms.iter().map(|(a, w, p)| a * ((w * t + p).sin() - p.sin())).sum::<f64>()
    }
}

pub fn run(config: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    if config.n == 0 || config.joints == 0 || config.samples == 0 {
        return Err(BenchError::Config("n, joints and samples must be positive".into()));
    }
    if !(config.duration > 0.0 && config.control_frequency > 0.0) {
        return Err(BenchError::Config("duration and control frequency must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let paths: Vec<JointPath> = (0..config.joints).map(|_| JointPath::random(&mut rng)).collect();
    let limits = JointLimits {
        v_max: config.v_max,
        a_max: config.a_max,
    };
    let width = config.degree + 1;
    let mut active: Vec<Option<JointTrajectory>> = vec![None; config.joints];
    let mut out = Vec::with_capacity(config.samples);

    for k in 0..config.samples {
        let t_now = k as f64 * config.duration;
        let mut total = 0.0;
        let mut iterations = 0;
        let mut status = SolveStatus::Solved;
        for (j, path) in paths.iter().enumerate() {
            // Preempt one update period into the previous plan.
            let initial = match &active[j] {
                Some(traj) => {
                    let s = traj.sample(config.duration);
                    BoundaryState { q: s.q, qd: s.qd, qdd: s.qdd }
                }
                None => BoundaryState { q: path.at(t_now), qd: 0.0, qdd: 0.0 },
            };
            let wps: Vec<JointWaypoint> = (1..=config.n)
                .map(|i| JointWaypoint {
                    position: path.at(t_now + i as f64 * config.duration),
                    duration: config.duration,
                })
                .collect();
            let qp = assemble_qp(&wps, initial, config.degree, config.control_frequency, limits)?;
            let sol = solve(&qp, &config.solver)?;
            total += sol.solve_time;
            iterations = iterations.max(sol.iterations);
            if sol.status != SolveStatus::Solved && status == SolveStatus::Solved {
                status = sol.status;
            }
            let segments = (0..config.n)
                .map(|i| {
                    Segment::new(
                        sol.p.as_slice()[i * width..(i + 1) * width].to_vec(),
                        i as f64 * config.duration,
                        config.duration,
                    )
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| BenchError::Config(e.to_string()))?;
            active[j] = Some(JointTrajectory::new(segments).map_err(|e| BenchError::Config(e.to_string()))?);
        }
        out.push(BenchRecord {
            n: config.n,
            degree: config.degree,
            joints: config.joints,
            solve_time_s: total,
            iterations,
            status,
        });
    }
    Ok(out)
}

pub fn summarize(records: &[BenchRecord]) -> BenchSummary {
    let mut times: Vec<f64> = records.iter().map(|r| r.solve_time_s).collect();
    times.sort_by(f64::total_cmp);
    let p90 = times
        .get(((times.len() as f64 * 0.9).ceil() as usize).saturating_sub(1))
        .copied()
        .unwrap_or(0.0);
    BenchSummary {
        samples: records.len(),
        solved: records.iter().filter(|r| r.status == SolveStatus::Solved).count(),
        median_s: median(&times).unwrap_or(0.0),
        p90_s: p90,
        max_s: times.last().copied().unwrap_or(0.0),
    }
}

pub fn write_jsonl<W: Write>(records: &[BenchRecord], mut writer: W) -> Result<(), BenchError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(|e| BenchError::Config(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_solves_every_sample() {
        let cfg = BenchConfig {
            samples: 20,
            seed: 3,
            ..BenchConfig::default()
        };
        let recs = run(&cfg).unwrap();
        assert_eq!(recs.len(), 20);
        assert!(recs.iter().all(|r| r.status == SolveStatus::Solved), "{recs:?}");
        let s = summarize(&recs);
        assert_eq!(s.solved, 20);
        assert!(s.median_s <= s.p90_s && s.p90_s <= s.max_s);
    }

    #[test]
    fn record_format() {
        let r = BenchRecord {
            n: 5,
            degree: 5,
            joints: 6,
            solve_time_s: 0.001,
            iterations: 50,
            status: SolveStatus::Solved,
        };
        let mut buf = Vec::new();
        write_jsonl(&[r, r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"n":5,"L":5,"joints":6,"solve_time_s":0.001,"iterations":50,"status":"solved"}"#
        );
    }

    #[test]
    fn seed_fixes_the_workload() {
        let cfg = BenchConfig { samples: 5, seed: 11, ..BenchConfig::default() };
        let a: Vec<usize> = run(&cfg).unwrap().iter().map(|r| r.iterations).collect();
        let b: Vec<usize> = run(&cfg).unwrap().iter().map(|r| r.iterations).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(run(&BenchConfig { n: 0, ..BenchConfig::default() }).is_err());
        assert!(run(&BenchConfig { duration: 0.0, ..BenchConfig::default() }).is_err());
    }
}
