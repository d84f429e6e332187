//! Monomial-basis polynomial segments and piecewise joint trajectories.
//!
//! Each segment is parameterized over normalized local time
//! `u = (t - start) / duration` in `[0, 1]`; the k-th time derivative picks up
//! a factor `duration^-k`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest derivative order exposed (jerk).
pub const MAX_DERIVATIVE: usize = 3;
pub const MIN_DEGREE: usize = 4;
pub const DEFAULT_DEGREE: usize = 5;

const TIME_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("degree {0} is below the minimum of {MIN_DEGREE}")]
    Degree(usize),
    #[error("derivative order {0} exceeds {MAX_DERIVATIVE}")]
    Order(usize),
    #[error("normalized time {0} outside [0, 1]")]
    LocalTime(f64),
    #[error("time {t} outside segment [{start}, {end}]")]
    OutsideSegment { t: f64, start: f64, end: f64 },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("empty trajectory")]
    Empty,
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
}

/// Falling factorial `j (j-1) ... (j-k+1)`.
fn falling(j: usize, k: usize) -> f64 {
    (0..k).map(|i| (j - i) as f64).product()
}

/// k-th derivative (in `u`) of `[1, u, u^2, ..., u^degree]`.
pub fn basis_row(degree: usize, u: f64, k: usize) -> Result<Vec<f64>, PolyError> {
    if degree < MIN_DEGREE {
        return Err(PolyError::Degree(degree));
    }
    if k > MAX_DERIVATIVE {
        return Err(PolyError::Order(k));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(PolyError::LocalTime(u));
    }
    let mut row = vec![0.0; degree + 1];
    fill_basis(&mut row, u, k);
    Ok(row)
}

/// Unchecked variant used by the builders; `row.len()` is `degree + 1`.
pub(crate) fn fill_basis(row: &mut [f64], u: f64, k: usize) {
    let mut power = 1.0;
    for (j, slot) in row.iter_mut().enumerate() {
        if j < k {
            *slot = 0.0;
        } else {
            *slot = falling(j, k) * power;
            power *= u;
        }
    }
}

/// Same as [`fill_basis`] with the chain-rule factor `duration^-k` applied.
pub(crate) fn fill_time_basis(row: &mut [f64], u: f64, k: usize, duration: f64) {
    fill_basis(row, u, k);
    let scale = duration.powi(-(k as i32));
    for v in row.iter_mut() {
        *v *= scale;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    coeffs: Vec<f64>,
    start_time: f64,
    duration: f64,
}

impl Segment {
    pub fn new(coeffs: Vec<f64>, start_time: f64, duration: f64) -> Result<Self, PolyError> {
        if coeffs.len() < MIN_DEGREE + 1 {
            return Err(PolyError::Degree(coeffs.len().saturating_sub(1)));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(PolyError::InvalidSegment(format!(
                "duration must be positive, got {duration}"
            )));
        }
        if !start_time.is_finite() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(PolyError::InvalidSegment("non-finite value".into()));
        }
        Ok(Self {
            coeffs,
            start_time,
            duration,
        })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }

    pub fn eval(&self, t: f64, k: usize) -> Result<f64, PolyError> {
        if k > MAX_DERIVATIVE {
            return Err(PolyError::Order(k));
        }
        let slack = TIME_SLACK * (1.0 + self.end_time().abs());
        if !(t >= self.start_time - slack && t <= self.end_time() + slack) {
            return Err(PolyError::OutsideSegment {
                t,
                start: self.start_time,
                end: self.end_time(),
            });
        }
        let u = ((t - self.start_time) / self.duration).clamp(0.0, 1.0);
        Ok(self.eval_local(u, k))
    }

    /// Evaluation at normalized time; `u` is assumed to lie in `[0, 1]`.
    pub fn eval_local(&self, u: f64, k: usize) -> f64 {
        // Horner on the k-th derivative coefficients.
        let mut acc = 0.0;
        for j in (k..self.coeffs.len()).rev() {
            acc = acc * u + falling(j, k) * self.coeffs[j];
        }
        acc * self.duration.powi(-(k as i32))
    }
}

/// Position, velocity and acceleration of one joint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointSample {
    pub q: f64,
    pub qd: f64,
    pub qdd: f64,
}

/// Discontinuity between the end of one segment and the start of the next.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JunctionResidual {
    pub time: f64,
    pub q: f64,
    pub qd: f64,
    pub qdd: f64,
}

impl JunctionResidual {
    pub fn max_abs(&self) -> f64 {
        self.q.abs().max(self.qd.abs()).max(self.qdd.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    segments: Vec<Segment>,
}

impl JointTrajectory {
    pub fn new(segments: Vec<Segment>) -> Result<Self, PolyError> {
        if segments.is_empty() {
            return Err(PolyError::Empty);
        }
        for pair in segments.windows(2) {
            let gap = pair[1].start_time - pair[0].end_time();
            if gap.abs() > TIME_SLACK * (1.0 + pair[1].start_time.abs()) {
                return Err(PolyError::InvalidSegment(format!(
                    "segments not contiguous at t = {}",
                    pair[1].start_time
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn start_time(&self) -> f64 {
        self.segments[0].start_time
    }

    pub fn total_time(&self) -> f64 {
        self.segments[self.segments.len() - 1].end_time()
    }

    /// Segment index for `t`; boundary times belong to the later segment.
    /// Returns `None` at and beyond the final time (hold region).
    fn locate(&self, t: f64) -> Option<usize> {
        if t >= self.total_time() {
            return None;
        }
        let idx = self
            .segments
            .partition_point(|seg| seg.start_time <= t)
            .saturating_sub(1);
        Some(idx)
    }

    pub fn eval(&self, t: f64) -> Result<JointSample, PolyError> {
        if !(t >= 0.0) {
            return Err(PolyError::NegativeTime(t));
        }
        Ok(self.sample(t))
    }

    /// Evaluate without the sign check; times before the first segment
    /// extrapolate the first polynomial.
    pub fn sample(&self, t: f64) -> JointSample {
        match self.locate(t) {
            Some(i) => {
                let seg = &self.segments[i];
                let u = ((t - seg.start_time) / seg.duration).clamp(0.0, 1.0);
                JointSample {
                    q: seg.eval_local(u, 0),
                    qd: seg.eval_local(u, 1),
                    qdd: seg.eval_local(u, 2),
                }
            }
            None => JointSample {
                q: self.segments[self.segments.len() - 1].eval_local(1.0, 0),
                qd: 0.0,
                qdd: 0.0,
            },
        }
    }

    /// State at the very end of the last segment, before the hold takes over.
    pub fn terminal(&self) -> JointSample {
        let last = &self.segments[self.segments.len() - 1];
        JointSample {
            q: last.eval_local(1.0, 0),
            qd: last.eval_local(1.0, 1),
            qdd: last.eval_local(1.0, 2),
        }
    }

    pub fn junction_residuals(&self) -> Vec<JunctionResidual> {
        self.segments
            .windows(2)
            .map(|pair| JunctionResidual {
                time: pair[1].start_time,
                q: pair[0].eval_local(1.0, 0) - pair[1].eval_local(0.0, 0),
                qd: pair[0].eval_local(1.0, 1) - pair[1].eval_local(0.0, 1),
                qdd: pair[0].eval_local(1.0, 2) - pair[1].eval_local(0.0, 2),
            })
            .collect()
    }
}

/// Write `t, q0.., qd0.., qdd0..` rows sampled every `1/f_c` from 0 to the
/// longest trajectory's end, inclusive.
pub fn export_csv<W: Write>(
    trajectories: &[JointTrajectory],
    control_frequency: f64,
    writer: W,
) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    let dof = trajectories.len();
    let mut header = vec!["t".to_string()];
    for prefix in ["q", "qd", "qdd"] {
        header.extend((0..dof).map(|j| format!("{prefix}{j}")));
    }
    out.write_record(&header)?;
    let end = trajectories
        .iter()
        .map(JointTrajectory::total_time)
        .fold(0.0, f64::max);
    let ticks = (end * control_frequency).round() as usize;
    let mut row = Vec::with_capacity(1 + 3 * dof);
    for k in 0..=ticks {
        let t = k as f64 / control_frequency;
        let samples: Vec<JointSample> = trajectories.iter().map(|tr| tr.sample(t)).collect();
        row.clear();
        row.push(format!("{t}"));
        row.extend(samples.iter().map(|s| format!("{}", s.q)));
        row.extend(samples.iter().map(|s| format!("{}", s.qd)));
        row.extend(samples.iter().map(|s| format!("{}", s.qdd)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
