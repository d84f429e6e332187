//! Python bindings: chain kinematics, planning and the scenario and bench
//! runners. Errors surface as `ValueError`.

use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use rtmove::chain::{ChainConfig, IkSettings, JointVector, Pose};
use rtmove::iface::bench::{self, BenchConfig};
use rtmove::planner::{CartesianWaypoint, Plan, PlanRequest, Planner, PlannerSettings, RobotState};
use rtmove::runtime::{run_scenario, ScenarioScript};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn waypoints(wps: Vec<([f64; 6], f64)>) -> Vec<CartesianWaypoint> {
    wps.into_iter()
        .map(|(pose, d)| CartesianWaypoint::new(Pose::from_array(pose), d))
        .collect()
}

type StateTuple = (Vec<f64>, Vec<f64>, Vec<f64>);

fn state_tuple(s: &RobotState) -> StateTuple {
    (s.q.as_slice().to_vec(), s.qd.as_slice().to_vec(), s.qdd.as_slice().to_vec())
}

#[pyclass(name = "Chain", frozen)]
pub struct PyChain {
    inner: Arc<ChainConfig>,
}

#[pymethods]
impl PyChain {
    #[staticmethod]
    fn from_path(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(ChainConfig::from_path(path).map_err(err)?) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(ChainConfig::from_json_str(text).map_err(err)?) })
    }

    #[getter]
    fn dof(&self) -> usize {
        self.inner.dof()
    }

    #[getter]
    fn control_frequency(&self) -> f64 {
        self.inner.control_frequency()
    }

    /// `[x, y, z, roll, pitch, yaw]`.
    fn forward_kinematics(&self, q: Vec<f64>) -> PyResult<[f64; 6]> {
        Ok(self.inner.forward_kinematics(&JointVector::from_vec(q)).map_err(err)?.to_array())
    }

    /// Six rows (linear then angular), one column per joint.
    fn jacobian(&self, q: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self.inner.jacobian(&JointVector::from_vec(q)).map_err(err)?;
        Ok((0..6).map(|r| j.row(r).iter().copied().collect()).collect())
    }

    fn inverse_kinematics(&self, pose: [f64; 6], seed: Vec<f64>) -> PyResult<Vec<f64>> {
        let q = self
            .inner
            .inverse_kinematics(&Pose::from_array(pose), &JointVector::from_vec(seed), &IkSettings::default())
            .map_err(err)?;
        Ok(q.as_slice().to_vec())
    }
}

#[pyclass(name = "Plan", frozen)]
pub struct PyPlan {
    inner: Arc<Plan>,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration()
    }

    #[getter]
    fn epoch(&self) -> f64 {
        self.inner.epoch
    }

    #[getter]
    fn request_id(&self) -> String {
        self.inner.request_id.clone()
    }

    #[getter]
    fn joint_waypoints(&self) -> Vec<Vec<f64>> {
        self.inner.joint_waypoints.iter().map(|q| q.as_slice().to_vec()).collect()
    }

    #[getter]
    fn solve_time(&self) -> f64 {
        self.inner.solve_time()
    }

    /// `(q, qd, qdd)` at absolute time `t`.
    fn state_at(&self, t: f64) -> PyResult<StateTuple> {
        Ok(state_tuple(&self.inner.state_at(t).map_err(err)?))
    }

    fn max_junction_residual(&self) -> f64 {
        self.inner.max_junction_residual()
    }

    fn terminal_residual(&self) -> f64 {
        self.inner.terminal_residual()
    }
}

#[pyclass(name = "Planner", frozen)]
pub struct PyPlanner {
    inner: Planner,
}

#[pymethods]
impl PyPlanner {
    #[new]
    #[pyo3(signature = (chain, degree = 5))]
    fn new(chain: &PyChain, degree: usize) -> PyResult<Self> {
        let settings = PlannerSettings { degree, ..PlannerSettings::default() };
        Ok(Self { inner: Planner::new(chain.inner.clone(), settings).map_err(err)? })
    }

    /// `waypoints` is a list of `(pose, duration)`; the plan starts at rest
    /// on `q0` at time `t0`.
    #[pyo3(signature = (waypoints, q0, t0 = 0.0, request_id = "py"))]
    fn plan(&self, waypoints: Vec<([f64; 6], f64)>, q0: Vec<f64>, t0: f64, request_id: &str) -> PyResult<PyPlan> {
        let request = PlanRequest::new("arm", request_id, self::waypoints(waypoints));
        let s0 = RobotState::at_rest(JointVector::from_vec(q0), t0);
        let plan = self.inner.plan(&request, &s0).map_err(err)?;
        Ok(PyPlan { inner: Arc::new(plan) })
    }

    #[pyo3(signature = (active, t_now, waypoints, request_id = "py"))]
    fn preempt(
        &self,
        active: &PyPlan,
        t_now: f64,
        waypoints: Vec<([f64; 6], f64)>,
        request_id: &str,
    ) -> PyResult<PyPlan> {
        let request = PlanRequest::new("arm", request_id, self::waypoints(waypoints));
        let plan = self.inner.preempt(&active.inner, t_now, &request).map_err(err)?;
        Ok(PyPlan { inner: Arc::new(plan) })
    }

    /// `((q, qd, qdd), pose)` at absolute time `t`.
    fn reference_at(&self, plan: &PyPlan, t: f64) -> PyResult<(StateTuple, [f64; 6])> {
        let (state, pose) = self.inner.reference_at(&plan.inner, t).map_err(err)?;
        Ok((state_tuple(&state), pose.to_array()))
    }
}

/// Run a scenario script and return its report as a dict.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    let script = ScenarioScript::from_path(path).map_err(err)?;
    let outcome = py.detach(|| run_scenario(&script)).map_err(err)?;
    json_to_py(py, &serde_json::to_string(&outcome.report).map_err(err)?)
}

/// Run the solve-time benchmark and return its summary as a dict.
#[pyfunction]
#[pyo3(signature = (samples = 400, n = 5, degree = 5, joints = 6, seed = 0))]
fn run_bench<'py>(
    py: Python<'py>,
    samples: usize,
    n: usize,
    degree: usize,
    joints: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = BenchConfig { n, degree, joints, samples, seed, ..BenchConfig::default() };
    let records = py.detach(|| bench::run(&cfg)).map_err(err)?;
    json_to_py(py, &serde_json::to_string(&bench::summarize(&records)).map_err(err)?)
}

#[pymodule]
fn rtmove_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChain>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyPlanner>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
