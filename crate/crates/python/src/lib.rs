//! Python bindings. Arrays cross the boundary as nested lists of floats;
//! reports come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use zubov::certify::{estimate_volume, pgd_verify, PgdBudget};
use zubov::checkpoint::Checkpoint as CoreCheckpoint;
use zubov::dynamics::{build_system, simulate as core_simulate, ClosedLoop, SimConfig, SystemSpec};
use zubov::fixtures::planted_spot_task;
use zubov::pipeline::{run_pipeline, RunConfig};
use zubov::relax::{Interval, Unary};
use zubov::verify::{bab_verify, VerifyConfig, VerifyTask};

pyo3::create_exception!(zubov_py, ZubovError, PyException);

fn err(e: zubov::Error) -> PyErr {
    ZubovError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let l = PyList::empty(py);
            for x in a {
                l.append(to_py(py, x)?)?;
            }
            l.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn report<'py>(py: Python<'py>, r: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(r).map_err(|e| ZubovError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn rows(x: Vec<Vec<f64>>, dim: usize) -> PyResult<ndarray::Array2<f64>> {
    let n = x.len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(ZubovError::new_err(format!("every row must have {dim} entries")));
    }
    Ok(ndarray::Array2::from_shape_vec((n, dim), x.into_iter().flatten().collect()).expect("checked"))
}

/// A benchmark system by name.
#[pyclass(frozen)]
struct System {
    inner: SystemSpec,
}

#[pymethods]
impl System {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: build_system(name).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim
    }

    #[getter]
    fn control_dim(&self) -> usize {
        self.inner.control_dim
    }

    #[getter]
    fn x_star(&self) -> Vec<f64> {
        self.inner.x_star.clone()
    }

    /// Open-loop vector field `f(x, u)`.
    fn eval(&self, x: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.state_dim || u.len() != self.inner.control_dim {
            return Err(ZubovError::new_err("state or control dimension"));
        }
        Ok(self.inner.eval(&x, &u))
    }
}

/// Trained controller and Lyapunov function with their domain.
#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

impl Checkpoint {
    fn system(&self) -> PyResult<SystemSpec> {
        build_system(&self.inner.system).map_err(err)
    }

    fn task(&self, c1: f64, c2: f64, cfg: VerifyConfig) -> PyResult<VerifyTask> {
        let c = &self.inner;
        VerifyTask::new(&c.lyapunov, &c.controller, &self.system()?, c.domain.clone(), c1, c2, cfg).map_err(err)
    }
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCheckpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn system_name(&self) -> &str {
        &self.inner.system
    }

    #[getter]
    fn domain(&self) -> (Vec<f64>, Vec<f64>) {
        (self.inner.domain.lo().to_vec(), self.inner.domain.hi().to_vec())
    }

    fn sha256(&self) -> PyResult<String> {
        self.inner.content_hash().map_err(err)
    }

    /// `V` at each row of `x`.
    fn lyapunov(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let a = rows(x, self.inner.lyapunov.state_dim())?;
        Ok(self.inner.lyapunov.eval(a.view()).map_err(err)?.to_vec())
    }

    /// Control input at each row of `x`.
    fn controller(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let a = rows(x, self.inner.controller.state_dim())?;
        let u = self.inner.controller.eval(a.view()).map_err(err)?;
        Ok(u.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Branch-and-bound verification; returns the verdict report.
    #[pyo3(signature = (c1, c2=0.99, timeout=None))]
    fn verify<'py>(&self, py: Python<'py>, c1: f64, c2: f64, timeout: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = VerifyConfig {
            timeout_secs: timeout,
            ..VerifyConfig::default()
        };
        let task = self.task(c1, c2, cfg)?;
        report(py, &py.detach(|| bab_verify(&task)).map_err(err)?)
    }

    #[pyo3(signature = (c1, c2, restarts=2000, seed=0))]
    fn pgd_verify<'py>(&self, py: Python<'py>, c1: f64, c2: f64, restarts: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let task = self.task(c1, c2, VerifyConfig::default())?;
        let budget = PgdBudget {
            restarts,
            ..PgdBudget::default()
        };
        report(py, &pgd_verify(&task, &budget, seed).map_err(err)?)
    }

    /// Monte-Carlo volume of `V ≤ c` inside the domain.
    #[pyo3(signature = (c, samples=100_000, seed=0))]
    fn volume<'py>(&self, py: Python<'py>, c: f64, samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let c_ = &self.inner;
        report(py, &estimate_volume(&c_.lyapunov, &c_.domain, c, samples, seed).map_err(err)?)
    }

    /// Closed-loop rollout; returns `(states, converged)`.
    #[pyo3(signature = (x0, horizon=30.0, dt=0.005))]
    fn simulate(&self, x0: Vec<f64>, horizon: f64, dt: f64) -> PyResult<(Vec<Vec<f64>>, bool)> {
        let sys = self.system()?;
        let f = ClosedLoop::new(&sys, &self.inner.controller).map_err(err)?;
        let cfg = SimConfig {
            dt,
            horizon,
            ..SimConfig::default()
        };
        let t = core_simulate(&f, &x0, &sys.x_star, cfg.steps(), &cfg).map_err(err)?;
        Ok((t.states.rows().into_iter().map(|r| r.to_vec()).collect(), t.converged))
    }
}

/// Linear bounds `(al, bl, au, bu)` of a unary operator on `[l, u]`.
#[pyfunction]
fn relax(op: &str, l: f64, u: f64) -> PyResult<(f64, f64, f64, f64)> {
    let op = match op {
        "sin" => Unary::Sin,
        "cos" => Unary::Cos,
        "tanh" => Unary::Tanh,
        "sigmoid" => Unary::Sigmoid,
        "relu" => Unary::Relu,
        "dtanh" => Unary::Dtanh,
        "dsigmoid" => Unary::Dsigmoid,
        "step" => Unary::Step,
        "reciprocal" => Unary::Reciprocal,
        "neg" => Unary::Neg,
        other => match other.strip_prefix("pow").and_then(|n| n.parse().ok()) {
            Some(n) => Unary::Power(n),
            None => return Err(ZubovError::new_err(format!("unknown operator `{other}`"))),
        },
    };
    let r = op.relax(Interval::new(l, u).map_err(err)?).map_err(err)?;
    Ok((r.al, r.bl, r.au, r.bu))
}

/// Verify the planted spot fixture, whose band hides a violation that the
/// adaptive thresholds must step around.
#[pyfunction]
fn verify_planted_spot(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    let task = planted_spot_task(VerifyConfig::default()).map_err(err)?;
    report(py, &py.detach(|| bab_verify(&task)).map_err(err)?)
}

/// Full pipeline at desk scale. Returns `(verdict, checkpoint)`.
#[pyfunction]
#[pyo3(signature = (system, seed=0, max_iters=None))]
fn run_desk_pipeline<'py>(py: Python<'py>, system: &str, seed: u64, max_iters: Option<usize>) -> PyResult<(Bound<'py, PyAny>, Checkpoint)> {
    let mut cfg = RunConfig::desk(system, seed);
    if let Some(n) = max_iters {
        cfg.train.max_iters = n;
    }
    let out = py.detach(|| run_pipeline(&cfg)).map_err(err)?;
    Ok((report(py, &out.report)?, Checkpoint { inner: out.checkpoint() }))
}

#[pymodule]
fn zubov_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ZubovError", m.py().get_type::<ZubovError>())?;
    m.add_class::<System>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(relax, m)?)?;
    m.add_function(wrap_pyfunction!(verify_planted_spot, m)?)?;
    m.add_function(wrap_pyfunction!(run_desk_pipeline, m)?)?;
    Ok(())
}
