//! Python bindings: load a scenario, integrate arcs and Riccati flows, solve the value-function
//! grid and run named checks. Matrices cross the boundary as nested row-major lists.

use std::path::PathBuf;

use mayer_sens::hjb::{solve_value_function, GridSpec, GridValueFunction};
use mayer_sens::riccati::{detect_conjugate_time, integrate_riccati_direct, integrate_variational, Anchor, RiccatiStatus};
use mayer_sens::scenario::{load_scenario, parse_scenario, ScenarioFile, CHECK_IDS};
use mayer_sens::sensitivity::{reference_arc, run_named_check, VerifyOptions};
use mayer_sens::{Error, Matrix, Vector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(mayer_sens, MayerSensError, PyException);
create_exception!(mayer_sens, PremiseFailed, MayerSensError);

const FALLBACK_POINTS: usize = 201;
const FALLBACK_TIME_STEPS: usize = 200;
const FALLBACK_MARGIN: f64 = 0.5;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::PremiseFailed { .. } => PremiseFailed::new_err(e.to_string()),
        other => MayerSensError::new_err(format!("{}: {other}", other.name())),
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(x: Vec<f64>) -> Vector {
    Vector::from_vec(x)
}

#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    file: ScenarioFile,
}

impl PyScenario {
    fn opts(&self, steps: Option<usize>) -> VerifyOptions {
        VerifyOptions { steps: steps.unwrap_or(self.file.steps), probe: self.file.probe.clone(), ..VerifyOptions::default() }
    }

    fn grid_spec(&self, points: Option<usize>, time_steps: Option<usize>) -> GridSpec {
        let mut spec = self.file.grid.clone().unwrap_or_else(|| {
            GridSpec::padded_for(&self.file.scenario, FALLBACK_POINTS, FALLBACK_TIME_STEPS, FALLBACK_MARGIN)
        });
        if let Some(p) = points {
            spec.points_per_axis = p;
        }
        if let Some(k) = time_steps {
            spec.time_steps = k;
        }
        spec
    }
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScenario { file: load_scenario(&path).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (text, label = "scenario"))]
    fn parse(text: &str, label: &str) -> PyResult<Self> {
        Ok(PyScenario { file: parse_scenario(text, label).map_err(to_py)? })
    }

    #[getter]
    fn label(&self) -> String {
        self.file.scenario.label.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.file.scenario.dim()
    }

    #[getter]
    fn horizon(&self) -> (f64, f64) {
        (self.file.scenario.t0, self.file.scenario.t1)
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.file.scenario.x0.iter().copied().collect()
    }

    #[getter]
    fn checks(&self) -> Vec<String> {
        self.file.checks.clone()
    }

    /// Reference arc as `(times, states, costates)`.
    #[pyo3(signature = (steps = None))]
    fn characteristics(&self, steps: Option<usize>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let arc = reference_arc(&self.file.scenario, None, steps.unwrap_or(self.file.steps)).map_err(to_py)?;
        let flat = |vs: &[Vector]| vs.iter().map(|v| v.iter().copied().collect()).collect();
        Ok((arc.times.clone(), flat(&arc.states), flat(&arc.costates)))
    }

    /// Riccati solution from `-hess phi(x(T))` as `(times, R, blow-up time or None)`.
    #[pyo3(signature = (steps = None))]
    fn riccati(&self, steps: Option<usize>) -> PyResult<(Vec<f64>, Vec<Vec<Vec<f64>>>, Option<f64>)> {
        let sc = &self.file.scenario;
        let arc = reference_arc(sc, None, steps.unwrap_or(self.file.steps)).map_err(to_py)?;
        let z = arc.terminal().0.clone();
        let sol = integrate_riccati_direct(&arc, &sc.model, &(-sc.cost.hess(&z)), Anchor::Terminal).map_err(to_py)?;
        let t_star = match sol.status {
            RiccatiStatus::Blowup { t_star } => Some(t_star),
            RiccatiStatus::Complete => None,
        };
        Ok((sol.times.clone(), sol.r.iter().map(rows).collect(), t_star))
    }

    /// First zero of `det X` going backward from `T`, if any.
    #[pyo3(signature = (steps = None))]
    fn conjugate_time(&self, steps: Option<usize>) -> PyResult<Option<f64>> {
        let sc = &self.file.scenario;
        let arc = reference_arc(sc, None, steps.unwrap_or(self.file.steps)).map_err(to_py)?;
        let z = arc.terminal().0.clone();
        let vs = integrate_variational(&arc, &sc.model, &sc.cost.hess(&z)).map_err(to_py)?;
        Ok(detect_conjugate_time(&vs).map_err(to_py)?.t_c)
    }

    #[pyo3(signature = (points = None, time_steps = None, directions = None))]
    fn solve_grid(&self, py: Python<'_>, points: Option<usize>, time_steps: Option<usize>, directions: Option<usize>) -> PyResult<PyGrid> {
        let spec = self.grid_spec(points, time_steps);
        let dirs = directions.unwrap_or(self.file.directions);
        let sc = self.file.scenario.clone();
        let grid = py.detach(move || solve_value_function(&sc, &spec, dirs)).map_err(to_py)?;
        Ok(PyGrid { grid })
    }

    /// Runs a named check and returns its report as a dict. Refused premises raise
    /// `PremiseFailed`.
    #[pyo3(signature = (check, grid = None, steps = None))]
    fn verify<'py>(&self, py: Python<'py>, check: &str, grid: Option<&PyGrid>, steps: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        if !CHECK_IDS.contains(&check) {
            return Err(MayerSensError::new_err(format!("unknown check `{check}`; expected one of {CHECK_IDS:?}")));
        }
        let opts = self.opts(steps);
        let (_, report) = run_named_check(
            check,
            &self.file.scenario,
            grid.map(|g| &g.grid),
            &opts,
            self.file.subjet_r0.as_ref(),
            self.file.superjet_q.as_ref(),
        );
        let text = report.map_err(to_py)?.to_json();
        py.import("json")?.call_method1("loads", (text,))
    }
}

#[pyclass(name = "Grid", frozen)]
struct PyGrid {
    grid: GridValueFunction,
}

#[pymethods]
impl PyGrid {
    #[getter]
    fn error_budget(&self) -> f64 {
        self.grid.error_budget
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.grid.spec.time_steps + 1, self.grid.spec.node_count())
    }

    fn value(&self, t: f64, x: Vec<f64>) -> PyResult<f64> {
        self.grid.interpolate(t, &vector(x)).map_err(to_py)
    }

    fn gradient(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.grid.numerical_gradient(t, &vector(x)).map_err(to_py)?.iter().copied().collect())
    }

    fn hessian(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.grid.numerical_hessian(t, &vector(x)).map_err(to_py)?))
    }

    fn contaminated_fraction(&self, slice: usize) -> f64 {
        self.grid.contaminated_fraction(slice)
    }
}

#[pymodule(name = "mayer_sens")]
fn mayer_sens_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyGrid>()?;
    m.add("MayerSensError", m.py().get_type::<MayerSensError>())?;
    m.add("PremiseFailed", m.py().get_type::<PremiseFailed>())?;
    m.add("CHECK_IDS", CHECK_IDS.to_vec())?;
    Ok(())
}
