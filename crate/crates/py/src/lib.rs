//! Python bindings: system pairs, covers, datasets, trained gap networks,
//! certificates, and the full pipeline.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use simgap::certificate::GapCertificate;
use simgap::config;
use simgap::covering::{build_cover, CoverGrid};
use simgap::dataset::{self, GapDataset};
use simgap::dynamics::{
    mecanum_nominal, mecanum_surrogate, pendulum_nominal, pendulum_surrogate, SystemPair,
    MECANUM_GAIN_X, MECANUM_GAIN_Y, MECANUM_SLIP, MECANUM_TAU, PENDULUM_DAMPING, PENDULUM_G,
    PENDULUM_L, PENDULUM_MASS, PENDULUM_TAU, PENDULUM_TORQUE_GAIN,
};
use simgap::lipnet::NetArtifact;
use simgap::pipeline::Pipeline;
use simgap::trainer::{train_all_coordinates, TrainConfig};
use simgap::SimGapError;

fn err(e: SimGapError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A nominal model paired with its surrogate simulator.
#[pyclass(name = "SystemPair")]
struct PySystemPair {
    inner: SystemPair,
}

#[pymethods]
impl PySystemPair {
    /// Pendulum with the default physical constants.
    #[staticmethod]
    #[pyo3(signature = (tau=PENDULUM_TAU, damping=PENDULUM_DAMPING, torque_gain=PENDULUM_TORQUE_GAIN))]
    fn pendulum(tau: f64, damping: f64, torque_gain: f64) -> PyResult<Self> {
        let nominal = pendulum_nominal(tau, PENDULUM_MASS, PENDULUM_G, PENDULUM_L).map_err(err)?;
        let surrogate = pendulum_surrogate(
            tau,
            PENDULUM_MASS,
            PENDULUM_G,
            PENDULUM_L,
            damping,
            torque_gain,
        )
        .map_err(err)?;
        Ok(Self {
            inner: SystemPair::new(nominal, surrogate, "pendulum").map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (tau=MECANUM_TAU, gain_x=MECANUM_GAIN_X, gain_y=MECANUM_GAIN_Y, slip=MECANUM_SLIP))]
    fn mecanum(tau: f64, gain_x: f64, gain_y: f64, slip: f64) -> PyResult<Self> {
        let nominal = mecanum_nominal(tau).map_err(err)?;
        let surrogate = mecanum_surrogate(tau, gain_x, gain_y, slip).map_err(err)?;
        Ok(Self {
            inner: SystemPair::new(nominal, surrogate, "mecanum").map_err(err)?,
        })
    }

    fn step_nominal(&self, x: Vec<f64>, u: Vec<f64>) -> Vec<f64> {
        self.inner.nominal.step(&x, &u)
    }

    fn step_surrogate(&self, x: Vec<f64>, u: Vec<f64>) -> Vec<f64> {
        self.inner.surrogate.step(&x, &u)
    }

    /// |f_hat(x,u) - f(x,u)| per coordinate.
    fn gap(&self, x: Vec<f64>, u: Vec<f64>) -> Vec<f64> {
        self.inner.gap(&x, &u)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    fn state_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.inner.nominal.state_box();
        (b.lower().to_vec(), b.upper().to_vec())
    }

    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.inner.nominal.input_box();
        (b.lower().to_vec(), b.upper().to_vec())
    }
}

/// An epsilon-net cover of the state or input box.
#[pyclass(name = "Cover")]
struct PyCover {
    state: CoverGrid,
    input: CoverGrid,
}

#[pymethods]
impl PyCover {
    #[new]
    fn new(pair: &PySystemPair, eps_x: f64, eps_u: f64) -> PyResult<Self> {
        Ok(Self {
            state: build_cover(pair.inner.nominal.state_box(), eps_x).map_err(err)?,
            input: build_cover(pair.inner.nominal.input_box(), eps_u).map_err(err)?,
        })
    }

    #[getter]
    fn state_centers(&self) -> usize {
        self.state.len()
    }

    #[getter]
    fn input_centers(&self) -> usize {
        self.input.len()
    }

    fn nearest_state_center(&self, point: Vec<f64>) -> PyResult<(usize, f64)> {
        self.state.nearest_center(&point).map_err(err)
    }
}

/// Paired-transition gap dataset over the cover centers.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: GapDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(pair: &PySystemPair, cover: &PyCover) -> PyResult<Self> {
        Ok(Self {
            inner: dataset::generate(&pair.inner, &cover.state, &cover.input).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn max_gap_target(&self, coordinate: usize) -> PyResult<f64> {
        self.inner.max_gap_target(coordinate).map_err(err)
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(&path).map_err(err)
    }
}

/// A trained Lipschitz-certified gap network.
#[pyclass(name = "GapNet")]
struct PyGapNet {
    inner: NetArtifact,
    eta: f64,
    coordinate: usize,
}

#[pymethods]
impl PyGapNet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: NetArtifact::load(&path).map_err(err)?,
            eta: f64::NAN,
            coordinate: 0,
        })
    }

    fn forward(&self, x: Vec<f64>, u: Vec<f64>) -> PyResult<f64> {
        self.inner.net.forward(&x, &u).map_err(err)
    }

    #[getter]
    fn l1(&self) -> f64 {
        self.inner.l1
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.eta
    }

    #[getter]
    fn coordinate(&self) -> usize {
        self.coordinate
    }
}

/// Trains one certified network per coordinate with eta bisection.
#[pyfunction]
#[pyo3(signature = (ds, l1_targets, seed, max_epochs=300, hidden=vec![16]))]
fn train(
    ds: &PyDataset,
    l1_targets: Vec<f64>,
    seed: u64,
    max_epochs: usize,
    hidden: Vec<usize>,
) -> PyResult<Vec<PyGapNet>> {
    let cfg = TrainConfig {
        l1_targets,
        seed,
        max_epochs,
        hidden_widths: hidden,
        ..TrainConfig::default()
    };
    let results = train_all_coordinates(&ds.inner, &cfg).map_err(err)?;
    Ok(results
        .into_iter()
        .map(|r| PyGapNet {
            inner: r.artifact,
            eta: r.eta,
            coordinate: r.coordinate,
        })
        .collect())
}

/// Continuum gap certificate.
#[pyclass(name = "Certificate")]
struct PyCertificate {
    inner: GapCertificate,
}

#[pymethods]
impl PyCertificate {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GapCertificate::load(&path).map_err(err)?,
        })
    }

    /// gamma(x,u) + L per coordinate.
    fn gap_bound(&self, pair: &PySystemPair, x: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.gap_bound(&pair.inner, &x, &u).map_err(err)
    }

    #[getter]
    fn l_const(&self) -> Vec<f64> {
        self.inner.l_const.clone()
    }

    #[getter]
    fn eta(&self) -> Vec<f64> {
        self.inner.eta.clone()
    }

    /// (violations, max_margin, min_margin) over fresh uniform probes.
    fn validate(
        &self,
        pair: &PySystemPair,
        n_probe: usize,
        seed: u64,
    ) -> PyResult<(usize, f64, f64)> {
        let r = self.inner.validate(&pair.inner, n_probe, seed).map_err(err)?;
        Ok((r.violations, r.max_margin, r.min_margin))
    }
}

/// L1*sqrt(eps_x^2 + eps_u^2) + L2x*eps_x + L2u*eps_u.
#[pyfunction]
fn inflation_constant(l1: f64, l2x: f64, l2u: f64, eps_x: f64, eps_u: f64) -> f64 {
    simgap::certificate::inflation_constant(l1, l2x, l2u, eps_x, eps_u)
}

#[pyfunction]
fn presets() -> Vec<String> {
    config::preset_names().iter().map(|s| s.to_string()).collect()
}

/// Runs the full pipeline for a bundled preset or a config file; returns the
/// report as a JSON string.
#[pyfunction]
#[pyo3(signature = (config_name, out_dir=None))]
fn run_pipeline(config_name: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = if let Some(p) = config::preset(config_name) {
        p
    } else {
        config::RunConfig::load(Path::new(config_name)).map_err(err)?
    };
    if let Some(out) = out_dir {
        cfg.out_dir = out;
    }
    let pipeline = Pipeline::new(cfg).map_err(err)?;
    let report = pipeline.run_all().map_err(err)?;
    serde_json_string(&report)
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn simgap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystemPair>()?;
    m.add_class::<PyCover>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGapNet>()?;
    m.add_class::<PyCertificate>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(inflation_constant, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
