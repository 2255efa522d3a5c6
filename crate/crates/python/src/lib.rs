//! Python module `dagdnn_py`.
//!
//! Networks, runs and tickets cross the boundary as JSON text; reports come
//! back as plain dicts.

use dagdnn::cpwl::{decompose, CpwlSpec};
use dagdnn::dot::export_dot;
use dagdnn::engine::{completeness, subgraph_eval, Engine};
use dagdnn::graph::NetworkSpec;
use dagdnn::lifting::{factorize_levels, reconstruct_graph, verify_inverse, Factorization};
use dagdnn::passes::{assign_levels, normalize_io, normalize_spec, run_pass, LevelGraph, Pass};
use dagdnn::prune::{rewind_prune, verify_ticket, RewindOptions, Ticket};
use dagdnn::train::{train as train_run, Dataset, InitMode, TrainConfig, TrainRun};
use dagdnn::NodeId;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(dagdnn_py, DagdnnError, PyException);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    DagdnnError::new_err(e.to_string())
}

fn from_json<T: DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Converts a serializable value to Python objects through the json module.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (to_json(v),))
}

/// A network description, possibly with several inputs or outputs.
#[pyclass(module = "dagdnn_py", skip_from_py_object)]
#[derive(Clone)]
struct Network {
    spec: NetworkSpec,
}

impl Network {
    fn levelled(&self) -> PyResult<LevelGraph> {
        normalize_spec(&self.spec).map_err(err)
    }
}

#[pymethods]
impl Network {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: NetworkSpec = from_json(text)?;
        spec.check_structure().map_err(err)?;
        Ok(Self { spec })
    }

    fn to_json(&self) -> String {
        to_json(&self.spec)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.spec.nodes.len()
    }

    #[getter]
    fn num_arcs(&self) -> usize {
        self.spec.arcs.len()
    }

    fn param_count(&self) -> PyResult<usize> {
        Ok(normalize_io(&self.spec).map_err(err)?.param_count())
    }

    /// Runs one pass: `io`, `concat`, `jumps` or `all`.
    #[pyo3(signature = (pass_name = "all"))]
    fn normalize(&self, pass_name: &str) -> PyResult<Network> {
        let pass: Pass = pass_name.parse().map_err(PyValueError::new_err)?;
        let g = run_pass(&self.spec, pass).map_err(err)?;
        Ok(Network { spec: g.to_spec() })
    }

    /// Level of every node of the single-terminal form.
    fn levels<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let g = normalize_io(&self.spec).map_err(err)?;
        to_py(py, &assign_levels(&g))
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let engine = Engine::from_levels(self.levelled()?).map_err(err)?;
        engine.forward(&x).map_err(err)
    }

    /// Evaluates the sub-graph of paths from node `j` to node `i`.
    fn eval_pair(&self, i: usize, j: usize, z: Vec<f64>) -> PyResult<Vec<f64>> {
        let lg = self.levelled()?;
        subgraph_eval(lg.graph(), NodeId(i), NodeId(j), &z).map_err(err)
    }

    fn complete_subgraphs<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &completeness(&self.levelled()?))
    }

    fn factorize(&self) -> PyResult<Lifting> {
        let f = factorize_levels(&self.levelled()?).map_err(err)?;
        Ok(Lifting { inner: f })
    }

    #[pyo3(signature = (normalized = false))]
    fn to_dot(&self, normalized: bool) -> PyResult<String> {
        let g = if normalized {
            self.levelled()?.into_graph()
        } else {
            normalize_io(&self.spec).map_err(err)?
        };
        Ok(export_dot(&g))
    }

    fn __repr__(&self) -> String {
        format!("Network(nodes={}, arcs={})", self.spec.nodes.len(), self.spec.arcs.len())
    }
}

/// Lifting matrices of a levelled network.
#[pyclass(module = "dagdnn_py")]
struct Lifting {
    inner: Factorization,
}

#[pymethods]
impl Lifting {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: from_json(text)? })
    }

    fn to_json(&self) -> String {
        to_json(&self.inner)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[pyo3(signature = (trials = 100, seed = 0, tol = 1e-12))]
    fn verify_inverse<'py>(&self, py: Python<'py>, trials: usize, seed: u64, tol: f64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &verify_inverse(&self.inner, trials, seed, tol).map_err(err)?)
    }

    #[pyo3(signature = (fold_relays = false))]
    fn reconstruct(&self, fold_relays: bool) -> PyResult<Network> {
        let g = reconstruct_graph(&self.inner, fold_relays).map_err(err)?;
        Ok(Network { spec: g.to_spec() })
    }
}

/// A finished training run.
#[pyclass(module = "dagdnn_py")]
struct Run {
    inner: TrainRun,
}

#[pymethods]
impl Run {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: from_json(text)? })
    }

    fn to_json(&self) -> String {
        to_json(&self.inner)
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.inner.loss_trace.clone()
    }

    #[getter]
    fn best_loss(&self) -> f64 {
        self.inner.best_loss
    }

    #[getter]
    fn best_fidelity(&self) -> f64 {
        self.inner.best_fidelity
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count
    }

    /// Rewinds to checkpoint `at` and prunes the zero nodes found there.
    #[pyo3(signature = (at = 0, tol = 0.0, level = None, scan_all = false, rescan = false))]
    fn prune(&self, at: usize, tol: f64, level: Option<usize>, scan_all: bool, rescan: bool) -> PyResult<PrunedTicket> {
        let opts = RewindOptions { tol, level, scan_all, rescan };
        let t = rewind_prune(&self.inner, at, &opts).map_err(err)?;
        Ok(PrunedTicket { inner: t })
    }
}

/// A pruned network together with the parameters it restarts from.
#[pyclass(name = "Ticket", module = "dagdnn_py")]
struct PrunedTicket {
    inner: Ticket,
}

#[pymethods]
impl PrunedTicket {
    fn to_json(&self) -> String {
        to_json(&self.inner)
    }

    #[getter]
    fn network(&self) -> Network {
        Network { spec: self.inner.graph.clone() }
    }

    #[getter]
    fn removed_nodes(&self) -> Vec<usize> {
        self.inner.removed_nodes.iter().map(|n| n.0).collect()
    }

    #[getter]
    fn zero_preserving(&self) -> bool {
        self.inner.zero_preserving
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count
    }
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (network, inputs, targets, *, seed, steps = 500, lr = 0.1, lam = 1e-4, checkpoint_every = 50, init = "graph", ticket = None))]
fn train(
    py: Python<'_>,
    network: &Network,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    seed: u64,
    steps: usize,
    lr: f64,
    lam: f64,
    checkpoint_every: usize,
    init: &str,
    ticket: Option<PyRef<'_, PrunedTicket>>,
) -> PyResult<Run> {
    let init = match init {
        "graph" => InitMode::Graph,
        "random" => InitMode::Random,
        other => return Err(PyValueError::new_err(format!("unknown init `{other}`"))),
    };
    let lg = network.levelled()?;
    let data = Dataset { inputs, targets };
    let cfg = TrainConfig { steps, lr, lambda: lam, seed, checkpoint_every, init, ..Default::default() };
    let provenance = ticket.map(|t| t.inner.provenance.clone());
    let mut run = py.detach(|| train_run(&lg, &data, &cfg)).map_err(err)?;
    run.provenance = provenance;
    Ok(Run { inner: run })
}

#[pyfunction]
#[pyo3(name = "verify_ticket")]
fn verify_ticket_py<'py>(py: Python<'py>, run0: &Run, run1: &Run) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &verify_ticket(&run0.inner, &run1.inner))
}

/// Rewrites a piecewise-linear function as a constant plus ReLU terms.
#[pyfunction]
#[pyo3(signature = (breakpoints, slopes, anchor = (0.0, 0.0)))]
fn relu_decompose<'py>(py: Python<'py>, breakpoints: Vec<f64>, slopes: Vec<f64>, anchor: (f64, f64)) -> PyResult<Bound<'py, PyAny>> {
    let spec = CpwlSpec::new(breakpoints, slopes, anchor).map_err(err)?;
    to_py(py, &decompose(&spec))
}

#[pymodule]
fn dagdnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DagdnnError", m.py().get_type::<DagdnnError>())?;
    m.add_class::<Network>()?;
    m.add_class::<Lifting>()?;
    m.add_class::<Run>()?;
    m.add_class::<PrunedTicket>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify_ticket_py, m)?)?;
    m.add_function(wrap_pyfunction!(relu_decompose, m)?)?;
    Ok(())
}
