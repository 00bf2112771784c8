//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists (via JSON), scenes may be given as JSON text or as dicts.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyString};
use serde::de::DeserializeOwned;
use serde::Serialize;

use spatial_rl::dataset::{self, QASample};
use spatial_rl::geometry;
use spatial_rl::grpo::{self, GrpoConfig, RolloutGroup};
use spatial_rl::harness::policy::{run_gradcheck, GradcheckConfig};
use spatial_rl::harness::simulation::{simulate as run_simulation, summarize, SimulationConfig};
use spatial_rl::matcher::{self, CostWeights};
use spatial_rl::reward::{self, GroundTruth, ScoringConfig};
use spatial_rl::scene_graph::{parse_scene_json, serialize_scene, BBox, SceneGraph};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.downcast::<PyString>() {
        return s.extract();
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    match obj {
        None => Ok(T::default()),
        Some(o) => serde_json::from_str(&json_text(o)?).map_err(value_error),
    }
}

fn scene_arg(obj: &Bound<'_, PyAny>) -> PyResult<SceneGraph> {
    parse_scene_json(&json_text(obj)?).map_err(|vs| {
        value_error(vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))
    })
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

/// Validates a scene graph and returns it in canonical form.
#[pyfunction]
fn parse_scene(py: Python<'_>, scene: &Bound<'_, PyAny>) -> PyResult<PyObject> {
    to_py(py, &scene_arg(scene)?)
}

/// Canonical JSON text of a scene graph.
#[pyfunction]
fn canonical_scene(scene: &Bound<'_, PyAny>) -> PyResult<String> {
    serialize_scene(&scene_arg(scene)?).map_err(value_error)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    geometry::iou(&bbox(a), &bbox(b)).map_err(value_error)
}

/// Returns `{"iou", "ciou", ...}`.
#[pyfunction]
fn ciou(py: Python<'_>, a: [f64; 4], b: [f64; 4]) -> PyResult<PyObject> {
    to_py(py, &geometry::ciou(&bbox(a), &bbox(b)).map_err(value_error)?)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, spatial=1.0, semantic=2.0))]
fn match_objects(py: Python<'_>, pred: &Bound<'_, PyAny>, gt: &Bound<'_, PyAny>, spatial: f64, semantic: f64) -> PyResult<PyObject> {
    let (p, g) = (scene_arg(pred)?, scene_arg(gt)?);
    let m = matcher::match_objects(&p.objects, &g.objects, CostWeights { spatial, semantic }).map_err(value_error)?;
    to_py(py, &m)
}

/// Scores responses with a fixed configuration.
#[pyclass(module = "spatialrl")]
struct Scorer {
    cfg: ScoringConfig,
}

#[pymethods]
impl Scorer {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: ScoringConfig = from_py(config)?;
        cfg.weights.validate().map_err(value_error)?;
        Ok(Self { cfg })
    }

    fn score(&self, py: Python<'_>, response: &str, answer: &str, subgraph: &Bound<'_, PyAny>) -> PyResult<PyObject> {
        let truth = GroundTruth::new(answer, scene_arg(subgraph)?);
        to_py(py, &reward::total_reward(response, &truth, &self.cfg))
    }

    /// `truths` is a list of `(answer, subgraph)` pairs aligned with `responses`.
    fn score_batch(&self, py: Python<'_>, responses: Vec<String>, truths: Vec<(String, Bound<'_, PyAny>)>) -> PyResult<PyObject> {
        let truths = truths
            .iter()
            .map(|(a, g)| Ok(GroundTruth::new(a.clone(), scene_arg(g)?)))
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = &self.cfg;
        let out = py.allow_threads(|| reward::score_batch(&responses, &truths, cfg)).map_err(value_error)?;
        to_py(py, &out)
    }

    fn config(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.cfg)
    }
}

#[pyfunction]
#[pyo3(signature = (response, answer, subgraph, config=None))]
fn total_reward(
    py: Python<'_>,
    response: &str,
    answer: &str,
    subgraph: &Bound<'_, PyAny>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<PyObject> {
    Scorer::new(config)?.score(py, response, answer, subgraph)
}

#[pyfunction]
#[pyo3(signature = (rewards, eps=1e-6))]
fn group_advantages(rewards: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    grpo::group_advantages(&rewards, eps).map_err(value_error)
}

/// Loss report for one group plus `grad_logp_new`.
#[pyfunction]
#[pyo3(signature = (rewards, logp_new, logp_old, logp_ref, config=None))]
fn grpo_loss(
    py: Python<'_>,
    rewards: Vec<f64>,
    logp_new: Vec<Vec<f64>>,
    logp_old: Vec<Vec<f64>>,
    logp_ref: Vec<Vec<f64>>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<PyObject> {
    let cfg: GrpoConfig = from_py(config)?;
    let group = RolloutGroup::new(rewards, logp_new, logp_old, logp_ref);
    let out = grpo::grpo_loss_with_grad(&group, &cfg).map_err(value_error)?;
    let dict = to_py(py, &out.report)?;
    dict.bind(py).downcast::<PyDict>()?.set_item("grad_logp_new", out.grad_logp_new)?;
    Ok(dict)
}

#[pyfunction]
fn extract_subgraph(py: Python<'_>, scene: &Bound<'_, PyAny>, question: &str) -> PyResult<PyObject> {
    to_py(py, &dataset::extract_subgraph(&scene_arg(scene)?, question))
}

/// Training prompt for a dataset sample dict.
#[pyfunction]
fn build_prompt(sample: &Bound<'_, PyAny>) -> PyResult<String> {
    let s: QASample = serde_json::from_str(&json_text(sample)?).map_err(value_error)?;
    dataset::build_prompt(&s).map_err(value_error)
}

/// Per-agent means of the reward-hacking simulation.
#[pyfunction]
#[pyo3(signature = (episodes=200, seed=42))]
fn simulate(py: Python<'_>, episodes: usize, seed: u64) -> PyResult<PyObject> {
    let cfg = SimulationConfig { episodes, ..Default::default() };
    cfg.validate().map_err(value_error)?;
    let summary = py.allow_threads(|| summarize(&run_simulation(&cfg, &ScoringConfig::default(), seed), seed));
    to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (seed=42, inject_fault=false))]
fn gradcheck(py: Python<'_>, seed: u64, inject_fault: bool) -> PyResult<PyObject> {
    let cfg = GradcheckConfig { inject_fault, ..Default::default() };
    let report = py.allow_threads(|| run_gradcheck(&cfg, &GrpoConfig::default(), &ScoringConfig::default(), seed));
    to_py(py, &report)
}

#[pymodule]
fn spatialrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scorer>()?;
    m.add_function(wrap_pyfunction!(parse_scene, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_scene, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(ciou, m)?)?;
    m.add_function(wrap_pyfunction!(match_objects, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(extract_subgraph, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
