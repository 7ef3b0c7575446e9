//! Python bindings: the Pixel-Taxi environment, preprocessing, the feedback
//! losses, saliency augmentation, agents and single-seed training runs.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyUntypedArrayMethods, PyArray1, PyArray2, PyArray3, PyArray4, PyArrayMethods, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use expand_core::agent::{Agent as CoreAgent, Algo};
use expand_core::augment::{self, AugmentationPreset, GaussianFilter, LossWeights};
use expand_core::env::{Action, Environment, PixelTaxi as CoreTaxi, TaxiConfig};
use expand_core::feedback::{self, BoundingBox, Label};
use expand_core::orchestrator::metrics::{read_metrics, steps_to_threshold as core_steps, EpisodeMetrics, RETURN_THRESHOLD, RUNNING_WINDOW};
use expand_core::orchestrator::{run_experiment as core_run, NetworkSize, OracleProvider, RunConfig as CoreConfig};
use expand_core::state::{self, Frame, RawFrame, StackedState, FRAME_LEN, FRAME_SIDE, STACK};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn boxes_from(boxes: Vec<(i32, i32, i32, i32)>) -> PyResult<Vec<BoundingBox>> {
    boxes.into_iter().map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).map_err(err)).collect()
}

fn label_from(label: i64) -> PyResult<Label> {
    Label::try_from(label).map_err(err)
}

fn frame_from(pixels: &[f32]) -> PyResult<Frame> {
    Frame::from_pixels(pixels.to_vec()).map_err(err)
}

fn state_from(array: PyReadonlyArray3<f32>) -> PyResult<StackedState> {
    let shape = array.shape();
    if shape != [STACK, FRAME_SIDE, FRAME_SIDE] {
        return Err(err(format!("state must be {STACK}x{FRAME_SIDE}x{FRAME_SIDE}, got {shape:?}")));
    }
    let flat = array.as_slice().map_err(err)?;
    let f = |i: usize| frame_from(&flat[i * FRAME_LEN..(i + 1) * FRAME_LEN]);
    Ok(StackedState::from_frames([f(0)?, f(1)?, f(2)?, f(3)?]))
}

fn state_to_vec(s: &StackedState) -> Vec<f32> {
    let mut out = vec![0.0; STACK * FRAME_LEN];
    s.write_into(&mut out);
    out
}

fn raw_to_py<'py>(py: Python<'py>, frame: &RawFrame) -> PyResult<Bound<'py, PyArray3<u8>>> {
    let flat: Vec<u8> = frame.pixels().iter().flat_map(|p| p.iter().copied()).collect();
    flat.into_pyarray(py).reshape([frame.height(), frame.width(), 3])
}

fn raw_from(array: PyReadonlyArray3<u8>) -> PyResult<RawFrame> {
    let shape = array.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(err(format!("frame must be HxWx3 uint8, got {shape:?}")));
    }
    let flat = array.as_slice().map_err(err)?;
    let pixels = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    RawFrame::new(shape[1], shape[0], pixels).map_err(err)
}

fn plane<'py>(py: Python<'py>, v: Vec<f32>) -> PyResult<Bound<'py, PyArray2<f32>>> {
    v.into_pyarray(py).reshape([FRAME_SIDE, FRAME_SIDE])
}

fn metrics_to_py<'py>(py: Python<'py>, metrics: &[EpisodeMetrics]) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(metrics).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Names of the action indices.
#[pyfunction]
fn action_names() -> Vec<String> {
    Action::ALL.iter().map(|a| format!("{a:?}").to_lowercase()).collect()
}

/// Names accepted by `Agent` and `RunConfig.algo`.
#[pyfunction]
fn algorithms() -> Vec<&'static str> {
    Algo::ALL.iter().map(|a| a.as_str()).collect()
}

/// RGB `HxWx3` uint8 frame to an 84x84 float32 luminance frame in [0, 1].
#[pyfunction]
fn preprocess<'py>(py: Python<'py>, frame: PyReadonlyArray3<u8>) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let raw = raw_from(frame)?;
    plane(py, state::preprocess(&raw).pixels().to_vec())
}

/// Feedback loss of one record; `label` is +1 (good) or -1 (bad).
#[pyfunction]
#[pyo3(signature = (q_values, action, label, margin = 0.05))]
fn advantage_loss(q_values: Vec<f64>, action: usize, label: i64, margin: f64) -> PyResult<f64> {
    feedback::advantage_loss(&q_values, action, label_from(label)?, margin).map_err(err)
}

#[pyfunction]
fn invariance_loss(q_original: Vec<f64>, q_augmented: Vec<Vec<f64>>) -> PyResult<f64> {
    augment::invariance_loss(&q_original, &q_augmented).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (advantage, invariance, advantage_weight = 1.0, invariance_weight = 0.1))]
fn combined_feedback_loss(advantage: f64, invariance: f64, advantage_weight: f64, invariance_weight: f64) -> f64 {
    augment::combined_feedback_loss(
        advantage,
        invariance,
        LossWeights {
            advantage: advantage_weight,
            invariance: invariance_weight,
        },
    )
}

/// Mean squared difference between an 84x84 map and the mask of `boxes`.
#[pyfunction]
fn explanation_loss(predicted: PyReadonlyArray2<f64>, boxes: Vec<(i32, i32, i32, i32)>) -> PyResult<f64> {
    let mask = augment::build_mask(&boxes_from(boxes)?);
    expand_core::baselines::explanation_loss(predicted.as_slice().map_err(err)?, &mask).map_err(err)
}

/// 84x84 boolean mask of the union of `(x, y, w, h)` boxes.
#[pyfunction]
fn build_mask<'py>(py: Python<'py>, boxes: Vec<(i32, i32, i32, i32)>) -> PyResult<Bound<'py, PyArray2<bool>>> {
    let mask = augment::build_mask(&boxes_from(boxes)?);
    mask.bits().to_vec().into_pyarray(py).reshape([FRAME_SIDE, FRAME_SIDE])
}

#[pyfunction]
fn gaussian_blur<'py>(py: Python<'py>, frame: PyReadonlyArray2<f32>, size: usize, sigma: f64) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let f = frame_from(frame.as_slice().map_err(err)?)?;
    let filter = GaussianFilter::new(size, sigma).map_err(err)?;
    plane(py, augment::gaussian_blur(&f, filter).pixels().to_vec())
}

/// Blur everything outside `boxes` in each frame of a `4x84x84` state.
#[pyfunction]
fn perturb_state<'py>(
    py: Python<'py>,
    state: PyReadonlyArray3<f32>,
    boxes: Vec<(i32, i32, i32, i32)>,
    size: usize,
    sigma: f64,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let s = state_from(state)?;
    let mask = augment::build_mask(&boxes_from(boxes)?);
    let filter = GaussianFilter::new(size, sigma).map_err(err)?;
    state_to_vec(&augment::perturb_state(&s, &mask, filter))
        .into_pyarray(py)
        .reshape([STACK, FRAME_SIDE, FRAME_SIDE])
}

/// One perturbed copy per filter of a named preset (`aug1`, `aug5`, `aug12`).
#[pyfunction]
#[pyo3(signature = (state, boxes, preset = "aug5"))]
fn augment_state<'py>(
    py: Python<'py>,
    state: PyReadonlyArray3<f32>,
    boxes: Vec<(i32, i32, i32, i32)>,
    preset: &str,
) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let s = state_from(state)?;
    let mask = augment::build_mask(&boxes_from(boxes)?);
    let preset = AugmentationPreset::named(preset).map_err(err)?;
    let copies = augment::augment_state(&s, &mask, &preset);
    let flat: Vec<f32> = copies.iter().flat_map(state_to_vec).collect();
    flat.into_pyarray(py).reshape([copies.len(), STACK, FRAME_SIDE, FRAME_SIDE])
}

/// Pixel-Taxi with pixel observations.
#[pyclass(unsendable)]
struct PixelTaxi {
    env: CoreTaxi,
}

#[pymethods]
impl PixelTaxi {
    #[new]
    #[pyo3(signature = (grid_size = 7, n_passengers = 3, max_steps = 100, cell_px = 12))]
    fn new(grid_size: usize, n_passengers: usize, max_steps: usize, cell_px: usize) -> PyResult<Self> {
        let config = TaxiConfig {
            grid_size,
            n_passengers,
            max_steps,
            cell_px,
        };
        Ok(Self {
            env: CoreTaxi::new(config).map_err(err)?,
        })
    }

    /// Start an episode; returns the RGB frame.
    fn reset<'py>(&mut self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyArray3<u8>>> {
        let frame = self.env.reset(seed).map_err(err)?;
        raw_to_py(py, &frame)
    }

    /// Returns `(frame, reward, terminal)`.
    fn step<'py>(&mut self, py: Python<'py>, action: usize) -> PyResult<(Bound<'py, PyArray3<u8>>, f64, bool)> {
        let out = self.env.step(action).map_err(err)?;
        Ok((raw_to_py(py, &out.frame)?, out.reward, out.terminal))
    }

    /// Scripted action for the current state, `None` once the episode is over.
    fn oracle_action(&self) -> Option<usize> {
        self.env.state().and_then(expand_core::oracle::oracle_action).map(Action::index)
    }

    /// Oracle saliency boxes `(x, y, w, h)` for the current state.
    fn saliency_boxes(&self) -> Vec<(i32, i32, i32, i32)> {
        self.env
            .state()
            .map(|s| expand_core::oracle::saliency_boxes(s).iter().map(|b| (b.x, b.y, b.w, b.h)).collect())
            .unwrap_or_default()
    }

    #[getter]
    fn taxi(&self) -> Option<(usize, usize)> {
        self.env.state().map(|s| (s.taxi.x, s.taxi.y))
    }

    #[getter]
    fn destination(&self) -> Option<(usize, usize)> {
        self.env.state().map(|s| (s.destination.x, s.destination.y))
    }

    #[getter]
    fn carrying(&self) -> bool {
        self.env.state().is_some_and(|s| s.carried.is_some())
    }
}

/// A learner for one algorithm variant, for inspection and single updates.
#[pyclass(unsendable)]
struct Agent {
    agent: CoreAgent,
}

#[pymethods]
impl Agent {
    #[new]
    #[pyo3(signature = (algo, seed = 0, network = "standard"))]
    fn new(algo: &str, seed: u64, network: &str) -> PyResult<Self> {
        let mut config = CoreConfig {
            algo: algo.parse().map_err(err)?,
            ..CoreConfig::default()
        };
        config.network = network_from(network)?;
        Ok(Self {
            agent: CoreAgent::new(config.algo, config.learner(), seed).map_err(err)?,
        })
    }

    #[getter]
    fn algo(&self) -> &'static str {
        self.agent.algo().as_str()
    }

    /// Q-values of a `4x84x84` float32 state.
    fn q_values(&self, state: PyReadonlyArray3<f32>) -> PyResult<Vec<f32>> {
        Ok(self.agent.q_values(&state_from(state)?))
    }

    /// Saliency map of the attention-based baselines, else `None`.
    fn attention_map<'py>(&self, py: Python<'py>, state: PyReadonlyArray3<f32>) -> PyResult<Option<Bound<'py, PyArray2<f32>>>> {
        self.agent.attention_map(&state_from(state)?).map(|m| plane(py, m)).transpose()
    }
}

fn network_from(name: &str) -> PyResult<NetworkSize> {
    match name {
        "standard" => Ok(NetworkSize::Standard),
        "tiny" => Ok(NetworkSize::Tiny),
        other => Err(err(format!("unknown network `{other}`; expected standard or tiny"))),
    }
}

/// Run configuration; the same keys as the CLI's TOML files.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct RunConfig {
    config: CoreConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let config = match toml {
            Some(t) => CoreConfig::from_toml_str(t).map_err(err)?,
            None => CoreConfig::default(),
        };
        Ok(Self { config })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.config.to_toml().map_err(err)
    }

    #[getter]
    fn algo(&self) -> &'static str {
        self.config.algo.as_str()
    }

    #[setter]
    fn set_algo(&mut self, algo: &str) -> PyResult<()> {
        self.config.algo = algo.parse().map_err(err)?;
        Ok(())
    }

    #[getter]
    fn episodes(&self) -> usize {
        self.config.episodes
    }

    #[setter]
    fn set_episodes(&mut self, episodes: usize) {
        self.config.episodes = episodes;
    }

    #[getter]
    fn network(&self) -> &'static str {
        match self.config.network {
            NetworkSize::Standard => "standard",
            NetworkSize::Tiny => "tiny",
        }
    }

    #[setter]
    fn set_network(&mut self, network: &str) -> PyResult<()> {
        self.config.network = network_from(network)?;
        Ok(())
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.config.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.config.out = out;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(algo={}, episodes={}, network={})", self.algo(), self.episodes(), self.network())
    }
}

/// Train one seed with the synthetic oracle; returns per-episode metrics as
/// dicts and, with `out`, writes the run directory.
#[pyfunction]
#[pyo3(signature = (config, seed = 0, out = None))]
fn run_experiment<'py>(py: Python<'py>, config: &RunConfig, seed: u64, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.config.clone();
    cfg.validate().map_err(err)?;
    let metrics = py
        .detach(|| {
            let mut oracle = OracleProvider {
                density: cfg.feedback_density,
            };
            core_run(&cfg, seed, &mut oracle, out.as_deref())
        })
        .map_err(err)?;
    metrics_to_py(py, &metrics)
}

/// Metrics of a `metrics.jsonl` file as a list of dicts.
#[pyfunction]
fn load_metrics<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    metrics_to_py(py, &read_metrics(&path).map_err(err)?)
}

/// `(steps, reached)` for a `metrics.jsonl` file: environment steps until
/// the 20-episode running-average return first reaches `threshold`.
#[pyfunction]
#[pyo3(signature = (path, threshold = RETURN_THRESHOLD))]
fn steps_to_threshold(path: PathBuf, threshold: f64) -> PyResult<(u64, bool)> {
    let s = core_steps(&read_metrics(&path).map_err(err)?, threshold, RUNNING_WINDOW);
    Ok((s.steps, s.reached))
}

/// Running average of a return sequence over `window` episodes.
#[pyfunction]
#[pyo3(signature = (returns, window = RUNNING_WINDOW))]
fn running_average<'py>(py: Python<'py>, returns: PyReadonlyArray1<f64>, window: usize) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let r = returns.as_slice().map_err(err)?;
    Ok(expand_core::orchestrator::metrics::running_average(r, window).into_pyarray(py))
}

#[pymodule]
fn expand(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(action_names, m)?)?;
    m.add_function(wrap_pyfunction!(algorithms, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(advantage_loss, m)?)?;
    m.add_function(wrap_pyfunction!(invariance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_feedback_loss, m)?)?;
    m.add_function(wrap_pyfunction!(explanation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_blur, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_state, m)?)?;
    m.add_function(wrap_pyfunction!(augment_state, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(load_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(steps_to_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(running_average, m)?)?;
    m.add_class::<PixelTaxi>()?;
    m.add_class::<Agent>()?;
    m.add_class::<RunConfig>()?;
    m.add("ACTIONS", Action::ALL.len())?;
    Ok(())
}
