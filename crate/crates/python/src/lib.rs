//! Python bindings. Structured results (reports, forecasts) cross the
//! boundary as plain dicts and lists built from their JSON form.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use stgdat_core::config::{Ablation, ModelConfig, TrainConfig};
use stgdat_core::data::HorizonConfig;
use stgdat_core::model::{prepare, Model as CoreModel};
use stgdat_core::nn::Checkpoint;
use stgdat_core::pipeline::{Recording, SplitSpec, Windows};
use stgdat_core::predict::{forecast, PredictMode, PredictOptions};
use stgdat_core::synth::{generate_set, Archetype, ScenarioSpec, SynthScene};
use stgdat_core::tracker::{run_tracking, ProcessMode, TrackerConfig, TrackingStream};
use stgdat_core::trainer::{self, ToyCheck};

fn err(e: stgdat_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = stgdat_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// A simulated scene: noisy observations plus ground-truth states.
#[pyclass(module = "stgdat", skip_from_py_object)]
#[derive(Clone)]
struct Scene {
    inner: SynthScene,
}

#[pymethods]
impl Scene {
    #[getter]
    fn scene_id(&self) -> String {
        self.inner.tag.scene_id.clone()
    }

    #[getter]
    fn location(&self) -> String {
        self.inner.tag.location.clone()
    }

    /// Step length in seconds.
    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn agent_ids(&self) -> Vec<i64> {
        self.inner.trajectories.iter().map(|a| a.agent_id).collect()
    }

    /// Observed `(x, y)` positions of one agent in metres.
    fn positions(&self, agent_id: i64) -> PyResult<Vec<(f64, f64)>> {
        let a = self
            .inner
            .trajectories
            .iter()
            .find(|a| a.agent_id == agent_id)
            .ok_or_else(|| PyValueError::new_err(format!("no agent {agent_id}")))?;
        Ok(a.samples.iter().map(|s| (s.x, s.y)).collect())
    }

    /// Noise-free `(x, y)` positions of one agent in metres.
    fn truth_positions(&self, agent_id: i64) -> PyResult<Vec<(f64, f64)>> {
        let a = self
            .inner
            .truth
            .iter()
            .find(|a| a.agent_id == agent_id)
            .ok_or_else(|| PyValueError::new_err(format!("no agent {agent_id}")))?;
        Ok(a.states.iter().map(|s| (s.x, s.y)).collect())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: from_json(s, "scene")?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(id={:?}, agents={}, steps={})",
            self.inner.tag.scene_id,
            self.inner.trajectories.len(),
            self.inner.truth.first().map_or(0, |t| t.states.len())
        )
    }
}

/// Simulate `n_scenes` scenes; scene `i` uses seed `seed + i`.
#[pyfunction]
#[pyo3(signature = (archetype, n_scenes, n_agents=6, steps=60, dt=0.1, noise=0.05, seed=0))]
fn generate_scenes(
    archetype: &str,
    n_scenes: usize,
    n_agents: usize,
    steps: usize,
    dt: f64,
    noise: f64,
    seed: u64,
) -> PyResult<Vec<Scene>> {
    let spec = ScenarioSpec::new(parse::<Archetype>(archetype)?, n_agents, steps, dt, noise, seed);
    spec.validate().map_err(err)?;
    Ok(generate_set(&spec, n_scenes)
        .map_err(err)?
        .into_iter()
        .map(|inner| Scene { inner })
        .collect())
}

/// Train/validation/test windows cut from scenes, with context maps built
/// from the training scenes only.
#[pyclass(module = "stgdat", skip_from_py_object)]
struct Dataset {
    windows: Windows,
}

#[pymethods]
impl Dataset {
    /// Horizons, step and map cell size come from `model`'s config.
    #[staticmethod]
    #[pyo3(signature = (scenes, model, split=(0.7, 0.1, 0.2), stride=10, seed=0))]
    fn from_scenes(
        scenes: Vec<PyRef<'_, Scene>>,
        model: &Model,
        split: (f64, f64, f64),
        stride: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = &model.inner.config;
        let dt = cfg.dt;
        let recordings: Vec<Recording> = scenes
            .iter()
            .map(|s| {
                let trajectories = s
                    .inner
                    .trajectories
                    .iter()
                    .map(|a| stgdat_core::data::resample(a, dt))
                    .collect::<stgdat_core::Result<_>>()?;
                Ok(Recording {
                    tag: s.inner.tag.clone(),
                    trajectories,
                })
            })
            .collect::<stgdat_core::Result<_>>()
            .map_err(err)?;
        let spec = SplitSpec {
            ratios: [split.0, split.1, split.2],
            seed,
            stride,
        };
        let windows = Windows::from_recordings(
            &recordings,
            &HorizonConfig {
                t_h: cfg.t_h,
                t_f: cfg.t_f,
                dt,
            },
            &spec,
            cfg.cell_size,
        ).map_err(err)?;
        Ok(Self { windows })
    }

    /// Window counts `(train, val, test)`.
    fn sizes(&self) -> (usize, usize, usize) {
        (self.windows.train.len(), self.windows.val.len(), self.windows.test.len())
    }

    /// Locations that have a context map.
    fn locations(&self) -> Vec<String> {
        self.windows.library.maps.keys().cloned().collect()
    }
}

/// A trajectory model: graph encoder, latent prior and decoder.
#[pyclass(module = "stgdat", skip_from_py_object)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// `config` is model-config JSON; `preset` picks `"default"` or
    /// `"compact"` widths when no JSON is given.
    #[new]
    #[pyo3(signature = (config=None, preset="compact", ablation=None, seed=0))]
    fn new(config: Option<&str>, preset: &str, ablation: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut cfg: ModelConfig = match (config, preset) {
            (Some(s), _) => from_json(s, "model config")?,
            (None, "compact") => ModelConfig::compact(),
            (None, "default") => ModelConfig::default(),
            (None, p) => return Err(PyValueError::new_err(format!("unknown preset {p:?}"))),
        };
        if let Some(a) = ablation {
            cfg.ablation = parse::<Ablation>(a)?;
        }
        Ok(Self {
            inner: CoreModel::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: CoreModel::from_checkpoint(&ckpt).map_err(err)?,
        })
    }

    /// Write a checkpoint and return its content hash.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        self.inner.to_checkpoint().map_err(err)?.save(&path).map_err(err)
    }

    #[getter]
    fn ablation(&self) -> String {
        self.inner.config.ablation.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.iter().map(|(_, p)| p.value.len()).sum()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Train on the dataset's train split with early stopping on its
    /// validation split; returns the training report.
    #[pyo3(signature = (dataset, epochs=None, config=None, seed=0))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &Dataset,
        epochs: Option<usize>,
        config: Option<&str>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut tc: TrainConfig = match config {
            Some(s) => from_json(s, "train config")?,
            None => TrainConfig::default(),
        };
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        tc.seed = seed;
        tc.validate().map_err(err)?;
        let data = dataset.windows.prepare(&self.inner.config).map_err(err)?;
        let model = &mut self.inner;
        let report = py
            .detach(|| trainer::train(model, &data.train, &data.val, &tc, |_| {}))
            .map_err(err)?;
        to_py(py, &report)
    }

    /// Point-prediction `(ade, fde)` in metres on a split.
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate(&self, dataset: &Dataset, split: &str) -> PyResult<(f64, f64)> {
        let data = dataset.windows.prepare(&self.inner.config).map_err(err)?;
        let scenes = match split {
            "train" => &data.train,
            "val" => &data.val,
            "test" => &data.test,
            s => return Err(PyValueError::new_err(format!("unknown split {s:?}"))),
        };
        trainer::point_metrics(&self.inner, scenes).map_err(err)
    }

    /// Sampled forecasts for every window of a split, as a list of dicts.
    #[pyo3(signature = (dataset, split="test", k=20, mode="gaussian", particles=100, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn forecast<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        split: &str,
        k: usize,
        mode: &str,
        particles: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let samples = match split {
            "train" => &dataset.windows.train,
            "val" => &dataset.windows.val,
            "test" => &dataset.windows.test,
            s => return Err(PyValueError::new_err(format!("unknown split {s:?}"))),
        };
        let cfg = &self.inner.config;
        let prepared = samples
            .iter()
            .map(|s| prepare(s, cfg, Some(&dataset.windows.library), false))
            .collect::<stgdat_core::Result<Vec<_>>>()
            .map_err(err)?;
        let options = PredictOptions {
            mode: parse::<PredictMode>(mode)?,
            k,
            particles,
            seed,
            zero_latent: false,
        };
        to_py(py, &forecast(&self.inner, &prepared, &options).map_err(err)?)
    }
}

/// Track every agent of a scene with a Kalman filter; returns the report.
#[pyfunction]
#[pyo3(signature = (scene, mode="cvm", model=None, dataset=None, config=None))]
fn track<'py>(
    py: Python<'py>,
    scene: &Scene,
    mode: &str,
    model: Option<&Model>,
    dataset: Option<&Dataset>,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrackerConfig = match config {
        Some(s) => from_json(s, "tracker config")?,
        None => TrackerConfig::default(),
    };
    let stream = TrackingStream::from_synth(&scene.inner).map_err(err)?;
    let report = run_tracking(
        &stream,
        parse::<ProcessMode>(mode)?,
        &cfg,
        model.map(|m| &m.inner),
        dataset.map(|d| &d.windows.library),
    )
    .map_err(err)?;
    to_py(py, &report)
}

/// Full-loss gradient check on a small three-agent window.
#[pyfunction]
#[pyo3(signature = (ablation="T+C+K", seed=0))]
fn grad_check<'py>(py: Python<'py>, ablation: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let report = ToyCheck::new(parse::<Ablation>(ablation)?, seed).run().map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn stgdat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
