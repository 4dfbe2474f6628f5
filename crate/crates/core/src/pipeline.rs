//! From recordings to prepared train / validation / test windows with
//! training-only context maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::context::ContextLibrary;
use crate::data::{make_samples, split, AgentTrajectory, HorizonConfig, SceneSample, SceneTag};
use crate::error::{Error, Result};
use crate::model::{prepare, PreparedScene};
use crate::synth::{generate_set, Archetype, ScenarioSpec};

/// Margin around observed positions when sizing a context map, meters.
pub const MAP_MARGIN: f64 = 20.0;

/// A whole recording: one scene at one location.
#[derive(Clone, Debug)]
pub struct Recording {
    pub tag: SceneTag,
    pub trajectories: Vec<AgentTrajectory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Steps between consecutive window starts.
    pub stride: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.1, 0.2],
            seed: 0,
            stride: 10,
        }
    }
}

/// Windows of each split in raw form.
#[derive(Clone, Debug)]
pub struct Windows {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub library: ContextLibrary,
}

impl Windows {
    pub fn from_recordings(recordings: &[Recording], horizon: &HorizonConfig, spec: &SplitSpec, cell_size: f64) -> Result<Self> {
        let mut samples = Vec::new();
        for r in recordings {
            samples.extend(make_samples(&r.trajectories, horizon, &r.tag, spec.stride)?);
        }
        if samples.is_empty() {
            return Err(Error::Data("recordings are too short for a single window".into()));
        }
        let parts = split(samples, spec.ratios, spec.seed)?;
        let train_ids: std::collections::BTreeSet<&str> =
            parts.train.iter().map(|s| s.scene.scene_id.as_str()).collect();
        let library = ContextLibrary::build_train(
            recordings
                .iter()
                .filter(|r| train_ids.contains(r.tag.scene_id.as_str()))
                .map(|r| (r.tag.location.as_str(), r.tag.scene_id.as_str(), r.trajectories.as_slice())),
            cell_size,
            MAP_MARGIN,
        )?;
        for map in library.maps.values() {
            map.provenance
                .check_disjoint(parts.val.iter().chain(&parts.test).map(|s| s.scene.scene_id.as_str()))?;
        }
        Ok(Self {
            train: parts.train,
            val: parts.val,
            test: parts.test,
            library,
        })
    }

    /// Prepare every split for `config`; training windows carry future
    /// graphs, the others only history plus ground truth.
    pub fn prepare(&self, config: &ModelConfig) -> Result<Dataset> {
        let lib = Some(&self.library);
        let run = |set: &[SceneSample], future: bool| -> Result<Vec<PreparedScene>> {
            set.par_iter().map(|s| prepare(s, config, lib, future)).collect()
        };
        Ok(Dataset {
            train: run(&self.train, true)?,
            val: run(&self.val, false)?,
            test: run(&self.test, false)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
    pub test: Vec<PreparedScene>,
}

/// Simulated recordings of one archetype.
pub fn synthetic_recordings(base: &ScenarioSpec, n_scenes: usize) -> Result<Vec<Recording>> {
    Ok(generate_set(base, n_scenes)?
        .into_iter()
        .map(|s| Recording {
            tag: s.tag,
            trajectories: s.trajectories,
        })
        .collect())
}

/// Default synthetic benchmark: `n_scenes` interactive scenes of the given
/// archetype, 6 vehicles, 6 s each with 5 cm position noise.
pub fn synthetic_spec(archetype: Archetype, seed: u64) -> ScenarioSpec {
    ScenarioSpec::new(archetype, 6, 60, 0.1, 0.05, seed)
}

/// A three-vehicle intersection window with its own context map, sized for
/// finite-difference checks.
pub fn toy_window(t_h: usize, t_f: usize, seed: u64) -> Result<(SceneSample, ContextLibrary)> {
    let h = HorizonConfig { t_h, t_f, dt: 0.1 };
    let scene = crate::synth::generate(&ScenarioSpec::new(Archetype::Intersection, 3, 40, 0.1, 0.0, seed))?;
    let sample = scene
        .samples(&h, 5)?
        .into_iter()
        .max_by_key(|s| s.n_agents())
        .ok_or_else(|| Error::Data("toy scene yielded no window".into()))?;
    let library = ContextLibrary::build_train(
        [(sample.scene.location.as_str(), sample.scene.scene_id.as_str(), scene.trajectories.as_slice())],
        2.0,
        MAP_MARGIN,
    )?;
    Ok((sample, library))
}
