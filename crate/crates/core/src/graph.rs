//! Per-step interaction graphs over the agents of a window, with
//! agent-centric relation features on directed edges.

use serde::{Deserialize, Serialize};

use crate::data::{SceneSample, TrajectorySample};
use crate::error::{Error, Result};
use crate::geom::{dist, to_local, wrap_angle};

/// Width of a relation feature: relative position (2), relative velocity (2),
/// relative heading (1).
pub const RELATION_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Edge distance threshold, meters; pairs at exactly `d` are connected.
    pub d: f64,
    pub include_self: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            d: 30.0,
            include_self: true,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0) {
            return Err(Error::Config(format!("edge threshold d must be > 0 m, got {}", self.d)));
        }
        Ok(())
    }
}

/// Agent `j` seen from agent `i`: `i` at the origin, its heading along +x.
pub fn relation_feature(state_i: &TrajectorySample, state_j: &TrajectorySample) -> [f64; RELATION_DIM] {
    let p = to_local([state_j.x - state_i.x, state_j.y - state_i.y], state_i.psi);
    let (vi, vj) = (state_i.velocity(), state_j.velocity());
    let v = to_local([vj[0] - vi[0], vj[1] - vi[1]], state_i.psi);
    [p[0], p[1], v[0], v[1], wrap_angle(state_j.psi - state_i.psi)]
}

/// Directed edge carrying information from `src` to `dst`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub dst: usize,
    pub src: usize,
    /// `relation_feature(dst, src)`.
    pub feature: [f64; RELATION_DIM],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepGraph {
    /// Edges between distinct agents, sorted by `(dst, src)`.
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub n: usize,
    /// Window index of `steps[0]`.
    pub first_step: usize,
    pub steps: Vec<StepGraph>,
    pub include_self: bool,
}

impl SceneGraph {
    /// `N(i)` at graph step `k`, in ascending order; contains `i` when
    /// self-loops are enabled.
    pub fn neighbors(&self, k: usize, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.steps[k]
            .edges
            .iter()
            .filter(|e| e.dst == i)
            .map(|e| e.src)
            .collect();
        if self.include_self {
            out.push(i);
        }
        out.sort_unstable();
        out
    }

    pub fn edge_count(&self, k: usize) -> usize {
        self.steps[k].edges.len()
    }

    /// Adjacency per step for inspection: `{"step", "edges": [[dst, src]]}`.
    pub fn adjacency_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.steps
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    serde_json::json!({
                        "step": self.first_step + k,
                        "edges": s.edges.iter().map(|e| [e.dst, e.src]).collect::<Vec<_>>(),
                    })
                })
                .collect(),
        )
    }
}

fn build_range(sample: &SceneSample, steps: std::ops::Range<usize>, config: &GraphConfig) -> SceneGraph {
    let n = sample.n_agents();
    let first_step = steps.start;
    let steps = steps
        .map(|k| {
            let mut edges = Vec::new();
            for i in 0..n {
                let si = &sample.trajectories[i].samples[k];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let sj = &sample.trajectories[j].samples[k];
                    if dist(si.pos(), sj.pos()) <= config.d {
                        edges.push(Edge {
                            dst: i,
                            src: j,
                            feature: relation_feature(si, sj),
                        });
                    }
                }
            }
            StepGraph { edges }
        })
        .collect();
    SceneGraph {
        n,
        first_step,
        steps,
        include_self: config.include_self,
    }
}

/// History graph over window steps `0..t_h` and future graph over
/// `t_h..t_h+t_f`, thresholding distances independently at every step.
pub fn build_graphs(sample: &SceneSample, config: &GraphConfig) -> Result<(SceneGraph, SceneGraph)> {
    config.validate()?;
    let (t_h, t_f) = (sample.t_h, sample.t_f);
    if let Some(a) = sample.trajectories.iter().find(|a| a.samples.len() != t_h + t_f) {
        return Err(Error::Data(format!(
            "agent {} has {} samples, window needs {}",
            a.agent_id,
            a.samples.len(),
            t_h + t_f
        )));
    }
    Ok((build_range(sample, 0..t_h, config), build_range(sample, t_h..t_h + t_f, config)))
}

/// History-only graph, for inference where no future is available.
pub fn build_history_graph(sample: &SceneSample, config: &GraphConfig) -> Result<SceneGraph> {
    config.validate()?;
    let t_h = sample.t_h;
    if let Some(a) = sample.trajectories.iter().find(|a| a.samples.len() < t_h) {
        return Err(Error::Data(format!("agent {} has fewer than {t_h} history samples", a.agent_id)));
    }
    Ok(build_range(sample, 0..t_h, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AgentTrajectory, AgentType, SceneTag};
    use std::f64::consts::FRAC_PI_2;

    fn state(x: f64, y: f64, psi: f64, v: f64) -> TrajectorySample {
        TrajectorySample { t: 0.0, x, y, v, psi }
    }

    fn scene(points: &[(f64, f64)]) -> SceneSample {
        SceneSample {
            scene: SceneTag {
                scene_id: "s".into(),
                location: "l".into(),
            },
            start_step: 0,
            dt: 0.1,
            t_h: 1,
            t_f: 1,
            trajectories: points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| AgentTrajectory {
                    agent_id: i as i64,
                    agent_type: AgentType::Pedestrian,
                    samples: vec![state(x, y, 0.0, 1.0); 2],
                })
                .collect(),
        }
    }

    fn cfg(d: f64) -> GraphConfig {
        GraphConfig { d, include_self: true }
    }

    #[test]
    fn threshold_is_inclusive() {
        let (hg, _) = build_graphs(&scene(&[(0., 0.), (12., 0.)]), &cfg(10.0)).unwrap();
        assert_eq!(hg.edge_count(0), 0);
        let (hg, fg) = build_graphs(&scene(&[(0., 0.), (10., 0.)]), &cfg(10.0)).unwrap();
        assert_eq!(hg.edge_count(0), 2);
        assert_eq!(fg.edge_count(0), 2);
    }

    #[test]
    fn complete_digraph_and_self_membership() {
        let (hg, _) = build_graphs(&scene(&[(0., 0.), (1., 0.), (0., 1.)]), &cfg(10.0)).unwrap();
        assert_eq!(hg.edge_count(0), 6);
        assert_eq!(hg.neighbors(0, 1), vec![0, 1, 2]);
        let (lonely, _) = build_graphs(&scene(&[(0., 0.)]), &cfg(10.0)).unwrap();
        assert_eq!(lonely.neighbors(0, 0), vec![0]);
    }

    #[test]
    fn relation_examples() {
        let f = relation_feature(&state(0., 0., 0., 0.), &state(3., 4., 0., 0.));
        assert_eq!(&f[..2], &[3.0, 4.0]);
        let f = relation_feature(&state(0., 0., FRAC_PI_2, 0.), &state(0., 5., 0., 0.));
        assert!((f[0] - 5.0).abs() < 1e-12 && f[1].abs() < 1e-12);
        assert!((f[4] + FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn relation_velocity_in_own_frame() {
        let f = relation_feature(&state(0., 0., FRAC_PI_2, 1.0), &state(0., 5., FRAC_PI_2, 3.0));
        assert!((f[2] - 2.0).abs() < 1e-12 && f[3].abs() < 1e-12);
    }
}
