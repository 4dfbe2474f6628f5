//! Full network: feature embeddings, graph dual attention, latent encoder
//! and per-type decoder, plus the numeric preparation of scene windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::context::{extract_local, ContextLibrary, ContextMap};
use crate::data::{AgentType, SceneSample};
use crate::decoder::{AgentStart, DecodeOutput, Decoder, DecoderDims};
use crate::error::{Error, Result};
use crate::features::{relation_input, state_input, FeatureDims, FeatureExtractor, FeatureScales, CONTEXT_CHANNELS, STATE_DIM};
use crate::gdat::{Gdat, GdatDims, GdatOutput, GraphIndex, Phase};
use crate::generative::{kl_term, mmd_term, sample_posterior, standard_normal, total_loss, Encoder, LossBreakdown};
use crate::geom::{to_local, to_world, wrap_angle, Point};
use crate::graph::{build_graphs, build_history_graph, SceneGraph, RELATION_DIM};
use crate::nn::{Checkpoint, ParamStore, Tape, Tensor, Var};

/// Speed below which the initial slip angle is taken as zero, m/s.
const SLIP_MIN_SPEED: f64 = 1.0;

/// Parameter-independent inputs of one window.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: String,
    pub location: String,
    pub start_step: i64,
    pub agent_ids: Vec<i64>,
    pub types: Vec<AgentType>,
    /// Node rows `k·n + a` over the graph steps, `[rows, STATE_DIM]`.
    states: Vec<f64>,
    crops: Option<Vec<f64>>,
    nodes: Vec<(usize, Phase, usize)>,
    edges: Vec<(usize, usize)>,
    relations: Vec<f64>,
    pub starts: Vec<AgentStart>,
    /// Agent frames: last observed position and heading.
    pub frames: Vec<(Point, f64)>,
    /// Observed positions per agent, oldest first.
    pub history: Vec<Vec<Point>>,
    /// Future positions in each agent frame, `[n, 2·t_f]`, when known.
    pub future_local: Option<Vec<f64>>,
    /// Future world positions `[t_f][n]`, when known.
    pub future_world: Option<Vec<Vec<Point>>>,
}

impl PreparedScene {
    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn has_future_graph(&self) -> bool {
        self.nodes.iter().any(|n| n.1 == Phase::Future)
    }

    pub fn to_world(&self, agent: usize, local: Point) -> Point {
        let (origin, heading) = self.frames[agent];
        let w = to_world(local, heading);
        [origin[0] + w[0], origin[1] + w[1]]
    }
}

/// Initial slip angle consistent with the observed yaw rate:
/// `ψ̇ = (v/l_r)·sin β`.
pub fn initial_slip(psi_prev: f64, psi_last: f64, speed: f64, config: &ModelConfig) -> f64 {
    if speed < SLIP_MIN_SPEED {
        return 0.0;
    }
    let yaw_rate = wrap_angle(psi_last - psi_prev) / config.dt;
    let bound = config.max_slip.sin();
    (config.bicycle.l_r * yaw_rate / speed).clamp(-bound, bound).asin()
}

fn crop_for(map: Option<&ContextMap>, pos: Point, heading: f64, config: &ModelConfig, out: &mut Vec<f64>) -> Result<()> {
    let cells = config.crop * config.crop;
    match map {
        Some(m) if m.has_observations => {
            let local = extract_local(m, pos, heading, config.crop, config.crop)?;
            let max = m.max_density();
            let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
            let stacked = local.stacked(scale);
            out.extend(stacked.chunks(CONTEXT_CHANNELS).flat_map(|c| {
                [c[0], c[1] / config.speed_scale, c[2] / config.speed_scale]
            }));
        }
        _ => out.extend(std::iter::repeat_n(0.0, cells * CONTEXT_CHANNELS)),
    }
    Ok(())
}

/// Precompute everything the network needs from a window. With
/// `future_graph` the future steps become graph nodes (training); otherwise
/// only the history is encoded and any future samples serve as ground truth.
pub fn prepare(
    sample: &SceneSample,
    config: &ModelConfig,
    maps: Option<&ContextLibrary>,
    future_graph: bool,
) -> Result<PreparedScene> {
    let (t_h, t_f) = (config.t_h, config.t_f);
    if sample.t_h != t_h {
        return Err(Error::InvalidArgument(format!(
            "window has {} history steps, model expects {t_h}",
            sample.t_h
        )));
    }
    if (sample.dt - config.dt).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("window dt {} s, model expects {} s", sample.dt, config.dt)));
    }
    let n = sample.n_agents();
    if n == 0 {
        return Err(Error::Data(format!("window of scene {} has no agents", sample.scene.scene_id)));
    }
    let min_len = sample.trajectories.iter().map(|a| a.samples.len()).min().unwrap_or(0);
    let truth_available = sample.t_f == t_f && min_len >= t_h + t_f;
    if future_graph && !truth_available {
        return Err(Error::InvalidArgument(format!(
            "training window of scene {} needs {} steps with t_f = {t_f}",
            sample.scene.scene_id,
            t_h + t_f
        )));
    }
    if min_len < t_h {
        return Err(Error::Data(format!("window of scene {} is shorter than t_h", sample.scene.scene_id)));
    }
    let steps = if future_graph { t_h + t_f } else { t_h };
    let scales = FeatureScales {
        position: config.position_scale,
        speed: config.speed_scale,
    };
    let last = t_h - 1;
    let reference = {
        let (sx, sy) = sample
            .trajectories
            .iter()
            .fold((0.0, 0.0), |acc, a| (acc.0 + a.samples[last].x, acc.1 + a.samples[last].y));
        [sx / n as f64, sy / n as f64]
    };
    let map = if config.ablation.uses_context() {
        maps.and_then(|m| m.get(&sample.scene.location))
    } else {
        None
    };
    let mut states = Vec::with_capacity(steps * n * STATE_DIM);
    let mut crops = config.ablation.uses_context().then(Vec::new);
    let mut nodes = Vec::with_capacity(steps * n);
    for k in 0..steps {
        let phase = if k < t_h { (Phase::History, k) } else { (Phase::Future, k - t_h) };
        for (a, traj) in sample.trajectories.iter().enumerate() {
            let s = &traj.samples[k];
            states.extend_from_slice(&state_input(s, reference, &scales));
            if let Some(c) = crops.as_mut() {
                crop_for(map, s.pos(), s.psi, config, c)?;
            }
            nodes.push((a, phase.0, phase.1));
        }
    }
    let graphs: Vec<SceneGraph> = if future_graph {
        let (hg, fg) = build_graphs(sample, &config.graph)?;
        vec![hg, fg]
    } else {
        vec![build_history_graph(sample, &config.graph)?]
    };
    let mut edges = Vec::new();
    let mut relations = Vec::new();
    for g in &graphs {
        for (k, step) in g.steps.iter().enumerate() {
            let base = (g.first_step + k) * n;
            for e in &step.edges {
                edges.push((base + e.dst, base + e.src));
                relations.extend_from_slice(&relation_input(&e.feature, &scales));
            }
        }
    }
    let mut starts = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    let mut history = Vec::with_capacity(n);
    for traj in &sample.trajectories {
        let cur = &traj.samples[last];
        let origin = cur.pos();
        let hist: Vec<Point> = traj.samples[..t_h].iter().map(|s| s.pos()).collect();
        let local_hist = hist
            .iter()
            .map(|p| to_local([p[0] - origin[0], p[1] - origin[1]], cur.psi))
            .collect();
        let slip = if traj.agent_type == AgentType::Vehicle {
            initial_slip(traj.samples[last - 1].psi, cur.psi, cur.v, config)
        } else {
            0.0
        };
        starts.push(AgentStart {
            agent_type: traj.agent_type,
            history: local_hist,
            speed: cur.v,
            slip,
        });
        frames.push((origin, cur.psi));
        history.push(hist);
    }
    let (future_local, future_world) = if truth_available {
        let mut local = Vec::with_capacity(n * 2 * t_f);
        for (a, traj) in sample.trajectories.iter().enumerate() {
            let (origin, heading) = frames[a];
            for s in &traj.samples[t_h..t_h + t_f] {
                local.extend_from_slice(&to_local([s.x - origin[0], s.y - origin[1]], heading));
            }
        }
        let world = (0..t_f)
            .map(|k| sample.trajectories.iter().map(|a| a.samples[t_h + k].pos()).collect())
            .collect();
        (Some(local), Some(world))
    } else {
        (None, None)
    };
    Ok(PreparedScene {
        scene_id: sample.scene.scene_id.clone(),
        location: sample.scene.location.clone(),
        start_step: sample.start_step,
        agent_ids: sample.trajectories.iter().map(|a| a.agent_id).collect(),
        types: sample.trajectories.iter().map(|a| a.agent_type).collect(),
        states,
        crops,
        nodes,
        edges,
        relations,
        starts,
        frames,
        history,
        future_local,
        future_world,
    })
}

/// Disjoint union of prepared windows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n_agents: usize,
    pub states: Tensor,
    pub row_types: Vec<AgentType>,
    pub crops: Option<Tensor>,
    pub relations: Tensor,
    pub index: GraphIndex,
    pub starts: Vec<AgentStart>,
    pub truth: Option<Tensor>,
    /// First agent of each window.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn new(scenes: &[&PreparedScene], config: &ModelConfig) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let future = scenes[0].has_future_graph();
        if scenes.iter().any(|s| s.has_future_graph() != future) {
            return Err(Error::InvalidArgument("batch mixes training and inference windows".into()));
        }
        let mut states = Vec::new();
        let mut row_types = Vec::new();
        let mut crops: Option<Vec<f64>> = config.ablation.uses_context().then(Vec::new);
        let mut relations = Vec::new();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut starts = Vec::new();
        let mut truth = Vec::new();
        let mut has_truth = true;
        let mut offsets = Vec::with_capacity(scenes.len());
        let (mut agent_base, mut node_base) = (0, 0);
        for s in scenes {
            offsets.push(agent_base);
            states.extend_from_slice(&s.states);
            row_types.extend(s.nodes.iter().map(|n| s.types[n.0]));
            match (crops.as_mut(), &s.crops) {
                (Some(c), Some(sc)) => c.extend_from_slice(sc),
                (Some(_), None) => {
                    return Err(Error::InvalidArgument(format!(
                        "window {} was prepared without context crops",
                        s.scene_id
                    )))
                }
                _ => {}
            }
            relations.extend_from_slice(&s.relations);
            nodes.extend(s.nodes.iter().map(|&(a, p, k)| (a + agent_base, p, k)));
            edges.extend(s.edges.iter().map(|&(d, r)| (d + node_base, r + node_base)));
            starts.extend(s.starts.iter().cloned());
            match &s.future_local {
                Some(f) => truth.extend_from_slice(f),
                None => has_truth = false,
            }
            agent_base += s.n_agents();
            node_base += s.nodes.len();
        }
        let rows = nodes.len();
        let index = GraphIndex::new(agent_base, &nodes, &edges, config.graph.include_self)?;
        let crop_rows = rows * config.crop * config.crop;
        Ok(Self {
            n_agents: agent_base,
            states: Tensor::matrix(rows, STATE_DIM, states)?,
            row_types,
            crops: crops.map(|c| Tensor::matrix(crop_rows, CONTEXT_CHANNELS, c)).transpose()?,
            relations: Tensor::matrix(edges.len(), RELATION_DIM, relations)?,
            index,
            starts,
            truth: if has_truth {
                Some(Tensor::matrix(agent_base, 2 * config.t_f, truth)?)
            } else {
                None
            },
            offsets,
        })
    }
}

/// How the latent code is chosen at prediction time.
pub enum LatentChoice<'a> {
    /// Prior mean.
    Zero,
    /// Draw from the prior.
    Prior(&'a mut ChaCha8Rng),
}

/// Numeric decoder outputs for one window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene_id: String,
    pub agent_ids: Vec<i64>,
    pub types: Vec<AgentType>,
    /// World positions `[t_f][n]`.
    pub positions: Vec<Vec<Point>>,
    /// Mean controls `(a, β̇)` of kinematic vehicles, `[agent][t_f]`.
    pub controls: Vec<Option<Vec<[f64; 2]>>>,
    /// Control variances of kinematic vehicles, `[agent][t_f]`.
    pub control_variance: Vec<Option<Vec<[f64; 2]>>>,
}

pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub features: FeatureExtractor,
    pub gdat: Gdat,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Build and initialise every sub-network from `seed`. Only the
    /// parameters the ablation uses are created.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let features = FeatureExtractor::new(
            &mut store,
            &FeatureDims {
                state_hidden: config.state_hidden,
                state_layers: config.state_layers,
                relation_hidden: config.relation_hidden,
                se_dim: config.state_dim,
                ce_dim: config.context_dim,
                edge_dim: config.edge_dim,
                crop: config.crop,
                cnn_channels: config.cnn_channels.clone(),
                use_context: config.ablation.uses_context(),
            },
            &mut rng,
        )?;
        let d = config.node_dim();
        let gdat = Gdat::new(
            &mut store,
            "gdat",
            GdatDims {
                node_dim: d,
                edge_dim: config.edge_dim,
                heads: config.heads,
                rounds: config.rounds,
                edge_hidden: config.edge_hidden,
                uniform_attention: config.ablation.uniform_attention(),
            },
            &mut rng,
        )?;
        let encoder = Encoder::new(&mut store, d, config.encoder_hidden, config.latent_dim, &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            DecoderDims {
                summary_dim: d,
                latent_dim: config.latent_dim,
                hidden: config.decoder_hidden,
                kinematic: config.ablation.kinematic(),
                position_scale: config.position_scale,
                control_std: config.control_std,
            },
            config.bicycle,
            &mut rng,
        )?;
        Ok(Self {
            config,
            seed,
            store,
            features,
            gdat,
            encoder,
            decoder,
        })
    }

    /// Node attributes, relation embeddings and the attention stack.
    pub fn encode_graph(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<GdatOutput> {
        let states = tape.input(batch.states.clone());
        let crops = batch.crops.as_ref().map(|c| tape.input(c.clone()));
        let nodes = self.features.node_attributes(tape, store, states, &batch.row_types, crops)?;
        let rel = tape.input(batch.relations.clone());
        let edges = self.features.embed_relation(tape, store, rel)?;
        self.gdat.forward(tape, store, nodes, edges, &batch.index)
    }

    /// Training objective on a batch with future graphs; `rng` draws the
    /// posterior noise and the prior samples of the MMD term.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, rng: &mut impl Rng) -> Result<(Var, LossBreakdown)> {
        let truth = batch
            .truth
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("training batch has no future ground truth".into()))?;
        let out = self.encode_graph(tape, store, batch)?;
        let future = out
            .future
            .ok_or_else(|| Error::InvalidArgument("training batch has no future graph".into()))?;
        let mean = self.encoder.encode(tape, store, out.history, future)?;
        let z = sample_posterior(tape, mean, rng)?;
        let decoded = self.decoder.decode(tape, store, out.history, z, &batch.starts, self.config.t_f)?;
        let target = tape.input(truth.clone());
        let diff = tape.sub(decoded.positions, target)?;
        let sq = tape.square(diff);
        // Mean over agent-steps of the squared displacement error.
        let recon = tape.mean(sq);
        let recon = tape.scale(recon, 2.0);
        let kl = kl_term(tape, mean);
        let mmd = if batch.n_agents >= 2 {
            let p = tape.input(standard_normal(rng, batch.n_agents, self.config.latent_dim));
            mmd_term(tape, z, p)?
        } else {
            tape.constant(1, 1, 0.0)
        };
        total_loss(tape, recon, kl, mmd, &self.config.loss)
    }

    /// Decode from history-only graphs. Errors if the batch carries future
    /// nodes, so prediction can never read the future.
    pub fn decode(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        latent: LatentChoice<'_>,
        t_f: usize,
    ) -> Result<(GdatOutput, DecodeOutput)> {
        if batch.index.phase.contains(&Phase::Future) {
            return Err(Error::InvalidArgument("prediction batch must not contain future steps".into()));
        }
        let out = self.encode_graph(tape, &self.store, batch)?;
        let z = match latent {
            LatentChoice::Zero => tape.constant(batch.n_agents, self.config.latent_dim, 0.0),
            LatentChoice::Prior(rng) => tape.input(standard_normal(rng, batch.n_agents, self.config.latent_dim)),
        };
        let decoded = self.decoder.decode(tape, &self.store, out.history, z, &batch.starts, t_f)?;
        Ok((out, decoded))
    }

    /// Predict every window of an inference batch.
    pub fn predict(
        &self,
        scenes: &[&PreparedScene],
        latent: LatentChoice<'_>,
        t_f: usize,
    ) -> Result<Vec<ScenePrediction>> {
        let batch = Batch::new(scenes, &self.config)?;
        let mut tape = Tape::new();
        let (_, decoded) = self.decode(&mut tape, &batch, latent, t_f)?;
        let pos = tape.value(decoded.positions);
        if !pos.is_finite() {
            return Err(Error::NonFinite("predicted positions".into()));
        }
        let mut controls = vec![None; batch.n_agents];
        let mut variance = vec![None; batch.n_agents];
        if let Some(trace) = &decoded.controls {
            for (row, &agent) in trace.agents.iter().enumerate() {
                let pick = |vars: &[Var]| -> Vec<[f64; 2]> {
                    vars.iter()
                        .map(|&v| {
                            let t = tape.value(v);
                            [t.get(row, 0), t.get(row, 1)]
                        })
                        .collect()
                };
                controls[agent] = Some(pick(&trace.mean));
                variance[agent] = Some(pick(&trace.variance));
            }
        }
        Ok(scenes
            .iter()
            .zip(&batch.offsets)
            .map(|(s, &off)| {
                let n = s.n_agents();
                let positions = (0..t_f)
                    .map(|k| {
                        (0..n)
                            .map(|a| s.to_world(a, [pos.get(off + a, 2 * k), pos.get(off + a, 2 * k + 1)]))
                            .collect()
                    })
                    .collect();
                ScenePrediction {
                    scene_id: s.scene_id.clone(),
                    agent_ids: s.agent_ids.clone(),
                    types: s.types.clone(),
                    positions,
                    controls: controls[off..off + n].to_vec(),
                    control_variance: variance[off..off + n].to_vec(),
                }
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(&self.store, self.seed, serde_json::to_value(&self.config)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint config: {e}")))?;
        let mut model = Self::new(config, ckpt.metadata.seed)?;
        ckpt.apply_to(&mut model.store)?;
        Ok(model)
    }
}
