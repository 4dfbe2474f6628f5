//! Multi-sample forecasts with Gaussian or particle uncertainty for
//! kinematic vehicles.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Rotation2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AgentTrajectory, AgentType};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::kinematics::{
    particle_moments, propagate_gaussian, propagate_monte_carlo, rollout, ControlInput, GaussianBelief, Mat5,
    VehicleState,
};
use crate::model::{LatentChoice, Model, PreparedScene, ScenePrediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Gaussian,
    Mc,
}

impl fmt::Display for PredictMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictMode::Gaussian => "gaussian",
            PredictMode::Mc => "mc",
        })
    }
}

impl FromStr for PredictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(PredictMode::Gaussian),
            "mc" => Ok(PredictMode::Mc),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}` (expected gaussian or mc)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub mode: PredictMode,
    /// Trajectory sets drawn from the prior.
    pub k: usize,
    /// Particles per vehicle and draw in `mc` mode.
    pub particles: usize,
    pub seed: u64,
    /// Use the prior mean instead of prior draws (requires `k = 1`).
    pub zero_latent: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            mode: PredictMode::Gaussian,
            k: 20,
            particles: 100,
            seed: 0,
            zero_latent: false,
        }
    }
}

/// Per-step position uncertainty of one agent in one draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepUncertainty {
    pub mean: Point,
    /// World-frame 2×2 position covariance, row-major.
    pub cov: [[f64; 2]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDraw {
    /// Decoded mean positions, `[t_f]`.
    pub positions: Vec<Point>,
    /// Present for kinematic vehicles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<Vec<StepUncertainty>>,
    /// Particle trajectories `[particle][t_f]` in `mc` mode.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub particles: Vec<Vec<Point>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentForecast {
    pub agent_id: i64,
    pub agent_type: AgentType,
    pub mode: PredictMode,
    /// One entry per trajectory set.
    pub draws: Vec<AgentDraw>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneForecast {
    pub scene_id: String,
    /// Grid index of the first predicted step.
    pub first_step: i64,
    /// Seconds per step.
    pub dt: f64,
    pub agents: Vec<AgentForecast>,
}

impl SceneForecast {
    /// Mean positions of draw `d`, `[t_f][agent]`.
    pub fn draw_positions(&self, d: usize) -> Vec<Vec<Point>> {
        let t_f = self.agents.first().map_or(0, |a| a.draws[d].positions.len());
        (0..t_f).map(|k| self.agents.iter().map(|a| a.draws[d].positions[k]).collect()).collect()
    }
}

/// Stream-separated seed for an independent sub-computation.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Initial agent-frame state of a decoded vehicle.
pub fn start_state(scene: &PreparedScene, agent: usize) -> VehicleState {
    let s = &scene.starts[agent];
    VehicleState::new(0.0, 0.0, 0.0, s.speed, s.slip)
}

/// Agent-frame states after each decoded control, for feasibility audits.
pub fn vehicle_states(scene: &PreparedScene, pred: &ScenePrediction, agent: usize, model: &Model) -> Option<Vec<VehicleState>> {
    let controls = pred.controls[agent].as_ref()?;
    let u: Vec<ControlInput> = controls.iter().map(|c| ControlInput::new(c[0], c[1])).collect();
    let s0 = start_state(scene, agent);
    let mut states = vec![s0];
    states.extend(rollout(&s0, &u, &model.config.bicycle).ok()?);
    Some(states)
}

fn world_cov(cov: &Mat5, heading: f64) -> [[f64; 2]; 2] {
    let r = Rotation2::new(heading).into_inner();
    let p = Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]);
    let w = r * p * r.transpose();
    [[w[(0, 0)], w[(0, 1)]], [w[(1, 0)], w[(1, 1)]]]
}

fn gaussian_track(scene: &PreparedScene, agent: usize, controls: &[[f64; 2]], variance: &[[f64; 2]], model: &Model) -> Result<Vec<StepUncertainty>> {
    let mut belief = GaussianBelief::point(&start_state(scene, agent));
    let heading = scene.frames[agent].1;
    controls
        .iter()
        .zip(variance)
        .map(|(u, var)| {
            let sigma = Matrix2::new(var[0], 0.0, 0.0, var[1]);
            belief = propagate_gaussian(&belief, &ControlInput::new(u[0], u[1]), &sigma, &model.config.bicycle)?;
            Ok(StepUncertainty {
                mean: scene.to_world(agent, [belief.mean[0], belief.mean[1]]),
                cov: world_cov(&belief.cov, heading),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn particle_track(
    scene: &PreparedScene,
    agent: usize,
    controls: &[[f64; 2]],
    variance: &[[f64; 2]],
    model: &Model,
    count: usize,
    seed: u64,
) -> Result<(Vec<StepUncertainty>, Vec<Vec<Point>>)> {
    let mut particles = vec![start_state(scene, agent); count.max(1)];
    let heading = scene.frames[agent].1;
    let mut summary = Vec::with_capacity(controls.len());
    let mut paths = vec![Vec::with_capacity(controls.len()); particles.len()];
    for (k, (u, var)) in controls.iter().zip(variance).enumerate() {
        let sigma = Matrix2::new(var[0], 0.0, 0.0, var[1]);
        particles = propagate_monte_carlo(
            &particles,
            &ControlInput::new(u[0], u[1]),
            &sigma,
            derive_seed(seed, &[k as u64]),
            &model.config.bicycle,
        )?;
        let (mean, cov) = particle_moments(&particles);
        summary.push(StepUncertainty {
            mean: scene.to_world(agent, [mean[0], mean[1]]),
            cov: world_cov(&cov, heading),
        });
        for (path, p) in paths.iter_mut().zip(&particles) {
            path.push(scene.to_world(agent, [p.x, p.y]));
        }
    }
    Ok((summary, paths))
}

/// `options.k` trajectory sets per window, each decoded from its own prior
/// draw, with uncertainty for kinematic vehicles.
pub fn forecast(model: &Model, scenes: &[PreparedScene], options: &PredictOptions) -> Result<Vec<SceneForecast>> {
    if options.k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if options.zero_latent && options.k != 1 {
        return Err(Error::InvalidArgument("a zero latent gives a single trajectory set; use k = 1".into()));
    }
    if options.mode == PredictMode::Mc && options.particles == 0 {
        return Err(Error::InvalidArgument("mc mode needs >= 1 particle".into()));
    }
    let refs: Vec<&PreparedScene> = scenes.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let draws: Vec<Vec<ScenePrediction>> = (0..options.k)
        .map(|_| {
            let choice = if options.zero_latent { LatentChoice::Zero } else { LatentChoice::Prior(&mut rng) };
            model.predict(&refs, choice, model.config.t_f)
        })
        .collect::<Result<_>>()?;
    scenes
        .iter()
        .enumerate()
        .map(|(w, scene)| {
            let agents = (0..scene.n_agents())
                .map(|a| {
                    let draws = draws
                        .iter()
                        .enumerate()
                        .map(|(d, preds)| {
                            let p = &preds[w];
                            let positions: Vec<Point> = p.positions.iter().map(|step| step[a]).collect();
                            let (uncertainty, particles) = match (&p.controls[a], &p.control_variance[a]) {
                                (Some(u), Some(var)) => match options.mode {
                                    PredictMode::Gaussian => (Some(gaussian_track(scene, a, u, var, model)?), Vec::new()),
                                    PredictMode::Mc => {
                                        let seed = derive_seed(options.seed, &[w as u64, a as u64, d as u64]);
                                        let (s, paths) = particle_track(scene, a, u, var, model, options.particles, seed)?;
                                        (Some(s), paths)
                                    }
                                },
                                _ => (None, Vec::new()),
                            };
                            Ok(AgentDraw {
                                positions,
                                uncertainty,
                                particles,
                            })
                        })
                        .collect::<Result<_>>()?;
                    Ok(AgentForecast {
                        agent_id: scene.agent_ids[a],
                        agent_type: scene.types[a],
                        mode: options.mode,
                        draws,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(SceneForecast {
                scene_id: scene.scene_id.clone(),
                first_step: scene.start_step + model.config.t_h as i64,
                dt: model.config.dt,
                agents,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastScore {
    /// ADE / FDE of the first draw.
    pub ade: f64,
    pub fde: f64,
    /// Best-of-K over all draws.
    pub min_ade: f64,
    pub min_fde: f64,
    /// Scored agent forecasts.
    pub agents: usize,
}

/// Score forecasts against recorded trajectories matched by agent id and
/// time. Forecast steps without a truth sample within half a step are an
/// error.
pub fn score_forecasts(forecasts: &[SceneForecast], truth: &[AgentTrajectory]) -> Result<ForecastScore> {
    let by_id: std::collections::HashMap<i64, &AgentTrajectory> = truth.iter().map(|a| (a.agent_id, a)).collect();
    let mut score = ForecastScore::default();
    for f in forecasts {
        for a in &f.agents {
            let traj = by_id
                .get(&a.agent_id)
                .ok_or_else(|| Error::Data(format!("agent {} of {} missing from truth", a.agent_id, f.scene_id)))?;
            let at = |k: usize| -> Result<Point> {
                let t = (f.first_step + k as i64) as f64 * f.dt;
                let i = traj.samples.partition_point(|s| s.t < t - 0.5 * f.dt);
                traj.samples
                    .get(i)
                    .filter(|s| (s.t - t).abs() <= 0.5 * f.dt)
                    .map(|s| s.pos())
                    .ok_or_else(|| Error::Data(format!("no truth for agent {} at t = {t:.3} s", a.agent_id)))
            };
            let mut per_draw = Vec::with_capacity(a.draws.len());
            for d in &a.draws {
                let n = d.positions.len();
                if n == 0 {
                    return Err(Error::Data(format!("empty forecast for agent {}", a.agent_id)));
                }
                let mut errs = Vec::with_capacity(n);
                for (k, p) in d.positions.iter().enumerate() {
                    let q = at(k)?;
                    errs.push((p[0] - q[0]).hypot(p[1] - q[1]));
                }
                per_draw.push((errs.iter().sum::<f64>() / n as f64, errs[n - 1]));
            }
            let Some(&(ade, fde)) = per_draw.first() else {
                return Err(Error::Data(format!("no draws for agent {}", a.agent_id)));
            };
            let best = per_draw.iter().copied().min_by(|x, y| x.0.total_cmp(&y.0)).unwrap_or((ade, fde));
            score.ade += ade;
            score.fde += fde;
            score.min_ade += best.0;
            score.min_fde += best.1;
            score.agents += 1;
        }
    }
    if score.agents == 0 {
        return Err(Error::Data("no forecasts to score".into()));
    }
    let n = score.agents as f64;
    score.ade /= n;
    score.fde /= n;
    score.min_ade /= n;
    score.min_fde /= n;
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, ModelConfig};
    use crate::data::HorizonConfig;
    use crate::model::prepare;
    use crate::synth::{generate, Archetype, ScenarioSpec};

    fn setup() -> (Model, Vec<PreparedScene>) {
        let cfg = ModelConfig {
            ablation: Ablation::Tck,
            t_h: 4,
            t_f: 5,
            ..ModelConfig::compact()
        };
        let scene = generate(&ScenarioSpec::new(Archetype::Roundabout, 3, 30, 0.1, 0.0, 2)).unwrap();
        let h = HorizonConfig { t_h: 4, t_f: 5, dt: 0.1 };
        let prepared = scene.samples(&h, 9).unwrap().iter().map(|s| prepare(s, &cfg, None, false).unwrap()).collect();
        (Model::new(cfg, 1).unwrap(), prepared)
    }

    #[test]
    fn shapes_and_determinism() {
        let (model, scenes) = setup();
        let opts = PredictOptions { k: 3, seed: 7, ..Default::default() };
        let a = forecast(&model, &scenes, &opts).unwrap();
        let b = forecast(&model, &scenes, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].agents[0].draws.len(), 3);
        assert_eq!(a[0].draw_positions(2).len(), 5);
        let u = a[0].agents[0].draws[0].uncertainty.as_ref().unwrap();
        // The Gaussian mean follows the decoded mean controls exactly.
        for (s, p) in u.iter().zip(&a[0].agents[0].draws[0].positions) {
            assert!((s.mean[0] - p[0]).abs() < 1e-9 && (s.mean[1] - p[1]).abs() < 1e-9);
        }
        assert!(u.windows(2).all(|w| w[1].cov[0][0] + w[1].cov[1][1] >= w[0].cov[0][0] + w[0].cov[1][1] - 1e-15));
    }

    #[test]
    fn particle_mode_counts_and_zero_latent() {
        let (model, scenes) = setup();
        let opts = PredictOptions {
            mode: PredictMode::Mc,
            k: 1,
            particles: 25,
            zero_latent: true,
            ..Default::default()
        };
        let f = forecast(&model, &scenes[..1], &opts).unwrap();
        let d = &f[0].agents[1].draws[0];
        assert_eq!(d.particles.len(), 25);
        assert_eq!(d.particles[0].len(), 5);
        assert!(forecast(&model, &scenes, &PredictOptions { k: 2, zero_latent: true, ..Default::default() }).is_err());
    }

    #[test]
    fn forecasts_score_against_their_own_positions() {
        use crate::data::TrajectorySample;
        let (model, scenes) = setup();
        let f = forecast(&model, &scenes[..1], &PredictOptions { k: 2, ..Default::default() }).unwrap();
        let truth: Vec<AgentTrajectory> = f[0]
            .agents
            .iter()
            .map(|a| AgentTrajectory {
                agent_id: a.agent_id,
                agent_type: a.agent_type,
                samples: a.draws[0]
                    .positions
                    .iter()
                    .enumerate()
                    .map(|(k, p)| TrajectorySample {
                        t: (f[0].first_step + k as i64) as f64 * f[0].dt,
                        x: p[0],
                        y: p[1],
                        v: 0.0,
                        psi: 0.0,
                    })
                    .collect(),
            })
            .collect();
        let s = score_forecasts(&f, &truth).unwrap();
        assert_eq!((s.ade, s.fde, s.min_ade, s.min_fde), (0.0, 0.0, 0.0, 0.0));
        assert!(score_forecasts(&f, &truth[1..]).is_err());
    }
}
