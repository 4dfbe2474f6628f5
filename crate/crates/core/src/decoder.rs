//! Per-type recurrent decoder. Vehicles emit saturated controls that drive
//! a differentiable bicycle rollout; other agents emit displacements.

use std::rc::Rc;

use rand::Rng;

use crate::data::AgentType;
use crate::error::{Error, Result};
use crate::kinematics::BicycleParams;
use crate::nn::{tape::softplus, Activation, Dense, GruCell, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DecoderDims {
    pub summary_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Vehicles use the control head and bicycle rollout.
    pub kinematic: bool,
    /// Meters per unit of GRU input.
    pub position_scale: f64,
    /// Initial control standard deviations `[m/s², rad/s]` of the variance head.
    pub control_std: [f64; 2],
}

#[derive(Clone, Debug)]
struct TypeDecoder {
    init: Dense,
    gru: GruCell,
    head: Dense,
    variance: Option<Dense>,
    kinematic: bool,
}

/// Decoder start for one agent, in its own frame: origin at the last
/// observed position, last observed heading along +x.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentStart {
    pub agent_type: AgentType,
    /// Observed positions, oldest first; the last entry is the origin.
    pub history: Vec<[f64; 2]>,
    pub speed: f64,
    pub slip: f64,
}

/// Control outputs of the kinematic vehicles of one decode.
#[derive(Clone, Debug)]
pub struct ControlTrace {
    /// Agent indices, in row order of the variables below.
    pub agents: Vec<usize>,
    /// Saturated mean controls per step, `[n_v, 2]` as `(a, β̇)`.
    pub mean: Vec<Var>,
    /// Control variances per step, `[n_v, 2]`.
    pub variance: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// `[n, 2·t_f]`, positions in each agent's frame, step-major per row.
    pub positions: Var,
    pub controls: Option<ControlTrace>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub dims: DecoderDims,
    pub bicycle: BicycleParams,
    per_type: Vec<TypeDecoder>,
}

/// State columns of a batch of bicycle rollouts.
struct Columns {
    x: Var,
    y: Var,
    psi: Var,
    v: Var,
    beta: Var,
}

fn bicycle_step(tape: &mut Tape, s: &Columns, a: Var, beta_dot: Var, p: &BicycleParams) -> Result<Columns> {
    let dt = p.dt;
    let course = tape.add(s.psi, s.beta)?;
    let (c, sn) = (tape.cos(course), tape.sin(course));
    let vc = tape.mul(s.v, c)?;
    let vs = tape.mul(s.v, sn)?;
    let dx = tape.scale(vc, dt);
    let dy = tape.scale(vs, dt);
    let sb = tape.sin(s.beta);
    let turn = tape.mul(s.v, sb)?;
    let dpsi = tape.scale(turn, dt / p.l_r);
    let dv = tape.scale(a, dt);
    let db = tape.scale(beta_dot, dt);
    Ok(Columns {
        x: tape.add(s.x, dx)?,
        y: tape.add(s.y, dy)?,
        psi: tape.add(s.psi, dpsi)?,
        v: tape.add(s.v, dv)?,
        beta: tape.add(s.beta, db)?,
    })
}

/// `bound·tanh(raw/bound)` per column of `raw [n, 2]`.
fn saturate(tape: &mut Tape, raw: Var, p: &BicycleParams) -> Result<Var> {
    let inv = tape.input(Tensor::matrix(2, 2, vec![1.0 / p.a_max, 0.0, 0.0, 1.0 / p.beta_dot_max])?);
    let bound = tape.input(Tensor::matrix(2, 2, vec![p.a_max, 0.0, 0.0, p.beta_dot_max])?);
    let x = tape.matmul(raw, inv)?;
    let x = tape.tanh(x);
    tape.matmul(x, bound)
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Decoder {
    pub fn new(store: &mut ParamStore, dims: DecoderDims, bicycle: BicycleParams, rng: &mut impl Rng) -> Result<Self> {
        bicycle.validate()?;
        if !(dims.position_scale > 0.0) || dims.control_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("decoder position scale and control std must be > 0".into()));
        }
        let mut per_type = Vec::with_capacity(AgentType::ALL.len());
        for t in AgentType::ALL {
            let name = format!("decoder.{t}");
            let kinematic = dims.kinematic && t == AgentType::Vehicle;
            let init = Dense::new(
                store,
                &format!("{name}.init"),
                dims.summary_dim + dims.latent_dim,
                dims.hidden,
                Activation::Tanh,
                rng,
            )?;
            let gru = GruCell::new(store, &format!("{name}.gru"), 2, dims.hidden, rng)?;
            let head = Dense::new(store, &format!("{name}.head"), dims.hidden, 2, Activation::None, rng)?;
            let variance = if kinematic {
                let v = Dense::new(store, &format!("{name}.variance"), dims.hidden, 2, Activation::None, rng)?;
                store.value_mut(v.weight).data_mut().fill(0.0);
                let bias = store.value_mut(v.bias).data_mut();
                for (b, s) in bias.iter_mut().zip(dims.control_std) {
                    *b = inverse_softplus(s * s);
                }
                Some(v)
            } else {
                None
            };
            per_type.push(TypeDecoder {
                init,
                gru,
                head,
                variance,
                kinematic,
            });
        }
        Ok(Self { dims, bicycle, per_type })
    }

    /// Roll out `t_f` steps for every agent. `summary` and `z` are `[n, ·]`
    /// with rows matching `starts`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        summary: Var,
        z: Var,
        starts: &[AgentStart],
        t_f: usize,
    ) -> Result<DecodeOutput> {
        let n = starts.len();
        if tape.value(summary).rows() != n || tape.value(z).rows() != n {
            return Err(Error::shape(
                "decode",
                format!(
                    "{} summaries and {} latents for {n} agents",
                    tape.value(summary).rows(),
                    tape.value(z).rows()
                ),
            ));
        }
        if t_f == 0 {
            return Err(Error::InvalidArgument("decode horizon must be >= 1 step".into()));
        }
        let t_h = starts.first().map_or(0, |s| s.history.len());
        if t_h == 0 || starts.iter().any(|s| s.history.len() != t_h) {
            return Err(Error::InvalidArgument("every agent needs the same non-empty history".into()));
        }
        let joint = tape.concat_cols(&[summary, z])?;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(n);
        let mut controls = None;
        for t in AgentType::ALL {
            let rows: Vec<usize> = (0..n).filter(|&i| starts[i].agent_type == t).collect();
            if rows.is_empty() {
                continue;
            }
            let dec = &self.per_type[t.index()];
            let x = tape.gather_rows(joint, rows.clone().into())?;
            let group: Vec<&AgentStart> = rows.iter().map(|&i| &starts[i]).collect();
            let (pos, trace) = self.decode_group(tape, store, dec, x, &group, t_f)?;
            if let Some((mean, variance)) = trace {
                controls = Some(ControlTrace {
                    agents: rows.clone(),
                    mean,
                    variance,
                });
            }
            parts.push(pos);
            order.extend(rows);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let positions = if order.iter().enumerate().all(|(i, &r)| i == r) {
            stacked
        } else {
            let mut inverse = vec![0; n];
            for (pos, &r) in order.iter().enumerate() {
                inverse[r] = pos;
            }
            tape.gather_rows(stacked, Rc::from(inverse))?
        };
        Ok(DecodeOutput { positions, controls })
    }

    #[allow(clippy::type_complexity)]
    fn decode_group(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        dec: &TypeDecoder,
        joint: Var,
        group: &[&AgentStart],
        t_f: usize,
    ) -> Result<(Var, Option<(Vec<Var>, Vec<Var>)>)> {
        let m = group.len();
        let t_h = group[0].history.len();
        let scale = 1.0 / self.dims.position_scale;
        let mut h = dec.init.forward(tape, store, joint)?;
        for k in 0..t_h {
            let data = group.iter().flat_map(|s| [s.history[k][0] * scale, s.history[k][1] * scale]).collect();
            let x = tape.input(Tensor::matrix(m, 2, data)?);
            h = dec.gru.step(tape, store, h, x)?;
        }
        let mut outputs = Vec::with_capacity(t_f);
        if dec.kinematic {
            let mut state = Columns {
                x: tape.constant(m, 1, 0.0),
                y: tape.constant(m, 1, 0.0),
                psi: tape.constant(m, 1, 0.0),
                v: tape.input(Tensor::column(group.iter().map(|s| s.speed).collect())),
                beta: tape.input(Tensor::column(group.iter().map(|s| s.slip).collect())),
            };
            let variance_head = dec.variance.as_ref().expect("kinematic decoder has a variance head");
            let (mut means, mut variances) = (Vec::with_capacity(t_f), Vec::with_capacity(t_f));
            for k in 0..t_f {
                let raw = dec.head.forward(tape, store, h)?;
                let u = saturate(tape, raw, &self.bicycle)?;
                let var = variance_head.forward(tape, store, h)?;
                variances.push(tape.softplus(var));
                let a = tape.slice_cols(u, 0, 1)?;
                let bd = tape.slice_cols(u, 1, 1)?;
                means.push(u);
                state = bicycle_step(tape, &state, a, bd, &self.bicycle)?;
                let p = tape.concat_cols(&[state.x, state.y])?;
                outputs.push(p);
                if k + 1 < t_f {
                    let x = tape.scale(p, scale);
                    h = dec.gru.step(tape, store, h, x)?;
                }
            }
            let pos = tape.concat_cols(&outputs)?;
            Ok((pos, Some((means, variances))))
        } else {
            let mut p = tape.constant(m, 2, 0.0);
            for k in 0..t_f {
                let d = dec.head.forward(tape, store, h)?;
                p = tape.add(p, d)?;
                outputs.push(p);
                if k + 1 < t_f {
                    let x = tape.scale(p, scale);
                    h = dec.gru.step(tape, store, h, x)?;
                }
            }
            let pos = tape.concat_cols(&outputs)?;
            Ok((pos, None))
        }
    }
}

/// Initial control variance implied by a variance-head bias, for tests and
/// reports.
pub fn head_variance(bias: f64) -> f64 {
    softplus(bias)
}
