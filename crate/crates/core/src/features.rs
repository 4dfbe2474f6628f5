//! State, relation and context embeddings that make up node and edge
//! attributes.

use std::rc::Rc;

use rand::Rng;

use crate::data::{AgentType, TrajectorySample};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::graph::RELATION_DIM;
use crate::nn::{Activation, Conv2d, Dense, Mlp, ParamStore, Tape, Var};

/// Width of the raw per-step state input.
pub const STATE_DIM: usize = 5;
/// Channels of a context crop: density, local vx, local vy.
pub const CONTEXT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureScales {
    /// Meters per unit of network input.
    pub position: f64,
    /// m/s per unit of network input.
    pub speed: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            position: 10.0,
            speed: 10.0,
        }
    }
}

/// `[(x−cx)/s_p, (y−cy)/s_p, v/s_v, cos ψ, sin ψ]` relative to the scene
/// reference point `c`.
pub fn state_input(s: &TrajectorySample, reference: Point, scales: &FeatureScales) -> [f64; STATE_DIM] {
    [
        (s.x - reference[0]) / scales.position,
        (s.y - reference[1]) / scales.position,
        s.v / scales.speed,
        s.psi.cos(),
        s.psi.sin(),
    ]
}

/// Relation feature rescaled for the relation network.
pub fn relation_input(f: &[f64; RELATION_DIM], scales: &FeatureScales) -> [f64; RELATION_DIM] {
    [
        f[0] / scales.position,
        f[1] / scales.position,
        f[2] / scales.speed,
        f[3] / scales.speed,
        f[4],
    ]
}

#[derive(Clone, Debug)]
pub struct ContextCnn {
    pub convs: Vec<Conv2d>,
    pub dense: Dense,
    pub crop: usize,
}

impl ContextCnn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        crop: usize,
        channels: &[usize],
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut c_in = CONTEXT_CHANNELS;
        let mut side = crop;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, c, 3, 2, 1, Activation::LeakyRelu, rng)?);
            side = (side + 2 - 3) / 2 + 1;
            c_in = c;
        }
        let dense = Dense::new(store, &format!("{name}.dense"), side * side * c_in, out_dim, Activation::LeakyRelu, rng)?;
        Ok(Self { convs, dense, crop })
    }

    /// `crops` holds `[n·crop·crop, 3]` NHWC rows; returns `[n, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, crops: Var, n: usize) -> Result<Var> {
        let expected = n * self.crop * self.crop;
        let (rows, cols) = (tape.value(crops).rows(), tape.value(crops).cols());
        if rows != expected || cols != CONTEXT_CHANNELS {
            return Err(Error::shape(
                "embed_context",
                format!(
                    "crops [{rows}x{cols}], expected [{expected}x{CONTEXT_CHANNELS}] for {n} crops of {}x{}",
                    self.crop, self.crop
                ),
            ));
        }
        let (mut x, mut h, mut w) = (crops, self.crop, self.crop);
        for conv in &self.convs {
            (x, h, w) = conv.forward(tape, store, x, n, h, w)?;
        }
        let c = tape.value(x).cols();
        let flat = tape.reshape(x, n, h * w * c)?;
        self.dense.forward(tape, store, flat)
    }
}

/// Per-type state networks, the shared relation network and the optional
/// context network.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    /// Indexed by [`AgentType::index`].
    pub state: Vec<Mlp>,
    pub relation: Mlp,
    pub context: Option<ContextCnn>,
    pub se_dim: usize,
    pub ce_dim: usize,
}

#[derive(Clone, Debug)]
pub struct FeatureDims {
    pub state_hidden: usize,
    pub state_layers: usize,
    pub relation_hidden: usize,
    pub se_dim: usize,
    pub ce_dim: usize,
    pub edge_dim: usize,
    pub crop: usize,
    pub cnn_channels: Vec<usize>,
    pub use_context: bool,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, dims: &FeatureDims, rng: &mut impl Rng) -> Result<Self> {
        let mut state_dims = vec![STATE_DIM];
        state_dims.extend(std::iter::repeat_n(dims.state_hidden, dims.state_layers));
        state_dims.push(dims.se_dim);
        let state = AgentType::ALL
            .iter()
            .map(|t| Mlp::new(store, &format!("state.{t}"), &state_dims, Activation::LeakyRelu, Activation::LeakyRelu, rng))
            .collect::<Result<_>>()?;
        let relation = Mlp::new(
            store,
            "relation",
            &[RELATION_DIM, dims.relation_hidden, dims.relation_hidden, dims.edge_dim],
            Activation::LeakyRelu,
            Activation::LeakyRelu,
            rng,
        )?;
        let context = if dims.use_context {
            Some(ContextCnn::new(store, "context", dims.crop, &dims.cnn_channels, dims.ce_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            state,
            relation,
            context,
            se_dim: dims.se_dim,
            ce_dim: dims.ce_dim,
        })
    }

    /// Rows of `input` (`[rows, STATE_DIM]`) go through the network of their
    /// agent type; output keeps the row order.
    pub fn embed_state(&self, tape: &mut Tape, store: &ParamStore, input: Var, types: &[AgentType]) -> Result<Var> {
        let rows = tape.value(input).rows();
        if types.len() != rows {
            return Err(Error::shape("embed_state", format!("{} types for {rows} rows", types.len())));
        }
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(rows);
        for t in AgentType::ALL {
            let idx: Vec<usize> = (0..rows).filter(|&r| types[r] == t).collect();
            if idx.is_empty() {
                continue;
            }
            order.extend_from_slice(&idx);
            let x = tape.gather_rows(input, idx.into())?;
            parts.push(self.state[t.index()].forward(tape, store, x)?);
        }
        if parts.len() == 1 && order.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok(parts[0]);
        }
        let stacked = tape.concat_rows(&parts)?;
        let mut inverse = vec![0; rows];
        for (pos, &r) in order.iter().enumerate() {
            inverse[r] = pos;
        }
        tape.gather_rows(stacked, Rc::from(inverse))
    }

    pub fn embed_relation(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        self.relation.forward(tape, store, features)
    }

    /// `[n, ce_dim]` context embeddings; zeros when the network is disabled.
    pub fn embed_context(&self, tape: &mut Tape, store: &ParamStore, crops: Option<Var>, n: usize) -> Result<Var> {
        match (&self.context, crops) {
            (Some(cnn), Some(c)) => cnn.forward(tape, store, c, n),
            (Some(_), None) => Err(Error::InvalidArgument("context network enabled but no crops supplied".into())),
            (None, _) => Ok(tape.constant(n, self.ce_dim, 0.0)),
        }
    }

    /// Node attributes `[SE ‖ CE]`.
    pub fn node_attributes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: Var,
        types: &[AgentType],
        crops: Option<Var>,
    ) -> Result<Var> {
        let n = tape.value(states).rows();
        let se = self.embed_state(tape, store, states, types)?;
        let ce = self.embed_context(tape, store, crops, n)?;
        tape.concat_cols(&[se, ce])
    }
}
