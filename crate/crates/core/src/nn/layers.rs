use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Im2ColSpec, Tape, Var};
use crate::error::{Error, Result};

/// Negative-side slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    #[default]
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine map `x W + b` followed by `activation`.
pub fn dense_forward(
    tape: &mut Tape,
    input: Var,
    weights: Var,
    bias: Var,
    activation: Activation,
) -> Result<Var> {
    let (n_in, n_w) = (tape.value(input).cols(), tape.value(weights).rows());
    if n_in != n_w {
        return Err(Error::shape(
            "dense",
            format!(
                "input has {n_in} features but weights expect {n_w} (weights {:?})",
                tape.value(weights).shape()
            ),
        ));
    }
    let y = tape.matmul(input, weights)?;
    let y = tape.add_row(y, bias)?;
    Ok(activation.apply(tape, y))
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_weight(format!("{name}.weight"), in_dim, out_dim, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), 1, out_dim)?,
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        dense_forward(tape, x, w, b, self.activation)
    }
}

/// Stack of dense layers; `dims` lists every width including input and output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp `{name}` needs at least input and output widths"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                Dense::new(store, &format!("{name}.l{i}"), w[0], w[1], act, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, store, x)?;
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// n  = tanh(x W_n + (r ⊙ h) U_n + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    /// `[input, 3*hidden]`, gate order z, r, n.
    pub w_input: ParamId,
    /// `[hidden, 2*hidden]`, gate order z, r.
    pub w_hidden_zr: ParamId,
    pub w_hidden_n: ParamId,
    /// `[1, 3*hidden]`.
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_input: store.add_weight(format!("{name}.w_input"), input_dim, 3 * hidden_dim, rng)?,
            w_hidden_zr: store.add_weight(
                format!("{name}.w_hidden_zr"),
                hidden_dim,
                2 * hidden_dim,
                rng,
            )?,
            w_hidden_n: store.add_weight(format!("{name}.w_hidden_n"), hidden_dim, hidden_dim, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), 1, 3 * hidden_dim)?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, input: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        let (hr, hc) = (tape.value(hidden).rows(), tape.value(hidden).cols());
        let (xr, xc) = (tape.value(input).rows(), tape.value(input).cols());
        if hc != hd || xc != self.input_dim || hr != xr {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "hidden [{hr}x{hc}], input [{xr}x{xc}]; cell expects hidden {hd}, input {}",
                    self.input_dim
                ),
            ));
        }
        let wi = tape.param(store, self.w_input);
        let wzr = tape.param(store, self.w_hidden_zr);
        let wn = tape.param(store, self.w_hidden_n);
        let b = tape.param(store, self.bias);

        let xw = tape.matmul(input, wi)?;
        let xw = tape.add_row(xw, b)?;
        let hzr = tape.matmul(hidden, wzr)?;
        let x_zr = tape.slice_cols(xw, 0, 2 * hd)?;
        let pre_zr = tape.add(x_zr, hzr)?;
        let zr = tape.sigmoid(pre_zr);
        let z = tape.slice_cols(zr, 0, hd)?;
        let r = tape.slice_cols(zr, hd, hd)?;
        let rh = tape.mul(r, hidden)?;
        let rhu = tape.matmul(rh, wn)?;
        let x_n = tape.slice_cols(xw, 2 * hd, hd)?;
        let pre_n = tape.add(x_n, rhu)?;
        let n = tape.tanh(pre_n);
        // h' = n + z ⊙ (h - n)
        let diff = tape.sub(hidden, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// 2-D cross-correlation over NHWC maps stored as `[batch*h*w, channels]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[k*k*in_channels, out_channels]`.
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

#[allow(clippy::too_many_arguments)]
impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = kernel_size * kernel_size * in_channels;
        Ok(Self {
            kernel: store.add_weight(format!("{name}.kernel"), fan_in, out_channels, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), 1, out_channels)?,
            kernel_size,
            stride,
            padding,
            in_channels,
            out_channels,
            activation,
        })
    }

    /// Returns the output map and its spatial size.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<(Var, usize, usize)> {
        let spec = Im2ColSpec {
            batch,
            height,
            width,
            channels: self.in_channels,
            kernel: self.kernel_size,
            stride: self.stride,
            padding: self.padding,
        };
        let cols = tape.im2col(input, spec)?;
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = dense_forward(tape, cols, k, b, self.activation)?;
        Ok((y, spec.out_height(), spec.out_width()))
    }
}
