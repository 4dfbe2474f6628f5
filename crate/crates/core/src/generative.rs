//! Latent encoder, reparameterized sampling and the reconstruction / KL /
//! MMD loss terms.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamStore, Tape, Tensor, Var};

/// Smallest RBF bandwidth used when all points coincide.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Reconstruction weight.
    pub gamma: f64,
    /// KL weight.
    pub alpha: f64,
    /// MMD weight.
    pub beta_w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha: 0.5,
            beta_w: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("loss weight gamma must be > 0, got {}", self.gamma)));
        }
        let slack = 1.0 - self.alpha;
        if !(0.0 < slack && slack < self.beta_w) || !self.beta_w.is_finite() {
            return Err(Error::Config(format!(
                "loss weights violate 0<1−α<β: alpha = {}, beta_w = {} give 1−α = {slack}",
                self.alpha, self.beta_w
            )));
        }
        Ok(())
    }
}

/// Maps `[ṽ^h ‖ ṽ^f]` to the posterior mean of the latent code.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub mlp: Mlp,
    pub latent_dim: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        node_dim: usize,
        hidden: usize,
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::new(
            store,
            "encoder",
            &[2 * node_dim, hidden, hidden, latent_dim],
            Activation::LeakyRelu,
            Activation::None,
            rng,
        )?;
        Ok(Self { mlp, latent_dim })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, history: Var, future: Var) -> Result<Var> {
        let x = tape.concat_cols(&[history, future])?;
        self.mlp.forward(tape, store, x)
    }
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sizes match")
}

/// `z = μ + ε` with `ε ~ N(0, I)`; gradients flow to `μ`.
pub fn sample_posterior(tape: &mut Tape, mean: Var, rng: &mut impl Rng) -> Result<Var> {
    let (r, c) = (tape.value(mean).rows(), tape.value(mean).cols());
    let eps = tape.input(standard_normal(rng, r, c));
    tape.add(mean, eps)
}

/// Mean over rows of `‖μ‖² / 2`, the KL divergence of `N(μ, I)` from `N(0, I)`.
pub fn kl_term(tape: &mut Tape, mean: Var) -> Var {
    let rows = tape.value(mean).rows().max(1);
    let sq = tape.square(mean);
    let s = tape.sum(sq);
    tape.scale(s, 0.5 / rows as f64)
}

/// Flat position and value of the median squared distance between distinct points.
fn median_position(sq: &Tensor) -> (usize, f64) {
    let m = sq.rows();
    let mut entries: Vec<(usize, f64)> = (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| i * m + j))
        .map(|flat| (flat, sq.data()[flat]))
        .collect();
    let mid = (entries.len() - 1) / 2;
    let (_, &mut (flat, v), _) = entries.select_nth_unstable_by(mid, |a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    (flat, v)
}

/// Biased MMD² between the rows of `z` and `prior` under a Gaussian RBF
/// kernel whose bandwidth is the median pairwise distance over both sets.
pub fn mmd_term(tape: &mut Tape, z: Var, prior: Var) -> Result<Var> {
    let (n, m) = (tape.value(z).rows(), tape.value(prior).rows());
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!("MMD needs at least two samples per set, got {n} and {m}")));
    }
    let all = tape.concat_rows(&[z, prior])?;
    let sq = tape.pairwise_sq_dist(all, all)?;
    let (flat, median_sq) = median_position(tape.value(sq));
    // sigma² = max(median distance, floor)²; below the floor the bandwidth is constant.
    let sigma_sq = if median_sq.sqrt() > BANDWIDTH_FLOOR {
        tape.gather_elems(sq, Rc::from([flat]))?
    } else {
        tape.constant(1, 1, BANDWIDTH_FLOOR * BANDWIDTH_FLOOR)
    };
    let inv = tape.recip(sigma_sq);
    let inv = tape.scale(inv, -0.5);
    let k = tape.mul_scalar(sq, inv)?;
    let k = tape.exp(k);
    let total = n + m;
    let mut weights = vec![0.0; total * total];
    for i in 0..total {
        for j in 0..total {
            weights[i * total + j] = match (i < n, j < n) {
                (true, true) => 1.0 / (n * n) as f64,
                (false, false) => 1.0 / (m * m) as f64,
                _ => -1.0 / (n * m) as f64,
            };
        }
    }
    let w = tape.input(Tensor::matrix(total, total, weights)?);
    let weighted = tape.mul(k, w)?;
    Ok(tape.sum(weighted))
}

/// Mean squared error over all entries.
pub fn mse(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let d = tape.sub(pred, truth)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Weighted terms of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub mmd: f64,
    pub total: f64,
}

/// `γ·recon + α·kl + β_w·mmd`.
pub fn total_loss(
    tape: &mut Tape,
    recon: Var,
    kl: Var,
    mmd: Var,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let a = tape.scale(recon, config.gamma);
    let b = tape.scale(kl, config.alpha);
    let c = tape.scale(mmd, config.beta_w);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let breakdown = LossBreakdown {
        recon: tape.scalar_value(recon),
        kl: tape.scalar_value(kl),
        mmd: tape.scalar_value(mmd),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}
