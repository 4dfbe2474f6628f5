//! Mini-batch training with early stopping, and displacement metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig, TrainConfig};
use crate::data::{ade_fde, best_of_k, Metrics};
use crate::error::{Error, Result};
use crate::generative::LossBreakdown;
use crate::geom::Point;
use crate::model::{prepare, Batch, LatentChoice, Model, PreparedScene};
use crate::pipeline::toy_window;
use crate::nn::{grad_check_with, optimizer_step, GradCheckOptions, GradCheckReport, ParamStore, Tape};
use crate::synth::{cam_baseline, cvm_baseline};

/// Windows per forward pass at evaluation time.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Batch means of the loss terms.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub val_ade: f64,
    pub val_fde: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_ade: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss.total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss.total)
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.recon += b.recon;
    acc.kl += b.kl;
    acc.mmd += b.mmd;
    acc.total += b.total;
}

/// One optimisation step; returns the loss terms and pre-clip gradient norm.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, f64)> {
    let mut tape = Tape::new();
    let (loss, breakdown) = model.loss(&mut tape, &model.store, batch, rng)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {:?}", breakdown)));
    }
    tape.backward(loss)?.accumulate_into(&tape, &mut model.store);
    let norm = model.store.clip_grad_norm(config.clip_norm);
    optimizer_step(&mut model.store, &config.optimizer)?;
    Ok((breakdown, norm))
}

/// Train on prepared windows with future graphs, selecting parameters by
/// validation ADE of the prior-mean prediction. `on_epoch` sees every
/// epoch's metrics as soon as they are known.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training needs non-empty train and validation splits, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    if let Some(s) = train_set.iter().find(|s| !s.has_future_graph()) {
        return Err(Error::InvalidArgument(format!("training window {} lacks future steps", s.scene_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        best_val_ade: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<ParamStore> = None;
    let mut since_best = 0;
    let bs = config.optimizer.batch_size;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut norm_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let scenes: Vec<&PreparedScene> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&scenes, &model.config)?;
            let (loss, norm) = train_step(model, &batch, config, &mut rng).map_err(|e| match e {
                Error::NonFinite(m) | Error::NonFiniteGradient(m) => {
                    Error::NonFinite(format!("epoch {epoch} batch {b}: {m}"))
                }
                other => other,
            })?;
            accumulate(&mut sum, &loss);
            norm_sum += norm;
            batches += 1;
        }
        let k = batches as f64;
        let loss = LossBreakdown {
            recon: sum.recon / k,
            kl: sum.kl / k,
            mmd: sum.mmd / k,
            total: sum.total / k,
        };
        let (val_ade, val_fde) = point_metrics(model, val_set)?;
        let improved = val_ade < report.best_val_ade;
        if improved {
            report.best_val_ade = val_ade;
            report.best_epoch = epoch;
            best = Some(model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        let m = EpochMetrics {
            epoch,
            loss,
            grad_norm: norm_sum / k,
            val_ade,
            val_fde,
            best: improved,
        };
        on_epoch(&m);
        report.epochs.push(m);
        if since_best >= config.patience && config.patience > 0 {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(b) = best {
        model.store.load_values_from(&b)?;
    }
    Ok(report)
}

/// Central-difference check of the full training loss on one batch. The
/// latent and prior draws are frozen by reseeding for every evaluation.
pub fn check_loss_gradients(model: &Model, batch: &Batch, seed: u64, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = model.store.clone();
    grad_check_with(
        |tape, s| Ok(model.loss(tape, s, batch, &mut ChaCha8Rng::seed_from_u64(seed))?.0),
        &mut store,
        options,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCheck {
    pub ablation: Ablation,
    pub seed: u64,
    /// Adam steps taken before the check.
    pub warmup_steps: usize,
    pub h: f64,
    /// Steps retried for entries that disagree at `h` by 1e-5 or more.
    pub fallback_h: Vec<f64>,
}

impl ToyCheck {
    pub fn new(ablation: Ablation, seed: u64) -> Self {
        Self {
            ablation,
            seed,
            warmup_steps: 60,
            h: 1e-5,
            fallback_h: vec![1e-6],
        }
    }

    /// Full-loss gradient check on a three-agent window with `t_h = 4` and
    /// `t_f = 5`, taken after a short stretch of training so that biases are
    /// off the LeakyReLU kinks and the loss is small enough for central
    /// differences to resolve small gradients.
    pub fn run(&self) -> Result<GradCheckReport> {
        let (sample, lib) = toy_window(4, 5, self.seed)?;
        let cfg = ModelConfig::toy(self.ablation);
        let mut model = Model::new(cfg.clone(), self.seed)?;
        let p = prepare(&sample, &cfg, Some(&lib), true)?;
        let batch = Batch::new(&[&p], &cfg)?;
        let mut tc = TrainConfig::default();
        tc.optimizer.learning_rate = 1e-2;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..self.warmup_steps {
            train_step(&mut model, &batch, &tc, &mut rng)?;
        }
        let options = GradCheckOptions {
            h: self.h,
            fallback_h: self.fallback_h.clone(),
            retry_above: 1e-5,
            ..Default::default()
        };
        check_loss_gradients(&model, &batch, self.seed, &options)
    }
}

/// Predictions for every window, `[window][t_f][agent]`.
pub fn predict_all(model: &Model, scenes: &[PreparedScene], mut latent: Option<&mut ChaCha8Rng>) -> Result<Vec<Vec<Vec<Point>>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let refs: Vec<&PreparedScene> = chunk.iter().collect();
        let choice = match latent.as_deref_mut() {
            Some(rng) => LatentChoice::Prior(rng),
            None => LatentChoice::Zero,
        };
        out.extend(model.predict(&refs, choice, model.config.t_f)?.into_iter().map(|p| p.positions));
    }
    Ok(out)
}

fn truth_of(scene: &PreparedScene) -> Result<&Vec<Vec<Point>>> {
    scene
        .future_world
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("window {} has no ground-truth future", scene.scene_id)))
}

/// Agent-weighted ADE / FDE of per-window predictions.
pub fn score(predictions: &[Vec<Vec<Point>>], scenes: &[PreparedScene]) -> Result<(f64, f64)> {
    let (mut ade, mut fde, mut n) = (0.0, 0.0, 0usize);
    for (p, s) in predictions.iter().zip(scenes) {
        let (a, f) = ade_fde(p, truth_of(s)?)?;
        let k = s.n_agents();
        ade += a * k as f64;
        fde += f * k as f64;
        n += k;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no agents to score".into()));
    }
    Ok((ade / n as f64, fde / n as f64))
}

/// ADE / FDE of the prior-mean (`z = 0`) prediction.
pub fn point_metrics(model: &Model, scenes: &[PreparedScene]) -> Result<(f64, f64)> {
    score(&predict_all(model, scenes, None)?, scenes)
}

/// Point metrics plus best-of-`k` metrics over prior samples drawn from `seed`.
pub fn evaluate(model: &Model, scenes: &[PreparedScene], k: usize, seed: u64) -> Result<Metrics> {
    let (ade, fde) = point_metrics(model, scenes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<Vec<Vec<Point>>>> = (0..k)
        .map(|_| predict_all(model, scenes, Some(&mut rng)))
        .collect::<Result<_>>()?;
    let (mut min_ade, mut min_fde, mut n) = (0.0, 0.0, 0usize);
    for (w, s) in scenes.iter().enumerate() {
        let sets: Vec<Vec<Vec<Point>>> = draws.iter().map(|d| d[w].clone()).collect();
        let (a, f) = if sets.is_empty() { (ade, fde) } else { best_of_k(&sets, truth_of(s)?)? };
        min_ade += a * s.n_agents() as f64;
        min_fde += f * s.n_agents() as f64;
        n += s.n_agents();
    }
    Ok(Metrics {
        ade,
        fde,
        min_ade: min_ade / n as f64,
        min_fde: min_fde / n as f64,
        horizon: model.config.t_f,
        n_samples: k,
    })
}

/// Constant-velocity (or constant-acceleration) extrapolation of every
/// window, `[window][t_f][agent]`.
pub fn baseline_all(scenes: &[PreparedScene], t_f: usize, accel: bool) -> Result<Vec<Vec<Vec<Point>>>> {
    scenes
        .iter()
        .map(|s| {
            let per_agent: Vec<Vec<Point>> = s
                .history
                .iter()
                .map(|h| if accel { cam_baseline(h, t_f) } else { cvm_baseline(h, t_f) })
                .collect::<Result<_>>()?;
            Ok((0..t_f).map(|k| per_agent.iter().map(|a| a[k]).collect()).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HorizonConfig;
    use crate::synth::{generate, Archetype, ScenarioSpec};

    fn setup(ablation: Ablation) -> (ModelConfig, Vec<PreparedScene>, Vec<PreparedScene>) {
        let cfg = ModelConfig {
            ablation,
            t_h: 4,
            t_f: 4,
            ..ModelConfig::compact()
        };
        let h = HorizonConfig { t_h: 4, t_f: 4, dt: 0.1 };
        let scene = generate(&ScenarioSpec::new(Archetype::Highway, 3, 30, 0.1, 0.0, 5)).unwrap();
        let samples = scene.samples(&h, 4).unwrap();
        let train: Vec<_> = samples[..3].iter().map(|s| prepare(s, &cfg, None, true).unwrap()).collect();
        let val: Vec<_> = samples[3..5].iter().map(|s| prepare(s, &cfg, None, false).unwrap()).collect();
        (cfg, train, val)
    }

    #[test]
    fn one_epoch_is_finite_and_deterministic() {
        let (cfg, train_set, val) = setup(Ablation::Tck);
        let tc = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = Model::new(cfg.clone(), 1).unwrap();
            let r = train(&mut m, &train_set, &val, &tc, |_| {}).unwrap();
            (m.store, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert!(ra.first_loss().unwrap() > 0.0 && ra.first_loss().unwrap().is_finite());
        for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn training_rejects_history_only_windows() {
        let (cfg, _, val) = setup(Ablation::T);
        let mut m = Model::new(cfg, 0).unwrap();
        assert!(train(&mut m, &val, &val, &TrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        for a in [Ablation::T, Ablation::Tck] {
            let r = ToyCheck::new(a, 1).run().unwrap();
            assert!(r.max_rel_error() < 1e-4, "{a}: {:?}", r.worst());
        }
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let (_, _, val) = setup(Ablation::T);
        let truth: Vec<_> = val.iter().map(|s| s.future_world.clone().unwrap()).collect();
        assert_eq!(score(&truth, &val).unwrap(), (0.0, 0.0));
        let cvm = baseline_all(&val, 4, false).unwrap();
        let (ade, _) = score(&cvm, &val).unwrap();
        // Highway lane traffic moves at constant velocity.
        assert!(ade < 0.5, "{ade}");
    }
}
