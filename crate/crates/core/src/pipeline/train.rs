use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{infer, loss_and_grad, ModelConfig, ModelParams, PipelineConfig, SceneCache};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::geom::Scene;
use crate::supervision::GroundTruth;

/// RMSProp without momentum. The running second moment starts at zero, which
/// makes the first few steps larger than `lr` and acts as a short warm kick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Cosine-anneal the step size to zero over the run.
    pub cosine: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-3,
            decay: 0.99,
            eps: 1e-8,
            clip_norm: Some(10.0),
            cosine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    /// Return the parameters with the best validation AP50 instead of the last.
    pub keep_best: bool,
    /// Stop after the epoch during which this many seconds have elapsed.
    pub time_limit_secs: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            eval_every: 5,
            keep_best: true,
            time_limit_secs: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub inst: f64,
    pub semantic: f64,
    pub point_box: f64,
    pub val_ap: Option<f64>,
    pub val_ap50: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_val_ap50: Option<f64>,
}

/// Mean mask AP and AP50 of `params` on `scenes`.
pub fn validate(params: &ModelParams, scenes: &[Scene], config: &PipelineConfig) -> Result<(f64, f64)> {
    let preds = scenes
        .par_iter()
        .map(|s| infer(s, params, config))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<GroundTruth> = scenes.iter().map(GroundTruth::from_scene).collect();
    let report = evaluate(&preds, &gts)?;
    Ok((report.ap, report.ap50))
}

/// Trains a freshly initialized model; initialization uses `train.seed`.
pub fn train(
    model: ModelConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    pipeline: &PipelineConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    let params = ModelParams::init(model, config.seed)?;
    train_from(params, train_set, val_set, pipeline, config)
}

/// Continues training from `params`. Scene order is shuffled per epoch from
/// the seed; per-scene gradients are summed in batch order, so results do
/// not depend on the thread count.
pub fn train_from(
    mut params: ModelParams,
    train_set: &[Scene],
    val_set: &[Scene],
    pipeline: &PipelineConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    pipeline.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let opt = &config.optimizer;
    if !(opt.lr >= 0.0 && opt.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {}", opt.lr)));
    }
    if !(0.0..1.0).contains(&opt.decay) || !(opt.eps > 0.0) {
        return Err(Error::invalid("decay must lie in [0, 1) and eps must be positive"));
    }
    let caches = train_set
        .par_iter()
        .map(|s| SceneCache::new(s, pipeline))
        .collect::<Result<Vec<_>>>()?;
    let mut flat = params.flatten();
    let mut second_moment = vec![0.0; flat.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1);
    let mut step = 0usize;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = EpochLog {
            epoch,
            ..EpochLog::default()
        };
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| loss_and_grad(&params, &train_set[i], &caches[i], pipeline))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; flat.len()];
            for (report, _) in &results {
                if !report.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("non-finite loss {}", report.total),
                    });
                }
                sums.loss += report.total;
                sums.inst += report.inst;
                sums.semantic += report.semantic;
                sums.point_box += report.point_box;
                for (g, v) in grad.iter_mut().zip(&report.gradient) {
                    *g += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            if let Some(max) = opt.clip_norm {
                if norm > max {
                    grad.iter_mut().for_each(|g| *g *= max / norm);
                }
            }
            let lr = if opt.cosine {
                0.5 * opt.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                opt.lr
            };
            for ((p, v), g) in flat.iter_mut().zip(second_moment.iter_mut()).zip(&grad) {
                *v = opt.decay * *v + (1.0 - opt.decay) * g * g;
                *p -= lr * g / (v.sqrt() + opt.eps);
            }
            params.set_flat(&flat)?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite parameters after update".into(),
                });
            }
            step += 1;
        }
        let n = train_set.len() as f64;
        sums.loss /= n;
        sums.inst /= n;
        sums.semantic /= n;
        sums.point_box /= n;

        let out_of_time = config.time_limit_secs.is_some_and(|t| start.elapsed().as_secs_f64() >= t);
        let last = epoch + 1 == config.epochs || out_of_time;
        if config.eval_every > 0 && !val_set.is_empty() && ((epoch + 1) % config.eval_every == 0 || last) {
            let (ap, ap50) = validate(&params, val_set, pipeline)?;
            sums.val_ap = Some(ap);
            sums.val_ap50 = Some(ap50);
            if config.keep_best && best.as_ref().is_none_or(|(b, _)| ap50 > *b) {
                best = Some((ap50, params.clone()));
            }
            log.best_val_ap50 = Some(log.best_val_ap50.map_or(ap50, |b: f64| b.max(ap50)));
        }
        sums.seconds = epoch_start.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {:.4} inst {:.4} sem {:.4} box {:.4} val_ap50 {:?}",
            sums.loss,
            sums.inst,
            sums.semantic,
            sums.point_box,
            sums.val_ap50
        );
        log.epochs.push(sums);
        if out_of_time {
            break;
        }
    }
    let params = match best {
        Some((_, p)) if config.keep_best => p,
        _ => params,
    };
    Ok((params, log))
}
