//! The supervised training loop: batched tape forward/backward, AdamW with
//! a one-cycle schedule, per-epoch validation, and divergence handling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::geometry::{rotation_angle_error, translation_angle_error};
use crate::keypoints::PairSample;
use crate::metrics::median;
use crate::model::{forward_on_tape, lease_params, predict_pose, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::{GradientTape, Tensor};

use super::loss::{loss_total_on_tape, LossWeights};
use super::optimizer::{AdamW, AdamWConfig, OneCycle};
use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_lr: f64,
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad_norm: f64,
    /// Ramp the translation direction terms (normalized and angular) from 0
    /// to their configured weights over this fraction of total steps. The
    /// unit-vector losses have a 1/|t| gradient amplification that makes the
    /// zero-initialized head a singular starting point; letting the absolute
    /// term establish a nonzero norm first avoids the collapse.
    pub direction_warmup_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            max_lr: 3e-4,
            adamw: AdamWConfig::default(),
            clip_grad_norm: 10.0,
            direction_warmup_frac: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(TrainError::Config("max_lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_rot_med_deg: f64,
    pub val_trans_med: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,mean_loss,val_rot_med_deg,val_trans_med,lr")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{},{},{},{},{}",
                e.epoch, e.mean_loss, e.val_rot_med_deg, e.val_trans_med, e.lr
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<TrainingLog, TrainError> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut out = TrainingLog::default();
        for (idx, line) in f.lines().enumerate() {
            let line = line?;
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(TrainError::Config(format!(
                    "bad training log line {}",
                    idx + 1
                )));
            }
            out.epochs.push(EpochLog {
                epoch: fields[0].parse().map_err(|_| {
                    TrainError::Config(format!("bad epoch at line {}", idx + 1))
                })?,
                mean_loss: fields[1].parse().unwrap_or(f64::NAN),
                val_rot_med_deg: fields[2].parse().unwrap_or(f64::NAN),
                val_trans_med: fields[3].parse().unwrap_or(f64::NAN),
                lr: fields[4].parse().unwrap_or(f64::NAN),
            });
        }
        Ok(out)
    }
}

/// State carried across a checkpoint/resume boundary.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer_state: BTreeMap<String, Tensor>,
    pub step: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainingLog,
    pub step: u64,
    pub optimizer_state: BTreeMap<String, Tensor>,
    /// Set when training aborted on a non-finite loss; `params` then holds
    /// the last good epoch snapshot.
    pub diverged_at: Option<(usize, u64)>,
}

/// Median validation rotation error (degrees) and translation angular error
/// (degrees; samples with degenerate ground-truth translation skipped).
pub fn validate_medians(
    samples: &[PairSample],
    params: &ModelParams,
    config: &ModelConfig,
) -> (f64, f64) {
    let mut rot = Vec::with_capacity(samples.len());
    let mut trans = Vec::new();
    for s in samples {
        match predict_pose(s, params, config) {
            Ok(pred) => {
                rot.push(rotation_angle_error(&pred.r, &s.gt.r));
                if let Ok(a) = translation_angle_error(&pred.t, &s.gt.t) {
                    trans.push(a);
                }
            }
            Err(_) => rot.push(180.0),
        }
    }
    (
        median(&mut rot).unwrap_or(f64::NAN),
        median(&mut trans).unwrap_or(f64::NAN),
    )
}

/// Train from scratch or resume. The one-cycle schedule always spans the
/// full configured run, so a resumed job continues the schedule at the
/// saved step.
pub fn train(
    train_samples: &[PairSample],
    val_samples: &[PairSample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    weights: &LossWeights,
    resume: Option<TrainState>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    weights.validate()?;
    model_config.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }

    let n = train_samples.len();
    let steps_per_epoch = n.div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let schedule = OneCycle::new(config.max_lr, total_steps);

    let (mut params, mut opt, mut step) = match resume {
        Some(state) => {
            let mut opt = AdamW::new(config.adamw);
            opt.restore_named(&state.optimizer_state, state.step);
            (state.params, opt, state.step)
        }
        None => (
            ModelParams::init(model_config, config.seed)?,
            AdamW::new(config.adamw),
            0,
        ),
    };

    let start_epoch = (step / steps_per_epoch) as usize;
    let mut log = TrainingLog::default();
    let mut last_good = params.clone();
    let mut last_lr = schedule.lr_at(step);

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = Rng::fork(config.seed ^ 0x5eed_5eed, epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let lr = schedule.lr_at(step);
            last_lr = lr;
            let ramp = if config.direction_warmup_frac > 0.0 {
                let horizon = (total_steps as f64 * config.direction_warmup_frac).max(1.0);
                (step as f64 / horizon).min(1.0)
            } else {
                1.0
            };
            let eff_weights = LossWeights {
                lambda_tn: weights.lambda_tn * ramp,
                lambda_ta: weights.lambda_ta * ramp,
                ..*weights
            };
            let tape = GradientTape::new();
            let pv = lease_params(&tape, &params);
            let mut batch_loss = None;
            for &idx in batch {
                let s = &train_samples[idx];
                let (r6, t, _) = forward_on_tape(&tape, s, &pv, model_config)?;
                let sample_loss = loss_total_on_tape(&tape, r6, t, &s.gt, &eff_weights)?;
                batch_loss = Some(match batch_loss {
                    None => sample_loss,
                    Some(acc) => sample_loss.add(acc)?,
                });
            }
            let loss = batch_loss
                .expect("chunks are never empty")
                .scale(1.0 / batch.len() as f64);
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Ok(TrainOutcome {
                    params: last_good,
                    log,
                    step,
                    optimizer_state: opt.to_named(),
                    diverged_at: Some((epoch, step)),
                });
            }
            loss_sum += loss_val * batch.len() as f64;
            loss_count += batch.len();

            let grads = tape.backward(loss)?;
            let mut named: BTreeMap<String, Tensor> = pv
                .named()
                .into_iter()
                .map(|(name, var)| (name, grads.get_or_zeros(*var)))
                .collect();
            if config.clip_grad_norm > 0.0 {
                let total: f64 = named
                    .values()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if total > config.clip_grad_norm {
                    let s = config.clip_grad_norm / total;
                    for g in named.values_mut() {
                        for v in g.data_mut() {
                            *v *= s;
                        }
                    }
                }
            }
            opt.step(&mut params, &named, lr);
            step += 1;
        }

        let (val_rot, val_trans) = if val_samples.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            validate_medians(val_samples, &params, model_config)
        };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / loss_count as f64,
            val_rot_med_deg: val_rot,
            val_trans_med: val_trans,
            lr: last_lr,
        });
        if params.all_finite() {
            last_good = params.clone();
        }
    }

    Ok(TrainOutcome {
        params,
        log,
        step,
        optimizer_state: opt.to_named(),
        diverged_at: None,
    })
}
