use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW, Schedule};
use super::{ModelError, ToyModel};
use crate::augment::{apply_pipeline, argmax, AugmentConfig, BodyPartition, Sample};
use crate::tape::Tape;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Test hook: use this learning rate at every step instead of the schedule.
    pub fixed_lr: Option<f64>,
    /// Measure clean (unaugmented) training accuracy after every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            lr_start: 1e-7,
            lr_peak: 1e-3,
            warmup_epochs: 25,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            seed: 0,
            fixed_lr: None,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    /// The reduced recipe used on synthetic data: batch 32, 200 epochs,
    /// 10 warmup epochs.
    pub fn desk() -> Self {
        Self { epochs: 200, batch_size: 32, warmup_epochs: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if !(self.lr_start < self.lr_peak) {
            return err(format!("lr_start {} must be below lr_peak {}", self.lr_start, self.lr_peak));
        }
        if self.warmup_epochs >= self.epochs {
            return err(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// `(1 - eps)·y + eps/K`.
pub fn smooth_labels(y: &[f64], eps: f64) -> Vec<f64> {
    let k = y.len() as f64;
    y.iter().map(|p| (1.0 - eps) * p + eps / k).collect()
}

pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<EvalResult, ModelError> {
    let mut logits = Vec::with_capacity(samples.len());
    let mut correct = 0;
    for s in samples {
        let z = model.logits(&s.x)?;
        if argmax(&z) == s.class() {
            correct += 1;
        }
        logits.push(z);
    }
    Ok(EvalResult {
        accuracy: if samples.is_empty() { 0.0 } else { correct as f64 / samples.len() as f64 },
        labels: samples.iter().map(Sample::class).collect(),
        logits,
    })
}

fn diverged(epoch: usize, step: usize, detail: impl Into<String>) -> ModelError {
    ModelError::Divergence { epoch, step, detail: detail.into() }
}

/// One optimizer step on a batch. Returns the batch loss and learning rate.
fn train_step(
    model: &mut ToyModel,
    batch: &[Sample],
    opt: &mut AdamW,
    lr: f64,
    cfg: &TrainConfig,
    (epoch, step): (usize, usize),
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let vars = model.record(&mut tape);
    let mut outs = Vec::with_capacity(batch.len());
    let mut target = Vec::with_capacity(batch.len() * model.config().n_classes);
    for s in batch {
        let x = tape.constant(s.x.clone());
        outs.push(model.forward(&mut tape, &vars, x)?.logits);
        target.extend(smooth_labels(&s.y, cfg.label_smoothing));
    }
    let forward = (|| {
        let logits = tape.stack(&outs)?;
        let loss = tape.kl_loss(logits, &target)?;
        tape.backward(loss)?;
        tape.value(loss).item()
    })();
    let loss = match forward {
        Ok(l) if l.is_finite() => l,
        Ok(l) => return Err(diverged(epoch, step, format!("loss {l}"))),
        Err(e @ TensorError::NonFinite { .. }) => return Err(diverged(epoch, step, e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, (_, t))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    if let Err(ModelError::NonFiniteGrad(_)) = clip_global_norm(&mut grads, cfg.clip_norm) {
        let bad = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())).unwrap_or(0);
        return Err(diverged(epoch, step, format!("gradient of `{}` is not finite", model.params()[bad].0)));
    }
    opt.step(model.params_mut().iter_mut().map(|(_, t)| t), &grads, lr);
    Ok(loss)
}

/// Trains with shuffled minibatches, in-batch augmentation, smoothed KL loss,
/// global-norm clipping and AdamW on a warmup-cosine schedule. Fully
/// determined by the model, data and the two configs' seeds.
pub fn train(
    mut model: ToyModel,
    train_set: &[Sample],
    val_set: &[Sample],
    aug: &AugmentConfig,
    partition: Option<&BodyPartition>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    aug.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        lr_start: cfg.lr_start,
        lr_peak: cfg.lr_peak,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(&sizes, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(aug.rng_seed);
    aug_rng.set_stream(cfg.seed);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let batch = if aug.is_identity() { batch } else { apply_pipeline(&batch, aug, partition, &mut aug_rng)? };
            lr = cfg.fixed_lr.unwrap_or_else(|| schedule.lr_at(step));
            loss_sum += train_step(&mut model, &batch, &mut opt, lr, cfg, (epoch, step))? * batch.len() as f64;
            step += 1;
        }
        let train_acc = if cfg.eval_train { Some(evaluate(&model, train_set)?.accuracy) } else { None };
        let val_acc = if val_set.is_empty() { None } else { Some(evaluate(&model, val_set)?.accuracy) };
        log.push(EpochLog { epoch, lr, loss: loss_sum / train_set.len() as f64, train_acc, val_acc });
    }
    Ok(TrainOutcome { model, log })
}

/// `epoch,lr,loss,train_acc,val_acc`, empty cells for metrics not measured.
pub fn write_metrics_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,lr,loss,train_acc,val_acc\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.lr, e.loss, opt(e.train_acc), opt(e.val_acc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::model::ToyModelConfig;

    fn tiny() -> (ToyModel, Vec<Sample>) {
        let data = synth_dataset(&SynthConfig { n_per_class: 4, frames: 16, joints: 3, ..Default::default() }).unwrap();
        let model = ToyModel::new(ToyModelConfig { c_embed: 4, t_in: 16, joints: 3, ..Default::default() }).unwrap();
        (model, data)
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let (model, data) = tiny();
        let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, batch_size: 8, fixed_lr: Some(0.0), ..TrainConfig::desk() };
        let out = train(model.clone(), &data, &[], &AugmentConfig::default(), Some(&BodyPartition::singletons(3).unwrap()), &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn seeded_runs_match() {
        let (model, data) = tiny();
        let cfg = TrainConfig { epochs: 3, warmup_epochs: 1, batch_size: 8, ..TrainConfig::desk() };
        let p = BodyPartition::singletons(3).unwrap();
        let a = train(model.clone(), &data, &data[..4], &AugmentConfig::default(), Some(&p), &cfg).unwrap();
        let b = train(model, &data, &data[..4], &AugmentConfig::default(), Some(&p), &cfg).unwrap();
        assert_eq!(write_metrics_csv(&a.log), write_metrics_csv(&b.log));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn smoothing_keeps_simplex() {
        let y = smooth_labels(&[0.0, 1.0, 0.0, 0.0], 0.1);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((y[1] - 0.925).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { lr_start: 1e-2, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 200, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
