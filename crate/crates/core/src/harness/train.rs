//! Training loop: per-step batches, augmentation, deep-supervised loss and
//! AdamW updates. Every random draw comes from a stream keyed by the run
//! seed and the step or epoch, so a run resumed from a checkpoint replays
//! exactly what an uninterrupted run would have done.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{augment, AugmentConfig, Dataset, Sample};
use super::eval::{evaluate_split, predict_all, Predictor};
use super::optim::{clip_global_norm, multistep_lr, AdamW, AdamWConfig};
use crate::coco::write_json;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{downsample_mask, total_loss, LossReport, LossWeights, MaskLossResolution};
use crate::params::{ParamStore, Session};
use crate::pipeline::{upsample_mask_logits, LayerPrediction, Model};
use crate::tensor::Tensor;
use crate::types::Mask;

/// Stride of the mask logits relative to the input.
pub const MASK_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Cpu,
    Gpu,
}

/// Optimization schedule and training-time behaviour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    #[serde(default)]
    pub mask_loss: MaskLossResolution,
    /// Write a checkpoint every this many steps; `0` writes only the final one.
    pub checkpoint_every: usize,
    /// Evaluate on the training split every this many steps; `0` disables.
    pub eval_every: usize,
    /// Dataset split used for training.
    pub split: String,
    pub device: Device,
}

impl TrainConfig {
    /// Full-size schedule: batch 8, lr 1e-4, 500 epochs, /10 at 300 and 400.
    pub fn paper() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            initial_lr: 1e-4,
            lr_milestones: vec![300, 400],
            lr_decay: 0.1,
            max_steps: None,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            mask_loss: MaskLossResolution::default(),
            checkpoint_every: 0,
            eval_every: 0,
            split: "train".into(),
            device: Device::Cpu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("initial_lr", "must be positive"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "lr_milestones",
                "must be strictly increasing",
            ));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::config(
                "lr_milestones",
                "every milestone must be below `epochs`",
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1]"));
        }
        if self.device == Device::Gpu {
            return Err(Error::config(
                "device",
                "gpu is not supported by this build; use cpu",
            ));
        }
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, num_samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(num_samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Independent random stream for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) ^ index);
    rng
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;

/// Sample indices of optimizer step `step` (0-based).
pub fn batch_indices(seed: u64, step: usize, num_samples: usize, batch_size: usize) -> Vec<usize> {
    let spe = num_samples.div_ceil(batch_size).max(1);
    let (epoch, pos) = (step / spe, step % spe);
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut stream_rng(seed, SHUFFLE, epoch as u64));
    order
        .into_iter()
        .skip(pos * batch_size)
        .take(batch_size)
        .collect()
}

/// Ground-truth masks as flattened `[1, P]` rows at the loss resolution.
pub fn mask_targets(masks: &[Mask], resolution: MaskLossResolution) -> Vec<Tensor> {
    masks
        .iter()
        .map(|m| {
            let t = match resolution {
                MaskLossResolution::Logits => downsample_mask(m, MASK_STRIDE),
                MaskLossResolution::Input => m.to_tensor(),
            };
            let n = t.numel();
            t.reshape(&[1, n])
        })
        .collect()
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
}

/// Model, parameters and optimizer state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Self {
        let store = model.init_params();
        let optimizer = AdamW::new(config.optimizer);
        Self {
            model,
            store,
            optimizer,
            config,
            seed,
        }
    }

    /// Number of optimizer steps already applied.
    pub fn step(&self) -> usize {
        self.optimizer.step as usize
    }

    /// Loss and parameter gradients averaged over a batch of already
    /// augmented images.
    pub fn batch_gradients(
        &self,
        batch: &[(Tensor, Vec<Mask>)],
    ) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut report = LossReport::default();
        let inv = 1.0 / batch.len() as f64;
        for (image, masks) in batch {
            let g = Graph::new();
            let s = Session::new(&g, &self.store);
            let out = self.model.forward(&s, g.constant(image.clone()))?;
            let res = self.config.mask_loss;
            let predictions = match res {
                MaskLossResolution::Logits => out.predictions,
                MaskLossResolution::Input => {
                    let size = (image.dim(1), image.dim(2));
                    out.predictions
                        .iter()
                        .map(|p| LayerPrediction {
                            class_logits: p.class_logits,
                            mask_logits: upsample_mask_logits(
                                p.mask_logits,
                                (out.mask_height, out.mask_width),
                                size,
                            ),
                        })
                        .collect()
                }
            };
            let finite = predictions
                .iter()
                .all(|p| p.class_logits.value().all_finite() && p.mask_logits.value().all_finite());
            if !finite {
                // matching needs finite costs; let the caller report the batch
                report.total = f64::NAN;
                return Ok((report, grads));
            }
            let (loss, r) = total_loss(&predictions, &mask_targets(masks, res), &self.config.loss);
            report.total += r.total * inv;
            report.cls += r.cls * inv;
            report.bce += r.bce * inv;
            report.dice += r.dice * inv;
            if !r.total.is_finite() {
                // gradients are meaningless; let the caller report the batch
                return Ok((report, grads));
            }
            let tape = g.backward(loss);
            for (name, grad) in s.gradients(&tape) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.axpy(inv, &grad),
                    None => {
                        grads.insert(name, grad.scale(inv));
                    }
                }
            }
        }
        Ok((report, grads))
    }

    /// Runs the next optimizer step on `samples` (the training split).
    pub fn train_step(&mut self, samples: &[&Sample]) -> Result<StepRecord> {
        let step = self.step();
        let spe = self.config.steps_per_epoch(samples.len());
        let epoch = step / spe;
        let lr = multistep_lr(
            self.config.initial_lr,
            &self.config.lr_milestones,
            self.config.lr_decay,
            epoch,
        );
        let idx = batch_indices(self.seed, step, samples.len(), self.config.batch_size);
        let mut rng = stream_rng(self.seed, AUGMENT, step as u64);
        let batch: Vec<(Tensor, Vec<Mask>)> = idx
            .iter()
            .map(|&i| {
                augment(
                    &samples[i].image,
                    &samples[i].masks,
                    &self.config.augment,
                    &mut rng,
                )
            })
            .collect();
        let (loss, mut grads) = self.batch_gradients(&batch)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                images: idx.iter().map(|&i| samples[i].id).collect(),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.optimizer.grad_clip);
        self.optimizer.update(&mut self.store, &grads, lr);
        Ok(StepRecord {
            step: step + 1,
            epoch,
            lr,
            loss,
            grad_norm,
        })
    }
}

impl Trainer {
    /// Restores a run from `ckpt`. The checkpoint's architecture and
    /// parameter shapes must match `model`.
    pub fn from_checkpoint(model: Model, config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_compatible(&model.config, &model.init_params())?;
        let mut optimizer = ckpt.optimizer;
        optimizer.config = config.optimizer;
        Ok(Self {
            model,
            store: ckpt.params,
            optimizer,
            config,
            seed: ckpt.seed,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            seed: self.seed,
            params: self.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

pub const LOSS_CSV: &str = "loss.csv";
pub const EVAL_CSV: &str = "train_eval.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const NAN_DUMP: &str = "nonfinite_batch.json";

const LOSS_HEADER: &str = "step,epoch,lr,total,cls,bce,dice,grad_norm";

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir
        .join(CHECKPOINT_DIR)
        .join(format!("step_{step:06}.safetensors"))
}

/// One loss-log line; floats use the shortest exact representation so logs
/// can be compared bit for bit.
pub fn loss_csv_row(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.step, r.epoch, r.lr, r.loss.total, r.loss.cls, r.loss.bce, r.loss.dice, r.grad_norm
    )
}

/// Reads the `total` column of a loss log, indexed by step.
pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut f = l.split(',');
            let step = f.next().and_then(|v| v.parse().ok());
            let total = f.nth(2).and_then(|v| v.parse().ok());
            match (step, total) {
                (Some(s), Some(t)) => Ok((s, t)),
                _ => Err(Error::format(path, format!("bad loss row `{l}`"))),
            }
        })
        .collect()
}

/// Keeps the header and the rows up to `step` of an existing log, or starts
/// a new one.
fn prepare_log(path: &Path, header: &str, keep_through: usize) -> Result<std::fs::File> {
    let mut text = format!("{header}\n");
    if keep_through > 0 {
        if let Ok(old) = std::fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
                if step.is_some_and(|s| s <= keep_through) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Result of [`run_training`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    epoch: usize,
    batch_index: usize,
    images: &'a [u64],
    file_names: Vec<String>,
}

/// Trains on `config.train.split` of `dataset`, writing the resolved config,
/// the loss log, periodic checkpoints and a final checkpoint under
/// `out_dir`. With `resume`, continues from that checkpoint and rewrites the
/// log from its step on. `on_step` runs after every step and may stop the
/// run early by returning `false`.
pub fn run_training(
    config: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&Trainer, &StepRecord) -> bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = dataset.split(&config.train.split)?;
    if samples.is_empty() {
        return Err(Error::Input(format!(
            "split `{}` is empty",
            config.train.split
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let model = Model::new(&config.model)?;
    let mut trainer = match resume {
        Some(path) => {
            Trainer::from_checkpoint(model, config.train.clone(), Checkpoint::load(path)?)?
        }
        None => Trainer::new(model, config.train.clone(), config.seed),
    };
    let start = trainer.step();
    let total = config.train.total_steps(samples.len());
    let mut log = prepare_log(&out_dir.join(LOSS_CSV), LOSS_HEADER, start)?;
    let mut eval_log = if config.train.eval_every > 0 {
        Some(prepare_log(
            &out_dir.join(EVAL_CSV),
            "step,AP_m,AP50",
            start,
        )?)
    } else {
        None
    };
    let mut records = Vec::new();
    while trainer.step() < total {
        let r = match trainer.train_step(&samples) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss { step, images }) => {
                let spe = config.train.steps_per_epoch(samples.len());
                let dump = NonFiniteDump {
                    step,
                    epoch: (step - 1) / spe,
                    batch_index: (step - 1) % spe,
                    images: &images,
                    file_names: images
                        .iter()
                        .filter_map(|id| dataset.coco.image(*id).map(|i| i.file_name.clone()))
                        .collect(),
                };
                write_json(&out_dir.join(NAN_DUMP), &dump)?;
                return Err(Error::NonFiniteLoss { step, images });
            }
            Err(e) => return Err(e),
        };
        let line = format!("{}\n", loss_csv_row(&r));
        log.write_all(line.as_bytes())
            .map_err(|e| Error::io(out_dir.join(LOSS_CSV), e))?;
        if config.train.checkpoint_every > 0 && r.step % config.train.checkpoint_every == 0 {
            trainer
                .checkpoint()
                .save(&checkpoint_path(out_dir, r.step))?;
        }
        if let Some(f) = eval_log.as_mut() {
            if r.step % config.train.eval_every == 0 {
                let preds = predict_all(
                    &samples,
                    Predictor::Model {
                        model: &trainer.model,
                        store: &trainer.store,
                    },
                )?;
                let rep =
                    evaluate_split(dataset, &config.train.split, &preds, config.eval.buckets)?;
                let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                let line = format!("{},{},{}\n", r.step, fmt(rep.ap), fmt(rep.ap50));
                f.write_all(line.as_bytes())
                    .map_err(|e| Error::io(out_dir.join(EVAL_CSV), e))?;
            }
        }
        log::info!("step {} loss {:.4} lr {:e}", r.step, r.loss.total, r.lr);
        records.push(r);
        if !on_step(&trainer, &r) {
            break;
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        trainer,
        records,
        final_checkpoint,
    })
}
