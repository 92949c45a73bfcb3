//! Training loop and dataset evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use a2fpn::autodiff::{AdamState, Mode, Tape, Tensor};
use a2fpn::metrics::ConfusionMatrix;
use a2fpn::model::{argmax_classes, save_checkpoint, Model};
use a2fpn::rng;
use a2fpn::synth::{augment, load_sample, softmax_channels, tta_predict, AugmentationPolicy, Manifest, Sample, Split};
use a2fpn::{Error, Result};
use rand::seq::SliceRandom;

use crate::config::RunConfig;

pub const TRAIN_LOG_FILE: &str = "train_log.csv";

const SHUFFLE_STREAM: u64 = 0x5_1e;
const AUGMENT_STREAM: u64 = 0xa_09;

pub fn load_split(manifest: &Manifest, dir: &Path, split: Split) -> Result<Vec<Sample>> {
    manifest.split(split).map(|e| load_sample(dir, e)).collect()
}

/// Stacks samples into a `B×3×H×W` batch and the matching flat labels.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data(format!(
                "batch mixes {h}×{w} and {}×{} images",
                s.height, s.width
            )));
        }
        image.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], image)?, labels))
}

/// Per-pixel class probabilities for one sample.
pub fn predict_probabilities(model: &Model, sample: &Sample, tta: bool) -> Result<Tensor> {
    let x = sample.image_tensor()?;
    if tta {
        tta_predict(|t: &Tensor| model.predict(t), &x)
    } else {
        softmax_channels(&model.predict(&x)?)
    }
}

/// Accumulates a confusion matrix over `samples`, one forward pass each.
/// `predict` returns the label map for a sample.
pub fn score(
    samples: &[Sample],
    num_classes: usize,
    mut predict: impl FnMut(&Sample) -> Result<Vec<u8>>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in samples {
        cm.update(&predict(s)?, &s.labels, None)?;
    }
    Ok(cm)
}

pub fn model_predictor(model: &Model, tta: bool) -> impl FnMut(&Sample) -> Result<Vec<u8>> + '_ {
    move |s| argmax_classes(&predict_probabilities(model, s, tta)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch of the saved weights; 0 for the initial weights.
    pub best_epoch: usize,
    pub best_val_miou: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_miou\n");
    for r in records {
        writeln!(out, "{},{:.10},{:.10}", r.epoch, r.train_loss, r.val_miou).expect("write to String");
    }
    out
}

/// Trains `cfg.variant` on `train`, keeping the weights with the best
/// validation mIoU. Writes the checkpoint and the per-epoch log.
pub fn train(cfg: &RunConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training needs non-empty train and val splits".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("lr must be positive, got {}", cfg.lr)));
    }
    let mut model = Model::init(cfg.model_config(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut shuffle_rng = rng::derive(cfg.seed, SHUFFLE_STREAM);
    let mut augment_rng = rng::derive(cfg.seed, AUGMENT_STREAM);
    let policy = if cfg.augment {
        AugmentationPolicy::standard()
    } else {
        AugmentationPolicy::identity()
    };

    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let checkpoint = cfg.checkpoint_path();
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let log = cfg.out.join(TRAIN_LOG_FILE);

    let mut records = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    if cfg.epochs == 0 {
        save_checkpoint(&model, &checkpoint)?;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&train[i], &policy, &mut augment_rng))
                .collect();
            let (x, labels) = batch(&augmented.iter().collect::<Vec<_>>())?;
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let logits = model.forward_with(&tape, &bound, &x, Mode::Train)?;
            let loss = tape.cross_entropy(&logits, &labels, None)?;
            steps += 1;
            if !loss.item().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: steps,
                    loss: loss.item(),
                });
            }
            loss_sum += loss.item();
            let grads = bound.gradients(&tape.backward(&loss)?);
            adam.step(&mut model.params, &grads, cfg.lr)?;
        }
        let val_miou = score(val, cfg.num_classes, model_predictor(&model, false))?.mean_iou()?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_miou,
        });
        if best.is_none_or(|(_, m)| val_miou > m) {
            best = Some((epoch, val_miou));
            save_checkpoint(&model, &checkpoint)?;
        }
        fs::write(&log, log_csv(&records)).map_err(|e| Error::io(&log, e))?;
    }
    fs::write(&log, log_csv(&records)).map_err(|e| Error::io(&log, e))?;
    Ok(TrainOutcome {
        records,
        best_epoch: best.map_or(0, |b| b.0),
        best_val_miou: best.map(|b| b.1),
        checkpoint,
        log,
    })
}
