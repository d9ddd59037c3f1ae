use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Mode;
use super::loss::{class_weights, weighted_ce_loss};
use super::model::{Model, ModelConfig};
use super::optim::{onecycle_lr, LrBounds, SgdMomentum};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Number of cross-validation folds.
pub const FOLDS: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Inverse-frequency class weighting of the loss.
    pub weighted_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-2,
            lr_min: 1e-4,
            epochs: 50,
            batch_size: 32,
            momentum: 0.937,
            weighted_loss: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need lr_max > lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        SgdMomentum::new(self.momentum)?;
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "epochs must be ≥ 1 and batch size ≥ 2".into(),
            ));
        }
        Ok(())
    }

    pub fn bounds(&self) -> LrBounds {
        LrBounds {
            max: self.lr_max,
            min: self.lr_min,
        }
    }
}

/// One projection image prepared for the network.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// Row-major pixels scaled to [0, 1].
    pub pixels: Vec<f64>,
    pub label: usize,
    /// Index of the tree the view belongs to.
    pub tree: usize,
    /// Cross-validation fold in 1..=5 for training trees.
    pub fold: Option<u8>,
}

impl LabeledImage {
    pub fn from_bytes(bytes: &[u8], label: usize, tree: usize, fold: Option<u8>) -> Self {
        Self {
            pixels: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label,
            tree,
            fold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub fold: u8,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: u8,
    /// Weights of the epoch with the highest validation accuracy.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub log: Vec<EpochLog>,
}

fn batch_tensor(images: &[LabeledImage], indices: &[usize], side: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * side * side);
    for &i in indices {
        let px = &images[i].pixels;
        if px.len() != side * side {
            return Err(Error::Shape(format!(
                "image {i} has {} pixels, model expects {side}×{side}",
                px.len()
            )));
        }
        data.extend_from_slice(px);
    }
    Tensor::from_vec([indices.len(), 1, side, side], data)
}

/// Eval-mode logits for the selected images, in order.
pub fn predict_logits(
    model: &mut Model,
    images: &[LabeledImage],
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let side = model.config.input_side;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(32) {
        let x = batch_tensor(images, chunk, side)?;
        let f = model.forward(&x, Mode::Eval)?;
        out.extend((0..chunk.len()).map(|s| f.logits_of(s).to_vec()));
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Tree-level label: argmax of the mean logit vector over the views.
pub fn tree_prediction(view_logits: &[Vec<f64>]) -> Result<usize> {
    let first = view_logits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no views to average".into()))?;
    let mut mean = vec![0.0; first.len()];
    for row in view_logits {
        if row.len() != mean.len() {
            return Err(Error::Shape("views disagree on class count".into()));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / view_logits.len() as f64;
        }
    }
    Ok(argmax(&mean))
}

/// Runs the model on the four views of one tree and averages logits.
pub fn predict_tree(model: &mut Model, views: &[LabeledImage]) -> Result<usize> {
    if views.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected 4 views, got {}",
            views.len()
        )));
    }
    let logits = predict_logits(model, views, &[0, 1, 2, 3])?;
    tree_prediction(&logits)
}

pub fn accuracy(model: &mut Model, images: &[LabeledImage], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let logits = predict_logits(model, images, indices)?;
    let correct = indices
        .iter()
        .zip(&logits)
        .filter(|(&i, l)| argmax(l) == images[i].label)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Splits a shuffled index list into batches, dropping a trailing batch of
/// one image (batch statistics need at least two samples).
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    order.chunks(size).filter(|b| b.len() >= 2).collect()
}

/// One SGD step on a batch; returns the batch loss.
fn train_step(
    model: &mut Model,
    images: &[LabeledImage],
    batch: &[usize],
    weights: &[f64],
    opt: &mut SgdMomentum,
    lr: f64,
) -> Result<f64> {
    let x = batch_tensor(images, batch, model.config.input_side)?;
    let labels: Vec<usize> = batch.iter().map(|&i| images[i].label).collect();
    model.zero_grad();
    let out = model.forward(&x, Mode::Train)?;
    let (loss, grad) = weighted_ce_loss(&out.logits, &labels, weights)?;
    model.backward(&grad);
    opt.step(&mut model.params_mut(), lr)?;
    Ok(loss)
}

fn loss_weights(
    images: &[LabeledImage],
    train: &[usize],
    classes: usize,
    weighted: bool,
) -> Result<Vec<f64>> {
    if !weighted {
        return Ok(vec![1.0; classes]);
    }
    let mut counts = vec![0usize; classes];
    for &i in train {
        counts[images[i].label] += 1;
    }
    class_weights(&counts)
}

/// Trains one model on `train` and keeps the epoch with the best image-wise
/// accuracy on `val` (earliest epoch on ties).
pub fn train_fold(
    images: &[LabeledImage],
    train: &[usize],
    val: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: u8,
) -> Result<FoldResult> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two training images".into(),
        ));
    }
    let weights = loss_weights(images, train, model_cfg.classes, cfg.weighted_loss)?;
    let mut model = Model::new(model_cfg.clone())?;
    let mut opt = SgdMomentum::new(cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(fold) << 32));
    let steps_per_epoch = batches(train, cfg.batch_size).len();
    let last_step = (cfg.epochs * steps_per_epoch).saturating_sub(1);
    let mut order = train.to_vec();
    let mut step = 0;
    let mut best: Option<(usize, f64, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.copy_from_slice(train);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut lr = cfg.lr_max;
        for batch in batches(&order, cfg.batch_size) {
            lr = onecycle_lr(step, last_step, cfg.bounds());
            loss_sum +=
                train_step(&mut model, images, batch, &weights, &mut opt, lr)? * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let val_acc = accuracy(&mut model, images, val)?;
        log.push(EpochLog {
            epoch,
            fold,
            train_loss: loss_sum / seen as f64,
            val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, model.clone()));
        }
    }
    let (best_epoch, best_val_acc, model) = best.expect("at least one epoch");
    Ok(FoldResult {
        fold,
        model,
        best_epoch,
        best_val_acc,
        log,
    })
}

/// Five-fold cross-validation over images carrying fold labels 1..=5:
/// fold k validates on its own images and trains on the other four.
pub fn train_kfold(
    images: &[LabeledImage],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<FoldResult>> {
    let folds = fold_indices(images)?;
    (1..=FOLDS)
        .map(|k| {
            let val = &folds[usize::from(k - 1)];
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != usize::from(k - 1))
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            train_fold(images, &train, val, model_cfg, cfg, k)
        })
        .collect()
}

/// Image indices per fold; every image must carry a fold in 1..=5.
pub fn fold_indices(images: &[LabeledImage]) -> Result<Vec<Vec<usize>>> {
    let mut folds = vec![Vec::new(); usize::from(FOLDS)];
    for (i, img) in images.iter().enumerate() {
        match img.fold {
            Some(f) if (1..=FOLDS).contains(&f) => folds[usize::from(f - 1)].push(i),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "image {i} has fold label {other:?}, expected 1..={FOLDS}"
                )))
            }
        }
    }
    if let Some(k) = folds.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "fold {} has no images",
            k + 1
        )));
    }
    Ok(folds)
}

/// Trains on a small set until every image is classified correctly in eval
/// mode, checking every `check_every` steps. Returns the step count at which
/// that first happened, or `None` if `max_steps` ran out.
pub fn overfit_probe(
    images: &[LabeledImage],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    max_steps: usize,
    check_every: usize,
) -> Result<Option<usize>> {
    cfg.validate()?;
    let all: Vec<usize> = (0..images.len()).collect();
    let weights = loss_weights(images, &all, model_cfg.classes, cfg.weighted_loss)?;
    let mut model = Model::new(model_cfg.clone())?;
    let mut opt = SgdMomentum::new(cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = all.clone();
    let mut step = 0;
    while step < max_steps {
        order.shuffle(&mut rng);
        for batch in batches(&order, cfg.batch_size) {
            let lr = onecycle_lr(step, max_steps - 1, cfg.bounds());
            train_step(&mut model, images, batch, &weights, &mut opt, lr)?;
            step += 1;
            if step % check_every == 0 && accuracy(&mut model, images, &all)? == 1.0 {
                return Ok(Some(step));
            }
            if step == max_steps {
                break;
            }
        }
    }
    Ok(None)
}

pub fn write_training_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,fold,train_loss,val_acc,lr\n");
    for l in logs {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            l.epoch, l.fold, l.train_loss, l.val_acc, l.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
