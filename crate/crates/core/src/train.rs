//! Mini-batch training with Adam, evaluation and CSV logging.
//!
//! Samples of a batch run in parallel; their gradients are summed in batch
//! order afterwards, so results do not depend on the thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::grad::{adam_step, load_checkpoint, loss_and_grad, AdamConfig, ParamStore, Params};
use crate::metrics::{evaluate, mean_std, Scores, SegMask};
use crate::model::{MptNet, MptNetConfig};
use crate::phantom::load_split;
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,train_loss,eval_dice,eval_cldice,min_jacobian";

pub type Sample = (Tensor, SegMask);

/// `train/` and `eval/` splits as written by [`crate::phantom::make_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        Ok(Dataset {
            train: load_split(&dir.join("train"), num_classes)?,
            eval: load_split(&dir.join("eval"), num_classes)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_dice: f64,
    pub eval_cldice: f64,
    /// Smallest interior Jacobian determinant seen during the epoch's steps.
    pub min_jacobian: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.eval_dice, self.eval_cldice, self.min_jacobian
        )
    }
}

pub struct TrainOutcome {
    pub net: MptNet,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Segmentation scores of `net` on every sample, in order.
pub fn evaluate_net(net: &MptNet, data: &[Sample]) -> Result<Vec<Scores>> {
    data.par_iter()
        .map(|(img, gt)| {
            let pred = SegMask::argmax(&net.forward(img)?)?;
            evaluate(&pred, gt)
        })
        .collect()
}

/// Per-case means of Dice and clDice.
pub fn mean_scores(scores: &[Scores]) -> (f64, f64) {
    let d: Vec<f64> = scores.iter().map(|s| s.dice).collect();
    let c: Vec<f64> = scores.iter().map(|s| s.cl_dice).collect();
    (mean_std(&d).0, mean_std(&c).0)
}

fn check_data(model: &MptNetConfig, data: &[Sample]) -> Result<()> {
    for (img, mask) in data {
        img.expect_rank(3)?;
        if img.shape()[0] != model.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                img.shape()[0],
                model.in_channels
            )));
        }
        if (img.shape()[1], img.shape()[2]) != (mask.height(), mask.width()) {
            return Err(Error::Shape(format!("image {:?} and mask sizes differ", img.shape())));
        }
    }
    Ok(())
}

/// Trains from scratch. `on_epoch` sees each log row as soon as it exists.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    check_data(&cfg.model, train_set)?;
    check_data(&cfg.model, eval_set)?;
    let mut net = MptNet::new(cfg.model.clone(), cfg.seed)?;
    let mut store = ParamStore::from_params(&net.params)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut min_jac) = (0.0, f64::INFINITY);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let (img, mask) = &train_set[i];
                    let (loss, grads, cache) = loss_and_grad(&net, img, mask)?;
                    Ok((loss, grads, cache.min_jacobian()?))
                })
                .collect::<Result<_>>()?;
            for (loss, grads, jac) in &results {
                loss_sum += loss;
                min_jac = min_jac.min(*jac);
                store.accumulate(grads)?;
            }
            store.scale_grads(1.0 / batch.len() as f64);
            adam_step(&mut store, &adam);
            store.write_to(&mut net.params)?;
        }
        let (eval_dice, eval_cldice) =
            if eval_set.is_empty() { (f64::NAN, f64::NAN) } else { mean_scores(&evaluate_net(&net, eval_set)?) };
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            eval_dice,
            eval_cldice,
            min_jacobian: min_jac,
        };
        on_epoch(&row)?;
        log.push(row);
    }
    Ok(TrainOutcome { net, store, log })
}

/// Rebuilds a network from a checkpoint and the config it was trained with.
pub fn load_net(ckpt: &Path, model: &MptNetConfig) -> Result<MptNet> {
    let store = load_checkpoint(ckpt)?;
    let mut net = MptNet::new(model.clone(), 0)?;
    if store.len() != net.params.named().len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config describes {}",
            store.len(),
            net.params.named().len()
        )));
    }
    store.write_to(&mut net.params)?;
    Ok(net)
}

/// Where `train` records the config next to a checkpoint.
pub fn config_sidecar(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config");
    s.into()
}
