use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::dataset::Dataset;
use super::PipelineError;
use crate::expert::{restricted_argmax, ExpertSpec};
use crate::runtime::ops::softmax_cross_entropy;
use crate::runtime::{
    adam_step, backward, forward, infer, init_parameters, sgd_step, AdamConfig, Mode,
    ParameterStore, SgdConfig,
};
use crate::taxonomy::CategoryId;
use crate::topology::ComputeGraph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Seeds both initialization and per-epoch shuffling.
    pub seed: u64,
    /// Written after every epoch when set.
    pub checkpoint_path: Option<PathBuf>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            weight_decay: 0.0,
            seed: 0,
            checkpoint_path: None,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(PipelineError::InvalidConfig(
                "epochs and batch sizes must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Logit column of every category served by `g`.
fn columns(g: &ComputeGraph) -> BTreeMap<usize, usize> {
    g.categories().enumerate().map(|(i, c)| (c.0, i)).collect()
}

fn check_shapes(g: &ComputeGraph, data: &Dataset) -> Result<(), PipelineError> {
    let s = g.input_shape;
    if data.image_dims() != [s.c, s.h, s.w] {
        return Err(PipelineError::ShapeMismatch(format!(
            "dataset images {:?}, graph input {}x{}x{}",
            data.image_dims(),
            s.c,
            s.h,
            s.w
        )));
    }
    Ok(())
}

/// Trains `g` from a fresh seeded initialization, or from `resume`.
///
/// `on_epoch` sees each epoch's metrics as soon as they are computed.
pub fn train(
    g: &ComputeGraph,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, PipelineError> {
    cfg.check()?;
    check_shapes(g, train_set)?;
    let cols = columns(g);
    if let Some(missing) = train_set.labels.iter().find(|l| !cols.contains_key(l)) {
        return Err(PipelineError::ClassCoverageMismatch(format!(
            "label {missing} has no logit in the graph"
        )));
    }
    let targets: Vec<usize> = train_set.labels.iter().map(|l| cols[l]).collect();

    let (mut params, first_epoch) = match resume {
        Some(ckpt) => {
            ckpt.check_graph(g)?;
            (ckpt.params, ckpt.epoch)
        }
        None => (init_parameters::<f32>(g, cfg.seed), 0),
    };
    params.check_graph(g)?;
    let hash = g.content_hash();

    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in first_epoch..first_epoch + cfg.epochs as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_set.images.gather_batch(chunk);
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let pass = forward(g, &params, &x, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&pass.logits, &t)?;
            let grads = backward(g, &params, &pass.tape, &dlogits)?;
            drop(pass.tape);
            params.apply_updates(pass.running_updates)?;
            match cfg.optimizer {
                OptimizerKind::Sgd { momentum } => sgd_step(
                    &mut params,
                    &grads,
                    &SgdConfig {
                        lr: cfg.lr,
                        momentum,
                        weight_decay: cfg.weight_decay,
                    },
                )?,
                OptimizerKind::Adam { beta1, beta2 } => adam_step(
                    &mut params,
                    &grads,
                    &AdamConfig {
                        lr: cfg.lr,
                        beta1,
                        beta2,
                        weight_decay: cfg.weight_decay,
                        ..Default::default()
                    },
                )?,
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_top1 = match val {
            Some(v) => Some(evaluate_params(g, &params, v, None, cfg.eval_batch)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            val_top1,
        };
        on_epoch(&m);
        metrics.push(m);
        if let Some(path) = &cfg.checkpoint_path {
            save_checkpoint(
                path,
                &Checkpoint {
                    graph_hash: hash,
                    epoch: epoch + 1,
                    params: params.clone(),
                    normalization: train_set.normalization.clone(),
                },
            )?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            graph_hash: hash,
            epoch: first_epoch + cfg.epochs as u32,
            params,
            normalization: train_set.normalization.clone(),
        },
        metrics,
    })
}

/// Top-1 accuracy in evaluation mode.
///
/// Only samples whose label lies in the evaluated category set count: the
/// `subset` if given, otherwise every category `g` serves. Predictions are
/// the argmax over that set, ties going to the smaller category id.
pub fn evaluate_params(
    g: &ComputeGraph,
    params: &ParameterStore<f32>,
    data: &Dataset,
    subset: Option<&ExpertSpec>,
    batch: usize,
) -> Result<f64, PipelineError> {
    check_shapes(g, data)?;
    let cols = columns(g);
    let cats: Vec<CategoryId> = match subset {
        Some(s) => s.categories().to_vec(),
        None => g.categories().collect(),
    };
    let sel: Vec<usize> = cats
        .iter()
        .map(|c| {
            cols.get(&c.0).copied().ok_or_else(|| {
                PipelineError::ClassCoverageMismatch(format!("graph does not serve {c}"))
            })
        })
        .collect::<Result<_, _>>()?;
    let idx: Vec<usize> = (0..data.len())
        .filter(|&i| cats.iter().any(|c| c.0 == data.labels[i]))
        .collect();
    if idx.is_empty() {
        return Err(PipelineError::EmptyEvalSet);
    }
    let k = g.logit_layout.len();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let x = data.images.gather_batch(chunk);
        let logits = infer(g, params, &x)?;
        for (s, &i) in chunk.iter().enumerate() {
            let row = &logits.data()[s * k..][..k];
            let vals: Vec<f32> = sel.iter().map(|&c| row[c]).collect();
            if restricted_argmax(&vals, &cats).0 == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// [`evaluate_params`] with the parameters of a checkpoint written for `g`
/// or for the graph `g` was extracted from.
pub fn evaluate(
    g: &ComputeGraph,
    checkpoint: &Checkpoint,
    data: &Dataset,
    subset: Option<&ExpertSpec>,
) -> Result<f64, PipelineError> {
    checkpoint.check_graph(g)?;
    let params = checkpoint.params.subset_for(g)?;
    evaluate_params(g, &params, data, subset, 256)
}
