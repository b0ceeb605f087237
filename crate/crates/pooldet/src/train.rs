//! Batched training loop with deterministic gradient reduction.
//!
//! Per-image work (forward, loss, backward) fans out over the batch via
//! [`crate::par`]; gradients come back in batch order and are averaged
//! sequentially, so a fixed seed reproduces the parameter trajectory exactly
//! regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{label_grid, AssignmentMap};
use crate::config::RunConfig;
use crate::data::SceneSample;
use crate::error::Result;
use crate::losses::total_loss;
use crate::model::{
    backward, compute_descriptors, forward_descriptors, sgd_step, OptimState, ToyHeadParams,
};
use crate::par;
use crate::tensor::PyramidTensor;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        total: f64,
        classification: f64,
        regression: f64,
    },
    Epoch {
        epoch: usize,
        total: f64,
        classification: f64,
        regression: f64,
        /// Mean number of pooled positive terms per image.
        mean_positives: f64,
        /// Mean number of instances whose positive area captured no feature.
        mean_unassigned: f64,
        learning_rate: f64,
    },
}

pub struct TrainOutcome {
    pub final_params: ToyHeadParams,
    pub best_params: ToyHeadParams,
    pub best_epoch: usize,
    pub log: Vec<LogRecord>,
}

/// Everything per-image that does not change across epochs.
struct PreparedImage {
    assignment: AssignmentMap,
    descriptors: PyramidTensor,
}

/// Trains the head on `samples` according to `config`.
pub fn fit(config: &RunConfig, samples: &[SceneSample]) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared: Vec<PreparedImage> = {
        let results = par::map_slice(samples, |sample| -> Result<PreparedImage> {
            let pyramid = config
                .pyramid
                .build(sample.image.width, sample.image.height)?;
            let assignment = label_grid(&sample.gts, &pyramid, config.shrink)?;
            let descriptors =
                compute_descriptors(&sample.image, &pyramid, config.model.window_strides);
            Ok(PreparedImage {
                assignment,
                descriptors,
            })
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };

    let n = samples.len();
    let mean_positives = prepared
        .iter()
        .map(|p| p.assignment.num_pooled_instances() as f64)
        .sum::<f64>()
        / n.max(1) as f64;
    let mean_unassigned = prepared
        .iter()
        .map(|p| p.assignment.unassigned.len() as f64)
        .sum::<f64>()
        / n.max(1) as f64;

    let mut params = ToyHeadParams::init(&config.model, config.seed)?;
    let mut optim = OptimState::new(
        config.optim.learning_rate,
        config.optim.momentum,
        config.optim.weight_decay,
        config.optim.milestones.clone(),
    )?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe);

    let mut log = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_total = f64::INFINITY;

    for epoch in 0..config.epochs {
        optim.start_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_total = 0.0;
        let mut epoch_cls = 0.0;
        let mut epoch_reg = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let per_image = par::map_slice(batch, |&idx| {
                let img = &prepared[idx];
                let sample = &samples[idx];
                let (cls, reg) = forward_descriptors(&params, &img.descriptors);
                let breakdown =
                    total_loss(&cls, &reg, &img.assignment, &sample.gts, &config.loss)
                        .expect("shapes are consistent by construction");
                let grads = backward(
                    &params,
                    &img.descriptors,
                    &breakdown.cls_grads,
                    &breakdown.reg_grads,
                )
                .expect("upstream shapes match forward outputs");
                (
                    breakdown.total,
                    breakdown.classification,
                    breakdown.regression,
                    grads.flatten(),
                )
            });

            // deterministic in-order reduction
            let scale = 1.0 / batch.len() as f64;
            let mut batch_grad = vec![0.0; params.num_parameters()];
            let mut batch_total = 0.0;
            let mut batch_cls = 0.0;
            let mut batch_reg = 0.0;
            for (total, cls, reg, flat) in &per_image {
                batch_total += total * scale;
                batch_cls += cls * scale;
                batch_reg += reg * scale;
                for (acc, g) in batch_grad.iter_mut().zip(flat) {
                    *acc += g * scale;
                }
            }
            let mut grads = params.zeros_like();
            grads.assign_flat(&batch_grad);
            sgd_step(&mut params, &grads, &mut optim);

            epoch_total += batch_total * batch.len() as f64;
            epoch_cls += batch_cls * batch.len() as f64;
            epoch_reg += batch_reg * batch.len() as f64;
            log.push(LogRecord::Step {
                epoch,
                step,
                total: batch_total,
                classification: batch_cls,
                regression: batch_reg,
            });
        }

        let denom = n.max(1) as f64;
        let epoch_record = LogRecord::Epoch {
            epoch,
            total: epoch_total / denom,
            classification: epoch_cls / denom,
            regression: epoch_reg / denom,
            mean_positives,
            mean_unassigned,
            learning_rate: optim.learning_rate,
        };
        if epoch_total / denom < best_total {
            best_total = epoch_total / denom;
            best_params = params.clone();
            best_epoch = epoch;
        }
        log.push(epoch_record);
    }

    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        log,
    })
}
