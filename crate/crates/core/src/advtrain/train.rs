use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::PackedSequence;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::rng::component_rng;
use crate::scalar::Scalar;
use crate::tinylm::Parameters;

use super::step::minibatch_step;
use super::{Phase, VatConfig};

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_rec: f64,
    pub loss_vadv: f64,
    pub delta_norm: f64,
    pub grad_norm: f64,
    pub phase: Phase,
}

/// Receives the adapters at the end of every epoch.
pub trait CheckpointSink<F> {
    fn epoch_end(&mut self, epoch: usize, adapters: &AdapterSet<F>, history: &[HistoryRow]) -> Result<()>;
}

pub struct NoCheckpoints;

impl<F> CheckpointSink<F> for NoCheckpoints {
    fn epoch_end(&mut self, _: usize, _: &AdapterSet<F>, _: &[HistoryRow]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub adapters: AdapterSet<F>,
    pub history: Vec<HistoryRow>,
}

/// Runs `config.epochs` epochs of adversarial adapter training over `data`.
/// The base parameters are only read.
pub fn train<F: Scalar>(
    data: &[PackedSequence],
    params: &Parameters<F>,
    adapters: AdapterSet<F>,
    config: &VatConfig,
    sink: &mut dyn CheckpointSink<F>,
) -> Result<TrainOutcome<F>> {
    train_from(data, params, adapters, config, 0, sink)
}

/// Continues a run whose first `completed` epochs produced `adapters`.
/// Each epoch draws its noise from its own stream and the order shuffles of
/// the skipped epochs are replayed, so a resumed run matches an
/// uninterrupted one bit for bit.
pub fn train_from<F: Scalar>(
    data: &[PackedSequence],
    params: &Parameters<F>,
    mut adapters: AdapterSet<F>,
    config: &VatConfig,
    completed: usize,
    sink: &mut dyn CheckpointSink<F>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order_rng = component_rng(config.seed, "vat-order");
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..completed.min(config.epochs) {
        order.shuffle(&mut order_rng);
    }
    let mut history = Vec::new();
    let mut step = completed * data.len().div_ceil(config.batch_size);
    for epoch in completed + 1..=config.epochs {
        let mut noise_rng = component_rng(config.seed, &format!("vat-noise-{epoch}"));
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<PackedSequence> = chunk.iter().map(|&i| data[i].clone()).collect();
            let report = minibatch_step(params, &mut adapters, &batch, config, epoch, step, &mut noise_rng)?;
            history.push(HistoryRow {
                epoch,
                step,
                loss_rec: report.loss_rec,
                loss_vadv: report.loss_vadv,
                delta_norm: report.delta_norm,
                grad_norm: report.grad_norm,
                phase: report.phase,
            });
        }
        sink.epoch_end(epoch, &adapters, &history)?;
    }
    Ok(TrainOutcome { adapters, history })
}
