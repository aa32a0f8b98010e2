//! Deterministic fixed-step training: SGD over the total objective with the
//! two learning-rate groups, per-step component logging, and a final
//! checkpoint.

use std::path::{Path, PathBuf};

use super::{CliError, RunConfig};
use crate::data::{batch_images, checkpoint, DatasetIndex, Sample};
use crate::loss::{make_edge_label, total_loss, BinaryMask, LossBreakdown};
use crate::model::{MeunModel, Mode};
use crate::optim;
use crate::tensor::tape::Tape;

#[derive(Debug)]
pub struct TrainReport {
    /// Loss breakdown per step, in step order.
    pub steps: Vec<LossBreakdown>,
    pub checkpoint: PathBuf,
}

impl TrainReport {
    pub fn initial_total(&self) -> f64 {
        self.steps.first().map(|b| b.total).unwrap_or(f64::NAN)
    }

    pub fn final_total(&self) -> f64 {
        self.steps.last().map(|b| b.total).unwrap_or(f64::NAN)
    }
}

/// Train on `<dataset_root>/{images,masks}` and write the final checkpoint.
/// Deterministic for a fixed config and seed. A non-finite loss aborts after
/// saving the last good parameters.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset_root: &Path,
    out_checkpoint: &Path,
    mut log: impl FnMut(&str),
) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    let index = DatasetIndex::build(dataset_root)?;
    let samples = index.load_preprocessed(cfg.model.input_size)?;
    let edge_labels: Vec<BinaryMask> = samples.iter().map(|s| make_edge_label(&s.mask)).collect();

    let mut model = MeunModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let sgd = cfg.sgd();
    let opts = cfg.loss_options();

    let n = samples.len();
    let mut report = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // sequential wrap-around batching keeps runs reproducible
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|k| (step * cfg.batch_size + k) % n).collect();
        let picks: Vec<&Sample> = indices.iter().map(|&i| &samples[i]).collect();
        let images = batch_images(&picks);
        let sal: Vec<BinaryMask> = picks.iter().map(|s| s.mask.clone()).collect();
        let edge: Vec<BinaryMask> = indices.iter().map(|&i| edge_labels[i].clone()).collect();

        let mut tape = Tape::new();
        let maps = model.forward(&mut tape, images, Mode::Train)?;
        let (loss, breakdown) = total_loss(&mut tape, &maps.supervised(), &sal, &edge, opts)?;

        if !breakdown.total.is_finite() {
            checkpoint::save(&model.params, out_checkpoint)?;
            return Err(CliError::NonFiniteLoss {
                step,
                checkpoint: out_checkpoint.display().to_string(),
            });
        }

        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut model.params);
        optim::step(&mut model.params, &sgd);

        log(&breakdown.log_line(step));
        report.push(breakdown);
    }

    checkpoint::save(&model.params, out_checkpoint)?;
    Ok(TrainReport { steps: report, checkpoint: out_checkpoint.to_path_buf() })
}
