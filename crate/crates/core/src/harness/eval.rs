use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, stack_images, Model};
use crate::synth::Dataset;
use crate::tensor::{Scalar, Tensor};

use super::checkpoint::Checkpoint;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Per-sample mean of the summed stage cross-entropies.
    pub loss_ce: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Test-path evaluation: global stream only.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<EvalReport> {
    let classes = model.config.num_classes;
    if dataset.spec.num_classes != classes || dataset.spec.image_size != model.config.image_size {
        return Err(Error::Config(format!(
            "dataset ({} classes, {}px) does not match model ({} classes, {}px)",
            dataset.spec.num_classes, dataset.spec.image_size, classes, model.config.image_size
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut ce = 0.0;
    for chunk in dataset.samples.chunks(EVAL_BATCH) {
        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let images = stack_images::<T>(&imgs)?;
        let stages = model.forward_test_stages(&images)?;
        let mut sum = stages[0].clone();
        for s in &stages[1..] {
            for (a, &b) in sum.data_mut().iter_mut().zip(s.data()) {
                *a += b;
            }
        }
        for stage in &stages {
            for (row, sample) in stage.data().chunks(classes).zip(chunk) {
                ce += row_cross_entropy(row, sample.label);
            }
        }
        for (pred, sample) in argmax_rows(&sum).into_iter().zip(chunk) {
            confusion[sample.label][pred] += 1;
        }
    }
    let n = dataset.len().max(1) as f64;
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        loss_ce: ce / n,
        confusion,
    })
}

fn row_cross_entropy<T: Scalar>(row: &[T], label: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    lse - row[label].as_f64()
}

pub fn cmd_eval(checkpoint_dir: &Path, dataset: &Dataset) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint_dir)?;
    evaluate(&ckpt.model()?, dataset)
}
