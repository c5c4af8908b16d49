use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::CorrelationBank;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, stack_images, Model};
use crate::nn::Ctx;
use crate::synth::{self, color_jitter, Dataset};
use crate::tensor::{Scalar, Tensor};

use super::checkpoint::Checkpoint;
use super::config::{Precision, RunConfig};
use super::eval::evaluate;
use super::metrics::{write_jsonl, MetricsRecord, Split};

pub const METRICS_FILE: &str = "metrics.jsonl";

const JITTER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub bank: Option<CorrelationBank>,
    pub records: Vec<MetricsRecord>,
}

impl TrainOutcome {
    fn last(&self, split: Split) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.last(Split::Train).map(|r| r.accuracy)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.last(Split::Test).map(|r| r.accuracy)
    }
}

/// Train and test sets described by the config's synthetic spec.
pub fn datasets(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    synth::generate(&config.synth)
}

/// Trains on freshly generated data and writes the checkpoint and metrics
/// stream into `out_dir`.
pub fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train_set, test_set) = datasets(config)?;
    let outcome = train(config, &train_set, &test_set)?;
    write_jsonl(&out_dir.join(METRICS_FILE), &outcome.records)?;
    Checkpoint::from_outcome(config, &outcome).save(out_dir)?;
    Ok(outcome)
}

pub fn train(config: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    match config.precision {
        Precision::F32 => run::<f32>(config, train_set, test_set),
        Precision::F64 => run::<f64>(config, train_set, test_set),
    }
}

fn run<T: Scalar>(config: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    let start = Instant::now();
    let wall = || config.record_wall_time.then(|| start.elapsed().as_secs_f64());
    let mut model = Model::<T>::new(config.model_config(), config.seed)?;
    let mut bank = if config.alignment.uses_bank() {
        Some(CorrelationBank::new(config.num_parts, config.ema_rate)?)
    } else {
        None
    };
    let mut velocity: Vec<Tensor<T>> = model.params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
    let lr = T::of(config.lr);
    let momentum = T::of(config.momentum);

    let mut records = Vec::new();
    records.push(test_record(&model, test_set, 0, wall())?);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let (mut total, mut reg, mut ce, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let images = batch_images::<T>(config, train_set, batch, epoch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.samples[i].label).collect();

            let mut cx = Ctx::new(&model.params, true);
            let out = model.forward_train(&mut cx, &images, &labels, bank.as_mut())?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            cx.g.backward(out.loss)?;
            let grads = cx.param_grads();
            drop(cx);

            for ((id, v), grad) in model.params.ids().zip(velocity.iter_mut()).zip(grads) {
                let p = model.params.get_mut(id);
                match grad {
                    Some(gr) => {
                        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                            *vv = momentum * *vv + gv;
                            *pv -= lr * *vv;
                        }
                    }
                    None => {
                        for (pv, vv) in p.data_mut().iter_mut().zip(v.data_mut()) {
                            *vv *= momentum;
                            *pv -= lr * *vv;
                        }
                    }
                }
            }

            let b = batch.len() as f64;
            total += out.breakdown.total * b;
            reg += out.breakdown.reg * b;
            ce += out.breakdown.ce() * b;
            correct += argmax_rows(&out.global_logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        let n = train_set.len() as f64;
        records.push(MetricsRecord {
            epoch,
            split: Split::Train,
            loss_total: total / n,
            loss_reg: reg / n,
            loss_ce: ce / n,
            accuracy: correct as f64 / n,
            wall_time: wall(),
        });
        records.push(test_record(&model, test_set, epoch, wall())?);
    }
    Ok(TrainOutcome {
        model: model.cast(),
        bank,
        records,
    })
}

fn test_record<T: Scalar>(model: &Model<T>, test_set: &Dataset, epoch: usize, wall_time: Option<f64>) -> Result<MetricsRecord> {
    let report = evaluate(model, test_set)?;
    Ok(MetricsRecord {
        epoch,
        split: Split::Test,
        loss_total: report.loss_ce,
        loss_reg: 0.0,
        loss_ce: report.loss_ce,
        accuracy: report.accuracy,
        wall_time,
    })
}

/// Stacks a batch, applying color jitter with a per-(epoch, sample) stream.
fn batch_images<T: Scalar>(config: &RunConfig, set: &Dataset, batch: &[usize], epoch: usize) -> Result<Tensor<T>> {
    if !config.jitter {
        let imgs: Vec<&Tensor<f32>> = batch.iter().map(|&i| &set.samples[i].image).collect();
        return stack_images(&imgs);
    }
    let jittered: Vec<Tensor<f32>> = batch
        .iter()
        .map(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ JITTER_SALT);
            rng.set_stream(((epoch as u64) << 32) | i as u64);
            color_jitter(&set.samples[i].image, config.jitter_strength, &mut rng)
        })
        .collect();
    stack_images(&jittered.iter().collect::<Vec<_>>())
}
