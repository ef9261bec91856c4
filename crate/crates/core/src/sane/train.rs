use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SaneConfig, SaneModel};
use crate::error::{Error, Result};
use crate::ingest::DataPoint;
use crate::numerics::{Adam, AdamConfig, Parameterized, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,train_acc,val_acc";

pub fn write_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_acc
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainedSane {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: SaneModel<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn labeled<'a>(points: &'a [DataPoint], classes: usize) -> Result<Vec<(&'a Tensor<f32>, usize)>> {
    points
        .iter()
        .map(|p| match p.label {
            Some(c) if c < classes => Ok((&p.features, c)),
            other => Err(Error::Invalid(format!(
                "point from {} has label {other:?}, expected a class below {classes}",
                p.device_id
            ))),
        })
        .collect()
}

/// Supervised training on seen-device sequences with cross-entropy and Adam.
///
/// Batches are reshuffled every epoch from a generator seeded by
/// `config.seed`; gradients are averaged over each batch. The returned model
/// is the checkpoint with the highest validation accuracy (earliest epoch
/// wins ties).
pub fn train_sane(train: &[DataPoint], val: &[DataPoint], config: SaneConfig) -> Result<TrainedSane> {
    config.validate()?;
    let classes = config.num_classes;
    let train_set = labeled(train, classes)?;
    let val_set = labeled(val, classes)?;
    let mut counts = vec![0usize; classes];
    for &(_, c) in &train_set {
        counts[c] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(empty));
    }

    let mut model = SaneModel::<f32>::new(config.clone())?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, SaneModel<f32>)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Tensor<f32>, usize)> = chunk.iter().map(|&i| train_set[i]).collect();
            model.zero_grad();
            let (loss, ok) = model.accumulate_batch(&batch)?;
            model.scale_grads(1.0 / batch.len() as f32);
            opt.step(&mut model);
            loss_sum += f64::from(loss);
            correct += ok;
        }
        let train_acc = correct as f64 / train_set.len() as f64;
        let val_acc = if val_set.is_empty() {
            train_acc
        } else {
            accuracy(&model, &val_set)?
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc,
            val_acc,
        };
        log::info!(
            "sane epoch {epoch}: loss {:.4} train_acc {:.4} val_acc {:.4}",
            entry.train_loss,
            entry.train_acc,
            entry.val_acc
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
    }
    let (_, best_epoch, mut model) = best.unwrap_or((0.0, 0, model));
    model.zero_grad();
    Ok(TrainedSane {
        model,
        log,
        best_epoch,
    })
}

fn accuracy(model: &SaneModel<f32>, set: &[(&Tensor<f32>, usize)]) -> Result<f64> {
    let mut correct = 0;
    for &(x, c) in set {
        if model.predict(x)? == c {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SupervisedEval {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_supervised(model: &SaneModel<f32>, test: &[DataPoint]) -> Result<SupervisedEval> {
    if test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let classes = model.config.num_classes;
    let set = labeled(test, classes)?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    for (x, c) in set {
        let p = model.predict(x)?;
        confusion[c][p] += 1;
        if p == c {
            correct += 1;
        }
    }
    Ok(SupervisedEval {
        accuracy: correct as f64 / test.len() as f64,
        confusion,
    })
}
