use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hankel;

use super::forward::{forward, loss_and_grad};
use super::optim::AdamW;
use super::{init_model, Dataset, NormKind, SequenceModel, TrainConfig};

const BN_MOMENTUM: f64 = 0.1;
const EVAL_BATCH: usize = 256;

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    /// Sum of Hankel nuclear norms at the end of the epoch.
    pub reg: f64,
    pub eval_acc: f64,
    pub wall_time_s: f64,
}

/// Model plus optimizer and RNG state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SequenceModel,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut model = init_model(cfg, cfg.seed)?;
        let optimizer = AdamW::new(model.num_params()?, cfg.lr, cfg.weight_decay);
        Ok(Self {
            model,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0001)),
            epoch: 0,
        })
    }

    pub fn from_parts(model: SequenceModel, optimizer: AdamW, rng: ChaCha8Rng, epoch: usize) -> Self {
        Self {
            model,
            optimizer,
            rng,
            epoch,
        }
    }

    /// One pass over `data` in shuffled mini-batches.
    pub fn run_epoch(&mut self, data: &Dataset, eval: Option<&Dataset>) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let start = Instant::now();
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let decay = self.model.decay_mask()?;
        let (mut loss_sum, mut ce_sum, mut count) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DMatrix<f64>> = chunk.iter().map(|&i| &data.inputs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (parts, grad, cache) = loss_and_grad(&self.model, &batch, &labels, true, Some(&mut self.rng))?;
            if cfg.norm == NormKind::Batch {
                for (block, bc) in self.model.blocks.iter_mut().zip(&cache.blocks) {
                    if let Some((mean, var)) = &bc.batch_stats {
                        block.norm.running_mean = &block.norm.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
                        block.norm.running_var = &block.norm.running_var * (1.0 - BN_MOMENTUM) + var * BN_MOMENTUM;
                    }
                }
            }
            let mut theta = self.model.flat_params()?;
            self.optimizer.update(&mut theta, &grad.flat(), &decay);
            self.model.set_flat_params(&theta)?;
            for layer in self.model.rotation_layers()? {
                if layer.rho().iter().any(|r| !(r.abs() < 1.0)) {
                    return Err(Error::NonFinite("retention factor reached the unit circle".into()));
                }
            }
            loss_sum += parts.total * chunk.len() as f64;
            ce_sum += parts.ce * chunk.len() as f64;
            count += chunk.len();
        }
        self.epoch += 1;
        let layers: Vec<_> = self.model.rotation_layers()?.into_iter().cloned().collect();
        let reg = hankel::hankel_nuclear_norm(&layers)?;
        let eval_acc = match eval {
            Some(e) if !e.is_empty() => evaluate(&self.model, e)?,
            _ => f64::NAN,
        };
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: loss_sum / count as f64,
            ce: ce_sum / count as f64,
            reg,
            eval_acc,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, data: &Dataset, eval: Option<&Dataset>) -> Result<(SequenceModel, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        log.push(trainer.run_epoch(data, eval)?);
    }
    Ok((trainer.model, log))
}

/// Logits (`classes × count`) for the sequences in `inputs`, evaluated in batches.
pub fn predict_logits(model: &SequenceModel, inputs: &[DMatrix<f64>], batch_size: usize) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(model.classes(), inputs.len());
    let mut offset = 0;
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&DMatrix<f64>> = chunk.iter().collect();
        let (logits, _) = forward(model, &refs, false, None)?;
        out.columns_mut(offset, chunk.len()).copy_from(&logits);
        offset += chunk.len();
    }
    Ok(out)
}

/// Top-1 accuracy with dropout disabled.
pub fn evaluate(model: &SequenceModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let logits = predict_logits(model, &data.inputs, EVAL_BATCH)?;
    let correct = logits
        .column_iter()
        .zip(&data.labels)
        .filter(|(col, &label)| col.argmax().0 == label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{synthetic_dataset, SyntheticSpec};

    fn small() -> (TrainConfig, Dataset) {
        let cfg = TrainConfig {
            depth: 1,
            n: 8,
            p: 8,
            classes: 4,
            batch_size: 16,
            epochs: 2,
            lr: 5e-3,
            ..TrainConfig::default()
        };
        let data = synthetic_dataset(&SyntheticSpec {
            samples: 64,
            len: 24,
            ..SyntheticSpec::default()
        })
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data) = small();
        let (m1, l1) = train(&cfg, &data, Some(&data)).unwrap();
        let (m2, l2) = train(&cfg, &data, Some(&data)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(
            l1.iter().map(|m| m.train_loss).collect::<Vec<_>>(),
            l2.iter().map(|m| m.train_loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn batch_norm_trains() {
        let (mut cfg, data) = small();
        cfg.norm = NormKind::Batch;
        let (model, log) = train(&cfg, &data, Some(&data)).unwrap();
        assert!(log.iter().all(|m| m.train_loss.is_finite()));
        assert_ne!(
            model.blocks[0].norm.running_var,
            nalgebra::DVector::from_element(8, 1.0)
        );
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let cfg = TrainConfig {
            depth: 1,
            n: 8,
            p: 8,
            classes: 10,
            ..TrainConfig::default()
        };
        let model = init_model(&cfg, 7).unwrap();
        let data = synthetic_dataset(&SyntheticSpec {
            samples: 1000,
            len: 16,
            classes: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut shuffled = data.clone();
        shuffled.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let acc = evaluate(&model, &shuffled).unwrap();
        assert!((acc - 0.1).abs() < 0.03, "accuracy {acc}");
    }
}
