//! Sequence classifier built from stacked rotation SSM blocks.
//!
//! Each block is `norm → SSM → gelu(y) ⊙ sigmoid(W gelu(y)) → dropout`,
//! followed by an optional residual add. A dense encoder lifts the input
//! features to the model width and the mean-pooled final activations are
//! decoded to class logits.

mod data;
mod forward;
mod optim;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compress::ReducedSsm;
use crate::error::{Error, Result};
use crate::hankel::GramianSolver;
use crate::lti::RotationSsm;

pub use data::{synthetic_dataset, Dataset, SyntheticSpec};
pub use forward::{
    backward, cross_entropy, forward, gelu, gelu_grad, loss_and_grad, BlockGrad, Cache, LossParts, ModelGrad,
};
pub use optim::AdamW;
pub use train::{evaluate, predict_logits, train, EpochMetrics, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Layer,
    Batch,
    None,
}

/// Standard deviation rule for the SSM input and output matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScale {
    /// `1/√(n²+m²)` for B and `1/√(n²+p²)` for C.
    #[default]
    Squared,
    /// `1/√(n+m)` and `1/√(n+p)`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub depth: usize,
    /// State dimension per layer (even).
    pub n: usize,
    /// Model width, also the SSM input and output dimension.
    pub p: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Weight of the Hankel nuclear norm; 0 disables the regularizer.
    pub reg: f64,
    pub seed: u64,
    pub norm: NormKind,
    pub residual: bool,
    pub init_scale: InitScale,
    pub reg_solver: GramianSolver,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            n: 32,
            p: 32,
            input_dim: 1,
            classes: 10,
            dropout: 0.1,
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            weight_decay: 0.01,
            reg: 0.0,
            seed: 0,
            norm: NormKind::Layer,
            residual: true,
            init_scale: InitScale::Squared,
            reg_solver: GramianSolver::Block,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.depth == 0 {
            return fail("depth must be at least 1");
        }
        if self.n == 0 || self.n % 2 != 0 {
            return fail("state dimension n must be a positive even number");
        }
        if self.p == 0 || self.input_dim == 0 {
            return fail("model width and input dimension must be positive");
        }
        if self.classes < 2 {
            return fail("at least two classes are required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.reg >= 0.0) {
            return fail("weight decay and regularization weight must be nonnegative");
        }
        if self.reg_solver == GramianSolver::Naive && self.n > crate::gramians::NAIVE_LIMIT {
            return fail("the naive gramian path only supports n <= 32");
        }
        Ok(())
    }
}

/// Normalization parameters; running statistics are used by batch norm only.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
}

impl Norm {
    pub fn new(p: usize) -> Self {
        Self {
            gamma: DVector::from_element(p, 1.0),
            beta: DVector::zeros(p),
            running_mean: DVector::zeros(p),
            running_var: DVector::from_element(p, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SsmLayer {
    Rotation(RotationSsm),
    Reduced(ReducedSsm),
}

impl SsmLayer {
    pub fn mode_name(&self) -> &'static str {
        match self {
            SsmLayer::Rotation(_) => "rotation",
            SsmLayer::Reduced(r) => r.mode_name(),
        }
    }

    pub fn as_rotation(&self) -> Option<&RotationSsm> {
        match self {
            SsmLayer::Rotation(r) => Some(r),
            SsmLayer::Reduced(_) => None,
        }
    }

    pub fn order(&self) -> usize {
        match self {
            SsmLayer::Rotation(r) => r.n(),
            SsmLayer::Reduced(r) => r.r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm: Norm,
    pub ssm: SsmLayer,
    /// `p × p` gate weight.
    pub gate: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub config: TrainConfig,
    /// `p × input_dim`.
    pub encoder_w: DMatrix<f64>,
    pub encoder_b: DVector<f64>,
    pub blocks: Vec<Block>,
    /// `classes × p`.
    pub decoder_w: DMatrix<f64>,
    pub decoder_b: DVector<f64>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Fresh model for `cfg`, deterministic in `seed`.
pub fn init_model(cfg: &TrainConfig, seed: u64) -> Result<SequenceModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p, q) = (cfg.n, cfg.p, cfg.n / 2);
    let (b_std, c_std) = match cfg.init_scale {
        InitScale::Squared => (
            1.0 / ((n * n + p * p) as f64).sqrt(),
            1.0 / ((n * n + p * p) as f64).sqrt(),
        ),
        InitScale::Linear => (1.0 / ((n + p) as f64).sqrt(), 1.0 / ((n + p) as f64).sqrt()),
    };
    let rho_dist = Normal::new(1.5, 0.25).expect("valid normal");
    let encoder_w = gaussian(p, cfg.input_dim, 1.0 / (cfg.input_dim as f64).sqrt(), &mut rng);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        let rho_raw: Vec<f64> = (0..q).map(|_| rho_dist.sample(&mut rng)).collect();
        let alpha_raw: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b_learn = gaussian(n, p - 1, b_std, &mut rng);
        let c = gaussian(p, n, c_std, &mut rng);
        let d: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let gate = gaussian(p, p, 1.0 / (p as f64).sqrt(), &mut rng);
        blocks.push(Block {
            norm: Norm::new(p),
            ssm: SsmLayer::Rotation(RotationSsm::new(rho_raw, alpha_raw, b_learn, c, d)?),
            gate,
        });
    }
    let decoder_w = gaussian(cfg.classes, p, 1.0 / (p as f64).sqrt(), &mut rng);
    Ok(SequenceModel {
        config: cfg.clone(),
        encoder_w,
        encoder_b: DVector::zeros(p),
        blocks,
        decoder_w,
        decoder_b: DVector::zeros(cfg.classes),
    })
}

impl SequenceModel {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.decoder_w.nrows()
    }

    pub fn width(&self) -> usize {
        self.encoder_w.nrows()
    }

    /// Rotation layers, or an error if any layer has been compressed.
    pub fn rotation_layers(&self) -> Result<Vec<&RotationSsm>> {
        self.blocks
            .iter()
            .map(|b| {
                b.ssm
                    .as_rotation()
                    .ok_or_else(|| Error::Invalid("model contains compressed layers".into()))
            })
            .collect()
    }

    pub fn is_trainable(&self) -> bool {
        self.blocks.iter().all(|b| b.ssm.as_rotation().is_some())
    }

    /// Trainable tensors in a fixed order, each with its weight-decay flag.
    ///
    /// Norm parameters and the rotation parameters, `B` and `C` are exempt
    /// from decay; the feedthrough `D` is decayed.
    pub fn tensors_mut(&mut self) -> Result<Vec<(&mut [f64], bool)>> {
        let mut out: Vec<(&mut [f64], bool)> = vec![
            (self.encoder_w.as_mut_slice(), true),
            (self.encoder_b.as_mut_slice(), true),
        ];
        for block in self.blocks.iter_mut() {
            let SsmLayer::Rotation(ssm) = &mut block.ssm else {
                return Err(Error::Invalid("compressed layers are not trainable".into()));
            };
            out.push((block.norm.gamma.as_mut_slice(), false));
            out.push((block.norm.beta.as_mut_slice(), false));
            out.push((ssm.rho_raw.as_mut_slice(), false));
            out.push((ssm.alpha_raw.as_mut_slice(), false));
            out.push((ssm.b_learn.as_mut_slice(), false));
            out.push((ssm.c.as_mut_slice(), false));
            out.push((ssm.d.as_mut_slice(), true));
            out.push((block.gate.as_mut_slice(), true));
        }
        out.push((self.decoder_w.as_mut_slice(), true));
        out.push((self.decoder_b.as_mut_slice(), true));
        Ok(out)
    }

    pub fn flat_params(&mut self) -> Result<Vec<f64>> {
        Ok(self.tensors_mut()?.into_iter().flat_map(|(t, _)| t.to_vec()).collect())
    }

    pub fn decay_mask(&mut self) -> Result<Vec<bool>> {
        Ok(self
            .tensors_mut()?
            .into_iter()
            .flat_map(|(t, d)| std::iter::repeat_n(d, t.len()))
            .collect())
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for (t, _) in self.tensors_mut()? {
            let len = t.len();
            if offset + len > flat.len() {
                return Err(Error::Dimension("flat parameter vector too short".into()));
            }
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        if offset != flat.len() {
            return Err(Error::Dimension("flat parameter vector too long".into()));
        }
        Ok(())
    }

    pub fn num_params(&mut self) -> Result<usize> {
        Ok(self.tensors_mut()?.iter().map(|(t, _)| t.len()).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = TrainConfig {
            n: 8,
            p: 4,
            ..TrainConfig::default()
        };
        assert_eq!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 3).unwrap());
        assert_ne!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 4).unwrap());
    }

    #[test]
    fn retention_statistics_at_init() {
        let cfg = TrainConfig {
            depth: 1,
            n: 20000,
            p: 1,
            ..TrainConfig::default()
        };
        let model = init_model(&cfg, 1).unwrap();
        let rho = model.blocks[0].ssm.as_rotation().unwrap().rho();
        let mean = rho.iter().sum::<f64>() / rho.len() as f64;
        // E[tanh(X)], X ~ N(1.5, 0.25²), by midpoint quadrature
        let steps = 20000;
        let expected: f64 = (0..steps)
            .map(|i| {
                let z = -8.0 + 16.0 * (i as f64 + 0.5) / steps as f64;
                let w = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * 16.0 / steps as f64;
                w * (1.5 + 0.25 * z).tanh()
            })
            .sum();
        assert!((mean - expected).abs() < 0.01, "mean {mean} vs {expected}");
        assert!(rho.iter().all(|r| r.abs() < 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            depth: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let odd = TrainConfig {
            n: 7,
            ..TrainConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn flat_parameters_round_trip() {
        let cfg = TrainConfig {
            n: 4,
            p: 3,
            classes: 2,
            ..TrainConfig::default()
        };
        let mut model = init_model(&cfg, 0).unwrap();
        let flat = model.flat_params().unwrap();
        let mask = model.decay_mask().unwrap();
        assert_eq!(flat.len(), mask.len());
        let mut other = init_model(&cfg, 9).unwrap();
        other.set_flat_params(&flat).unwrap();
        assert_eq!(other, model);
    }
}
