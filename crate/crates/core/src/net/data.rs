use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Labelled sequences, each stored as `features × length`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<DMatrix<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<DMatrix<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} sequences but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {bad} with {classes} classes")));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.shape() != first.shape()) {
                return Err(Error::Dimension("sequences differ in shape".into()));
            }
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.ncols())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Deterministic random subset of `count` samples.
    pub fn sample(&self, count: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(count.min(self.len()));
        self.subset(&idx)
    }
}

/// Tone-burst classification: each sequence carries a sinusoidal burst
/// whose frequency encodes the class, starting after a random delay and
/// buried in white noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub len: usize,
    pub classes: usize,
    /// Burst length as a fraction of the sequence.
    pub burst: f64,
    pub noise: f64,
    /// Lowest and highest class frequency, in units of π.
    pub band: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 1024,
            len: 64,
            classes: 4,
            burst: 0.25,
            noise: 0.5,
            band: (0.08, 0.68),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Angular frequency of class `c`.
    pub fn frequency(&self, c: usize) -> f64 {
        let span = (self.classes.max(2) - 1) as f64;
        let (lo, hi) = self.band;
        PI * (lo + (hi - lo) * c as f64 / span)
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.len == 0 || spec.classes < 2 || !(spec.burst > 0.0 && spec.burst <= 1.0) {
        return Err(Error::Invalid(
            "synthetic dataset needs len >= 1, >= 2 classes and burst in (0, 1]".into(),
        ));
    }
    if !(0.0 <= spec.band.0 && spec.band.0 < spec.band.1 && spec.band.1 <= 1.0) {
        return Err(Error::Invalid(format!(
            "frequency band {:?} must satisfy 0 <= lo < hi <= 1",
            spec.band
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let burst = ((spec.len as f64 * spec.burst).round() as usize).clamp(1, spec.len);
    let max_delay = spec.len - burst;
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let c = rng.random_range(0..spec.classes);
        let delay = rng.random_range(0..=max_delay);
        let phase = rng.random_range(0.0..2.0 * PI);
        let w = spec.frequency(c);
        let x = DMatrix::from_fn(1, spec.len, |_, t| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let signal = if t >= delay && t < delay + burst {
                (w * (t - delay) as f64 + phase).sin()
            } else {
                0.0
            };
            signal + spec.noise * noise
        });
        inputs.push(x);
        labels.push(c);
    }
    Dataset::new(inputs, labels, spec.classes)
}
