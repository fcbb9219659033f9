//! Reverse-mode gradients, Adam, the minibatch training loop and the
//! finite-difference gradient audit.

mod adam;
mod backward;
mod gradcheck;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Ablation, LossComponents, LossWeights, VideoLabel};
use crate::model::{FeatureSequence, ModelDims, ModelParams};

pub use adam::{adam_step, adam_update, AdamState};
pub use backward::{backward, evaluate_loss, BatchOutcome, GradientSet};
pub use gradcheck::{compare_gradients, finite_difference_check, GradCheckReport, TensorCheck};

/// One weakly labelled training video.
#[derive(Debug, Clone)]
pub struct TrainingVideo {
    pub features: FeatureSequence,
    pub label: VideoLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::RGB,
            ablation: Ablation::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train config", "learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be >= 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid("train config", format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("train config", "epsilon must be > 0"));
        }
        self.weights.validate()
    }
}

/// Loss values after one optimizer step's forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
}

pub const HISTORY_HEADER: &str = "step,L_cls,L_d,L_h,L_s,total";

/// Writes the loss history as CSV, one row per step.
pub fn write_history(history: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        let c = &r.components;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, c.classification, c.diversity, c.homogeneity, c.sparsity, r.total
        )?;
    }
    Ok(())
}

/// Trains a freshly initialized model. Parameters are seeded from
/// `config.seed`; minibatches are drawn from a reshuffled pass over the data.
pub fn train(dataset: &[TrainingVideo], dims: ModelDims, config: &TrainConfig) -> Result<TrainOutcome> {
    let params = ModelParams::init(dims, config.seed)?;
    train_from(dataset, params, config)
}

/// Continues training from the given parameters.
pub fn train_from(
    dataset: &[TrainingVideo],
    mut params: ModelParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set", "no videos"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let batch_size = config.batch_size.min(dataset.len());
    let mut state = AdamState::for_params(&params);
    let mut history = Vec::with_capacity(config.steps);
    let mut batch: Vec<&TrainingVideo> = Vec::with_capacity(batch_size);

    for step in 0..config.steps {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let outcome = backward(&batch, &params, config)?;
        adam_step(&mut params, &outcome.gradients, &mut state, config);
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite {
                tensor: format!("{name} after step {step}"),
            });
        }
        history.push(LossRecord {
            step,
            components: outcome.components,
            total: outcome.total,
        });
        if step % 500 == 0 {
            log::debug!("step {step}: total loss {:.6}", outcome.total);
        }
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use rand::Rng;

    fn toy_dataset(n: usize, seed: u64) -> Vec<TrainingVideo> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % 2;
                let l = 5 + i % 3;
                let x = Matrix::from_fn(l, 4, |t, d| {
                    let signal = if t == 2 && d == class { 2.0 } else { 0.0 };
                    signal + rng.random_range(-0.2..0.2)
                });
                TrainingVideo {
                    features: FeatureSequence::new(x).unwrap(),
                    label: VideoLabel::from_classes(2, &[class]).unwrap(),
                }
            })
            .collect()
    }

    fn toy_dims() -> ModelDims {
        ModelDims {
            input_dim: 4,
            embed_dim: 8,
            classes: 2,
            templates: 3,
            key_reduction: 2,
            bottleneck: 4,
            kernel: 3,
        }
    }

    fn toy_config(steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            steps,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_reproducible() {
        let data = toy_dataset(10, 1);
        let a = train(&data, toy_dims(), &toy_config(30)).unwrap();
        let b = train(&data, toy_dims(), &toy_config(30)).unwrap();
        assert_eq!(a.params, b.params);
        let bits = |h: &[LossRecord]| h.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy_dataset(12, 2);
        let out = train(&data, toy_dims(), &toy_config(300)).unwrap();
        let first: f64 = out.history[..10].iter().map(|r| r.total).sum();
        let last: f64 = out.history[out.history.len() - 10..].iter().map(|r| r.total).sum();
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn ablation_flags_shape_the_history() {
        let data = toy_dataset(8, 4);
        let off = TrainConfig {
            ablation: Ablation::BASELINE,
            ..toy_config(20)
        };
        let on = train(&data, toy_dims(), &toy_config(20)).unwrap();
        let off = train(&data, toy_dims(), &off).unwrap();
        assert!(off.history.iter().all(|r| r.total == r.components.classification));
        assert_ne!(
            on.history.iter().map(|r| r.total).collect::<Vec<_>>(),
            off.history.iter().map(|r| r.total).collect::<Vec<_>>()
        );
    }

    #[test]
    fn history_csv_layout() {
        let data = toy_dataset(4, 5);
        let out = train(&data, toy_dims(), &toy_config(3)).unwrap();
        let mut buf = Vec::new();
        write_history(&out.history, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
        assert_eq!(lines[3].split(',').count(), 6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(train(&[], toy_dims(), &TrainConfig::default()).is_err());
    }
}
