//! Central finite-difference audit of the analytic gradients.

use std::fmt;

use super::{backward, evaluate_loss, GradientSet, TrainConfig, TrainingVideo};
use crate::error::{Error, Result};
use crate::model::{ModelParams, TENSOR_NAMES};

/// Entries whose gradient is tiny relative to the rest of their tensor are
/// compared against this fraction of the tensor's largest magnitude instead
/// of their own, so round-off on near-zero entries does not dominate.
const RELATIVE_FLOOR: f64 = 1e-3;
const ABSOLUTE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub entries: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step_size: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tensor\tentries\tmax_abs_error\tmax_rel_error")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{}\t{}\t{:.3e}\t{:.3e}",
                t.name, t.entries, t.max_abs_error, t.max_rel_error
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (h = {:e}, tolerance {:e}): {}",
            self.max_rel_error(),
            self.step_size,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares `analytic` against central differences of the total loss with
/// step `h`, entry by entry.
pub fn compare_gradients(
    analytic: &GradientSet,
    params: &ModelParams,
    batch: &[&TrainingVideo],
    config: &TrainConfig,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step", format!("h = {h} must be > 0")));
    }
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
    for (ti, name) in TENSOR_NAMES.iter().enumerate() {
        let len = params.tensors()[ti].len();
        let mut numeric = Vec::with_capacity(len);
        for j in 0..len {
            let orig = probe.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + h;
            let (_, plus) = evaluate_loss(batch, &probe, config)?;
            probe.tensors_mut()[ti][j] = orig - h;
            let (_, minus) = evaluate_loss(batch, &probe, config)?;
            probe.tensors_mut()[ti][j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let exact = analytic.tensors()[ti];
        let scale = numeric
            .iter()
            .chain(exact.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (RELATIVE_FLOOR * scale).max(ABSOLUTE_FLOOR);
        let mut max_abs_error = 0.0f64;
        let mut max_rel_error = 0.0f64;
        for (a, n) in exact.iter().zip(&numeric) {
            let err = (a - n).abs();
            max_abs_error = max_abs_error.max(err);
            max_rel_error = max_rel_error.max(err / a.abs().max(n.abs()).max(floor));
        }
        tensors.push(TensorCheck {
            name,
            entries: len,
            max_abs_error,
            max_rel_error,
        });
    }
    Ok(GradCheckReport {
        step_size: h,
        tolerance,
        tensors,
    })
}

/// Runs [`backward`] and audits its gradients with central differences.
pub fn finite_difference_check(
    params: &ModelParams,
    batch: &[&TrainingVideo],
    config: &TrainConfig,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let outcome = backward(batch, params, config)?;
    compare_gradients(&outcome.gradients, params, batch, config, h, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{Ablation, VideoLabel};
    use crate::model::{FeatureSequence, ModelDims};
    use crate::numerics::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(dims: ModelDims, seed: u64, videos: usize) -> (ModelParams, Vec<TrainingVideo>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(dims, seed).unwrap();
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let data = (0..videos)
            .map(|i| TrainingVideo {
                features: FeatureSequence::new(Matrix::from_fn(4 + i, dims.input_dim, |_, _| {
                    rng.random_range(-1.0..1.0)
                }))
                .unwrap(),
                label: VideoLabel::from_classes(dims.classes, &[i % dims.classes]).unwrap(),
            })
            .collect();
        (p, data)
    }

    #[test]
    fn affine_slice_agrees_closely() {
        // Kernel 1 with every auxiliary term off and self-attention bypassed:
        // only the classification path is active.
        let dims = ModelDims {
            input_dim: 3,
            embed_dim: 4,
            classes: 2,
            templates: 2,
            key_reduction: 2,
            bottleneck: 2,
            kernel: 1,
        };
        let (mut p, data) = instance(dims, 7, 2);
        // Positive embedding and hidden biases keep every ReLU in its linear regime.
        p.b_emb = vec![1.5; 4];
        p.b_val1 = vec![1.5; 2];
        let cfg = TrainConfig {
            ablation: Ablation::BASELINE,
            ..TrainConfig::default()
        };
        let batch: Vec<&TrainingVideo> = data.iter().collect();
        let report = finite_difference_check(&p, &batch, &cfg, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let dims = ModelDims {
            input_dim: 8,
            embed_dim: 4,
            classes: 2,
            templates: 3,
            key_reduction: 2,
            bottleneck: 2,
            kernel: 3,
        };
        let (p, data) = instance(dims, 11, 2);
        let batch: Vec<&TrainingVideo> = data.iter().collect();
        let cfg = TrainConfig::default();
        let mut grads = backward(&batch, &p, &cfg).unwrap().gradients;
        grads.0.w_key[(1, 0)] += 1.0;
        let report = compare_gradients(&grads, &p, &batch, &cfg, 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        let bad = report.tensors.iter().find(|t| t.name == "w_key").unwrap();
        assert!(bad.max_rel_error > 1e-4);
        assert!(report
            .tensors
            .iter()
            .filter(|t| t.name != "w_key")
            .all(|t| t.max_rel_error < 1e-4));
    }

    #[test]
    fn full_model_agrees() {
        let dims = ModelDims {
            input_dim: 8,
            embed_dim: 4,
            classes: 2,
            templates: 3,
            key_reduction: 2,
            bottleneck: 2,
            kernel: 3,
        };
        let (p, data) = instance(dims, 5, 3);
        let batch: Vec<&TrainingVideo> = data.iter().collect();
        let report = finite_difference_check(&p, &batch, &TrainConfig::default(), 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn step_must_be_positive() {
        let dims = ModelDims {
            input_dim: 2,
            embed_dim: 2,
            classes: 2,
            templates: 2,
            key_reduction: 1,
            bottleneck: 1,
            kernel: 1,
        };
        let (p, data) = instance(dims, 1, 1);
        let batch: Vec<&TrainingVideo> = data.iter().collect();
        assert!(finite_difference_check(&p, &batch, &TrainConfig::default(), 0.0, 1e-4).is_err());
    }
}
