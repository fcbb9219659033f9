//! Training objective: video classification cross-entropy plus the
//! diversity, homogeneity and sparsity regularizers on the memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{frobenius_norm, l1_norm, l2_norm, matmul_nt, softmax, Matrix};

/// Predictions are clamped to this floor before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Weights of the auxiliary losses in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Diversity weight.
    pub alpha: f64,
    /// Homogeneity weight.
    pub beta: f64,
    /// Sparsity weight.
    pub gamma: f64,
}

impl LossWeights {
    /// RGB-stream weights (α = 0.01, β = 0.02, γ = 0.05).
    pub const RGB: LossWeights = LossWeights {
        alpha: 0.01,
        beta: 0.02,
        gamma: 0.05,
    };
    /// Flow-stream weights (γ = 0.03).
    pub const FLOW: LossWeights = LossWeights {
        alpha: 0.01,
        beta: 0.02,
        gamma: 0.03,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(
                    "loss weights",
                    format!("{name} = {v} must be finite and nonnegative"),
                ));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::RGB
    }
}

/// Which objective terms and modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub diversity: bool,
    pub homogeneity: bool,
    pub sparsity: bool,
    pub self_attention: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        diversity: true,
        homogeneity: true,
        sparsity: true,
        self_attention: true,
    };
    /// Classification loss only, no self-attention.
    pub const BASELINE: Ablation = Ablation {
        diversity: false,
        homogeneity: false,
        sparsity: false,
        self_attention: false,
    };

    /// The six loss/self-attention combinations of the ablation grid,
    /// labelled by their active components.
    pub fn grid() -> [(&'static str, Ablation); 6] {
        let row = |s, d, h, sa| Ablation {
            diversity: d,
            homogeneity: h,
            sparsity: s,
            self_attention: sa,
        };
        [
            ("cls", row(false, false, false, false)),
            ("cls+Ls", row(true, false, false, false)),
            ("cls+Ls+Ld", row(true, true, false, false)),
            ("cls+Ls+Lh", row(true, false, true, false)),
            ("cls+Ls+Ld+Lh", row(true, true, true, false)),
            ("cls+Ls+Ld+Lh+SA", row(true, true, true, true)),
        ]
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

/// An ℓ1-normalized multi-hot video label.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLabel(Vec<f64>);

impl VideoLabel {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::invalid("video label", "no classes"));
        }
        if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("video label", "entries must lie in [0, 1]"));
        }
        let sum: f64 = y.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("video label", format!("sums to {sum}, not 1")));
        }
        Ok(Self(y))
    }

    /// Uniform distribution over the given classes.
    pub fn from_classes(classes: usize, present: &[usize]) -> Result<Self> {
        let mut y = vec![0.0; classes];
        for &c in present {
            if c >= classes {
                return Err(Error::invalid(
                    "video label",
                    format!("class {c} out of range for {classes} classes"),
                ));
            }
            y[c] = 1.0;
        }
        let n = y.iter().filter(|&&v| v > 0.0).count();
        if n == 0 {
            return Err(Error::invalid("video label", "no classes present"));
        }
        for v in &mut y {
            *v /= n as f64;
        }
        Self::new(y)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Classes with nonzero mass.
    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Values of the four loss terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub classification: f64,
    pub diversity: f64,
    pub homogeneity: f64,
    pub sparsity: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.classification, self.diversity, self.homogeneity, self.sparsity]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean cross-entropy between predictions and labels.
pub fn classification_loss(y_hat: &[&[f64]], y: &[&[f64]]) -> Result<f64> {
    if y_hat.is_empty() {
        return Err(Error::EmptyBatch("classification_loss"));
    }
    if y_hat.len() != y.len() {
        return Err(Error::shape(
            "classification_loss",
            format!("{} predictions vs {} labels", y_hat.len(), y.len()),
        ));
    }
    let mut total = 0.0;
    for (p, t) in y_hat.iter().zip(y) {
        if p.len() != t.len() {
            return Err(Error::shape(
                "classification_loss",
                format!("prediction has {} classes, label {}", p.len(), t.len()),
            ));
        }
        total -= p
            .iter()
            .zip(t.iter())
            .map(|(&pj, &tj)| tj * pj.max(LOG_FLOOR).ln())
            .sum::<f64>();
    }
    Ok(total / y_hat.len() as f64)
}

/// `M Mᵀ − I`, shared by the diversity loss and its gradient.
pub(crate) fn gram_residual(m: &Matrix) -> Matrix {
    let mut g = matmul_nt(m, m).expect("M Mᵀ is always conformable");
    for k in 0..g.rows() {
        g[(k, k)] -= 1.0;
    }
    g
}

/// `‖M Mᵀ − I‖_F`.
pub fn diversity_loss(m: &Matrix) -> f64 {
    frobenius_norm(&gram_residual(m))
}

/// Softmax over templates of the time-summed similarities.
pub fn occurrence_probability(s: &Matrix) -> Vec<f64> {
    softmax(&s.column_sums())
}

/// Euclidean norm of the batch-mean occurrence distribution.
pub fn homogeneity_loss(p: &[&[f64]]) -> Result<f64> {
    Ok(l2_norm(&batch_mean(p, "homogeneity_loss")?))
}

pub(crate) fn batch_mean(p: &[&[f64]], op: &'static str) -> Result<Vec<f64>> {
    let first = p.first().ok_or(Error::EmptyBatch(op))?;
    let mut mean = vec![0.0; first.len()];
    for pi in p {
        if pi.len() != mean.len() {
            return Err(Error::shape(op, "distributions of unequal length"));
        }
        for (m, v) in mean.iter_mut().zip(pi.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= p.len() as f64;
    }
    Ok(mean)
}

/// Batch mean of the per-video attention ℓ1 norms (not normalized by length).
pub fn sparsity_loss(a: &[&[f64]]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyBatch("sparsity_loss"));
    }
    Ok(a.iter().map(|ai| l1_norm(ai)).sum::<f64>() / a.len() as f64)
}

/// Weighted objective; disabled terms contribute exactly zero.
pub fn total_loss(c: &LossComponents, w: &LossWeights, ablation: &Ablation) -> f64 {
    let mut total = c.classification;
    if ablation.diversity {
        total += w.alpha * c.diversity;
    }
    if ablation.homogeneity {
        total += w.beta * c.homogeneity;
    }
    if ablation.sparsity {
        total += w.gamma * c.sparsity;
    }
    total
}
