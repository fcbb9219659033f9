//! Hand-derived reverse pass through the forward model and the objective.
//!
//! The batch is processed in two sweeps: a forward sweep producing every
//! video's trace (the homogeneity loss couples videos through the batch-mean
//! occurrence distribution), then a per-video reverse sweep. Memory keys and
//! values are shared, so their gradients are summed over videos before being
//! pushed through the key/value encoders into `M`, where the diversity term
//! adds its own contribution.

use rayon::prelude::*;

use super::{TrainConfig, TrainingVideo};
use crate::error::{Error, Result};
use crate::losses::{
    batch_mean, classification_loss, diversity_loss, gram_residual, homogeneity_loss,
    occurrence_probability, sparsity_loss, total_loss, LossComponents, LOG_FLOOR,
};
use crate::model::{
    argmax_rows, encode_memory, forward_with_memory, ForwardTrace, MemoryEncoding, ModelParams,
    TENSOR_NAMES,
};
use crate::numerics::{l2_norm, matmul, matmul_nt, matmul_tn, Matrix};

/// Gradient of the total loss, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(ModelParams::zeros(params.dims).expect("dims already validated"))
    }

    pub fn tensors(&self) -> [&[f64]; 11] {
        self.0.tensors()
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 11] {
        self.0.tensors_mut()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub components: LossComponents,
    pub total: f64,
    pub gradients: GradientSet,
}

/// Per-video gradients of the non-shared parameters plus the gradients
/// reaching the shared memory keys and values.
struct VideoGrads {
    w_emb: Matrix,
    b_emb: Vec<f64>,
    w_query: Matrix,
    b_query: Vec<f64>,
    keys: Matrix,
    values: Matrix,
}

/// Upstream gradients entering one video's reverse pass.
struct Upstream<'a> {
    /// d total / d pooled logits.
    pooled: Vec<f64>,
    /// d total / d S(t, k), identical for every t (from the homogeneity term).
    per_template: Vec<f64>,
    /// d total / d a(t), identical for every t (from the sparsity term).
    per_segment: f64,
    trace: &'a ForwardTrace,
}

fn forward_batch(
    batch: &[&TrainingVideo],
    params: &ModelParams,
    memory: &MemoryEncoding,
    use_self_attention: bool,
) -> Result<Vec<ForwardTrace>> {
    batch
        .par_iter()
        .map(|v| forward_with_memory(&v.features, params, memory, use_self_attention))
        .collect()
}

fn components(
    batch: &[&TrainingVideo],
    traces: &[ForwardTrace],
    params: &ModelParams,
) -> Result<(LossComponents, Vec<Vec<f64>>)> {
    let y_hat: Vec<&[f64]> = traces.iter().map(|t| t.y_hat.as_slice()).collect();
    let labels: Vec<&[f64]> = batch.iter().map(|v| v.label.as_slice()).collect();
    let occurrence: Vec<Vec<f64>> = traces.iter().map(|t| occurrence_probability(&t.s)).collect();
    let occ_refs: Vec<&[f64]> = occurrence.iter().map(Vec::as_slice).collect();
    let attn: Vec<&[f64]> = traces.iter().map(|t| t.a.as_slice()).collect();
    let c = LossComponents {
        classification: classification_loss(&y_hat, &labels)?,
        diversity: diversity_loss(&params.memory.templates),
        homogeneity: homogeneity_loss(&occ_refs)?,
        sparsity: sparsity_loss(&attn)?,
    };
    Ok((c, occurrence))
}

fn non_finite_error(params: &ModelParams, traces: &[ForwardTrace]) -> Error {
    if let Some(name) = params.first_non_finite() {
        return Error::NonFinite {
            tensor: format!("parameter {name}"),
        };
    }
    for (i, t) in traces.iter().enumerate() {
        let checks: [(&str, bool); 7] = [
            ("x_e", t.x_e.is_finite()),
            ("q", t.q.is_finite()),
            ("x_s", t.x_s.is_finite()),
            ("s", t.s.is_finite()),
            ("v_o", t.v_o.is_finite()),
            ("c_seg", t.c_seg.is_finite()),
            ("y_hat", t.y_hat.iter().all(|v| v.is_finite())),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Error::NonFinite {
                tensor: format!("video {i} activation {name}"),
            };
        }
    }
    Error::NonFinite {
        tensor: "loss".into(),
    }
}

/// Loss components and total without gradients.
pub fn evaluate_loss(
    batch: &[&TrainingVideo],
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<(LossComponents, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("evaluate_loss"));
    }
    let memory = encode_memory(params)?;
    let traces = forward_batch(batch, params, &memory, config.ablation.self_attention)?;
    let (c, _) = components(batch, &traces, params)?;
    Ok((c, total_loss(&c, &config.weights, &config.ablation)))
}

/// Loss components, weighted total and exact gradients for one minibatch.
pub fn backward(
    batch: &[&TrainingVideo],
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("backward"));
    }
    let ablation = config.ablation;
    let weights = config.weights;
    let n = batch.len() as f64;

    let memory = encode_memory(params)?;
    let traces = forward_batch(batch, params, &memory, ablation.self_attention)?;
    let (comp, occurrence) = components(batch, &traces, params)?;
    let total = total_loss(&comp, &weights, &ablation);
    if !total.is_finite() || !comp.is_finite() {
        return Err(non_finite_error(params, &traces));
    }

    // d L_h / d p_i = β p̄ / (‖p̄‖ B)
    let homogeneity_grad = if ablation.homogeneity && weights.beta != 0.0 {
        let refs: Vec<&[f64]> = occurrence.iter().map(Vec::as_slice).collect();
        let mean = batch_mean(&refs, "backward")?;
        let norm = l2_norm(&mean);
        Some(
            mean.iter()
                .map(|m| weights.beta * m / (norm * n))
                .collect::<Vec<f64>>(),
        )
    } else {
        None
    };
    let sparsity_grad = if ablation.sparsity {
        weights.gamma / n
    } else {
        0.0
    };

    let upstream: Vec<Upstream> = batch
        .iter()
        .zip(&traces)
        .zip(&occurrence)
        .map(|((video, trace), p)| {
            // Cross-entropy through the clamped log, then the softmax.
            let y = video.label.as_slice();
            let d_yhat: Vec<f64> = trace
                .y_hat
                .iter()
                .zip(y)
                .map(|(&yh, &yj)| if yh > LOG_FLOOR { -yj / (yh * n) } else { 0.0 })
                .collect();
            let pooled = softmax_backward(&trace.y_hat, &d_yhat);
            let per_template = match &homogeneity_grad {
                Some(dp) => softmax_backward(p, dp),
                None => vec![0.0; p.len()],
            };
            Upstream {
                pooled,
                per_template,
                per_segment: sparsity_grad,
                trace,
            }
        })
        .collect();

    let per_video: Vec<VideoGrads> = upstream
        .par_iter()
        .map(|u| video_backward(u, params, ablation.self_attention))
        .collect::<Result<_>>()?;

    // Ordered reduction keeps results bit-reproducible under any thread count.
    let mut grads = GradientSet::zeros_like(params);
    let g = &mut grads.0;
    let mut d_keys = Matrix::zeros(memory.keys.rows(), memory.keys.cols());
    let mut d_values = Matrix::zeros(memory.values.rows(), memory.values.cols());
    for v in &per_video {
        g.w_emb.add_assign(&v.w_emb)?;
        add_into(&mut g.b_emb, &v.b_emb);
        g.w_query.add_assign(&v.w_query)?;
        add_into(&mut g.b_query, &v.b_query);
        d_keys.add_assign(&v.keys)?;
        d_values.add_assign(&v.values)?;
    }

    memory_backward(params, &memory, &d_keys, &d_values, g)?;

    if ablation.diversity && weights.alpha != 0.0 {
        let m = &params.memory.templates;
        let residual = gram_residual(m);
        let norm = crate::numerics::frobenius_norm(&residual);
        if norm > 0.0 {
            let d_m = matmul(&residual, m)?.scale(2.0 * weights.alpha / norm);
            g.memory.templates.add_assign(&d_m)?;
        }
    }

    if let Some(i) = grads.tensors().iter().position(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {}", TENSOR_NAMES[i]),
        });
    }

    Ok(BatchOutcome {
        components: comp,
        total,
        gradients: grads,
    })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Vector-Jacobian product of `p = softmax(z)`.
fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

fn video_backward(u: &Upstream, params: &ModelParams, use_self_attention: bool) -> Result<VideoGrads> {
    let tr = u.trace;
    let l = tr.len();
    let f_dim = params.dims.embed_dim;
    let classes = params.dims.classes;
    let inv_l = 1.0 / l as f64;

    // pooled(c) = 1/l Σ_t a(t) C(t, c)
    let mut d_c = Matrix::zeros(l, classes);
    let mut d_a = vec![u.per_segment; l];
    for t in 0..l {
        let c_row = tr.c_seg.row(t);
        let mut acc = 0.0;
        for c in 0..classes {
            d_c[(t, c)] = u.pooled[c] * tr.a[t] * inv_l;
            acc += u.pooled[c] * c_row[c];
        }
        d_a[t] += acc * inv_l;
    }

    // a(t) = max_k S(t, k), routed through the first maximizer.
    let mut d_s = Matrix::from_fn(l, u.per_template.len(), |_, k| u.per_template[k]);
    for (t, k) in argmax_rows(&tr.s).into_iter().enumerate() {
        d_s[(t, k)] += d_a[t];
    }

    // C(t, c) = Σ_f X_s(t, f) V_O(t, c·F + f)
    let mut d_xs = Matrix::zeros(l, f_dim);
    let mut d_vo = Matrix::zeros(l, classes * f_dim);
    for t in 0..l {
        let xs = tr.x_s.row(t);
        let vo = tr.v_o.row(t);
        for c in 0..classes {
            let g = d_c[(t, c)];
            if g == 0.0 {
                continue;
            }
            let block = c * f_dim..(c + 1) * f_dim;
            for (f, col) in block.clone().enumerate() {
                d_xs[(t, f)] += g * vo[col];
            }
            for (f, col) in block.enumerate() {
                d_vo[(t, col)] = g * xs[f];
            }
        }
    }

    // V_O = S V_M
    d_s.add_assign(&matmul_nt(&d_vo, &tr.v_m)?)?;
    let d_values = matmul_tn(&tr.s, &d_vo)?;

    // S = sigmoid(Q K_Mᵀ / √d)
    let scale = 1.0 / (tr.q.cols() as f64).sqrt();
    let d_logits = Matrix::from_fn(l, tr.s.cols(), |t, k| {
        let s = tr.s[(t, k)];
        d_s[(t, k)] * s * (1.0 - s) * scale
    });
    let mut d_q = matmul(&d_logits, &tr.k_m)?;
    let d_keys = matmul_tn(&d_logits, &tr.q)?;

    // X_s = (A + I) X_e, A = softmax_rows(Q Qᵀ / √d)
    let mut d_xe = d_xs.clone();
    if use_self_attention {
        let attn = tr
            .a_self
            .as_ref()
            .ok_or_else(|| Error::invalid("trace", "self-attention weights missing"))?;
        d_xe.add_assign(&matmul_tn(attn, &d_xs)?)?;
        let d_attn = matmul_nt(&d_xs, &tr.x_e)?;
        let mut d_z = Matrix::zeros(l, l);
        for t in 0..l {
            let row = softmax_backward(attn.row(t), d_attn.row(t));
            d_z.row_mut(t).copy_from_slice(&row);
        }
        let sym = d_z.add(&d_z.transpose())?.scale(scale);
        d_q.add_assign(&matmul(&sym, &tr.q)?)?;
    }

    // Q = X_e W_Q + b_Q
    let w_query = matmul_tn(&tr.x_e, &d_q)?;
    let b_query = d_q.column_sums();
    d_xe.add_assign(&matmul_nt(&d_q, &params.w_query)?)?;

    // X_e = relu(conv(X) + b); X_e > 0 exactly where the pre-activation is positive.
    let d_pre = Matrix::from_fn(l, f_dim, |t, f| {
        if tr.x_e[(t, f)] > 0.0 {
            d_xe[(t, f)]
        } else {
            0.0
        }
    });
    let w_emb = matmul_tn(&tr.input_cols, &d_pre)?;
    let b_emb = d_pre.column_sums();

    Ok(VideoGrads {
        w_emb,
        b_emb,
        w_query,
        b_query,
        keys: d_keys,
        values: d_values,
    })
}

/// Pushes key/value gradients through both encoders into the memory.
fn memory_backward(
    params: &ModelParams,
    memory: &MemoryEncoding,
    d_keys: &Matrix,
    d_values: &Matrix,
    g: &mut ModelParams,
) -> Result<()> {
    let m = &params.memory.templates;

    // K_M = M W_K + b_K
    g.w_key = matmul_tn(m, d_keys)?;
    g.b_key = d_keys.column_sums();
    let mut d_m = matmul_nt(d_keys, &params.w_key)?;

    // V_M = H W_V2 + b_V2, H = relu(M W_V1 + b_V1)
    g.w_val2 = matmul_tn(&memory.hidden, d_values)?;
    g.b_val2 = d_values.column_sums();
    let d_hidden = matmul_nt(d_values, &params.w_val2)?;
    let d_hidden_pre = Matrix::from_fn(d_hidden.rows(), d_hidden.cols(), |k, h| {
        if memory.hidden[(k, h)] > 0.0 {
            d_hidden[(k, h)]
        } else {
            0.0
        }
    });
    g.w_val1 = matmul_tn(m, &d_hidden_pre)?;
    g.b_val1 = d_hidden_pre.column_sums();
    d_m.add_assign(&matmul_nt(&d_hidden_pre, &params.w_val1)?)?;

    g.memory.templates.add_assign(&d_m)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{Ablation, VideoLabel};
    use crate::model::{FeatureSequence, ModelDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 8,
            embed_dim: 4,
            classes: 2,
            templates: 3,
            key_reduction: 2,
            bottleneck: 2,
            kernel: 3,
        }
    }

    #[test]
    fn diversity_gradient_vanishes_at_orthonormal_memory() {
        let mut p = ModelParams::init(dims(), 1).unwrap();
        p.memory.templates = Matrix::from_fn(3, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let video = TrainingVideo {
            features: FeatureSequence::new(Matrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0)))
                .unwrap(),
            label: VideoLabel::from_classes(2, &[0]).unwrap(),
        };
        // Only the diversity term is weighted; everything else is switched off.
        let cfg = TrainConfig {
            weights: crate::losses::LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
            },
            ablation: Ablation {
                diversity: true,
                ..Ablation::BASELINE
            },
            ..TrainConfig::default()
        };
        let with = backward(&[&video], &p, &cfg).unwrap();
        let without = backward(
            &[&video],
            &p,
            &TrainConfig {
                ablation: Ablation::BASELINE,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(with.components.diversity, 0.0);
        assert_eq!(with.gradients, without.gradients);
    }

    #[test]
    fn perfect_prediction_has_no_classification_signal() {
        // Zero value encoder output except a large constant logit bias on class 1
        // saturates ŷ at class 1.
        let mut p = ModelParams::init(dims(), 4).unwrap();
        p.w_val2 = Matrix::zeros(2, 8);
        p.b_val2 = vec![0.0; 8];
        p.b_emb = vec![5.0; 4];
        p.w_emb = Matrix::zeros(24, 4);
        for f in 0..4 {
            p.b_val2[4 + f] = 40.0;
        }
        let video = TrainingVideo {
            features: FeatureSequence::new(Matrix::filled(6, 8, 0.3)).unwrap(),
            label: VideoLabel::from_classes(2, &[1]).unwrap(),
        };
        let cfg = TrainConfig {
            ablation: Ablation::BASELINE,
            ..TrainConfig::default()
        };
        let out = backward(&[&video], &p, &cfg).unwrap();
        assert!(out.components.classification < 1e-12);
        assert!(out.gradients.max_abs() < 1e-8, "{}", out.gradients.max_abs());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = ModelParams::init(dims(), 1).unwrap();
        assert!(matches!(
            backward(&[], &p, &TrainConfig::default()),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn non_finite_parameters_are_named() {
        let mut p = ModelParams::init(dims(), 1).unwrap();
        p.w_query[(0, 0)] = f64::NAN;
        let video = TrainingVideo {
            features: FeatureSequence::new(Matrix::filled(4, 8, 0.5)).unwrap(),
            label: VideoLabel::from_classes(2, &[0]).unwrap(),
        };
        match backward(&[&video], &p, &TrainConfig::default()) {
            Err(Error::NonFinite { tensor }) => assert!(tensor.contains("w_query"), "{tensor}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
