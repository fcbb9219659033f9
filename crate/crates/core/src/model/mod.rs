//! Forward pass of the action unit memory network.
//!
//! Per video the network computes
//!
//! ```text
//! X_e  = relu(conv1d(X) + b_emb)                 l × F
//! Q    = X_e W_Q + b_Q                           l × F/m
//! K_M  = M W_K + b_K                             K × F/m
//! V_M  = relu(M W_V1 + b_V1) W_V2 + b_V2         K × C·F
//! X_s  = (softmax_rows(Q Qᵀ / √(F/m)) + I) X_e   l × F
//! S    = sigmoid(Q K_Mᵀ / √(F/m))                l × K
//! V_O  = S V_M                                   l × C·F
//! C(t) = X_s(t) W_cls(t),  W_cls(t)[f, c] = V_O(t, c·F + f)
//! a(t) = max_k S(t, k)
//! ŷ    = softmax(1/l Σ_t a(t) C(t))
//! ```

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    matmul, matmul_nt, relu, sigmoid, softmax, softmax_rows, Matrix,
};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Input feature dimension `D`.
    pub input_dim: usize,
    /// Embedded feature dimension `F`.
    pub embed_dim: usize,
    /// Number of action classes `C`.
    pub classes: usize,
    /// Number of memory templates `K`.
    pub templates: usize,
    /// Key reduction factor `m`; keys and queries have `F / m` columns.
    pub key_reduction: usize,
    /// Hidden width of the two-layer value encoder.
    pub bottleneck: usize,
    /// Temporal convolution width, odd.
    pub kernel: usize,
}

impl ModelDims {
    /// Desk-scale defaults for a given input/class count: `F = 32`, `K = 7`,
    /// `m = 4`, bottleneck `F / 4`, kernel 3.
    pub fn new(input_dim: usize, classes: usize) -> Self {
        let embed_dim = 32;
        Self {
            input_dim,
            embed_dim,
            classes,
            templates: 7,
            key_reduction: 4,
            bottleneck: embed_dim / 4,
            kernel: 3,
        }
    }

    pub fn key_dim(&self) -> usize {
        self.embed_dim / self.key_reduction
    }

    pub fn value_dim(&self) -> usize {
        self.classes * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("classes", self.classes),
            ("templates", self.templates),
            ("key_reduction", self.key_reduction),
            ("bottleneck", self.bottleneck),
            ("kernel", self.kernel),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid("model dims", format!("{name} must be >= 1")));
            }
            if v > u32::MAX as usize {
                return Err(Error::invalid("model dims", format!("{name} exceeds u32")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.key_reduction) {
            return Err(Error::invalid(
                "model dims",
                format!(
                    "embed_dim {} not divisible by key_reduction {}",
                    self.embed_dim, self.key_reduction
                ),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(
                "model dims",
                format!("kernel {} must be odd", self.kernel),
            ));
        }
        Ok(())
    }
}

/// One stream of per-segment features, `l × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(Matrix);

impl FeatureSequence {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid("feature sequence", "zero segments"));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                tensor: "input features".into(),
            });
        }
        Ok(Self(features))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// The learnable template memory `M`, `K × F`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub templates: Matrix,
}

/// All learnable weights.
///
/// `w_emb` holds the temporal convolution as a `(kernel·D) × F` matrix:
/// row `j·D + d` is the weight of input channel `d` at tap `j`, where tap
/// `j` reads segment `t + j - kernel/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub w_emb: Matrix,
    pub b_emb: Vec<f64>,
    pub memory: MemoryBank,
    pub w_key: Matrix,
    pub b_key: Vec<f64>,
    pub w_val1: Matrix,
    pub b_val1: Vec<f64>,
    pub w_val2: Matrix,
    pub b_val2: Vec<f64>,
    pub w_query: Matrix,
    pub b_query: Vec<f64>,
}

/// Names of the parameter tensors in checkpoint and gradient order.
pub const TENSOR_NAMES: [&str; 11] = [
    "w_emb", "b_emb", "memory", "w_key", "b_key", "w_val1", "b_val1", "w_val2", "b_val2",
    "w_query", "b_query",
];

impl ModelParams {
    /// All-zero parameters of the right shapes.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let f = dims.embed_dim;
        Ok(Self {
            dims,
            w_emb: Matrix::zeros(dims.kernel * dims.input_dim, f),
            b_emb: vec![0.0; f],
            memory: MemoryBank {
                templates: Matrix::zeros(dims.templates, f),
            },
            w_key: Matrix::zeros(f, dims.key_dim()),
            b_key: vec![0.0; dims.key_dim()],
            w_val1: Matrix::zeros(f, dims.bottleneck),
            b_val1: vec![0.0; dims.bottleneck],
            w_val2: Matrix::zeros(dims.bottleneck, dims.value_dim()),
            b_val2: vec![0.0; dims.value_dim()],
            w_query: Matrix::zeros(f, dims.key_dim()),
            b_query: vec![0.0; dims.key_dim()],
        })
    }

    /// Random initialization: memory rows from `N(0, 1/F)`, affine weights
    /// uniform in `±1/√fan_in`, biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dims.embed_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in p.memory.templates.data_mut() {
            *v = normal.sample(&mut rng);
        }
        for w in [
            &mut p.w_emb,
            &mut p.w_key,
            &mut p.w_val1,
            &mut p.w_val2,
            &mut p.w_query,
        ] {
            let bound = 1.0 / (w.rows() as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn tensors(&self) -> [&[f64]; 11] {
        [
            self.w_emb.data(),
            &self.b_emb,
            self.memory.templates.data(),
            self.w_key.data(),
            &self.b_key,
            self.w_val1.data(),
            &self.b_val1,
            self.w_val2.data(),
            &self.b_val2,
            self.w_query.data(),
            &self.b_query,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.w_emb.data_mut(),
            &mut self.b_emb,
            self.memory.templates.data_mut(),
            self.w_key.data_mut(),
            &mut self.b_key,
            self.w_val1.data_mut(),
            &mut self.b_val1,
            self.w_val2.data_mut(),
            &mut self.b_val2,
            self.w_query.data_mut(),
            &mut self.b_query,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        TENSOR_NAMES
            .iter()
            .zip(self.tensors())
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| *n)
    }
}

/// Keys, values and the value encoder's hidden activations for the current
/// memory. Shared by every video in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEncoding {
    pub keys: Matrix,
    pub values: Matrix,
    pub hidden: Matrix,
}

/// Every intermediate activation of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Zero-padded im2col view of the input, `l × (kernel·D)`.
    pub input_cols: Matrix,
    pub x_e: Matrix,
    pub q: Matrix,
    pub k_m: Matrix,
    pub v_m: Matrix,
    /// Self-attention weights; `None` when the module is bypassed.
    pub a_self: Option<Matrix>,
    pub x_s: Matrix,
    pub s: Matrix,
    pub v_o: Matrix,
    pub a: Vec<f64>,
    pub c_seg: Matrix,
    /// Attention-pooled class logits before the softmax.
    pub pooled: Vec<f64>,
    pub y_hat: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.x_e.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x_e.rows() == 0
    }
}

/// Rearranges `x` so that the temporal convolution becomes one product with
/// `w_emb`. Out-of-range taps read zeros.
pub fn im2col(x: &Matrix, kernel: usize) -> Matrix {
    let (l, d) = x.shape();
    let half = (kernel / 2) as isize;
    let mut cols = Matrix::zeros(l, kernel * d);
    for t in 0..l {
        for j in 0..kernel {
            let src = t as isize + j as isize - half;
            if src < 0 || src >= l as isize {
                continue;
            }
            cols.row_mut(t)[j * d..(j + 1) * d].copy_from_slice(x.row(src as usize));
        }
    }
    cols
}

fn check_input(x: &FeatureSequence, dims: &ModelDims) -> Result<()> {
    if x.matrix().cols() != dims.input_dim {
        return Err(Error::shape(
            "embed_features",
            format!(
                "features have {} columns, model expects {}",
                x.matrix().cols(),
                dims.input_dim
            ),
        ));
    }
    Ok(())
}

/// Temporal convolution with same-length zero padding, bias, then ReLU.
pub fn embed_features(x: &FeatureSequence, params: &ModelParams) -> Result<Matrix> {
    check_input(x, &params.dims)?;
    let cols = im2col(x.matrix(), params.dims.kernel);
    Ok(relu(&matmul(&cols, &params.w_emb)?.add_row_vector(&params.b_emb)?))
}

/// Encodes the memory into keys and values.
pub fn encode_memory(params: &ModelParams) -> Result<MemoryEncoding> {
    let m = &params.memory.templates;
    let keys = matmul(m, &params.w_key)?.add_row_vector(&params.b_key)?;
    let hidden = relu(&matmul(m, &params.w_val1)?.add_row_vector(&params.b_val1)?);
    let values = matmul(&hidden, &params.w_val2)?.add_row_vector(&params.b_val2)?;
    Ok(MemoryEncoding {
        keys,
        values,
        hidden,
    })
}

/// Query-driven self-attention with an identity residual:
/// returns `(X_s, A)` with `A = softmax_rows(Q Qᵀ / √d)` and `X_s = (A + I) X_e`.
pub fn self_attention(x_e: &Matrix, q: &Matrix) -> Result<(Matrix, Matrix)> {
    if x_e.rows() != q.rows() {
        return Err(Error::shape(
            "self_attention",
            format!("{} feature rows vs {} query rows", x_e.rows(), q.rows()),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let attn = softmax_rows(&matmul_nt(q, q)?.scale(scale));
    let x_s = matmul(&attn, x_e)?.add(x_e)?;
    Ok((x_s, attn))
}

/// Sigmoid scaled dot-product similarity between segments and templates.
pub fn cross_similarity(q: &Matrix, keys: &Matrix) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Ok(sigmoid(&matmul_nt(q, keys)?.scale(scale)))
}

/// `V_O = S · V_M`; row `t` is the flattened classifier of segment `t`.
pub fn read_classifiers(s: &Matrix, values: &Matrix) -> Result<Matrix> {
    matmul(s, values)
}

/// Reshapes one row of `V_O` into the `F × C` classifier of that segment.
pub fn segment_classifier(v_o_row: &[f64], embed_dim: usize) -> Result<Matrix> {
    if embed_dim == 0 || !v_o_row.len().is_multiple_of(embed_dim) {
        return Err(Error::shape(
            "segment_classifier",
            format!("row of {} values with F = {embed_dim}", v_o_row.len()),
        ));
    }
    let classes = v_o_row.len() / embed_dim;
    Ok(Matrix::from_fn(embed_dim, classes, |f, c| {
        v_o_row[c * embed_dim + f]
    }))
}

/// Inverse of [`segment_classifier`].
pub fn flatten_classifier(w_cls: &Matrix) -> Vec<f64> {
    let (f_dim, classes) = w_cls.shape();
    let mut out = vec![0.0; f_dim * classes];
    for c in 0..classes {
        for f in 0..f_dim {
            out[c * f_dim + f] = w_cls[(f, c)];
        }
    }
    out
}

/// Per-segment maximum template similarity.
pub fn foreground_attention(s: &Matrix) -> Vec<f64> {
    (0..s.rows())
        .map(|t| s.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Index of the first maximal entry in each row; this is the entry the
/// foreground attention gradient flows through.
pub(crate) fn argmax_rows(s: &Matrix) -> Vec<usize> {
    (0..s.rows())
        .map(|t| {
            let row = s.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Segment class logits and the attention-pooled video prediction.
///
/// Returns `(ŷ, C_seg, pooled_logits)`.
pub fn video_prediction(
    x_s: &Matrix,
    v_o: &Matrix,
    a: &[f64],
) -> Result<(Vec<f64>, Matrix, Vec<f64>)> {
    let (l, f_dim) = x_s.shape();
    if v_o.rows() != l || a.len() != l || f_dim == 0 || !v_o.cols().is_multiple_of(f_dim) {
        return Err(Error::shape(
            "video_prediction",
            format!(
                "X_s {:?}, V_O {:?}, attention length {}",
                x_s.shape(),
                v_o.shape(),
                a.len()
            ),
        ));
    }
    let classes = v_o.cols() / f_dim;
    let mut c_seg = Matrix::zeros(l, classes);
    for t in 0..l {
        let xs = x_s.row(t);
        let vo = v_o.row(t);
        for c in 0..classes {
            c_seg[(t, c)] = crate::numerics::dot(xs, &vo[c * f_dim..(c + 1) * f_dim]);
        }
    }
    let mut pooled = vec![0.0; classes];
    for t in 0..l {
        for (p, v) in pooled.iter_mut().zip(c_seg.row(t)) {
            *p += a[t] * v;
        }
    }
    for p in &mut pooled {
        *p /= l as f64;
    }
    Ok((softmax(&pooled), c_seg, pooled))
}

/// Full forward pass for one video.
pub fn forward(
    x: &FeatureSequence,
    params: &ModelParams,
    use_self_attention: bool,
) -> Result<ForwardTrace> {
    let memory = encode_memory(params)?;
    forward_with_memory(x, params, &memory, use_self_attention)
}

/// Forward pass reusing a precomputed memory encoding.
pub fn forward_with_memory(
    x: &FeatureSequence,
    params: &ModelParams,
    memory: &MemoryEncoding,
    use_self_attention: bool,
) -> Result<ForwardTrace> {
    check_input(x, &params.dims)?;
    let input_cols = im2col(x.matrix(), params.dims.kernel);
    let x_e = relu(&matmul(&input_cols, &params.w_emb)?.add_row_vector(&params.b_emb)?);
    let q = matmul(&x_e, &params.w_query)?.add_row_vector(&params.b_query)?;
    let (x_s, a_self) = if use_self_attention {
        let (x_s, attn) = self_attention(&x_e, &q)?;
        (x_s, Some(attn))
    } else {
        (x_e.clone(), None)
    };
    let s = cross_similarity(&q, &memory.keys)?;
    let v_o = read_classifiers(&s, &memory.values)?;
    let a = foreground_attention(&s);
    let (y_hat, c_seg, pooled) = video_prediction(&x_s, &v_o, &a)?;
    Ok(ForwardTrace {
        input_cols,
        x_e,
        q,
        k_m: memory.keys.clone(),
        v_m: memory.values.clone(),
        a_self,
        x_s,
        s,
        v_o,
        a,
        c_seg,
        pooled,
        y_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul_tn;
    use rand::Rng;
    use proptest::prelude::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            input_dim: 5,
            embed_dim: 6,
            classes: 3,
            templates: 4,
            key_reduction: 2,
            bottleneck: 3,
            kernel: 3,
        }
    }

    fn random_input(l: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(Matrix::from_fn(l, d, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    /// Random parameters with nonzero biases so every term is exercised.
    fn random_params(dims: ModelDims, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for b in [
            &mut p.b_emb,
            &mut p.b_key,
            &mut p.b_val1,
            &mut p.b_val2,
            &mut p.b_query,
        ] {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
        }
    }

    #[test]
    fn dims_validation() {
        assert!(small_dims().validate().is_ok());
        let mut d = small_dims();
        d.kernel = 2;
        assert!(d.validate().is_err());
        let mut d = small_dims();
        d.key_reduction = 4;
        assert!(d.validate().is_err());
        let mut d = small_dims();
        d.templates = 0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn identity_kernel_embedding_is_relu() {
        let dims = ModelDims {
            input_dim: 3,
            embed_dim: 3,
            kernel: 1,
            key_reduction: 1,
            ..small_dims()
        };
        let mut p = ModelParams::zeros(dims).unwrap();
        p.w_emb = Matrix::identity(3);
        let x = Matrix::from_rows(&[vec![-1.0, 2.0, -3.0], vec![4.0, -5.0, 6.0]]).unwrap();
        let out = embed_features(&FeatureSequence::new(x.clone()).unwrap(), &p).unwrap();
        assert_eq!(out, relu(&x));
    }

    #[test]
    fn zero_input_embeds_to_zero() {
        let p = ModelParams::init(small_dims(), 3).unwrap();
        let x = FeatureSequence::new(Matrix::zeros(4, 5)).unwrap();
        let out = embed_features(&x, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_matches_sliding_window() {
        let dims = small_dims();
        let p = random_params(dims, 11);
        let x = random_input(7, dims.input_dim, 12);
        let out = embed_features(&x, &p).unwrap();
        let xm = x.matrix();
        for t in 0..7 {
            for f in 0..dims.embed_dim {
                let mut acc = p.b_emb[f];
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if !(0..7).contains(&src) {
                        continue;
                    }
                    for d in 0..dims.input_dim {
                        acc += xm[(src as usize, d)] * p.w_emb[(j * dims.input_dim + d, f)];
                    }
                }
                assert!((out[(t, f)] - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_rejects_wrong_width() {
        let p = ModelParams::init(small_dims(), 3).unwrap();
        let x = FeatureSequence::new(Matrix::zeros(4, 2)).unwrap();
        assert!(matches!(embed_features(&x, &p), Err(Error::Shape { .. })));
        assert!(FeatureSequence::new(Matrix::zeros(0, 5)).is_err());
    }

    #[test]
    fn zero_memory_encodes_to_zero() {
        let mut p = ModelParams::init(small_dims(), 5).unwrap();
        p.memory.templates = Matrix::zeros(4, 6);
        let enc = encode_memory(&p).unwrap();
        assert!(enc.keys.data().iter().all(|&v| v == 0.0));
        assert!(enc.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_padded_value_encoder_reproduces_memory() {
        let dims = ModelDims {
            bottleneck: 6,
            ..small_dims()
        };
        let mut p = ModelParams::zeros(dims).unwrap();
        p.w_val1 = Matrix::identity(6);
        p.w_val2 = Matrix::from_fn(6, dims.value_dim(), |r, c| if r == c { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        p.memory.templates = Matrix::from_fn(4, 6, |_, _| rng.random_range(0.0..1.0));
        let enc = encode_memory(&p).unwrap();
        for k in 0..4 {
            assert_eq!(&enc.values.row(k)[..6], p.memory.templates.row(k));
            assert!(enc.values.row(k)[6..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn memory_encoding_matches_two_step_composition() {
        let dims = small_dims();
        let p = random_params(dims, 21);
        let enc = encode_memory(&p).unwrap();
        let m = &p.memory.templates;
        for k in 0..dims.templates {
            for j in 0..dims.key_dim() {
                let mut v = p.b_key[j];
                for f in 0..dims.embed_dim {
                    v += m[(k, f)] * p.w_key[(f, j)];
                }
                assert!((enc.keys[(k, j)] - v).abs() < 1e-12);
            }
            let hidden: Vec<f64> = (0..dims.bottleneck)
                .map(|h| {
                    let mut v = p.b_val1[h];
                    for f in 0..dims.embed_dim {
                        v += m[(k, f)] * p.w_val1[(f, h)];
                    }
                    v.max(0.0)
                })
                .collect();
            for j in 0..dims.value_dim() {
                let mut v = p.b_val2[j];
                for (h, hv) in hidden.iter().enumerate() {
                    v += hv * p.w_val2[(h, j)];
                }
                assert!((enc.values[(k, j)] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_single_segment_doubles() {
        let x_e = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.4, 0.7]]).unwrap();
        let (x_s, attn) = self_attention(&x_e, &q).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        assert_eq!(x_s, x_e.scale(2.0));
    }

    #[test]
    fn self_attention_identical_queries_average() {
        let x_e = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
        let (x_s, attn) = self_attention(&x_e, &q).unwrap();
        assert_close(attn.data(), &[0.5; 4], 1e-15);
        assert_close(x_s.data(), &[1.0 + 2.0, 2.0 + 3.5, 3.0 + 2.0, 5.0 + 3.5], 1e-15);
    }

    #[test]
    fn self_attention_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_e = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let q = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let (x_s, attn) = self_attention(&x_e, &q).unwrap();
        for t in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|u| (0..3).map(|j| q[(t, j)] * q[(u, j)]).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            for f in 0..6 {
                let mut v = x_e[(t, f)];
                for u in 0..4 {
                    v += logits[u].exp() / z * x_e[(u, f)];
                }
                assert!((x_s[(t, f)] - v).abs() < 1e-12);
            }
            assert!((attn.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_similarity_cases() {
        let keys = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = cross_similarity(&Matrix::zeros(3, 2), &keys).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));

        let q = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let s = cross_similarity(&q, &keys).unwrap();
        assert!(s[(0, 0)] > 0.5);
        assert_eq!(s[(0, 1)], 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Matrix::from_fn(5, 4, |_, _| rng.random_range(-2.0..2.0));
        let keys = Matrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let s = cross_similarity(&q, &keys).unwrap();
        for t in 0..5 {
            for k in 0..3 {
                let z: f64 = (0..4).map(|j| q[(t, j)] * keys[(k, j)]).sum::<f64>() / 2.0;
                assert!((s[(t, k)] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_reading() {
        let f = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values = Matrix::from_fn(4, 2 * f, |_, _| rng.random_range(-1.0..1.0));
        let mut s = Matrix::zeros(2, 4);
        s[(0, 2)] = 1.0;
        s[(1, 0)] = 1.0;
        let v_o = read_classifiers(&s, &values).unwrap();
        let w0 = segment_classifier(v_o.row(0), f).unwrap();
        assert_eq!(w0, segment_classifier(values.row(2), f).unwrap());
        assert_eq!(w0[(1, 1)], values[(2, f + 1)]);

        let zero = read_classifiers(&Matrix::zeros(2, 4), &values).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let s = Matrix::from_fn(5, 4, |_, _| rng.random_range(0.0..1.0));
        let v_o = read_classifiers(&s, &values).unwrap();
        for t in 0..5 {
            let w = segment_classifier(v_o.row(t), f).unwrap();
            assert_eq!(w.shape(), (f, 2));
            assert_eq!(flatten_classifier(&w), v_o.row(t));
        }
    }

    #[test]
    fn foreground_attention_cases() {
        assert_eq!(foreground_attention(&Matrix::filled(3, 4, 0.5)), vec![0.5; 3]);
        let s = Matrix::from_rows(&[vec![0.1, 0.9, 0.4]]).unwrap();
        assert_eq!(foreground_attention(&s), vec![0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Matrix::from_fn(9, 5, |_, _| rng.random_range(0.0..1.0));
        let a = foreground_attention(&s);
        for t in 0..9 {
            let mut best = s[(t, 0)];
            for k in 1..5 {
                if s[(t, k)] > best {
                    best = s[(t, k)];
                }
            }
            assert_eq!(a[t], best);
        }
    }

    #[test]
    fn video_prediction_symmetric_cases() {
        // V_O rows that give every class the same classifier.
        let x_s = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let v_o = Matrix::from_rows(&[vec![0.3, 0.1, 0.3, 0.1, 0.3, 0.1], vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]])
            .unwrap();
        let (y, c_seg, _) = video_prediction(&x_s, &v_o, &[0.7, 0.2]).unwrap();
        assert_eq!(c_seg.shape(), (2, 3));
        assert_close(&y, &[1.0 / 3.0; 3], 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v_o = Matrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
        let (y, _, pooled) = video_prediction(&x_s, &v_o, &[0.0, 0.0]).unwrap();
        assert!(pooled.iter().all(|&v| v == 0.0));
        assert_close(&y, &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn video_prediction_matches_composed_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (l, f, c) = (5, 4, 3);
        let x_s = Matrix::from_fn(l, f, |_, _| rng.random_range(-1.0..1.0));
        let v_o = Matrix::from_fn(l, c * f, |_, _| rng.random_range(-1.0..1.0));
        let a: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
        let (y, _, _) = video_prediction(&x_s, &v_o, &a).unwrap();
        let mut logits = vec![0.0; c];
        for t in 0..l {
            let w = segment_classifier(v_o.row(t), f).unwrap();
            let row = Matrix::from_vec(1, f, x_s.row(t).to_vec()).unwrap();
            let ct = matmul(&row, &w).unwrap();
            for j in 0..c {
                logits[j] += a[t] * ct[(0, j)] / l as f64;
            }
        }
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
        assert_close(&y, &expected, 1e-10);
    }

    #[test]
    fn bypassed_self_attention_keeps_embedding() {
        let dims = small_dims();
        let p = random_params(dims, 31);
        let x = random_input(6, dims.input_dim, 32);
        let trace = forward(&x, &p, false).unwrap();
        assert_eq!(trace.x_s, trace.x_e);
        assert!(trace.a_self.is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let dims = small_dims();
        let p = random_params(dims, 41);
        let x = random_input(6, dims.input_dim, 42);
        assert_eq!(forward(&x, &p, true).unwrap(), forward(&x, &p, true).unwrap());
    }

    #[test]
    fn forward_matches_chained_operations() {
        let dims = small_dims();
        let p = random_params(dims, 51);
        let x = random_input(8, dims.input_dim, 52);
        let trace = forward(&x, &p, true).unwrap();

        let x_e = embed_features(&x, &p).unwrap();
        let enc = encode_memory(&p).unwrap();
        let q = matmul(&x_e, &p.w_query).unwrap().add_row_vector(&p.b_query).unwrap();
        let (x_s, _) = self_attention(&x_e, &q).unwrap();
        let s = cross_similarity(&q, &enc.keys).unwrap();
        let v_o = read_classifiers(&s, &enc.values).unwrap();
        let a = foreground_attention(&s);
        let (y, _, _) = video_prediction(&x_s, &v_o, &a).unwrap();
        assert_close(&trace.y_hat, &y, 1e-12);
        // X_eᵀ X_e reused as a sanity check on the trace contents.
        assert_eq!(
            matmul_tn(&trace.x_e, &trace.x_e).unwrap(),
            matmul_tn(&x_e, &x_e).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn trace_invariants(seed in 0u64..5_000, l in 1usize..10) {
            let dims = small_dims();
            let p = random_params(dims, seed);
            let x = random_input(l, dims.input_dim, seed + 7);
            let tr = forward(&x, &p, true).unwrap();
            let attn = tr.a_self.as_ref().unwrap();
            for t in 0..l {
                prop_assert!((attn.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let row_max = tr.s.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(tr.a[t], row_max);
            }
            prop_assert!(tr.s.data().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!((tr.y_hat.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn scaling_one_template_leaves_other_columns(seed in 0u64..5_000, factor in 0.1f64..3.0) {
            let dims = small_dims();
            let p = random_params(dims, seed);
            let x = random_input(5, dims.input_dim, seed + 1);
            let base = forward(&x, &p, true).unwrap();
            let mut scaled = p.clone();
            for v in scaled.memory.templates.row_mut(1) {
                *v *= factor;
            }
            let tr = forward(&x, &scaled, true).unwrap();
            for t in 0..5 {
                for k in [0, 2, 3] {
                    prop_assert_eq!(tr.s[(t, k)], base.s[(t, k)]);
                }
            }
        }

        #[test]
        fn template_order_does_not_matter(seed in 0u64..5_000, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
            let dims = small_dims();
            let p = random_params(dims, seed);
            let x = random_input(6, dims.input_dim, seed + 2);
            let mut permuted = p.clone();
            for (dst, &src) in perm.iter().enumerate() {
                permuted.memory.templates.row_mut(dst).copy_from_slice(p.memory.templates.row(src));
            }
            let a = forward(&x, &p, true).unwrap();
            let b = forward(&x, &permuted, true).unwrap();
            for (u, v) in a.a.iter().zip(&b.a) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
            for (u, v) in a.y_hat.iter().zip(&b.y_hat) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
            for (u, v) in a.c_seg.data().iter().zip(b.c_seg.data()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
            for t in 0..6 {
                for (dst, &src) in perm.iter().enumerate() {
                    prop_assert_eq!(b.s[(t, dst)], a.s[(t, src)]);
                }
            }
        }
    }
}
