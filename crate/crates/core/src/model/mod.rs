//! Dual-encoder retrieval model with a pseudo-classifier head.
//!
//! The image encoder averages region features and applies an affine map; the
//! text encoder averages token embeddings and applies an affine map. Both
//! outputs are L2-normalized into the joint space, where similarity is the
//! dot product (cosine). The classifier maps a joint embedding to `K` logits.

mod adam;
mod backward;
mod checkpoint;

pub use adam::{adam_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub(crate) use backward::gradients_from;
pub use backward::{
    backward, compute_gradients, evaluate_loss, BatchForward, ClassifierTerm, GradientBundle,
    LossBreakdown, LossSpec, StepBatch, TripletTerm, CLIP_NORM,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, softmax_unchecked, ProbVector, ZERO_NORM};

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_img_in: usize,
    pub d_word: usize,
    pub d_joint: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_img_in: 16,
            d_word: 16,
            d_joint: 64,
            vocab_size: 256,
            n_classes: 128,
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x^T W` for a row vector `x` of length `rows`, plus `bias`.
    pub(crate) fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = bias.to_vec();
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        out
    }

    /// `W g` for a column-space vector `g` of length `cols`.
    pub(crate) fn times(&self, g: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), g)).collect()
    }

    /// `W += x g^T`.
    pub(crate) fn add_outer(&mut self, x: &[f64], g: &[f64]) {
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (w, gc) in self.row_mut(r).iter_mut().zip(g) {
                *w += xr * gc;
            }
        }
    }
}

/// Encoder and classifier weights for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub image_proj: Matrix,
    pub image_bias: Vec<f64>,
    pub token_embedding: Matrix,
    pub text_proj: Matrix,
    pub text_bias: Vec<f64>,
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
}

fn uniform_fill(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            image_proj: Matrix::zeros(dims.d_img_in, dims.d_joint),
            image_bias: vec![0.0; dims.d_joint],
            token_embedding: Matrix::zeros(dims.vocab_size, dims.d_word),
            text_proj: Matrix::zeros(dims.d_word, dims.d_joint),
            text_bias: vec![0.0; dims.d_joint],
            classifier: Matrix::zeros(dims.d_joint, dims.n_classes),
            classifier_bias: vec![0.0; dims.n_classes],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`. The token table is a
    /// lookup of a one-hot input, so its fan-in is 1.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let b_img = 1.0 / (dims.d_img_in as f64).sqrt();
        let b_word = 1.0 / (dims.d_word as f64).sqrt();
        let b_joint = 1.0 / (dims.d_joint as f64).sqrt();
        p.image_proj.data = uniform_fill(&mut rng, p.image_proj.data.len(), b_img);
        p.image_bias = uniform_fill(&mut rng, dims.d_joint, b_img);
        p.token_embedding.data = uniform_fill(&mut rng, p.token_embedding.data.len(), 1.0);
        p.text_proj.data = uniform_fill(&mut rng, p.text_proj.data.len(), b_word);
        p.text_bias = uniform_fill(&mut rng, dims.d_joint, b_word);
        p.classifier.data = uniform_fill(&mut rng, p.classifier.data.len(), b_joint);
        p.classifier_bias = uniform_fill(&mut rng, dims.n_classes, b_joint);
        p
    }

    /// Parameter arrays in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.image_proj.data,
            &self.image_bias,
            &self.token_embedding.data,
            &self.text_proj.data,
            &self.text_bias,
            &self.classifier.data,
            &self.classifier_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.image_proj.data,
            &mut self.image_bias,
            &mut self.token_embedding.data,
            &mut self.text_proj.data,
            &mut self.text_bias,
            &mut self.classifier.data,
            &mut self.classifier_bias,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Copy with every value rounded through `f32`, i.e. exactly what a
    /// checkpoint stores.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

/// Unit-norm vector in the joint space, or all zeros when the pre-normalized
/// vector had no direction.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding(pub Vec<f64>);

impl JointEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

/// Pre-normalization state of one encoded item, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Encoded {
    pub pooled: Vec<f64>,
    pub norm: f64,
    pub emb: Vec<f64>,
}

fn normalize(z: Vec<f64>) -> (f64, Vec<f64>) {
    let norm = l2_norm(&z);
    if norm < ZERO_NORM {
        return (norm, vec![0.0; z.len()]);
    }
    let emb = z.into_iter().map(|v| v / norm).collect();
    (norm, emb)
}

pub(crate) fn encode_image_cached(params: &ModelParams, regions: &[Vec<f64>]) -> Result<Encoded> {
    let d = params.dims.d_img_in;
    if regions.is_empty() {
        return Err(Error::invalid("image needs at least one region"));
    }
    let mut pooled = vec![0.0; d];
    for r in regions {
        if r.len() != d {
            return Err(Error::invalid(format!(
                "region width {} does not match d_img_in {d}",
                r.len()
            )));
        }
        for (p, v) in pooled.iter_mut().zip(r) {
            *p += v;
        }
    }
    let n = regions.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    let z = params.image_proj.affine(&pooled, &params.image_bias);
    let (norm, emb) = normalize(z);
    Ok(Encoded { pooled, norm, emb })
}

pub(crate) fn encode_text_cached(params: &ModelParams, tokens: &[u32]) -> Result<Encoded> {
    if tokens.is_empty() {
        return Err(Error::invalid("caption needs at least one token"));
    }
    let mut pooled = vec![0.0; params.dims.d_word];
    for &t in tokens {
        let t = t as usize;
        if t >= params.dims.vocab_size {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of size {}",
                params.dims.vocab_size
            )));
        }
        for (p, v) in pooled.iter_mut().zip(params.token_embedding.row(t)) {
            *p += v;
        }
    }
    let n = tokens.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    let z = params.text_proj.affine(&pooled, &params.text_bias);
    let (norm, emb) = normalize(z);
    Ok(Encoded { pooled, norm, emb })
}

/// Mean over region rows, affine projection, L2 normalization.
pub fn encode_image(params: &ModelParams, regions: &[Vec<f64>]) -> Result<JointEmbedding> {
    encode_image_cached(params, regions).map(|e| JointEmbedding(e.emb))
}

/// Mean of token embeddings, affine projection, L2 normalization.
pub fn encode_text(params: &ModelParams, tokens: &[u32]) -> Result<JointEmbedding> {
    encode_text_cached(params, tokens).map(|e| JointEmbedding(e.emb))
}

pub fn similarity(a: &JointEmbedding, b: &JointEmbedding) -> f64 {
    dot(&a.0, &b.0).clamp(-1.0, 1.0)
}

pub(crate) fn classifier_probs(params: &ModelParams, emb: &[f64]) -> Vec<f64> {
    let logits = params.classifier.affine(emb, &params.classifier_bias);
    softmax_unchecked(&logits)
}

/// Classifier affine map followed by softmax.
pub fn pseudo_predict(params: &ModelParams, emb: &JointEmbedding) -> ProbVector {
    ProbVector::new(classifier_probs(params, &emb.0))
        .expect("softmax of finite logits is a valid simplex")
}

/// Cosine similarity matrix between encoded images (rows) and texts (columns).
pub fn similarity_matrix(images: &[JointEmbedding], texts: &[JointEmbedding]) -> Vec<Vec<f64>> {
    images
        .iter()
        .map(|i| texts.iter().map(|t| similarity(i, t)).collect())
        .collect()
}
