//! Loss evaluation and exact reverse-mode gradients for one training step.
//!
//! A step is a [`StepBatch`] of images and captions plus a [`LossSpec`] naming
//! which slots form triplet terms and which feed the classifier terms.
//! Gradients flow from the similarity matrix and the classifier logits back
//! through L2 normalization, the affine projections and mean pooling.

use crate::error::{Error, Result};
use crate::losses::{triplet_hardest_with_ids, BatchSimilarities, TripletOutcome};
use crate::numerics::{argmax, dot, LOG_EPS};

use super::{classifier_probs, encode_image_cached, encode_text_cached, Encoded, ModelParams};

/// Global gradient-norm ceiling applied by [`backward`].
pub const CLIP_NORM: f64 = 2.0;

/// Images (as region rows) and captions (as token ids) addressed by slot.
#[derive(Debug, Clone, Default)]
pub struct StepBatch<'a> {
    pub images: Vec<&'a [Vec<f64>]>,
    pub texts: Vec<&'a [u32]>,
}

/// Hardest-negative triplet over image slots `images[a]` paired with text
/// slots `texts[a]`. Repeated text slots are never used as each other's
/// negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerm {
    pub images: Vec<usize>,
    pub texts: Vec<usize>,
    pub margins: Vec<f64>,
    pub weight: f64,
}

/// Pseudo-classification cross-entropy and entropy regularizer over image
/// slots, with hard labels taken from the paired text slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTerm {
    pub images: Vec<usize>,
    pub texts: Vec<usize>,
    pub pse_weight: f64,
    pub ent_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossSpec {
    pub clean: Option<TripletTerm>,
    pub noisy: Option<TripletTerm>,
    pub classifier: Option<ClassifierTerm>,
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub clean: f64,
    pub noisy: f64,
    pub pse: f64,
    pub ent: f64,
    pub total: f64,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle(pub ModelParams);

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(ModelParams::zeros(params.dims))
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for t in self.0.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn is_zero(&self) -> bool {
        self.0.tensors().iter().all(|t| t.iter().all(|g| *g == 0.0))
    }
}

/// Encoded batch, reusable between inspecting predictions and backward.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub(crate) images: Vec<Encoded>,
    pub(crate) texts: Vec<Encoded>,
}

impl BatchForward {
    pub fn compute(params: &ModelParams, batch: &StepBatch<'_>) -> Result<Self> {
        let images = batch
            .images
            .iter()
            .map(|r| encode_image_cached(params, r))
            .collect::<Result<Vec<_>>>()?;
        let texts = batch
            .texts
            .iter()
            .map(|t| encode_text_cached(params, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images, texts })
    }

    pub fn image_embedding(&self, slot: usize) -> &[f64] {
        &self.images[slot].emb
    }

    pub fn text_embedding(&self, slot: usize) -> &[f64] {
        &self.texts[slot].emb
    }
}

fn triplet_sims(fwd: &BatchForward, term: &TripletTerm) -> Result<BatchSimilarities> {
    let n = term.images.len();
    if term.texts.len() != n || term.margins.len() != n {
        return Err(Error::invalid("triplet term slot lists disagree in length"));
    }
    let mut data = Vec::with_capacity(n * n);
    for &i in &term.images {
        for &t in &term.texts {
            data.push(dot(&fwd.images[i].emb, &fwd.texts[t].emb));
        }
    }
    BatchSimilarities::from_flat(n, data)
}

fn eval_triplet(fwd: &BatchForward, term: &TripletTerm) -> Result<TripletOutcome> {
    let sims = triplet_sims(fwd, term)?;
    triplet_hardest_with_ids(&sims, &term.margins, &term.images, &term.texts)
}

struct ClassifierEval {
    pse: f64,
    ent: f64,
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    mean: Vec<f64>,
}

fn eval_classifier(
    params: &ModelParams,
    fwd: &BatchForward,
    term: &ClassifierTerm,
) -> Result<ClassifierEval> {
    let n = term.images.len();
    if n == 0 || term.texts.len() != n {
        return Err(Error::invalid(
            "classifier term needs matching, non-empty slot lists",
        ));
    }
    let k = params.dims.n_classes;
    let probs: Vec<Vec<f64>> = term
        .images
        .iter()
        .map(|&i| classifier_probs(params, &fwd.images[i].emb))
        .collect();
    let labels: Vec<usize> = term
        .texts
        .iter()
        .map(|&t| argmax(&classifier_probs(params, &fwd.texts[t].emb)))
        .collect();
    let pse = probs
        .iter()
        .zip(&labels)
        .map(|(p, &y)| -p[y].max(LOG_EPS).ln())
        .sum::<f64>()
        / n as f64;
    let mut mean = vec![0.0; k];
    for p in &probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ent = mean.iter().map(|&v| v * v.max(LOG_EPS).ln()).sum();
    Ok(ClassifierEval {
        pse,
        ent,
        probs,
        labels,
        mean,
    })
}

/// Forward-only evaluation of every term in `spec`.
pub fn evaluate_loss(
    params: &ModelParams,
    batch: &StepBatch<'_>,
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    let fwd = BatchForward::compute(params, batch)?;
    evaluate_with(params, &fwd, spec).map(|(b, _, _, _)| b)
}

type Evaluated = (
    LossBreakdown,
    Option<TripletOutcome>,
    Option<TripletOutcome>,
    Option<ClassifierEval>,
);

fn evaluate_with(params: &ModelParams, fwd: &BatchForward, spec: &LossSpec) -> Result<Evaluated> {
    let mut out = LossBreakdown::default();
    let clean = spec
        .clean
        .as_ref()
        .map(|t| eval_triplet(fwd, t))
        .transpose()?;
    let noisy = spec
        .noisy
        .as_ref()
        .map(|t| eval_triplet(fwd, t))
        .transpose()?;
    let cls = spec
        .classifier
        .as_ref()
        .map(|t| eval_classifier(params, fwd, t))
        .transpose()?;
    if let (Some(t), Some(o)) = (&spec.clean, &clean) {
        out.clean = o.total;
        out.total += t.weight * o.total;
    }
    if let (Some(t), Some(o)) = (&spec.noisy, &noisy) {
        out.noisy = o.total;
        out.total += t.weight * o.total;
    }
    if let (Some(t), Some(c)) = (&spec.classifier, &cls) {
        out.pse = c.pse;
        out.ent = c.ent;
        out.total += t.pse_weight * c.pse + t.ent_weight * c.ent;
    }
    if !out.total.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            detail: format!("non-finite loss {out:?}"),
        });
    }
    Ok((out, clean, noisy, cls))
}

fn accumulate_triplet(
    fwd: &BatchForward,
    term: &TripletTerm,
    outcome: &TripletOutcome,
    d_img: &mut [Vec<f64>],
    d_txt: &mut [Vec<f64>],
) {
    // dL/ds[a][b] for s[a][b] = <img[images[a]], txt[texts[b]]>
    let mut push = |a: usize, b: usize, g: f64| {
        let (i, t) = (term.images[a], term.texts[b]);
        for (d, e) in d_img[i].iter_mut().zip(&fwd.texts[t].emb) {
            *d += g * e;
        }
        for (d, e) in d_txt[t].iter_mut().zip(&fwd.images[i].emb) {
            *d += g * e;
        }
    };
    let w = term.weight;
    for a in 0..term.images.len() {
        if let Some((b, h)) = outcome.text_negative[a] {
            if h > 0.0 {
                push(a, a, -w);
                push(a, b, w);
            }
        }
        if let Some((b, h)) = outcome.image_negative[a] {
            if h > 0.0 {
                push(a, a, -w);
                push(b, a, w);
            }
        }
    }
}

/// Gradient of `emb = z / |z|` with respect to `z`.
fn normalize_backward(enc: &Encoded, d_emb: &[f64]) -> Option<Vec<f64>> {
    if enc.emb.iter().all(|v| *v == 0.0) {
        return None;
    }
    let proj = dot(&enc.emb, d_emb);
    Some(
        d_emb
            .iter()
            .zip(&enc.emb)
            .map(|(g, e)| (g - e * proj) / enc.norm)
            .collect(),
    )
}

/// Exact gradients of the weighted loss, without clipping.
pub fn compute_gradients(
    params: &ModelParams,
    batch: &StepBatch<'_>,
    spec: &LossSpec,
) -> Result<(LossBreakdown, GradientBundle)> {
    let fwd = BatchForward::compute(params, batch)?;
    gradients_from(params, batch, &fwd, spec)
}

pub(crate) fn gradients_from(
    params: &ModelParams,
    batch: &StepBatch<'_>,
    fwd: &BatchForward,
    spec: &LossSpec,
) -> Result<(LossBreakdown, GradientBundle)> {
    let (loss, clean, noisy, cls) = evaluate_with(params, fwd, spec)?;
    let dj = params.dims.d_joint;
    let mut grads = GradientBundle::zeros_like(params);
    let g = &mut grads.0;
    let mut d_img = vec![vec![0.0; dj]; fwd.images.len()];
    let mut d_txt = vec![vec![0.0; dj]; fwd.texts.len()];

    if let (Some(t), Some(o)) = (&spec.clean, &clean) {
        accumulate_triplet(fwd, t, o, &mut d_img, &mut d_txt);
    }
    if let (Some(t), Some(o)) = (&spec.noisy, &noisy) {
        accumulate_triplet(fwd, t, o, &mut d_img, &mut d_txt);
    }
    if let (Some(t), Some(c)) = (&spec.classifier, &cls) {
        let n = t.images.len() as f64;
        let d_mean: Vec<f64> = c
            .mean
            .iter()
            .map(|&v| {
                if v > LOG_EPS {
                    v.ln() + 1.0
                } else {
                    LOG_EPS.ln()
                }
            })
            .collect();
        for (a, &slot) in t.images.iter().enumerate() {
            let p = &c.probs[a];
            let y = c.labels[a];
            let mut d_logits = vec![0.0; p.len()];
            if t.pse_weight != 0.0 && p[y] > LOG_EPS {
                for (k, d) in d_logits.iter_mut().enumerate() {
                    let target = if k == y { 1.0 } else { 0.0 };
                    *d += t.pse_weight * (p[k] - target) / n;
                }
            }
            if t.ent_weight != 0.0 {
                let pg = dot(p, &d_mean);
                for (k, d) in d_logits.iter_mut().enumerate() {
                    *d += t.ent_weight * p[k] * (d_mean[k] - pg) / n;
                }
            }
            let emb = &fwd.images[slot].emb;
            g.classifier.add_outer(emb, &d_logits);
            for (b, d) in g.classifier_bias.iter_mut().zip(&d_logits) {
                *b += d;
            }
            let back = params.classifier.times(&d_logits);
            for (d, v) in d_img[slot].iter_mut().zip(back) {
                *d += v;
            }
        }
    }

    for (enc, d_emb) in fwd.images.iter().zip(&d_img) {
        if let Some(dz) = normalize_backward(enc, d_emb) {
            g.image_proj.add_outer(&enc.pooled, &dz);
            for (b, d) in g.image_bias.iter_mut().zip(&dz) {
                *b += d;
            }
        }
    }
    for ((enc, d_emb), tokens) in fwd.texts.iter().zip(&d_txt).zip(&batch.texts) {
        if let Some(dz) = normalize_backward(enc, d_emb) {
            g.text_proj.add_outer(&enc.pooled, &dz);
            for (b, d) in g.text_bias.iter_mut().zip(&dz) {
                *b += d;
            }
            let d_pooled = params.text_proj.times(&dz);
            let inv = 1.0 / tokens.len() as f64;
            for &tok in tokens.iter() {
                for (e, d) in g
                    .token_embedding
                    .row_mut(tok as usize)
                    .iter_mut()
                    .zip(&d_pooled)
                {
                    *e += d * inv;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Loss and gradients with global-norm clipping at [`CLIP_NORM`].
pub fn backward(
    params: &ModelParams,
    batch: &StepBatch<'_>,
    spec: &LossSpec,
) -> Result<(LossBreakdown, GradientBundle)> {
    let (loss, mut grads) = compute_gradients(params, batch, spec)?;
    grads.clip_global_norm(CLIP_NORM);
    Ok((loss, grads))
}
