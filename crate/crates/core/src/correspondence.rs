//! Correspondence estimation: loss-based dividing into clean and noisy
//! subsets, pseudo-caption assignment for noisy images, and prediction
//! oscillation scoring for rectifying clean margins.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_unchecked, gmm2_fit_em, kl_divergence, Gmm1D, ProbVector, EM_MAX_ITERS, EM_TOL,
};

/// Oscillation batches smaller than this skip the mixture fit.
pub const MIN_OSCILLATION_BATCH: usize = 4;

/// Posterior probability that each training pair is clean.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanProbability(pub Vec<f64>);

impl CleanProbability {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    /// The clean subset was empty and the top-scoring index was forced in.
    pub forced: bool,
}

/// Fits a two-component mixture to the losses; `w_i` is the low-mean
/// component's posterior at `loss_i`.
pub fn compute_clean_probabilities(losses: &[f64]) -> Result<(CleanProbability, Gmm1D)> {
    let gmm = gmm2_fit_em(losses, EM_MAX_ITERS, EM_TOL)?;
    let w = losses.iter().map(|&l| gmm.posterior_low_mean(l)).collect();
    Ok((CleanProbability(w), gmm))
}

/// `clean = {i : w_i > tau}`. An empty clean set falls back to the single
/// highest-`w` index (lowest index on ties).
pub fn split_dataset(w: &CleanProbability, tau: f64) -> Result<DataSplit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    if w.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let (mut clean, mut noisy): (Vec<usize>, Vec<usize>) =
        (0..w.len()).partition(|&i| w.0[i] > tau);
    let mut forced = false;
    if clean.is_empty() {
        let best = crate::numerics::argmax(&w.0);
        noisy.retain(|&i| i != best);
        clean.push(best);
        forced = true;
    }
    Ok(DataSplit {
        clean,
        noisy,
        forced,
    })
}

/// For each noisy item, the clean item whose vector is most similar, and that
/// similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCaptionAssignment {
    pub source: Vec<usize>,
    pub similarity: Vec<f64>,
}

/// Cosine-argmax assignment of clean captions to noisy images. Returns `None`
/// when there is nothing to assign from or to.
pub fn assign_pseudo_captions<V: AsRef<[f64]>>(
    p_noisy: &[V],
    p_clean: &[V],
) -> Result<Option<PseudoCaptionAssignment>> {
    if p_noisy.is_empty() || p_clean.is_empty() {
        return Ok(None);
    }
    let k = p_clean[0].as_ref().len();
    if p_noisy.iter().chain(p_clean).any(|v| v.as_ref().len() != k) {
        return Err(Error::invalid("pseudo-caption inputs differ in dimension"));
    }
    let mut source = Vec::with_capacity(p_noisy.len());
    let mut similarity = Vec::with_capacity(p_noisy.len());
    for pn in p_noisy {
        let mut best = (0, f64::NEG_INFINITY);
        for (b, pc) in p_clean.iter().enumerate() {
            let s = cosine_unchecked(pn.as_ref(), pc.as_ref());
            if s > best.1 {
                best = (b, s);
            }
        }
        source.push(best.0);
        similarity.push(best.1);
    }
    Ok(Some(PseudoCaptionAssignment { source, similarity }))
}

/// `D_KL(prev || cur)`.
pub fn oscillation(prev: &ProbVector, cur: &ProbVector) -> Result<f64> {
    kl_divergence(prev, cur)
}

/// Per-batch mixture fit over oscillation values; each entry is the low-mean
/// posterior. Batches below [`MIN_OSCILLATION_BATCH`] get 0.5 everywhere.
pub fn oscillation_clean_probabilities(o_batch: &[f64]) -> Result<Vec<f64>> {
    if o_batch.len() < MIN_OSCILLATION_BATCH {
        return Ok(vec![0.5; o_batch.len()]);
    }
    let (w, _) = compute_clean_probabilities(o_batch)?;
    Ok(w.0)
}

/// Last recorded pseudo-prediction per training index, tagged with the epoch
/// it was recorded in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionHistory {
    entries: Vec<Option<(u32, ProbVector)>>,
    last_epoch: Option<u32>,
}

impl PredictionHistory {
    pub fn new(n: usize) -> Self {
        Self {
            entries: vec![None; n],
            last_epoch: None,
        }
    }

    /// Stores predictions for `epoch`. Indices not mentioned keep their entry.
    pub fn update(
        &mut self,
        epoch: u32,
        predictions: impl IntoIterator<Item = (usize, ProbVector)>,
    ) -> Result<()> {
        if self.last_epoch.is_some_and(|e| epoch < e) {
            return Err(Error::invalid(format!(
                "history epochs must not go backwards ({} then {epoch})",
                self.last_epoch.unwrap()
            )));
        }
        self.last_epoch = Some(epoch);
        for (idx, p) in predictions {
            if idx >= self.entries.len() {
                self.entries.resize(idx + 1, None);
            }
            self.entries[idx] = Some((epoch, p));
        }
        Ok(())
    }

    /// Latest entry regardless of age.
    pub fn latest(&self, idx: usize) -> Option<(u32, &ProbVector)> {
        self.entries.get(idx)?.as_ref().map(|(e, p)| (*e, p))
    }

    /// The prediction stored in the epoch right before `current_epoch`, if
    /// any. Older entries count as no history.
    pub fn previous(&self, idx: usize, current_epoch: u32) -> Option<&ProbVector> {
        match self.latest(idx) {
            Some((e, p)) if e + 1 == current_epoch => Some(p),
            _ => None,
        }
    }
}

/// One row of the per-epoch split diagnostic dump.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDiagnostic {
    pub index: usize,
    pub loss: f64,
    pub w: f64,
    pub w_o: Option<f64>,
    pub assigned_clean: bool,
}

pub fn write_split_diagnostics<W: Write>(mut out: W, rows: &[SplitDiagnostic]) -> Result<()> {
    writeln!(out, "index,loss,w,w_o,assigned_clean")?;
    for r in rows {
        let w_o = r.w_o.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.index, r.loss, r.w, w_o, r.assigned_clean as u8
        )?;
    }
    Ok(())
}
