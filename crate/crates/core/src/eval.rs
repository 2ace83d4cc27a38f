//! Bidirectional retrieval metrics, two-network similarity averaging, and
//! dividing quality against ground-truth correspondence.

use serde::{Deserialize, Serialize};

use crate::data::PairRecord;
use crate::error::{Error, Result};
use crate::model::{encode_image, encode_text, similarity_matrix, ModelParams};

/// Recall percentages at 1, 5 and 10 in both directions, and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub rsum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitQualityReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Absent when ground truth is all clean or all noisy.
    pub auc: Option<f64>,
}

/// 1-based rank of `target` when `scores` is sorted descending, ties ordered
/// by lower index first.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let s_t = scores.clone().nth(target).expect("target in range");
    1 + scores
        .enumerate()
        .filter(|&(j, s)| s > s_t || (s == s_t && j < target))
        .count()
}

/// `ground_truth[i]` is the text index matching image `i`.
pub fn recall_metrics(sims: &[Vec<f64>], ground_truth: &[usize]) -> Result<RetrievalReport> {
    let n = sims.len();
    if n == 0 {
        return Err(Error::invalid("recall_metrics needs at least one query"));
    }
    if sims.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(
            "1:1 retrieval requires a square similarity matrix",
        ));
    }
    if ground_truth.len() != n {
        return Err(Error::invalid("ground truth must map every image"));
    }
    let mut image_of = vec![usize::MAX; n];
    for (i, &t) in ground_truth.iter().enumerate() {
        if t >= n || image_of[t] != usize::MAX {
            return Err(Error::invalid("ground truth must be a permutation"));
        }
        image_of[t] = i;
    }
    let i2t: Vec<usize> = (0..n)
        .map(|i| rank_of(sims[i].iter().copied(), ground_truth[i]))
        .collect();
    let t2i: Vec<usize> = (0..n)
        .map(|t| rank_of((0..n).map(|i| sims[i][t]), image_of[t]))
        .collect();
    let at = |ranks: &[usize], k: usize| {
        100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64
    };
    let mut r = RetrievalReport {
        i2t_r1: at(&i2t, 1),
        i2t_r5: at(&i2t, 5),
        i2t_r10: at(&i2t, 10),
        t2i_r1: at(&t2i, 1),
        t2i_r5: at(&t2i, 5),
        t2i_r10: at(&t2i, 10),
        rsum: 0.0,
    };
    r.rsum = r.i2t_r1 + r.i2t_r5 + r.i2t_r10 + r.t2i_r1 + r.t2i_r5 + r.t2i_r10;
    Ok(r)
}

/// Cosine similarity of every image (rows) against every caption (columns).
pub fn network_similarities(params: &ModelParams, records: &[PairRecord]) -> Result<Vec<Vec<f64>>> {
    let images = records
        .iter()
        .map(|r| encode_image(params, &r.regions))
        .collect::<Result<Vec<_>>>()?;
    let texts = records
        .iter()
        .map(|r| encode_text(params, &r.tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(similarity_matrix(&images, &texts))
}

/// Elementwise mean of the two networks' similarity matrices.
pub fn averaged_similarities(
    net_a: &ModelParams,
    net_b: &ModelParams,
    records: &[PairRecord],
) -> Result<Vec<Vec<f64>>> {
    if net_a.dims != net_b.dims {
        return Err(Error::Mismatch("networks differ in architecture".into()));
    }
    let a = network_similarities(net_a, records)?;
    let b = network_similarities(net_b, records)?;
    Ok(average_matrices(&a, &b))
}

pub fn average_matrices(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x + y) / 2.0).collect())
        .collect()
}

/// Retrieval metrics of the averaged networks on records paired 1:1 by
/// position.
pub fn evaluate_pair(
    net_a: &ModelParams,
    net_b: &ModelParams,
    records: &[PairRecord],
) -> Result<RetrievalReport> {
    let sims = averaged_similarities(net_a, net_b, records)?;
    let gt: Vec<usize> = (0..records.len()).collect();
    recall_metrics(&sims, &gt)
}

/// Area under the ROC curve of `score` for separating `positive` from the
/// rest, with ties counted as one half.
pub fn auc(score: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && score[idx[j + 1]] == score[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Predicted clean is `w > tau`; actually clean is `c = 1`.
pub fn split_quality(w: &[f64], c: &[u8], tau: f64) -> Result<SplitQualityReport> {
    if w.len() != c.len() || w.is_empty() {
        return Err(Error::invalid(
            "split_quality needs aligned, non-empty inputs",
        ));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&wi, &ci) in w.iter().zip(c) {
        match (wi > tau, ci == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let positive: Vec<bool> = c.iter().map(|&v| v == 1).collect();
    Ok(SplitQualityReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        accuracy: ratio(tp + tn, w.len()),
        auc: auc(w, &positive),
    })
}
