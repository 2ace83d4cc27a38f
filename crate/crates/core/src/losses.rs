//! Scalar loss terms and margin schedules: hardest-negative triplet ranking,
//! the all-negatives per-sample loss used for dividing, pseudo-classification
//! cross-entropy, the batch entropy regularizer, adaptive margins, and the
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, entropy_of, ProbVector};

/// Square similarity matrix, `s[i][j] = S(image i, text j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarities {
    n: usize,
    data: Vec<f64>,
}

impl BatchSimilarities {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("similarity matrix must be square"));
        }
        Ok(Self {
            n,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_flat(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::invalid(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub alpha: f64,
    pub m: f64,
}

impl MarginParams {
    pub fn new(alpha: f64, m: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("margin alpha must be > 0"));
        }
        if !(m > 1.0 && m.is_finite()) {
            return Err(Error::invalid("curve parameter m must be > 1"));
        }
        Ok(Self { alpha, m })
    }

    /// `(m^x - 1) / (m - 1) * alpha`.
    pub fn curve(&self, x: f64) -> f64 {
        (self.m.powf(x) - 1.0) / (self.m - 1.0) * self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_pse: f64,
    pub lambda_ent: f64,
}

/// Per-sample outcome of a hardest-negative triplet evaluation, kept for the
/// backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletOutcome {
    pub total: f64,
    pub per_sample: Vec<f64>,
    /// Hardest negative text for image query `i` and its hinge value.
    pub text_negative: Vec<Option<(usize, f64)>>,
    /// Hardest negative image for text query `i` and its hinge value.
    pub image_negative: Vec<Option<(usize, f64)>>,
}

/// Hardest-negative triplet loss where slot `j` is a valid negative for slot
/// `i` only when its item id differs. Distinct ids per slot reduce this to the
/// plain `j != i` rule.
pub fn triplet_hardest_with_ids(
    sims: &BatchSimilarities,
    margins: &[f64],
    image_ids: &[usize],
    text_ids: &[usize],
) -> Result<TripletOutcome> {
    let n = sims.size();
    if margins.len() != n || image_ids.len() != n || text_ids.len() != n {
        return Err(Error::invalid(format!(
            "triplet inputs disagree on batch size {n}"
        )));
    }
    let mut out = TripletOutcome {
        total: 0.0,
        per_sample: vec![0.0; n],
        text_negative: vec![None; n],
        image_negative: vec![None; n],
    };
    for i in 0..n {
        let pos = sims.get(i, i);
        let hardest = |score: &dyn Fn(usize) -> f64, ids: &[usize]| {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if ids[j] == ids[i] {
                    continue;
                }
                let s = score(j);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best
        };
        let mut li = 0.0;
        if let Some((j, s)) = hardest(&|j| sims.get(i, j), text_ids) {
            let h = (margins[i] - pos + s).max(0.0);
            out.text_negative[i] = Some((j, h));
            li += h;
        }
        if let Some((j, s)) = hardest(&|j| sims.get(j, i), image_ids) {
            let h = (margins[i] - pos + s).max(0.0);
            out.image_negative[i] = Some((j, h));
            li += h;
        }
        out.per_sample[i] = li;
        out.total += li;
    }
    Ok(out)
}

/// Hardest-negative triplet ranking loss with a margin per positive pair.
pub fn triplet_hardest(sims: &BatchSimilarities, margins: &[f64]) -> Result<(f64, Vec<f64>)> {
    if margins.iter().any(|m| *m < 0.0) {
        return Err(Error::invalid("triplet margins must be >= 0"));
    }
    let ids: Vec<usize> = (0..sims.size()).collect();
    let out = triplet_hardest_with_ids(sims, margins, &ids, &ids)?;
    Ok((out.total, out.per_sample))
}

/// Per-sample loss summed over every negative in both directions.
pub fn per_sample_division_loss(sims: &BatchSimilarities, alpha: f64) -> Vec<f64> {
    let n = sims.size();
    (0..n)
        .map(|i| {
            let pos = sims.get(i, i);
            let mut l = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                l += (alpha - pos + sims.get(i, j)).max(0.0);
                l += (alpha - pos + sims.get(j, i)).max(0.0);
            }
            l
        })
        .collect()
}

/// Mean cross-entropy between each image prediction and the argmax of the
/// paired caption's prediction.
pub fn pseudo_classification_loss(p_img: &[ProbVector], q_text: &[ProbVector]) -> Result<f64> {
    if p_img.len() != q_text.len() {
        return Err(Error::invalid(format!(
            "batch mismatch: {} image predictions vs {} text predictions",
            p_img.len(),
            q_text.len()
        )));
    }
    if p_img.is_empty() {
        return Err(Error::invalid(
            "pseudo-classification needs a non-empty batch",
        ));
    }
    let mut sum = 0.0;
    for (p, q) in p_img.iter().zip(q_text) {
        if p.len() != q.len() {
            return Err(Error::invalid("class count mismatch"));
        }
        sum += cross_entropy(q.argmax(), p)?;
    }
    Ok(sum / p_img.len() as f64)
}

/// Negative entropy of the batch-mean prediction. Minimal (`-ln K`) exactly
/// when the mean prediction is uniform.
pub fn entropy_regularizer(p_img: &[ProbVector]) -> Result<f64> {
    let mean = mean_prediction(p_img)?;
    Ok(-entropy_of(&mean))
}

pub(crate) fn mean_prediction(p_img: &[ProbVector]) -> Result<Vec<f64>> {
    let first = p_img
        .first()
        .ok_or_else(|| Error::invalid("entropy regularizer needs a non-empty batch"))?;
    let k = first.len();
    let mut mean = vec![0.0; k];
    for p in p_img {
        if p.len() != k {
            return Err(Error::invalid("class count mismatch"));
        }
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v;
        }
    }
    let b = p_img.len() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    Ok(mean)
}

/// Margin for a pseudo-captioned pair from the similarity of the two
/// pseudo-predictions. The similarity is clamped to `[0, 1]` first.
pub fn noisy_margin(s_p: f64, mp: &MarginParams) -> f64 {
    mp.curve(s_p.clamp(0.0, 1.0))
}

/// Exponent of the rectified clean margin.
pub fn clean_margin_exponent(w_c: f64, w_o: f64, has_history: bool, tau: f64) -> f64 {
    let w_c = w_c.clamp(0.0, 1.0);
    let boost = if has_history && w_o >= tau { w_o } else { 0.0 };
    w_c + (1.0 - w_c) * boost
}

pub fn clean_margin(w_c: f64, w_o: f64, has_history: bool, tau: f64, mp: &MarginParams) -> f64 {
    mp.curve(clean_margin_exponent(w_c, w_o, has_history, tau))
}

pub fn total_loss(l_c: f64, l_n: f64, l_pse: f64, l_ent: f64, w: &LossWeights) -> f64 {
    l_c + w.lambda_n * l_n + w.lambda_pse * l_pse + w.lambda_ent * l_ent
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use proptest::prelude::*;

    fn sims(rows: &[&[f64]]) -> BatchSimilarities {
        BatchSimilarities::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    const MP: MarginParams = MarginParams {
        alpha: 0.2,
        m: 10.0,
    };

    #[test]
    fn triplet_examples() {
        let s = sims(&[&[0.9, 0.5, 0.1], &[0.2, 0.95, 0.4], &[0.3, 0.5, 0.9]]);
        let (_, per) = triplet_hardest(&s, &[0.2; 3]).unwrap();
        assert_eq!(per[0], 0.0);

        let s = sims(&[&[0.5, 0.6], &[0.4, 0.7]]);
        let (_, per) = triplet_hardest(&s, &[0.2, 0.2]).unwrap();
        assert!((per[0] - 0.4).abs() < 1e-12);

        let s = sims(&[&[0.3]]);
        let (total, per) = triplet_hardest(&s, &[0.2]).unwrap();
        assert_eq!((total, per), (0.0, vec![0.0]));
    }

    #[test]
    fn non_square_rejected() {
        assert!(BatchSimilarities::new(vec![vec![0.1, 0.2]]).is_err());
    }

    #[test]
    fn division_loss_examples() {
        let l = per_sample_division_loss(&sims(&[&[0.8, 0.3], &[0.1, 0.9]]), 0.2);
        assert_eq!(l[0], 0.0);
        let l = per_sample_division_loss(&sims(&[&[0.4, 0.5], &[0.3, 0.6]]), 0.3);
        assert!((l[0] - 0.6).abs() < 1e-12);
        assert_eq!(per_sample_division_loss(&sims(&[&[0.1]]), 0.2), vec![0.0]);
    }

    #[test]
    fn pseudo_classification_examples() {
        let q = vec![pv(&[0.6, 0.4]), pv(&[0.3, 0.7])];
        let p_perfect = vec![ProbVector::one_hot(2, 0), ProbVector::one_hot(2, 1)];
        assert_eq!(pseudo_classification_loss(&p_perfect, &q).unwrap(), 0.0);

        let p_uniform = vec![ProbVector::uniform(128); 3];
        let q_any = vec![ProbVector::one_hot(128, 5); 3];
        let l = pseudo_classification_loss(&p_uniform, &q_any).unwrap();
        assert!((l - 4.852030263919617).abs() < 1e-9);

        let p = vec![pv(&[0.9, 0.1]), pv(&[0.2, 0.8])];
        let l = pseudo_classification_loss(&p, &q).unwrap();
        assert!((l - 0.164252033486018).abs() < 1e-9);

        assert!(pseudo_classification_loss(&p[..1], &q).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let q = vec![pv(&[0.5, 0.5])];
        let p = vec![pv(&[0.8, 0.2])];
        let l = pseudo_classification_loss(&p, &q).unwrap();
        assert!((l + 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_regularizer_examples() {
        let l = entropy_regularizer(&[ProbVector::uniform(4), ProbVector::uniform(4)]).unwrap();
        assert!((l + 4f64.ln()).abs() < 1e-12);
        let l = entropy_regularizer(&[ProbVector::one_hot(4, 2)]).unwrap();
        assert_eq!(l, 0.0);
        // mean of [1, 0] and [0.5, 0.5] is [0.75, 0.25]
        let l = entropy_regularizer(&[pv(&[1.0, 0.0]), pv(&[0.5, 0.5])]).unwrap();
        assert!((l + 0.5623351446188083).abs() < 1e-9);
    }

    #[test]
    fn entropy_regularizer_minimum_is_uniform() {
        let base = entropy_regularizer(&[ProbVector::uniform(3)]).unwrap();
        let steps = [-0.1, -0.01, 0.0, 0.01, 0.1];
        for &a in &steps {
            for &b in &steps {
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let v = vec![1.0 / 3.0 + a, 1.0 / 3.0 + b, 1.0 / 3.0 - a - b];
                let l = entropy_regularizer(&[pv(&v)]).unwrap();
                assert!(
                    l > base,
                    "perturbation ({a}, {b}) did not increase the loss"
                );
            }
        }
    }

    #[test]
    fn margin_examples() {
        assert!((noisy_margin(1.0, &MP) - 0.2).abs() < 1e-15);
        assert_eq!(noisy_margin(0.0, &MP), 0.0);
        assert!((noisy_margin(0.5, &MP) - 0.048050614).abs() < 1e-6);
        assert_eq!(noisy_margin(-0.3, &MP), 0.0);

        assert!((clean_margin(1.0, 0.3, true, 0.5, &MP) - 0.2).abs() < 1e-15);
        assert_eq!(clean_margin_exponent(0.3, 0.4, true, 0.5), 0.3);
        assert_eq!(clean_margin_exponent(0.3, 0.9, false, 0.5), 0.3);
        assert!((clean_margin_exponent(0.5, 0.8, true, 0.5) - 0.9).abs() < 1e-15);
        assert!((clean_margin(0.5, 0.8, true, 0.5, &MP) - 0.154295).abs() < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            lambda_n: 1.0,
            lambda_pse: 1.0,
            lambda_ent: 10.0,
        };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 2.0, 3.0, 0.1, &w) - 7.0).abs() < 1e-12);
        let w0 = LossWeights { lambda_n: 0.0, ..w };
        assert_eq!(total_loss(1.0, 1e6, 0.0, 0.0, &w0), 1.0);
    }

    fn brute_triplet(s: &BatchSimilarities, margins: &[f64]) -> Vec<f64> {
        let n = s.size();
        (0..n)
            .map(|i| {
                let mut out = 0.0;
                let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| s.get(i, j)).collect();
                let col: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| s.get(j, i)).collect();
                if let Some(m) = row.iter().cloned().reduce(f64::max) {
                    out += (margins[i] - s.get(i, i) + m).max(0.0);
                }
                if let Some(m) = col.iter().cloned().reduce(f64::max) {
                    out += (margins[i] - s.get(i, i) + m).max(0.0);
                }
                out
            })
            .collect()
    }

    proptest! {
        #[test]
        fn triplet_matches_brute_force(
            n in 1usize..=16,
            raw in proptest::collection::vec(-1f64..1.0, 256),
            margin in 0f64..0.5,
        ) {
            let s = BatchSimilarities::from_flat(n, raw[..n * n].to_vec()).unwrap();
            let margins = vec![margin; n];
            let (total, per) = triplet_hardest(&s, &margins).unwrap();
            let expected = brute_triplet(&s, &margins);
            for (a, b) in per.iter().zip(&expected) {
                prop_assert!(*a >= 0.0);
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((total - expected.iter().sum::<f64>()).abs() < 1e-12);
        }

        #[test]
        fn division_loss_zero_when_positive_dominates(
            n in 2usize..=10,
            raw in proptest::collection::vec(-1f64..0.5, 100),
            alpha in 0.01f64..0.3,
        ) {
            let mut data = raw[..n * n].to_vec();
            for i in 0..n {
                let row_max = (0..n).filter(|&j| j != i).map(|j| data[i * n + j]).fold(f64::MIN, f64::max);
                let col_max = (0..n).filter(|&j| j != i).map(|j| data[j * n + i]).fold(f64::MIN, f64::max);
                data[i * n + i] = row_max.max(col_max) + alpha + 1e-9;
            }
            let s = BatchSimilarities::from_flat(n, data).unwrap();
            let l = per_sample_division_loss(&s, alpha);
            for v in l {
                prop_assert_eq!(v, 0.0);
            }
        }

        #[test]
        fn margins_monotone_and_bounded(x in 0f64..1.0, dx in 1e-6f64..0.5, m in 1.01f64..100.0, alpha in 0.01f64..1.0) {
            let mp = MarginParams::new(alpha, m).unwrap();
            let y = (x + dx).min(1.0);
            let a = noisy_margin(x, &mp);
            let b = noisy_margin(y, &mp);
            prop_assert!(a >= 0.0 && b <= alpha * (1.0 + 1e-12));
            if y > x {
                prop_assert!(b > a);
            }
            prop_assert!((mp.curve(1.0) - alpha).abs() < 1e-12);
        }

        #[test]
        fn clean_margin_no_history_ignores_w_o(w_c in 0f64..1.0, w_o in 0f64..1.0, tau in 0.01f64..0.99) {
            prop_assert_eq!(
                clean_margin(w_c, w_o, false, tau, &MP),
                clean_margin(w_c, 0.0, true, tau, &MP)
            );
        }

        #[test]
        fn pseudo_classification_permutation_invariant(
            logits in proptest::collection::vec(-3f64..3.0, 24),
            rot in 0usize..4,
        ) {
            let p: Vec<ProbVector> = logits[..12].chunks(3).map(|c| softmax(c).unwrap()).collect();
            let q: Vec<ProbVector> = logits[12..].chunks(3).map(|c| softmax(c).unwrap()).collect();
            let base = pseudo_classification_loss(&p, &q).unwrap();
            let mut pr = p.clone();
            let mut qr = q.clone();
            pr.rotate_left(rot);
            qr.rotate_left(rot);
            let rotated = pseudo_classification_loss(&pr, &qr).unwrap();
            prop_assert!((base - rotated).abs() < 1e-12);
        }
    }
}
