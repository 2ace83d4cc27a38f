//! Scalar and vector kernels shared by the losses, the dividing step and the
//! evaluation harness: softmax, cross-entropy, KL divergence, cosine
//! similarity, entropy, and a two-component 1-D Gaussian mixture fitted by EM.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied before every log or division by a probability.
pub const LOG_EPS: f64 = 1e-12;

/// Lower bound on each mixture component's variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

pub const EM_MAX_ITERS: usize = 100;
pub const EM_TOL: f64 = 1e-6;

/// Norm below which a vector is treated as having no direction.
pub const ZERO_NORM: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector of length at least two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "probability vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "probability entries must be finite and >= 0",
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 2, "uniform distribution needs k >= 2");
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        assert!(k >= 2 && index < k);
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// First index of the maximum; NaN entries are never selected.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains a non-finite value"));
    }
    Ok(ProbVector(softmax_unchecked(logits)))
}

/// Max-shifted softmax without input validation. Callers guarantee finiteness.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

pub fn cross_entropy(hard_label: usize, p: &ProbVector) -> Result<f64> {
    let prob = p.as_slice().get(hard_label).ok_or_else(|| {
        Error::invalid(format!(
            "label {hard_label} out of range for {} classes",
            p.len()
        ))
    })?;
    Ok(-prob.max(LOG_EPS).ln())
}

/// D_KL(p || q) with both arguments clamped below by [`LOG_EPS`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&a, &b)| {
            let a = a.max(LOG_EPS);
            let b = b.max(LOG_EPS);
            a * (a / b).ln()
        })
        .sum())
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine of the angle between `u` and `v`, defined as 0 when either norm is
/// below [`ZERO_NORM`].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine_similarity length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_unchecked(u, v))
}

pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(p.as_slice())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(LOG_EPS).ln()).sum::<f64>()
}

/// Two-component Gaussian mixture over scalars, components sorted by mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub mean: [f64; 2],
    pub variance: [f64; 2],
    pub weight: [f64; 2],
}

/// Result of an EM run with the log-likelihood of every visited parameter set.
#[derive(Debug, Clone)]
pub struct EmTrace {
    pub gmm: Gmm1D,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub degenerate: bool,
}

impl Gmm1D {
    fn degenerate(value: f64) -> Self {
        Self {
            mean: [value; 2],
            variance: [VARIANCE_FLOOR; 2],
            weight: [0.5; 2],
        }
    }

    fn log_component(&self, k: usize, x: f64) -> f64 {
        let var = self.variance[k];
        let d = x - self.mean[k];
        self.weight[k].ln() - 0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
    }

    /// Total log-likelihood of `values` under the mixture.
    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&x| log_sum_exp(self.log_component(0, x), self.log_component(1, x)))
            .sum()
    }

    /// Responsibility of the low-mean component at `value`.
    pub fn posterior_low_mean(&self, value: f64) -> f64 {
        if self.mean[0] == self.mean[1]
            && self.variance[0] == self.variance[1]
            && self.weight[0] == self.weight[1]
        {
            return 0.5;
        }
        let a = self.log_component(0, value);
        let b = self.log_component(1, value);
        if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
            return 0.5;
        }
        (a - log_sum_exp(a, b)).exp().clamp(0.0, 1.0)
    }

    fn sorted(mut self) -> Self {
        if self.mean[0] > self.mean[1] {
            self.mean.swap(0, 1);
            self.variance.swap(0, 1);
            self.weight.swap(0, 1);
        }
        self
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR))
}

pub fn gmm2_fit_em(values: &[f64], max_iters: usize, tol: f64) -> Result<Gmm1D> {
    gmm2_fit_em_traced(values, max_iters, tol).map(|t| t.gmm)
}

/// EM for a two-component mixture. Initialization comes from the bottom and
/// top quartiles of the sorted data, so repeated fits are bit-identical.
pub fn gmm2_fit_em_traced(values: &[f64], max_iters: usize, tol: f64) -> Result<EmTrace> {
    if values.len() < 2 {
        return Err(Error::invalid("gmm2_fit_em needs at least 2 values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "gmm2_fit_em input contains a non-finite value",
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Ok(EmTrace {
            gmm: Gmm1D::degenerate(lo),
            log_likelihood: Vec::new(),
            converged: true,
            degenerate: true,
        });
    }

    let q = (sorted.len() / 4).max(1);
    let (m0, v0) = mean_var(&sorted[..q]);
    let (m1, v1) = mean_var(&sorted[sorted.len() - q..]);
    let mut gmm = Gmm1D {
        mean: [m0, m1],
        variance: [v0, v1],
        weight: [0.5, 0.5],
    };

    let n = values.len() as f64;
    let mut resp = vec![0.0; values.len()];
    let mut trace = Vec::with_capacity(max_iters + 1);
    let mut converged = false;

    for _ in 0..=max_iters {
        // E-step: responsibilities of component 0 and the current log-likelihood.
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(values) {
            let a = gmm.log_component(0, x);
            let b = gmm.log_component(1, x);
            let lse = log_sum_exp(a, b);
            ll += lse;
            *r = (a - lse).exp();
        }
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            if (ll - prev).abs() < tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if trace.len() > max_iters {
            break;
        }

        // M-step.
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        let mut next = gmm;
        for (k, nk) in [(0usize, n0), (1usize, n1)] {
            next.weight[k] = nk / n;
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let weight_of = |r: f64| if k == 0 { r } else { 1.0 - r };
            let mean = resp
                .iter()
                .zip(values)
                .map(|(&r, &x)| weight_of(r) * x)
                .sum::<f64>()
                / nk;
            let var = resp
                .iter()
                .zip(values)
                .map(|(&r, &x)| weight_of(r) * (x - mean) * (x - mean))
                .sum::<f64>()
                / nk;
            next.mean[k] = mean;
            next.variance[k] = var.max(VARIANCE_FLOOR);
        }
        gmm = next;
    }

    Ok(EmTrace {
        gmm: gmm.sorted(),
        log_likelihood: trace,
        converged,
        degenerate: false,
    })
}

pub fn gmm2_posterior_low_mean(gmm: &Gmm1D, value: f64) -> f64 {
    gmm.posterior_low_mean(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!(p.as_slice()[1] >= 0.0 && p.as_slice()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[1.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(3, &ProbVector::one_hot(4, 3)).unwrap(), 0.0);
        let ce = cross_entropy(0, &ProbVector::uniform(4)).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(1, &pv(&[0.9, 0.1])).unwrap();
        assert!((ce - std::f64::consts::LN_10).abs() < 1e-9);
        assert!(cross_entropy(2, &pv(&[0.9, 0.1])).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[0.2, 0.3, 0.5]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        let kl = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-9);
        // 0.5 ln(0.5/(1-eps)) + 0.5 ln(0.5/eps) with eps = 1e-12
        let eps = 1e-12;
        let kl = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[1.0 - eps, eps])).unwrap();
        let expected = 0.5 * (0.5 / (1.0 - eps)).ln() + 0.5 * (0.5 / eps).ln();
        assert!(kl.is_finite());
        assert!((kl - expected).abs() < 1e-9);
        assert!(kl_divergence(&pv(&[0.5, 0.5]), &ProbVector::uniform(3)).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, -1.0], &[3.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&ProbVector::uniform(4)) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&ProbVector::one_hot(4, 1)), 0.0);
        assert!((entropy(&pv(&[0.75, 0.25])) - 0.5623351446188083).abs() < 1e-9);
    }

    fn bimodal_sample(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = Normal::new(0.01, 0.005).unwrap();
        let hi = Normal::new(1.0, 0.005).unwrap();
        let mut v: Vec<f64> = (0..50).map(|_| lo.sample(&mut rng)).collect();
        v.extend((0..50).map(|_| hi.sample(&mut rng)));
        v
    }

    /// Dense grid over both means with the generating scale and equal weights.
    fn grid_search_means(values: &[f64]) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=300 {
            let m0 = -0.1 + i as f64 * 0.001;
            for j in 0..=400 {
                let m1 = 0.8 + j as f64 * 0.001;
                let g = Gmm1D {
                    mean: [m0, m1],
                    variance: [0.005 * 0.005; 2],
                    weight: [0.5, 0.5],
                };
                let ll = g.log_likelihood(values);
                if ll > best.0 {
                    best = (ll, m0, m1);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn gmm_recovers_separated_modes() {
        let values = bimodal_sample(7);
        let g = gmm2_fit_em(&values, EM_MAX_ITERS, EM_TOL).unwrap();
        assert!((0.0..=0.05).contains(&g.mean[0]), "{g:?}");
        assert!((0.9..=1.1).contains(&g.mean[1]), "{g:?}");
        assert!((0.4..=0.6).contains(&g.weight[0]));
        assert!((0.4..=0.6).contains(&g.weight[1]));
        let (m0, m1) = grid_search_means(&values);
        assert!((g.mean[0] - m0).abs() <= 0.001, "{} vs {m0}", g.mean[0]);
        assert!((g.mean[1] - m1).abs() <= 0.001, "{} vs {m1}", g.mean[1]);
    }

    #[test]
    fn gmm_degenerate_data() {
        let g = gmm2_fit_em(&[0.3; 10], EM_MAX_ITERS, EM_TOL).unwrap();
        assert_eq!(g.mean, [0.3, 0.3]);
        assert_eq!(g.variance, [VARIANCE_FLOOR; 2]);
        assert_eq!(g.weight, [0.5, 0.5]);
        assert_eq!(g.posterior_low_mean(0.3), 0.5);
        assert!(gmm2_fit_em(&[1.0], EM_MAX_ITERS, EM_TOL).is_err());
        assert!(gmm2_fit_em(&[], EM_MAX_ITERS, EM_TOL).is_err());
    }

    #[test]
    fn gmm_two_points() {
        let g = gmm2_fit_em(&[1.0, 0.0], EM_MAX_ITERS, EM_TOL).unwrap();
        assert!(g.mean[0].abs() < 1e-12 && (g.mean[1] - 1.0).abs() < 1e-12);
        assert_eq!(g.variance, [VARIANCE_FLOOR; 2]);
    }

    #[test]
    fn gmm_fit_is_bit_identical() {
        let values = bimodal_sample(3);
        let a = gmm2_fit_em(&values, EM_MAX_ITERS, EM_TOL).unwrap();
        let b = gmm2_fit_em(&values, EM_MAX_ITERS, EM_TOL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_examples() {
        let sym = Gmm1D {
            mean: [0.0, 1.0],
            variance: [0.04, 0.04],
            weight: [0.5, 0.5],
        };
        assert!((sym.posterior_low_mean(0.5) - 0.5).abs() < 1e-9);
        let sep = Gmm1D {
            mean: [0.0, 1.0],
            variance: [0.01, 0.01],
            weight: [0.5, 0.5],
        };
        assert!(gmm2_posterior_low_mean(&sep, 0.0) > 0.99);
        assert!(gmm2_posterior_low_mean(&sep, 1.0) < 0.01);
    }

    proptest! {
        #[test]
        fn softmax_is_simplex(logits in proptest::collection::vec(-1e3f64..1e3, 2..20)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(ProbVector::new(p.clone().into_vec()).is_ok());
            let shifted: Vec<f64> = logits.iter().map(|x| x + 17.0).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative(a in proptest::collection::vec(-5f64..5.0, 2..8), shift in -3f64..3.0) {
            let p = softmax(&a).unwrap();
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * i as f64).collect();
            let q = softmax(&b).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-9);
        }

        #[test]
        fn em_log_likelihood_monotone(seed in 0u64..10_000, gap in 0.1f64..3.0, frac in 0.1f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 80;
            let n_lo = ((n as f64) * frac) as usize;
            let lo = Normal::new(0.0, 0.2).unwrap();
            let hi = Normal::new(gap, 0.3).unwrap();
            let values: Vec<f64> = (0..n)
                .map(|i| if i < n_lo { lo.sample(&mut rng) } else { hi.sample(&mut rng) })
                .collect();
            let trace = gmm2_fit_em_traced(&values, EM_MAX_ITERS, EM_TOL).unwrap();
            for w in trace.log_likelihood.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
            }
            prop_assert!(trace.gmm.mean[0] <= trace.gmm.mean[1]);
            prop_assert!((trace.gmm.weight[0] + trace.gmm.weight[1] - 1.0).abs() < 1e-9);
        }

        #[test]
        fn posterior_monotone_for_equal_variances(
            m0 in -2f64..0.0, gap in 0.01f64..3.0, var in 0.01f64..2.0, w0 in 0.05f64..0.95,
            x in -5f64..5.0, dx in 0.0f64..2.0,
        ) {
            let g = Gmm1D { mean: [m0, m0 + gap], variance: [var, var], weight: [w0, 1.0 - w0] };
            prop_assert!(g.posterior_low_mean(x + dx) <= g.posterior_low_mean(x) + 1e-12);
        }
    }
}
