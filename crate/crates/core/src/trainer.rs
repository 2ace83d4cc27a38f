//! Warmup, the co-teaching main loop, batch assembly and checkpoint
//! selection.
//!
//! Every main epoch runs in two phases. First each network scores the whole
//! training set and splits it into clean and noisy subsets. Then network A
//! trains on B's split and network B trains on A's split. The phases are
//! independent per network, so `threads = 2` runs them side by side and gives
//! the same result as `threads = 1`.
//!
//! Randomness: network initialization and every (epoch, network) training
//! phase draw from their own `ChaCha8Rng` stream of the config seed.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::{
    assign_pseudo_captions, compute_clean_probabilities, oscillation,
    oscillation_clean_probabilities, split_dataset, CleanProbability, DataSplit, PredictionHistory,
    SplitDiagnostic,
};
use crate::data::{stream_rng, PairRecord};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_pair, network_similarities, split_quality, RetrievalReport, SplitQualityReport,
};
use crate::losses::{
    clean_margin, noisy_margin, per_sample_division_loss, BatchSimilarities, MarginParams,
};
use crate::model::{
    adam_step, classifier_probs, gradients_from, BatchForward, ClassifierTerm, LossBreakdown,
    LossSpec, ModelDims, ModelParams, OptimizerState, StepBatch, TripletTerm, CLIP_NORM,
};
use crate::numerics::{Gmm1D, ProbVector};

const INIT_STREAM: u64 = 1 << 32;
const PHASE_STREAM: u64 = 1 << 33;

/// How noisy images find their pseudo-caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoCaptionSource {
    /// Cosine of classifier pseudo-predictions.
    Prediction,
    /// Cosine of joint image embeddings.
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dividing, pseudo-classification, pseudo-captioning and rectified
    /// margins.
    Pc2,
    /// Plain hardest-negative triplet training on all pairs.
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub m: f64,
    pub lambda_n: f64,
    pub lambda_pse: f64,
    pub lambda_ent: f64,
    pub warmup_epochs: usize,
    /// Includes the warmup epochs.
    pub total_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Drop the noisy subset instead of pseudo-captioning it.
    pub mismatch_filter: bool,
    /// When off, the clean margin exponent is `w_c` alone.
    pub rectify_clean_margin: bool,
    pub pseudo_caption_source: PseudoCaptionSource,
    pub method: Method,
    /// 1 or 2.
    pub threads: usize,
    /// `dims.n_classes` is the number of pseudo-classes K.
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            tau: 0.5,
            alpha: 0.2,
            m: 10.0,
            lambda_n: 1.0,
            lambda_pse: 1.0,
            lambda_ent: 10.0,
            warmup_epochs: 3,
            total_epochs: 30,
            lr: 5e-4,
            seed: 0,
            mismatch_filter: false,
            rectify_clean_margin: true,
            pseudo_caption_source: PseudoCaptionSource::Prediction,
            method: Method::Pc2,
            threads: 1,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", "must lie in (0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if !(self.m > 1.0 && self.m.is_finite()) {
            return Err(Error::config("m", "must be greater than 1"));
        }
        for (field, v) in [
            ("lambda_n", self.lambda_n),
            ("lambda_pse", self.lambda_pse),
            ("lambda_ent", self.lambda_ent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if self.warmup_epochs == 0 {
            return Err(Error::config("warmup_epochs", "must be at least 1"));
        }
        if self.total_epochs <= self.warmup_epochs {
            return Err(Error::config("total_epochs", "must exceed warmup_epochs"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !matches!(self.threads, 1 | 2) {
            return Err(Error::config("threads", "must be 1 or 2"));
        }
        let d = &self.dims;
        if d.n_classes < 2 {
            return Err(Error::config("dims.n_classes", "must be at least 2"));
        }
        for (field, v) in [
            ("dims.d_img_in", d.d_img_in),
            ("dims.d_word", d.d_word),
            ("dims.d_joint", d.d_joint),
            ("dims.vocab_size", d.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    fn margin_params(&self) -> MarginParams {
        MarginParams {
            alpha: self.alpha,
            m: self.m,
        }
    }

    fn noisy_term_active(&self) -> bool {
        !self.mismatch_filter && self.lambda_n != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Net {
    A,
    B,
}

impl Net {
    fn other(self) -> Net {
        match self {
            Net::A => Net::B,
            Net::B => Net::A,
        }
    }
}

/// Parameters, optimizer moments and prediction history of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub history: PredictionHistory,
}

impl NetworkState {
    pub fn new(dims: ModelDims, init_seed: u64, n_train: usize) -> Self {
        let params = ModelParams::init(dims, init_seed);
        let optimizer = OptimizerState::new(&params);
        Self {
            params,
            optimizer,
            history: PredictionHistory::new(n_train),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPair {
    pub net_a: NetworkState,
    pub net_b: NetworkState,
}

impl NetworkPair {
    pub fn new(config: &TrainConfig, n_train: usize) -> Self {
        let seed_of = |net: u64| stream_rng(config.seed, INIT_STREAM + net).next_u64();
        Self {
            net_a: NetworkState::new(config.dims, seed_of(0), n_train),
            net_b: NetworkState::new(config.dims, seed_of(1), n_train),
        }
    }

    pub fn get(&self, net: Net) -> &NetworkState {
        match net {
            Net::A => &self.net_a,
            Net::B => &self.net_b,
        }
    }
}

/// RNG for one network's training phase in one epoch.
pub fn phase_rng(seed: u64, epoch: usize, net: Net) -> ChaCha8Rng {
    let net = match net {
        Net::A => 0,
        Net::B => 1,
    };
    stream_rng(seed, PHASE_STREAM + 2 * epoch as u64 + net)
}

/// One network's view of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Division {
    pub divider: Net,
    pub losses: Vec<f64>,
    pub w: CleanProbability,
    pub gmm: Gmm1D,
    pub split: DataSplit,
    /// Oscillation weight of each clean index as last seen while the other
    /// network trained on this split; `None` without prediction history.
    pub oscillation: Vec<Option<f64>>,
}

impl Division {
    /// The network this division trains.
    pub fn trains(&self) -> Net {
        self.divider.other()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based, counting warmup epochs.
    pub epoch: usize,
    pub phase: Phase,
    /// Per-term means over steps, averaged over both networks.
    pub loss_c: f64,
    pub loss_n: f64,
    pub loss_pse: f64,
    pub loss_ent: f64,
    /// Split produced by network A (which trains network B). Warmup and
    /// baseline epochs count every pair as clean.
    pub clean_count: usize,
    pub noisy_count: usize,
    pub val_rsum: f64,
    pub seconds: f64,
    /// A's and B's divisions, empty outside the main phase.
    pub divisions: Vec<Division>,
}

/// Split quality of both networks' divisions against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitQualityPair {
    pub net_a: SplitQualityReport,
    pub net_b: SplitQualityReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_rsum: f64,
    /// Best networks, rounded to the checkpoint precision.
    pub best_a: ModelParams,
    pub best_b: ModelParams,
    /// Test metrics of the rounded best networks.
    pub test: RetrievalReport,
    /// Divisions the best networks would make of the training set.
    pub split_quality: SplitQualityPair,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    sum: LossBreakdown,
    steps: usize,
}

impl LossSums {
    fn add(&mut self, l: &LossBreakdown) {
        self.sum.clean += l.clean;
        self.sum.noisy += l.noisy;
        self.sum.pse += l.pse;
        self.sum.ent += l.ent;
        self.sum.total += l.total;
        self.steps += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.steps.max(1) as f64;
        LossBreakdown {
            clean: self.sum.clean / n,
            noisy: self.sum.noisy / n,
            pse: self.sum.pse / n,
            ent: self.sum.ent / n,
            total: self.sum.total / n,
        }
    }
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::Divergence {
            epoch,
            batch,
            detail,
        },
        other => other,
    }
}

fn apply_step(
    net: &mut NetworkState,
    batch: &StepBatch<'_>,
    fwd: &BatchForward,
    spec: &LossSpec,
    lr: f64,
) -> Result<LossBreakdown> {
    let (loss, mut grads) = gradients_from(&net.params, batch, fwd, spec)?;
    grads.clip_global_norm(CLIP_NORM);
    adam_step(&mut net.params, &mut net.optimizer, &grads, lr)?;
    if !net.params.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(loss)
}

/// `steps` batches of `min(batch_size, len)` consecutive entries of a cyclic
/// walk over `order`.
fn cyclic_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let size = batch_size.min(n);
    let steps = n.div_ceil(batch_size);
    (0..steps)
        .map(|s| (0..size).map(|k| order[(s * batch_size + k) % n]).collect())
        .collect()
}

fn plain_triplet_epoch(
    net: &mut NetworkState,
    train: &[PairRecord],
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut sums = LossSums::default();
    for (b, idx) in cyclic_batches(&order, config.batch_size).iter().enumerate() {
        let batch = StepBatch {
            images: idx.iter().map(|&i| train[i].regions.as_slice()).collect(),
            texts: idx.iter().map(|&i| train[i].tokens.as_slice()).collect(),
        };
        let slots: Vec<usize> = (0..idx.len()).collect();
        let spec = LossSpec {
            clean: Some(TripletTerm {
                images: slots.clone(),
                texts: slots,
                margins: vec![config.alpha; idx.len()],
                weight: 1.0,
            }),
            ..LossSpec::default()
        };
        let step = BatchForward::compute(&net.params, &batch)
            .and_then(|fwd| apply_step(net, &batch, &fwd, &spec, config.lr))
            .map_err(|e| with_context(e, epoch, b))?;
        sums.add(&step);
    }
    Ok(sums.mean())
}

/// Trains one network with the plain triplet loss on all pairs for
/// `config.warmup_epochs` epochs (numbered from 1). Returns the mean loss of
/// each epoch.
pub fn warmup(
    net: &mut NetworkState,
    which: Net,
    train: &[PairRecord],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    (1..=config.warmup_epochs)
        .map(|epoch| {
            let mut rng = phase_rng(config.seed, epoch, which);
            plain_triplet_epoch(net, train, config, epoch, &mut rng).map(|l| l.clean)
        })
        .collect()
}

/// Scores every training pair with `params` and splits the set with a
/// two-component mixture over the per-sample losses.
pub fn divide(
    params: &ModelParams,
    divider: Net,
    train: &[PairRecord],
    config: &TrainConfig,
) -> Result<Division> {
    let sims = BatchSimilarities::new(network_similarities(params, train)?)?;
    let losses = per_sample_division_loss(&sims, config.alpha);
    let (w, gmm) = compute_clean_probabilities(&losses)?;
    let split = split_dataset(&w, config.tau)?;
    Ok(Division {
        divider,
        oscillation: vec![None; losses.len()],
        losses,
        w,
        gmm,
        split,
    })
}

fn prob_vector(p: Vec<f64>) -> Result<ProbVector> {
    ProbVector::new(p).map_err(|e| Error::Divergence {
        epoch: 0,
        batch: 0,
        detail: format!("invalid pseudo-prediction: {e}"),
    })
}

/// One main-phase step of `net` on the given clean and noisy training
/// indices. Pseudo-predictions of the clean images are appended to
/// `predictions`.
#[allow(clippy::too_many_arguments)]
fn main_step(
    net: &mut NetworkState,
    train: &[PairRecord],
    clean: &[usize],
    noisy: &[usize],
    w: &CleanProbability,
    config: &TrainConfig,
    epoch: usize,
    predictions: &mut Vec<(usize, ProbVector)>,
    osc_weights: &mut [Option<f64>],
) -> Result<LossBreakdown> {
    let bc = clean.len();
    let batch = StepBatch {
        images: clean
            .iter()
            .chain(noisy)
            .map(|&i| train[i].regions.as_slice())
            .collect(),
        texts: clean.iter().map(|&i| train[i].tokens.as_slice()).collect(),
    };
    let fwd = BatchForward::compute(&net.params, &batch)?;
    let mp = config.margin_params();
    let p_clean: Vec<Vec<f64>> = (0..bc)
        .map(|s| classifier_probs(&net.params, fwd.image_embedding(s)))
        .collect();

    let epoch_tag = epoch as u32;
    let mut margins = Vec::with_capacity(bc);
    if config.rectify_clean_margin {
        let mut current = Vec::with_capacity(bc);
        let mut osc = Vec::new();
        for (s, &i) in clean.iter().enumerate() {
            let cur = prob_vector(p_clean[s].clone())?;
            if let Some(prev) = net.history.previous(i, epoch_tag) {
                osc.push(oscillation(prev, &cur)?);
            }
            current.push(cur);
        }
        let w_o = oscillation_clean_probabilities(&osc)?;
        let mut next_o = w_o.iter();
        for &i in clean {
            let has_history = net.history.previous(i, epoch_tag).is_some();
            let wo = if has_history {
                *next_o.next().unwrap()
            } else {
                0.0
            };
            osc_weights[i] = has_history.then_some(wo);
            margins.push(clean_margin(w.0[i], wo, has_history, config.tau, &mp));
        }
        predictions.extend(clean.iter().copied().zip(current));
    } else {
        for (s, &i) in clean.iter().enumerate() {
            margins.push(clean_margin(w.0[i], 0.0, false, config.tau, &mp));
            predictions.push((i, prob_vector(p_clean[s].clone())?));
        }
    }
    let slots: Vec<usize> = (0..bc).collect();
    let mut spec = LossSpec {
        clean: Some(TripletTerm {
            images: slots.clone(),
            texts: slots.clone(),
            margins,
            weight: 1.0,
        }),
        ..LossSpec::default()
    };

    if !noisy.is_empty() {
        let noisy_slots: Vec<usize> = (bc..bc + noisy.len()).collect();
        let assignment = match config.pseudo_caption_source {
            PseudoCaptionSource::Prediction => {
                let p_noisy: Vec<Vec<f64>> = noisy_slots
                    .iter()
                    .map(|&s| classifier_probs(&net.params, fwd.image_embedding(s)))
                    .collect();
                assign_pseudo_captions(&p_noisy, &p_clean)?
            }
            PseudoCaptionSource::Embedding => {
                let e_noisy: Vec<&[f64]> = noisy_slots
                    .iter()
                    .map(|&s| fwd.image_embedding(s))
                    .collect();
                let e_clean: Vec<&[f64]> = slots.iter().map(|&s| fwd.image_embedding(s)).collect();
                assign_pseudo_captions(&e_noisy, &e_clean)?
            }
        };
        if let Some(a) = assignment {
            spec.noisy = Some(TripletTerm {
                images: noisy_slots,
                texts: a.source,
                margins: a.similarity.iter().map(|&s| noisy_margin(s, &mp)).collect(),
                weight: config.lambda_n,
            });
        }
    }
    if config.lambda_pse != 0.0 || config.lambda_ent != 0.0 {
        spec.classifier = Some(ClassifierTerm {
            images: slots.clone(),
            texts: slots,
            pse_weight: config.lambda_pse,
            ent_weight: config.lambda_ent,
        });
    }
    apply_step(net, &batch, &fwd, &spec, config.lr)
}

/// Trains `net` for one main epoch on a split made by the other network.
///
/// Clean batches walk a shuffled copy of `split.clean` cyclically for
/// `ceil(|clean| / B)` steps. Each step also draws `min(B, |noisy|)` distinct
/// noisy indices, unless the noisy term is disabled. Pseudo-predictions of
/// the clean images are stored in the history under `epoch` at the end.
/// Oscillation weights used for clean margins are written to `osc_weights`.
#[allow(clippy::too_many_arguments)]
pub fn train_on_split(
    net: &mut NetworkState,
    train: &[PairRecord],
    split: &DataSplit,
    w: &CleanProbability,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    osc_weights: &mut [Option<f64>],
) -> Result<LossBreakdown> {
    if w.len() != train.len() || osc_weights.len() != train.len() {
        return Err(Error::invalid(
            "clean probabilities must cover the training set",
        ));
    }
    let mut order = split.clean.clone();
    order.shuffle(rng);
    let use_noisy = config.noisy_term_active() && !split.noisy.is_empty();
    let mut sums = LossSums::default();
    let mut predictions = Vec::with_capacity(split.clean.len());
    for (b, clean) in cyclic_batches(&order, config.batch_size).iter().enumerate() {
        let noisy: Vec<usize> = if use_noisy {
            let k = config.batch_size.min(split.noisy.len());
            index::sample(rng, split.noisy.len(), k)
                .into_iter()
                .map(|j| split.noisy[j])
                .collect()
        } else {
            Vec::new()
        };
        let step = main_step(
            net,
            train,
            clean,
            &noisy,
            w,
            config,
            epoch,
            &mut predictions,
            osc_weights,
        )
        .map_err(|e| with_context(e, epoch, b))?;
        sums.add(&step);
    }
    net.history.update(epoch as u32, predictions)?;
    Ok(sums.mean())
}

fn run_pair<T: Send>(
    threads: usize,
    a: impl FnOnce() -> T + Send,
    b: impl FnOnce() -> T + Send,
) -> (T, T) {
    if threads >= 2 {
        std::thread::scope(|s| {
            let hb = s.spawn(b);
            let ra = a();
            (ra, hb.join().expect("network B phase panicked"))
        })
    } else {
        (a(), b())
    }
}

fn mean_pair(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        clean: (a.clean + b.clean) / 2.0,
        noisy: (a.noisy + b.noisy) / 2.0,
        pse: (a.pse + b.pse) / 2.0,
        ent: (a.ent + b.ent) / 2.0,
        total: (a.total + b.total) / 2.0,
    }
}

fn epoch_report(
    epoch: usize,
    phase: Phase,
    loss: LossBreakdown,
    divisions: Vec<Division>,
    n: usize,
) -> EpochReport {
    let (clean_count, noisy_count) = divisions
        .first()
        .map(|d| (d.split.clean.len(), d.split.noisy.len()))
        .unwrap_or((n, 0));
    EpochReport {
        epoch,
        phase,
        loss_c: loss.clean,
        loss_n: loss.noisy,
        loss_pse: loss.pse,
        loss_ent: loss.ent,
        clean_count,
        noisy_count,
        val_rsum: 0.0,
        seconds: 0.0,
        divisions,
    }
}

/// One co-teaching epoch: divide with both networks, then train each on the
/// other's division.
pub fn run_main_epoch(
    pair: &mut NetworkPair,
    train: &[PairRecord],
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport> {
    let (div_a, div_b) = run_pair(
        config.threads,
        || divide(&pair.net_a.params, Net::A, train, config),
        || divide(&pair.net_b.params, Net::B, train, config),
    );
    let (mut div_a, mut div_b) = (div_a?, div_b?);
    let NetworkPair { net_a, net_b } = pair;
    let (loss_a, loss_b) = run_pair(
        config.threads,
        || {
            let mut rng = phase_rng(config.seed, epoch, Net::A);
            let d = &mut div_b;
            train_on_split(
                net_a,
                train,
                &d.split,
                &d.w,
                config,
                epoch,
                &mut rng,
                &mut d.oscillation,
            )
        },
        || {
            let mut rng = phase_rng(config.seed, epoch, Net::B);
            let d = &mut div_a;
            train_on_split(
                net_b,
                train,
                &d.split,
                &d.w,
                config,
                epoch,
                &mut rng,
                &mut d.oscillation,
            )
        },
    );
    let loss = mean_pair(&loss_a?, &loss_b?);
    Ok(epoch_report(
        epoch,
        Phase::Main,
        loss,
        vec![div_a, div_b],
        train.len(),
    ))
}

fn plain_pair_epoch(
    pair: &mut NetworkPair,
    train: &[PairRecord],
    config: &TrainConfig,
    epoch: usize,
    phase: Phase,
) -> Result<EpochReport> {
    let NetworkPair { net_a, net_b } = pair;
    let (la, lb) = run_pair(
        config.threads,
        || {
            plain_triplet_epoch(
                net_a,
                train,
                config,
                epoch,
                &mut phase_rng(config.seed, epoch, Net::A),
            )
        },
        || {
            plain_triplet_epoch(
                net_b,
                train,
                config,
                epoch,
                &mut phase_rng(config.seed, epoch, Net::B),
            )
        },
    );
    let loss = mean_pair(&la?, &lb?);
    Ok(epoch_report(epoch, phase, loss, Vec::new(), train.len()))
}

fn check_data(
    train: &[PairRecord],
    val: &[PairRecord],
    test: &[PairRecord],
    config: &TrainConfig,
) -> Result<()> {
    if train.len() < 2 {
        return Err(Error::invalid("training needs at least 2 pairs"));
    }
    if val.is_empty() || test.is_empty() {
        return Err(Error::invalid(
            "training needs non-empty validation and test splits",
        ));
    }
    let d = config.dims;
    for r in train.iter().chain(val).chain(test) {
        if r.regions.iter().any(|row| row.len() != d.d_img_in) {
            return Err(Error::Mismatch(format!(
                "record {} has region width other than dims.d_img_in = {}",
                r.id, d.d_img_in
            )));
        }
        if r.tokens.iter().any(|&t| t as usize >= d.vocab_size) {
            return Err(Error::Mismatch(format!(
                "record {} has a token outside dims.vocab_size = {}",
                r.id, d.vocab_size
            )));
        }
    }
    Ok(())
}

/// Per-index rows for the split diagnostic dump of one division.
pub fn split_diagnostics(d: &Division) -> Vec<SplitDiagnostic> {
    let mut clean = vec![false; d.losses.len()];
    for &i in &d.split.clean {
        clean[i] = true;
    }
    (0..d.losses.len())
        .map(|i| SplitDiagnostic {
            index: i,
            loss: d.losses[i],
            w: d.w.0[i],
            w_o: d.oscillation[i],
            assigned_clean: clean[i],
        })
        .collect()
}

/// Split quality of the divisions both networks make of `train`.
pub fn division_quality(
    net_a: &ModelParams,
    net_b: &ModelParams,
    train: &[PairRecord],
    config: &TrainConfig,
) -> Result<SplitQualityPair> {
    let c: Vec<u8> = train.iter().map(|r| r.c).collect();
    let da = divide(net_a, Net::A, train, config)?;
    let db = divide(net_b, Net::B, train, config)?;
    Ok(SplitQualityPair {
        net_a: split_quality(&da.w.0, &c, config.tau)?,
        net_b: split_quality(&db.w.0, &c, config.tau)?,
    })
}

/// Full run: warmup, main epochs, best-validation selection and test
/// evaluation. `on_epoch` sees every report as soon as it is complete; an
/// error from it aborts the run.
pub fn train_with(
    train: &[PairRecord],
    val: &[PairRecord],
    test: &[PairRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(train, val, test, config)?;
    let mut pair = NetworkPair::new(config, train.len());
    let mut history = Vec::with_capacity(config.total_epochs);
    let mut best: Option<(usize, f64, ModelParams, ModelParams)> = None;
    for epoch in 1..=config.total_epochs {
        let started = Instant::now();
        let warm = epoch <= config.warmup_epochs;
        let mut report = match (warm, config.method) {
            (true, _) => plain_pair_epoch(&mut pair, train, config, epoch, Phase::Warmup)?,
            (false, Method::Triplet) => {
                plain_pair_epoch(&mut pair, train, config, epoch, Phase::Main)?
            }
            (false, Method::Pc2) => run_main_epoch(&mut pair, train, config, epoch)?,
        };
        report.val_rsum = evaluate_pair(&pair.net_a.params, &pair.net_b.params, val)?.rsum;
        report.seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss_c {:.4} clean {} val rsum {:.2}",
            report.loss_c,
            report.clean_count,
            report.val_rsum
        );
        if best.as_ref().is_none_or(|b| report.val_rsum > b.1) {
            best = Some((
                epoch,
                report.val_rsum,
                pair.net_a.params.clone(),
                pair.net_b.params.clone(),
            ));
        }
        on_epoch(&report)?;
        history.push(report);
    }
    let (best_epoch, best_val_rsum, a, b) = best.expect("at least one epoch ran");
    let (best_a, best_b) = (a.rounded_to_f32(), b.rounded_to_f32());
    let test = evaluate_pair(&best_a, &best_b, test)?;
    let split_quality = division_quality(&best_a, &best_b, train, config)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_rsum,
        best_a,
        best_b,
        test,
        split_quality,
    })
}

pub fn train(
    train: &[PairRecord],
    val: &[PairRecord],
    test: &[PairRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train, val, test, config, |_| Ok(()))
}
