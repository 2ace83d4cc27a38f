//! Noisy-correspondence learning for cross-modal retrieval.
//!
//! A dual-encoder image/caption model is trained with two networks that
//! divide the training pairs for each other into clean and noisy subsets.
//! Clean pairs train the matching model and a pseudo-classifier head; noisy
//! images borrow captions from similar clean images, with margins scaled by
//! how similar they are.

pub mod correspondence;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use correspondence::{CleanProbability, DataSplit, PredictionHistory, PseudoCaptionAssignment};
pub use data::{DatasetBundle, DatasetMeta, PairRecord, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{RetrievalReport, SplitQualityReport};
pub use losses::{BatchSimilarities, LossWeights, MarginParams};
pub use model::{GradientBundle, JointEmbedding, ModelDims, ModelParams, OptimizerState};
pub use numerics::{Gmm1D, ProbVector};
pub use trainer::{
    EpochReport, Method, NetworkPair, PseudoCaptionSource, TrainConfig, TrainOutcome,
};
