//! Weighted superposition of functional contours.
//!
//! Pitch and duration of an utterance are modelled as the overlap-add of
//! contours produced by one generator per communicative function. Each
//! generator pairs a contour network with a weight module whose output,
//! in `(0, 2)`, scales the contour according to the instance's context.
//! Training follows analysis-by-synthesis with a batch-level penalty that
//! keeps mean weights near one.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod net;
pub mod synthgen;
pub mod trainer;
pub mod wcg;

pub use corpus::{
    load_corpus, save_corpus, split_corpus, Corpus, FunctionInstance, FunctionType, ProsodyFrame, Registry,
    RhythmicUnit, Utterance,
};
pub use error::{Error, Result};
pub use eval::{
    paired_t_test, rmse_vocalic, weight_table, CellGrouping, CellKey, PairedTTest, RmseReport, WeightTable,
};
pub use net::{DenseNet, OutputActivation};
pub use synthgen::{generate_corpus, GeneratorSpec, GroundTruth};
pub use trainer::{
    analysis_by_synthesis, decompose, pretrain_freeze, retrain_weights_only, synthesize, TrainHistory, TrainingConfig,
};
pub use wcg::{
    load_checkpoint, save_checkpoint, ContextMode, EmphasisCategory, ModelConfig, ModelSet, WeightTarget,
    WeightedContourGenerator,
};
