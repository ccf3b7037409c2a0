//! Magnitude-based weight pruning for a small decoder-only transformer.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense `f64` arrays and a tape-based
//!   reverse-mode autodiff graph.
//! - [`model`]: a pre-norm decoder whose attention and feed-forward matrices
//!   form the prunable set.
//! - [`pruning`] and [`schedules`]: magnitude thresholds, masks, and
//!   sparsity trajectories.
//! - [`trainer`]: SGD, masked fine-tuning with optional L1, and the
//!   iterative prune–finetune loop.
//! - [`eval`]: synthetic Markov corpora, perplexity / accuracy metrics and
//!   the pruning-rate sweep.
//! - [`persistence`]: dense checkpoints and CSR sparse export.
//! - [`config`] and [`runner`]: JSON experiment configs and the commands
//!   behind the `prunekit` binary.

pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod persistence;
pub mod pruning;
pub mod runner;
pub mod schedules;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use eval::{
    cloze_accuracy, evaluate, generate_corpus, last_token_accuracy, perplexity, sweep, EvalReport, EvalSuite,
    MarkovChain, SweepResult, SyntheticCorpus,
};
pub use model::{build_model, param_report, ModelConfig, ParamReport, TransformerModel};
pub use persistence::{export_sparse, import_sparse, load_checkpoint, save_checkpoint};
pub use pruning::{
    apply_mask, build_mask, effective_param_count, magnitude_threshold, sparsity, PruneConfig, PruneScope,
    PruningMask, RateBasis,
};
pub use schedules::{iteration_prune_fraction, sparsity_at, ScheduleKind};
pub use tensor::Tensor;
pub use trainer::{finetune, prune_finetune_loop, sgd_step, train, FinetuneConfig, TrainHistory};
