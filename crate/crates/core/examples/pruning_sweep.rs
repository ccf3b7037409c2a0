//! A reduced pruning-rate sweep: one trained base, one-shot pruning at each
//! rate, per-seed fine-tuning, markdown tables.
//!
//! Run with: cargo run --release --example pruning_sweep

use prunekit::config::ExperimentConfig;
use prunekit::runner::build_corpus;
use prunekit::{build_model, sweep, train, EvalSuite, Result};

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.model.vocab_size = 32;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 128;
    cfg.corpus.length = 150_000;
    cfg.train.epochs = 3;
    cfg.finetune.max_steps = Some(100);
    cfg.eval.last_token_examples = 400;
    cfg.eval.cloze_items = 200;
    cfg.sweep_rates = vec![0.0, 0.3, 0.6, 0.9];
    cfg.validate()?;

    let corpus = build_corpus(&cfg)?;
    let (train_part, heldout) = corpus.split(cfg.corpus.holdout_fraction);
    let mut base = build_model(&cfg.model)?;
    train(&mut base, train_part, &cfg.train)?;
    let suite = EvalSuite::build(&corpus, heldout, &cfg.eval)?;
    let result = sweep(
        &base,
        &cfg.sweep_rates,
        &cfg.prune,
        &cfg.finetune,
        train_part,
        &suite,
        &cfg.seeds,
    )?;
    print!("{}", result.to_markdown());
    Ok(())
}
