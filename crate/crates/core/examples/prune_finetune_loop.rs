//! Iterative pruning to 80% sparsity on an exponential schedule, with a
//! short masked fine-tune after every step.
//!
//! Run with: cargo run --release --example prune_finetune_loop

use prunekit::eval::generate_corpus_with;
use prunekit::{
    build_model, perplexity, prune_finetune_loop, train, FinetuneConfig, ModelConfig, PruneConfig, Result,
    ScheduleKind,
};

fn main() -> Result<()> {
    let cfg = ModelConfig {
        vocab_size: 32,
        d_model: 32,
        d_ff: 128,
        ..ModelConfig::default()
    };
    let corpus = generate_corpus_with(1, cfg.vocab_size, 2, 120_000, 0.1, 0.7)?;
    let (train_part, heldout) = corpus.split(0.1);
    let mut model = build_model(&cfg)?;
    train(
        &mut model,
        train_part,
        &FinetuneConfig {
            max_steps: Some(1500),
            ..FinetuneConfig::default()
        },
    )?;
    println!(
        "dense perplexity {:.3} (floor {:.3})",
        perplexity(&model, heldout)?,
        corpus.entropy_rate.exp()
    );

    let prune = PruneConfig {
        schedule: ScheduleKind::exponential(),
        initial_sparsity: 0.2,
        target_sparsity: 0.8,
        iterations: 4,
        ..PruneConfig::default()
    };
    let ft = FinetuneConfig {
        learning_rate: 0.3,
        max_steps: Some(100),
        ..FinetuneConfig::default()
    };
    let out = prune_finetune_loop(&mut model, &prune, &ft, train_part)?;
    println!("{:>4} {:>10} {:>10}", "t", "target", "achieved");
    for r in &out.trajectory {
        println!("{:>4} {:>10.5} {:>10.5}", r.iteration, r.target, r.achieved);
    }
    println!(
        "{} fine-tuning steps, final perplexity {:.3} at sparsity {:.4}",
        out.history.len(),
        perplexity(&model, heldout)?,
        out.mask.sparsity()
    );
    Ok(())
}
