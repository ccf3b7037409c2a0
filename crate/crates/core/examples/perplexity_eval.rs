//! Perplexity against the analytic entropy floor of the generating chain,
//! plus last-token and cloze accuracy.
//!
//! Run with: cargo run --release --example perplexity_eval

use prunekit::eval::{generate_corpus_with, EvalSuiteConfig};
use prunekit::{build_model, evaluate, train, EvalSuite, FinetuneConfig, ModelConfig, Result};

fn main() -> Result<()> {
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 32,
        d_ff: 64,
        context_len: 16,
        ..ModelConfig::default()
    };
    let corpus = generate_corpus_with(2, 16, 2, 80_000, 0.1, 0.7)?;
    let (train_part, heldout) = corpus.split(0.1);
    let suite = EvalSuite::build(
        &corpus,
        heldout,
        &EvalSuiteConfig {
            last_token_context: 12,
            cloze_context: 10,
            ..EvalSuiteConfig::default()
        },
    )?;
    println!(
        "entropy rate {:.4} nats, perplexity floor {:.3}",
        corpus.entropy_rate,
        corpus.entropy_rate.exp()
    );

    let mut model = build_model(&cfg)?;
    for steps in [0, 300, 1500] {
        if steps > 0 {
            let ft = FinetuneConfig {
                max_steps: Some(steps),
                seed: steps as u64,
                ..FinetuneConfig::default()
            };
            train(&mut model, train_part, &ft)?;
        }
        let r = evaluate(&model, &suite, None)?;
        println!(
            "after +{steps:>4} steps: perplexity {:.3}  last-token {:.3}  cloze {:.3}",
            r.perplexity, r.last_token_accuracy, r.cloze_accuracy
        );
    }
    Ok(())
}
