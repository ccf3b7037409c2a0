//! Builds the default toy decoder, prints its parameter layout and trains it
//! briefly on a learnable order-2 Markov corpus.
//!
//! Run with: cargo run --release --example toy_transformer

use prunekit::eval::generate_corpus_with;
use prunekit::{build_model, param_report, perplexity, train, FinetuneConfig, ModelConfig, Result};

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let mut model = build_model(&cfg)?;
    for (name, t) in model.parameters() {
        println!("{name:<22} {:?}", t.shape());
    }
    let report = param_report(&model, None)?;
    println!(
        "total {} params, {} prunable",
        report.total_params, report.prunable_params
    );

    let corpus = generate_corpus_with(0, cfg.vocab_size, 2, 200_000, 0.1, 0.7)?;
    let (train_part, heldout) = corpus.split(0.1);
    println!("entropy floor: perplexity >= {:.2}", corpus.entropy_rate.exp());
    println!("untrained perplexity {:.2}", perplexity(&model, heldout)?);

    let history = train(
        &mut model,
        train_part,
        &FinetuneConfig {
            epochs: 4,
            ..FinetuneConfig::default()
        },
    )?;
    for e in history.entries.iter().step_by(500) {
        println!("step {:>4}  loss {:.4}", e.step, e.loss);
    }
    println!("trained perplexity {:.2}", perplexity(&model, heldout)?);

    let logits = model.forward(&heldout[..8])?;
    println!("logits for 8 tokens: {:?}", logits.shape());
    Ok(())
}
