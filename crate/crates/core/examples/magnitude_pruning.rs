//! Global vs per-matrix magnitude pruning on one model.
//!
//! Run with: cargo run --example magnitude_pruning

use prunekit::pruning::build_mask_threshold;
use prunekit::{
    apply_mask, build_mask, build_model, magnitude_threshold, param_report, ModelConfig, PruneScope, Result,
};

fn main() -> Result<()> {
    let mut model = build_model(&ModelConfig {
        n_layers: 1,
        ..ModelConfig::default()
    })?;
    // make the feed-forward input matrix larger than the rest
    for (name, t) in model.prunable_parameters_mut() {
        if name.ends_with("w_ff1") {
            for v in t.data_mut() {
                *v *= 3.0;
            }
        }
    }

    let all: Vec<Vec<f64>> = model
        .prunable_parameters()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    let slices: Vec<&[f64]> = all.iter().map(|v| v.as_slice()).collect();
    let tau = magnitude_threshold(&slices, 0.5)?;
    println!("global threshold at rate 0.5: {tau:.5}");

    for scope in [PruneScope::Global, PruneScope::PerLayer] {
        let mask = build_mask(&model, 0.5, scope, None)?;
        println!("\n{scope:?}: overall sparsity {:.4}", mask.sparsity());
        for e in mask.entries() {
            println!(
                "  {:<16} {:.3}",
                e.name,
                e.pruned_count() as f64 / e.keep.len() as f64
            );
        }
    }

    // a second event prunes half of what survived
    let first = build_mask(&model, 0.5, PruneScope::Global, None)?;
    let second = build_mask(&model, 0.5, PruneScope::Global, Some(&first))?;
    println!(
        "\ntwo events at 0.5 of remaining: sparsity {:.4}",
        second.sparsity()
    );

    let by_threshold = build_mask_threshold(&model, 0.02, None)?;
    println!(
        "|w| < 0.02 removes {:.4} of the prunable weights",
        by_threshold.sparsity()
    );

    apply_mask(&mut model, &second)?;
    let r = param_report(&model, Some(&second))?;
    println!(
        "after pruning: {} of {} parameters nonzero",
        r.nonzero_params, r.total_params
    );
    Ok(())
}
