//! Effective parameter counts after pruning, for a 950M-parameter model and
//! for the toy decoder.
//!
//! Run with: cargo run --example param_accounting

use prunekit::{
    apply_mask, build_mask, build_model, effective_param_count, param_report, ModelConfig, PruneScope,
};

fn main() -> prunekit::Result<()> {
    println!("{:>6} {:>14}", "rate", "n_params");
    for rate in [0.0, 0.1, 0.3, 0.5] {
        println!("{rate:>6} {:>14}", effective_param_count(950_000_000, rate));
    }

    let mut model = build_model(&ModelConfig::default())?;
    let total = model.total_params();
    let mask = build_mask(&model, 0.5, PruneScope::Global, None)?;
    apply_mask(&mut model, &mask)?;
    let r = param_report(&model, Some(&mask))?;
    println!("\ntoy model at rate 0.5");
    println!("  total params        {total}");
    println!("  prunable params     {}", r.prunable_params);
    println!("  nonzero params      {}", r.nonzero_params);
    // the table column counts the rate against every parameter
    println!("  effective (table)   {}", effective_param_count(total, 0.5));
    Ok(())
}
