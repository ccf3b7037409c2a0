//! CSR export size across sparsities, plus a bit-exact reload.
//!
//! Run with: cargo run --example sparse_export

use prunekit::{
    apply_mask, build_mask, build_model, export_sparse, import_sparse, ModelConfig, PruneScope, Result,
};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("prunekit-sparse-example");
    std::fs::create_dir_all(&dir).map_err(|e| prunekit::Error::Input(e.to_string()))?;
    let path = dir.join("model.sparse");
    let base = build_model(&ModelConfig::default())?;

    println!(
        "{:>8} {:>12} {:>12} {:>8}",
        "sparsity", "sparse B", "dense B", "ratio"
    );
    for rate in [0.0, 0.3, 0.5, 0.7, 0.9, 0.95] {
        let mut model = base.clone();
        let mask = build_mask(&model, rate, PruneScope::Global, None)?;
        apply_mask(&mut model, &mask)?;
        let s = export_sparse(&model, &mask, &path)?;
        println!(
            "{rate:>8} {:>12} {:>12} {:>8.3}",
            s.sparse_bytes, s.dense_bytes, s.compression_ratio
        );

        let (back, back_mask) = import_sparse(&path)?;
        let same = back
            .parameters()
            .iter()
            .zip(model.parameters())
            .all(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        assert!(same && back_mask == mask);
    }
    println!("every reload was bit-identical");
    Ok(())
}
