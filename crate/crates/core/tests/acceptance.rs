//! One line per acceptance criterion. Runs as a plain binary so the lines
//! always reach the terminal; exits nonzero when any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::time::Instant;

use common::{
    max_grad_error, model_with_ties, oracle_prune, prunable_values, pruned_set, prunekit, random_case,
    FAST_CONFIG, GRAD_OPS,
};
use prunekit::config::ExperimentConfig;
use prunekit::persistence::{decode_checkpoint, decode_sparse, encode_checkpoint, encode_sparse, CsrMatrix};
use prunekit::runner::build_corpus;
use prunekit::{
    apply_mask, build_mask, build_model, effective_param_count, finetune, iteration_prune_fraction,
    prune_finetune_loop, sparsity, sparsity_at, sweep, train, EvalSuite, FinetuneConfig, ModelConfig,
    PruneConfig, PruneScope, ScheduleKind, SweepResult, TransformerModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits(m: &TransformerModel) -> Vec<u64> {
    m.parameters()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn param_arithmetic() -> Outcome {
    let got: Vec<u64> = [0.1, 0.3, 0.5]
        .iter()
        .map(|&r| effective_param_count(950_000_000, r))
        .collect();
    check(got == [855_000_000, 665_000_000, 475_000_000], format!("{got:?}"))
}

fn gradient_suite() -> Outcome {
    const CASES: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut worst = (0.0f64, "");
    let mut fewest_shapes = usize::MAX;
    for op in GRAD_OPS {
        let mut shapes = BTreeSet::new();
        let mut attempts = 0;
        while shapes.len() < CASES && attempts < 400 {
            attempts += 1;
            let case = random_case(op, &mut rng);
            let shape: Vec<Vec<usize>> = case.inputs.iter().map(|t| t.shape().to_vec()).collect();
            if !shapes.insert(shape) {
                continue;
            }
            let err = max_grad_error(&case.inputs, case.f, rng.random());
            if err > worst.0 {
                worst = (err, op);
            }
        }
        fewest_shapes = fewest_shapes.min(shapes.len());
    }
    check(
        worst.0 < 1e-4 && fewest_shapes >= CASES,
        format!(
            "{} ops, >= {fewest_shapes} distinct shapes each, worst relative error {:.2e} ({})",
            GRAD_OPS.len(),
            worst.0,
            worst.1
        ),
    )
}

fn threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for trial in 0..1000 {
        let levels = [2, 3, 5, 17, 1000][trial % 5];
        let model = model_with_ties(&mut rng, levels);
        let fraction = rng.random_range(0.0..=1.0);
        let scope = if trial % 2 == 0 {
            PruneScope::Global
        } else {
            PruneScope::PerLayer
        };
        let mask = build_mask(&model, fraction, scope, None).map_err(|e| e.to_string())?;
        let values = prunable_values(&model);
        let mags: BTreeSet<u64> = values.iter().flatten().map(|v| v.abs().to_bits()).collect();
        if mags.len() < values.iter().map(Vec::len).sum::<usize>() {
            with_ties += 1;
        }
        if pruned_set(&mask) != oracle_prune(&values, fraction, scope) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("1000 collections ({with_ties} with tied magnitudes), {mismatches} mismatches"),
    )
}

fn sparsity_targeting() -> Outcome {
    let mut model = build_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let n = model.prunable_params() as f64;
    let corpus = common::learnable_corpus(4, 64, 40_000);
    let warmup = FinetuneConfig {
        max_steps: Some(50),
        ..FinetuneConfig::default()
    };
    train(&mut model, &corpus.tokens, &warmup).map_err(|e| e.to_string())?;
    let prune = PruneConfig {
        schedule: ScheduleKind::Linear,
        initial_sparsity: 0.0,
        target_sparsity: 0.5,
        iterations: 5,
        ..PruneConfig::default()
    };
    let ft = FinetuneConfig {
        max_steps: Some(10),
        ..FinetuneConfig::default()
    };
    let out = prune_finetune_loop(&mut model, &prune, &ft, &corpus.tokens).map_err(|e| e.to_string())?;
    let worst = out
        .trajectory
        .iter()
        .map(|r| {
            (r.achieved - sparsity_at(ScheduleKind::Linear, r.iteration, 5, 0.0, 0.5).unwrap()).abs() * n
        })
        .fold(0.0, f64::max);
    let last = sparsity(&out.mask);
    check(
        (last - 0.5).abs() <= 10.0 / n && worst <= 2.0,
        format!("N = {n}, final sparsity {last}, worst step deviation {worst:.2}/N"),
    )
}

fn mask_persistence() -> Outcome {
    let base = build_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let corpus = common::learnable_corpus(5, 64, 40_000);
    let mut checked = 0u64;
    for rate in [0.1, 0.5, 0.9] {
        let mut model = base.clone();
        let mask = build_mask(&model, rate, PruneScope::Global, None).map_err(|e| e.to_string())?;
        let cfg = FinetuneConfig {
            epochs: 10,
            max_steps: Some(100),
            lambda_l1: 1e-4,
            ..FinetuneConfig::default()
        };
        let h = finetune(&mut model, &mask, &corpus.tokens, &cfg).map_err(|e| e.to_string())?;
        if h.len() < 100 {
            return Err(format!("only {} steps ran", h.len()));
        }
        for ((name, t), e) in model.prunable_parameters().iter().zip(mask.entries()) {
            for (v, &keep) in t.data().iter().zip(&e.keep) {
                if !keep {
                    if v.to_bits() != 0 {
                        return Err(format!("{name} holds {v:e} at a pruned position (rate {rate})"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "{checked} pruned weights bit-zero after 100 steps at rates 0.1/0.5/0.9"
    ))
}

fn run_default_sweep() -> Result<(SweepResult, f64), String> {
    let cfg = ExperimentConfig::default();
    let corpus = build_corpus(&cfg).map_err(|e| e.to_string())?;
    let (train_tokens, heldout) = corpus.split(cfg.corpus.holdout_fraction);
    let mut base = build_model(&cfg.model).map_err(|e| e.to_string())?;
    train(&mut base, train_tokens, &cfg.train).map_err(|e| e.to_string())?;
    let suite = EvalSuite::build(&corpus, heldout, &cfg.eval).map_err(|e| e.to_string())?;
    let result = sweep(
        &base,
        &cfg.sweep_rates,
        &cfg.prune,
        &cfg.finetune,
        train_tokens,
        &suite,
        &cfg.seeds,
    )
    .map_err(|e| e.to_string())?;
    Ok((result, corpus.entropy_rate))
}

fn trend(result: &SweepResult) -> Outcome {
    const SLACK: f64 = 0.01;
    let rows = &result.rows;
    let mut ok = rows.iter().all(|r| r.cells.len() >= 3);
    let mut detail = String::new();
    for r in rows {
        detail.push_str(&format!(
            "r={} last {:.3}->{:.3} cloze {:.3}->{:.3}; ",
            r.rate,
            r.before.last_token_accuracy,
            r.after.last_token_accuracy,
            r.before.cloze_accuracy,
            r.after.cloze_accuracy
        ));
        ok &= r.after.last_token_accuracy >= r.before.last_token_accuracy;
        ok &= r.after.cloze_accuracy >= r.before.cloze_accuracy;
    }
    for w in rows.windows(2) {
        ok &= w[1].after.last_token_accuracy <= w[0].after.last_token_accuracy + SLACK;
        ok &= w[1].after.cloze_accuracy <= w[0].after.cloze_accuracy + SLACK;
    }
    check(ok, detail.trim_end_matches("; ").to_string())
}

fn perplexity_floor(result: &SweepResult, entropy_rate: f64) -> Outcome {
    let floor = 0.98 * entropy_rate.exp();
    let mut ppls = vec![result.baseline.perplexity];
    for r in &result.rows {
        ppls.push(r.before.perplexity);
        ppls.extend(r.cells.iter().map(|c| c.after.perplexity));
    }
    let min = ppls.iter().copied().fold(f64::INFINITY, f64::min);
    check(
        min >= floor,
        format!(
            "{} checkpoints, lowest perplexity {min:.3} vs floor {floor:.3}",
            ppls.len()
        ),
    )
}

fn persistence() -> Outcome {
    let mut model = build_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let mask = build_mask(&model, 0.6, PruneScope::Global, None).map_err(|e| e.to_string())?;
    apply_mask(&mut model, &mask).map_err(|e| e.to_string())?;
    let dense = encode_checkpoint(&model, Some(&mask)).map_err(|e| e.to_string())?;
    let (d_model, d_mask) = decode_checkpoint(&dense).map_err(|e| e.to_string())?;
    let dense_ok = bits(&d_model) == bits(&model) && d_mask.as_ref() == Some(&mask);
    let sparse = encode_sparse(&model, &mask).map_err(|e| e.to_string())?;
    let (s_model, s_mask) = decode_sparse(&sparse).map_err(|e| e.to_string())?;
    let sparse_ok = bits(&s_model) == bits(&model) && s_mask == mask;

    // a 512x512 matrix pruned to 0.9 by magnitude
    let (rows, cols) = (512usize, 512usize);
    let mut rng = ChaCha8Rng::seed_from_u64(512);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut mags: Vec<f64> = data.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let k = (0.9 * (rows * cols) as f64).floor() as usize;
    let cut = mags[k - 1];
    let keep: Vec<bool> = data.iter().map(|v| v.abs() > cut).collect();
    let csr = CsrMatrix::from_dense_kept(&data, rows, cols, &keep);
    let n = (rows * cols) as f64;
    let nnz = csr.nnz() as f64;
    let measured = 8.0 * n / csr.payload_bytes() as f64;
    let formula = 8.0 * n / (8.0 * nnz + 4.0 * (rows as f64 + 1.0));
    let rel = (measured - formula).abs() / formula;
    check(
        dense_ok && sparse_ok && rel <= 0.10,
        format!(
            "dense roundtrip {}, sparse roundtrip {}, 512x512 at 0.9: measured ratio {measured:.3} vs formula {formula:.3} ({:.1}% off)",
            if dense_ok { "bit-identical" } else { "MISMATCH" },
            if sparse_ok { "bit-identical" } else { "MISMATCH" },
            100.0 * rel
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("c.json"), FAST_CONFIG).map_err(|e| e.to_string())?;
    for out in ["a", "b"] {
        let o = prunekit(
            d,
            &[
                "sweep", "--config", "c.json", "--out", out, "--seed", "0", "--seed", "1", "--seed", "2",
            ],
            None,
        );
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
    }
    let mut same = true;
    for f in ["sweep.csv", "sweep.md", "config.json"] {
        same &= fs::read(d.join("a").join(f)).ok() == fs::read(d.join("b").join(f)).ok();
    }
    let lines = fs::read_to_string(d.join("a/sweep.csv"))
        .map_err(|e| e.to_string())?
        .lines()
        .count();
    check(
        same,
        format!("two sweep runs, sweep.csv ({lines} lines) and sweep.md byte-identical: {same}"),
    )
}

fn schedule_algebra() -> Outcome {
    let model = build_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let n = model.prunable_params() as f64;
    let (s0, sf, total) = (0.1, 0.8, 8usize);
    let mut worst = 0.0f64;
    for kind in [
        ScheduleKind::OneShot,
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::Exponential { alpha: 3.0 },
    ] {
        let mut mask = build_mask(&model, s0, PruneScope::Global, None).map_err(|e| e.to_string())?;
        for t in 1..=total {
            let target = sparsity_at(kind, t, total, s0, sf).map_err(|e| e.to_string())?;
            let current = sparsity(&mask);
            if target > current {
                let f = iteration_prune_fraction(current, target).map_err(|e| e.to_string())?;
                mask = build_mask(&model, f, PruneScope::Global, Some(&mask)).map_err(|e| e.to_string())?;
            }
        }
        worst = worst.max((sparsity(&mask) - sf).abs() * n);
    }
    let closed = sparsity_at(ScheduleKind::Constant, 1, 2, 0.0, 0.75).map_err(|e| e.to_string())?;
    check(
        worst <= 2.0 * total as f64 && (closed - 0.5).abs() < 1e-12,
        format!("4 schedules, T = {total}, worst final deviation {worst:.2}/N (bound {}/N); constant(0, 0.75, 2, 1) = {closed}", 2 * total),
    )
}

fn main() {
    let started = Instant::now();
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {name}: {tag} [{secs:.1}s] {detail}");
        if outcome.is_err() {
            failed.push(n);
        }
    };
    report(1, "parameter arithmetic", &mut param_arithmetic);
    report(2, "gradient suite", &mut gradient_suite);
    report(3, "threshold oracle", &mut threshold_oracle);
    report(4, "sparsity targeting", &mut sparsity_targeting);
    report(5, "mask persistence", &mut mask_persistence);
    let mut sweep = Err("sweep did not run".to_string());
    report(6, "sweep trend", &mut || {
        sweep = run_default_sweep();
        sweep.as_ref().map_err(Clone::clone).and_then(|(r, _)| trend(r))
    });
    report(7, "perplexity floor", &mut || {
        sweep
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|(r, h)| perplexity_floor(r, *h))
    });
    report(8, "persistence", &mut persistence);
    report(9, "end-to-end determinism", &mut determinism);
    report(10, "schedule algebra", &mut schedule_algebra);
    println!(
        "{} of 10 criteria passed in {:.0}s",
        10 - failed.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
