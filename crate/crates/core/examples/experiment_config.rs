//! Config layering (defaults < file < overrides) and a command run through
//! the same entry point the `prunekit` binary uses.
//!
//! Run with: cargo run --release --example experiment_config

use prunekit::config::{parse_config, Overrides};
use prunekit::runner::{error_line, run_command, Command, RunRequest};

fn main() -> prunekit::Result<()> {
    let dir = std::env::temp_dir().join("prunekit-config-example");
    std::fs::create_dir_all(&dir).map_err(|e| prunekit::Error::Input(e.to_string()))?;
    let file = dir.join("small.json");
    std::fs::write(
        &file,
        r#"{"model": {"vocab_size": 16, "d_model": 16, "d_ff": 32, "context_len": 16},
            "corpus": {"length": 20000},
            "eval": {"last_token_context": 12, "cloze_context": 8},
            "prune": {"rate": 0.4}}"#,
    )
    .map_err(|e| prunekit::Error::Input(e.to_string()))?;

    let overrides = Overrides {
        set: vec!["train.max_steps=200".into(), "prune.rate=0.6".into()],
        seeds: vec![4],
        rates: None,
    };
    let cfg = parse_config(Some(&file), &overrides)?;
    println!(
        "prune.rate {} (file said 0.4), seeds {:?}",
        cfg.prune.rate, cfg.seeds
    );

    let bad = Overrides {
        set: vec!["prune.rate=1.5".into()],
        ..Overrides::default()
    };
    if let Err(e) = parse_config(Some(&file), &bad) {
        println!("rejected: {}", error_line(&e));
    }

    let out_dir = dir.join("run");
    for command in [Command::Train, Command::Prune, Command::Finetune, Command::Eval] {
        let input = (command == Command::Eval).then(|| out_dir.join("finetuned.ckpt"));
        let summary = run_command(&RunRequest {
            command,
            config: cfg.clone(),
            out_dir: out_dir.clone(),
            input,
        })?;
        println!("{:<9} {}", command.name(), summary.message);
    }
    Ok(())
}
