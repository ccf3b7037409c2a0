//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use prunekit::{
    build_model, Graph, ModelConfig, PruneScope, PruningMask, Result, Tensor, TransformerModel, Var,
};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for the relative error. Central differences carry
/// about `eps·|f|/h ≈ 1e-10·|f|` of rounding noise, which swamps gradients
/// much below this size.
pub const FD_FLOOR: f64 = 1e-5;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(f(inputs) ⊙ r)` where `r` is a fixed random weighting, so
/// every output entry contributes a distinct gradient.
fn scalar_loss<F>(
    inputs: &[Tensor],
    weights: &Tensor,
    f: &F,
    trainable: bool,
) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
    let out = f(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    Ok((g, vars, loss))
}

/// Largest relative error between `backward()` and central differences
/// over every entry of every input.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F, weight_seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    max_grad_error_with_step(inputs, f, weight_seed, FD_STEP)
}

pub fn max_grad_error_with_step<F>(inputs: &[Tensor], f: F, weight_seed: u64, step: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    use rand::SeedableRng;
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = f(&mut probe, &vars).unwrap();
    let out_shape = probe.value(out).shape().to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(weight_seed);
    let weights = random_tensor(&mut rng, &out_shape, -1.0, 1.0);

    let (mut g, vars, loss) = scalar_loss(inputs, &weights, &f, true).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let (g, _, loss) = scalar_loss(xs, &weights, &f, false).unwrap();
        g.value(loss).item()
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for (j, &a) in analytic[i].iter().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let plus = eval(&xs);
            xs[i].data_mut()[j] = orig - step;
            let minus = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Pruned positions by full sort: every candidate sorted by
/// `(|w|, matrix index, flat index)`, first `floor(fraction·n)` taken.
pub fn oracle_prune(weights: &[Vec<f64>], fraction: f64, scope: PruneScope) -> BTreeSet<(usize, usize)> {
    let take = |cands: Vec<(usize, usize)>| -> Vec<(usize, usize)> {
        let k = (fraction * cands.len() as f64).floor() as usize;
        let mut sorted = cands;
        sorted.sort_by(|a, b| {
            weights[a.0][a.1]
                .abs()
                .total_cmp(&weights[b.0][b.1].abs())
                .then(a.cmp(b))
        });
        sorted.truncate(k);
        sorted
    };
    match scope {
        PruneScope::Global => take(
            weights
                .iter()
                .enumerate()
                .flat_map(|(g, w)| (0..w.len()).map(move |i| (g, i)))
                .collect(),
        )
        .into_iter()
        .collect(),
        PruneScope::PerLayer => weights
            .iter()
            .enumerate()
            .flat_map(|(g, w)| take((0..w.len()).map(|i| (g, i)).collect()))
            .collect(),
    }
}

pub fn pruned_set(mask: &PruningMask) -> BTreeSet<(usize, usize)> {
    mask.entries()
        .iter()
        .enumerate()
        .flat_map(|(g, e)| {
            e.keep
                .iter()
                .enumerate()
                .filter(|(_, k)| !**k)
                .map(move |(i, _)| (g, i))
        })
        .collect()
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 4,
        n_heads: 2,
        n_layers: 2,
        d_ff: 6,
        context_len: 5,
        seed,
    }
}

/// A small model whose prunable weights are drawn from `levels` distinct
/// magnitudes with random signs, so ties are common.
pub fn model_with_ties(rng: &mut impl Rng, levels: usize) -> TransformerModel {
    let mut model = build_model(&tiny_config(rng.random())).unwrap();
    for (_, t) in model.prunable_parameters_mut() {
        for v in t.data_mut() {
            let mag = rng.random_range(0..levels) as f64 / levels as f64;
            *v = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
    model
}

pub fn prunable_values(model: &TransformerModel) -> Vec<Vec<f64>> {
    model
        .prunable_parameters()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect()
}

/// Two-sided binomial interval for the success count of `n` trials at
/// probability `p`, by normal approximation with continuity correction.
pub fn binomial_interval(n: usize, p: f64, z: f64) -> (f64, f64) {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    ((mean - z * sd - 0.5) / n as f64, (mean + z * sd + 0.5) / n as f64)
}

/// z for a two-sided 99% interval.
pub const Z99: f64 = 2.5758293035489004;

pub fn weight_bits(model: &TransformerModel) -> Vec<u64> {
    model
        .parameters()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One op applied to random inputs of a random shape.
pub struct GradCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

pub const GRAD_OPS: [&str; 18] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_bias",
    "mul",
    "scale",
    "gelu",
    "softmax_rows",
    "softmax_cols",
    "layer_norm",
    "cross_entropy",
    "sum",
    "abs_sum",
    "causal_softmax",
    "gather_rows",
    "slice_block",
    "assemble",
    "transformer",
];

fn dims(rng: &mut impl Rng, max_elems: usize) -> (usize, usize) {
    loop {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        if r * c <= max_elems {
            return (r, c);
        }
    }
}

/// Entries in [-1, 1] but at least 1e-3 away from zero, where `|x|` kinks.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(1e-3..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_case(op: &'static str, rng: &mut impl Rng) -> GradCase {
    fn t(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        random_tensor(rng, shape, -1.0, 1.0)
    }
    let (r, c) = dims(rng, 64);
    let (inputs, f): (Vec<Tensor>, OpFn) = match op {
        "matmul" => {
            let k = rng.random_range(1..=8);
            let n = rng.random_range(1..=8);
            (
                vec![t(&[r, k], rng), t(&[k, n], rng)],
                Box::new(|g, v| g.matmul(v[0], v[1])),
            )
        }
        "matmul_nt" => {
            let k = rng.random_range(1..=8);
            let n = rng.random_range(1..=8);
            (
                vec![t(&[r, k], rng), t(&[n, k], rng)],
                Box::new(|g, v| g.matmul_nt(v[0], v[1])),
            )
        }
        "add" => (
            vec![t(&[r, c], rng), t(&[r, c], rng)],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        "add_bias" => (
            vec![t(&[r, c], rng), t(&[c], rng)],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        ),
        "mul" => (
            vec![t(&[r, c], rng), t(&[r, c], rng)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        "scale" => {
            let k = rng.random_range(-3.0..3.0);
            (vec![t(&[r, c], rng)], Box::new(move |g, v| Ok(g.scale(v[0], k))))
        }
        "gelu" => (
            vec![t(&[r, c], rng).map(|x| 3.0 * x)],
            Box::new(|g, v| Ok(g.gelu(v[0]))),
        ),
        "softmax_rows" => (vec![t(&[r, c], rng)], Box::new(|g, v| g.softmax(v[0], 1))),
        "softmax_cols" => (vec![t(&[r, c], rng)], Box::new(|g, v| g.softmax(v[0], 0))),
        "layer_norm" => {
            let c = c.max(2);
            (
                vec![t(&[r, c], rng), t(&[c], rng), t(&[c], rng)],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
            )
        }
        "cross_entropy" => {
            let c = c.max(2);
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            (
                vec![t(&[r, c], rng).map(|x| 2.0 * x)],
                Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
            )
        }
        "sum" => (vec![t(&[r, c], rng)], Box::new(|g, v| Ok(g.sum(v[0])))),
        "abs_sum" => {
            let keep: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.7)).collect();
            (
                vec![away_from_zero(rng, &[r, c])],
                Box::new(move |g, v| g.abs_sum(v[0], Some(keep.clone()))),
            )
        }
        "causal_softmax" => {
            let n = rng.random_range(1..=24);
            (
                vec![t(&[n, n], rng)],
                Box::new(|g, v| {
                    let m = g.causal_mask(v[0])?;
                    g.softmax(m, 1)
                }),
            )
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..rng.random_range(1..=8))
                .map(|_| rng.random_range(0..r))
                .collect();
            (
                vec![t(&[r, c], rng)],
                Box::new(move |g, v| g.gather_rows(v[0], &idx)),
            )
        }
        "slice_block" => {
            let (r0, c0) = (rng.random_range(0..r), rng.random_range(0..c));
            let (h, w) = (rng.random_range(1..=r - r0), rng.random_range(1..=c - c0));
            (
                vec![t(&[r, c], rng)],
                Box::new(move |g, v| g.slice_block(v[0], r0, c0, h, w)),
            )
        }
        "assemble" => {
            let c2 = rng.random_range(1..=4);
            let r0 = rng.random_range(0..=2);
            (
                vec![t(&[r, c], rng), t(&[r, c2], rng)],
                Box::new(move |g, v| g.assemble(&[(v[0], 0, 0), (v[1], r0, c)], r + r0, c + c2)),
            )
        }
        "transformer" => {
            // layer norm over 2 or 3 features is close to a sign function,
            // which central differences cannot resolve at h = 1e-6
            let n_heads = rng.random_range(1..=2);
            let cfg = ModelConfig {
                vocab_size: rng.random_range(3..=8),
                d_model: [4, 6][rng.random_range(0..2)],
                n_heads,
                n_layers: rng.random_range(1..=2),
                d_ff: rng.random_range(2..=8),
                context_len: rng.random_range(3..=6),
                seed: rng.random(),
            };
            let model = build_model(&cfg).unwrap();
            let len = rng.random_range(2..=cfg.context_len);
            let seq: Vec<usize> = (0..=len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            let inputs = model
                .parameters()
                .iter()
                .map(|(_, p)| p.map(|x| x * 5.0))
                .collect();
            (
                inputs,
                Box::new(move |g, v| {
                    let logits = model.forward_graph(g, v, &[&seq[..len]])?;
                    g.cross_entropy(logits, &seq[1..])
                }),
            )
        }
        other => panic!("no gradient case for {other}"),
    };
    GradCase { op, inputs, f }
}

/// Fast model for tests that need real training.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        context_len: 16,
        seed,
    }
}

/// Learnable order-2 corpus over `vocab` tokens.
pub fn learnable_corpus(seed: u64, vocab: usize, length: usize) -> prunekit::SyntheticCorpus {
    prunekit::eval::generate_corpus_with(seed, vocab, 2, length, 0.1, 0.7).unwrap()
}

/// A config small enough for every CLI command to finish in about a second.
pub const FAST_CONFIG: &str = r#"{
  "model": {"vocab_size": 16, "d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32, "context_len": 16},
  "corpus": {"length": 8000},
  "train": {"max_steps": 60},
  "finetune": {"max_steps": 10},
  "eval": {"last_token_examples": 200, "last_token_context": 12, "cloze_items": 100, "cloze_context": 8},
  "seeds": [0, 1],
  "sweep_rates": [0.1, 0.5]
}
"#;

/// Runs the `prunekit` binary in `cwd` with `PRUNEKIT_OUT` cleared unless given.
pub fn prunekit(cwd: &std::path::Path, args: &[&str], out_env: Option<&str>) -> std::process::Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_prunekit"));
    cmd.current_dir(cwd).args(args).env_remove("PRUNEKIT_OUT");
    if let Some(v) = out_env {
        cmd.env("PRUNEKIT_OUT", v);
    }
    cmd.output().expect("binary runs")
}
