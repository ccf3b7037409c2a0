//! Plain-SGD training, masked fine-tuning and the iterative
//! prune–finetune loop.
//!
//! An epoch is one pass over the corpus cut into non-overlapping windows of
//! `context_len + 1` tokens (inputs plus shifted targets). Window order is
//! reshuffled every epoch from the config seed, so runs are bit-reproducible.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{is_prunable_name, TransformerModel};
use crate::pruning::{apply_mask, build_mask, sparsity, PruneConfig, PruningMask};
use crate::schedules::{iteration_prune_fraction, sparsity_at};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L1 coefficient λ on surviving prunable weights.
    pub lambda_l1: f64,
    /// Global L2 norm cap on the gradient.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Stop early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 2,
            learning_rate: 1.0,
            batch_size: 8,
            lambda_l1: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
            max_steps: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::validation("lambda_l1", "must be nonnegative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::validation("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    /// Mean next-token cross-entropy of the batch, nats/token.
    pub loss: f64,
    pub sparsity: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    /// Appends `other`, renumbering its steps to follow ours.
    pub fn append(&mut self, other: TrainHistory) {
        let offset = self.entries.last().map_or(0, |e| e.step + 1);
        self.entries.extend(other.entries.into_iter().map(|mut e| {
            e.step += offset;
            e
        }));
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,sparsity,wall_ms")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{:.3}", e.step, e.loss, e.sparsity, e.wall_ms)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii")
    }
}

/// Per-parameter gradients, aligned with [`TransformerModel::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &TransformerModel) -> Self {
        Gradients {
            grads: model
                .parameters()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Zeroes gradient entries at pruned positions.
    pub fn mask(&mut self, model: &TransformerModel, mask: &PruningMask) {
        let mut entries = mask.entries().iter();
        for ((name, _), g) in model.parameters().iter().zip(&mut self.grads) {
            if !is_prunable_name(name) {
                continue;
            }
            let e = entries.next().expect("mask checked against model");
            for (v, &k) in g.iter_mut().zip(&e.keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for v in self.grads.iter_mut().flat_map(|g| g.iter_mut()) {
                *v *= s;
            }
        }
    }
}

/// Positions of the prunable matrices within the bound parameter list.
fn prunable_slots(model: &TransformerModel) -> Vec<usize> {
    model
        .parameters()
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| is_prunable_name(n))
        .map(|(i, _)| i)
        .collect()
}

/// `λ·Σ|w|` over surviving prunable weights, as a graph node.
/// `params` must come from [`TransformerModel::bind`] on the same graph.
pub fn l1_penalty(
    g: &mut Graph,
    model: &TransformerModel,
    params: &[Var],
    mask: Option<&PruningMask>,
    lambda_l1: f64,
) -> Result<Var> {
    if let Some(m) = mask {
        m.check_matches(model)?;
    }
    let mut total: Option<Var> = None;
    for (j, slot) in prunable_slots(model).into_iter().enumerate() {
        let keep = mask.map(|m| m.entries()[j].keep.clone());
        let s = g.abs_sum(params[slot], keep)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(crate::tensor::Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, lambda_l1))
}

/// Value of [`l1_penalty`] without building a graph.
pub fn l1_penalty_value(model: &TransformerModel, mask: Option<&PruningMask>, lambda_l1: f64) -> f64 {
    let mut total = 0.0;
    for (j, (_, t)) in model.prunable_parameters().iter().enumerate() {
        let keep = mask.map(|m| &m.entries()[j].keep);
        for (i, v) in t.data().iter().enumerate() {
            if keep.is_none_or(|k| k[i]) {
                total += v.abs();
            }
        }
    }
    lambda_l1 * total
}

/// Cross-entropy on a batch of windows plus gradients for every parameter.
/// Each window holds `len + 1` tokens: inputs and their shifted targets.
pub fn compute_gradients(
    model: &TransformerModel,
    windows: &[&[usize]],
    mask: Option<&PruningMask>,
    lambda_l1: f64,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let inputs: Vec<&[usize]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    let logits = model.forward_graph(&mut g, &params, &inputs)?;
    let ce = g.cross_entropy(logits, &targets)?;
    let ce_value = g.value(ce).item();
    let loss = if lambda_l1 > 0.0 {
        let pen = l1_penalty(&mut g, model, &params, mask, lambda_l1)?;
        g.add(ce, pen)?
    } else {
        ce
    };
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|&p| g.take_grad(p).unwrap_or_else(|| vec![0.0; g.value(p).len()]))
        .collect();
    Ok((ce_value, Gradients { grads }))
}

/// `w ← w − lr·g`. With a mask, pruned positions ignore their gradient and
/// are set to exactly 0.0 after the update.
pub fn sgd_step(
    model: &mut TransformerModel,
    grads: &Gradients,
    learning_rate: f64,
    mask: Option<&PruningMask>,
) -> Result<()> {
    if let Some(m) = mask {
        m.check_matches(model)?;
    }
    let n_params = model.parameters().len();
    if grads.grads.len() != n_params {
        return Err(Error::Contract(format!(
            "expected gradients for {n_params} parameters, got {}",
            grads.grads.len()
        )));
    }
    let mut entries = mask.map(|m| m.entries().iter());
    for ((name, t), g) in model.parameters_mut().into_iter().zip(&grads.grads) {
        if g.len() != t.len() {
            return Err(Error::Contract(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                t.len()
            )));
        }
        let keep = match entries.as_mut() {
            Some(it) if is_prunable_name(&name) => Some(&it.next().expect("checked").keep),
            _ => None,
        };
        match keep {
            Some(keep) => {
                for ((w, d), &k) in t.data_mut().iter_mut().zip(g).zip(keep) {
                    *w = if k { *w - learning_rate * d } else { 0.0 };
                }
            }
            None => {
                for (w, d) in t.data_mut().iter_mut().zip(g) {
                    *w -= learning_rate * d;
                }
            }
        }
    }
    Ok(())
}

/// Splits a corpus into windows of `context_len + 1` tokens with stride
/// `context_len`, dropping the trailing partial window. A corpus shorter
/// than one window yields itself as the only window.
pub fn corpus_windows(corpus: &[usize], context_len: usize) -> Result<Vec<&[usize]>> {
    if corpus.len() < 2 {
        return Err(Error::Input(format!(
            "corpus of {} tokens has no next-token pairs",
            corpus.len()
        )));
    }
    if corpus.len() <= context_len {
        return Ok(vec![corpus]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + context_len < corpus.len() {
        out.push(&corpus[start..start + context_len + 1]);
        start += context_len;
    }
    Ok(out)
}

fn run_training(
    model: &mut TransformerModel,
    corpus: &[usize],
    config: &FinetuneConfig,
    mask: Option<&PruningMask>,
) -> Result<TrainHistory> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    if let Some(&t) = corpus.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(Error::Input(format!(
            "corpus token {t} outside vocabulary of size {}",
            model.config.vocab_size
        )));
    }
    if let Some(m) = mask {
        m.check_matches(model)?;
    }
    let windows = corpus_windows(corpus, model.config.context_len)?;
    let current_sparsity = mask.map_or(0.0, sparsity);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = TrainHistory::default();
    let started = Instant::now();
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|max| step >= max) {
                break 'epochs;
            }
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| windows[i]).collect();
            let (loss, mut grads) = compute_gradients(model, &batch, mask, config.lambda_l1)?;
            if let Some(m) = mask {
                grads.mask(model, m);
            }
            if let Some(c) = config.grad_clip {
                grads.clip(c);
            }
            sgd_step(model, &grads, config.learning_rate, mask)?;
            history.entries.push(HistoryEntry {
                step,
                loss,
                sparsity: current_sparsity,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
    }
    Ok(history)
}

/// Trains a dense model.
pub fn train(
    model: &mut TransformerModel,
    corpus: &[usize],
    config: &FinetuneConfig,
) -> Result<TrainHistory> {
    run_training(model, corpus, config, None)
}

/// Trains under a fixed mask: pruned weights are zeroed up front and stay
/// exactly zero after every step.
pub fn finetune(
    model: &mut TransformerModel,
    mask: &PruningMask,
    corpus: &[usize],
    config: &FinetuneConfig,
) -> Result<TrainHistory> {
    apply_mask(model, mask)?;
    run_training(model, corpus, config, Some(mask))
}

/// Sparsity reached after one iteration of the loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub target: f64,
    pub achieved: f64,
}

#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub mask: PruningMask,
    pub history: TrainHistory,
    pub trajectory: Vec<IterationRecord>,
}

/// Prunes toward `target_sparsity` over `iterations` steps of the schedule,
/// fine-tuning after each one.
///
/// Iteration 0 prunes straight to `initial_sparsity` without fine-tuning.
/// Each later iteration prunes the fraction of surviving weights that takes
/// the mask's actual sparsity to the schedule's target, so integer rounding
/// does not accumulate. Iteration `t` fine-tunes with seed `seed + t - 1`.
pub fn prune_finetune_loop(
    model: &mut TransformerModel,
    prune: &PruneConfig,
    ft: &FinetuneConfig,
    corpus: &[usize],
) -> Result<LoopOutcome> {
    prune.validate()?;
    ft.validate()?;
    let (s0, sf, total) = (prune.initial_sparsity, prune.target_sparsity, prune.iterations);
    let mut mask = PruningMask::all_true(model);
    let mut trajectory = Vec::with_capacity(total + 1);
    let mut history = TrainHistory::default();

    let step_to = |model: &TransformerModel, mask: &PruningMask, target: f64| -> Result<PruningMask> {
        let current = sparsity(mask);
        let fraction = if current >= target {
            0.0
        } else {
            iteration_prune_fraction(current, target)?
        };
        build_mask(model, fraction, prune.scope, Some(mask))
    };

    mask = step_to(model, &mask, s0)?;
    apply_mask(model, &mask)?;
    trajectory.push(IterationRecord {
        iteration: 0,
        target: s0,
        achieved: sparsity(&mask),
    });

    for t in 1..=total {
        let target = sparsity_at(prune.schedule, t, total, s0, sf)?;
        mask = step_to(model, &mask, target)?;
        apply_mask(model, &mask)?;
        trajectory.push(IterationRecord {
            iteration: t,
            target,
            achieved: sparsity(&mask),
        });
        log::debug!(
            "iteration {t}: target {target:.4}, achieved {:.4}",
            sparsity(&mask)
        );
        let cfg = FinetuneConfig {
            seed: ft.seed.wrapping_add(t as u64 - 1),
            ..ft.clone()
        };
        history.append(finetune(model, &mask, corpus, &cfg)?);
    }
    Ok(LoopOutcome {
        mask,
        history,
        trajectory,
    })
}
