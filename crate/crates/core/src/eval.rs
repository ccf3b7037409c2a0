//! Synthetic Markov corpora with known entropy rate, language-model
//! metrics, and the pruning-rate sweep.
//!
//! The metrics are desk-scale stand-ins for completion benchmarks:
//! perplexity on held-out text, final-token prediction accuracy, and a
//! two-way cloze task where the model must prefer the true continuation of
//! a context over one drawn from an unrelated chain.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{param_report, TransformerModel};
use crate::pruning::{apply_mask, build_mask, effective_param_count, PruneConfig, PruningMask};
use crate::trainer::{corpus_windows, finetune, FinetuneConfig};

/// Minimum transition probability after smoothing.
pub const SMOOTHING_FLOOR: f64 = 1e-3;
/// Dirichlet concentration for random transition rows. Small values give
/// peaked, learnable rows.
pub const DEFAULT_CONCENTRATION: f64 = 0.1;
pub const BURN_IN: usize = 1000;
const MAX_STATES: usize = 1 << 22;

/// Order-k Markov chain over `vocab_size` symbols. Row `c` of `probs` is the
/// next-token distribution given context `c`, with the most recent token as
/// the least significant base-`vocab_size` digit.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    vocab_size: usize,
    order: usize,
    probs: Vec<f64>,
}

impl MarkovChain {
    fn check_dims(vocab_size: usize, order: usize) -> Result<usize> {
        if vocab_size < 2 {
            return Err(Error::Input("vocab_size must be at least 2".into()));
        }
        if order == 0 {
            return Err(Error::Input("chain order must be at least 1".into()));
        }
        let states = (0..order)
            .try_fold(1usize, |acc, _| acc.checked_mul(vocab_size))
            .filter(|&s| s <= MAX_STATES)
            .ok_or_else(|| Error::Input(format!("vocab {vocab_size}^order {order} has too many states")))?;
        Ok(states)
    }

    /// Random chain with Dirichlet(`concentration`) rows, smoothed so every
    /// probability is at least [`SMOOTHING_FLOOR`] (or `0.5/V` for huge V).
    pub fn random(seed: u64, vocab_size: usize, order: usize, concentration: f64) -> Result<Self> {
        Self::random_backoff(seed, vocab_size, order, concentration, 0.0)
    }

    /// Like [`MarkovChain::random`], but each row is the mixture
    /// `(1 - backoff)·full + backoff·shared`, where `shared` is a Dirichlet
    /// row common to every context with the same oldest token. The chain
    /// keeps its full order; for order ≥ 2 the shared part is invisible from
    /// the current token alone, so a model has to attend back to use it.
    pub fn random_backoff(
        seed: u64,
        vocab_size: usize,
        order: usize,
        concentration: f64,
        backoff: f64,
    ) -> Result<Self> {
        let states = Self::check_dims(vocab_size, order)?;
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::Input("concentration must be positive".into()));
        }
        if !(0.0..=1.0).contains(&backoff) {
            return Err(Error::Input("backoff must be in [0,1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
        let mut dirichlet = || -> Vec<f64> {
            let mut row: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = row.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                row.iter_mut().for_each(|p| *p = 1.0);
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        };
        let full: Vec<Vec<f64>> = (0..states).map(|_| dirichlet()).collect();
        let shared: Vec<Vec<f64>> = if backoff > 0.0 {
            (0..vocab_size).map(|_| dirichlet()).collect()
        } else {
            Vec::new()
        };
        let floor = SMOOTHING_FLOOR.min(0.5 / vocab_size as f64);
        let mass = 1.0 - floor * vocab_size as f64;
        let oldest_place = states / vocab_size;
        let mut probs = Vec::with_capacity(states * vocab_size);
        for (state, row) in full.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                let mixed = if backoff > 0.0 {
                    (1.0 - backoff) * p + backoff * shared[state / oldest_place][j]
                } else {
                    *p
                };
                probs.push(mass * mixed + floor);
            }
        }
        Ok(MarkovChain {
            vocab_size,
            order,
            probs,
        })
    }

    pub fn uniform(vocab_size: usize, order: usize) -> Result<Self> {
        let states = Self::check_dims(vocab_size, order)?;
        Ok(MarkovChain {
            vocab_size,
            order,
            probs: vec![1.0 / vocab_size as f64; states * vocab_size],
        })
    }

    /// Chain from explicit rows; each must be a probability distribution.
    pub fn from_probs(vocab_size: usize, order: usize, probs: Vec<f64>) -> Result<Self> {
        let states = Self::check_dims(vocab_size, order)?;
        if probs.len() != states * vocab_size {
            return Err(Error::Input(format!(
                "expected {} transition probabilities, got {}",
                states * vocab_size,
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(vocab_size).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| p.is_nan() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("row {s} is not a distribution")));
            }
        }
        Ok(MarkovChain {
            vocab_size,
            order,
            probs,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn states(&self) -> usize {
        self.probs.len() / self.vocab_size
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.vocab_size..(state + 1) * self.vocab_size]
    }

    pub fn min_probability(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn next_state(&self, state: usize, token: usize) -> usize {
        (state * self.vocab_size) % self.states() + token
    }

    /// State index of the last `order` tokens of `context`.
    pub fn state_of(&self, context: &[usize]) -> Result<usize> {
        if context.len() < self.order {
            return Err(Error::Input(format!(
                "context of {} tokens is shorter than chain order {}",
                context.len(),
                self.order
            )));
        }
        Ok(context[context.len() - self.order..]
            .iter()
            .fold(0, |s, &t| s * self.vocab_size + t))
    }

    /// Stationary distribution over states, by power iteration on the lazy
    /// chain `(I + P)/2` from the uniform distribution.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.states();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..200_000 {
            next.iter_mut().zip(&pi).for_each(|(x, p)| *x = 0.5 * p);
            for (s, &p) in pi.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (t, &q) in self.row(s).iter().enumerate() {
                    next[self.next_state(s, t)] += 0.5 * p * q;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            std::mem::swap(&mut pi, &mut next);
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats/token: `Σ_s π(s)·H(P(·|s))`.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        pi.iter()
            .enumerate()
            .map(|(s, &p)| {
                let h: f64 = self
                    .row(s)
                    .iter()
                    .filter(|&&q| q > 0.0)
                    .map(|&q| -q * q.ln())
                    .sum();
                p * h
            })
            .sum::<f64>()
            .max(0.0)
    }

    fn draw(&self, state: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = self.row(state);
        for (t, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return t;
            }
        }
        // rounding left u above the last partial sum
        row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
    }

    /// `length` tokens after a [`BURN_IN`]-step warm-up from a uniformly
    /// random initial context.
    pub fn sample(&self, seed: u64, length: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = rng.random_range(0..self.states());
        for _ in 0..BURN_IN {
            let t = self.draw(state, &mut rng);
            state = self.next_state(state, t);
        }
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            let t = self.draw(state, &mut rng);
            out.push(t);
            state = self.next_state(state, t);
        }
        out
    }

    /// Continues `context` for `length` tokens.
    pub fn continue_from(&self, context: &[usize], length: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let mut state = self.state_of(context)?;
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            let t = self.draw(state, rng);
            out.push(t);
            state = self.next_state(state, t);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub tokens: Vec<usize>,
    pub vocab_size: usize,
    pub chain: MarkovChain,
    /// Analytic entropy rate of `chain`, nats/token.
    pub entropy_rate: f64,
}

impl SyntheticCorpus {
    pub fn order(&self) -> usize {
        self.chain.order()
    }

    /// Splits into `(train, holdout)` with the last `holdout_fraction` of
    /// tokens held out.
    pub fn split(&self, holdout_fraction: f64) -> (&[usize], &[usize]) {
        let n = self.tokens.len();
        let cut = n - ((n as f64 * holdout_fraction).round() as usize).min(n);
        self.tokens.split_at(cut)
    }
}

/// Samples `length` tokens from a random order-`order` chain seeded by `seed`.
pub fn generate_corpus(seed: u64, vocab_size: usize, order: usize, length: usize) -> Result<SyntheticCorpus> {
    generate_corpus_with(seed, vocab_size, order, length, DEFAULT_CONCENTRATION, 0.0)
}

/// [`generate_corpus`] with explicit Dirichlet concentration and backoff
/// weight (see [`MarkovChain::random_backoff`]).
pub fn generate_corpus_with(
    seed: u64,
    vocab_size: usize,
    order: usize,
    length: usize,
    concentration: f64,
    backoff: f64,
) -> Result<SyntheticCorpus> {
    if length == 0 {
        return Err(Error::Input("corpus length must be at least 1".into()));
    }
    let chain = MarkovChain::random_backoff(seed, vocab_size, order, concentration, backoff)?;
    Ok(corpus_from_chain(chain, seed.wrapping_add(0x5eed), length))
}

pub fn corpus_from_chain(chain: MarkovChain, sample_seed: u64, length: usize) -> SyntheticCorpus {
    let tokens = chain.sample(sample_seed, length);
    SyntheticCorpus {
        tokens,
        vocab_size: chain.vocab_size(),
        entropy_rate: chain.entropy_rate(),
        chain,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub last_token_accuracy: f64,
    pub cloze_accuracy: f64,
    pub sparsity: f64,
    pub n_params: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LastTokenExample {
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClozeItem {
    pub context: Vec<usize>,
    pub correct: Vec<usize>,
    pub distractor: Vec<usize>,
}

const EVAL_BATCH: usize = 32;

/// `exp` of the mean next-token cross-entropy over non-overlapping windows.
pub fn perplexity(model: &TransformerModel, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Input("perplexity needs at least 2 tokens".into()));
    }
    let windows = corpus_windows(tokens, model.config.context_len)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        let inputs: Vec<&[usize]> = chunk.iter().map(|w| &w[..w.len() - 1]).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let logits = model.forward_graph(&mut g, &params, &inputs)?;
        let ce = g.cross_entropy(logits, &targets)?;
        total += g.value(ce).item() * targets.len() as f64;
        count += targets.len();
    }
    Ok((total / count as f64).exp())
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `f` on batches of consecutive equal-length sequences, passing the
/// logits of each batch. Logits rows are sequence-major.
fn for_each_batch(
    model: &TransformerModel,
    seqs: &[&[usize]],
    mut f: impl FnMut(usize, &[f64], usize) -> Result<()>,
) -> Result<()> {
    let vocab = model.config.vocab_size;
    let mut start = 0;
    while start < seqs.len() {
        let len = seqs[start].len();
        let mut end = start + 1;
        while end < seqs.len() && end - start < EVAL_BATCH && seqs[end].len() == len {
            end += 1;
        }
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        let logits = model.forward_graph(&mut g, &params, &seqs[start..end])?;
        let data = g.value(logits).data();
        for (j, seq_logits) in data.chunks(len * vocab).enumerate() {
            f(start + j, seq_logits, len)?;
        }
        start = end;
    }
    Ok(())
}

/// Fraction of examples whose target is the argmax of the final-position
/// logits (lowest token id wins ties). An empty list scores 0.
pub fn last_token_accuracy(model: &TransformerModel, examples: &[LastTokenExample]) -> Result<f64> {
    if examples.is_empty() {
        log::warn!("last_token_accuracy called with no examples; reporting 0");
        return Ok(0.0);
    }
    let vocab = model.config.vocab_size;
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.context.as_slice()).collect();
    let mut correct = 0usize;
    for_each_batch(model, &seqs, |i, logits, len| {
        let last = &logits[(len - 1) * vocab..len * vocab];
        if argmax_lowest(last) == examples[i].target {
            correct += 1;
        }
        Ok(())
    })?;
    Ok(correct as f64 / examples.len() as f64)
}

/// Sum of `log p(continuation | context)` read off one forward pass over the
/// concatenated sequence.
fn continuation_log_prob(logits: &[f64], vocab: usize, context_len: usize, cont: &[usize]) -> f64 {
    let mut total = 0.0;
    for (j, &tok) in cont.iter().enumerate() {
        let row = &logits[(context_len - 1 + j) * vocab..(context_len + j) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row[tok] - lse;
    }
    total
}

/// Fraction of items where the true continuation outscores the distractor.
/// Ties count as wrong.
pub fn cloze_accuracy(model: &TransformerModel, items: &[ClozeItem]) -> Result<f64> {
    if items.is_empty() {
        log::warn!("cloze_accuracy called with no items; reporting 0");
        return Ok(0.0);
    }
    let vocab = model.config.vocab_size;
    let mut seqs: Vec<Vec<usize>> = Vec::with_capacity(items.len() * 2);
    for item in items {
        if item.context.is_empty() {
            return Err(Error::Input("cloze item with empty context".into()));
        }
        for cont in [&item.correct, &item.distractor] {
            seqs.push(item.context.iter().chain(cont.iter()).copied().collect());
        }
    }
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let mut scores = vec![0.0; seqs.len()];
    for_each_batch(model, &refs, |i, logits, _| {
        let item = &items[i / 2];
        let cont = if i % 2 == 0 {
            &item.correct
        } else {
            &item.distractor
        };
        scores[i] = continuation_log_prob(logits, vocab, item.context.len(), cont);
        Ok(())
    })?;
    let correct = scores.chunks(2).filter(|s| s[0] > s[1]).count();
    Ok(correct as f64 / items.len() as f64)
}

/// `n` examples cut from a fresh sample of `chain`: `context_len` tokens of
/// context followed by the target.
pub fn last_token_examples(
    chain: &MarkovChain,
    seed: u64,
    n: usize,
    context_len: usize,
) -> Vec<LastTokenExample> {
    let stream = chain.sample(seed, n * (context_len + 1));
    stream
        .chunks_exact(context_len + 1)
        .map(|c| LastTokenExample {
            context: c[..context_len].to_vec(),
            target: c[context_len],
        })
        .collect()
}

/// `n` binary cloze items. The correct continuation follows `chain`; the
/// distractor continues the same context under `distractor_chain`.
pub fn cloze_items(
    chain: &MarkovChain,
    distractor_chain: &MarkovChain,
    seed: u64,
    n: usize,
    context_len: usize,
    continuation_len: usize,
) -> Result<Vec<ClozeItem>> {
    let span = context_len + continuation_len;
    let stream = chain.sample(seed, n * span);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd157_4c70);
    stream
        .chunks_exact(span)
        .map(|c| {
            let context = c[..context_len].to_vec();
            let distractor = distractor_chain.continue_from(&context, continuation_len, &mut rng)?;
            Ok(ClozeItem {
                correct: c[context_len..].to_vec(),
                distractor,
                context,
            })
        })
        .collect()
}

/// Held-out data shared by every evaluation in a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSuite {
    pub heldout: Vec<usize>,
    pub last_token: Vec<LastTokenExample>,
    pub cloze: Vec<ClozeItem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSuiteConfig {
    pub last_token_examples: usize,
    pub last_token_context: usize,
    pub cloze_items: usize,
    pub cloze_context: usize,
    pub cloze_continuation: usize,
    pub seed: u64,
}

impl Default for EvalSuiteConfig {
    fn default() -> Self {
        EvalSuiteConfig {
            last_token_examples: 1000,
            last_token_context: 16,
            cloze_items: 500,
            cloze_context: 12,
            cloze_continuation: 4,
            seed: 1,
        }
    }
}

impl EvalSuite {
    /// Builds examples from fresh samples of the corpus chain; distractors
    /// come from an independently seeded chain of the same shape.
    pub fn build(corpus: &SyntheticCorpus, heldout: &[usize], cfg: &EvalSuiteConfig) -> Result<Self> {
        let chain = &corpus.chain;
        let distractor_chain = MarkovChain::random(
            cfg.seed.wrapping_add(0xd15c),
            chain.vocab_size(),
            chain.order(),
            DEFAULT_CONCENTRATION,
        )?;
        Ok(EvalSuite {
            heldout: heldout.to_vec(),
            last_token: last_token_examples(
                chain,
                cfg.seed.wrapping_add(1),
                cfg.last_token_examples,
                cfg.last_token_context,
            ),
            cloze: cloze_items(
                chain,
                &distractor_chain,
                cfg.seed.wrapping_add(2),
                cfg.cloze_items,
                cfg.cloze_context,
                cfg.cloze_continuation,
            )?,
        })
    }
}

/// Evaluates all metrics. Never modifies the model.
pub fn evaluate(
    model: &TransformerModel,
    suite: &EvalSuite,
    mask: Option<&PruningMask>,
) -> Result<EvalReport> {
    let report = param_report(model, mask)?;
    Ok(EvalReport {
        perplexity: perplexity(model, &suite.heldout)?,
        last_token_accuracy: last_token_accuracy(model, &suite.last_token)?,
        cloze_accuracy: cloze_accuracy(model, &suite.cloze)?,
        sparsity: report.sparsity,
        n_params: report.nonzero_params,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub seed: u64,
    pub before: EvalReport,
    pub after: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rate: f64,
    pub n_params_effective: u64,
    /// Per-metric medians over seeds.
    pub before: EvalReport,
    pub after: EvalReport,
    pub cells: Vec<SweepCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub model_label: String,
    pub total_params: u64,
    pub baseline: EvalReport,
    pub rows: Vec<SweepRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_report(reports: &[EvalReport]) -> EvalReport {
    let pick = |f: fn(&EvalReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
    EvalReport {
        perplexity: pick(|r| r.perplexity),
        last_token_accuracy: pick(|r| r.last_token_accuracy),
        cloze_accuracy: pick(|r| r.cloze_accuracy),
        sparsity: pick(|r| r.sparsity),
        n_params: pick(|r| r.n_params as f64).round() as u64,
    }
}

/// For every rate and seed: one-shot prune a copy of `base` at `rate`,
/// evaluate, fine-tune with that seed, evaluate again.
///
/// The prune scope comes from `prune`; the rate list replaces its rate and
/// schedule. Rates must be strictly increasing in `[0, 1)`.
pub fn sweep(
    base: &TransformerModel,
    rates: &[f64],
    prune: &PruneConfig,
    ft: &FinetuneConfig,
    corpus: &[usize],
    suite: &EvalSuite,
    seeds: &[u64],
) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "at least one seed is required"));
    }
    if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::validation("rates", "every rate must be in [0,1)"));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("rates", "must be strictly increasing"));
    }
    ft.validate()?;
    let total_params = base.total_params();
    let baseline = evaluate(base, suite, None)?;
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mask = build_mask(base, rate, prune.scope, None)?;
        let mut pruned = base.clone();
        apply_mask(&mut pruned, &mask)?;
        let before = evaluate(&pruned, suite, Some(&mask))?;
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut model = pruned.clone();
            let cfg = FinetuneConfig { seed, ..ft.clone() };
            finetune(&mut model, &mask, corpus, &cfg)?;
            let after = evaluate(&model, suite, Some(&mask))?;
            log::info!(
                "rate {rate} seed {seed}: last-token {:.4} -> {:.4}, cloze {:.4} -> {:.4}",
                before.last_token_accuracy,
                after.last_token_accuracy,
                before.cloze_accuracy,
                after.cloze_accuracy
            );
            cells.push(SweepCell { seed, before, after });
        }
        let afters: Vec<EvalReport> = cells.iter().map(|c| c.after).collect();
        rows.push(SweepRow {
            rate,
            n_params_effective: effective_param_count(total_params, rate),
            before,
            after: median_report(&afters),
            cells,
        });
    }
    let c = &base.config;
    Ok(SweepResult {
        model_label: format!("toy-v{}-d{}-l{}", c.vocab_size, c.d_model, c.n_layers),
        total_params,
        baseline,
        rows,
    })
}

pub const SWEEP_CSV_HEADER: &str =
    "model,rate,n_params,seed,stage,sparsity,nonzero_params,perplexity,last_token_acc,cloze_acc";

fn csv_line(
    out: &mut String,
    model: &str,
    rate: f64,
    n_params: u64,
    seed: &str,
    stage: &str,
    r: &EvalReport,
) {
    writeln!(
        out,
        "{model},{rate},{n_params},{seed},{stage},{},{},{},{},{}",
        r.sparsity, r.n_params, r.perplexity, r.last_token_accuracy, r.cloze_accuracy
    )
    .expect("writing to a String");
}

impl SweepResult {
    /// One row per (rate, seed, stage) plus `median` rows. The baseline has
    /// stage `base`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(SWEEP_CSV_HEADER);
        out.push('\n');
        let m = &self.model_label;
        csv_line(
            &mut out,
            m,
            0.0,
            self.total_params,
            "median",
            "base",
            &self.baseline,
        );
        for row in &self.rows {
            for c in &row.cells {
                let seed = c.seed.to_string();
                csv_line(
                    &mut out,
                    m,
                    row.rate,
                    row.n_params_effective,
                    &seed,
                    "pruned",
                    &c.before,
                );
                csv_line(
                    &mut out,
                    m,
                    row.rate,
                    row.n_params_effective,
                    &seed,
                    "finetuned",
                    &c.after,
                );
            }
            csv_line(
                &mut out,
                m,
                row.rate,
                row.n_params_effective,
                "median",
                "pruned",
                &row.before,
            );
            csv_line(
                &mut out,
                m,
                row.rate,
                row.n_params_effective,
                "median",
                "finetuned",
                &row.after,
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut base_rows = vec![TableRow {
            model: self.model_label.clone(),
            rate: None,
            n_params: self.total_params,
            report: self.baseline,
        }];
        let mut after = base_rows.clone();
        for row in &self.rows {
            after.push(TableRow {
                model: self.model_label.clone(),
                rate: Some(row.rate),
                n_params: row.n_params_effective,
                report: row.after,
            });
            base_rows.push(TableRow {
                model: self.model_label.clone(),
                rate: Some(row.rate),
                n_params: row.n_params_effective,
                report: row.before,
            });
        }
        let mut out = String::new();
        out.push_str("### After fine-tuning (median over seeds)\n\n");
        out.push_str(&markdown_table(&after));
        out.push_str("\n### Before fine-tuning (pruned only)\n\n");
        out.push_str(&markdown_table(&base_rows));
        out
    }
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub rate: Option<f64>,
    pub n_params: u64,
    pub report: EvalReport,
}

/// Formats a rate the way results tables print it: `0.3` → `.3`.
pub fn format_rate(rate: Option<f64>) -> String {
    match rate {
        None => "-".to_string(),
        Some(r) => {
            let s = format!("{r}");
            match s.strip_prefix("0.") {
                Some(frac) => format!(".{frac}"),
                None => s,
            }
        }
    }
}

pub fn markdown_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    out.push_str("| Model | pr% | n_params | LastToken (acc) | ppl | Cloze (acc) |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        writeln!(
            out,
            "| {} | {} | {} | {:.2} | {:.3} | {:.2} |",
            r.model,
            format_rate(r.rate),
            r.n_params,
            100.0 * r.report.last_token_accuracy,
            r.report.perplexity,
            100.0 * r.report.cloze_accuracy
        )
        .expect("writing to a String");
    }
    out
}

/// Reads the `median` rows of a sweep CSV back into table rows:
/// `(after fine-tuning, before fine-tuning)`, each led by the baseline.
pub fn table_rows_from_csv(csv: &str) -> Result<(Vec<TableRow>, Vec<TableRow>)> {
    let mut lines = csv.lines();
    if lines.next() != Some(SWEEP_CSV_HEADER) {
        return Err(Error::Format("sweep CSV header does not match".into()));
    }
    let mut after = Vec::new();
    let mut before = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Format(format!(
                "sweep CSV line {} has {} fields",
                i + 2,
                f.len()
            )));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: field {j}: {e}", i + 2)))
        };
        let int = |j: usize| -> Result<u64> {
            f[j].parse::<u64>()
                .map_err(|e| Error::Format(format!("line {}: field {j}: {e}", i + 2)))
        };
        if f[3] != "median" {
            continue;
        }
        let report = EvalReport {
            sparsity: num(5)?,
            n_params: int(6)?,
            perplexity: num(7)?,
            last_token_accuracy: num(8)?,
            cloze_accuracy: num(9)?,
        };
        let row = |rate| TableRow {
            model: f[0].to_string(),
            rate,
            n_params: 0,
            report,
        };
        let n_params = int(2)?;
        match f[4] {
            "base" => {
                let r = TableRow {
                    n_params,
                    ..row(None)
                };
                after.push(r.clone());
                before.push(r);
            }
            "pruned" => before.push(TableRow {
                n_params,
                ..row(Some(num(1)?))
            }),
            "finetuned" => after.push(TableRow {
                n_params,
                ..row(Some(num(1)?))
            }),
            other => return Err(Error::Format(format!("unknown stage {other}"))),
        }
    }
    Ok((after, before))
}
