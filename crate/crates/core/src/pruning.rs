//! Magnitude-based unstructured pruning.
//!
//! Weights are ranked by `|w|`; the smallest are removed. Ties at the cut
//! are broken by stable position: matrices in prunable order (layer-major,
//! then `w_q, w_k, w_v, w_o, w_ff1, w_ff2`), then flat row-major index. This
//! makes every pruned count exact.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::schedules::ScheduleKind;

/// Survival flags for one prunable matrix. `true` means the weight is kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl MaskEntry {
    pub fn pruned_count(&self) -> u64 {
        self.keep.iter().filter(|k| !**k).count() as u64
    }
}

/// One [`MaskEntry`] per prunable matrix, in prunable order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruningMask {
    entries: Vec<MaskEntry>,
}

impl PruningMask {
    pub fn all_true(model: &TransformerModel) -> Self {
        Self::filled(model, true)
    }

    pub fn all_false(model: &TransformerModel) -> Self {
        Self::filled(model, false)
    }

    fn filled(model: &TransformerModel, keep: bool) -> Self {
        PruningMask {
            entries: model
                .prunable_parameters()
                .into_iter()
                .map(|(name, t)| MaskEntry {
                    name,
                    shape: t.shape().to_vec(),
                    keep: vec![keep; t.len()],
                })
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<MaskEntry>) -> Result<Self> {
        for e in &entries {
            let n: usize = e.shape.iter().product();
            if n != e.keep.len() {
                return Err(Error::Contract(format!(
                    "mask entry {} has shape {:?} but {} flags",
                    e.name,
                    e.shape,
                    e.keep.len()
                )));
            }
        }
        Ok(PruningMask { entries })
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_count(&self) -> u64 {
        self.entries.iter().map(|e| e.keep.len() as u64).sum()
    }

    pub fn pruned_count(&self) -> u64 {
        self.entries.iter().map(MaskEntry::pruned_count).sum()
    }

    pub fn sparsity(&self) -> f64 {
        sparsity(self)
    }

    /// True when every position pruned by `other` is also pruned here.
    pub fn contains_pruning_of(&self, other: &PruningMask) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.keep.len() == b.keep.len()
                    && a.keep.iter().zip(&b.keep).all(|(&ka, &kb)| kb || !ka)
            })
    }

    /// Fails unless the mask has exactly the model's prunable names and shapes.
    pub fn check_matches(&self, model: &TransformerModel) -> Result<()> {
        let params = model.prunable_parameters();
        if params.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "mask has {} matrices, model has {} prunable matrices",
                self.entries.len(),
                params.len()
            )));
        }
        for ((name, t), e) in params.iter().zip(&self.entries) {
            if *name != e.name || t.shape() != e.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "mask entry {} {:?} does not match model parameter {} {:?}",
                    e.name,
                    e.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of masked positions that are pruned. An empty mask has sparsity 0.
pub fn sparsity(mask: &PruningMask) -> f64 {
    let total = mask.total_count();
    if total == 0 {
        0.0
    } else {
        mask.pruned_count() as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// One threshold across every prunable matrix.
    #[default]
    Global,
    /// An independent threshold per matrix.
    PerLayer,
}

/// What a pruning rate is a fraction of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateBasis {
    /// Of the prunable weights in the unpruned model.
    OfOriginal,
    /// Of the weights that currently survive.
    #[default]
    OfRemaining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub rate: f64,
    /// Absolute cutoff: when set, one-shot pruning removes every surviving
    /// weight with `|w| < threshold` and ignores `rate`.
    pub threshold_override: Option<f64>,
    pub scope: PruneScope,
    pub schedule: ScheduleKind,
    pub initial_sparsity: f64,
    pub target_sparsity: f64,
    pub iterations: usize,
    pub rate_basis: RateBasis,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rate: 0.3,
            threshold_override: None,
            scope: PruneScope::Global,
            schedule: ScheduleKind::Linear,
            initial_sparsity: 0.0,
            target_sparsity: 0.5,
            iterations: 5,
            rate_basis: RateBasis::OfRemaining,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(field, "must be in [0,1]"))
            }
        };
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::validation("prune.rate", "rate ∈ [0,1]"));
        }
        unit("prune.initial_sparsity", self.initial_sparsity)?;
        unit("prune.target_sparsity", self.target_sparsity)?;
        if self.initial_sparsity > self.target_sparsity {
            return Err(Error::validation(
                "prune.initial_sparsity",
                "must not exceed prune.target_sparsity",
            ));
        }
        if self.iterations == 0 {
            return Err(Error::validation("prune.iterations", "must be positive"));
        }
        if let Some(t) = self.threshold_override {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::validation(
                    "prune.threshold_override",
                    "must be a finite nonnegative number",
                ));
            }
        }
        self.schedule.validate()
    }
}

fn magnitude_order(a: f64, b: f64) -> Ordering {
    a.abs().total_cmp(&b.abs())
}

/// The `k`-th smallest absolute value, `k = floor(fraction·N)`. Returns 0 when
/// `k = 0`. Pruning every `|w| < τ` plus the first ties in stable order
/// removes exactly `k` entries.
pub fn magnitude_threshold(weights: &[&[f64]], fraction: f64) -> Result<f64> {
    let n: usize = weights.iter().map(|w| w.len()).sum();
    if n == 0 {
        return Err(Error::Contract(
            "magnitude_threshold of an empty collection".into(),
        ));
    }
    check_fraction(fraction)?;
    let k = (fraction * n as f64).floor() as usize;
    let mut mags: Vec<f64> = weights.iter().flat_map(|w| w.iter().map(|v| v.abs())).collect();
    Ok(kth_smallest(&mut mags, k))
}

fn kth_smallest(mags: &mut [f64], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let k = k.min(mags.len());
    let (_, kth, _) = mags.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *kth
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..=1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "pruning fraction {fraction} outside [0,1]"
        )))
    }
}

/// Marks the `k` smallest-magnitude candidates as pruned. `candidates` is
/// in stable order and holds `(group, index)` positions into `keep`.
fn prune_smallest(values: &[&[f64]], keep: &mut [Vec<bool>], candidates: &[(usize, usize)], k: usize) {
    if k == 0 {
        return;
    }
    let mut mags: Vec<f64> = candidates.iter().map(|&(g, i)| values[g][i].abs()).collect();
    let tau = kth_smallest(&mut mags, k);
    let mut pruned = 0;
    for &(g, i) in candidates {
        if magnitude_order(values[g][i], tau) == Ordering::Less {
            keep[g][i] = false;
            pruned += 1;
        }
    }
    for &(g, i) in candidates {
        if pruned == k {
            break;
        }
        if magnitude_order(values[g][i], tau) == Ordering::Equal {
            keep[g][i] = false;
            pruned += 1;
        }
    }
    debug_assert_eq!(pruned, k);
}

/// Extends `existing` (or an all-true mask) by pruning, per group of
/// candidates, `count(surviving, total)` more weights.
fn extend_by_count(
    model: &TransformerModel,
    scope: PruneScope,
    existing: Option<&PruningMask>,
    count: impl Fn(usize, usize) -> usize,
) -> Result<PruningMask> {
    let mut mask = match existing {
        Some(m) => {
            m.check_matches(model)?;
            m.clone()
        }
        None => PruningMask::all_true(model),
    };
    let params = model.prunable_parameters();
    let values: Vec<&[f64]> = params.iter().map(|(_, t)| t.data()).collect();
    let mut keep: Vec<Vec<bool>> = mask
        .entries
        .iter_mut()
        .map(|e| std::mem::take(&mut e.keep))
        .collect();

    let survivors = |keep: &[Vec<bool>], g: usize| -> Vec<(usize, usize)> {
        keep[g]
            .iter()
            .enumerate()
            .filter(|(_, k)| **k)
            .map(|(i, _)| (g, i))
            .collect()
    };
    match scope {
        PruneScope::Global => {
            let candidates: Vec<(usize, usize)> = (0..keep.len()).flat_map(|g| survivors(&keep, g)).collect();
            let total: usize = keep.iter().map(|k| k.len()).sum();
            let k = count(candidates.len(), total).min(candidates.len());
            prune_smallest(&values, &mut keep, &candidates, k);
        }
        PruneScope::PerLayer => {
            for g in 0..keep.len() {
                let candidates = survivors(&keep, g);
                let k = count(candidates.len(), keep[g].len()).min(candidates.len());
                prune_smallest(&values, &mut keep, &candidates, k);
            }
        }
    }
    for (e, k) in mask.entries.iter_mut().zip(keep) {
        e.keep = k;
    }
    Ok(mask)
}

/// Prunes `floor(fraction · surviving)` of the currently surviving weights
/// by magnitude. Positions already pruned in `existing` stay pruned.
pub fn build_mask(
    model: &TransformerModel,
    fraction: f64,
    scope: PruneScope,
    existing: Option<&PruningMask>,
) -> Result<PruningMask> {
    check_fraction(fraction)?;
    extend_by_count(model, scope, existing, |surviving, _| {
        (fraction * surviving as f64).floor() as usize
    })
}

/// Prunes every surviving weight with `|w| < threshold`.
pub fn build_mask_threshold(
    model: &TransformerModel,
    threshold: f64,
    existing: Option<&PruningMask>,
) -> Result<PruningMask> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Contract(format!("negative threshold {threshold}")));
    }
    let mut mask = match existing {
        Some(m) => {
            m.check_matches(model)?;
            m.clone()
        }
        None => PruningMask::all_true(model),
    };
    for ((_, t), e) in model.prunable_parameters().iter().zip(&mut mask.entries) {
        for (k, v) in e.keep.iter_mut().zip(t.data()) {
            if v.abs() < threshold {
                *k = false;
            }
        }
    }
    Ok(mask)
}

/// One pruning event as described by `config`: the absolute threshold when
/// one is set, otherwise `config.rate` on the declared basis.
pub fn prune_once(
    model: &TransformerModel,
    config: &PruneConfig,
    existing: Option<&PruningMask>,
) -> Result<PruningMask> {
    config.validate()?;
    if let Some(tau) = config.threshold_override {
        return build_mask_threshold(model, tau, existing);
    }
    match config.rate_basis {
        RateBasis::OfRemaining => build_mask(model, config.rate, config.scope, existing),
        RateBasis::OfOriginal => {
            let rate = config.rate;
            extend_by_count(model, config.scope, existing, |_, total| {
                (rate * total as f64).floor() as usize
            })
        }
    }
}

/// Zeroes every pruned weight. Survivors are untouched.
pub fn apply_mask(model: &mut TransformerModel, mask: &PruningMask) -> Result<()> {
    mask.check_matches(model)?;
    for ((_, t), e) in model.prunable_parameters_mut().into_iter().zip(&mask.entries) {
        for (v, &k) in t.data_mut().iter_mut().zip(&e.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Parameter count after removing `rate` of `total_params`, rounded to the
/// nearest integer.
pub fn effective_param_count(total_params: u64, rate: f64) -> u64 {
    (total_params as f64 * (1.0 - rate)).round() as u64
}
