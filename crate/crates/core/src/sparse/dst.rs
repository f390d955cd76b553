//! Prune/grow primitives and the SET / RigL topology update.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ModelState};

/// A weight position: `(layer id, flat index)`. Orders by layer, then index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    pub layer: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GrowOutcome {
    pub grown: Vec<Position>,
    /// Requested growth that could not be placed.
    pub shortfall: usize,
}

/// Fraction of maskable weights that are inactive.
pub fn global_sparsity(model: &ModelState) -> f64 {
    let total = model.total_weights();
    if total == 0 {
        return 0.0;
    }
    1.0 - model.active_weights() as f64 / total as f64
}

pub(crate) fn deactivate(model: &mut ModelState, pos: Position) {
    let p = model.layer_mut(pos.layer).expect("param layer");
    p.weight.deactivate(pos.index);
    p.weight_velocity.data_mut()[pos.index] = 0.0;
}

pub(crate) fn activate(model: &mut ModelState, pos: Position) {
    let p = model.layer_mut(pos.layer).expect("param layer");
    p.weight.activate(pos.index);
    p.weight_velocity.data_mut()[pos.index] = 0.0;
}

fn active_positions(model: &ModelState, layers: &[usize]) -> Vec<(f32, Position)> {
    let mut out = Vec::new();
    for &layer in layers {
        let p = model.masked_param(layer).expect("param layer");
        for (index, (&m, &w)) in p.mask().iter().zip(p.weights().data()).enumerate() {
            if m {
                out.push((w.abs(), Position { layer, index }));
            }
        }
    }
    out
}

/// Inactive positions that may be grown: inside alive channels and not in a
/// removed input slice.
pub fn growth_candidates(model: &ModelState, layers: &[usize]) -> Vec<Position> {
    let mut out = Vec::new();
    for &layer in layers {
        let p = model.masked_param(layer).expect("param layer");
        for index in 0..p.len() {
            if !p.mask()[index] && p.is_eligible(index) {
                out.push(Position { layer, index });
            }
        }
    }
    out
}

/// Prunes the `k` smallest-magnitude active weights among `layers`; ties go to
/// the lower `(layer, index)`.
pub fn magnitude_prune(model: &mut ModelState, layers: &[usize], k: usize) -> Vec<Position> {
    let mut active = active_positions(model, layers);
    let k = k.min(active.len());
    active.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut pruned: Vec<Position> = active[..k].iter().map(|&(_, p)| p).collect();
    for &pos in &pruned {
        deactivate(model, pos);
    }
    pruned.sort();
    pruned
}

/// Activates `k` uniformly chosen growth candidates with zero weights.
pub fn grow_random<R: Rng + ?Sized>(
    model: &mut ModelState,
    layers: &[usize],
    k: usize,
    rng: &mut R,
) -> GrowOutcome {
    let candidates = growth_candidates(model, layers);
    let take = k.min(candidates.len());
    let mut grown: Vec<Position> = sample(rng, candidates.len(), take)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    grown.sort();
    for &pos in &grown {
        activate(model, pos);
    }
    GrowOutcome {
        grown,
        shortfall: k - take,
    }
}

/// Activates the `k` growth candidates with the largest gradient magnitude;
/// ties go to the lower `(layer, index)`.
pub fn grow_gradient(
    model: &mut ModelState,
    grads: &Gradients,
    layers: &[usize],
    k: usize,
) -> Result<GrowOutcome> {
    let candidates = growth_candidates(model, layers);
    let mut scored = Vec::with_capacity(candidates.len());
    for pos in candidates {
        let g = grads
            .layer(pos.layer)
            .ok_or_else(|| Error::Shape(format!("missing gradient for layer {}", pos.layer)))?;
        scored.push((g.weight.data()[pos.index].abs(), pos));
    }
    let take = k.min(scored.len());
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut grown: Vec<Position> = scored[..take].iter().map(|&(_, p)| p).collect();
    grown.sort();
    for &pos in &grown {
        activate(model, pos);
    }
    Ok(GrowOutcome {
        grown,
        shortfall: k - take,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowPolicy {
    /// Random regrowth.
    Set,
    /// Gradient-magnitude regrowth.
    Rigl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DstOutcome {
    pub pruned: usize,
    pub grown: usize,
    pub shortfall: usize,
}

/// Prunes `floor(r * active)` weights by magnitude and regrows the same count.
/// `PerLayer` keeps every layer's budget; `Global` ranks across all layers.
pub fn dst_step<R: Rng + ?Sized>(
    model: &mut ModelState,
    grads: &Gradients,
    r: f64,
    policy: GrowPolicy,
    scope: UpdateScope,
    rng: &mut R,
) -> Result<DstOutcome> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("prune rate {r} outside [0, 1]")));
    }
    let groups: Vec<Vec<usize>> = match scope {
        UpdateScope::PerLayer => model.param_layers().into_iter().map(|l| vec![l]).collect(),
        UpdateScope::Global => vec![model.param_layers()],
    };
    let mut outcome = DstOutcome::default();
    for layers in groups {
        let active: usize = layers
            .iter()
            .map(|&l| model.masked_param(l).unwrap().active_count())
            .sum();
        let k = (r * active as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        let pruned = magnitude_prune(model, &layers, k);
        let grown = match policy {
            GrowPolicy::Set => grow_random(model, &layers, pruned.len(), rng),
            GrowPolicy::Rigl => grow_gradient(model, grads, &layers, pruned.len())?,
        };
        outcome.pruned += pruned.len();
        outcome.grown += grown.grown.len();
        outcome.shortfall += grown.shortfall;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anneal {
    Constant,
    Cosine,
}

/// Time course of the DST prune fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneRateSchedule {
    pub initial_rate: f64,
    pub anneal: Anneal,
    /// Iteration at which exploration stops.
    pub end: usize,
}

impl Default for PruneRateSchedule {
    fn default() -> Self {
        Self {
            initial_rate: 0.5,
            anneal: Anneal::Cosine,
            end: 0,
        }
    }
}

impl PruneRateSchedule {
    pub fn rate_at(&self, t: usize) -> f64 {
        if t >= self.end {
            return 0.0;
        }
        match self.anneal {
            Anneal::Constant => self.initial_rate,
            Anneal::Cosine => {
                let frac = t as f64 / self.end as f64;
                self.initial_rate / 2.0 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}
