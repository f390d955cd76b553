//! Gradual global channel pruning and one-shot channel pruning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::topology::{dead_channels, kill_channel, ChannelTopology};
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::stats::channel_stats;

/// Minimum alive channels kept in a layer of width `w`:
/// `max(1, ceil((1 - S_f) * beta * w))`.
pub fn beta_floor(width: usize, s_f: f64, beta: f64) -> usize {
    let raw = (1.0 - s_f) * beta * width as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).max(1)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelPruneOutcome {
    /// Killed `(layer, channel)` pairs in kill order.
    pub killed: Vec<(usize, usize)>,
    /// Active weights freed by the kills.
    pub freed: usize,
    /// Channels the target asked for that the floors did not allow.
    pub deficit: usize,
}

/// Kills the lowest-UMM alive channels of prunable layers until the dead
/// fraction reaches `s_t`, never taking a layer below its `beta` floor.
///
/// UMM is read once before any kill; ties go to the lower `(layer, channel)`.
pub fn global_channel_prune(
    model: &mut ModelState,
    topo: &ChannelTopology,
    s_t: f64,
    beta: f64,
    s_f: f64,
) -> ChannelPruneOutcome {
    let total = topo.prunable_channels();
    let target = (s_t * total as f64 + 1e-9).floor() as usize;
    let dead = dead_channels(model, topo);
    let mut outcome = ChannelPruneOutcome::default();
    if target <= dead {
        return outcome;
    }
    let mut need = target - dead;

    let mut ranked = Vec::new();
    for &l in &topo.prunable_layers() {
        let p = model.masked_param(l).expect("param layer");
        for s in channel_stats(p) {
            if p.alive_channels()[s.channel] {
                ranked.push((s.umm, l, s.channel));
            }
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    for (_, l, c) in ranked {
        if need == 0 {
            break;
        }
        let p = model.masked_param(l).unwrap();
        if p.alive_count() <= beta_floor(p.out_channels(), s_f, beta) {
            continue;
        }
        outcome.freed += kill_channel(model, topo, l, c);
        outcome.killed.push((l, c));
        need -= 1;
    }
    if need > 0 {
        log::warn!("channel target {s_t:.4} unreachable under beta = {beta}: {need} channels short");
        outcome.deficit = need;
    }
    outcome
}

/// Channel ranking rule for one-shot pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneCriterion {
    Random,
    /// Sparsest channels first.
    Ws,
    /// Smallest unmasked mean magnitude first.
    Umm,
    /// Smallest masked mean magnitude first.
    Mmm,
    WsRev,
    UmmRev,
    MmmRev,
}

impl PruneCriterion {
    pub const ALL: [PruneCriterion; 7] = [
        PruneCriterion::Random,
        PruneCriterion::Ws,
        PruneCriterion::Umm,
        PruneCriterion::Mmm,
        PruneCriterion::WsRev,
        PruneCriterion::UmmRev,
        PruneCriterion::MmmRev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PruneCriterion::Random => "random",
            PruneCriterion::Ws => "ws",
            PruneCriterion::Umm => "umm",
            PruneCriterion::Mmm => "mmm",
            PruneCriterion::WsRev => "ws-rev",
            PruneCriterion::UmmRev => "umm-rev",
            PruneCriterion::MmmRev => "mmm-rev",
        }
    }

    /// Key such that ascending order is pruning order.
    fn key(self, ws: f64, umm: f64, mmm: f64) -> f64 {
        match self {
            PruneCriterion::Random => 0.0,
            PruneCriterion::Ws => -ws,
            PruneCriterion::Umm => umm,
            PruneCriterion::Mmm => mmm,
            PruneCriterion::WsRev => ws,
            PruneCriterion::UmmRev => -umm,
            PruneCriterion::MmmRev => -mmm,
        }
    }
}

/// Kills `floor(s_c * prunable channels)` channels in one pass, ranked
/// globally by `criterion`. Every layer keeps at least one channel.
pub fn one_shot_channel_prune(
    model: &mut ModelState,
    topo: &ChannelTopology,
    criterion: PruneCriterion,
    s_c: f64,
    seed: u64,
) -> Result<ChannelPruneOutcome> {
    if !(0.0..1.0).contains(&s_c) {
        return Err(Error::Config(format!("channel sparsity {s_c} must lie in [0, 1)")));
    }
    let k = (s_c * topo.prunable_channels() as f64 + 1e-9).floor() as usize;
    let mut ranked = Vec::new();
    for &l in &topo.prunable_layers() {
        let p = model.masked_param(l).expect("param layer");
        for s in channel_stats(p) {
            if p.alive_channels()[s.channel] {
                ranked.push((criterion.key(s.ws, s.umm, s.mmm), l, s.channel));
            }
        }
    }
    if criterion == PruneCriterion::Random {
        ranked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    } else {
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    }
    let mut outcome = ChannelPruneOutcome::default();
    for (_, l, c) in ranked {
        if outcome.killed.len() == k {
            break;
        }
        if model.masked_param(l).unwrap().alive_count() <= 1 {
            continue;
        }
        outcome.freed += kill_channel(model, topo, l, c);
        outcome.killed.push((l, c));
    }
    outcome.deficit = k - outcome.killed.len();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zoo::mlp;

    fn model_with_umm(umm_rows: &[f32]) -> (ModelState, ChannelTopology) {
        let arch = mlp(4, &[3, umm_rows.len()], 2).unwrap();
        let mut m = ModelState::new(arch, 0).unwrap();
        let p = m.masked_param_mut(2).unwrap();
        let w = p.weights_mut();
        for (c, &v) in umm_rows.iter().enumerate() {
            for i in 0..3 {
                w[c * 3 + i] = v;
            }
        }
        let topo = ChannelTopology::new(m.arch(), &[], false).unwrap();
        (m, topo)
    }

    #[test]
    fn beta_floor_formula() {
        assert_eq!(beta_floor(10, 0.5, 0.5), 3);
        assert_eq!(beta_floor(10, 0.5, 0.4), 2);
        assert_eq!(beta_floor(10, 0.5, 0.0), 1);
        assert_eq!(beta_floor(64, 0.5, 0.2), 7);
    }

    #[test]
    fn kills_lowest_umm() {
        let umm = [0.9, 0.1, 0.5, 0.3, 0.8, 0.2, 0.7, 0.4, 0.6, 0.05];
        let (mut m, topo) = model_with_umm(&umm);
        let out = global_channel_prune(&mut m, &topo, 0.3, 0.0, 0.3);
        let mut killed: Vec<usize> = out.killed.iter().map(|&(_, c)| c).collect();
        killed.sort();
        assert_eq!(killed, vec![1, 5, 9]);
        assert_eq!(out.deficit, 0);
    }

    #[test]
    fn respects_beta_floor() {
        let umm: Vec<f32> = (0..10).map(|i| i as f32 * 0.1).collect();
        let (mut m, topo) = model_with_umm(&umm);
        let out = global_channel_prune(&mut m, &topo, 0.9, 0.5, 0.5);
        assert_eq!(m.masked_param(2).unwrap().alive_count(), 3);
        assert_eq!(out.deficit, 2);
    }

    #[test]
    fn one_shot_zero_is_noop() {
        let (mut m, topo) = model_with_umm(&[0.3, 0.2, 0.1]);
        let before = m.clone();
        let out = one_shot_channel_prune(&mut m, &topo, PruneCriterion::Umm, 0.0, 0).unwrap();
        assert!(out.killed.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn one_shot_orderings() {
        let umm = [0.3, 0.1, 0.2, 0.4];
        for (crit, expected) in [
            (PruneCriterion::Umm, vec![1, 2]),
            (PruneCriterion::UmmRev, vec![3, 0]),
            (PruneCriterion::Mmm, vec![1, 2]),
        ] {
            let (mut m, topo) = model_with_umm(&umm);
            let out = one_shot_channel_prune(&mut m, &topo, crit, 0.5, 0).unwrap();
            let got: Vec<usize> = out.killed.iter().map(|&(_, c)| c).collect();
            assert_eq!(got, expected, "{crit:?}");
        }
    }
}
