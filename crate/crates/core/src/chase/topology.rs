//! Which layers may lose channels, and where each channel's output lands.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, LayerKind, ModelState};

/// Downstream parameter layer fed by a layer's output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consumer {
    pub layer: usize,
    /// Consumer input units per producer channel (`H * W` across a flatten).
    pub units_per_channel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    FirstLayer,
    Classifier,
    /// Output is added onto a residual stream.
    ClosesResidual,
    /// Output is the source of a skip connection.
    SkipSource,
    /// `prunable_channels` is false in the layer spec.
    Fixed,
    Configured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTopology {
    pub layer: usize,
    pub channels: usize,
    pub consumer: Option<Consumer>,
    /// Residual layer this layer's output flows into as the branch.
    pub closes_residual: Option<usize>,
    pub skip_source: bool,
    pub excluded: Option<ExclusionReason>,
}

/// Channel-level view of an architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTopology {
    pub layers: Vec<LayerTopology>,
}

impl ChannelTopology {
    /// Default exclusions: first and last parameter layers, residual-closing
    /// layers (unless `prune_skip`), skip sources, fixed layers and `extra`.
    pub fn new(arch: &Architecture, extra: &[usize], prune_skip: bool) -> Result<Self> {
        let shapes = arch.shapes()?;
        let params = arch.param_layers();
        let extra: BTreeSet<usize> = extra.iter().copied().collect();
        for &e in &extra {
            if !params.contains(&e) {
                return Err(Error::Config(format!("excluded layer {e} has no parameters")));
            }
        }
        let skip_from: BTreeSet<usize> = arch
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::ResidualAdd { from, .. } => Some(from),
                _ => None,
            })
            .collect();

        let mut layers = Vec::with_capacity(params.len());
        for (pi, &l) in params.iter().enumerate() {
            let spec = &arch.layers[l];
            let mut consumer = None;
            let mut closes_residual = None;
            let mut skip_source = skip_from.contains(&l);
            let mut upc = 1usize;
            for j in l + 1..arch.layers.len() {
                match arch.layers[j].kind {
                    LayerKind::Relu => {}
                    LayerKind::Flatten => {
                        let s = &shapes[j];
                        upc *= s[1..].iter().product::<usize>();
                    }
                    LayerKind::GlobalPool => {}
                    LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                        consumer = Some(Consumer {
                            layer: j,
                            units_per_channel: upc,
                        });
                        break;
                    }
                    LayerKind::ResidualAdd { .. } => {
                        closes_residual = Some(j);
                        break;
                    }
                    LayerKind::SoftmaxXentLoss => break,
                }
                if skip_from.contains(&j) {
                    skip_source = true;
                }
            }
            let excluded = if pi == 0 {
                Some(ExclusionReason::FirstLayer)
            } else if pi + 1 == params.len() {
                Some(ExclusionReason::Classifier)
            } else if !spec.prunable_channels {
                Some(ExclusionReason::Fixed)
            } else if skip_source {
                Some(ExclusionReason::SkipSource)
            } else if closes_residual.is_some() && !prune_skip {
                Some(ExclusionReason::ClosesResidual)
            } else if extra.contains(&l) {
                Some(ExclusionReason::Configured)
            } else {
                None
            };
            layers.push(LayerTopology {
                layer: l,
                channels: spec.out_channels().unwrap(),
                consumer,
                closes_residual,
                skip_source,
                excluded,
            });
        }
        Ok(Self { layers })
    }

    pub fn get(&self, layer: usize) -> Option<&LayerTopology> {
        self.layers.iter().find(|t| t.layer == layer)
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|t| t.excluded.is_none())
            .map(|t| t.layer)
            .collect()
    }

    pub fn is_prunable(&self, layer: usize) -> bool {
        self.get(layer).is_some_and(|t| t.excluded.is_none())
    }

    /// Channels in prunable layers.
    pub fn prunable_channels(&self) -> usize {
        self.layers
            .iter()
            .filter(|t| t.excluded.is_none())
            .map(|t| t.channels)
            .sum()
    }
}

/// Dead fraction of the channels in prunable layers; 0 when none are prunable.
pub fn channel_sparsity(model: &ModelState, topo: &ChannelTopology) -> f64 {
    let total = topo.prunable_channels();
    if total == 0 {
        return 0.0;
    }
    dead_channels(model, topo) as f64 / total as f64
}

pub fn dead_channels(model: &ModelState, topo: &ChannelTopology) -> usize {
    topo.prunable_layers()
        .iter()
        .map(|&l| {
            let p = model.masked_param(l).expect("param layer");
            p.out_channels() - p.alive_count()
        })
        .sum()
}

/// Removes output channel `c` of `layer` and the matching input units of its
/// consumer. Returns the number of active weights freed.
pub fn kill_channel(model: &mut ModelState, topo: &ChannelTopology, layer: usize, c: usize) -> usize {
    let t = topo.get(layer).expect("layer in topology");
    let lp = model.layer_mut(layer).expect("param layer");
    let mut freed = lp.weight.kill_channel(c);
    lp.enforce_topology();
    if let Some(cons) = t.consumer {
        let cp = model.layer_mut(cons.layer).expect("consumer layer");
        let upc = cons.units_per_channel;
        for u in c * upc..(c + 1) * upc {
            freed += cp.weight.kill_input(u);
        }
        cp.enforce_topology();
    }
    freed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zoo::{mlp, residual_mlp, vgg_lite};

    #[test]
    fn mlp_only_middle_layers_prunable() {
        let arch = mlp(20, &[16, 12, 8], 3).unwrap();
        let t = ChannelTopology::new(&arch, &[], false).unwrap();
        assert_eq!(t.prunable_layers(), vec![2, 4]);
        assert_eq!(t.prunable_channels(), 20);
        assert_eq!(
            t.get(2).unwrap().consumer,
            Some(Consumer {
                layer: 4,
                units_per_channel: 1
            })
        );
    }

    #[test]
    fn flatten_multiplies_units() {
        let arch = vgg_lite(3, 16, 10, 8).unwrap();
        let t = ChannelTopology::new(&arch, &[], false).unwrap();
        let last_conv = t.get(10).unwrap();
        assert_eq!(last_conv.consumer.unwrap().units_per_channel, 4);
        assert_eq!(t.prunable_layers(), vec![2, 4, 6, 8, 10, 13]);
    }

    #[test]
    fn residual_exclusions_and_prune_skip() {
        let arch = residual_mlp(10, 8, 2, 3).unwrap();
        let t = ChannelTopology::new(&arch, &[], false).unwrap();
        // Stem 0; blocks at 2..7 and 7..12; head 12.
        assert_eq!(t.get(0).unwrap().excluded, Some(ExclusionReason::FirstLayer));
        assert!(t.get(0).unwrap().skip_source);
        assert_eq!(t.get(4).unwrap().excluded, Some(ExclusionReason::ClosesResidual));
        assert_eq!(t.prunable_layers(), vec![2, 7]);
        let skip = ChannelTopology::new(&arch, &[], true).unwrap();
        assert_eq!(skip.prunable_layers(), vec![2, 4, 7, 9]);
        assert_eq!(skip.get(4).unwrap().consumer, None);
    }

    #[test]
    fn configured_exclusions() {
        let arch = mlp(20, &[16, 12, 8], 3).unwrap();
        let t = ChannelTopology::new(&arch, &[4], false).unwrap();
        assert_eq!(t.prunable_layers(), vec![2]);
        assert!(ChannelTopology::new(&arch, &[1], false).is_err());
    }

    #[test]
    fn kill_clears_consumer_inputs() {
        let arch = mlp(6, &[5, 4], 3).unwrap();
        let mut m = ModelState::new(arch, 0).unwrap();
        let t = ChannelTopology::new(&m.arch().clone(), &[], false).unwrap();
        let freed = kill_channel(&mut m, &t, 2, 1);
        // Row 1 of layer 2 (5 inputs) plus column 1 of layer 4 (3 outputs).
        assert_eq!(freed, 5 + 3);
        let cons = m.masked_param(4).unwrap();
        assert!(cons.dead_inputs()[1]);
        assert!((0..3).all(|o| !cons.mask()[o * 4 + 1]));
        assert_eq!(channel_sparsity(&m, &t), 0.25);
        m.check_invariants().unwrap();
    }
}
