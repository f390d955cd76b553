//! Per-channel sparsity statistics and sparse-amenable channel detection.
//!
//! Three statistics are tracked per output channel:
//!
//! - weight sparsity (WS): fraction of masked-out positions;
//! - unmasked mean magnitude (UMM): `sum |w| / n_total`, masked positions
//!   counting as zero, so it falls with both fewer and smaller weights;
//! - masked mean magnitude (MMM): `sum |w| / n_active`, zero for empty channels.
//!
//! A channel is *amenable* at threshold `v` once its WS has risen, or its UMM
//! fallen, by more than a relative `v` from the baseline taken at
//! initialization.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::sparse::MaskedParam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub layer_id: usize,
    pub channel: usize,
    pub ws: f64,
    pub umm: f64,
    pub mmm: f64,
    pub n_total: usize,
    pub n_active: usize,
}

pub fn channel_stats(param: &MaskedParam) -> Vec<ChannelStats> {
    let w = param.weights().data();
    let mask = param.mask();
    (0..param.out_channels())
        .map(|c| {
            let range = param.channel_range(c);
            let n_total = range.len();
            let mut n_active = 0usize;
            let mut abs_sum = 0.0f64;
            for i in range {
                n_active += mask[i] as usize;
                abs_sum += (w[i] as f64).abs();
            }
            ChannelStats {
                layer_id: param.layer_id(),
                channel: c,
                ws: 1.0 - n_active as f64 / n_total as f64,
                umm: abs_sum / n_total as f64,
                mmm: if n_active == 0 {
                    0.0
                } else {
                    abs_sum / n_active as f64
                },
                n_total,
                n_active,
            }
        })
        .collect()
}

pub fn channel_ws(param: &MaskedParam) -> Vec<f64> {
    channel_stats(param).iter().map(|s| s.ws).collect()
}

pub fn channel_umm(param: &MaskedParam) -> Vec<f64> {
    channel_stats(param).iter().map(|s| s.umm).collect()
}

pub fn channel_mmm(param: &MaskedParam) -> Vec<f64> {
    channel_stats(param).iter().map(|s| s.mmm).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub ws0: f64,
    pub umm0: f64,
}

/// WS and UMM of every channel at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBaseline {
    pub layers: BTreeMap<usize, Vec<BaselineEntry>>,
    pub captured_at: usize,
}

impl ChannelBaseline {
    fn capture(model: &ModelState, iteration: usize) -> Self {
        let layers = model
            .masked_params()
            .map(|p| {
                let entries = channel_stats(p)
                    .into_iter()
                    .map(|s| BaselineEntry {
                        ws0: s.ws,
                        umm0: s.umm,
                    })
                    .collect();
                (p.layer_id(), entries)
            })
            .collect();
        Self {
            layers,
            captured_at: iteration,
        }
    }

    pub fn get(&self, layer: usize, channel: usize) -> Option<BaselineEntry> {
        self.layers.get(&layer)?.get(channel).copied()
    }
}

/// Holds the one-time baseline snapshot.
#[derive(Debug, Clone, Default)]
pub struct BaselineSlot {
    baseline: Option<ChannelBaseline>,
}

impl BaselineSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Captures the baseline. Allowed exactly once, at iteration 0.
    pub fn snapshot(&mut self, model: &ModelState, iteration: usize) -> Result<&ChannelBaseline> {
        if let Some(b) = &self.baseline {
            return Err(Error::BaselineAlreadyCaptured(b.captured_at));
        }
        if iteration != 0 {
            return Err(Error::BaselineNotAtInit(iteration));
        }
        Ok(self.baseline.insert(ChannelBaseline::capture(model, iteration)))
    }

    pub fn get(&self) -> Option<&ChannelBaseline> {
        self.baseline.as_ref()
    }
}

/// WS-relative increase test. A channel that started fully dense counts as
/// amenable as soon as any of its weights is masked.
pub fn ws_amenable(ws0: f64, ws: f64, v: f64) -> bool {
    if ws0 == 0.0 {
        ws > 0.0
    } else {
        (ws - ws0) / ws0 > v
    }
}

/// UMM-relative decrease test. Channels with zero baseline UMM never qualify.
pub fn umm_amenable(umm0: f64, umm: f64, v: f64) -> bool {
    umm0 > 0.0 && (umm0 - umm) / umm0 > v
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AmenableChannels {
    pub by_ws: BTreeSet<(usize, usize)>,
    pub by_umm: BTreeSet<(usize, usize)>,
    pub union: BTreeSet<(usize, usize)>,
}

/// Channels that became sparser than at initialization by more than `v`.
pub fn amenable_channels(model: &ModelState, baseline: &ChannelBaseline, v: f64) -> AmenableChannels {
    let mut out = AmenableChannels::default();
    for p in model.masked_params() {
        let Some(base) = baseline.layers.get(&p.layer_id()) else {
            continue;
        };
        for s in channel_stats(p) {
            let b = base[s.channel];
            let key = (s.layer_id, s.channel);
            let ws = ws_amenable(b.ws0, s.ws, v);
            let umm = umm_amenable(b.umm0, s.umm, v);
            if ws {
                out.by_ws.insert(key);
            }
            if umm {
                out.by_umm.insert(key);
            }
            if ws || umm {
                out.union.insert(key);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmenableMetric {
    Ws,
    Umm,
    Union,
}

impl AmenableMetric {
    pub fn name(self) -> &'static str {
        match self {
            AmenableMetric::Ws => "ws",
            AmenableMetric::Umm => "umm",
            AmenableMetric::Union => "union",
        }
    }
}

/// One row of the amenable-fraction timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmenableFraction {
    pub iteration: usize,
    pub layer_id: usize,
    pub metric: AmenableMetric,
    pub v: f64,
    pub fraction: f64,
}

/// Default thresholds probed during training.
pub const DEFAULT_PROBE_THRESHOLDS: [f64; 4] = [0.0, 0.2, 0.3, 0.4];

/// Per-layer amenable fractions for every `v`, for the given layers.
pub fn amenable_fractions(
    model: &ModelState,
    baseline: &ChannelBaseline,
    iteration: usize,
    thresholds: &[f64],
    layers: &[usize],
) -> Vec<AmenableFraction> {
    let mut rows = Vec::new();
    for &v in thresholds {
        let sets = amenable_channels(model, baseline, v);
        for &layer in layers {
            let Some(p) = model.masked_param(layer) else {
                continue;
            };
            let n = p.out_channels() as f64;
            for (metric, set) in [
                (AmenableMetric::Ws, &sets.by_ws),
                (AmenableMetric::Umm, &sets.by_umm),
                (AmenableMetric::Union, &sets.union),
            ] {
                let count = set.range((layer, 0)..(layer + 1, 0)).count();
                rows.push(AmenableFraction {
                    iteration,
                    layer_id: layer,
                    metric,
                    v,
                    fraction: count as f64 / n,
                });
            }
        }
    }
    rows
}

/// Writes timeline rows as CSV with header `iteration,layer_id,metric,v,fraction`.
pub fn write_timeline_csv<W: Write>(rows: &[AmenableFraction], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,layer_id,metric,v,fraction")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            r.layer_id,
            r.metric.name(),
            r.v,
            r.fraction
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(weights: Vec<f32>, mask: Vec<bool>, out: usize) -> MaskedParam {
        let n = weights.len();
        let w = Tensor::from_vec(&[out, n / out], weights).unwrap();
        MaskedParam::with_mask(0, w, mask)
    }

    #[test]
    fn ws_of_partially_active_channel() {
        let mut mask = vec![false; 9];
        mask[..3].iter_mut().for_each(|m| *m = true);
        let p = param(vec![1.0; 9], mask, 1);
        assert!((channel_ws(&p)[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ws_extremes() {
        let p = param(vec![1.0; 8], vec![true, true, true, true, false, false, false, false], 2);
        assert_eq!(channel_ws(&p), vec![0.0, 1.0]);
    }

    #[test]
    fn umm_and_mmm_formulas() {
        let p = param(vec![0.2, -0.2, 0.0, 0.0], vec![true, true, false, false], 1);
        assert!((channel_umm(&p)[0] - 0.1).abs() < 1e-7);
        assert!((channel_mmm(&p)[0] - 0.2).abs() < 1e-7);
        let single = param(vec![0.7, 0.0], vec![true, false], 1);
        assert!((channel_mmm(&single)[0] - 0.7).abs() < 1e-7);
        let empty = param(vec![0.0, 0.0], vec![false, false], 1);
        assert_eq!(channel_mmm(&empty)[0], 0.0);
        assert_eq!(channel_umm(&empty)[0], 0.0);
        let dense = param(vec![0.5, -0.5, 0.5], vec![true; 3], 1);
        assert!((channel_umm(&dense)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn amenability_rules() {
        assert!(ws_amenable(0.5, 0.66, 0.3));
        assert!(!ws_amenable(0.5, 0.5, 0.0));
        assert!(ws_amenable(0.0, 0.01, 100.0));
        assert!(!umm_amenable(1.0, 0.9, 0.2));
        assert!(umm_amenable(1.0, 0.7, 0.2));
        assert!(!umm_amenable(0.0, 0.0, 0.0));
    }

    #[test]
    fn timeline_csv_header() {
        let rows = vec![AmenableFraction {
            iteration: 3,
            layer_id: 2,
            metric: AmenableMetric::Umm,
            v: 0.2,
            fraction: 0.25,
        }];
        let mut buf = Vec::new();
        write_timeline_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,layer_id,metric,v,fraction\n3,2,umm,0.2,0.25\n"
        );
    }
}
