//! Training loops for static-sparse, SET/RigL and Chase runs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{dense_flops, theoretical_flops};
use crate::chase::{
    channel_sparsity, channel_sparsity_target, global_channel_prune, global_grow_feedback, rebalance,
    ChannelTopology, ChaseConfig, FeedbackParams, FeedbackState, SparsitySchedule,
};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, LrSchedule, ModelState};
use crate::sparse::{dst_step, global_sparsity, Anneal, GrowPolicy, PruneRateSchedule, UpdateScope};
use crate::stats::{amenable_fractions, AmenableFraction, BaselineSlot, DEFAULT_PROBE_THRESHOLDS};

fn default_momentum() -> f32 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    /// Seeds batch order and random regrowth.
    #[serde(default)]
    pub seed: u64,
}

impl TrainSettings {
    pub fn iterations_per_epoch(&self, train_len: usize) -> usize {
        (train_len / self.batch_size.max(1)).max(1)
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(Error::Config(format!(
                "batch size {} must lie in [1, {train_len}]",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("need 0 <= momentum < 1 and weight_decay >= 0".into()));
        }
        self.lr.validate()
    }
}

/// SET / RigL topology updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DstSettings {
    pub policy: GrowPolicy,
    #[serde(default = "default_scope")]
    pub scope: UpdateScope,
    pub update_every: usize,
    #[serde(default = "default_rate")]
    pub initial_rate: f64,
    #[serde(default = "default_anneal")]
    pub anneal: Anneal,
    /// Iteration after which the topology is frozen.
    #[serde(default)]
    pub stop: usize,
}

fn default_scope() -> UpdateScope {
    UpdateScope::PerLayer
}

fn default_rate() -> f64 {
    0.5
}

fn default_anneal() -> Anneal {
    Anneal::Cosine
}

impl DstSettings {
    pub fn new(policy: GrowPolicy, update_every: usize, stop: usize) -> Self {
        Self {
            policy,
            scope: default_scope(),
            update_every,
            initial_rate: default_rate(),
            anneal: default_anneal(),
            stop,
        }
    }

    fn schedule(&self) -> PruneRateSchedule {
        PruneRateSchedule {
            initial_rate: self.initial_rate,
            anneal: self.anneal,
            end: self.stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Masks fixed after initialization.
    Static,
    Dst(DstSettings),
    Chase(ChaseConfig),
}

/// Amenable-fraction probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub every: usize,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Layers to probe; empty means every channel-prunable layer.
    #[serde(default)]
    pub layers: Vec<usize>,
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_PROBE_THRESHOLDS.to_vec()
}

impl ProbeSettings {
    pub fn every(every: usize) -> Self {
        Self {
            every,
            thresholds: default_thresholds(),
            layers: Vec::new(),
        }
    }
}

/// One metrics line per optimizer step, taken after the step and any topology
/// update that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    /// Steps completed.
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub param_sparsity: f64,
    pub channel_sparsity: f64,
    /// Inside a soft-bound window (grown above budget).
    pub in_window: bool,
    pub alive_channels: BTreeMap<usize, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub amenable: Vec<AmenableFraction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TopologyEvent {
    ChannelPrune {
        iteration: usize,
        target: f64,
        killed: usize,
        freed: usize,
        deficit: usize,
    },
    Grow {
        iteration: usize,
        state: FeedbackState,
    },
    Rebalance {
        iteration: usize,
        state: FeedbackState,
    },
    Dst {
        iteration: usize,
        rate: f64,
        pruned: usize,
        grown: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    /// Probe rows, including the all-zero row at iteration 0.
    pub timeline: Vec<AmenableFraction>,
    pub events: Vec<TopologyEvent>,
    /// Theoretical training FLOPs summed over all steps, using the masks in
    /// force at each forward pass.
    pub train_flops: f64,
    /// Training FLOPs of the same schedule with dense layers.
    pub dense_train_flops: f64,
}

impl TrainLog {
    /// Metrics as JSON lines.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Top-1 accuracy, evaluated in chunks of 256.
pub fn accuracy(model: &ModelState, split: &Split) -> Result<f64> {
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..split.len()).collect();
    for chunk in rows.chunks(256) {
        let (x, y) = split.gather(chunk);
        let logits = model.forward(&x)?;
        for (r, &label) in y.iter().enumerate() {
            let row = logits.row(r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

fn alive_map(model: &ModelState) -> BTreeMap<usize, usize> {
    model
        .masked_params()
        .map(|p| (p.layer_id(), p.alive_count()))
        .collect()
}

/// Topology used for channel accounting by a method.
pub fn method_topology(model: &ModelState, method: &Method) -> Result<ChannelTopology> {
    match method {
        Method::Chase(c) => ChannelTopology::new(model.arch(), &c.exclusions, c.prune_skip),
        _ => ChannelTopology::new(model.arch(), &[], false),
    }
}

struct ChaseState<'a> {
    cfg: &'a ChaseConfig,
    schedule: Option<SparsitySchedule>,
    feedback: FeedbackParams,
    window_end: Option<usize>,
}

/// Trains `model` in place. Masks must already be initialized.
pub fn train(
    model: &mut ModelState,
    data: &Dataset,
    settings: &TrainSettings,
    method: &Method,
    probes: Option<&ProbeSettings>,
) -> Result<TrainLog> {
    settings.validate(data.train.len())?;
    let ipe = settings.iterations_per_epoch(data.train.len());
    let total = ipe * settings.epochs;
    let topo = method_topology(model, method)?;

    let mut chase = match method {
        Method::Chase(cfg) => {
            cfg.validate()?;
            if cfg.tau_total != 0 && cfg.tau_total != total {
                return Err(Error::Config(format!(
                    "tau_total {} does not match the {total} planned iterations",
                    cfg.tau_total
                )));
            }
            if cfg.tau_stop > total {
                return Err(Error::Config(format!("tau_stop {} exceeds {total}", cfg.tau_stop)));
            }
            let schedule = if cfg.s_c > 0.0 {
                if cfg.tau_stop < cfg.delta_t {
                    return Err(Error::Config(format!(
                        "tau_stop {} leaves no channel prune step at interval {}",
                        cfg.tau_stop, cfg.delta_t
                    )));
                }
                Some(SparsitySchedule::for_run(cfg.s_c, cfg.delta_t, cfg.tau_stop)?)
            } else {
                None
            };
            Some(ChaseState {
                cfg,
                schedule,
                feedback: FeedbackParams::new(cfg.s_delta, cfg.h_i, cfg.feedback_max_iters),
                window_end: None,
            })
        }
        Method::Dst(d) => {
            if d.update_every == 0 || !(0.0..=1.0).contains(&d.initial_rate) {
                return Err(Error::Config(
                    "dst needs update_every >= 1 and initial_rate in [0, 1]".into(),
                ));
            }
            None
        }
        Method::Static => None,
    };

    let mut log = TrainLog::default();
    let mut baseline = BaselineSlot::new();
    let probe_layers: Vec<usize> = match probes {
        Some(p) if !p.layers.is_empty() => p.layers.clone(),
        _ => topo.prunable_layers(),
    };
    if let Some(p) = probes {
        if p.every == 0 {
            return Err(Error::Config("probe interval must be positive".into()));
        }
        let b = baseline.snapshot(model, 0)?;
        log.timeline
            .extend(amenable_fractions(model, b, 0, &p.thresholds, &probe_layers));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut grow_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let dense_step = dense_flops(model.arch())?.training * settings.batch_size as f64;
    let mut t = 0usize;
    for epoch in 0..settings.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = settings.lr.lr_at(epoch);
        for b in 0..ipe {
            let (x, y) = data
                .train
                .gather(&order[b * settings.batch_size..(b + 1) * settings.batch_size]);
            let step = theoretical_flops(model)?.training * settings.batch_size as f64;
            log.train_flops += step;
            log.dense_train_flops += dense_step;
            let (loss, grads) = model.backward(&x, &y)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss { iteration: t, loss });
            }

            match (method, chase.as_mut()) {
                (Method::Chase(_), Some(st)) => {
                    let cfg = st.cfg;
                    let mut killed = 0;
                    if let Some(sched) = &st.schedule {
                        if t % cfg.delta_t == 0 && t <= cfg.tau_stop {
                            let target = channel_sparsity_target(sched, t);
                            let out = global_channel_prune(model, &topo, target, cfg.beta, cfg.s_c);
                            killed = out.killed.len();
                            if killed > 0 || out.deficit > 0 {
                                log.events.push(TopologyEvent::ChannelPrune {
                                    iteration: t,
                                    target,
                                    killed,
                                    freed: out.freed,
                                    deficit: out.deficit,
                                });
                            }
                        }
                    }
                    if t % cfg.delta_t_p == 0 && t + cfg.delta_t_p <= cfg.tau_stop {
                        let state = global_grow_feedback(model, &grads, cfg.s_p - cfg.s_e, st.feedback)?;
                        log.events.push(TopologyEvent::Grow { iteration: t, state });
                        st.window_end = Some(t + cfg.delta_t_p);
                    } else if killed > 0 && st.window_end.is_none() {
                        let state = rebalance(model, &grads, cfg.s_p, st.feedback)?;
                        log.events.push(TopologyEvent::Rebalance { iteration: t, state });
                    }
                }
                (Method::Dst(d), _) => {
                    if t > 0 && t % d.update_every == 0 && t < d.stop {
                        let rate = d.schedule().rate_at(t);
                        let out = dst_step(model, &grads, rate, d.policy, d.scope, &mut grow_rng)?;
                        log.events.push(TopologyEvent::Dst {
                            iteration: t,
                            rate,
                            pruned: out.pruned,
                            grown: out.grown,
                        });
                    }
                }
                _ => {}
            }

            sgd_step(model, &grads, lr as f32, settings.momentum, settings.weight_decay)?;
            t += 1;

            if let Some(st) = chase.as_mut() {
                if st.window_end == Some(t) {
                    let state = rebalance(model, &grads, st.cfg.s_p, st.feedback)?;
                    log.events.push(TopologyEvent::Rebalance { iteration: t, state });
                    st.window_end = None;
                }
            }

            let mut record = IterRecord {
                iteration: t,
                epoch,
                loss,
                lr,
                param_sparsity: global_sparsity(model),
                channel_sparsity: channel_sparsity(model, &topo),
                in_window: chase.as_ref().is_some_and(|s| s.window_end.is_some()),
                alive_channels: alive_map(model),
                amenable: Vec::new(),
            };
            if let (Some(p), Some(b)) = (probes, baseline.get()) {
                if t % p.every == 0 || t == total {
                    let rows = amenable_fractions(model, b, t, &p.thresholds, &probe_layers);
                    log.timeline.extend(rows.iter().copied());
                    record.amenable = rows;
                }
            }
            log.records.push(record);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetSpec};
    use crate::nn::zoo::mlp;
    use crate::sparse::{init_masks, SparseInitMethod};

    fn toy() -> (ModelState, Dataset) {
        let data = load_dataset(&DatasetSpec::Synthetic {
            classes: 2,
            shape: vec![8],
            train: 64,
            test: 32,
            seed: 3,
            separation: 1.0,
            noise: 0.5,
        })
        .unwrap();
        let model = ModelState::new(mlp(8, &[16, 16], 2).unwrap(), 0).unwrap();
        (model, data)
    }

    fn settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            batch_size: 16,
            epochs,
            lr: LrSchedule::constant(0.05, epochs),
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn dense_training_lowers_loss() {
        let (mut m, data) = toy();
        let log = train(&mut m, &data, &settings(10), &Method::Static, None).unwrap();
        assert_eq!(log.records.len(), 40);
        assert!(log.records.last().unwrap().loss < log.records[0].loss);
    }

    #[test]
    fn static_masks_never_change() {
        let (mut m, data) = toy();
        init_masks(&mut m, SparseInitMethod::uniform(0.8), 0).unwrap();
        let before: Vec<Vec<bool>> = m.masked_params().map(|p| p.mask().to_vec()).collect();
        train(&mut m, &data, &settings(2), &Method::Static, None).unwrap();
        let after: Vec<Vec<bool>> = m.masked_params().map(|p| p.mask().to_vec()).collect();
        assert_eq!(before, after);
        m.check_invariants().unwrap();
    }

    #[test]
    fn probes_start_at_zero() {
        let (mut m, data) = toy();
        init_masks(&mut m, SparseInitMethod::uniform(0.5), 0).unwrap();
        let dst = Method::Dst(DstSettings::new(GrowPolicy::Rigl, 2, 8));
        let log = train(&mut m, &data, &settings(2), &dst, Some(&ProbeSettings::every(4))).unwrap();
        assert!(log.timeline.iter().filter(|r| r.iteration == 0).all(|r| r.fraction == 0.0));
        assert!(log.timeline.iter().any(|r| r.iteration == 8));
    }

    #[test]
    fn chase_rejects_mismatched_total() {
        let (mut m, data) = toy();
        let mut cfg = ChaseConfig::new(0.8, 0.2);
        cfg.tau_total = 5;
        cfg.tau_stop = 4;
        let err = train(&mut m, &data, &settings(2), &Method::Chase(cfg), None);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
