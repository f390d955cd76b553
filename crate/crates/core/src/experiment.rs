//! Config-driven experiment runner: train, probe, compact, verify, bench.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::{
    dense_equivalent_flops, dense_flops, measure_throughput, theoretical_flops, ThroughputReport,
    ThroughputSettings,
};
use crate::chase::{channel_sparsity, one_shot_channel_prune, ChannelTopology, ChaseConfig, PruneCriterion};
use crate::compact::{compact, save_compact, sidecar, verify_equivalence, CompactModel, EquivalenceReport};
use crate::data::{load_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::nn::zoo::ModelPreset;
use crate::nn::{LrSchedule, ModelState};
use crate::sparse::{global_sparsity, init_masks, Anneal, GrowPolicy, SparseInitKind, SparseInitMethod, UpdateScope};
use crate::stats::write_timeline_csv;
use crate::tensor::Tensor;
use crate::train::{accuracy, method_topology, train, DstSettings, Method, ProbeSettings, TrainSettings};

fn default_update_every() -> usize {
    100
}

fn default_rate() -> f64 {
    0.5
}

fn default_scope() -> UpdateScope {
    UpdateScope::PerLayer
}

/// DST hyperparameters as written in a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstConfig {
    #[serde(default = "default_update_every")]
    pub update_every: usize,
    /// Epoch after which the topology is frozen; defaults to the last epoch.
    #[serde(default)]
    pub stop_epoch: Option<usize>,
    #[serde(default = "default_rate")]
    pub initial_rate: f64,
    #[serde(default = "default_scope")]
    pub scope: UpdateScope,
}

impl Default for DstConfig {
    fn default() -> Self {
        Self {
            update_every: default_update_every(),
            stop_epoch: None,
            initial_rate: default_rate(),
            scope: default_scope(),
        }
    }
}

/// Written as `"static"` or `{"<method>": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    Static,
    Set(DstConfig),
    Rigl(DstConfig),
    /// `tau_stop = 0` takes the experiment's `stop_epoch`.
    Chase(ChaseConfig),
    /// RigL training followed by one-shot channel pruning with each criterion.
    /// The first criterion's model is the one compacted.
    OneShot {
        #[serde(flatten)]
        dst: DstConfig,
        criteria: Vec<PruneCriterion>,
        s_c: f64,
    },
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Static => "static",
            MethodConfig::Set(_) => "set",
            MethodConfig::Rigl(_) => "rigl",
            MethodConfig::Chase(_) => "chase",
            MethodConfig::OneShot { .. } => "one_shot",
        }
    }

    /// Whether this method removes whole channels.
    pub fn is_structured(&self) -> bool {
        matches!(self, MethodConfig::Chase(_) | MethodConfig::OneShot { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    #[serde(default = "default_true")]
    pub throughput: bool,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_verify_samples")]
    pub verify_samples: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    64
}
fn default_reps() -> usize {
    30
}
fn default_warmup() -> usize {
    5
}
fn default_verify_samples() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-5
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            throughput: true,
            batch: default_batch(),
            reps: default_reps(),
            warmup: default_warmup(),
            verify_samples: default_verify_samples(),
            tol: default_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    DeltaT,
    DeltaTP,
    SC,
    SP,
    Beta,
    SE,
}

impl SweepParam {
    fn label(&self) -> &'static str {
        match self {
            SweepParam::DeltaT => "delta_t",
            SweepParam::DeltaTP => "delta_t_p",
            SweepParam::SC => "s_c",
            SweepParam::SP => "s_p",
            SweepParam::Beta => "beta",
            SweepParam::SE => "s_e",
        }
    }
}

/// One Chase hyperparameter varied over a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

fn default_momentum() -> f32 {
    0.9
}
fn default_wd() -> f32 {
    5e-4
}
fn default_init() -> SparseInitKind {
    SparseInitKind::Erk
}
fn default_sparsity() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelPreset,
    pub dataset: DatasetSpec,
    pub method: MethodConfig,
    #[serde(default = "default_init")]
    pub init: SparseInitKind,
    /// Mask sparsity for non-Chase methods; Chase uses its own `s_init`/`s_p`.
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub probes: Option<ProbeSettings>,
    /// Relative paths are joined to the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Epoch at which Chase exploration stops; defaults to 80% of training.
    #[serde(default)]
    pub stop_epoch: Option<usize>,
    #[serde(default)]
    pub bench: BenchSettings,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config and resolves dataset paths against the config's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.lr.validate()?;
        if self.lr.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "lr.total_epochs {} differs from epochs {}",
                self.lr.total_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        if let Some(s) = self.stop_epoch {
            if s == 0 || s > self.epochs {
                return Err(Error::Config(format!("stop_epoch {s} outside 1..={}", self.epochs)));
            }
        }
        if let DatasetSpec::File { path, labels, .. } = &self.dataset {
            for p in std::iter::once(path).chain(labels.iter()) {
                if !p.exists() {
                    return Err(Error::Config(format!("dataset file {} not found", p.display())));
                }
            }
        }
        match &self.method {
            MethodConfig::Chase(c) => c.validate()?,
            MethodConfig::OneShot { criteria, s_c, .. } => {
                if criteria.is_empty() || !(0.0..1.0).contains(s_c) {
                    return Err(Error::Config(
                        "one_shot needs at least one criterion and s_c in [0, 1)".into(),
                    ));
                }
            }
            _ => {}
        }
        if let Some(sw) = &self.sweep {
            if !matches!(self.method, MethodConfig::Chase(_)) {
                return Err(Error::Config("sweeps vary Chase hyperparameters only".into()));
            }
            if sw.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
        }
        self.model.build()?;
        Ok(())
    }

    fn stop_iteration(&self, ipe: usize) -> usize {
        let stop = self
            .stop_epoch
            .unwrap_or_else(|| ((self.epochs as f64 * 0.8).ceil() as usize).max(1));
        stop * ipe
    }

    /// One config per sweep value, named `<name>/<param>=<value>`; without a
    /// sweep, the config itself.
    pub fn expand_sweep(&self) -> Vec<ExperimentConfig> {
        let Some(sw) = &self.sweep else {
            return vec![self.clone()];
        };
        sw.values
            .iter()
            .map(|&v| {
                let mut cell = self.clone();
                cell.sweep = None;
                cell.name = format!("{}/{}={v}", self.name, sw.param.label());
                if let MethodConfig::Chase(c) = &mut cell.method {
                    match sw.param {
                        SweepParam::DeltaT => c.delta_t = v as usize,
                        SweepParam::DeltaTP => c.delta_t_p = v as usize,
                        SweepParam::SC => c.s_c = v,
                        SweepParam::SP => c.s_p = v,
                        SweepParam::Beta => c.beta = v,
                        SweepParam::SE => c.s_e = v,
                    }
                }
                cell
            })
            .collect()
    }
}

/// Hyperparameter rows of the published Chase runs. Iteration intervals refer
/// to `paper_ipe` iterations per epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperPreset {
    pub name: &'static str,
    pub model: &'static str,
    pub epochs: usize,
    pub stop_epochs: usize,
    pub delta_t: usize,
    pub delta_t_p: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Empty for cosine decay.
    pub lr_drop_epochs: &'static [usize],
    pub weight_decay: f32,
    pub momentum: f32,
    pub s_p: Option<f64>,
    pub s_c: Option<f64>,
    pub paper_ipe: usize,
}

const CIFAR_IPE: usize = 50_000 / 128;
const IMAGENET_IPE: usize = 1_281_167 / 512;

pub const HYPER_PRESETS: [HyperPreset; 6] = [
    HyperPreset {
        name: "cifar-vgg19",
        model: "VGG-19",
        epochs: 160,
        stop_epochs: 130,
        delta_t: 8000,
        delta_t_p: 1000,
        beta: 0.2,
        batch_size: 128,
        lr: 0.1,
        lr_drop_epochs: &[80, 120],
        weight_decay: 5e-4,
        momentum: 0.9,
        s_p: None,
        s_c: None,
        paper_ipe: CIFAR_IPE,
    },
    HyperPreset {
        name: "cifar-resnet50",
        model: "ResNet-50",
        epochs: 160,
        stop_epochs: 130,
        delta_t: 1000,
        delta_t_p: 1000,
        beta: 0.5,
        batch_size: 128,
        lr: 0.1,
        lr_drop_epochs: &[80, 120],
        weight_decay: 5e-4,
        momentum: 0.9,
        s_p: None,
        s_c: None,
        paper_ipe: CIFAR_IPE,
    },
    HyperPreset {
        name: "imagenet-resnet50-100",
        model: "ResNet-50",
        epochs: 100,
        stop_epochs: 80,
        delta_t: 1000,
        delta_t_p: 1000,
        beta: 0.2,
        batch_size: 512,
        lr: 0.512,
        lr_drop_epochs: &[],
        weight_decay: 1e-4,
        momentum: 0.9,
        s_p: None,
        s_c: None,
        paper_ipe: IMAGENET_IPE,
    },
    HyperPreset {
        name: "imagenet-resnet50-150",
        model: "ResNet-50",
        epochs: 150,
        stop_epochs: 120,
        delta_t: 1000,
        delta_t_p: 1500,
        beta: 0.2,
        batch_size: 512,
        lr: 0.512,
        lr_drop_epochs: &[],
        weight_decay: 1e-4,
        momentum: 0.9,
        s_p: None,
        s_c: None,
        paper_ipe: IMAGENET_IPE,
    },
    HyperPreset {
        name: "imagenet-chase-1",
        model: "ResNet-50",
        epochs: 250,
        stop_epochs: 170,
        delta_t: 1000,
        delta_t_p: 2500,
        beta: 0.2,
        batch_size: 512,
        lr: 0.512,
        lr_drop_epochs: &[],
        weight_decay: 1e-4,
        momentum: 0.9,
        s_p: Some(0.8),
        s_c: Some(0.4),
        paper_ipe: IMAGENET_IPE,
    },
    HyperPreset {
        name: "imagenet-chase-2",
        model: "ResNet-50",
        epochs: 250,
        stop_epochs: 170,
        delta_t: 1000,
        delta_t_p: 2500,
        beta: 0.2,
        batch_size: 512,
        lr: 0.512,
        lr_drop_epochs: &[],
        weight_decay: 1e-4,
        momentum: 0.9,
        s_p: Some(0.9),
        s_c: Some(0.4),
        paper_ipe: IMAGENET_IPE,
    },
];

impl HyperPreset {
    pub fn find(name: &str) -> Option<&'static HyperPreset> {
        HYPER_PRESETS.iter().find(|p| p.name == name)
    }

    /// Rescales the schedule to a run of `epochs` epochs with `ipe` iterations
    /// each, keeping every interval's share of total training. Batch size and
    /// learning rate are left to the caller.
    pub fn apply(&self, cfg: &mut ExperimentConfig, epochs: usize, ipe: usize) {
        let paper_total = (self.epochs * self.paper_ipe) as f64;
        let total = (epochs * ipe) as f64;
        let scale = |iters: usize| ((iters as f64 / paper_total * total).round() as usize).max(1);
        cfg.epochs = epochs;
        let stop = ((self.stop_epochs as f64 / self.epochs as f64 * epochs as f64).round() as usize).clamp(1, epochs);
        cfg.stop_epoch = Some(stop);
        cfg.momentum = self.momentum;
        cfg.weight_decay = self.weight_decay;
        cfg.lr = if self.lr_drop_epochs.is_empty() {
            LrSchedule::cosine(cfg.lr.base_lr, epochs)
        } else {
            let drops = self
                .lr_drop_epochs
                .iter()
                .map(|&e| (e * epochs).div_ceil(self.epochs))
                .collect();
            LrSchedule::step_drop(cfg.lr.base_lr, drops, 10.0, epochs)
        };
        if let MethodConfig::Chase(c) = &mut cfg.method {
            c.delta_t = scale(self.delta_t);
            c.delta_t_p = scale(self.delta_t_p);
            c.beta = self.beta;
            if let Some(s) = self.s_p {
                c.s_p = s;
            }
            if let Some(s) = self.s_c {
                c.s_c = s;
            }
            c.tau_stop = 0;
        }
    }
}

fn synthetic(classes: usize, shape: Vec<usize>, train: usize, test: usize) -> DatasetSpec {
    DatasetSpec::Synthetic {
        classes,
        shape,
        train,
        test,
        seed: 7,
        separation: 1.0,
        noise: 1.0,
    }
}

fn desk_config(name: &str, model: ModelPreset, dataset: DatasetSpec, method: MethodConfig, epochs: usize, batch: usize, lr: f64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        model,
        dataset,
        method,
        init: SparseInitKind::Erk,
        sparsity: 0.9,
        lr: LrSchedule::cosine(lr, epochs),
        batch_size: batch,
        epochs,
        momentum: 0.9,
        weight_decay: 5e-4,
        seeds: vec![0],
        probes: None,
        output_dir: None,
        stop_epoch: None,
        bench: BenchSettings::default(),
        sweep: None,
    }
}

fn desk_chase(s_p: f64, s_c: f64, beta: f64, delta_t: usize, delta_t_p: usize) -> ChaseConfig {
    let mut c = ChaseConfig::new(s_p, s_c);
    c.beta = beta;
    c.delta_t = delta_t;
    c.delta_t_p = delta_t_p;
    c
}

pub fn desk_mlp() -> ModelPreset {
    ModelPreset::Mlp {
        input: 784,
        hidden: vec![512, 512],
        classes: 10,
    }
}

pub fn desk_vgg() -> ModelPreset {
    ModelPreset::VggLite {
        channels: 3,
        size: 16,
        classes: 10,
        width: 32,
    }
}

pub fn desk_residual_mlp() -> ModelPreset {
    ModelPreset::ResidualMlp {
        input: 64,
        width: 128,
        blocks: 4,
        classes: 10,
    }
}

/// Runnable desk-scale experiments, by name.
pub fn desk_presets() -> Vec<ExperimentConfig> {
    let mlp_data = || synthetic(10, vec![784], 2048, 512);
    let img_data = || synthetic(10, vec![3, 16, 16], 2048, 512);
    let res_data = || synthetic(10, vec![64], 2048, 512);
    let rigl = MethodConfig::Rigl(DstConfig::default());
    let mut out = vec![
        desk_config("desk-mlp-chase", desk_mlp(), mlp_data(), MethodConfig::Chase(desk_chase(0.9, 0.5, 0.2, 8, 16)), 5, 128, 0.05),
        desk_config("desk-mlp-rigl", desk_mlp(), mlp_data(), rigl.clone(), 5, 128, 0.05),
        desk_config("desk-vgg-chase", desk_vgg(), img_data(), MethodConfig::Chase(desk_chase(0.8, 0.5, 0.2, 16, 32)), 8, 64, 0.05),
        desk_config("desk-vgg-rigl", desk_vgg(), img_data(), rigl.clone(), 10, 64, 0.05),
        desk_config(
            "desk-vgg-one-shot",
            desk_vgg(),
            img_data(),
            MethodConfig::OneShot {
                dst: DstConfig::default(),
                criteria: PruneCriterion::ALL.to_vec(),
                s_c: 0.3,
            },
            30,
            64,
            0.05,
        ),
        desk_config("desk-resmlp-chase", desk_residual_mlp(), res_data(), MethodConfig::Chase(desk_chase(0.8, 0.5, 0.5, 8, 16)), 5, 128, 0.05),
    ];
    let mut skip = desk_chase(0.8, 0.5, 0.5, 8, 16);
    skip.prune_skip = true;
    out.push(desk_config("desk-resmlp-chase-skip", desk_residual_mlp(), res_data(), MethodConfig::Chase(skip), 5, 128, 0.05));
    let mut sweep = out[0].clone();
    sweep.name = "desk-mlp-chase-delta-t".into();
    sweep.sweep = Some(Sweep {
        param: SweepParam::DeltaT,
        values: vec![2.0, 8.0, 32.0],
    });
    out.push(sweep);
    for c in &mut out {
        if matches!(c.method, MethodConfig::Rigl(_) | MethodConfig::OneShot { .. }) {
            c.sparsity = 0.8;
            c.probes = Some(ProbeSettings::every(32));
        }
    }
    out
}

pub fn find_preset(name: &str) -> Option<ExperimentConfig> {
    desk_presets().into_iter().find(|c| c.name == name)
}

/// Trains one seed and everything derived from it.
pub struct SeedRun {
    pub seed: u64,
    pub model: ModelState,
    pub data: Dataset,
    pub log: crate::train::TrainLog,
    pub accuracy: f64,
    pub one_shot: Vec<CriterionAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionAccuracy {
    pub criterion: PruneCriterion,
    pub accuracy: f64,
    pub channel_sparsity: f64,
}

fn method_for(cfg: &ExperimentConfig, ipe: usize) -> Method {
    let total = ipe * cfg.epochs;
    let dst = |d: &DstConfig, policy| {
        let stop = d.stop_epoch.map_or(total, |e| e * ipe);
        Method::Dst(DstSettings {
            policy,
            scope: d.scope,
            update_every: d.update_every,
            initial_rate: d.initial_rate,
            anneal: Anneal::Cosine,
            stop,
        })
    };
    match &cfg.method {
        MethodConfig::Static => Method::Static,
        MethodConfig::Set(d) => dst(d, GrowPolicy::Set),
        MethodConfig::Rigl(d) | MethodConfig::OneShot { dst: d, .. } => dst(d, GrowPolicy::Rigl),
        MethodConfig::Chase(c) => {
            let mut c = c.clone();
            if c.tau_stop == 0 {
                c.tau_stop = cfg.stop_iteration(ipe);
            }
            c.tau_total = total;
            Method::Chase(c)
        }
    }
}

/// Builds, initializes and trains the model for one seed.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let data = load_dataset(&cfg.dataset)?;
    let arch = cfg.model.build()?;
    let mut model = ModelState::new(arch, seed)?;
    let sparsity = match &cfg.method {
        MethodConfig::Chase(c) => c.initial_sparsity(),
        _ => cfg.sparsity,
    };
    if sparsity > 0.0 {
        init_masks(
            &mut model,
            SparseInitMethod {
                kind: cfg.init,
                sparsity,
            },
            seed,
        )?;
    }
    let settings = TrainSettings {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lr: cfg.lr.clone(),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        seed,
    };
    let ipe = settings.iterations_per_epoch(data.train.len());
    let method = method_for(cfg, ipe);
    let log = train(&mut model, &data, &settings, &method, cfg.probes.as_ref())?;
    let acc = accuracy(&model, &data.test)?;

    let mut one_shot = Vec::new();
    if let MethodConfig::OneShot { criteria, s_c, .. } = &cfg.method {
        let topo = ChannelTopology::new(model.arch(), &[], false)?;
        let mut first = None;
        for &criterion in criteria {
            let mut pruned = model.clone();
            one_shot_channel_prune(&mut pruned, &topo, criterion, *s_c, seed)?;
            one_shot.push(CriterionAccuracy {
                criterion,
                accuracy: accuracy(&pruned, &data.test)?,
                channel_sparsity: channel_sparsity(&pruned, &topo),
            });
            first.get_or_insert(pruned);
        }
        model = first.expect("criteria checked non-empty");
    }
    Ok(SeedRun {
        seed,
        model,
        data,
        log,
        accuracy: acc,
        one_shot,
    })
}

/// Per-layer sizes before and after compaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub kind: String,
    pub dense_params: usize,
    pub active_params: usize,
    pub out_channels: usize,
    pub kept_out: usize,
    pub kept_in: usize,
    pub compact_params: usize,
    pub param_sparsity: f64,
    pub channel_sparsity: f64,
}

pub fn layer_rows(model: &ModelState, compact: Option<&CompactModel>) -> Vec<LayerRow> {
    model
        .param_layers()
        .into_iter()
        .map(|l| {
            let p = model.masked_param(l).expect("param layer");
            let (kept_out, kept_in, compact_params) = match compact {
                Some(c) => {
                    let map = c.channel_maps[l].as_ref().expect("param layer map");
                    (map.kept_out.len(), map.kept_in.len(), c.params.weights[l].as_ref().unwrap().len())
                }
                None => (p.out_channels(), p.in_units(), p.len()),
            };
            LayerRow {
                layer: l,
                kind: if p.weights().shape().len() == 4 { "conv2d" } else { "linear" }.into(),
                dense_params: p.len(),
                active_params: p.active_count(),
                out_channels: p.out_channels(),
                kept_out,
                kept_in,
                compact_params,
                param_sparsity: 1.0 - p.active_count() as f64 / p.len() as f64,
                channel_sparsity: 1.0 - p.alive_count() as f64 / p.out_channels() as f64,
            }
        })
        .collect()
}

pub fn layerwise_csv(rows: &[LayerRow]) -> String {
    let mut s = String::from(
        "layer,kind,dense_params,active_params,out_channels,kept_out,kept_in,compact_params,param_sparsity,channel_sparsity\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.layer,
            r.kind,
            r.dense_params,
            r.active_params,
            r.out_channels,
            r.kept_out,
            r.kept_in,
            r.compact_params,
            r.param_sparsity,
            r.channel_sparsity
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub accuracy: f64,
    pub param_sparsity: f64,
    pub channel_sparsity: f64,
    /// Training FLOPs relative to dense training on the same schedule.
    pub train_flops_ratio: f64,
    /// Theoretical inference FLOPs of the final masks relative to dense.
    pub test_flops_ratio: f64,
    /// Compacted model at full density relative to dense; 1.0 for
    /// unstructured methods.
    pub dense_equivalent_test_flops_ratio: f64,
    pub compact_params: usize,
    pub dense_params: usize,
    pub equivalence: Option<EquivalenceReport>,
    pub one_shot: Vec<CriterionAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputComparison {
    pub seed: u64,
    pub masked: ThroughputReport,
    pub compact: Option<ThroughputReport>,
    /// Compact over masked samples per second.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: String,
    pub method: String,
    pub seeds: Vec<SeedReport>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub dense_inference_flops: f64,
    /// Dense inference FLOPs over a dense ResNet-50.
    pub resnet50_flops_ratio: f64,
    pub throughput: Option<ThroughputComparison>,
    pub verification_passed: bool,
}

/// Standard-normal batch shared by both models under comparison.
pub fn bench_input(shape: &[usize], batch: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    let n: usize = full.iter().product();
    Tensor::from_vec(&full, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Compacts, verifies and writes the compact model of one trained seed.
pub fn compact_and_verify(model: &ModelState, samples: usize, tol: f64, seed: u64, dir: &Path) -> Result<(CompactModel, EquivalenceReport)> {
    let c = compact(model)?;
    let eq = verify_equivalence(model, &c, samples, tol, seed)?;
    save_compact(&c, &dir.join("model.chse"))?;
    write(&dir.join("model.json"), serde_json::to_string_pretty(&sidecar(&c))?)?;
    Ok((c, eq))
}

pub fn output_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    match &cfg.output_dir {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => root.join(p),
        None => root.join(&cfg.name),
    }
}

/// Runs every seed of a single (non-sweep) config into `dir`.
pub fn run_single(cfg: &ExperimentConfig, dir: &Path) -> Result<BenchReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let arch = cfg.model.build()?;
    let dense = dense_flops(&arch)?;
    let mut seeds = Vec::new();
    let mut throughput = None;
    let mut passed = true;
    for &seed in &cfg.seeds {
        let run = train_seed(cfg, seed)?;
        let sdir = dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        write(&sdir.join("metrics.jsonl"), run.log.metrics_jsonl()?)?;
        let mut events = String::new();
        for e in &run.log.events {
            events.push_str(&serde_json::to_string(e)?);
            events.push('\n');
        }
        write(&sdir.join("events.jsonl"), events)?;
        if !run.log.timeline.is_empty() {
            let mut buf = Vec::new();
            write_timeline_csv(&run.log.timeline, &mut buf).map_err(|e| Error::io(&sdir, e))?;
            write(&sdir.join("timeline.csv"), buf)?;
        }
        write(&sdir.join("checkpoint.json"), serde_json::to_string(&run.model)?)?;

        let (compacted, eq) = if cfg.method.is_structured() {
            let (c, eq) = compact_and_verify(&run.model, cfg.bench.verify_samples, cfg.bench.tol, seed, &sdir)?;
            passed &= eq.pass;
            (Some(c), Some(eq))
        } else {
            (None, None)
        };
        let rows = layer_rows(&run.model, compacted.as_ref());
        write(&sdir.join("layerwise.csv"), layerwise_csv(&rows))?;

        let theo = theoretical_flops(&run.model)?;
        let dense_eq = match &compacted {
            Some(c) => dense_equivalent_flops(c)?.inference,
            None => dense.inference,
        };
        let topo = method_topology(&run.model, &method_for(cfg, 1))?;
        seeds.push(SeedReport {
            seed,
            accuracy: run.accuracy,
            param_sparsity: global_sparsity(&run.model),
            channel_sparsity: channel_sparsity(&run.model, &topo),
            train_flops_ratio: run.log.train_flops / run.log.dense_train_flops,
            test_flops_ratio: theo.inference / dense.inference,
            dense_equivalent_test_flops_ratio: dense_eq / dense.inference,
            compact_params: rows.iter().map(|r| r.compact_params).sum(),
            dense_params: rows.iter().map(|r| r.dense_params).sum(),
            equivalence: eq,
            one_shot: run.one_shot.clone(),
        });

        if cfg.bench.throughput && throughput.is_none() {
            let settings = ThroughputSettings {
                batch: cfg.bench.batch,
                warmup: cfg.bench.warmup,
                reps: cfg.bench.reps,
                ..Default::default()
            };
            let x = bench_input(&arch.input_shape, settings.batch, seed)?;
            let masked = measure_throughput(&run.model, &x, &settings)?;
            let compact = compacted.as_ref().map(|c| measure_throughput(c, &x, &settings)).transpose()?;
            let speedup = compact.as_ref().map(|c| c.samples_per_sec / masked.samples_per_sec);
            throughput = Some(ThroughputComparison {
                seed,
                masked,
                compact,
                speedup,
            });
        }
    }
    let n = seeds.len() as f64;
    let mean = seeds.iter().map(|s| s.accuracy).sum::<f64>() / n;
    let var = seeds.iter().map(|s| (s.accuracy - mean).powi(2)).sum::<f64>() / n;
    let report = BenchReport {
        name: cfg.name.clone(),
        method: cfg.method.name().into(),
        seeds,
        accuracy_mean: mean,
        accuracy_std: var.sqrt(),
        dense_inference_flops: dense.inference,
        resnet50_flops_ratio: dense.resnet50_ratio(),
        throughput,
        verification_passed: passed,
    };
    write(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Runs a config, expanding any sweep into one sub-directory per cell.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<BenchReport>> {
    cfg.validate()?;
    let dir = output_dir(cfg, root);
    if cfg.sweep.is_none() {
        return Ok(vec![run_single(cfg, &dir)?]);
    }
    let cells = cfg.expand_sweep();
    let mut reports = Vec::with_capacity(cells.len());
    for cell in &cells {
        let leaf = cell.name.rsplit('/').next().unwrap_or(&cell.name);
        reports.push(run_single(cell, &dir.join(leaf))?);
    }
    Ok(reports)
}

/// Loads a run's masked checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: ModelState = serde_json::from_str(&text)?;
    model
        .check_invariants()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(model)
}

/// Every `seed-*` folder of a run directory, sorted.
pub fn seed_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed-")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in desk_presets() {
            p.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
    }

    #[test]
    fn preset_json_round_trip() {
        for p in desk_presets() {
            let text = serde_json::to_string(&p).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), p);
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v = serde_json::to_value(find_preset("desk-mlp-chase").unwrap()).unwrap();
        v["colour"] = "blue".into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn empty_seeds_rejected() {
        let mut c = find_preset("desk-mlp-rigl").unwrap();
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn sweep_expands_delta_t() {
        let c = find_preset("desk-mlp-chase-delta-t").unwrap();
        let cells = c.expand_sweep();
        let dts: Vec<usize> = cells
            .iter()
            .map(|c| match &c.method {
                MethodConfig::Chase(ch) => ch.delta_t,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(dts, vec![2, 8, 32]);
        assert_eq!(cells[1].name, "desk-mlp-chase-delta-t/delta_t=8");
    }

    #[test]
    fn hyper_preset_keeps_interval_shares() {
        let mut c = find_preset("desk-mlp-chase").unwrap();
        let p = HyperPreset::find("cifar-vgg19").unwrap();
        p.apply(&mut c, 16, 100);
        let MethodConfig::Chase(ch) = &c.method else { unreachable!() };
        // 8000 of 160 * 390 iterations, scaled to 1600.
        assert_eq!(ch.delta_t, (8000.0f64 / 62400.0 * 1600.0).round() as usize);
        assert_eq!(c.stop_epoch, Some(13));
        assert_eq!(c.lr.drop_epochs, vec![8, 12]);
        c.validate().unwrap();
    }
}
