//! FLOPs counting and single-threaded inference throughput.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::compact::CompactModel;
use crate::error::{Error, Result};
use crate::nn::{Architecture, LayerKind, ModelState};
use crate::tensor::Tensor;

/// Dense inference FLOPs of a ResNet-50 at 224x224, used to express
/// desk-model counts on a familiar scale.
pub const RESNET50_DENSE_FLOPS: f64 = 8.2e9;

/// Multiply-accumulates per sample of each layer at full density.
pub fn layer_macs(arch: &Architecture) -> Result<Vec<u64>> {
    arch.shapes()?;
    let mut out = vec![0u64; arch.layers.len()];
    for (i, spec) in arch.layers.iter().enumerate() {
        out[i] = match spec.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
            LayerKind::Conv2d { .. } => {
                let g = arch.conv_geom(i)?;
                (g.out_ch * g.patch_len() * g.out_pixels()) as u64
            }
            _ => 0,
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Per-sample forward FLOPs (2 per multiply-accumulate).
    pub inference: f64,
    /// Per-sample training FLOPs, three times inference.
    pub training: f64,
    pub per_layer: Vec<(usize, f64)>,
}

impl FlopsReport {
    fn from_layers(per_layer: Vec<(usize, f64)>) -> Self {
        let inference: f64 = per_layer.iter().map(|(_, f)| f).sum();
        Self {
            inference,
            training: 3.0 * inference,
            per_layer,
        }
    }

    /// Inference FLOPs relative to a dense ResNet-50.
    pub fn resnet50_ratio(&self) -> f64 {
        self.inference / RESNET50_DENSE_FLOPS
    }
}

/// Theoretical FLOPs of a masked model: each layer's dense count scaled by its
/// weight density.
pub fn theoretical_flops(model: &ModelState) -> Result<FlopsReport> {
    let macs = layer_macs(model.arch())?;
    let per_layer = model
        .param_layers()
        .into_iter()
        .map(|l| {
            let p = model.masked_param(l).expect("param layer");
            let density = p.active_count() as f64 / p.len() as f64;
            (l, 2.0 * macs[l] as f64 * density)
        })
        .collect();
    Ok(FlopsReport::from_layers(per_layer))
}

/// FLOPs of a dense architecture with every weight counted.
pub fn dense_flops(arch: &Architecture) -> Result<FlopsReport> {
    let macs = layer_macs(arch)?;
    let per_layer = arch
        .param_layers()
        .into_iter()
        .map(|l| (l, 2.0 * macs[l] as f64))
        .collect();
    Ok(FlopsReport::from_layers(per_layer))
}

/// Dense-equivalent FLOPs of a compacted model: remaining zeros are computed.
pub fn dense_equivalent_flops(model: &CompactModel) -> Result<FlopsReport> {
    dense_flops(&model.arch)
}

/// A model that can run inference for timing.
pub trait Infer {
    fn infer(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Infer for ModelState {
    fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}

impl Infer for CompactModel {
    fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSettings {
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Reps per group for the median-of-means estimate.
    pub group: usize,
    /// Shortest timed interval; short forwards are looped until it is reached.
    pub min_rep_micros: u64,
}

impl Default for ThroughputSettings {
    fn default() -> Self {
        Self {
            batch: 64,
            warmup: 5,
            reps: 30,
            group: 5,
            min_rep_micros: 2000,
        }
    }
}

impl ThroughputSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.group == 0 {
            return Err(Error::Config("throughput batch and group must be positive".into()));
        }
        if self.reps < 30 || self.warmup < 5 {
            return Err(Error::Config(format!(
                "throughput needs at least 30 reps and 5 warmup runs (got {} and {})",
                self.reps, self.warmup
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub batch: usize,
    pub reps: usize,
    /// Forward passes per timed rep.
    pub inner_loops: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_of_means_ms: f64,
    /// `batch / median_of_means`, in samples per second.
    pub samples_per_sec: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the means of consecutive groups of `group` samples.
pub fn median_of_means(samples: &[f64], group: usize) -> f64 {
    let means: Vec<f64> = samples
        .chunks(group.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    median(means)
}

/// Times batched forward passes of `model` on `input` in the calling thread.
pub fn measure_throughput<M: Infer + ?Sized>(
    model: &M,
    input: &Tensor,
    settings: &ThroughputSettings,
) -> Result<ThroughputReport> {
    settings.validate()?;
    if input.rows() != settings.batch {
        return Err(Error::Shape(format!(
            "throughput input has {} rows, batch is {}",
            input.rows(),
            settings.batch
        )));
    }
    for _ in 0..settings.warmup {
        std::hint::black_box(model.infer(input)?);
    }
    let start = Instant::now();
    std::hint::black_box(model.infer(input)?);
    let one = start.elapsed().max(Duration::from_nanos(1));
    let min = Duration::from_micros(settings.min_rep_micros);
    let inner = (min.as_nanos() / one.as_nanos()).max(1) as usize;

    let mut lat = Vec::with_capacity(settings.reps);
    for _ in 0..settings.reps {
        let start = Instant::now();
        for _ in 0..inner {
            std::hint::black_box(model.infer(input)?);
        }
        lat.push(start.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    let var = lat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (lat.len() - 1) as f64;
    let mom = median_of_means(&lat, settings.group);
    Ok(ThroughputReport {
        batch: settings.batch,
        reps: settings.reps,
        inner_loops: inner,
        mean_ms: mean,
        std_ms: var.sqrt(),
        median_of_means_ms: mom,
        samples_per_sec: settings.batch as f64 / (mom / 1e3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zoo::{mlp, vgg_lite};
    use crate::sparse::{init_masks, SparseInitMethod};

    #[test]
    fn mlp_macs_by_hand() {
        let arch = mlp(784, &[512, 512], 10).unwrap();
        let f = dense_flops(&arch).unwrap();
        assert_eq!(f.inference, 2.0 * (784.0 * 512.0 + 512.0 * 512.0 + 512.0 * 10.0));
        assert_eq!(f.training, 3.0 * f.inference);
    }

    #[test]
    fn conv_macs_by_hand() {
        let arch = vgg_lite(3, 16, 10, 32).unwrap();
        let macs = layer_macs(&arch).unwrap();
        assert_eq!(macs[0], 32 * 27 * 256);
        assert_eq!(macs[2], 32 * 288 * 64);
        assert_eq!(macs[4], 64 * 288 * 64);
        assert_eq!(macs[13], 512 * 128);
    }

    #[test]
    fn sparse_linear_scales_with_density() {
        let arch = mlp(100, &[], 50).unwrap();
        let mut m = ModelState::new(arch, 0).unwrap();
        init_masks(&mut m, SparseInitMethod::uniform(0.9), 0).unwrap();
        let f = theoretical_flops(&m).unwrap();
        assert!((f.inference - 0.2 * 100.0 * 50.0).abs() < 1e-9);
    }

    #[test]
    fn median_of_means_groups() {
        let v = [1.0, 1.0, 10.0, 10.0, 2.0, 2.0];
        assert_eq!(median_of_means(&v, 2), 2.0);
    }

    #[test]
    fn throughput_rejects_few_reps() {
        let m = ModelState::new(mlp(4, &[], 2).unwrap(), 0).unwrap();
        let x = Tensor::zeros(&[8, 4]);
        let s = ThroughputSettings {
            batch: 8,
            reps: 10,
            ..Default::default()
        };
        assert!(measure_throughput(&m, &x, &s).is_err());
        let s = ThroughputSettings { batch: 8, ..Default::default() };
        let r = measure_throughput(&m, &x, &s).unwrap();
        assert!(r.samples_per_sec > 0.0 && r.inner_loops >= 1);
    }
}
