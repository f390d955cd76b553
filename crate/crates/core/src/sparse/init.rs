//! Sparse mask initialization.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseInitKind {
    Uniform,
    /// Erdős–Rényi-kernel layer densities.
    Erk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseInitMethod {
    pub kind: SparseInitKind,
    pub sparsity: f64,
}

impl SparseInitMethod {
    pub fn uniform(sparsity: f64) -> Self {
        Self {
            kind: SparseInitKind::Uniform,
            sparsity,
        }
    }

    pub fn erk(sparsity: f64) -> Self {
        Self {
            kind: SparseInitKind::Erk,
            sparsity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity {} must lie in [0, 1)",
                self.sparsity
            )));
        }
        Ok(())
    }
}

/// ERK score `sum(dims) / prod(dims)` of a weight shape.
pub fn erk_score(shape: &[usize]) -> f64 {
    let sum: usize = shape.iter().sum();
    let prod: usize = shape.iter().product();
    sum as f64 / prod as f64
}

/// Solves for ERK densities of layers with the given weight shapes so that
/// `sum(density * size) == (1 - sparsity) * total`. Layers whose scaled score
/// exceeds one are clamped dense and the rest rescaled until nothing new
/// clamps.
pub fn erk_densities(shapes: &[Vec<usize>], sparsity: f64) -> Vec<f64> {
    let sizes: Vec<f64> = shapes
        .iter()
        .map(|s| s.iter().product::<usize>() as f64)
        .collect();
    let scores: Vec<f64> = shapes.iter().map(|s| erk_score(s)).collect();
    let total: f64 = sizes.iter().sum();
    let budget = (1.0 - sparsity) * total;
    let mut dense = vec![false; shapes.len()];
    loop {
        let fixed: f64 = sizes
            .iter()
            .zip(&dense)
            .filter(|(_, &d)| d)
            .map(|(s, _)| s)
            .sum();
        let weighted: f64 = (0..shapes.len())
            .filter(|&i| !dense[i])
            .map(|i| scores[i] * sizes[i])
            .sum();
        if weighted == 0.0 {
            break;
        }
        let eps = (budget - fixed) / weighted;
        let mut changed = false;
        for i in 0..shapes.len() {
            if !dense[i] && eps * scores[i] > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..shapes.len())
                .map(|i| if dense[i] { 1.0 } else { eps * scores[i] })
                .collect();
        }
    }
    vec![1.0; shapes.len()]
}

/// Samples masks for every parameter layer at the requested global sparsity.
///
/// Within a layer, active weights are spread as evenly as possible over output
/// channels (counts differ by at most one), so every channel starts at the same
/// weight sparsity. Returns the per-layer densities that were targeted.
pub fn init_masks(model: &mut ModelState, method: SparseInitMethod, seed: u64) -> Result<Vec<f64>> {
    method.validate()?;
    let layers = model.param_layers();
    let shapes: Vec<Vec<usize>> = layers
        .iter()
        .map(|&l| model.masked_param(l).unwrap().weights().shape().to_vec())
        .collect();
    let densities = match method.kind {
        SparseInitKind::Uniform => vec![1.0 - method.sparsity; layers.len()],
        SparseInitKind::Erk => erk_densities(&shapes, method.sparsity),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (&layer, &density) in layers.iter().zip(&densities) {
        let p = &mut model.layer_mut(layer).unwrap().weight;
        let n = p.len();
        let mut k = (density * n as f64).round() as usize;
        if k == 0 {
            log::warn!("layer {layer}: density {density:.2e} leaves no weights, keeping one");
            k = 1;
        }
        let k = k.min(n);
        let channels = p.out_channels();
        let per = p.channel_len();
        let (base, extra) = (k / channels, k % channels);
        let mut bonus = vec![false; channels];
        for c in sample(&mut rng, channels, extra) {
            bonus[c] = true;
        }
        let mut mask = vec![false; n];
        for (c, &b) in bonus.iter().enumerate() {
            let count = base + b as usize;
            for i in sample(&mut rng, per, count) {
                mask[c * per + i] = true;
            }
        }
        p.mask = mask;
    }
    model.enforce_topology();
    Ok(densities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, LayerSpec};
    use crate::sparse::global_sparsity;

    fn mlp(dims: &[usize]) -> ModelState {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(LayerSpec::linear(w[0], w[1]));
            layers.push(LayerSpec::relu());
        }
        layers.pop();
        layers.push(LayerSpec::loss());
        ModelState::new(Architecture::new(vec![dims[0]], layers).unwrap(), 1).unwrap()
    }

    #[test]
    fn single_layer_density() {
        for kind in [SparseInitKind::Uniform, SparseInitKind::Erk] {
            let mut m = mlp(&[20, 10]);
            let d = init_masks(&mut m, SparseInitMethod { kind, sparsity: 0.9 }, 0).unwrap();
            assert!((d[0] - 0.1).abs() < 1e-12);
            assert_eq!(m.active_weights(), 20);
        }
    }

    #[test]
    fn uniform_every_layer_same_density() {
        let mut m = mlp(&[30, 20, 20, 10]);
        let d = init_masks(&mut m, SparseInitMethod::uniform(0.9), 3).unwrap();
        assert!(d.iter().all(|&x| (x - 0.1).abs() < 1e-12));
        for p in m.masked_params() {
            assert_eq!(p.active_count(), (0.1 * p.len() as f64).round() as usize);
        }
    }

    #[test]
    fn channels_start_equally_sparse() {
        let mut m = mlp(&[37, 11]);
        init_masks(&mut m, SparseInitMethod::uniform(0.7), 5).unwrap();
        let p = m.masked_param(0).unwrap();
        let counts: Vec<usize> = (0..p.out_channels())
            .map(|c| p.channel_range(c).filter(|&i| p.mask()[i]).count())
            .collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn zero_budget_layer_keeps_one_weight() {
        let mut m = mlp(&[4, 3]);
        init_masks(&mut m, SparseInitMethod::uniform(0.99), 0).unwrap();
        assert_eq!(m.active_weights(), 1);
        assert!(global_sparsity(&m) > 0.9);
    }

    #[test]
    fn rejects_full_sparsity() {
        let mut m = mlp(&[4, 3]);
        assert!(init_masks(&mut m, SparseInitMethod::erk(1.0), 0).is_err());
    }
}
