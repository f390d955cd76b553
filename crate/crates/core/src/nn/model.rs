use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::engine::{self, DenseParams, Gradients, ParamSource};
use crate::error::{Error, Result};
use crate::sparse::MaskedParam;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: MaskedParam,
    pub bias: Option<Tensor>,
    pub(crate) weight_velocity: Tensor,
    pub(crate) bias_velocity: Option<Tensor>,
}

impl LayerParams {
    fn new(weight: MaskedParam, bias: Option<Tensor>) -> Self {
        let weight_velocity = Tensor::zeros(weight.weights().shape());
        let bias_velocity = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        Self {
            weight,
            bias,
            weight_velocity,
            bias_velocity,
        }
    }

    pub fn weight_velocity(&self) -> &Tensor {
        &self.weight_velocity
    }

    pub fn bias_velocity(&self) -> Option<&Tensor> {
        self.bias_velocity.as_ref()
    }

    /// Zeroes momentum at masked positions and bias/momentum of dead channels.
    pub(crate) fn enforce_topology(&mut self) {
        self.weight.apply_mask();
        for (v, &m) in self
            .weight_velocity
            .data_mut()
            .iter_mut()
            .zip(self.weight.mask())
        {
            if !m {
                *v = 0.0;
            }
        }
        let alive = self.weight.alive_channels().to_vec();
        for t in [self.bias.as_mut(), self.bias_velocity.as_mut()].into_iter().flatten() {
            for (b, &a) in t.data_mut().iter_mut().zip(&alive) {
                if !a {
                    *b = 0.0;
                }
            }
        }
    }
}

/// Architecture plus masked parameters and momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    arch: Architecture,
    params: Vec<Option<LayerParams>>,
}

impl ModelState {
    /// Dense model with He-normal weights and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.layers.len());
        for (i, layer) in arch.layers.iter().enumerate() {
            let Some(shape) = layer.weight_shape() else {
                params.push(None);
                continue;
            };
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| normal.sample(&mut rng) as f32).collect();
            let weight = MaskedParam::dense(i, Tensor::from_vec(&shape, data)?);
            let bias = layer.has_bias.then(|| Tensor::zeros(&[shape[0]]));
            params.push(Some(LayerParams::new(weight, bias)));
        }
        Ok(Self { arch, params })
    }

    /// Model from explicit dense tensors; all weights active.
    pub fn from_dense(arch: Architecture, dense: DenseParams) -> Result<Self> {
        arch.shapes()?;
        let mut params = Vec::with_capacity(arch.layers.len());
        for (i, layer) in arch.layers.iter().enumerate() {
            let Some(shape) = layer.weight_shape() else {
                params.push(None);
                continue;
            };
            let w = dense
                .weights
                .get(i)
                .cloned()
                .flatten()
                .ok_or_else(|| Error::Shape(format!("layer {i} needs weights")))?;
            if w.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "layer {i}: weights {:?}, expected {shape:?}",
                    w.shape()
                )));
            }
            let bias = if layer.has_bias {
                let b = dense
                    .biases
                    .get(i)
                    .cloned()
                    .flatten()
                    .ok_or_else(|| Error::Shape(format!("layer {i} needs a bias")))?;
                if b.len() != shape[0] {
                    return Err(Error::Shape(format!("layer {i}: bias length {}", b.len())));
                }
                Some(b)
            } else {
                None
            };
            params.push(Some(LayerParams::new(MaskedParam::dense(i, w), bias)));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layer(&self, i: usize) -> Option<&LayerParams> {
        self.params.get(i)?.as_ref()
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut LayerParams> {
        self.params.get_mut(i)?.as_mut()
    }

    pub fn param_layers(&self) -> Vec<usize> {
        self.arch.param_layers()
    }

    pub fn masked_params(&self) -> impl Iterator<Item = &MaskedParam> {
        self.params.iter().flatten().map(|p| &p.weight)
    }

    pub fn masked_param(&self, layer: usize) -> Option<&MaskedParam> {
        self.layer(layer).map(|p| &p.weight)
    }

    pub fn masked_param_mut(&mut self, layer: usize) -> Option<&mut MaskedParam> {
        self.layer_mut(layer).map(|p| &mut p.weight)
    }

    /// Maskable weight count (biases excluded).
    pub fn total_weights(&self) -> usize {
        self.masked_params().map(|p| p.len()).sum()
    }

    pub fn active_weights(&self) -> usize {
        self.masked_params().map(|p| p.active_count()).sum()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        engine::forward(&self.arch, self, batch)
    }

    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        engine::backward(&self.arch, self, batch, labels)
    }

    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        engine::loss(&self.arch, self, batch, labels)
    }

    /// Copy of the current weights and biases, cast to `T`.
    pub fn to_dense<T: Scalar>(&self) -> DenseParams<T> {
        DenseParams {
            weights: self
                .params
                .iter()
                .map(|p| p.as_ref().map(|p| p.weight.weights().cast()))
                .collect(),
            biases: self
                .params
                .iter()
                .map(|p| p.as_ref().and_then(|p| p.bias.as_ref().map(|b| b.cast())))
                .collect(),
        }
    }

    /// Re-applies masks, dead-channel bias zeroing and momentum clearing.
    pub fn enforce_topology(&mut self) {
        for p in self.params.iter_mut().flatten() {
            p.enforce_topology();
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for p in self.params.iter().flatten() {
            p.weight.check_invariants()?;
            for (i, (&v, &m)) in p
                .weight_velocity
                .data()
                .iter()
                .zip(p.weight.mask())
                .enumerate()
            {
                if !m && v != 0.0 {
                    return Err(format!(
                        "layer {}: momentum {i} nonzero at masked position",
                        p.weight.layer_id()
                    ));
                }
            }
            if let Some(b) = &p.bias {
                for (c, (&bv, &a)) in b.data().iter().zip(p.weight.alive_channels()).enumerate() {
                    if !a && bv != 0.0 {
                        return Err(format!(
                            "layer {}: dead channel {c} has bias {bv}",
                            p.weight.layer_id()
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|p| {
            p.weight.weights().all_finite() && p.bias.as_ref().is_none_or(|b| b.all_finite())
        })
    }
}

impl ParamSource<f32> for ModelState {
    fn weight(&self, layer: usize) -> Option<&[f32]> {
        self.layer(layer).map(|p| p.weight.weights().data())
    }

    fn bias(&self, layer: usize) -> Option<&[f32]> {
        self.layer(layer)?.bias.as_ref().map(|b| b.data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::LayerSpec;

    #[test]
    fn all_zero_weights_give_zero_logits() {
        let arch = Architecture::new(
            vec![5],
            vec![
                LayerSpec::linear(5, 4),
                LayerSpec::relu(),
                LayerSpec::linear(4, 3),
                LayerSpec::loss(),
            ],
        )
        .unwrap();
        let mut model = ModelState::new(arch, 0).unwrap();
        for l in model.param_layers() {
            model.masked_param_mut(l).unwrap().weights_mut().fill(0.0);
        }
        let x = Tensor::from_vec(&[2, 5], (0..10).map(|v| v as f32 - 3.0).collect()).unwrap();
        let y = model.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let arch = Architecture::new(vec![3], vec![LayerSpec::linear(3, 2), LayerSpec::loss()]).unwrap();
        let a = ModelState::new(arch.clone(), 9).unwrap();
        let b = ModelState::new(arch, 9).unwrap();
        assert_eq!(a, b);
    }
}
