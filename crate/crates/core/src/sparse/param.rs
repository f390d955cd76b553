use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// A weight tensor with its binary mask and output-channel bookkeeping.
///
/// Output channels are always axis 0 and therefore contiguous: channel `c`
/// covers flat indices `c * channel_len() .. (c + 1) * channel_len()`. Each
/// channel is split into `in_units` input units of `unit_len` elements (one
/// input feature for linear layers, one `kh * kw` kernel plane for conv).
///
/// Masked positions always hold `0.0` in `weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedParam {
    pub(crate) weights: Tensor,
    pub(crate) mask: Vec<bool>,
    pub(crate) layer_id: usize,
    pub(crate) channel_axis: usize,
    pub(crate) alive_channels: Vec<bool>,
    /// Input units whose producer channel was removed; never grown again.
    pub(crate) dead_inputs: Vec<bool>,
    pub(crate) in_units: usize,
    pub(crate) unit_len: usize,
}

impl MaskedParam {
    /// Dense (all-active) parameter. `weights` must be shaped `[out, in, ...]`.
    pub fn dense(layer_id: usize, weights: Tensor) -> Self {
        let shape = weights.shape().to_vec();
        assert!(shape.len() >= 2, "weights need [out, in, ...] layout");
        let out = shape[0];
        let in_units = shape[1];
        let unit_len = shape[2..].iter().product();
        let n = weights.len();
        Self {
            weights,
            mask: vec![true; n],
            layer_id,
            channel_axis: 0,
            alive_channels: vec![true; out],
            dead_inputs: vec![false; in_units],
            in_units,
            unit_len,
        }
    }

    /// Builds a parameter from weights and mask, zeroing masked weights.
    pub fn with_mask(layer_id: usize, weights: Tensor, mask: Vec<bool>) -> Self {
        assert_eq!(weights.len(), mask.len());
        let mut p = Self::dense(layer_id, weights);
        p.mask = mask;
        p.apply_mask();
        p
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Raw weight access. Writing into masked positions breaks the storage
    /// invariant until [`MaskedParam::apply_mask`] runs.
    pub fn weights_mut(&mut self) -> &mut [f32] {
        self.weights.data_mut()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn channel_axis(&self) -> usize {
        self.channel_axis
    }

    pub fn alive_channels(&self) -> &[bool] {
        &self.alive_channels
    }

    pub fn dead_inputs(&self) -> &[bool] {
        &self.dead_inputs
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn out_channels(&self) -> usize {
        self.alive_channels.len()
    }

    pub fn in_units(&self) -> usize {
        self.in_units
    }

    pub fn unit_len(&self) -> usize {
        self.unit_len
    }

    pub fn channel_len(&self) -> usize {
        self.in_units * self.unit_len
    }

    pub fn channel_range(&self, c: usize) -> std::ops::Range<usize> {
        let n = self.channel_len();
        c * n..(c + 1) * n
    }

    #[inline]
    pub fn channel_of(&self, idx: usize) -> usize {
        idx / self.channel_len()
    }

    #[inline]
    pub fn input_unit_of(&self, idx: usize) -> usize {
        (idx % self.channel_len()) / self.unit_len
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn alive_count(&self) -> usize {
        self.alive_channels.iter().filter(|&&a| a).count()
    }

    /// Whether position `idx` may hold an active weight at all.
    #[inline]
    pub fn is_eligible(&self, idx: usize) -> bool {
        self.alive_channels[self.channel_of(idx)] && !self.dead_inputs[self.input_unit_of(idx)]
    }

    pub fn eligible_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_eligible(i)).count()
    }

    /// Deactivates `idx` and zeroes its weight.
    pub fn deactivate(&mut self, idx: usize) {
        self.mask[idx] = false;
        self.weights.data_mut()[idx] = 0.0;
    }

    /// Activates `idx` with a zero weight.
    pub fn activate(&mut self, idx: usize) {
        debug_assert!(self.is_eligible(idx));
        self.mask[idx] = true;
        self.weights.data_mut()[idx] = 0.0;
    }

    /// Re-zeroes every masked weight.
    pub fn apply_mask(&mut self) {
        for (w, &m) in self.weights.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *w = 0.0;
            }
        }
    }

    /// Marks output channel `c` dead and clears its slice. Returns the number of
    /// weights that were active in it.
    pub fn kill_channel(&mut self, c: usize) -> usize {
        self.alive_channels[c] = false;
        let mut freed = 0;
        for i in self.channel_range(c) {
            freed += self.mask[i] as usize;
            self.deactivate(i);
        }
        freed
    }

    /// Marks input unit `u` dead and clears it in every output channel.
    /// Returns the number of weights that were active in it.
    pub fn kill_input(&mut self, u: usize) -> usize {
        self.dead_inputs[u] = true;
        let mut freed = 0;
        let (cl, ul) = (self.channel_len(), self.unit_len);
        for c in 0..self.out_channels() {
            let start = c * cl + u * ul;
            for i in start..start + ul {
                freed += self.mask[i] as usize;
                self.deactivate(i);
            }
        }
        freed
    }

    /// Checks the storage invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, (&w, &m)) in self.weights.data().iter().zip(&self.mask).enumerate() {
            if !m && w != 0.0 {
                return Err(format!("layer {}: weight {i} is {w} but masked", self.layer_id));
            }
            if m && !self.is_eligible(i) {
                return Err(format!(
                    "layer {}: position {i} active inside a removed channel or input",
                    self.layer_id
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_param() -> MaskedParam {
        // 3 output channels, 2 input channels, 2x2 kernels.
        let w = Tensor::from_vec(&[3, 2, 2, 2], (1..=24).map(|x| x as f32).collect()).unwrap();
        MaskedParam::dense(4, w)
    }

    #[test]
    fn channel_geometry() {
        let p = conv_param();
        assert_eq!(p.channel_len(), 8);
        assert_eq!(p.unit_len(), 4);
        assert_eq!(p.channel_range(1), 8..16);
        assert_eq!(p.channel_of(17), 2);
        assert_eq!(p.input_unit_of(13), 1);
    }

    #[test]
    fn kill_channel_and_input() {
        let mut p = conv_param();
        assert_eq!(p.kill_channel(1), 8);
        assert_eq!(p.kill_input(0), 8);
        assert_eq!(p.active_count(), 24 - 8 - 8);
        assert!(p.weights().data()[8..16].iter().all(|&w| w == 0.0));
        assert!(!p.is_eligible(0));
        assert!(p.is_eligible(4));
        p.check_invariants().unwrap();
    }

    #[test]
    fn with_mask_zeroes_masked_weights() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = MaskedParam::with_mask(0, w, vec![true, false, false, true]);
        assert_eq!(p.weights().data(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(p.active_count(), 2);
    }
}
