//! Reference desk-scale models.

use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use crate::error::Result;

/// Named model families with their size knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ModelPreset {
    /// Fully connected ReLU network, e.g. 784-512-512-10.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// Six 3x3 conv layers (32 -> 128 channels, every other one strided)
    /// followed by two linear layers.
    VggLite {
        channels: usize,
        size: usize,
        classes: usize,
        #[serde(default = "default_width")]
        width: usize,
    },
    /// Linear stem, `blocks` two-layer residual blocks and a linear head.
    ResidualMlp {
        input: usize,
        width: usize,
        blocks: usize,
        classes: usize,
    },
    /// Explicit layer list.
    Custom { arch: Architecture },
}

fn default_width() -> usize {
    32
}

impl ModelPreset {
    pub fn build(&self) -> Result<Architecture> {
        match self {
            ModelPreset::Mlp {
                input,
                hidden,
                classes,
            } => mlp(*input, hidden, *classes),
            ModelPreset::VggLite {
                channels,
                size,
                classes,
                width,
            } => vgg_lite(*channels, *size, *classes, *width),
            ModelPreset::ResidualMlp {
                input,
                width,
                blocks,
                classes,
            } => residual_mlp(*input, *width, *blocks, *classes),
            ModelPreset::Custom { arch } => Architecture::new(arch.input_shape.clone(), arch.layers.clone()),
        }
    }
}

pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Architecture> {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::linear(prev, h));
        layers.push(LayerSpec::relu());
        prev = h;
    }
    layers.push(LayerSpec::linear(prev, classes));
    layers.push(LayerSpec::loss());
    Architecture::new(vec![input], layers)
}

/// VGG-style CNN on `[channels, size, size]` images. `width` is the channel
/// count of the first stage; stages use `width`, `2 * width`, `4 * width`.
pub fn vgg_lite(channels: usize, size: usize, classes: usize, width: usize) -> Result<Architecture> {
    let stages = [width, 2 * width, 4 * width];
    let mut layers = Vec::new();
    let mut prev = channels;
    let mut spatial = size;
    for &c in &stages {
        layers.push(LayerSpec::conv(prev, c, 3, 1, 1));
        layers.push(LayerSpec::relu());
        layers.push(LayerSpec::conv(c, c, 3, 2, 1));
        layers.push(LayerSpec::relu());
        spatial = (spatial + 2 - 3) / 2 + 1;
        prev = c;
    }
    let hidden = 4 * width;
    layers.push(LayerSpec::flatten());
    layers.push(LayerSpec::linear(prev * spatial * spatial, hidden));
    layers.push(LayerSpec::relu());
    layers.push(LayerSpec::linear(hidden, classes));
    layers.push(LayerSpec::loss());
    Architecture::new(vec![channels, size, size], layers)
}

pub fn residual_mlp(input: usize, width: usize, blocks: usize, classes: usize) -> Result<Architecture> {
    let mut layers = vec![LayerSpec::linear(input, width), LayerSpec::relu()];
    for _ in 0..blocks {
        let stream = layers.len() - 1;
        layers.push(LayerSpec::linear(width, width));
        layers.push(LayerSpec::relu());
        layers.push(LayerSpec::linear(width, width));
        layers.push(LayerSpec::residual_add(stream));
        layers.push(LayerSpec::relu());
    }
    layers.push(LayerSpec::linear(width, classes));
    layers.push(LayerSpec::loss());
    Architecture::new(vec![input], layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_lite_shapes() {
        let arch = vgg_lite(3, 16, 10, 32).unwrap();
        let shapes = arch.shapes().unwrap();
        assert_eq!(arch.param_layers().len(), 8);
        assert_eq!(shapes[12], vec![128, 2, 2]);
        assert_eq!(arch.num_classes(), 10);
    }

    #[test]
    fn residual_mlp_layout() {
        let arch = residual_mlp(20, 16, 4, 3).unwrap();
        assert_eq!(arch.param_layers().len(), 10);
        assert_eq!(arch.layers.len(), 2 + 5 * 4 + 2);
    }
}
