//! Network descriptions and shape inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    /// Adds the output of layer `from` to the previous layer's output.
    ///
    /// With `scatter`, the previous output is narrower than the skip tensor and
    /// its channel `i` is added into skip channel `scatter[i]`. Compaction of
    /// channel-pruned residual branches produces this form.
    ResidualAdd {
        from: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scatter: Option<Vec<usize>>,
    },
    /// Spatial mean, `[C, H, W] -> [C]`.
    GlobalPool,
    SoftmaxXentLoss,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default = "default_true")]
    pub has_bias: bool,
    #[serde(default = "default_true")]
    pub prunable_channels: bool,
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self::param(LayerKind::Linear {
            in_features,
            out_features,
        })
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::param(LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        })
    }

    pub fn relu() -> Self {
        Self::op(LayerKind::Relu)
    }

    pub fn flatten() -> Self {
        Self::op(LayerKind::Flatten)
    }

    pub fn global_pool() -> Self {
        Self::op(LayerKind::GlobalPool)
    }

    pub fn residual_add(from: usize) -> Self {
        Self::op(LayerKind::ResidualAdd {
            from,
            scatter: None,
        })
    }

    pub fn loss() -> Self {
        Self::op(LayerKind::SoftmaxXentLoss)
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    fn param(kind: LayerKind) -> Self {
        Self {
            kind,
            has_bias: true,
            prunable_channels: true,
        }
    }

    fn op(kind: LayerKind) -> Self {
        Self {
            kind,
            has_bias: false,
            prunable_channels: false,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    /// `[out, in, kh, kw]` for conv, `[out, in]` for linear.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel_h,
                kernel_w,
                ..
            } => Some(vec![out_ch, in_ch, kernel_h, kernel_w]),
            _ => None,
        }
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Linear { out_features, .. } => Some(out_features),
            LayerKind::Conv2d { out_ch, .. } => Some(out_ch),
            _ => None,
        }
    }
}

/// Geometry of a single conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Self {
            input_shape,
            layers,
        };
        arch.shapes()?;
        Ok(arch)
    }

    /// Per-sample activation shapes; entry 0 is the input, entry `i + 1` the
    /// output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "input shape {:?} must be non-empty and positive",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = match &layer.kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    if cur.as_slice() != [*in_features] {
                        return Err(Error::Shape(format!(
                            "layer {i}: linear expects [{in_features}], got {cur:?}"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(Error::Shape(format!("layer {i}: zero outputs")));
                    }
                    vec![*out_features]
                }
                LayerKind::Conv2d { .. } => {
                    let g = self.conv_geom_for(i, cur)?;
                    vec![g.out_ch, g.out_h, g.out_w]
                }
                LayerKind::Relu => cur.clone(),
                LayerKind::Flatten => vec![cur.iter().product()],
                LayerKind::GlobalPool => {
                    if cur.len() != 3 {
                        return Err(Error::Shape(format!(
                            "layer {i}: global pool expects [C, H, W], got {cur:?}"
                        )));
                    }
                    vec![cur[0]]
                }
                LayerKind::ResidualAdd { from, scatter } => {
                    if *from >= i {
                        return Err(Error::Shape(format!(
                            "layer {i}: residual source {from} is not an earlier layer"
                        )));
                    }
                    let skip = &shapes[*from + 1];
                    match scatter {
                        None => {
                            if skip != cur {
                                return Err(Error::Shape(format!(
                                    "layer {i}: residual {skip:?} does not match {cur:?}"
                                )));
                            }
                        }
                        Some(map) => {
                            let ok = skip.len() == cur.len()
                                && skip[1..] == cur[1..]
                                && map.len() == cur[0]
                                && map.iter().all(|&c| c < skip[0])
                                && map.windows(2).all(|w| w[0] < w[1]);
                            if !ok {
                                return Err(Error::Shape(format!(
                                    "layer {i}: scatter residual {skip:?} incompatible with {cur:?}"
                                )));
                            }
                        }
                    }
                    skip.clone()
                }
                LayerKind::SoftmaxXentLoss => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::Shape(format!(
                            "layer {i}: loss must be the last layer"
                        )));
                    }
                    if cur.len() != 1 {
                        return Err(Error::Shape(format!(
                            "layer {i}: loss expects flat logits, got {cur:?}"
                        )));
                    }
                    cur.clone()
                }
            };
            shapes.push(next);
        }
        if !matches!(
            self.layers.last().map(|l| &l.kind),
            Some(LayerKind::SoftmaxXentLoss)
        ) {
            return Err(Error::Shape(
                "network must end with a softmax cross-entropy layer".into(),
            ));
        }
        Ok(shapes)
    }

    fn conv_geom_for(&self, i: usize, input: &[usize]) -> Result<ConvGeom> {
        let LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } = self.layers[i].kind
        else {
            return Err(Error::Shape(format!("layer {i} is not a conv layer")));
        };
        if input.len() != 3 || input[0] != in_ch {
            return Err(Error::Shape(format!(
                "layer {i}: conv expects [{in_ch}, H, W], got {input:?}"
            )));
        }
        if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_ch == 0 {
            return Err(Error::Shape(format!("layer {i}: degenerate conv")));
        }
        let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
        if h < kernel_h || w < kernel_w {
            return Err(Error::Shape(format!(
                "layer {i}: kernel larger than padded input"
            )));
        }
        Ok(ConvGeom {
            in_ch,
            in_h: input[1],
            in_w: input[2],
            out_ch,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (h - kernel_h) / stride + 1,
            out_w: (w - kernel_w) / stride + 1,
        })
    }

    pub fn conv_geom(&self, layer: usize) -> Result<ConvGeom> {
        let shapes = self.shapes()?;
        self.conv_geom_for(layer, &shapes[layer])
    }

    pub fn num_classes(&self) -> usize {
        self.shapes()
            .ok()
            .and_then(|s| s.last().map(|l| l[0]))
            .unwrap_or(0)
    }

    /// Indices of layers that carry weights.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_shape() {
        let arch = Architecture::new(
            vec![3, 8, 8],
            vec![
                LayerSpec::conv(3, 4, 3, 2, 1),
                LayerSpec::relu(),
                LayerSpec::flatten(),
                LayerSpec::linear(64, 2),
                LayerSpec::loss(),
            ],
        )
        .unwrap();
        let shapes = arch.shapes().unwrap();
        assert_eq!(shapes[1], vec![4, 4, 4]);
        assert_eq!(shapes[3], vec![64]);
        assert_eq!(arch.num_classes(), 2);
        assert_eq!(arch.param_layers(), vec![0, 3]);
    }

    #[test]
    fn rejects_incompatible_layers() {
        let bad = Architecture::new(
            vec![5],
            vec![LayerSpec::linear(4, 2), LayerSpec::loss()],
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
        let no_loss = Architecture::new(vec![4], vec![LayerSpec::linear(4, 2)]);
        assert!(no_loss.is_err());
        let bad_residual = Architecture::new(
            vec![4],
            vec![
                LayerSpec::linear(4, 3),
                LayerSpec::linear(3, 2),
                LayerSpec::residual_add(0),
                LayerSpec::loss(),
            ],
        );
        assert!(bad_residual.is_err());
    }

    #[test]
    fn residual_must_match_shape() {
        let layers = vec![
            LayerSpec::linear(4, 4),
            LayerSpec::relu(),
            LayerSpec::linear(4, 4),
            LayerSpec::residual_add(1),
            LayerSpec::linear(4, 2),
            LayerSpec::loss(),
        ];
        assert!(Architecture::new(vec![4], layers).is_ok());
    }

    #[test]
    fn layer_spec_json_shape() {
        let spec = LayerSpec::conv(1, 2, 3, 1, 1);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"conv2d\""));
        let back: LayerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let relu: LayerSpec = serde_json::from_str(r#"{"kind":"relu"}"#).unwrap();
        assert_eq!(relu.kind, LayerKind::Relu);
    }
}
