//! Physical removal of dead channels, equivalence checking and the `CHSE`
//! binary format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CHSE" | u32 version | u32 layer count | u32 input ndims | u32 dims...
//! per layer: u8 tag, then
//!   linear (0):  u32 in, u32 out, <param block>
//!   conv2d (1):  u32 in_ch, out_ch, kh, kw, stride, padding, <param block>
//!   relu (2), flatten (3), global pool (5), loss (6): nothing
//!   residual (4): u32 from, u32 scatter length (u32::MAX = none), u32 indices...
//! param block: u8 flags (bit 0 bias, bit 1 prunable),
//!   u32 original out, u32 original in,
//!   u32 n, u32 kept out indices..., u32 n, u32 kept in indices...,
//!   u64 weight count, f32 weights..., [u64 bias count, f32 biases...]
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::nn::{forward, Architecture, DenseParams, LayerKind, LayerSpec, ModelState};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CHSE";
pub const VERSION: u32 = 1;

/// Kept output channels and input units of a parameter layer, as indices into
/// the original layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub original_out: usize,
    pub original_in: usize,
    pub kept_out: Vec<usize>,
    pub kept_in: Vec<usize>,
}

/// Dense model with dead channels physically removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub arch: Architecture,
    pub params: DenseParams<f32>,
    pub channel_maps: Vec<Option<ChannelMap>>,
}

impl CompactModel {
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        forward(&self.arch, &self.params, batch)
    }

    /// Weight count (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.params.weights.iter().flatten().map(|w| w.len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.params.biases.iter().flatten().map(|b| b.len()).sum()
    }
}

/// Kept channel indices of an activation, with elements per channel.
#[derive(Debug, Clone)]
struct Kept {
    channels: Vec<usize>,
    width: usize,
}

impl Kept {
    fn full(width: usize) -> Self {
        Self {
            channels: (0..width).collect(),
            width,
        }
    }
}

/// Rebuilds `model` keeping only alive output channels and the input units fed
/// by kept channels. Residual branches narrower than their skip stream become
/// scatter-adds. Remaining unstructured zeros stay in the dense tensors.
pub fn compact(model: &ModelState) -> Result<CompactModel> {
    let arch = model.arch();
    let shapes = arch.shapes()?;
    let n = arch.layers.len();
    let mut kept: Vec<Kept> = Vec::with_capacity(n + 1);
    kept.push(Kept::full(shapes[0][0]));
    let mut layers = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);

    for (i, spec) in arch.layers.iter().enumerate() {
        let input = kept[i].clone();
        let mut new_spec = spec.clone();
        let (out_kept, w, b, map) = match &spec.kind {
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                let lp = model.layer(i).expect("param layer");
                let p = &lp.weight;
                let kept_out: Vec<usize> = (0..p.out_channels())
                    .filter(|&c| p.alive_channels()[c])
                    .collect();
                if kept_out.is_empty() {
                    return Err(Error::EmptyLayer(i));
                }
                let kept_in = input.channels.clone();
                let unit = p.unit_len();
                let src = p.weights().data();
                let mut data = Vec::with_capacity(kept_out.len() * kept_in.len() * unit);
                for &o in &kept_out {
                    for &u in &kept_in {
                        let start = o * p.channel_len() + u * unit;
                        data.extend_from_slice(&src[start..start + unit]);
                    }
                }
                match &mut new_spec.kind {
                    LayerKind::Linear {
                        in_features,
                        out_features,
                    } => {
                        *in_features = kept_in.len();
                        *out_features = kept_out.len();
                    }
                    LayerKind::Conv2d { in_ch, out_ch, .. } => {
                        *in_ch = kept_in.len();
                        *out_ch = kept_out.len();
                    }
                    _ => unreachable!(),
                }
                let w = Tensor::from_vec(&new_spec.weight_shape().unwrap(), data)?;
                let b = lp
                    .bias
                    .as_ref()
                    .map(|b| Tensor::from_vec(&[kept_out.len()], kept_out.iter().map(|&o| b.data()[o]).collect()))
                    .transpose()?;
                let map = ChannelMap {
                    original_out: p.out_channels(),
                    original_in: p.in_units(),
                    kept_out: kept_out.clone(),
                    kept_in,
                };
                (
                    Kept {
                        channels: kept_out,
                        width: p.out_channels(),
                    },
                    Some(w),
                    b,
                    Some(map),
                )
            }
            LayerKind::Relu | LayerKind::GlobalPool | LayerKind::SoftmaxXentLoss => {
                (input, None, None, None)
            }
            LayerKind::Flatten => {
                let s = &shapes[i];
                let plane: usize = s[1..].iter().product();
                let channels = input
                    .channels
                    .iter()
                    .flat_map(|&c| c * plane..(c + 1) * plane)
                    .collect();
                (
                    Kept {
                        channels,
                        width: input.width * plane,
                    },
                    None,
                    None,
                    None,
                )
            }
            LayerKind::ResidualAdd { from, scatter } => {
                if scatter.is_some() {
                    return Err(Error::Config(format!(
                        "layer {i}: model is already compacted"
                    )));
                }
                let skip = kept[*from + 1].clone();
                if input.channels != skip.channels {
                    let mut map = Vec::with_capacity(input.channels.len());
                    for c in &input.channels {
                        let pos = skip.channels.binary_search(c).map_err(|_| {
                            Error::Config(format!(
                                "layer {i}: branch channel {c} is missing from the skip stream"
                            ))
                        })?;
                        map.push(pos);
                    }
                    new_spec.kind = LayerKind::ResidualAdd {
                        from: *from,
                        scatter: Some(map),
                    };
                }
                (skip, None, None, None)
            }
        };
        kept.push(out_kept);
        layers.push(new_spec);
        weights.push(w);
        biases.push(b);
        maps.push(map);
    }
    let mut input_shape = arch.input_shape.clone();
    input_shape[0] = kept[0].channels.len();
    Ok(CompactModel {
        arch: Architecture::new(input_shape, layers)?,
        params: DenseParams { weights, biases },
        channel_maps: maps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs_deviation: f64,
    /// Seed of the input with the largest deviation.
    pub worst_seed: u64,
    pub tol: f64,
    pub pass: bool,
}

fn random_input(shape: &[usize], seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Max absolute logit difference over `samples` standard-normal inputs; input
/// `i` is drawn from seed `seed + i`.
pub fn verify_equivalence(
    original: &ModelState,
    compact: &CompactModel,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let shape = original.arch().input_shape.clone();
    if compact.arch.input_shape != shape {
        return Err(Error::Shape("compact model input shape differs".into()));
    }
    let mut worst = (0.0f64, seed);
    for chunk_start in (0..samples).step_by(64) {
        let rows = (samples - chunk_start).min(64);
        let mut data = Vec::new();
        for r in 0..rows {
            data.extend(random_input(&shape, seed + (chunk_start + r) as u64));
        }
        let mut full = vec![rows];
        full.extend_from_slice(&shape);
        let x = Tensor::from_vec(&full, data)?;
        let a = original.forward(&x)?;
        let b = compact.forward(&x)?;
        if a.shape() != b.shape() {
            return Err(Error::Shape("logit shapes differ".into()));
        }
        for r in 0..rows {
            let dev = a
                .row(r)
                .iter()
                .zip(b.row(r))
                .map(|(&p, &q)| (p as f64 - q as f64).abs())
                .fold(0.0, f64::max);
            if dev > worst.0 || dev.is_nan() {
                worst = (dev, seed + (chunk_start + r) as u64);
            }
        }
    }
    Ok(EquivalenceReport {
        samples,
        max_abs_deviation: worst.0,
        worst_seed: worst.1,
        tol,
        pass: worst.0 <= tol,
    })
}

/// Like [`verify_equivalence`] but returns an error naming the worst seed
/// when the deviation exceeds `tol`.
pub fn require_equivalence(
    original: &ModelState,
    compact: &CompactModel,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let r = verify_equivalence(original, compact, samples, tol, seed)?;
    if !r.pass {
        return Err(Error::Verification(format!(
            "compact model deviates by {:.3e} (> {tol:.1e}) on input seed {}",
            r.max_abs_deviation, r.worst_seed
        )));
    }
    Ok(r)
}

const TAG_LINEAR: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_RESIDUAL: u8 = 4;
const TAG_POOL: u8 = 5;
const TAG_LOSS: u8 = 6;
const NO_SCATTER: u32 = u32::MAX;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_list(buf: &mut Vec<u8>, v: &[usize]) {
    put_u32(buf, v.len());
    for &x in v {
        put_u32(buf, x);
    }
}

fn put_floats(buf: &mut Vec<u8>, v: &[f32]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for &x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_compact(model: &CompactModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, model.arch.layers.len());
    put_list(&mut buf, &model.arch.input_shape);
    for (i, spec) in model.arch.layers.iter().enumerate() {
        match &spec.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                buf.push(TAG_LINEAR);
                put_u32(&mut buf, *in_features);
                put_u32(&mut buf, *out_features);
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                buf.push(TAG_CONV);
                for v in [*in_ch, *out_ch, *kernel_h, *kernel_w, *stride, *padding] {
                    put_u32(&mut buf, v);
                }
            }
            LayerKind::Relu => buf.push(TAG_RELU),
            LayerKind::Flatten => buf.push(TAG_FLATTEN),
            LayerKind::GlobalPool => buf.push(TAG_POOL),
            LayerKind::SoftmaxXentLoss => buf.push(TAG_LOSS),
            LayerKind::ResidualAdd { from, scatter } => {
                buf.push(TAG_RESIDUAL);
                put_u32(&mut buf, *from);
                match scatter {
                    Some(map) => put_list(&mut buf, map),
                    None => buf.extend_from_slice(&NO_SCATTER.to_le_bytes()),
                }
            }
        }
        if spec.has_params() {
            let map = model.channel_maps[i].as_ref().expect("param layer map");
            let bias = model.params.biases[i].as_ref();
            buf.push(bias.is_some() as u8 | (spec.prunable_channels as u8) << 1);
            put_u32(&mut buf, map.original_out);
            put_u32(&mut buf, map.original_in);
            put_list(&mut buf, &map.kept_out);
            put_list(&mut buf, &map.kept_in);
            put_floats(&mut buf, model.params.weights[i].as_ref().unwrap().data());
            if let Some(b) = bias {
                put_floats(&mut buf, b.data());
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated(self.bytes.len()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, FormatError> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn list(&mut self) -> Result<Vec<usize>, FormatError> {
        let n = self.usize()?;
        if n > self.bytes.len() / 4 {
            return Err(FormatError::Truncated(self.bytes.len()));
        }
        (0..n).map(|_| self.usize()).collect()
    }

    /// Reads a counted float block whose count must equal `expected`.
    fn floats(&mut self, layer: usize, expected: usize) -> Result<Vec<f32>, FormatError> {
        let found = self.u64()? as usize;
        if found != expected {
            return Err(FormatError::LengthMismatch {
                layer,
                expected,
                found,
            });
        }
        let raw = self.take(expected.checked_mul(4).ok_or(FormatError::Truncated(self.bytes.len()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_compact(bytes: &[u8]) -> Result<CompactModel, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = r.usize()?;
    let input_shape = r.list()?;
    let mut layers = Vec::new();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut maps = Vec::new();
    for i in 0..n {
        let offset = r.pos;
        let tag = r.u8()?;
        let kind = match tag {
            TAG_LINEAR => LayerKind::Linear {
                in_features: r.usize()?,
                out_features: r.usize()?,
            },
            TAG_CONV => LayerKind::Conv2d {
                in_ch: r.usize()?,
                out_ch: r.usize()?,
                kernel_h: r.usize()?,
                kernel_w: r.usize()?,
                stride: r.usize()?,
                padding: r.usize()?,
            },
            TAG_RELU => LayerKind::Relu,
            TAG_FLATTEN => LayerKind::Flatten,
            TAG_POOL => LayerKind::GlobalPool,
            TAG_LOSS => LayerKind::SoftmaxXentLoss,
            TAG_RESIDUAL => {
                let from = r.usize()?;
                let len = r.u32()?;
                let scatter = if len == NO_SCATTER {
                    None
                } else {
                    if len as usize > bytes.len() / 4 {
                        return Err(FormatError::Truncated(bytes.len()));
                    }
                    Some((0..len).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?)
                };
                LayerKind::ResidualAdd { from, scatter }
            }
            tag => return Err(FormatError::UnknownTag { tag, offset }),
        };
        let mut spec = LayerSpec {
            kind,
            has_bias: false,
            prunable_channels: false,
        };
        if let Some(shape) = spec.weight_shape() {
            let flags = r.u8()?;
            spec.has_bias = flags & 1 != 0;
            spec.prunable_channels = flags & 2 != 0;
            let original_out = r.usize()?;
            let original_in = r.usize()?;
            let kept_out = r.list()?;
            let kept_in = r.list()?;
            if kept_out.len() != shape[0] || kept_in.len() != shape[1] {
                return Err(FormatError::Malformed(format!(
                    "layer {i}: kept lists ({}, {}) disagree with dims {shape:?}",
                    kept_out.len(),
                    kept_in.len()
                )));
            }
            let expected: usize = shape.iter().product();
            let w = r.floats(i, expected)?;
            weights.push(Some(Tensor::from_vec(&shape, w).expect("checked length")));
            if spec.has_bias {
                let b = r.floats(i, shape[0])?;
                biases.push(Some(Tensor::from_vec(&[shape[0]], b).expect("checked length")));
            } else {
                biases.push(None);
            }
            maps.push(Some(ChannelMap {
                original_out,
                original_in,
                kept_out,
                kept_in,
            }));
        } else {
            weights.push(None);
            biases.push(None);
            maps.push(None);
        }
        layers.push(spec);
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let arch = Architecture::new(input_shape, layers).map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(CompactModel {
        arch,
        params: DenseParams { weights, biases },
        channel_maps: maps,
    })
}

pub fn save_compact(model: &CompactModel, path: &Path) -> Result<()> {
    fs::write(path, encode_compact(model)).map_err(|e| Error::io(path, e))
}

pub fn load_compact(path: &Path) -> Result<CompactModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_compact(&bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarLayer {
    pub layer: usize,
    pub kind: String,
    pub weight_shape: Vec<usize>,
    pub original_out: usize,
    pub original_in: usize,
    pub kept_out: usize,
    pub kept_in: usize,
    pub weights: usize,
    pub nonzero_weights: usize,
}

/// Human-readable summary written next to a `.chse` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<SidecarLayer>,
    pub compact_weights: usize,
    pub original_weights: usize,
    /// `1 - compact_weights / original_weights`.
    pub structural_sparsity: f64,
    /// Zero fraction of the compact weights.
    pub residual_sparsity: f64,
}

pub fn sidecar(model: &CompactModel) -> Sidecar {
    let mut layers = Vec::new();
    let mut original = 0usize;
    let mut nonzero_total = 0usize;
    for (i, spec) in model.arch.layers.iter().enumerate() {
        let (Some(map), Some(w)) = (&model.channel_maps[i], &model.params.weights[i]) else {
            continue;
        };
        let shape = w.shape().to_vec();
        let unit: usize = shape[2..].iter().product();
        original += map.original_out * map.original_in * unit;
        let nonzero = w.data().iter().filter(|&&v| v != 0.0).count();
        nonzero_total += nonzero;
        layers.push(SidecarLayer {
            layer: i,
            kind: match spec.kind {
                LayerKind::Conv2d { .. } => "conv2d".into(),
                _ => "linear".into(),
            },
            weight_shape: shape,
            original_out: map.original_out,
            original_in: map.original_in,
            kept_out: map.kept_out.len(),
            kept_in: map.kept_in.len(),
            weights: w.len(),
            nonzero_weights: nonzero,
        });
    }
    let compact = model.weight_count();
    Sidecar {
        format: "CHSE".into(),
        version: VERSION,
        input_shape: model.arch.input_shape.clone(),
        layers,
        compact_weights: compact,
        original_weights: original,
        structural_sparsity: 1.0 - compact as f64 / original.max(1) as f64,
        residual_sparsity: 1.0 - nonzero_total as f64 / compact.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chase::{kill_channel, ChannelTopology};
    use crate::nn::zoo::{mlp, residual_mlp, vgg_lite};

    #[test]
    fn identity_compaction_is_exact() {
        let m = ModelState::new(mlp(6, &[5, 4], 3).unwrap(), 2).unwrap();
        let c = compact(&m).unwrap();
        assert_eq!(c.arch, *m.arch());
        let r = verify_equivalence(&m, &c, 20, 0.0, 0).unwrap();
        assert_eq!(r.max_abs_deviation, 0.0);
    }

    #[test]
    fn conv_slices_follow_kept_indices() {
        let arch = vgg_lite(3, 8, 4, 8).unwrap();
        let mut m = ModelState::new(arch, 1).unwrap();
        let topo = ChannelTopology::new(m.arch(), &[], false).unwrap();
        // Layer 2 is conv 8 -> 8 feeding conv 4 (8 -> 16).
        for c in [0, 2, 5, 7] {
            kill_channel(&mut m, &topo, 2, c);
        }
        let c = compact(&m).unwrap();
        let map2 = c.channel_maps[2].as_ref().unwrap();
        assert_eq!(map2.kept_out, vec![1, 3, 4, 6]);
        let map4 = c.channel_maps[4].as_ref().unwrap();
        assert_eq!(map4.kept_in, vec![1, 3, 4, 6]);
        let orig = m.masked_param(4).unwrap().weights();
        let new = c.params.weights[4].as_ref().unwrap();
        assert_eq!(new.shape(), &[16, 4, 3, 3]);
        for o in 0..16 {
            for (j, &u) in map4.kept_in.iter().enumerate() {
                assert_eq!(
                    &new.data()[(o * 4 + j) * 9..][..9],
                    &orig.data()[(o * 8 + u) * 9..][..9]
                );
            }
        }
        let dead = 4 * (8 * 9) + 16 * 4 * 9;
        assert_eq!(c.weight_count(), m.total_weights() - dead);
        assert!(verify_equivalence(&m, &c, 16, 1e-5, 0).unwrap().pass);
    }

    #[test]
    fn residual_branch_becomes_scatter() {
        let arch = residual_mlp(6, 8, 1, 3).unwrap();
        let mut m = ModelState::new(arch, 0).unwrap();
        let topo = ChannelTopology::new(m.arch(), &[], true).unwrap();
        kill_channel(&mut m, &topo, 4, 2);
        kill_channel(&mut m, &topo, 4, 5);
        let c = compact(&m).unwrap();
        assert_eq!(
            c.arch.layers[5].kind,
            LayerKind::ResidualAdd {
                from: 1,
                scatter: Some(vec![0, 1, 3, 4, 6, 7])
            }
        );
        let r = verify_equivalence(&m, &c, 32, 1e-5, 9).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = residual_mlp(6, 8, 1, 3).unwrap();
        let mut m = ModelState::new(arch, 0).unwrap();
        let topo = ChannelTopology::new(m.arch(), &[], true).unwrap();
        kill_channel(&mut m, &topo, 4, 1);
        let c = compact(&m).unwrap();
        let bytes = encode_compact(&c);
        let back = decode_compact(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_compact(&back), bytes);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let m = ModelState::new(mlp(4, &[3], 2).unwrap(), 0).unwrap();
        let bytes = encode_compact(&compact(&m).unwrap());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_compact(&bad), Err(FormatError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(decode_compact(&bad), Err(FormatError::UnsupportedVersion(9)));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_compact(cut), Err(FormatError::Truncated(_))));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_compact(&bad), Err(FormatError::Malformed(_))));
    }

    #[test]
    fn dims_inconsistent_with_payload() {
        // Hand-built file: linear 2 -> 1 declaring three weights.
        let mut b = Vec::new();
        b.extend_from_slice(b"CHSE");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        for v in [1u32, 2] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(TAG_LINEAR);
        for v in [2u32, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(0);
        for v in [1u32, 2, 1, 0, 2, 0, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&3u64.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(TAG_LOSS);
        assert_eq!(
            decode_compact(&b),
            Err(FormatError::LengthMismatch {
                layer: 0,
                expected: 2,
                found: 3
            })
        );
    }

    #[test]
    fn sidecar_counts() {
        let arch = mlp(6, &[5, 4], 3).unwrap();
        let mut m = ModelState::new(arch, 0).unwrap();
        let topo = ChannelTopology::new(m.arch(), &[], false).unwrap();
        kill_channel(&mut m, &topo, 2, 0);
        let s = sidecar(&compact(&m).unwrap());
        assert_eq!(s.original_weights, m.total_weights());
        assert_eq!(s.compact_weights, m.total_weights() - 5 - 3);
    }
}
