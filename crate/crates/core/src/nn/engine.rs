//! Forward and reverse-mode passes over an [`Architecture`].
//!
//! The passes are generic over the element type so the same kernels run in
//! `f32` for training and in `f64` for finite-difference checks.

use super::arch::{Architecture, ConvGeom, LayerKind};
use super::kernels::{axpy, axpy4, col2im_add, gemv_rows, im2col, im2col_batch};

/// Column tile of the conv forward GEMM, sized to keep a tile of the column
/// matrix in cache.
const COL_TILE: usize = 256;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Read access to per-layer weights and biases, indexed by layer position.
pub trait ParamSource<T: Scalar> {
    fn weight(&self, layer: usize) -> Option<&[T]>;
    fn bias(&self, layer: usize) -> Option<&[T]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Dense gradients for every parameter, masked positions included.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub layers: Vec<Option<LayerGrad<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn layer(&self, i: usize) -> Option<&LayerGrad<T>> {
        self.layers.get(i).and_then(|g| g.as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.weight.all_finite() && g.bias.as_ref().is_none_or(|b| b.all_finite())
        })
    }
}

fn check_batch<T: Scalar>(arch: &Architecture, batch: &Tensor<T>) -> Result<()> {
    let shape = batch.shape();
    if shape.len() != arch.input_shape.len() + 1 || shape[1..] != arch.input_shape[..] {
        return Err(Error::Shape(format!(
            "batch shape {shape:?} does not match input shape {:?}",
            arch.input_shape
        )));
    }
    if shape[0] == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

fn weight_of<'a, T: Scalar, P: ParamSource<T>>(
    params: &'a P,
    layer: usize,
    expected: usize,
) -> Result<&'a [T]> {
    let w = params
        .weight(layer)
        .ok_or_else(|| Error::Shape(format!("layer {layer} has no weights")))?;
    if w.len() != expected {
        return Err(Error::Shape(format!(
            "layer {layer}: {} weights, expected {expected}",
            w.len()
        )));
    }
    Ok(w)
}

fn bias_of<'a, T: Scalar, P: ParamSource<T>>(
    params: &'a P,
    layer: usize,
    has_bias: bool,
    expected: usize,
) -> Result<Option<&'a [T]>> {
    if !has_bias {
        return Ok(None);
    }
    match params.bias(layer) {
        Some(b) if b.len() == expected => Ok(Some(b)),
        Some(b) => Err(Error::Shape(format!(
            "layer {layer}: {} biases, expected {expected}",
            b.len()
        ))),
        None => Err(Error::Shape(format!("layer {layer} is missing its bias"))),
    }
}

fn conv_geom(shape_in: &[usize], kind: &LayerKind) -> ConvGeom {
    let LayerKind::Conv2d {
        in_ch,
        out_ch,
        kernel_h,
        kernel_w,
        stride,
        padding,
    } = *kind
    else {
        unreachable!("conv_geom on a non-conv layer")
    };
    ConvGeom {
        in_ch,
        in_h: shape_in[1],
        in_w: shape_in[2],
        out_ch,
        kernel_h,
        kernel_w,
        stride,
        padding,
        out_h: (shape_in[1] + 2 * padding - kernel_h) / stride + 1,
        out_w: (shape_in[2] + 2 * padding - kernel_w) / stride + 1,
    }
}

fn batch_shape(rows: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(rows);
    s.extend_from_slice(per_sample);
    s
}

/// Runs every layer and returns all activations: entry 0 is the batch, entry
/// `i + 1` the output of layer `i`. The last entry holds the logits.
pub fn forward_trace<T: Scalar, P: ParamSource<T>>(
    arch: &Architecture,
    params: &P,
    batch: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    check_batch(arch, batch)?;
    let shapes = arch.shapes()?;
    let rows = batch.rows();
    let mut acts: Vec<Tensor<T>> = Vec::with_capacity(arch.layers.len() + 1);
    acts.push(batch.clone());
    for (i, layer) in arch.layers.iter().enumerate() {
        let input = &acts[i];
        let out_shape = batch_shape(rows, &shapes[i + 1]);
        let out = match &layer.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let w = weight_of(params, i, in_features * out_features)?;
                let b = bias_of(params, i, layer.has_bias, *out_features)?;
                let mut out = Tensor::zeros(&out_shape);
                let y = out.data_mut();
                let (fi, fo) = (*in_features, *out_features);
                let mut wt = vec![T::zero(); fi * fo];
                for o in 0..fo {
                    for i in 0..fi {
                        wt[i * fo + o] = w[o * fi + i];
                    }
                }
                for r in 0..rows {
                    let yr = &mut y[r * fo..(r + 1) * fo];
                    gemv_rows(input.row(r), &wt, fo, 0, yr);
                    if let Some(b) = b {
                        for (v, &bv) in yr.iter_mut().zip(b) {
                            *v += bv;
                        }
                    }
                }
                out
            }
            LayerKind::Conv2d { .. } => {
                let g = conv_geom(&shapes[i], &layer.kind);
                let k = g.patch_len();
                let w = weight_of(params, i, g.out_ch * k)?;
                let b = bias_of(params, i, layer.has_bias, g.out_ch)?;
                let mut out = Tensor::zeros(&out_shape);
                let npix = g.out_pixels();
                let bn = rows * npix;
                let mut cols = vec![T::zero(); k * bn];
                for r in 0..rows {
                    im2col_batch(input.row(r), &g, &mut cols, bn, r);
                }
                let mut yt = vec![T::zero(); g.out_ch * bn];
                for start in (0..bn).step_by(COL_TILE) {
                    let end = (start + COL_TILE).min(bn);
                    for o in 0..g.out_ch {
                        gemv_rows(&w[o * k..(o + 1) * k], &cols, bn, start, &mut yt[o * bn + start..o * bn + end]);
                    }
                }
                let y = out.data_mut();
                for r in 0..rows {
                    for o in 0..g.out_ch {
                        let bias = b.map_or(T::zero(), |b| b[o]);
                        let src = &yt[o * bn + r * npix..][..npix];
                        let dst = &mut y[(r * g.out_ch + o) * npix..][..npix];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v + bias;
                        }
                    }
                }
                out
            }
            LayerKind::Relu => {
                let data = input.data().iter().map(|&x| x.max(T::zero())).collect();
                Tensor::from_vec(&out_shape, data)?
            }
            LayerKind::Flatten | LayerKind::SoftmaxXentLoss => {
                Tensor::from_vec(&out_shape, input.data().to_vec())?
            }
            LayerKind::GlobalPool => {
                let c = shapes[i][0];
                let hw = shapes[i][1] * shapes[i][2];
                let scale = T::of_f64(1.0 / hw as f64);
                let mut out = Tensor::zeros(&out_shape);
                let y = out.data_mut();
                for r in 0..rows {
                    let x = input.row(r);
                    for ch in 0..c {
                        let s: T = x[ch * hw..(ch + 1) * hw].iter().copied().sum();
                        y[r * c + ch] = s * scale;
                    }
                }
                out
            }
            LayerKind::ResidualAdd { from, scatter } => {
                let skip = &acts[*from + 1];
                let mut out = skip.clone();
                match scatter {
                    None => {
                        for (o, &x) in out.data_mut().iter_mut().zip(input.data()) {
                            *o += x;
                        }
                    }
                    Some(map) => {
                        let skip_row = skip.row_len();
                        let plane = skip_row / shapes[*from + 1][0];
                        let branch_row = input.row_len();
                        let y = out.data_mut();
                        for r in 0..rows {
                            let x = input.row(r);
                            for (bc, &sc) in map.iter().enumerate() {
                                let dst = &mut y[r * skip_row + sc * plane..][..plane];
                                let src = &x[bc * plane..(bc + 1) * plane];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            debug_assert_eq!(branch_row, map.len() * plane);
                        }
                    }
                }
                out
            }
        };
        acts.push(out);
    }
    Ok(acts)
}

/// Logits `[batch, classes]`.
pub fn forward<T: Scalar, P: ParamSource<T>>(
    arch: &Architecture,
    params: &P,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut acts = forward_trace(arch, params, batch)?;
    Ok(acts.pop().expect("at least the input activation"))
}

/// Mean softmax cross-entropy of `logits` and its gradient w.r.t. the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let rows = logits.rows();
    let classes = logits.row_len();
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let inv_rows = 1.0 / rows as f64;
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let z = logits.row(r);
        let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let lse = max + sum.ln();
        total += lse - z[label].as_f64();
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum;
            let target = if c == label { 1.0 } else { 0.0 };
            g[r * classes + c] = T::of_f64((p - target) * inv_rows);
        }
    }
    Ok((total * inv_rows, grad))
}

/// Loss only, without gradients.
pub fn loss<T: Scalar, P: ParamSource<T>>(
    arch: &Architecture,
    params: &P,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let logits = forward(arch, params, batch)?;
    Ok(softmax_xent(&logits, labels)?.0)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], add: impl FnOnce(&mut [T])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    add(t.data_mut());
}

/// Mean cross-entropy loss and dense parameter gradients.
pub fn backward<T: Scalar, P: ParamSource<T>>(
    arch: &Architecture,
    params: &P,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Gradients<T>)> {
    let acts = forward_trace(arch, params, batch)?;
    let shapes = arch.shapes()?;
    let n = arch.layers.len();
    let rows = batch.rows();
    let (loss, dlogits) = softmax_xent(&acts[n], labels)?;

    let mut dacts: Vec<Option<Tensor<T>>> = vec![None; n + 1];
    // The loss layer is an identity on the logits.
    dacts[n - 1] = Some(dlogits);
    let mut grads: Vec<Option<LayerGrad<T>>> = vec![None; n];

    for i in (0..n - 1).rev() {
        let Some(dout) = dacts[i + 1].take() else {
            continue;
        };
        let layer = &arch.layers[i];
        let input = &acts[i];
        let in_shape = batch_shape(rows, &shapes[i]);
        match &layer.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let (fi, fo) = (*in_features, *out_features);
                let w = weight_of(params, i, fi * fo)?;
                let mut dw = Tensor::zeros(&[fo, fi]);
                let mut db = layer.has_bias.then(|| Tensor::zeros(&[fo]));
                let mut dx = Tensor::zeros(&in_shape);
                {
                    let dwd = dw.data_mut();
                    let dxd = dx.data_mut();
                    // Same accumulation order as row-major loops over (r, o).
                    for o in 0..fo {
                        let dwo = &mut dwd[o * fi..(o + 1) * fi];
                        let mut r = 0;
                        while r + 4 <= rows {
                            let g = [0, 1, 2, 3].map(|j| dout.row(r + j)[o]);
                            axpy4(g, [0, 1, 2, 3].map(|j| input.row(r + j)), dwo);
                            r += 4;
                        }
                        for r in r..rows {
                            axpy(dout.row(r)[o], input.row(r), dwo);
                        }
                    }
                    let wrow = |o: usize| &w[o * fi..(o + 1) * fi];
                    for r in 0..rows {
                        let dy = dout.row(r);
                        let dxr = &mut dxd[r * fi..(r + 1) * fi];
                        let mut o = 0;
                        while o + 4 <= fo {
                            axpy4([dy[o], dy[o + 1], dy[o + 2], dy[o + 3]], [wrow(o), wrow(o + 1), wrow(o + 2), wrow(o + 3)], dxr);
                            o += 4;
                        }
                        for o in o..fo {
                            axpy(dy[o], wrow(o), dxr);
                        }
                    }
                }
                if let Some(db) = db.as_mut() {
                    let dbd = db.data_mut();
                    for r in 0..rows {
                        for (o, &g) in dout.row(r).iter().enumerate() {
                            dbd[o] += g;
                        }
                    }
                }
                grads[i] = Some(LayerGrad { weight: dw, bias: db });
                accumulate(&mut dacts[i], &in_shape, |d| axpy(T::one(), dx.data(), d));
            }
            LayerKind::Conv2d { .. } => {
                let g = conv_geom(&shapes[i], &layer.kind);
                let k = g.patch_len();
                let npix = g.out_pixels();
                let w = weight_of(params, i, g.out_ch * k)?;
                let mut dw = Tensor::zeros(&layer.weight_shape().unwrap());
                let mut db = layer.has_bias.then(|| Tensor::zeros(&[g.out_ch]));
                let mut dx = Tensor::zeros(&in_shape);
                let mut patches = vec![T::zero(); npix * k];
                let mut dpatches = vec![T::zero(); npix * k];
                let sample_in = input.row_len();
                for r in 0..rows {
                    im2col(input.row(r), &g, &mut patches);
                    dpatches.iter_mut().for_each(|v| *v = T::zero());
                    let dy = dout.row(r);
                    let dwd = dw.data_mut();
                    for o in 0..g.out_ch {
                        let dyo = &dy[o * npix..(o + 1) * npix];
                        let dwo = &mut dwd[o * k..(o + 1) * k];
                        let prow = |p: usize| &patches[p * k..(p + 1) * k];
                        let mut p = 0;
                        while p + 4 <= npix {
                            axpy4([dyo[p], dyo[p + 1], dyo[p + 2], dyo[p + 3]], [prow(p), prow(p + 1), prow(p + 2), prow(p + 3)], dwo);
                            p += 4;
                        }
                        for p in p..npix {
                            axpy(dyo[p], prow(p), dwo);
                        }
                        if let Some(db) = db.as_mut() {
                            let s: T = dyo.iter().copied().sum();
                            db.data_mut()[o] += s;
                        }
                    }
                    let wrow = |o: usize| &w[o * k..(o + 1) * k];
                    for p in 0..npix {
                        let dp = &mut dpatches[p * k..(p + 1) * k];
                        let mut o = 0;
                        while o + 4 <= g.out_ch {
                            let a = [0, 1, 2, 3].map(|j| dy[(o + j) * npix + p]);
                            axpy4(a, [wrow(o), wrow(o + 1), wrow(o + 2), wrow(o + 3)], dp);
                            o += 4;
                        }
                        for o in o..g.out_ch {
                            axpy(dy[o * npix + p], wrow(o), dp);
                        }
                    }
                    col2im_add(
                        &dpatches,
                        &g,
                        &mut dx.data_mut()[r * sample_in..(r + 1) * sample_in],
                    );
                }
                grads[i] = Some(LayerGrad { weight: dw, bias: db });
                accumulate(&mut dacts[i], &in_shape, |d| axpy(T::one(), dx.data(), d));
            }
            LayerKind::Relu => {
                accumulate(&mut dacts[i], &in_shape, |d| {
                    for ((dv, &x), &g) in d.iter_mut().zip(input.data()).zip(dout.data()) {
                        if x > T::zero() {
                            *dv += g;
                        }
                    }
                });
            }
            LayerKind::Flatten | LayerKind::SoftmaxXentLoss => {
                accumulate(&mut dacts[i], &in_shape, |d| axpy(T::one(), dout.data(), d));
            }
            LayerKind::GlobalPool => {
                let c = shapes[i][0];
                let hw = shapes[i][1] * shapes[i][2];
                let scale = T::of_f64(1.0 / hw as f64);
                accumulate(&mut dacts[i], &in_shape, |d| {
                    for r in 0..rows {
                        for ch in 0..c {
                            let gv = dout.data()[r * c + ch] * scale;
                            for v in &mut d[(r * c + ch) * hw..(r * c + ch + 1) * hw] {
                                *v += gv;
                            }
                        }
                    }
                });
            }
            LayerKind::ResidualAdd { from, scatter } => {
                let skip_shape = batch_shape(rows, &shapes[*from + 1]);
                accumulate(&mut dacts[*from + 1], &skip_shape, |d| {
                    axpy(T::one(), dout.data(), d)
                });
                match scatter {
                    None => accumulate(&mut dacts[i], &in_shape, |d| {
                        axpy(T::one(), dout.data(), d)
                    }),
                    Some(map) => {
                        let skip_row = dout.row_len();
                        let plane = skip_row / shapes[*from + 1][0];
                        let branch_row = map.len() * plane;
                        accumulate(&mut dacts[i], &in_shape, |d| {
                            for r in 0..rows {
                                for (bc, &sc) in map.iter().enumerate() {
                                    let src = &dout.data()[r * skip_row + sc * plane..][..plane];
                                    let dst = &mut d[r * branch_row + bc * plane..][..plane];
                                    axpy(T::one(), src, dst);
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Ok((loss, Gradients { layers: grads }))
}

/// Plain owned parameters, used for compact models and high-precision copies.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T: Scalar = f32> {
    pub weights: Vec<Option<Tensor<T>>>,
    pub biases: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamSource<T> for DenseParams<T> {
    fn weight(&self, layer: usize) -> Option<&[T]> {
        self.weights.get(layer)?.as_ref().map(|t| t.data())
    }

    fn bias(&self, layer: usize) -> Option<&[T]> {
        self.biases.get(layer)?.as_ref().map(|t| t.data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::LayerSpec;

    fn single_linear(w: f32, b: f32) -> (Architecture, DenseParams) {
        let arch = Architecture::new(vec![1], vec![LayerSpec::linear(1, 1), LayerSpec::loss()]).unwrap();
        let params = DenseParams {
            weights: vec![Some(Tensor::from_vec(&[1, 1], vec![w]).unwrap()), None],
            biases: vec![Some(Tensor::from_vec(&[1], vec![b]).unwrap()), None],
        };
        (arch, params)
    }

    #[test]
    fn scalar_linear_forward() {
        let (arch, params) = single_linear(2.0, 0.0);
        let x = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let y = forward(&arch, &params, &x).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let (loss, _) = softmax_xent(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_vanishing_loss() {
        let logits = Tensor::<f64>::from_vec(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(
            softmax_xent(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn wrong_batch_shape_is_rejected() {
        let (arch, params) = single_linear(1.0, 0.0);
        let x = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(forward(&arch, &params, &x), Err(Error::Shape(_))));
    }
}
