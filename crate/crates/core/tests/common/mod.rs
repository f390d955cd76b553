#![allow(dead_code)]

use chase_core::nn::{backward, forward_trace, softmax_xent, Architecture, DenseParams, LayerKind, LayerSpec, ModelState};
use chase_core::sparse::MaskedParam;
use chase_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Random linear (`[o, i]`) or conv (`[o, i, k, k]`) weights with a random mask.
pub fn random_masked(rng: &mut ChaCha8Rng) -> MaskedParam {
    let o = rng.random_range(1..9);
    let i = rng.random_range(1..9);
    let shape = if rng.random_bool(0.5) {
        vec![o, i]
    } else {
        let k = rng.random_range(1..4);
        vec![o, i, k, k]
    };
    let n: usize = shape.iter().product();
    let density = rng.random_range(0.0..1.0);
    let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
    let w = Tensor::from_vec(&shape, normal_vec(rng, n)).unwrap();
    MaskedParam::with_mask(0, w, mask)
}

/// `(ws, umm, mmm)` per output channel by walking the multi-index.
pub fn brute_stats(p: &MaskedParam) -> Vec<(f64, f64, f64)> {
    let shape = p.weights().shape().to_vec();
    let (o_n, i_n) = (shape[0], shape[1]);
    let (kh, kw) = if shape.len() == 4 { (shape[2], shape[3]) } else { (1, 1) };
    let w = p.weights().data();
    let m = p.mask();
    let mut out = Vec::new();
    for o in 0..o_n {
        let (mut total, mut active, mut sum_all, mut sum_active) = (0usize, 0usize, 0.0f64, 0.0f64);
        for i in 0..i_n {
            for a in 0..kh {
                for b in 0..kw {
                    let idx = ((o * i_n + i) * kh + a) * kw + b;
                    let v = if m[idx] { (w[idx] as f64).abs() } else { 0.0 };
                    total += 1;
                    sum_all += v;
                    if m[idx] {
                        active += 1;
                        sum_active += v;
                    }
                }
            }
        }
        let mmm = if active == 0 { 0.0 } else { sum_active / active as f64 };
        out.push((1.0 - active as f64 / total as f64, sum_all / total as f64, mmm));
    }
    out
}

/// Cubic ramp evaluated through its expanded polynomial.
pub fn cubic_direct(s_i: f64, s_f: f64, t0: usize, n: usize, dt: usize, t: usize) -> f64 {
    let u = (t as f64 - t0 as f64) / (n as f64 * dt as f64);
    let u = u.clamp(0.0, 1.0);
    s_f + (s_i - s_f) * (1.0 - 3.0 * u + 3.0 * u * u - u * u * u)
}

fn op(kind: LayerKind) -> LayerSpec {
    LayerSpec {
        kind,
        has_bias: false,
        prunable_channels: false,
    }
}

/// Small networks that together contain every layer kind.
pub fn gradient_arches() -> Vec<Architecture> {
    let conv_net = Architecture::new(
        vec![2, 5, 5],
        vec![
            LayerSpec::conv(2, 3, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::conv(3, 3, 3, 1, 1).without_bias(),
            LayerSpec::residual_add(1),
            LayerSpec::relu(),
            LayerSpec::conv(3, 4, 3, 2, 1),
            LayerSpec::relu(),
            LayerSpec::flatten(),
            LayerSpec::linear(36, 5),
            LayerSpec::loss(),
        ],
    )
    .unwrap();
    let pooled = Architecture::new(
        vec![2, 4, 4],
        vec![
            LayerSpec::conv(2, 4, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::global_pool(),
            LayerSpec::linear(4, 6),
            LayerSpec::relu(),
            LayerSpec::linear(6, 3).without_bias(),
            op(LayerKind::ResidualAdd {
                from: 4,
                scatter: Some(vec![0, 2, 5]),
            }),
            LayerSpec::linear(6, 3),
            LayerSpec::loss(),
        ],
    )
    .unwrap();
    vec![conv_net, pooled]
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation flipped a ReLU input.
    pub kinks: usize,
}

fn relu_signs(arch: &Architecture, acts: &[Tensor<f64>]) -> Vec<bool> {
    let mut s = Vec::new();
    for (i, l) in arch.layers.iter().enumerate() {
        if matches!(l.kind, LayerKind::Relu) {
            s.extend(acts[i].data().iter().map(|&v| v > 0.0));
        }
    }
    s
}

fn coord(p: &mut DenseParams<f64>, layer: usize, is_bias: bool, idx: usize) -> &mut f64 {
    let t = if is_bias { &mut p.biases[layer] } else { &mut p.weights[layer] };
    &mut t.as_mut().unwrap().data_mut()[idx]
}

/// Central differences in `f64` against the analytic gradient of every weight
/// and bias coordinate.
pub fn check_gradients(arch: &Architecture, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let model = ModelState::new(arch.clone(), seed).unwrap();
    let mut params = model.to_dense::<f64>();
    let rows = 3;
    let n_in: usize = arch.input_shape.iter().product();
    let mut shape = vec![rows];
    shape.extend_from_slice(&arch.input_shape);
    let x = Tensor::<f64>::from_vec(&shape, (0..rows * n_in).map(|_| r.sample(StandardNormal)).collect()).unwrap();
    let classes = arch.num_classes();
    let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
    let (_, grads) = backward(arch, &params, &x, &labels).unwrap();

    let h = 1e-6;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        kinks: 0,
    };
    let eval = |p: &DenseParams<f64>| {
        let acts = forward_trace(arch, p, &x).unwrap();
        let (loss, _) = softmax_xent(acts.last().unwrap(), &labels).unwrap();
        (loss, relu_signs(arch, &acts))
    };
    for l in arch.param_layers() {
        let g = grads.layer(l).unwrap();
        for is_bias in [false, true] {
            let analytic = match (is_bias, &g.bias) {
                (false, _) => g.weight.data().to_vec(),
                (true, Some(b)) => b.data().to_vec(),
                (true, None) => continue,
            };
            for (idx, &a) in analytic.iter().enumerate() {
                let orig = *coord(&mut params, l, is_bias, idx);
                *coord(&mut params, l, is_bias, idx) = orig + h;
                let (lp, sp) = eval(&params);
                *coord(&mut params, l, is_bias, idx) = orig - h;
                let (lm, sm) = eval(&params);
                *coord(&mut params, l, is_bias, idx) = orig;
                if sp != sm {
                    out.kinks += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                out.max_rel_err = out.max_rel_err.max(rel);
                out.checked += 1;
            }
        }
    }
    out
}
