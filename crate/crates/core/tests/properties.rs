mod common;

use std::collections::BTreeSet;

use chase_core::bench::{layer_macs, theoretical_flops};
use chase_core::chase::{
    beta_floor, dead_channels, global_channel_prune, global_grow_feedback, global_prune_feedback, kill_channel,
    ChannelTopology, FeedbackParams,
};
use chase_core::compact::{compact, decode_compact, encode_compact, verify_equivalence};
use chase_core::nn::zoo::{mlp, residual_mlp, vgg_lite};
use chase_core::nn::{Architecture, Gradients, LayerGrad, ModelState};
use chase_core::sparse::{erk_densities, global_sparsity, grow_gradient, init_masks, SparseInitMethod};
use chase_core::stats::{channel_stats, channel_umm, umm_amenable, ws_amenable};
use chase_core::Tensor;
use common::{brute_stats, normal_vec, random_masked, rng};
use proptest::prelude::*;
use rand::Rng;

fn small_arch(kind: u8, a: usize, b: usize) -> Architecture {
    match kind % 3 {
        0 => mlp(a + 2, &[b + 2, a + b + 2], 3).unwrap(),
        1 => vgg_lite(2, 8, 3, b + 2).unwrap(),
        _ => residual_mlp(a + 2, b + 3, 2, 3).unwrap(),
    }
}

fn random_grads(m: &ModelState, seed: u64) -> Gradients {
    let mut r = rng(seed);
    let mut layers = vec![None; m.arch().layers.len()];
    for l in m.param_layers() {
        let shape = m.masked_param(l).unwrap().weights().shape().to_vec();
        let n = shape.iter().product();
        layers[l] = Some(LayerGrad {
            weight: Tensor::from_vec(&shape, normal_vec(&mut r, n)).unwrap(),
            bias: None,
        });
    }
    Gradients { layers }
}

/// Sparse model with a random set of prunable channels removed.
fn pruned_model(kind: u8, a: usize, b: usize, sparsity: f64, kill_frac: f64, prune_skip: bool, seed: u64) -> (ModelState, ChannelTopology) {
    let mut m = ModelState::new(small_arch(kind, a, b), seed).unwrap();
    init_masks(&mut m, SparseInitMethod::erk(sparsity), seed).unwrap();
    let topo = ChannelTopology::new(m.arch(), &[], prune_skip).unwrap();
    let mut r = rng(seed ^ 0xABCD);
    for l in topo.prunable_layers() {
        let p = m.masked_param(l).unwrap();
        let width = p.out_channels();
        for c in 0..width {
            if m.masked_param(l).unwrap().alive_count() > 1 && r.random_bool(kill_frac) {
                kill_channel(&mut m, &topo, l, c);
            }
        }
    }
    (m, topo)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stats_match_brute_force(seed in any::<u64>()) {
        let p = random_masked(&mut rng(seed));
        for (got, want) in channel_stats(&p).iter().zip(brute_stats(&p)) {
            prop_assert_eq!(got.ws, want.0);
            prop_assert!((got.umm - want.1).abs() <= 1e-9);
            prop_assert!((got.mmm - want.2).abs() <= 1e-9);
        }
    }

    #[test]
    fn umm_is_density_times_mmm(seed in any::<u64>()) {
        let p = random_masked(&mut rng(seed));
        for st in channel_stats(&p) {
            prop_assert!((st.umm - st.mmm * (1.0 - st.ws)).abs() <= 1e-12 * st.umm.max(1.0));
        }
    }

    #[test]
    fn nothing_is_amenable_at_infinite_v(x0 in 1e-6f64..1.0, x in 0.0f64..1.0) {
        prop_assert!(!ws_amenable(x0, x, f64::INFINITY));
        prop_assert!(!umm_amenable(x0, x, f64::INFINITY));
    }

    #[test]
    fn amenability_is_antitone_in_v(x0 in 0.0f64..1.0, x in 0.0f64..1.0, v1 in 0.0f64..1.0, dv in 0.0f64..1.0) {
        let v2 = v1 + dv;
        prop_assert!(!ws_amenable(x0, x, v2) || ws_amenable(x0, x, v1));
        prop_assert!(!umm_amenable(x0, x, v2) || umm_amenable(x0, x, v1));
    }

    #[test]
    fn erk_spends_the_budget(dims in prop::collection::vec((1usize..64, 1usize..64, prop::bool::ANY), 1..6), s in 0.05f64..0.98) {
        let shapes: Vec<Vec<usize>> = dims
            .iter()
            .map(|&(o, i, conv)| if conv { vec![o, i, 3, 3] } else { vec![o, i] })
            .collect();
        let d = erk_densities(&shapes, s);
        let sizes: Vec<f64> = shapes.iter().map(|s| s.iter().product::<usize>() as f64).collect();
        let total: f64 = sizes.iter().sum();
        let spent: f64 = d.iter().zip(&sizes).map(|(d, n)| d * n).sum();
        prop_assert!(d.iter().all(|&x| x > 0.0 && x <= 1.0 + 1e-12));
        prop_assert!((spent - (1.0 - s) * total).abs() <= 1e-6 * total);
    }

    #[test]
    fn masks_stay_closed_under_kills_and_growth(kind in 0u8..3, a in 1usize..6, b in 1usize..6, s in 0.3f64..0.9, kf in 0.0f64..0.6, seed in any::<u64>()) {
        let (mut m, topo) = pruned_model(kind, a, b, s, kf, kind % 3 == 2, seed);
        let g = random_grads(&m, seed);
        let layers = m.param_layers();
        grow_gradient(&mut m, &g, &layers, 1_000_000).unwrap();
        prop_assert!(m.check_invariants().is_ok(), "{:?}", m.check_invariants());
        for l in topo.prunable_layers() {
            let p = m.masked_param(l).unwrap();
            let len = p.len() / p.out_channels();
            for (c, &alive) in p.alive_channels().iter().enumerate() {
                if !alive {
                    prop_assert!(p.mask()[c * len..(c + 1) * len].iter().all(|&x| !x));
                }
            }
        }
        for p in m.masked_params() {
            for (w, &on) in p.weights().data().iter().zip(p.mask()) {
                prop_assert!(on || *w == 0.0);
            }
        }
    }

    #[test]
    fn gradient_growth_is_top_k(kind in 0u8..3, a in 1usize..5, b in 1usize..5, s in 0.3f64..0.9, k in 0usize..200, seed in any::<u64>()) {
        let (mut m, _) = pruned_model(kind, a, b, s, 0.3, false, seed);
        let g = random_grads(&m, seed);
        let mut cands = Vec::new();
        for l in m.param_layers() {
            let p = m.masked_param(l).unwrap();
            for i in 0..p.len() {
                if !p.mask()[i] && p.is_eligible(i) {
                    cands.push((g.layer(l).unwrap().weight.data()[i].abs(), l, i));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let want: BTreeSet<(usize, usize)> = cands.iter().take(k).map(|c| (c.1, c.2)).collect();
        let layers = m.param_layers();
        let out = grow_gradient(&mut m, &g, &layers, k).unwrap();
        let got: BTreeSet<(usize, usize)> = out.grown.iter().map(|p| (p.layer, p.index)).collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(out.shortfall, k.saturating_sub(cands.len()));
    }

    #[test]
    fn feedback_lands_inside_tolerance(kind in 0u8..3, a in 1usize..6, b in 1usize..6, s in 0.3f64..0.9, delta in -0.2f64..0.2, seed in any::<u64>()) {
        let (mut m, _) = pruned_model(kind, a, b, s, 0.2, false, seed);
        let params = FeedbackParams::new(0.0005, None, 64);
        let total = m.total_weights() as f64;
        let start = global_sparsity(&m);
        let tgt = (start + delta).clamp(0.0, 1.0);
        let st = if delta < 0.0 {
            let g = random_grads(&m, seed);
            global_grow_feedback(&mut m, &g, tgt, params).unwrap()
        } else {
            global_prune_feedback(&mut m, tgt, params)
        };
        let end = global_sparsity(&m);
        let available_grow = m.param_layers().iter().map(|&l| {
            let p = m.masked_param(l).unwrap();
            (0..p.len()).filter(|&i| !p.mask()[i] && p.is_eligible(i)).count()
        }).sum::<usize>();
        // Off by at most the rounding of the exact count, unless candidates ran out.
        let exhausted = (delta < 0.0 && available_grow == 0) || (delta >= 0.0 && m.active_weights() == 0);
        prop_assert!(exhausted || (end - tgt).abs() * total <= 0.5 + 0.0005 * total + 1e-9, "start {start} tgt {tgt} end {end} {st:?}");
        prop_assert!(m.check_invariants().is_ok());
    }

    #[test]
    fn channel_prune_hits_target_and_respects_floor(a in 1usize..6, b in 1usize..6, s_t in 0.0f64..0.9, beta in 0.0f64..1.0, seed in any::<u64>()) {
        let mut m = ModelState::new(mlp(6, &[a + 4, b + 4, a + b + 4], 3).unwrap(), seed).unwrap();
        init_masks(&mut m, SparseInitMethod::erk(0.5), seed).unwrap();
        let topo = ChannelTopology::new(m.arch(), &[], false).unwrap();
        let n = topo.prunable_channels();
        let out = global_channel_prune(&mut m, &topo, s_t, beta, 0.9);
        let want = (s_t * n as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(dead_channels(&m, &topo) + out.deficit, want);
        for l in topo.prunable_layers() {
            let p = m.masked_param(l).unwrap();
            let floor = (((1.0 - 0.9) * beta * p.out_channels() as f64) - 1e-9).ceil().max(1.0) as usize;
            prop_assert_eq!(beta_floor(p.out_channels(), 0.9, beta), floor);
            prop_assert!(p.alive_count() >= floor);
        }
    }

    #[test]
    fn unconstrained_channel_prune_takes_lowest_umm(a in 1usize..6, b in 1usize..6, s_t in 0.0f64..0.6, seed in any::<u64>()) {
        let mut m = ModelState::new(mlp(6, &[a + 4, b + 4, a + b + 4], 3).unwrap(), seed).unwrap();
        init_masks(&mut m, SparseInitMethod::erk(0.5), seed).unwrap();
        let topo = ChannelTopology::new(m.arch(), &[], false).unwrap();
        let mut ranked = Vec::new();
        for l in topo.prunable_layers() {
            for (c, u) in channel_umm(m.masked_param(l).unwrap()).into_iter().enumerate() {
                ranked.push((u, l, c));
            }
        }
        ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let out = global_channel_prune(&mut m, &topo, s_t, 0.0, 0.9);
        prop_assume!(out.deficit == 0);
        let want: BTreeSet<(usize, usize)> = ranked.iter().take(out.killed.len()).map(|r| (r.1, r.2)).collect();
        let got: BTreeSet<(usize, usize)> = out.killed.iter().copied().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn compaction_is_equivalent_and_smaller(kind in 0u8..3, a in 1usize..6, b in 1usize..6, s in 0.3f64..0.9, kf in 0.0f64..0.7, skip in prop::bool::ANY, seed in any::<u64>()) {
        let (m, topo) = pruned_model(kind, a, b, s, kf, skip, seed);
        let c = compact(&m).unwrap();
        let eq = verify_equivalence(&m, &c, 8, 1e-5, seed % 1000).unwrap();
        prop_assert!(eq.pass, "deviation {}", eq.max_abs_deviation);
        let removed = dead_channels(&m, &topo);
        prop_assert!(c.weight_count() <= m.total_weights());
        prop_assert!(removed == 0 || c.weight_count() < m.total_weights());
        for l in m.param_layers() {
            let w = c.params.weights[l].as_ref().unwrap();
            prop_assert_eq!(w.shape()[0], m.masked_param(l).unwrap().alive_count());
        }
        let back = decode_compact(&encode_compact(&c)).unwrap();
        prop_assert_eq!(encode_compact(&back), encode_compact(&c));
    }

    #[test]
    fn truncated_compact_bytes_are_rejected(kind in 0u8..3, a in 1usize..4, b in 1usize..4, cut in 0.0f64..1.0, seed in any::<u64>()) {
        let (m, _) = pruned_model(kind, a, b, 0.5, 0.3, false, seed);
        let bytes = encode_compact(&compact(&m).unwrap());
        let at = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(decode_compact(&bytes[..at]).is_err());
    }

    #[test]
    fn flops_scale_with_layer_density(kind in 0u8..3, a in 1usize..6, b in 1usize..6, s in 0.0f64..0.95, seed in any::<u64>()) {
        let mut m = ModelState::new(small_arch(kind, a, b), seed).unwrap();
        if s > 0.0 {
            init_masks(&mut m, SparseInitMethod::erk(s), seed).unwrap();
        }
        let macs = layer_macs(m.arch()).unwrap();
        let mut want = 0.0;
        for l in m.param_layers() {
            let p = m.masked_param(l).unwrap();
            want += 2.0 * macs[l] as f64 * p.active_count() as f64 / p.len() as f64;
        }
        let f = theoretical_flops(&m).unwrap();
        prop_assert!((f.inference - want).abs() <= 1e-9 * want.max(1.0));
        prop_assert!((f.training - 3.0 * want).abs() <= 1e-9 * want.max(1.0));
    }
}
