//! Global parameter exploration with a set-point threshold loop.
//!
//! Growth activates every eligible inactive weight with `|grad| >= H_g`,
//! pruning deactivates every active weight with `|w| <= H_p`. The threshold is
//! nudged by `H_i` until the resulting global sparsity lands strictly inside
//! `(s_tgt - s_delta, s_tgt + s_delta)`. Each attempt is evaluated against the
//! state the call started from and only the accepted set is applied. The
//! increment halves whenever the search overshoots and reverses direction. If
//! the loop does not settle within the iteration cap, the exact top-k (or
//! bottom-k) set is applied instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ModelState};
use crate::sparse::{activate, deactivate, global_sparsity, growth_candidates, Position};

/// Outcome of one feedback call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    /// Prune magnitude threshold at exit.
    pub h_p: f64,
    /// Grow gradient threshold at exit.
    pub h_g: f64,
    pub iterations_used: usize,
    /// True when the exact top-k / bottom-k fallback was applied.
    pub fell_back: bool,
    /// Weights activated (grow) or deactivated (prune).
    pub changed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackParams {
    pub s_delta: f64,
    /// Threshold increment; `None` derives it from the score distribution.
    pub h_i: Option<f64>,
    pub max_iters: usize,
}

impl FeedbackParams {
    pub fn new(s_delta: f64, h_i: Option<f64>, max_iters: usize) -> Self {
        Self {
            s_delta,
            h_i,
            max_iters,
        }
    }
}

/// Counts `c` of changed weights that put the active count strictly within
/// tolerance, plus the count closest to the exact target.
struct Window {
    lo: usize,
    hi: usize,
    exact: usize,
}

/// `signed_gap` is how many weights the target asks to change; positive means
/// change that many.
fn window(signed_gap: f64, tol: f64, available: usize) -> Option<Window> {
    if signed_gap.abs() < tol {
        return None;
    }
    let exact = (signed_gap.round().max(0.0) as usize).min(available);
    let lo = ((signed_gap - tol).floor() + 1.0).max(0.0) as usize;
    let hi_f = (signed_gap + tol).ceil() - 1.0;
    let hi = if hi_f < 0.0 { 0 } else { (hi_f as usize).min(available) };
    if lo > hi {
        return Some(Window {
            lo: exact,
            hi: exact,
            exact,
        });
    }
    Some(Window { lo, hi, exact })
}

/// Quantile of a strided subsample of at most 4096 scores plus one decile of
/// its interquartile range.
fn initial_threshold(scores: &[f32], q: f64) -> (f64, f64) {
    let stride = scores.len().div_ceil(4096).max(1);
    let mut sample: Vec<f32> = scores.iter().step_by(stride).copied().collect();
    sample.sort_by(f32::total_cmp);
    let at = |q: f64| {
        let i = ((sample.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
        sample[i] as f64
    };
    let iqr = at(0.75) - at(0.25);
    let step = if iqr > 0.0 {
        iqr / 10.0
    } else {
        (at(1.0) - at(0.0)) / 10.0
    };
    (at(q), step)
}

/// Direction of selection: grow keeps high scores, prune keeps low ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    High,
    Low,
}

impl Side {
    fn selects(self, score: f32, h: f64) -> bool {
        match self {
            Side::High => score as f64 >= h,
            Side::Low => score as f64 <= h,
        }
    }
}

struct Selection {
    chosen: Vec<usize>,
    threshold: f64,
    iterations: usize,
    fell_back: bool,
}

fn select(scores: &[f32], side: Side, w: &Window, h_i: Option<f64>, cap: usize) -> Selection {
    let n = scores.len();
    let q = match side {
        Side::High => 1.0 - w.exact as f64 / n as f64,
        Side::Low => w.exact as f64 / n as f64,
    };
    let (mut h, auto_step) = initial_threshold(scores, q);
    let mut step = h_i.unwrap_or(auto_step);
    let mut last_dir = 0i8;
    let mut iterations = 0;
    if step > 0.0 {
        while iterations < cap {
            iterations += 1;
            let count = scores.iter().filter(|&&s| side.selects(s, h)).count();
            if (w.lo..=w.hi).contains(&count) {
                let chosen = (0..n).filter(|&i| side.selects(scores[i], h)).collect();
                return Selection {
                    chosen,
                    threshold: h,
                    iterations,
                    fell_back: false,
                };
            }
            // Raising the threshold shrinks a High selection and grows a Low one.
            let raise = (count > w.hi) == (side == Side::High);
            let dir = if raise { 1 } else { -1 };
            if last_dir != 0 && dir != last_dir {
                step /= 2.0;
            }
            last_dir = dir;
            h = (h + dir as f64 * step).max(0.0);
        }
    }
    log::info!(
        "threshold loop did not settle after {iterations} iterations; using exact selection of {}",
        w.exact
    );
    let mut order: Vec<usize> = (0..n).collect();
    match side {
        Side::High => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        Side::Low => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
    }
    let mut chosen = order[..w.exact].to_vec();
    chosen.sort_unstable();
    let threshold = chosen
        .iter()
        .map(|&i| scores[i] as f64)
        .reduce(|a, b| match side {
            Side::High => a.min(b),
            Side::Low => a.max(b),
        })
        .unwrap_or(h);
    Selection {
        chosen,
        threshold,
        iterations,
        fell_back: true,
    }
}

/// Grows the global sparsity down to `s_tgt` by gradient magnitude across all
/// parameter layers. Growth is limited to eligible positions; grown weights
/// start at zero.
pub fn global_grow_feedback(
    model: &mut ModelState,
    grads: &Gradients,
    s_tgt: f64,
    params: FeedbackParams,
) -> Result<FeedbackState> {
    let total = model.total_weights() as f64;
    let gap = (global_sparsity(model) - s_tgt) * total;
    let candidates = growth_candidates(model, &model.param_layers());
    let Some(w) = window(gap, params.s_delta * total, candidates.len()) else {
        return Ok(FeedbackState::default());
    };
    if w.hi == 0 {
        return Ok(FeedbackState::default());
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for pos in &candidates {
        let g = grads
            .layer(pos.layer)
            .ok_or_else(|| Error::Shape(format!("missing gradient for layer {}", pos.layer)))?;
        scores.push(g.weight.data()[pos.index].abs());
    }
    let sel = select(&scores, Side::High, &w, params.h_i, params.max_iters);
    for &i in &sel.chosen {
        activate(model, candidates[i]);
    }
    Ok(FeedbackState {
        h_p: 0.0,
        h_g: sel.threshold,
        iterations_used: sel.iterations,
        fell_back: sel.fell_back,
        changed: sel.chosen.len(),
    })
}

/// Prunes the global sparsity up to `s_tgt` by weight magnitude across all
/// parameter layers. Weights grown in the preceding window compete equally.
pub fn global_prune_feedback(
    model: &mut ModelState,
    s_tgt: f64,
    params: FeedbackParams,
) -> FeedbackState {
    let total = model.total_weights() as f64;
    let gap = (s_tgt - global_sparsity(model)) * total;
    let mut positions = Vec::new();
    let mut scores = Vec::new();
    for layer in model.param_layers() {
        let p = model.masked_param(layer).unwrap();
        for (index, (&m, &v)) in p.mask().iter().zip(p.weights().data()).enumerate() {
            if m {
                positions.push(Position { layer, index });
                scores.push(v.abs());
            }
        }
    }
    let Some(w) = window(gap, params.s_delta * total, positions.len()) else {
        return FeedbackState::default();
    };
    if w.hi == 0 {
        return FeedbackState::default();
    }
    let sel = select(&scores, Side::Low, &w, params.h_i, params.max_iters);
    for &i in &sel.chosen {
        deactivate(model, positions[i]);
    }
    FeedbackState {
        h_p: sel.threshold,
        h_g: 0.0,
        iterations_used: sel.iterations,
        fell_back: sel.fell_back,
        changed: sel.chosen.len(),
    }
}

/// Moves global sparsity to `s_tgt`, growing or pruning as needed.
pub fn rebalance(
    model: &mut ModelState,
    grads: &Gradients,
    s_tgt: f64,
    params: FeedbackParams,
) -> Result<FeedbackState> {
    if global_sparsity(model) > s_tgt {
        global_grow_feedback(model, grads, s_tgt, params)
    } else {
        Ok(global_prune_feedback(model, s_tgt, params))
    }
}
