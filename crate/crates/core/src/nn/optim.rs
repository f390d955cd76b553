//! Momentum SGD and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::engine::Gradients;
use super::model::ModelState;
use crate::error::{Error, Result};

/// One momentum-SGD step with L2 weight decay:
/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
///
/// Masked weights and dead-channel biases are left at zero with zero momentum.
pub fn sgd_step(
    model: &mut ModelState,
    grads: &Gradients,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "sgd needs lr > 0 and 0 <= momentum < 1 (lr={lr}, momentum={momentum})"
        )));
    }
    for layer in model.param_layers() {
        let g = grads
            .layer(layer)
            .ok_or_else(|| Error::Shape(format!("missing gradient for layer {layer}")))?;
        let p = model.layer_mut(layer).expect("param layer");
        if g.weight.len() != p.weight.len() {
            return Err(Error::Shape(format!("gradient shape mismatch in layer {layer}")));
        }
        {
            let mask = p.weight.mask.clone();
            let w = p.weight.weights.data_mut();
            let v = p.weight_velocity.data_mut();
            for (i, &active) in mask.iter().enumerate() {
                if active {
                    let d = g.weight.data()[i] + weight_decay * w[i];
                    v[i] = momentum * v[i] + d;
                    w[i] -= lr * v[i];
                } else {
                    v[i] = 0.0;
                    w[i] = 0.0;
                }
            }
        }
        if let (Some(b), Some(bv), Some(gb)) =
            (p.bias.as_mut(), p.bias_velocity.as_mut(), g.bias.as_ref())
        {
            let alive = &p.weight.alive_channels;
            let (b, bv) = (b.data_mut(), bv.data_mut());
            for c in 0..b.len() {
                if alive[c] {
                    let d = gb.data()[c] + weight_decay * b[c];
                    bv[c] = momentum * bv[c] + d;
                    b[c] -= lr * bv[c];
                } else {
                    bv[c] = 0.0;
                    b[c] = 0.0;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Constant,
    StepDrop,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base_lr: f64,
    #[serde(default)]
    pub drop_epochs: Vec<usize>,
    #[serde(default = "default_drop_factor")]
    pub drop_factor: f64,
    pub total_epochs: usize,
}

fn default_drop_factor() -> f64 {
    10.0
}

impl LrSchedule {
    pub fn constant(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: LrKind::Constant,
            base_lr,
            drop_epochs: Vec::new(),
            drop_factor: default_drop_factor(),
            total_epochs,
        }
    }

    pub fn step_drop(base_lr: f64, drop_epochs: Vec<usize>, drop_factor: f64, total_epochs: usize) -> Self {
        Self {
            kind: LrKind::StepDrop,
            base_lr,
            drop_epochs,
            drop_factor,
            total_epochs,
        }
    }

    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: LrKind::Cosine,
            base_lr,
            drop_epochs: Vec::new(),
            drop_factor: default_drop_factor(),
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.drop_factor > 0.0) {
            return Err(Error::Config("drop_factor must be positive".into()));
        }
        if self.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("drop_epochs must be strictly increasing".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.kind {
            LrKind::Constant => self.base_lr,
            LrKind::StepDrop => {
                let drops = self.drop_epochs.iter().filter(|&&e| epoch >= e).count();
                self.base_lr / self.drop_factor.powi(drops as i32)
            }
            LrKind::Cosine => {
                let frac = epoch as f64 / self.total_epochs as f64;
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_drop_matches_cifar_table() {
        let s = LrSchedule::step_drop(0.1, vec![80, 120], 10.0, 160);
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(100) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(150) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::cosine(0.512, 100);
        assert_eq!(s.lr_at(0), 0.512);
        assert!((s.lr_at(50) - 0.256).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(LrSchedule::constant(0.0, 1).validate().is_err());
        assert!(LrSchedule::step_drop(0.1, vec![5, 5], 10.0, 10).validate().is_err());
        assert!(LrSchedule::step_drop(0.1, vec![5, 8], 0.0, 10).validate().is_err());
        assert!(LrSchedule::cosine(0.1, 10).validate().is_ok());
    }
}
