use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of a Chase run. Iteration counts are in optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaseConfig {
    /// Target parameter sparsity.
    pub s_p: f64,
    /// Sparsity of the initial masks; defaults to `s_p`.
    #[serde(default)]
    pub s_init: Option<f64>,
    /// Soft-bound mutation factor: growth goes down to `s_p - s_e`.
    pub s_e: f64,
    /// Parameter exploration interval.
    pub delta_t_p: usize,
    /// Target channel sparsity.
    pub s_c: f64,
    /// Channel prune interval.
    pub delta_t: usize,
    pub beta: f64,
    /// Amenability threshold for diagnostics.
    #[serde(default = "default_v")]
    pub v: f64,
    #[serde(default)]
    pub tau_stop: usize,
    #[serde(default)]
    pub tau_total: usize,
    /// Layers that never lose channels, on top of the default exclusions.
    #[serde(default)]
    pub exclusions: Vec<usize>,
    /// Allow channel pruning of layers that close residual blocks.
    #[serde(default)]
    pub prune_skip: bool,
    #[serde(default = "default_s_delta")]
    pub s_delta: f64,
    /// Fixed threshold increment; derived from the score distribution when absent.
    #[serde(default)]
    pub h_i: Option<f64>,
    #[serde(default = "default_cap")]
    pub feedback_max_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_v() -> f64 {
    0.2
}

fn default_s_delta() -> f64 {
    0.0005
}

fn default_cap() -> usize {
    64
}

impl ChaseConfig {
    /// Defaults of the CIFAR-style setting, with iteration counts left to the caller.
    pub fn new(s_p: f64, s_c: f64) -> Self {
        Self {
            s_p,
            s_init: None,
            s_e: 0.05,
            delta_t_p: 1000,
            s_c,
            delta_t: 1000,
            beta: 0.2,
            v: default_v(),
            tau_stop: 0,
            tau_total: 0,
            exclusions: Vec::new(),
            prune_skip: false,
            s_delta: default_s_delta(),
            h_i: None,
            feedback_max_iters: default_cap(),
            seed: 0,
        }
    }

    pub fn initial_sparsity(&self) -> f64 {
        self.s_init.unwrap_or(self.s_p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.s_p > 0.0 && self.s_p < 1.0) {
            return bad(format!("s_p = {} must lie in (0, 1)", self.s_p));
        }
        if let Some(s) = self.s_init {
            if !(0.0..1.0).contains(&s) {
                return bad(format!("s_init = {s} must lie in [0, 1)"));
            }
        }
        if !(self.s_e >= 0.0 && self.s_p - self.s_e >= 0.0) {
            return bad(format!("need 0 <= s_e <= s_p (s_e = {})", self.s_e));
        }
        if !(0.0..1.0).contains(&self.s_c) {
            return bad(format!("S_c = {} must lie in [0, 1)", self.s_c));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta = {} must lie in [0, 1]", self.beta));
        }
        if !(self.s_delta > 0.0) {
            return bad("s_delta must be positive".into());
        }
        if self.delta_t == 0 || self.delta_t_p == 0 {
            return bad("update intervals must be positive".into());
        }
        if self.tau_stop > self.tau_total {
            return bad(format!(
                "tau_stop {} exceeds tau_total {}",
                self.tau_stop, self.tau_total
            ));
        }
        if self.feedback_max_iters == 0 {
            return bad("feedback_max_iters must be positive".into());
        }
        if let Some(h) = self.h_i {
            if !(h > 0.0) {
                return bad("h_i must be positive".into());
            }
        }
        if !(self.v >= 0.0) {
            return bad("v must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = ChaseConfig::new(0.9, 0.5);
        c.tau_total = 100;
        c.tau_stop = 80;
        assert!(c.validate().is_ok());
        c.tau_stop = 120;
        assert!(c.validate().is_err());
        let mut c = ChaseConfig::new(0.9, 0.5);
        c.s_e = 0.95;
        assert!(c.validate().is_err());
        assert!(ChaseConfig::new(1.0, 0.0).validate().is_err());
        assert!(ChaseConfig::new(0.5, 1.0).validate().is_err());
    }

    #[test]
    fn init_sparsity_defaults_to_target() {
        let mut c = ChaseConfig::new(0.8, 0.4);
        assert_eq!(c.initial_sparsity(), 0.8);
        c.s_init = Some(0.7);
        assert_eq!(c.initial_sparsity(), 0.7);
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let err = serde_json::from_str::<ChaseConfig>(
            r#"{"s_p":0.9,"s_e":0.05,"delta_t_p":10,"s_c":0.5,"delta_t":10,"beta":0.2,"bogus":1}"#,
        );
        assert!(err.is_err());
    }
}
