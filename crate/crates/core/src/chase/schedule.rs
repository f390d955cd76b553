//! Cubic channel-sparsity schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-sparsity ramp from `s_i` at iteration `t0` to `s_f` at
/// `t0 + n * delta_t`, following `S_t = S_f + (S_i - S_f)(1 - (t - t0)/(n ΔT))^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub s_i: f64,
    pub s_f: f64,
    pub t0: usize,
    pub n: usize,
    pub delta_t: usize,
}

impl SparsitySchedule {
    pub fn new(s_i: f64, s_f: f64, t0: usize, n: usize, delta_t: usize) -> Result<Self> {
        let s = Self {
            s_i,
            s_f,
            t0,
            n,
            delta_t,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule that reaches `s_f` at the last prune event not after `tau_stop`.
    pub fn for_run(s_f: f64, delta_t: usize, tau_stop: usize) -> Result<Self> {
        if delta_t == 0 {
            return Err(Error::Config("channel prune interval must be positive".into()));
        }
        Self::new(0.0, s_f, 0, (tau_stop / delta_t).max(1), delta_t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.s_i && self.s_i <= self.s_f && self.s_f < 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= S_i <= S_f < 1 (S_i={}, S_f={})",
                self.s_i, self.s_f
            )));
        }
        if self.n == 0 || self.delta_t == 0 {
            return Err(Error::Config("schedule needs n >= 1 and delta_t >= 1".into()));
        }
        Ok(())
    }

    pub fn end(&self) -> usize {
        self.t0 + self.n * self.delta_t
    }
}

/// Target channel sparsity at iteration `t`; `t` outside the ramp is clamped.
pub fn channel_sparsity_target(sched: &SparsitySchedule, t: usize) -> f64 {
    if t <= sched.t0 {
        return sched.s_i;
    }
    if t >= sched.end() {
        return sched.s_f;
    }
    let span = (sched.n * sched.delta_t) as f64;
    let frac = (t - sched.t0) as f64 / span;
    sched.s_f + (sched.s_i - sched.s_f) * (1.0 - frac).powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = SparsitySchedule::new(0.0, 0.5, 0, 1, 100).unwrap();
        assert_eq!(channel_sparsity_target(&s, 0), 0.0);
        assert_eq!(channel_sparsity_target(&s, 100), 0.5);
        assert!((channel_sparsity_target(&s, 50) - 0.4375).abs() < 1e-15);
    }

    #[test]
    fn clamps_outside_window() {
        let s = SparsitySchedule::new(0.1, 0.5, 10, 4, 5).unwrap();
        assert_eq!(channel_sparsity_target(&s, 0), 0.1);
        assert_eq!(channel_sparsity_target(&s, 1000), 0.5);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(SparsitySchedule::new(0.6, 0.5, 0, 1, 1).is_err());
        assert!(SparsitySchedule::new(0.0, 1.0, 0, 1, 1).is_err());
        assert!(SparsitySchedule::new(0.0, 0.5, 0, 0, 1).is_err());
    }

    #[test]
    fn run_schedule_ends_at_last_event() {
        let s = SparsitySchedule::for_run(0.5, 8, 130).unwrap();
        assert_eq!(s.n, 16);
        assert_eq!(channel_sparsity_target(&s, 128), 0.5);
    }
}
