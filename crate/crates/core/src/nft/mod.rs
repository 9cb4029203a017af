//! Negative-aware flow fine-tuning on 2-D toy distributions.
//!
//! A flow policy `v_θ(x_t, c, t)` is first fit to a base distribution by plain
//! flow matching, then fine-tuned against an analytic reward. Each iteration
//! samples a group per condition from the EMA policy `v_old`, normalizes the
//! rewards within the group, and regresses the implicit positive and negative
//! velocities
//!
//! ```text
//! v⁺ = (1 - β) v_old + β v_θ        v⁻ = (1 + β) v_old - β v_θ
//! L  = r ‖v⁺ - v‖² + (1 - r) ‖v⁻ - v‖²
//! ```
//!
//! toward the re-noised target velocity `v`. Gradients do not flow through
//! `v_old`.

pub mod checkpoint;
pub mod mlp;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::reward::{NormalizeOptions, QualityThresholds};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use mlp::{Adam, MlpLayout};
pub use train::{
    nft_batch_loss, pretrain, pretrained_policy, sample_policy, train, FlowPolicy, IterationMetrics, NftSample, RewardFn,
    TrainOutcome, TwoGaussianTask,
};

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NftError {
    #[error("loss diverged at iteration {iteration}: {loss}")]
    DivergedLoss { iteration: usize, loss: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("policy and reward disagree on the number of conditions ({policy} vs {reward})")]
    ConditionMismatch { policy: usize, reward: usize },
}

/// Interpolation `x_t = α(t) x₀ + σ(t) ε`, clean data at `t = 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `α = 1 - t`, `σ = t`.
    #[default]
    RectifiedFlow,
    /// `α = cos(πt/2)`, `σ = sin(πt/2)`.
    Trigonometric,
}

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::RectifiedFlow => 1.0 - t,
            NoiseSchedule::Trigonometric => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::RectifiedFlow => t,
            NoiseSchedule::Trigonometric => (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn d_alpha(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::RectifiedFlow => -1.0,
            NoiseSchedule::Trigonometric => -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn d_sigma(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::RectifiedFlow => 1.0,
            NoiseSchedule::Trigonometric => std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }
}

/// Returns `(x_t, v_target)`.
pub fn noisify(x0: Vec2, t: f64, eps: Vec2, schedule: NoiseSchedule) -> (Vec2, Vec2) {
    let (a, s, da, ds) = (schedule.alpha(t), schedule.sigma(t), schedule.d_alpha(t), schedule.d_sigma(t));
    (
        [a * x0[0] + s * eps[0], a * x0[1] + s * eps[1]],
        [da * x0[0] + ds * eps[0], da * x0[1] + ds * eps[1]],
    )
}

/// Returns `(v⁺, v⁻)`.
pub fn implicit_velocities(v_old: Vec2, v_theta: Vec2, beta: f64) -> (Vec2, Vec2) {
    let plus = |i: usize| (1.0 - beta) * v_old[i] + beta * v_theta[i];
    let minus = |i: usize| (1.0 + beta) * v_old[i] - beta * v_theta[i];
    ([plus(0), plus(1)], [minus(0), minus(1)])
}

fn sq_dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

pub fn nft_loss(r_norm: f64, v_plus: Vec2, v_minus: Vec2, v_target: Vec2) -> f64 {
    r_norm * sq_dist(v_plus, v_target) + (1.0 - r_norm) * sq_dist(v_minus, v_target)
}

/// `∂L/∂v_θ` for one sample, holding `v_old` fixed.
pub fn nft_loss_grad(r_norm: f64, beta: f64, v_plus: Vec2, v_minus: Vec2, v_target: Vec2) -> Vec2 {
    let g = |i: usize| 2.0 * beta * (r_norm * (v_plus[i] - v_target[i]) - (1.0 - r_norm) * (v_minus[i] - v_target[i]));
    [g(0), g(1)]
}

/// `θ_old ← η θ_old + (1 - η) θ`.
pub fn ema_update(theta_old: &mut [f64], theta: &[f64], eta: f64) {
    for (o, t) in theta_old.iter_mut().zip(theta) {
        *o = eta * *o + (1.0 - eta) * t;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NftConfig {
    /// Samples per condition group (K).
    pub group_size: usize,
    /// Guidance strength β.
    pub beta: f64,
    /// EMA factors η_i; the last entry repeats once the list runs out.
    pub ema_schedule: Vec<f64>,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Condition groups sampled per iteration.
    pub batch_size: usize,
    /// Upper bound of the re-noising timestep, `t ~ U(0, noise_level)`.
    pub noise_level: f64,
    pub sampling_steps: usize,
    /// Gradient steps per iteration, each with fresh re-noising.
    pub inner_steps: usize,
    pub hidden: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub normalize: NormalizeOptions,
    pub quality: QualityThresholds,
}

impl Default for NftConfig {
    fn default() -> Self {
        NftConfig {
            group_size: 16,
            beta: 1e-4,
            ema_schedule: vec![0.9],
            learning_rate: 1e-3,
            iterations: 500,
            batch_size: 2,
            noise_level: 0.7,
            sampling_steps: 15,
            inner_steps: 1,
            hidden: 64,
            pretrain_steps: 2000,
            pretrain_batch: 128,
            pretrain_lr: 2e-3,
            seed: 0,
            schedule: NoiseSchedule::RectifiedFlow,
            normalize: NormalizeOptions::default(),
            quality: QualityThresholds::default(),
        }
    }
}

impl NftConfig {
    pub fn validate(&self) -> Result<(), NftError> {
        let bad = |m: &str| Err(NftError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and >= 0");
        }
        if self.ema_schedule.is_empty() || self.ema_schedule.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return bad("ema_schedule must be non-empty with entries in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.pretrain_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.noise_level > 0.0 && self.noise_level <= 1.0) {
            return bad("noise_level must be in (0, 1]");
        }
        if self.sampling_steps == 0 || self.batch_size == 0 || self.inner_steps == 0 || self.hidden == 0 {
            return bad("sampling_steps, batch_size, inner_steps and hidden must be >= 1");
        }
        Ok(())
    }

    pub fn eta(&self, iteration: usize) -> f64 {
        let i = iteration.min(self.ema_schedule.len() - 1);
        self.ema_schedule[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noisify_boundaries() {
        let (x0, e) = ([1.5, -2.0], [0.3, 0.7]);
        for s in [NoiseSchedule::RectifiedFlow, NoiseSchedule::Trigonometric] {
            assert_eq!(noisify(x0, 0.0, e, s).0, x0);
            let (x1, _) = noisify(x0, 1.0, e, s);
            assert!((x1[0] - e[0]).abs() < 1e-15 && (x1[1] - e[1]).abs() < 1e-15);
        }
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(noisify(x0, t, e, NoiseSchedule::RectifiedFlow).1, [e[0] - x0[0], e[1] - x0[1]]);
        }
    }

    #[test]
    fn schedule_derivatives_match_finite_differences() {
        let s = NoiseSchedule::Trigonometric;
        let h = 1e-6;
        for t in [0.1, 0.5, 0.9] {
            assert!(((s.alpha(t + h) - s.alpha(t - h)) / (2.0 * h) - s.d_alpha(t)).abs() < 1e-8);
            assert!(((s.sigma(t + h) - s.sigma(t - h)) / (2.0 * h) - s.d_sigma(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn implicit_velocity_cases() {
        let (p, m) = implicit_velocities([1.0, 2.0], [5.0, -3.0], 0.0);
        assert_eq!((p, m), ([1.0, 2.0], [1.0, 2.0]));
        let (p, m) = implicit_velocities([0.0, 0.0], [5.0, -3.0], 1.0);
        assert_eq!((p, m), ([5.0, -3.0], [-5.0, 3.0]));
    }

    #[test]
    fn loss_cases() {
        let v = [1.0, 1.0];
        assert_eq!(nft_loss(1.0, [2.0, 1.0], [9.0, 9.0], v), 1.0);
        assert_eq!(nft_loss(0.3, v, v, v), 0.0);
        assert_eq!(nft_loss(0.5, [0.0, 1.0], [0.0, 1.0], v), 1.0);
        assert_eq!(nft_loss_grad(0.5, 0.0, [3.0, 1.0], [0.0, 1.0], v), [0.0, 0.0]);
    }

    #[test]
    fn ema_cases() {
        let mut o = vec![2.0, 2.0];
        ema_update(&mut o, &[0.0, 0.0], 0.5);
        assert_eq!(o, vec![1.0, 1.0]);
        ema_update(&mut o, &[7.0, 7.0], 1.0);
        assert_eq!(o, vec![1.0, 1.0]);
        ema_update(&mut o, &[7.0, 8.0], 0.0);
        assert_eq!(o, vec![7.0, 8.0]);
    }

    #[test]
    fn config_validation_and_schedule() {
        let mut c = NftConfig::default();
        assert!(c.validate().is_ok());
        c.ema_schedule = vec![0.5, 0.8];
        assert_eq!((c.eta(0), c.eta(1), c.eta(100)), (0.5, 0.8, 0.8));
        c.group_size = 1;
        assert!(c.validate().is_err());
        c.group_size = 2;
        c.ema_schedule = vec![1.5];
        assert!(c.validate().is_err());
    }
}
