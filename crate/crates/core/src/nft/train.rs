use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{self, Adam, MlpLayout};
use super::{ema_update, implicit_velocities, nft_loss, nft_loss_grad, noisify, NftConfig, NftError, NoiseSchedule, Vec2};
use crate::reward::{normalize_group, population_std, quality_filter};

pub trait RewardFn {
    fn n_conditions(&self) -> usize;
    fn reward(&self, x0: Vec2, cond: usize) -> f64;
}

/// Equal mixture of isotropic Gaussians as the base distribution; condition
/// `c` is rewarded by closeness to `targets[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoGaussianTask {
    pub modes: Vec<Vec2>,
    pub std: f64,
    pub targets: Vec<Vec2>,
}

impl Default for TwoGaussianTask {
    fn default() -> Self {
        TwoGaussianTask {
            modes: vec![[-2.0, 0.0], [2.0, 0.0]],
            std: 0.5,
            targets: vec![[2.0, 0.0], [-2.0, 0.0]],
        }
    }
}

impl TwoGaussianTask {
    pub fn sample_base<R: Rng>(&self, rng: &mut R) -> Vec2 {
        let m = self.modes[rng.random_range(0..self.modes.len())];
        [
            m[0] + self.std * rng.sample::<f64, _>(StandardNormal),
            m[1] + self.std * rng.sample::<f64, _>(StandardNormal),
        ]
    }
}

impl RewardFn for TwoGaussianTask {
    fn n_conditions(&self) -> usize {
        self.targets.len()
    }

    fn reward(&self, x0: Vec2, cond: usize) -> f64 {
        let t = self.targets[cond];
        -((x0[0] - t[0]).powi(2) + (x0[1] - t[1]).powi(2)).sqrt()
    }
}

fn normal2<R: Rng>(rng: &mut R) -> Vec2 {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// Trainable parameters `θ` and the EMA sampling parameters `θ_old`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicy {
    pub layout: MlpLayout,
    pub theta: Vec<f64>,
    pub theta_old: Vec<f64>,
}

impl FlowPolicy {
    pub fn new<R: Rng>(layout: MlpLayout, rng: &mut R) -> Self {
        let theta = layout.init(rng);
        FlowPolicy {
            layout,
            theta_old: theta.clone(),
            theta,
        }
    }

    pub fn velocity(&self, x: Vec2, cond: usize, t: f64) -> Vec2 {
        mlp::forward(&self.layout, &self.theta, x, cond, t)
    }

    pub fn velocity_old(&self, x: Vec2, cond: usize, t: f64) -> Vec2 {
        mlp::forward(&self.layout, &self.theta_old, x, cond, t)
    }
}

/// Euler integration of `params` from `t = 1` (noise) to `t = 0`.
pub fn sample_policy(layout: &MlpLayout, params: &[f64], cond: usize, noise: Vec2, steps: usize) -> Vec2 {
    let dt = 1.0 / steps as f64;
    let mut x = noise;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = mlp::forward(layout, params, x, cond, t);
        x = [x[0] - dt * v[0], x[1] - dt * v[1]];
    }
    x
}

/// Fresh network seeded from `cfg.seed`, fitted to the task's base distribution.
pub fn pretrained_policy(task: &TwoGaussianTask, cfg: &NftConfig) -> FlowPolicy {
    let layout = MlpLayout {
        n_conditions: task.n_conditions(),
        hidden: cfg.hidden,
    };
    let mut policy = FlowPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    pretrain(&mut policy, task, cfg);
    policy
}

/// Plain flow matching on the base distribution, with conditions drawn
/// uniformly. Sets `θ_old = θ` afterwards. Returns per-step losses.
pub fn pretrain(policy: &mut FlowPolicy, task: &TwoGaussianTask, cfg: &NftConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554_5241_494e);
    let layout = policy.layout;
    let mut adam = Adam::new(layout.param_count(), cfg.pretrain_lr);
    let mut grad = vec![0.0; layout.param_count()];
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    for _ in 0..cfg.pretrain_steps {
        grad.fill(0.0);
        let mut loss = 0.0;
        let n = cfg.pretrain_batch as f64;
        for _ in 0..cfg.pretrain_batch {
            let x0 = task.sample_base(&mut rng);
            let eps = normal2(&mut rng);
            let t: f64 = rng.random();
            let cond = rng.random_range(0..layout.n_conditions);
            let (xt, v) = noisify(x0, t, eps, cfg.schedule);
            let (out, cache) = mlp::forward_cached(&layout, &policy.theta, xt, cond, t);
            let d = [out[0] - v[0], out[1] - v[1]];
            loss += (d[0] * d[0] + d[1] * d[1]) / n;
            mlp::backward(&layout, &policy.theta, &cache, [2.0 * d[0] / n, 2.0 * d[1] / n], &mut grad);
        }
        adam.step(&mut policy.theta, &grad);
        losses.push(loss);
    }
    policy.theta_old.clone_from(&policy.theta);
    losses
}

/// One re-noised training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NftSample {
    pub x_t: Vec2,
    pub cond: usize,
    pub t: f64,
    pub v_target: Vec2,
    pub r_norm: f64,
}

/// Mean loss over `batch` and its gradient with respect to `theta`;
/// `theta_old` is treated as a constant.
pub fn nft_batch_loss(layout: &MlpLayout, theta: &[f64], theta_old: &[f64], batch: &[NftSample], beta: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; theta.len()];
    if batch.is_empty() {
        return (0.0, grad);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let v_old = mlp::forward(layout, theta_old, s.x_t, s.cond, s.t);
        let (v_theta, cache) = mlp::forward_cached(layout, theta, s.x_t, s.cond, s.t);
        let (vp, vm) = implicit_velocities(v_old, v_theta, beta);
        loss += nft_loss(s.r_norm, vp, vm, s.v_target) / n;
        let g = nft_loss_grad(s.r_norm, beta, vp, vm, s.v_target);
        mlp::backward(layout, theta, &cache, [g[0] / n, g[1] / n], &mut grad);
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    /// Mean raw reward of the samples drawn from `v_old` this iteration.
    pub mean_reward: f64,
    /// Mean within-group standard deviation of the raw rewards.
    pub reward_std: f64,
    pub loss: f64,
    pub groups_kept: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: FlowPolicy,
    pub metrics: Vec<IterationMetrics>,
}

struct Group {
    cond: usize,
    samples: Vec<Vec2>,
    r_norm: Vec<f64>,
}

pub fn train<F: RewardFn>(cfg: &NftConfig, reward: &F, mut policy: FlowPolicy) -> Result<TrainOutcome, NftError> {
    cfg.validate()?;
    if reward.n_conditions() != policy.layout.n_conditions {
        return Err(NftError::ConditionMismatch {
            policy: policy.layout.n_conditions,
            reward: reward.n_conditions(),
        });
    }
    let layout = policy.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(layout.param_count(), cfg.learning_rate);
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut all_rewards = Vec::new();
        let mut stds = Vec::new();
        let mut groups = Vec::new();
        for g in 0..cfg.batch_size {
            let cond = (iter * cfg.batch_size + g) % layout.n_conditions;
            let samples: Vec<Vec2> = (0..cfg.group_size)
                .map(|_| sample_policy(&layout, &policy.theta_old, cond, normal2(&mut rng), cfg.sampling_steps))
                .collect();
            let raw: Vec<f64> = samples.iter().map(|x| reward.reward(*x, cond)).collect();
            stds.push(population_std(&raw));
            all_rewards.extend_from_slice(&raw);
            let norm = normalize_group(&raw, &cfg.normalize).expect("group_size >= 2");
            if quality_filter(&norm.normalized, &cfg.quality).is_keep() {
                groups.push(Group {
                    cond,
                    samples,
                    r_norm: norm.normalized,
                });
            }
        }

        let mut loss_sum = 0.0;
        if !groups.is_empty() {
            for _ in 0..cfg.inner_steps {
                let batch = renoise(&groups, cfg.noise_level, cfg.schedule, &mut rng);
                let (loss, grad) = nft_batch_loss(&layout, &policy.theta, &policy.theta_old, &batch, cfg.beta);
                if !loss.is_finite() {
                    return Err(NftError::DivergedLoss { iteration: iter, loss });
                }
                adam.step(&mut policy.theta, &grad);
                loss_sum += loss;
            }
        }
        ema_update(&mut policy.theta_old, &policy.theta, cfg.eta(iter));

        let m = IterationMetrics {
            iter,
            mean_reward: all_rewards.iter().sum::<f64>() / all_rewards.len() as f64,
            reward_std: stds.iter().sum::<f64>() / stds.len() as f64,
            loss: loss_sum / cfg.inner_steps as f64,
            groups_kept: groups.len(),
        };
        tracing::debug!(iter, mean_reward = m.mean_reward, reward_std = m.reward_std, loss = m.loss, "nft iteration");
        metrics.push(m);
    }
    Ok(TrainOutcome { policy, metrics })
}

fn renoise<R: Rng>(groups: &[Group], noise_level: f64, schedule: NoiseSchedule, rng: &mut R) -> Vec<NftSample> {
    let mut batch = Vec::new();
    for g in groups {
        for (x0, r) in g.samples.iter().zip(&g.r_norm) {
            let t = rng.random::<f64>() * noise_level;
            let (x_t, v_target) = noisify(*x0, t, normal2(rng), schedule);
            batch.push(NftSample {
                x_t,
                cond: g.cond,
                t,
                v_target,
                r_norm: *r,
            });
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NftConfig {
        NftConfig {
            iterations: 5,
            hidden: 8,
            pretrain_steps: 20,
            pretrain_batch: 16,
            group_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn beta_zero_freezes_theta() {
        let cfg = NftConfig { beta: 0.0, ..tiny() };
        let task = TwoGaussianTask::default();
        let layout = MlpLayout { n_conditions: 2, hidden: cfg.hidden };
        let mut p = FlowPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(1));
        pretrain(&mut p, &task, &cfg);
        let before = p.theta.clone();
        let out = train(&cfg, &task, p).unwrap();
        assert_eq!(out.policy.theta, before);
        assert_eq!(out.metrics.len(), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let task = TwoGaussianTask::default();
        let run = || {
            let layout = MlpLayout { n_conditions: 2, hidden: cfg.hidden };
            let mut p = FlowPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
            pretrain(&mut p, &task, &cfg);
            train(&cfg, &task, p).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn condition_mismatch_is_rejected() {
        let cfg = tiny();
        let layout = MlpLayout { n_conditions: 3, hidden: 4 };
        let p = FlowPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(
            train(&cfg, &TwoGaussianTask::default(), p),
            Err(NftError::ConditionMismatch { .. })
        ));
    }

    #[test]
    fn diverging_loss_is_reported() {
        let cfg = tiny();
        let layout = MlpLayout { n_conditions: 2, hidden: 4 };
        let mut p = FlowPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(1));
        let n = p.theta.len();
        p.theta[n - 1] = f64::NAN;
        assert!(matches!(
            train(&cfg, &TwoGaussianTask::default(), p),
            Err(NftError::DivergedLoss { iteration: 0, .. })
        ));
    }
}
