//! PPO training: rollouts, GAE, the clipped surrogate update and evaluation.

mod eval;
mod gae;
mod metrics;
mod ppo;
mod rollout;
mod value;

pub use eval::{
    eval_env_rng, evaluate_policy, evaluate_with, AgentMessages, EvalStats, MessageSelector,
    RandomMessages,
};
pub use gae::{compute_gae, discounted_returns, normalize};
pub use metrics::{IterationMetrics, MetricsWriter};
pub use ppo::{
    policy_gradients, policy_loss_graph, ppo_update, Minibatch, PolicyLoss, UpdateMetrics,
};
pub use rollout::{collect_rollouts, Trajectory};
pub use value::{value_forward, BaselineKind, ValueParams};

use std::time::Instant;

use bcomm_grad::rng::{stream, stream_id};
use bcomm_grad::{Adam, AdamConfig};
use serde::{Deserialize, Serialize};

use crate::commnet::{Architecture, CommPolicyParams};
use crate::envs::EnvConfig;
use crate::{AttentionMode, CoreError, Protocol};

/// Stream purposes; see [`bcomm_grad::rng::stream_id`].
pub mod streams {
    pub const INIT: u16 = 1;
    pub const ROLLOUT_ENV: u16 = 2;
    pub const ROLLOUT_ACT: u16 = 3;
    pub const MINIBATCH: u16 = 4;
    pub const EVAL_ENV: u16 = 5;
    pub const RANDOM_MESSAGE: u16 = 6;
    pub const PROBE: u16 = 7;
    pub const ATLAS: u16 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub seed: u64,
    pub baseline: BaselineKind,
    pub eval_episodes: usize,
    pub value_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            epochs: 4,
            minibatches: 4,
            iterations: 500,
            episodes_per_iteration: 64,
            seed: 0,
            baseline: BaselineKind::Centralized,
            eval_episodes: 100,
            value_coef: 0.5,
            max_grad_norm: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: &str| Err(CoreError::invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return bad("clip epsilon must be positive");
        }
        if self.entropy_coef.is_nan() || self.entropy_coef < 0.0 {
            return bad("entropy coefficient must be non-negative");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.episodes_per_iteration == 0 {
            return bad("epochs, minibatches and episodes per iteration must be positive");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Fresh policy (and value net, for a centralized baseline) for `env`.
pub fn init_params(
    env: &EnvConfig,
    protocol: Protocol,
    attention_mode: AttentionMode,
    config: &TrainConfig,
) -> (CommPolicyParams, Option<ValueParams>) {
    let spec = env.spec();
    let arch = Architecture::new(
        spec.n_agents,
        spec.obs_dim,
        spec.n_actions,
        protocol,
        attention_mode,
    );
    let mut rng = stream(config.seed, stream_id(streams::INIT, 0, 0));
    let policy = CommPolicyParams::init(arch, &mut rng);
    let value = match config.baseline {
        BaselineKind::Zero => None,
        BaselineKind::Centralized => Some(ValueParams::init(spec.state_dim, &mut rng)),
    };
    (policy, value)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: CommPolicyParams,
    pub value: Option<ValueParams>,
    pub history: Vec<IterationMetrics>,
}

/// Run `config.iterations` PPO iterations, reporting each to `observer`.
pub fn train(
    env: &EnvConfig,
    mut policy: CommPolicyParams,
    mut value: Option<ValueParams>,
    config: &TrainConfig,
    mut observer: impl FnMut(&IterationMetrics) -> Result<(), CoreError>,
) -> Result<TrainOutcome, CoreError> {
    config.validate()?;
    env.validate()?;
    if config.baseline == BaselineKind::Centralized && value.is_none() {
        return Err(CoreError::invalid("centralized baseline requires a value net"));
    }
    let mut policy_opt = Adam::new(config.adam(), &policy.tensors);
    let mut value_opt = value.as_ref().map(|v| Adam::new(config.adam(), &v.tensors));
    let start = Instant::now();
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let mut batch = collect_rollouts(env, &policy, value.as_ref(), config, iteration as u64)?;
        let n_ep = batch.len() as f64;
        let mean_return = batch.iter().map(Trajectory::total_return).sum::<f64>() / n_ep;
        let normalized_return = batch
            .iter()
            .map(|t| t.normalized_return)
            .sum::<Option<f64>>()
            .map(|s| s / n_ep);
        let value_pair = match (value.as_mut(), value_opt.as_mut()) {
            (Some(v), Some(o)) => Some((v, o)),
            _ => None,
        };
        let update = ppo_update(
            &mut batch,
            &mut policy,
            &mut policy_opt,
            value_pair,
            config,
            iteration as u64,
        )?;
        let m = IterationMetrics {
            iteration,
            mean_return,
            normalized_return,
            policy_loss: update.policy_loss,
            value_loss: update.value_loss,
            entropy: update.entropy,
            mean_ratio: update.mean_ratio,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        observer(&m)?;
        history.push(m);
    }
    Ok(TrainOutcome {
        policy,
        value,
        history,
    })
}
