use std::collections::HashMap;

use bcomm_grad::rng::{stream, stream_id, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::rollout::stack_observations;
use super::streams;
use crate::commnet::CommPolicyParams;
use crate::envs::EnvConfig;
use crate::{CoreError, Protocol};

/// Chooses replacement broadcasts during evaluation.
pub trait MessageSelector {
    /// Message for `agent` in evaluation episode `episode`, or `None` to keep
    /// the one the policy produced.
    fn select(
        &mut self,
        episode: usize,
        agent: usize,
        observation: &[f64],
    ) -> Result<Option<Vec<f64>>, CoreError>;
}

/// Leaves every message to the policy.
pub struct AgentMessages;

impl MessageSelector for AgentMessages {
    fn select(&mut self, _: usize, _: usize, _: &[f64]) -> Result<Option<Vec<f64>>, CoreError> {
        Ok(None)
    }
}

/// Uniformly random vocabulary entries for the listed agents.
pub struct RandomMessages {
    protocol: Protocol,
    agents: Vec<usize>,
    seed: u64,
    rngs: HashMap<usize, Rng>,
}

impl RandomMessages {
    pub fn new(protocol: Protocol, agents: Vec<usize>, seed: u64) -> Result<Self, CoreError> {
        if !protocol.is_discrete() {
            return Err(CoreError::invalid(format!(
                "random messages need a discrete protocol, got {protocol}"
            )));
        }
        Ok(Self {
            protocol,
            agents,
            seed,
            rngs: HashMap::new(),
        })
    }

    /// One uniformly random message from `rng`.
    pub fn draw(protocol: &Protocol, rng: &mut Rng) -> Result<Vec<f64>, CoreError> {
        let vocab = protocol
            .vocab_size()
            .filter(|_| protocol.is_discrete())
            .ok_or_else(|| CoreError::invalid("random messages need a finite vocabulary"))?;
        protocol.encode(rng.random_range(0..vocab))
    }
}

impl MessageSelector for RandomMessages {
    fn select(
        &mut self,
        episode: usize,
        agent: usize,
        _: &[f64],
    ) -> Result<Option<Vec<f64>>, CoreError> {
        if !self.agents.contains(&agent) {
            return Ok(None);
        }
        let seed = self.seed;
        let rng = self.rngs.entry(episode).or_insert_with(|| {
            stream(seed, stream_id(streams::RANDOM_MESSAGE, episode as u64, 0))
        });
        Self::draw(&self.protocol, rng).map(Some)
    }
}

/// Environment stream for evaluation episode `episode` under `seed`.
pub fn eval_env_rng(seed: u64, episode: usize) -> Rng {
    stream(seed, stream_id(streams::EVAL_ENV, 0, episode as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean_return: f64,
    /// Absent for a single episode.
    pub std_error: Option<f64>,
    pub normalized_return: Option<f64>,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(returns: Vec<f64>, normalized: Option<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std_error = (returns.len() > 1).then(|| {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self {
            episodes: returns.len(),
            mean_return: mean,
            std_error,
            normalized_return: normalized,
            returns,
        }
    }
}

/// Greedy-action evaluation over `episodes` episodes.
pub fn evaluate_policy(
    env: &EnvConfig,
    policy: &CommPolicyParams,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats, CoreError> {
    evaluate_with(env, policy, episodes, seed, &mut AgentMessages)
}

/// [`evaluate_policy`] with broadcasts routed through `selector`.
pub fn evaluate_with(
    env: &EnvConfig,
    policy: &CommPolicyParams,
    episodes: usize,
    seed: u64,
    selector: &mut dyn MessageSelector,
) -> Result<EvalStats, CoreError> {
    if episodes == 0 {
        return Err(CoreError::invalid("evaluation needs at least one episode"));
    }
    let spec = env.spec();
    let (n, od) = (spec.n_agents, spec.obs_dim);
    let mut envs = (0..episodes)
        .map(|e| env.make(eval_env_rng(seed, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut totals = vec![0.0; episodes];
    loop {
        let active: Vec<usize> = (0..episodes).filter(|&e| !envs[e].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let obs = stack_observations(&envs, &active)?;
        let overrides = if policy.arch.protocol.communicates() {
            let mut ov = Vec::with_capacity(active.len() * n);
            let mut any = false;
            for (slot, &e) in active.iter().enumerate() {
                for i in 0..n {
                    let row = slot * n + i;
                    let o = selector.select(e, i, &obs.data()[row * od..(row + 1) * od])?;
                    any |= o.is_some();
                    ov.push(o);
                }
            }
            any.then_some(ov)
        } else {
            None
        };
        let fwd = policy.forward(&obs, overrides.as_deref())?;
        let actions = fwd.argmax_actions();
        for (slot, &e) in active.iter().enumerate() {
            let r = envs[e].step(&actions[slot * n..(slot + 1) * n])?;
            totals[e] += r.reward;
        }
    }
    let normalized = envs
        .iter()
        .zip(&totals)
        .map(|(env, &t)| env.normalized_return(t))
        .sum::<Option<f64>>()
        .map(|s| s / episodes as f64);
    Ok(EvalStats::from_returns(totals, normalized))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{expected_random_return, LeversConfig, PredPreyConfig};
    use crate::trainer::{init_params, BaselineKind, TrainConfig};
    use crate::AttentionMode;

    #[test]
    fn random_parameter_levers_policy_matches_random_baseline() {
        let env = EnvConfig::Levers(LeversConfig::default());
        let mut sum = 0.0;
        let inits = 20;
        for s in 0..inits {
            let cfg = TrainConfig {
                seed: s,
                baseline: BaselineKind::Zero,
                ..TrainConfig::default()
            };
            let (p, _) = init_params(&env, Protocol::none(), AttentionMode::Learned, &cfg);
            let stats = evaluate_policy(&env, &p, 10, 100 + s).unwrap();
            sum += stats.normalized_return.unwrap();
        }
        // 20 × 10 × 50 = 10,000 rounds
        let mean = sum / inits as f64;
        assert!((mean - expected_random_return(5)).abs() < 0.01, "{mean}");
    }

    #[test]
    fn single_episode_has_no_standard_error() {
        let env = EnvConfig::PredPrey(PredPreyConfig::default());
        let (p, _) = init_params(
            &env,
            Protocol::bitstring(2),
            AttentionMode::Learned,
            &TrainConfig::default(),
        );
        let s = evaluate_policy(&env, &p, 1, 4).unwrap();
        assert_eq!(s.std_error, None);
        assert_eq!(s.normalized_return, None);
        assert!(evaluate_policy(&env, &p, 0, 4).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_means() {
        let env = EnvConfig::PredPrey(PredPreyConfig::default());
        let (p, _) = init_params(
            &env,
            Protocol::onehot(4),
            AttentionMode::Learned,
            &TrainConfig::default(),
        );
        let a = evaluate_policy(&env, &p, 5, 9).unwrap();
        let b = evaluate_policy(&env, &p, 5, 9).unwrap();
        assert_eq!(a, b);
        let mut r1 = RandomMessages::new(Protocol::onehot(4), vec![0], 1).unwrap();
        let mut r2 = RandomMessages::new(Protocol::onehot(4), vec![0], 1).unwrap();
        let c = evaluate_with(&env, &p, 5, 9, &mut r1).unwrap();
        let d = evaluate_with(&env, &p, 5, 9, &mut r2).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn standard_error_uses_sample_variance() {
        let s = EvalStats::from_returns(vec![1.0, 2.0, 3.0, 6.0], None);
        assert_eq!(s.mean_return, 3.0);
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 3.0;
        assert!((s.std_error.unwrap() - (var / 4.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn random_messages_are_valid_vocabulary_entries() {
        let p = Protocol::bitstring(3);
        let mut sel = RandomMessages::new(p, vec![1], 0).unwrap();
        assert_eq!(sel.select(0, 0, &[]).unwrap(), None);
        for e in 0..50 {
            let m = sel.select(e, 1, &[]).unwrap().unwrap();
            assert!(p.decode(&m).unwrap() < 8);
        }
        assert!(RandomMessages::new(Protocol::continuous(3), vec![0], 0).is_err());
    }
}
