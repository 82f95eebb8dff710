use bcomm_grad::categorical_sample_logprob;
use bcomm_grad::rng::{stream, stream_id, Rng};
use bcomm_grad::Tensor;

use super::gae::compute_gae;
use super::streams;
use super::value::ValueParams;
use super::TrainConfig;
use crate::commnet::CommPolicyParams;
use crate::envs::{EnvConfig, MultiAgentEnv};
use crate::CoreError;

/// One episode. Per-step agent data is flattened agent-major
/// (`n_agents × width`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub log_probs: Vec<Vec<f64>>,
    pub messages: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub normalized_return: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Observations of the listed environments as a `[B, n, obs_dim]` tensor.
pub(crate) fn stack_observations(
    envs: &[Box<dyn MultiAgentEnv>],
    active: &[usize],
) -> Result<Tensor, CoreError> {
    let spec = envs[active[0]].spec();
    let mut data = Vec::with_capacity(active.len() * spec.n_agents * spec.obs_dim);
    for &e in active {
        data.extend(envs[e].observations());
    }
    Ok(Tensor::new(
        [active.len(), spec.n_agents, spec.obs_dim],
        data,
    )?)
}

/// Sample `config.episodes_per_iteration` episodes in lockstep.
///
/// Episode `e` of iteration `it` draws its environment from stream
/// `(ROLLOUT_ENV, it, e)` and its actions from `(ROLLOUT_ACT, it, e)`, so the
/// batch is reproducible from `(seed, it)`. Values, advantages and returns
/// are filled in before returning.
pub fn collect_rollouts(
    env: &EnvConfig,
    policy: &CommPolicyParams,
    value: Option<&ValueParams>,
    config: &TrainConfig,
    iteration: u64,
) -> Result<Vec<Trajectory>, CoreError> {
    let spec = env.spec();
    let n = spec.n_agents;
    let count = config.episodes_per_iteration;
    let mut envs = (0..count)
        .map(|e| {
            env.make(stream(
                config.seed,
                stream_id(streams::ROLLOUT_ENV, iteration, e as u64),
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut act_rngs: Vec<Rng> = (0..count)
        .map(|e| {
            stream(
                config.seed,
                stream_id(streams::ROLLOUT_ACT, iteration, e as u64),
            )
        })
        .collect();
    let mut trajs: Vec<Trajectory> = (0..count)
        .map(|_| Trajectory {
            n_agents: n,
            obs_dim: spec.obs_dim,
            ..Trajectory::default()
        })
        .collect();

    loop {
        let active: Vec<usize> = (0..count).filter(|&e| !envs[e].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let obs = stack_observations(&envs, &active)?;
        let fwd = policy.forward(&obs, None)?;
        for (slot, &e) in active.iter().enumerate() {
            let traj = &mut trajs[e];
            let mut actions = Vec::with_capacity(n);
            let mut log_probs = Vec::with_capacity(n);
            for i in 0..n {
                let s = categorical_sample_logprob(fwd.logits.row(slot * n + i), &mut act_rngs[e]);
                actions.push(s.action);
                log_probs.push(s.log_prob);
            }
            let rows = slot * n..(slot + 1) * n;
            let flat = |t: &Option<Tensor>| -> Vec<f64> {
                t.as_ref().map_or_else(Vec::new, |t| {
                    rows.clone().flat_map(|r| t.row(r).to_vec()).collect()
                })
            };
            traj.messages.push(flat(&fwd.m));
            traj.attention.push(flat(&fwd.w));
            traj.observations.push(obs.data()
                [slot * n * spec.obs_dim..(slot + 1) * n * spec.obs_dim]
                .to_vec());
            traj.states.push(envs[e].global_state());
            let step = envs[e].step(&actions).map_err(|err| {
                CoreError::Env(format!(
                    "iteration {iteration}, episode {e}, step {}: {err}",
                    traj.rewards.len()
                ))
            })?;
            traj.actions.push(actions);
            traj.log_probs.push(log_probs);
            traj.rewards.push(step.reward);
        }
    }

    for (traj, env) in trajs.iter_mut().zip(&envs) {
        traj.normalized_return = env.normalized_return(traj.total_return());
        traj.values = match value {
            Some(v) if config.baseline == super::BaselineKind::Centralized => {
                let sd = v.state_dim;
                let states = Tensor::new(
                    [traj.len(), sd],
                    traj.states.iter().flatten().copied().collect(),
                )?;
                v.forward(&states)?
            }
            _ => vec![0.0; traj.len()],
        };
        let mut boot = traj.values.clone();
        boot.push(0.0);
        let (adv, ret) = compute_gae(&traj.rewards, &boot, config.gamma, config.lambda)?;
        traj.advantages = adv;
        traj.returns = ret;
    }
    Ok(trajs)
}
