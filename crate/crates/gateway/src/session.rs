//! One interactive episode in which chosen agents' broadcasts come from a
//! human or a random source instead of the policy.
//!
//! Episode `0` of [`evaluate_policy`](bcomm_core::trainer::evaluate_policy)
//! and an all-agent session with the same seed are the same episode: the
//! environment is drawn from the evaluation stream and actions are greedy.

use std::collections::BTreeMap;
use std::sync::Arc;

use bcomm_core::atlas::{project_observation, recommend_message, EmbeddingAtlas, Projection, Recommendation};
use bcomm_core::checkpoint::Checkpoint;
use bcomm_core::envs::{EnvConfig, EnvView, MultiAgentEnv};
use bcomm_core::trainer::{eval_env_rng, streams, RandomMessages};
use bcomm_core::{CoreError, Protocol};
use bcomm_grad::rng::{stream, stream_id, Rng};
use bcomm_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

/// Neighbours consulted for projections and recommendations.
pub const ATLAS_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MessageMode {
    #[default]
    Agent,
    Human,
    Random,
}

/// What the previous joint step did for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub message: Vec<f64>,
    /// Vocabulary index of `message` for discrete protocols.
    pub message_label: Option<u64>,
    pub attention: Vec<f64>,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub agent: usize,
    pub mode: MessageMode,
    pub observation: Vec<f64>,
    pub last: Option<AgentStep>,
    pub projection: Option<Projection>,
    /// Present for human-mode agents when an atlas is loaded.
    pub recommendation: Option<Recommendation>,
}

/// Full renderable state of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub checkpoint_id: String,
    pub protocol: Protocol,
    pub vocab_size: Option<u64>,
    pub seed: u64,
    pub step_index: usize,
    pub horizon: usize,
    pub done: bool,
    pub cumulative_return: f64,
    pub env: EnvView,
    pub agents: Vec<AgentView>,
    pub has_atlas: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub session_id: String,
    /// Index of the step just taken.
    pub step_index: usize,
    pub reward: f64,
    pub done: bool,
    pub cumulative_return: f64,
    pub state: SessionView,
}

pub struct Session {
    id: String,
    checkpoint: Arc<Checkpoint>,
    atlas: Option<Arc<EmbeddingAtlas>>,
    env_config: EnvConfig,
    env: Box<dyn MultiAgentEnv>,
    modes: Vec<MessageMode>,
    random: Rng,
    seed: u64,
    step_index: usize,
    cumulative_return: f64,
    last: Option<Vec<AgentStep>>,
}

impl Session {
    pub fn new(
        id: String,
        checkpoint: Arc<Checkpoint>,
        atlas: Option<Arc<EmbeddingAtlas>>,
        env_config: EnvConfig,
        modes: Vec<MessageMode>,
        seed: u64,
    ) -> Result<Self, GatewayError> {
        let arch = &checkpoint.policy.arch;
        let spec = env_config.spec();
        if (spec.n_agents, spec.obs_dim, spec.n_actions) != (arch.n_agents, arch.obs_dim, arch.n_actions) {
            return Err(GatewayError::BadRequest(format!(
                "environment dimensions {}×{} with {} actions do not fit the checkpoint ({}×{} with {})",
                spec.n_agents, spec.obs_dim, spec.n_actions, arch.n_agents, arch.obs_dim, arch.n_actions
            )));
        }
        if modes.len() != arch.n_agents {
            return Err(GatewayError::BadRequest(format!(
                "modes cover {} agents, the checkpoint has {}",
                modes.len(),
                arch.n_agents
            )));
        }
        if !arch.protocol.is_discrete() && modes.iter().any(|&m| m != MessageMode::Agent) {
            return Err(GatewayError::BadRequest(format!(
                "human and random modes need a discrete protocol, the checkpoint uses {}",
                arch.protocol
            )));
        }
        let env = env_config.make(eval_env_rng(seed, 0))?;
        Ok(Self {
            id,
            checkpoint,
            atlas,
            env_config,
            env,
            modes,
            random: stream(seed, stream_id(streams::RANDOM_MESSAGE, 0, 0)),
            seed,
            step_index: 0,
            cumulative_return: 0.0,
            last: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_config
    }

    fn protocol(&self) -> Protocol {
        self.checkpoint.policy.arch.protocol
    }

    /// Advance one joint step. `human_messages` must name exactly the
    /// human-mode agents; `expected_step` guards against stale submissions.
    pub fn step(
        &mut self,
        human_messages: &BTreeMap<usize, u64>,
        expected_step: Option<usize>,
    ) -> Result<StepOutcome, GatewayError> {
        if self.env.is_done() {
            return Err(GatewayError::Conflict("the episode has finished".into()));
        }
        if let Some(s) = expected_step {
            if s != self.step_index {
                return Err(GatewayError::Conflict(format!(
                    "step {s} was submitted but the session is at step {}",
                    self.step_index
                )));
            }
        }
        let protocol = self.protocol();
        for (&agent, &index) in human_messages {
            if self.modes.get(agent) != Some(&MessageMode::Human) {
                return Err(GatewayError::BadRequest(format!("agent {agent} is not under human control")));
            }
            if protocol.vocab_size().is_some_and(|v| index >= v) {
                return Err(GatewayError::BadRequest(format!(
                    "message {index} is outside the vocabulary of {protocol}"
                )));
            }
        }
        let overrides = self
            .modes
            .iter()
            .enumerate()
            .map(|(agent, mode)| match mode {
                MessageMode::Agent => Ok(None),
                MessageMode::Human => {
                    let index = human_messages.get(&agent).ok_or_else(|| {
                        GatewayError::BadRequest(format!("no message supplied for human agent {agent}"))
                    })?;
                    Ok(Some(protocol.encode(*index)?))
                }
                MessageMode::Random => Ok(Some(RandomMessages::draw(&protocol, &mut self.random)?)),
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;

        let spec = self.env.spec();
        let obs = Tensor::new([1, spec.n_agents, spec.obs_dim], self.env.observations()).map_err(CoreError::from)?;
        let any = overrides.iter().any(Option::is_some);
        let fwd = self
            .checkpoint
            .policy
            .forward(&obs, any.then_some(overrides.as_slice()))?;
        let actions = fwd.argmax_actions();
        let trace = fwd.step_trace(0);
        let result = self.env.step(&actions)?;

        self.last = Some(
            (0..spec.n_agents)
                .map(|i| {
                    let message = trace.m.as_ref().map(|m| m.row(i).to_vec()).unwrap_or_default();
                    Ok(AgentStep {
                        message_label: protocol
                            .is_discrete()
                            .then(|| protocol.decode(&message))
                            .transpose()?,
                        message,
                        attention: trace.w.as_ref().map(|w| w.row(i).to_vec()).unwrap_or_default(),
                        action: actions[i],
                    })
                })
                .collect::<Result<_, CoreError>>()?,
        );
        let taken = self.step_index;
        self.step_index += 1;
        self.cumulative_return += result.reward;
        Ok(StepOutcome {
            session_id: self.id.clone(),
            step_index: taken,
            reward: result.reward,
            done: result.done,
            cumulative_return: self.cumulative_return,
            state: self.view()?,
        })
    }

    pub fn view(&self) -> Result<SessionView, GatewayError> {
        let spec = self.env.spec();
        let obs = self.env.observations();
        let protocol = self.protocol();
        let agents = (0..spec.n_agents)
            .map(|i| {
                let observation = obs[i * spec.obs_dim..(i + 1) * spec.obs_dim].to_vec();
                let (projection, recommendation) = match &self.atlas {
                    Some(atlas) => (
                        Some(project_observation(atlas, &observation, ATLAS_K)?),
                        (self.modes[i] == MessageMode::Human)
                            .then(|| recommend_message(atlas, &observation, ATLAS_K))
                            .transpose()?,
                    ),
                    None => (None, None),
                };
                Ok(AgentView {
                    agent: i,
                    mode: self.modes[i],
                    observation,
                    last: self.last.as_ref().map(|l| l[i].clone()),
                    projection,
                    recommendation,
                })
            })
            .collect::<Result<_, CoreError>>()?;
        Ok(SessionView {
            session_id: self.id.clone(),
            checkpoint_id: self.checkpoint.manifest.id.clone(),
            protocol,
            vocab_size: protocol.vocab_size().filter(|_| protocol.is_discrete()),
            seed: self.seed,
            step_index: self.step_index,
            horizon: spec.horizon,
            done: self.env.is_done(),
            cumulative_return: self.cumulative_return,
            env: self.env.view(),
            agents,
            has_atlas: self.atlas.is_some(),
        })
    }
}

/// Apply a JSON object of field overrides to an environment configuration.
pub fn apply_env_overrides(base: &EnvConfig, overrides: &serde_json::Value) -> Result<EnvConfig, GatewayError> {
    let patch = match overrides {
        serde_json::Value::Null => return Ok(*base),
        serde_json::Value::Object(map) => map,
        _ => return Err(GatewayError::BadRequest("env_overrides must be an object".into())),
    };
    let mut value = serde_json::to_value(base).map_err(|e| GatewayError::Internal(e.to_string()))?;
    let target = value.as_object_mut().expect("env configs serialize as objects");
    for (k, v) in patch {
        if k == "name" && v.as_str() != Some(base.name()) {
            return Err(GatewayError::BadRequest("env_overrides cannot change the environment".into()));
        }
        if !target.contains_key(k) {
            return Err(GatewayError::BadRequest(format!("unknown environment field {k:?}")));
        }
        target.insert(k.clone(), v.clone());
    }
    let cfg: EnvConfig =
        serde_json::from_value(value).map_err(|e| GatewayError::BadRequest(format!("env_overrides: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcomm_core::envs::PredPreyConfig;
    use bcomm_core::trainer::{evaluate_policy, evaluate_with, init_params, TrainConfig};
    use bcomm_core::AttentionMode;

    fn checkpoint(protocol: Protocol) -> Arc<Checkpoint> {
        let env = EnvConfig::PredPrey(PredPreyConfig::default());
        let (policy, value) = init_params(&env, protocol, AttentionMode::Learned, &TrainConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        bcomm_core::checkpoint::save_checkpoint(&path, &policy, value.as_ref(), &env, 0, 0).unwrap();
        Arc::new(bcomm_core::checkpoint::load_checkpoint(&path).unwrap())
    }

    fn run(session: &mut Session, human: impl Fn(&SessionView) -> BTreeMap<usize, u64>) -> f64 {
        loop {
            let view = session.view().unwrap();
            let out = session.step(&human(&view), Some(view.step_index)).unwrap();
            if out.done {
                return out.cumulative_return;
            }
        }
    }

    #[test]
    fn agent_mode_replays_the_first_evaluation_episode() {
        let ck = checkpoint(Protocol::bitstring(2));
        let env = ck.manifest.env;
        let mut s = Session::new("s".into(), ck.clone(), None, env, vec![MessageMode::Agent; 4], 17).unwrap();
        let total = run(&mut s, |_| BTreeMap::new());
        assert_eq!(total, evaluate_policy(&env, &ck.policy, 1, 17).unwrap().mean_return);
    }

    #[test]
    fn random_mode_replays_random_evaluation() {
        let ck = checkpoint(Protocol::onehot(4));
        let env = ck.manifest.env;
        let modes = vec![MessageMode::Random, MessageMode::Agent, MessageMode::Agent, MessageMode::Random];
        let mut s = Session::new("s".into(), ck.clone(), None, env, modes, 3).unwrap();
        let total = run(&mut s, |_| BTreeMap::new());
        let mut sel = RandomMessages::new(ck.policy.arch.protocol, vec![0, 3], 3).unwrap();
        assert_eq!(total, evaluate_with(&env, &ck.policy, 1, 3, &mut sel).unwrap().mean_return);
    }

    #[test]
    fn echoing_the_network_message_is_the_agent_step() {
        let ck = checkpoint(Protocol::bitstring(3));
        let env = ck.manifest.env;
        let mut agent = Session::new("a".into(), ck.clone(), None, env, vec![MessageMode::Agent; 4], 5).unwrap();
        let modes = vec![MessageMode::Human, MessageMode::Agent, MessageMode::Agent, MessageMode::Agent];
        let mut human = Session::new("h".into(), ck.clone(), None, env, modes, 5).unwrap();
        loop {
            // The message agent 0 would have sent from this state.
            let view = human.view().unwrap();
            let obs: Vec<f64> = view.agents.iter().flat_map(|a| a.observation.clone()).collect();
            let fwd = ck.policy.forward(&Tensor::new([1, 4, obs.len() / 4], obs).unwrap(), None).unwrap();
            let own = ck.policy.arch.protocol.decode(fwd.m.as_ref().unwrap().row(0)).unwrap();
            let a = agent.step(&BTreeMap::new(), None).unwrap();
            let h = human.step(&BTreeMap::from([(0, own)]), None).unwrap();
            assert_eq!(a.reward, h.reward);
            assert_eq!(a.state.env, h.state.env);
            if a.done {
                break;
            }
        }
    }

    #[test]
    fn human_messages_are_validated() {
        let ck = checkpoint(Protocol::onehot(4));
        let env = ck.manifest.env;
        let modes = vec![MessageMode::Human, MessageMode::Agent, MessageMode::Agent, MessageMode::Agent];
        let mut s = Session::new("s".into(), ck, None, env, modes, 0).unwrap();
        let bad = [
            BTreeMap::new(),
            BTreeMap::from([(0, 4)]),
            BTreeMap::from([(0, 1), (1, 1)]),
        ];
        for h in &bad {
            assert!(matches!(s.step(h, None), Err(GatewayError::BadRequest(_))), "{h:?}");
        }
        assert!(matches!(s.step(&BTreeMap::from([(0, 1)]), Some(3)), Err(GatewayError::Conflict(_))));
        let out = s.step(&BTreeMap::from([(0, 3)]), Some(0)).unwrap();
        assert_eq!(out.state.agents[0].last.as_ref().unwrap().message, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(out.state.agents[0].last.as_ref().unwrap().message_label, Some(3));
        assert!(matches!(s.step(&BTreeMap::from([(0, 3)]), Some(0)), Err(GatewayError::Conflict(_))));
    }

    #[test]
    fn continuous_checkpoints_only_allow_agent_mode() {
        let ck = checkpoint(Protocol::continuous(4));
        let env = ck.manifest.env;
        let modes = vec![MessageMode::Random, MessageMode::Agent, MessageMode::Agent, MessageMode::Agent];
        assert!(Session::new("s".into(), ck.clone(), None, env, modes, 0).is_err());
        assert!(Session::new("s".into(), ck, None, env, vec![MessageMode::Agent; 3], 0).is_err());
    }

    #[test]
    fn finished_sessions_refuse_steps_but_stay_readable() {
        let ck = checkpoint(Protocol::bitstring(2));
        let env = apply_env_overrides(&ck.manifest.env, &serde_json::json!({"horizon": 3})).unwrap();
        let mut s = Session::new("s".into(), ck, None, env, vec![MessageMode::Agent; 4], 0).unwrap();
        run(&mut s, |_| BTreeMap::new());
        let v = s.view().unwrap();
        assert!(v.done);
        assert_eq!(v.step_index, 3);
        assert!(matches!(s.step(&BTreeMap::new(), None), Err(GatewayError::Conflict(_))));
    }

    #[test]
    fn env_overrides_are_checked() {
        let base = EnvConfig::PredPrey(PredPreyConfig::default());
        let cfg = apply_env_overrides(&base, &serde_json::json!({"step_cost": -0.2})).unwrap();
        let EnvConfig::PredPrey(pp) = cfg else { panic!() };
        assert_eq!(pp.step_cost, -0.2);
        assert_eq!(apply_env_overrides(&base, &serde_json::Value::Null).unwrap(), base);
        for bad in [
            serde_json::json!({"colour": 1}),
            serde_json::json!({"name": "levers"}),
            serde_json::json!({"horizon": "long"}),
            serde_json::json!([1]),
        ] {
            assert!(apply_env_overrides(&base, &bad).is_err(), "{bad}");
        }
    }
}
