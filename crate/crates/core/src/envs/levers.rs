//! Pulling Levers: each round `n` agents are drawn from `N` participants and
//! each pulls one of `n` levers; the round pays the fraction of distinct
//! levers pulled.

use bcomm_grad::rng::Rng;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{EnvSpec, EnvView, MultiAgentEnv, StepResult};
use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeversConfig {
    pub levers: usize,
    pub participants: usize,
    pub rounds: usize,
}

impl Default for LeversConfig {
    fn default() -> Self {
        Self {
            levers: 5,
            participants: 20,
            rounds: 50,
        }
    }
}

impl LeversConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.levers == 0 || self.participants < self.levers || self.rounds == 0 {
            return Err(CoreError::invalid(format!(
                "levers config needs 1 <= n <= N and rounds >= 1, got n={} N={} rounds={}",
                self.levers, self.participants, self.rounds
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: self.levers,
            obs_dim: self.participants,
            n_actions: self.levers,
            state_dim: self.levers * self.participants,
            horizon: self.rounds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeversState {
    pub round: usize,
    pub participants: Vec<usize>,
    pub rng: Rng,
}

/// `1 − ((n−1)/n)^n`: expected per-round reward of uniformly random pulls.
pub fn expected_random_return(n: usize) -> f64 {
    assert!(n >= 1);
    let n = n as f64;
    1.0 - ((n - 1.0) / n).powf(n)
}

fn observe(config: &LeversConfig, participants: &[usize]) -> Vec<Vec<f64>> {
    participants
        .iter()
        .map(|&id| {
            let mut o = vec![0.0; config.participants];
            o[id] = 1.0;
            o
        })
        .collect()
}

fn draw(config: &LeversConfig, rng: &mut Rng) -> Vec<usize> {
    sample(rng, config.participants, config.levers).into_vec()
}

pub fn levers_reset(config: &LeversConfig, mut rng: Rng) -> (LeversState, Vec<Vec<f64>>) {
    let participants = draw(config, &mut rng);
    let obs = observe(config, &participants);
    (
        LeversState {
            round: 0,
            participants,
            rng,
        },
        obs,
    )
}

/// Pay `|unique(actions)| / n`, then draw the next round's participants.
pub fn levers_step(
    config: &LeversConfig,
    state: &mut LeversState,
    actions: &[usize],
) -> Result<(f64, Vec<Vec<f64>>, bool), CoreError> {
    let n = config.levers;
    if actions.len() != n {
        return Err(CoreError::invalid(format!(
            "expected {n} actions, got {}",
            actions.len()
        )));
    }
    if state.round >= config.rounds {
        return Err(CoreError::State("levers episode already finished".into()));
    }
    let mut pulled = vec![false; n];
    for &a in actions {
        if a >= n {
            return Err(CoreError::invalid(format!("lever {a} out of range 0..{n}")));
        }
        pulled[a] = true;
    }
    let reward = pulled.iter().filter(|&&p| p).count() as f64 / n as f64;
    state.round += 1;
    state.participants = draw(config, &mut state.rng);
    let done = state.round >= config.rounds;
    Ok((reward, observe(config, &state.participants), done))
}

pub struct Levers {
    config: LeversConfig,
    state: LeversState,
}

impl Levers {
    pub fn new(config: LeversConfig, rng: Rng) -> Result<Self, CoreError> {
        config.validate()?;
        let (state, _) = levers_reset(&config, rng);
        Ok(Self { config, state })
    }

    pub fn state(&self) -> &LeversState {
        &self.state
    }
}

impl MultiAgentEnv for Levers {
    fn spec(&self) -> EnvSpec {
        self.config.spec()
    }

    fn observations(&self) -> Vec<f64> {
        observe(&self.config, &self.state.participants).concat()
    }

    fn global_state(&self) -> Vec<f64> {
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, CoreError> {
        let (reward, _, done) = levers_step(&self.config, &mut self.state, actions)?;
        Ok(StepResult { reward, done })
    }

    fn is_done(&self) -> bool {
        self.state.round >= self.config.rounds
    }

    fn view(&self) -> EnvView {
        EnvView::Levers {
            round: self.state.round,
            participants: self.state.participants.clone(),
        }
    }

    fn normalized_return(&self, total: f64) -> Option<f64> {
        Some(total / self.config.rounds as f64)
    }
}
