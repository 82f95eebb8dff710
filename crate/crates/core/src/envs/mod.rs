//! Cooperative multi-agent environments sharing one team reward.

mod levers;
mod predprey;

pub use levers::{
    expected_random_return, levers_reset, levers_step, Levers, LeversConfig, LeversState,
};
pub use predprey::{
    predprey_observe, predprey_reset, predprey_step, Cell, Move, PredPrey, PredPreyConfig,
    PredPreyState, PredPreyStep,
};

use bcomm_grad::rng::Rng;
use serde::{Deserialize, Serialize};

use crate::CoreError;

/// Static dimensions of an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub state_dim: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
}

/// Renderable snapshot of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "lowercase")]
pub enum EnvView {
    Levers {
        round: usize,
        participants: Vec<usize>,
    },
    PredPrey {
        grid: usize,
        step: usize,
        predators: Vec<Cell>,
        prey: Vec<Cell>,
    },
}

pub trait MultiAgentEnv: Send {
    fn spec(&self) -> EnvSpec;
    /// Row-major `n_agents × obs_dim` observations of the current state.
    fn observations(&self) -> Vec<f64>;
    fn global_state(&self) -> Vec<f64>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult, CoreError>;
    fn is_done(&self) -> bool;
    fn view(&self) -> EnvView;
    /// Episode return rescaled to a per-round figure where that is meaningful.
    fn normalized_return(&self, total: f64) -> Option<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvConfig {
    Levers(LeversConfig),
    PredPrey(PredPreyConfig),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Levers(_) => "levers",
            EnvConfig::PredPrey(_) => "predprey",
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        match self {
            EnvConfig::Levers(c) => c.validate(),
            EnvConfig::PredPrey(c) => c.validate(),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            EnvConfig::Levers(c) => c.spec(),
            EnvConfig::PredPrey(c) => c.spec(),
        }
    }

    /// A freshly reset environment driven by `rng`.
    pub fn make(&self, rng: Rng) -> Result<Box<dyn MultiAgentEnv>, CoreError> {
        Ok(match self {
            EnvConfig::Levers(c) => Box::new(Levers::new(*c, rng)?),
            EnvConfig::PredPrey(c) => Box::new(PredPrey::new(*c, rng)?),
        })
    }
}
