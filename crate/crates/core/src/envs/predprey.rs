//! Predator-Prey on a square grid.
//!
//! Predators are the learning agents. A prey is captured when a predator
//! issues `Capture` while at least two predators sit in the prey's
//! 4-neighbourhood; a capture with a lone adjacent predator is penalized.
//! Prey flee from the nearest predator they can see.

use bcomm_grad::rng::Rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EnvSpec, EnvView, MultiAgentEnv, StepResult};
use crate::CoreError;

/// `(row, col)` grid position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    fn chebyshev(self, other: Cell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    fn offset(self, dr: isize, dc: isize, grid: usize) -> Option<Cell> {
        let r = self.row as isize + dr;
        let c = self.col as isize + dc;
        (r >= 0 && c >= 0 && (r as usize) < grid && (c as usize) < grid)
            .then(|| Cell::new(r as usize, c as usize))
    }

    fn neighbours(self, grid: usize) -> impl Iterator<Item = Cell> {
        [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .filter_map(move |(dr, dc)| self.offset(dr, dc, grid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Move {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
    Capture = 5,
}

impl Move {
    pub const COUNT: usize = 6;

    pub fn from_index(a: usize) -> Option<Move> {
        Some(match a {
            0 => Move::Up,
            1 => Move::Down,
            2 => Move::Left,
            3 => Move::Right,
            4 => Move::Stay,
            5 => Move::Capture,
            _ => return None,
        })
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Move::Up => (-1, 0),
            Move::Down => (1, 0),
            Move::Left => (0, -1),
            Move::Right => (0, 1),
            Move::Stay | Move::Capture => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredPreyConfig {
    pub grid: usize,
    pub predators: usize,
    pub prey: usize,
    pub vision: usize,
    pub capture_reward: f64,
    pub attempt_penalty: f64,
    pub step_cost: f64,
    pub horizon: usize,
    pub agents_visible: bool,
}

impl Default for PredPreyConfig {
    fn default() -> Self {
        Self {
            grid: 7,
            predators: 4,
            prey: 4,
            vision: 2,
            capture_reward: 10.0,
            attempt_penalty: -0.5,
            step_cost: -0.1,
            horizon: 50,
            agents_visible: false,
        }
    }
}

impl PredPreyConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.grid < 3 || self.vision < 1 || self.predators == 0 || self.horizon == 0 {
            return Err(CoreError::invalid(format!(
                "predprey needs grid >= 3, vision >= 1, predators >= 1, horizon >= 1: {self:?}"
            )));
        }
        if self.predators + self.prey > self.grid * self.grid {
            return Err(CoreError::invalid(format!(
                "{} entities do not fit on a {}x{} grid",
                self.predators + self.prey,
                self.grid,
                self.grid
            )));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        2 * self.vision + 1
    }

    /// `3 (2v+1)² + 2`.
    pub fn obs_dim(&self) -> usize {
        3 * self.window() * self.window() + 2
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: self.predators,
            obs_dim: self.obs_dim(),
            n_actions: Move::COUNT,
            state_dim: 2 * self.grid * self.grid + 1,
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredPreyState {
    pub predators: Vec<Cell>,
    /// Live prey only.
    pub prey: Vec<Cell>,
    pub step: usize,
    pub rng: Rng,
}

impl PredPreyState {
    fn occupied(&self, cell: Cell) -> bool {
        self.predators.contains(&cell) || self.prey.contains(&cell)
    }

    fn adjacent_predators(&self, prey: Cell) -> usize {
        self.predators
            .iter()
            .filter(|p| p.manhattan(prey) == 1)
            .count()
    }
}

/// Breakdown of one transition's team reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredPreyStep {
    pub reward: f64,
    pub captures: usize,
    pub failed_attempts: usize,
    pub done: bool,
}

/// Place every entity on a distinct uniformly random cell.
pub fn predprey_reset(
    config: &PredPreyConfig,
    mut rng: Rng,
) -> Result<(PredPreyState, Vec<Vec<f64>>), CoreError> {
    config.validate()?;
    let g = config.grid;
    let cells = rand::seq::index::sample(&mut rng, g * g, config.predators + config.prey);
    let mut cells = cells.into_iter().map(|i| Cell::new(i / g, i % g));
    let predators = cells.by_ref().take(config.predators).collect();
    let prey = cells.collect();
    let state = PredPreyState {
        predators,
        prey,
        step: 0,
        rng,
    };
    let obs = (0..config.predators)
        .map(|i| predprey_observe(&state, i, config))
        .collect();
    Ok((state, obs))
}

/// Prey window, predator window (zero unless agents are visible), out-of-bounds
/// mask, then the agent's own position scaled to `[0, 1]²`.
pub fn predprey_observe(state: &PredPreyState, agent: usize, config: &PredPreyConfig) -> Vec<f64> {
    let win = config.window();
    let area = win * win;
    let v = config.vision as isize;
    let me = state.predators[agent];
    let mut obs = vec![0.0; 3 * area + 2];
    for dr in -v..=v {
        for dc in -v..=v {
            let k = ((dr + v) as usize) * win + (dc + v) as usize;
            match me.offset(dr, dc, config.grid) {
                None => obs[2 * area + k] = 1.0,
                Some(cell) => {
                    if state.prey.contains(&cell) {
                        obs[k] = 1.0;
                    }
                    if config.agents_visible
                        && state
                            .predators
                            .iter()
                            .enumerate()
                            .any(|(j, p)| j != agent && *p == cell)
                    {
                        obs[area + k] = 1.0;
                    }
                }
            }
        }
    }
    let scale = (config.grid - 1) as f64;
    obs[3 * area] = me.row as f64 / scale;
    obs[3 * area + 1] = me.col as f64 / scale;
    obs
}

/// One joint transition.
///
/// Capture actions are judged against the positions the agents observed
/// (before anyone moves), processed in a shuffled agent order; then
/// predators move in a shuffled order, blocked moves becoming stays; the step
/// cost is charged; finally surviving prey take their evasive move.
pub fn predprey_step(
    config: &PredPreyConfig,
    state: &mut PredPreyState,
    actions: &[usize],
) -> Result<PredPreyStep, CoreError> {
    if actions.len() != config.predators {
        return Err(CoreError::invalid(format!(
            "expected {} actions, got {}",
            config.predators,
            actions.len()
        )));
    }
    if state.step >= config.horizon || state.prey.is_empty() {
        return Err(CoreError::State("predprey episode already finished".into()));
    }
    let moves: Vec<Move> = actions
        .iter()
        .map(|&a| {
            Move::from_index(a).ok_or_else(|| CoreError::invalid(format!("invalid action {a}")))
        })
        .collect::<Result<_, _>>()?;

    let mut order: Vec<usize> = (0..config.predators).collect();
    order.shuffle(&mut state.rng);

    let mut report = PredPreyStep {
        reward: 0.0,
        captures: 0,
        failed_attempts: 0,
        done: false,
    };

    for &i in &order {
        if moves[i] != Move::Capture {
            continue;
        }
        let me = state.predators[i];
        let adjacent: Vec<usize> = (0..state.prey.len())
            .filter(|&k| state.prey[k].manhattan(me) == 1)
            .collect();
        if adjacent.is_empty() {
            continue;
        }
        match adjacent
            .iter()
            .find(|&&k| state.adjacent_predators(state.prey[k]) >= 2)
        {
            Some(&k) => {
                state.prey.remove(k);
                report.captures += 1;
                report.reward += config.capture_reward;
            }
            None => {
                report.failed_attempts += 1;
                report.reward += config.attempt_penalty;
            }
        }
    }

    for &i in &order {
        let (dr, dc) = moves[i].delta();
        if (dr, dc) == (0, 0) {
            continue;
        }
        if let Some(target) = state.predators[i].offset(dr, dc, config.grid) {
            if !state.occupied(target) {
                state.predators[i] = target;
            }
        }
    }

    report.reward += config.step_cost;

    let mut prey_order: Vec<usize> = (0..state.prey.len()).collect();
    prey_order.shuffle(&mut state.rng);
    for k in prey_order {
        let here = state.prey[k];
        let mut options = vec![here];
        options.extend(
            here.neighbours(config.grid)
                .filter(|&c| !state.occupied(c)),
        );
        let visible: Vec<Cell> = state
            .predators
            .iter()
            .copied()
            .filter(|p| p.chebyshev(here) <= config.vision)
            .collect();
        let choice = if visible.is_empty() {
            options[state.rng.random_range(0..options.len())]
        } else {
            let safety = |c: Cell| visible.iter().map(|p| p.manhattan(c)).min().unwrap_or(0);
            let best = options.iter().map(|&c| safety(c)).max().unwrap_or(0);
            let top: Vec<Cell> = options.into_iter().filter(|&c| safety(c) == best).collect();
            top[state.rng.random_range(0..top.len())]
        };
        state.prey[k] = choice;
    }

    state.step += 1;
    report.done = state.step >= config.horizon || state.prey.is_empty();
    Ok(report)
}

pub struct PredPrey {
    config: PredPreyConfig,
    state: PredPreyState,
    last: Option<PredPreyStep>,
}

impl PredPrey {
    pub fn new(config: PredPreyConfig, rng: Rng) -> Result<Self, CoreError> {
        let (state, _) = predprey_reset(&config, rng)?;
        Ok(Self {
            config,
            state,
            last: None,
        })
    }

    pub fn state(&self) -> &PredPreyState {
        &self.state
    }

    pub fn last_step(&self) -> Option<PredPreyStep> {
        self.last
    }
}

impl MultiAgentEnv for PredPrey {
    fn spec(&self) -> EnvSpec {
        self.config.spec()
    }

    fn observations(&self) -> Vec<f64> {
        (0..self.config.predators)
            .flat_map(|i| predprey_observe(&self.state, i, &self.config))
            .collect()
    }

    fn global_state(&self) -> Vec<f64> {
        let g = self.config.grid;
        let mut s = vec![0.0; 2 * g * g + 1];
        for p in &self.state.predators {
            s[p.row * g + p.col] = 1.0;
        }
        for q in &self.state.prey {
            s[g * g + q.row * g + q.col] = 1.0;
        }
        s[2 * g * g] = self.state.step as f64 / self.config.horizon as f64;
        s
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, CoreError> {
        let r = predprey_step(&self.config, &mut self.state, actions)?;
        self.last = Some(r);
        Ok(StepResult {
            reward: r.reward,
            done: r.done,
        })
    }

    fn is_done(&self) -> bool {
        self.state.step >= self.config.horizon || self.state.prey.is_empty()
    }

    fn view(&self) -> EnvView {
        EnvView::PredPrey {
            grid: self.config.grid,
            step: self.state.step,
            predators: self.state.predators.clone(),
            prey: self.state.prey.clone(),
        }
    }

    fn normalized_return(&self, _total: f64) -> Option<f64> {
        None
    }
}
