use super::{EnvStep, Environment, TrainError};
use crate::sim::Action;

/// A small deterministic chain used to check that the learner converges to
/// the optimal policy of a known MDP.
///
/// States `0..len`, one-hot observed. `LaneRight` moves toward the goal at
/// `len - 1` (reward 1, terminal), `LaneLeft` moves back, `Faster` pays a
/// small bait reward without moving, and the rest stay put for nothing.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    len: usize,
    bait: f64,
    max_steps: u32,
    position: usize,
    steps: u32,
}

impl ChainMdp {
    pub const DEFAULT_LEN: usize = 5;
    pub const DEFAULT_BAIT: f64 = 0.05;
    pub const DEFAULT_MAX_STEPS: u32 = 50;

    pub fn new(len: usize, bait: f64, max_steps: u32) -> Self {
        assert!(len >= 2, "chain needs a start and a goal");
        Self {
            len,
            bait,
            max_steps,
            position: 0,
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bait(&self) -> f64 {
        self.bait
    }

    pub fn max_steps(&self) -> u32 {
        self.max_steps
    }

    pub fn goal(&self) -> usize {
        self.len - 1
    }

    /// `(next_state, reward, goal_reached)` from a non-goal `state`.
    pub fn transition(&self, state: usize, action: Action) -> (usize, f64, bool) {
        let next = match action {
            Action::LaneRight => state + 1,
            Action::LaneLeft => state.saturating_sub(1),
            _ => state,
        };
        if next == self.goal() {
            (next, 1.0, true)
        } else if action == Action::Faster {
            (next, self.bait, false)
        } else {
            (next, 0.0, false)
        }
    }

    pub fn one_hot(&self, state: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.len];
        obs[state] = 1.0;
        obs
    }
}

impl Default for ChainMdp {
    fn default() -> Self {
        Self::new(Self::DEFAULT_LEN, Self::DEFAULT_BAIT, Self::DEFAULT_MAX_STEPS)
    }
}

impl Environment for ChainMdp {
    fn observation_len(&self) -> usize {
        self.len
    }

    /// Starts in a non-goal state chosen by the seed.
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, TrainError> {
        self.position = (seed % self.goal() as u64) as usize;
        self.steps = 0;
        Ok(self.one_hot(self.position))
    }

    fn step(&mut self, action: Action) -> Result<EnvStep, TrainError> {
        let (next, reward, reached) = self.transition(self.position, action);
        self.position = next;
        self.steps += 1;
        Ok(EnvStep {
            observation: self.one_hot(next),
            reward,
            done: reached || self.steps >= self.max_steps,
        })
    }
}
