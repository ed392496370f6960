use rand::{Rng, RngCore};

use super::{Env, Outcome, State, StepResult};
use crate::error::Result;

/// `size x size` grid, start in the bottom-left corner, goal in the top-right.
/// A 2-d action is thresholded to a move along its larger-magnitude axis
/// (sign picks the direction). With probability `slip` the wind pushes the
/// agent one cell north instead. Each move costs `step_cost`; entering the
/// goal pays `goal_reward` and ends the episode.
#[derive(Clone, Debug)]
pub struct WindyGrid {
    size: usize,
    slip: f64,
    step_cost: f64,
    goal_reward: f64,
    gamma: f64,
}

impl Default for WindyGrid {
    fn default() -> Self {
        Self { size: 5, slip: 0.2, step_cost: -0.05, goal_reward: 1.0, gamma: 0.9 }
    }
}

const MOVES: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

impl WindyGrid {
    fn cell(&self, s: State) -> (i64, i64) {
        ((s % self.size) as i64, (s / self.size) as i64)
    }

    fn index(&self, x: i64, y: i64) -> State {
        let m = self.size as i64 - 1;
        (y.clamp(0, m) as usize) * self.size + x.clamp(0, m) as usize
    }

    fn goal(&self) -> State {
        self.size * self.size - 1
    }

    /// Move index for a box action.
    pub fn move_of(a: &[f64]) -> usize {
        if a[0].abs() >= a[1].abs() {
            if a[0] >= 0.0 {
                0
            } else {
                1
            }
        } else if a[1] >= 0.0 {
            2
        } else {
            3
        }
    }

    fn arrive(&self, s: State, dir: (i64, i64)) -> (State, f64, bool) {
        let (x, y) = self.cell(s);
        let next = self.index(x + dir.0, y + dir.1);
        if next == self.goal() {
            (self.terminal_state(), self.goal_reward, true)
        } else {
            (next, self.step_cost, false)
        }
    }
}

impl Env for WindyGrid {
    fn id(&self) -> &str {
        "windy-grid"
    }

    fn n_states(&self) -> usize {
        // the goal cell is never occupied; index `size^2` is the absorbing state
        self.size * self.size + 1
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (self.step_cost.min(0.0), self.goal_reward.max(0.0))
    }

    fn start_state(&self) -> State {
        0
    }

    fn terminal_state(&self) -> State {
        self.size * self.size
    }

    fn discrete_actions(&self) -> Option<Vec<Vec<f64>>> {
        Some(MOVES.iter().map(|&(dx, dy)| vec![dx as f64, dy as f64]).collect())
    }

    fn outcomes(&self, s: State, a: &[f64]) -> Option<Vec<Outcome>> {
        if s == self.terminal_state() {
            return Some(vec![Outcome { prob: 1.0, reward: 0.0, next: s, terminal: true }]);
        }
        let intended = self.arrive(s, MOVES[Self::move_of(a)]);
        let windy = self.arrive(s, (0, 1));
        let mk = |prob, (next, reward, terminal)| Outcome { prob, reward, next, terminal };
        if intended.0 == windy.0 {
            return Some(vec![mk(1.0, intended)]);
        }
        Some(vec![mk(1.0 - self.slip, intended), mk(self.slip, windy)])
    }

    fn step(&self, s: State, a: &[f64], rng: &mut dyn RngCore) -> Result<StepResult> {
        self.check_action(a)?;
        if s == self.terminal_state() {
            return Ok(StepResult { next: s, reward: 0.0, terminal: true });
        }
        let dir = if rng.random::<f64>() < self.slip { (0, 1) } else { MOVES[Self::move_of(a)] };
        let (next, reward, terminal) = self.arrive(s, dir);
        Ok(StepResult { next, reward, terminal })
    }

    fn snap_action(&self, a: &[f64]) -> Vec<f64> {
        let (dx, dy) = MOVES[Self::move_of(a)];
        vec![dx as f64, dy as f64]
    }
}
