//! Five-state deterministic chain: move left or right, reward 1 on reaching
//! the rightmost (terminal) state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvStep, Environment};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const STATES: usize = 5;
pub const GOAL: usize = STATES - 1;
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

#[derive(Clone, Debug)]
pub struct ChainEnv {
    pub state: usize,
    pub t: usize,
    pub max_steps: usize,
    done: bool,
}

impl ChainEnv {
    pub fn new(max_steps: usize) -> Self {
        ChainEnv {
            state: 0,
            t: 0,
            max_steps,
            done: true,
        }
    }
}

/// Deterministic successor of `s` under action `a`.
pub fn next_state(s: usize, a: usize) -> usize {
    match a {
        LEFT => s.saturating_sub(1),
        _ => (s + 1).min(GOAL),
    }
}

/// Optimal action values by value iteration; the goal row stays zero.
pub fn value_iteration(gamma: f64) -> [[f64; 2]; STATES] {
    let mut q = [[0.0f64; 2]; STATES];
    for _ in 0..10_000 {
        let mut next = q;
        for s in 0..GOAL {
            for a in [LEFT, RIGHT] {
                let s2 = next_state(s, a);
                next[s][a] = if s2 == GOAL {
                    1.0
                } else {
                    gamma * q[s2][LEFT].max(q[s2][RIGHT])
                };
            }
        }
        if next == q {
            break;
        }
        q = next;
    }
    q
}

pub fn one_hot(s: usize) -> Tensor {
    let mut v = vec![0.0; STATES];
    v[s] = 1.0;
    Tensor::new([STATES], v).expect("static shape")
}

impl Environment for ChainEnv {
    type Key = usize;

    fn num_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Result<(usize, usize)> {
        self.state = ChaCha8Rng::seed_from_u64(seed).gen_range(0..GOAL);
        self.t = 0;
        self.done = false;
        Ok((self.state, 0))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep<usize>> {
        if self.done {
            return Err(Error::Protocol("step called on a finished episode; reset first".into()));
        }
        if action > RIGHT {
            return Err(Error::LabelOutOfRange { label: action, classes: 2 });
        }
        self.state = next_state(self.state, action);
        self.t += 1;
        let terminal = self.state == GOAL;
        let truncated = !terminal && self.t >= self.max_steps;
        self.done = terminal || truncated;
        Ok(EnvStep {
            next: self.state,
            reward: if terminal { 1.0 } else { 0.0 },
            terminal,
            truncated,
            success: terminal,
        })
    }

    fn materialize(&self, key: &usize) -> Result<Tensor> {
        Ok(one_hot(*key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_iteration_closed_form() {
        let q = value_iteration(0.99);
        for s in 0..GOAL {
            let want = 0.99f64.powi((GOAL - 1 - s) as i32);
            assert!((q[s][RIGHT] - want).abs() < 1e-12, "state {s}");
            assert!(q[s][LEFT] < q[s][RIGHT]);
        }
    }
}
