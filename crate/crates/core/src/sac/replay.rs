use rand::Rng;

use crate::error::{Error, Result};

/// One environment transition. `obs` and `next_obs` are whatever compact
/// handle the environment uses to regenerate observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<K> {
    pub obs: K,
    pub intention: usize,
    pub action: usize,
    pub reward: f32,
    pub next_obs: K,
    /// True only for terminal transitions; time-limit truncation bootstraps.
    pub done: bool,
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<K> {
    items: Vec<Transition<K>>,
    capacity: usize,
    cursor: usize,
    actions: usize,
}

impl<K> ReplayBuffer<K> {
    pub fn new(capacity: usize, actions: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("sac.capacity: must be at least 1".into()));
        }
        Ok(ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, evicting the oldest entry once full.
    pub fn push(&mut self, t: Transition<K>) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::NonFinite {
                what: format!("reward {} pushed to replay", t.reward),
            });
        }
        if t.action >= self.actions {
            return Err(Error::LabelOutOfRange {
                label: t.action,
                classes: self.actions,
            });
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// The `i`-th stored transition counting from the oldest.
    pub fn get(&self, i: usize) -> Option<&Transition<K>> {
        if i >= self.items.len() {
            return None;
        }
        let start = if self.items.len() < self.capacity { 0 } else { self.cursor };
        Some(&self.items[(start + i) % self.items.len()])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<K>> {
        (0..self.len()).map(|i| self.get(i).expect("index in range"))
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Transition<K>>> {
        if self.items.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(v: usize) -> Transition<usize> {
        Transition {
            obs: v,
            intention: 0,
            action: 0,
            reward: 0.0,
            next_obs: v + 1,
            done: false,
        }
    }

    #[test]
    fn fifo_eviction_keeps_order() {
        let mut b = ReplayBuffer::new(5, 2).unwrap();
        for v in 0..8 {
            b.push(tr(v)).unwrap();
        }
        assert_eq!(b.len(), 5);
        let kept: Vec<usize> = b.iter().map(|t| t.obs).collect();
        assert_eq!(kept, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn rejects_bad_transitions() {
        let mut b = ReplayBuffer::new(2, 2).unwrap();
        assert!(b.push(Transition { reward: f32::NAN, ..tr(0) }).is_err());
        assert!(b.push(Transition { action: 2, ..tr(0) }).is_err());
        assert!(b.is_empty());
        assert!(b.sample(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sampling_covers_buffer() {
        let mut b = ReplayBuffer::new(4, 1).unwrap();
        for v in 0..4 {
            b.push(tr(v)).unwrap();
        }
        let mut seen = [0usize; 4];
        for t in b.sample(4000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap() {
            seen[t.obs] += 1;
        }
        assert!(seen.iter().all(|&c| (900..1100).contains(&c)), "{seen:?}");
    }
}
