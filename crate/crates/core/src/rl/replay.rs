use rand::Rng;

use super::Transition;

/// Fixed-capacity FIFO ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Total pushes so far; `inserted % capacity` is the next slot once full.
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        }
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

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, transition: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(transition);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = transition;
        }
        self.inserted += 1;
    }

    /// Contents from oldest to newest.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            (self.inserted % self.capacity as u64) as usize
        };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices(&self, count: usize, rng: &mut impl Rng) -> Vec<usize> {
        assert!(!self.items.is_empty(), "cannot sample an empty buffer");
        (0..count).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        self.sample_indices(count, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}
