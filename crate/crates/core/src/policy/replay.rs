//! Replay memory with optional proportional prioritization.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True only for genuine terminal states; time-limit truncation stays false.
    pub done: bool,
}

/// Binary tree of priority sums over a fixed-capacity ring.
#[derive(Clone, Debug)]
struct SumTree {
    capacity: usize,
    sums: Vec<f64>,
    mins: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let capacity = capacity.next_power_of_two();
        Self {
            capacity,
            sums: vec![0.0; 2 * capacity],
            mins: vec![f64::INFINITY; 2 * capacity],
        }
    }

    fn set(&mut self, index: usize, value: f64) {
        let mut node = index + self.capacity;
        self.sums[node] = value;
        self.mins[node] = value;
        while node > 1 {
            node /= 2;
            self.sums[node] = self.sums[2 * node] + self.sums[2 * node + 1];
            self.mins[node] = self.mins[2 * node].min(self.mins[2 * node + 1]);
        }
    }

    fn get(&self, index: usize) -> f64 {
        self.sums[index + self.capacity]
    }

    fn total(&self) -> f64 {
        self.sums[1]
    }

    fn min(&self) -> f64 {
        self.mins[1]
    }

    /// Leaf index whose cumulative-sum interval contains `mass`.
    fn find_prefix(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.capacity {
            let left = 2 * node;
            if mass < self.sums[left] {
                node = left;
            } else {
                mass -= self.sums[left];
                node = left + 1;
            }
        }
        node - self.capacity
    }
}

/// A sampled minibatch: buffer indices, importance weights and the transitions.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub transitions: Vec<&'a Transition>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    tree: Option<SumTree>,
    alpha: f64,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn uniform(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            tree: None,
            alpha: 0.0,
            max_priority: 1.0,
        }
    }

    pub fn prioritized(capacity: usize, alpha: f64) -> Self {
        Self {
            tree: Some(SumTree::new(capacity)),
            alpha,
            ..Self::uniform(capacity)
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_prioritized(&self) -> bool {
        self.tree.is_some()
    }

    /// New transitions enter with the largest priority seen so far.
    pub fn push(&mut self, transition: Transition) {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(transition);
        } else {
            self.items[slot] = transition;
        }
        self.next = (self.next + 1) % self.capacity;
        let p = self.max_priority.powf(self.alpha);
        if let Some(tree) = &mut self.tree {
            tree.set(slot, p);
        }
    }

    /// Sampling probability of slot `index`.
    pub fn probability(&self, index: usize) -> f64 {
        match &self.tree {
            Some(tree) => tree.get(index) / tree.total(),
            None => 1.0 / self.items.len() as f64,
        }
    }

    /// Draws `batch` indices. Prioritized buffers sample proportional to
    /// `priority^alpha` and return importance weights `(N P(i))^-beta`
    /// normalized by their maximum; uniform buffers return unit weights.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut impl Rng) -> Sample<'_> {
        assert!(!self.items.is_empty(), "sampling an empty replay buffer");
        let n = self.items.len();
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        match &self.tree {
            None => {
                for _ in 0..batch {
                    indices.push(rng.gen_range(0..n));
                    weights.push(1.0);
                }
            }
            Some(tree) => {
                let total = tree.total();
                let max_weight = (n as f64 * tree.min() / total).powf(-beta);
                for _ in 0..batch {
                    let mass = rng.gen::<f64>() * total;
                    let idx = tree.find_prefix(mass).min(n - 1);
                    let p = tree.get(idx) / total;
                    indices.push(idx);
                    weights.push((n as f64 * p).powf(-beta) / max_weight);
                }
            }
        }
        let transitions = indices.iter().map(|&i| &self.items[i]).collect();
        Sample {
            indices,
            weights,
            transitions,
        }
    }

    /// Sets raw priorities (before the `alpha` exponent). Non-positive values are floored.
    pub fn update_priorities(&mut self, indices: &[usize], priorities: &[f64]) {
        let Some(tree) = &mut self.tree else {
            return;
        };
        for (&i, &p) in indices.iter().zip(priorities) {
            let p = p.max(1e-6);
            self.max_priority = self.max_priority.max(p);
            tree.set(i, p.powf(self.alpha));
        }
    }
}
