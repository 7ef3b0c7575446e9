use rand::Rng;

use super::PrioritizedTransition;

/// Binary sum tree over leaf weights.
#[derive(Debug, Clone)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut node = self.leaves + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass`.
    fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = self.nodes[2 * node];
            if mass < left || self.nodes[2 * node + 1] <= 0.0 {
                node *= 2;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        node - self.leaves
    }
}

/// Result of a prioritized draw.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    /// Importance weights normalized by the batch maximum.
    pub weights: Vec<f64>,
    pub transitions: Vec<PrioritizedTransition>,
}

/// Fixed-capacity FIFO replay with proportional prioritization.
#[derive(Debug, Clone)]
pub struct PrioritizedReplay {
    capacity: usize,
    alpha: f64,
    priority_eps: f64,
    slots: Vec<PrioritizedTransition>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
}

impl PrioritizedReplay {
    pub fn new(capacity: usize, alpha: f64, priority_eps: f64) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            alpha,
            priority_eps,
            slots: Vec::new(),
            next: 0,
            tree: SumTree::new(capacity),
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn get(&self, index: usize) -> &PrioritizedTransition {
        &self.slots[index]
    }

    /// Insert at the current maximum priority, evicting the oldest entry when full.
    pub fn push(&mut self, mut t: PrioritizedTransition) -> usize {
        t.priority = self.max_priority;
        let index = self.next;
        if self.slots.len() < self.capacity {
            self.slots.push(t);
        } else {
            self.slots[index] = t;
        }
        self.tree.set(index, self.max_priority.powf(self.alpha));
        self.next = (self.next + 1) % self.capacity;
        index
    }

    /// Explicitly set raw priorities (before the alpha power).
    pub fn set_priority(&mut self, index: usize, priority: f64) {
        assert!(priority > 0.0, "priorities must stay positive");
        self.slots[index].priority = priority;
        self.tree.set(index, priority.powf(self.alpha));
        self.max_priority = self.max_priority.max(priority);
    }

    /// `priority <- |td_error| + eps` for each sampled index.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) {
        for (&i, &td) in indices.iter().zip(td_errors) {
            self.set_priority(i, td.abs() + self.priority_eps);
        }
    }

    /// Probability of drawing `index`: `p_i^alpha / sum_j p_j^alpha`.
    pub fn probability(&self, index: usize) -> f64 {
        self.tree.get(index) / self.tree.total()
    }

    /// Draw `batch_size` indices independently (with replacement) in
    /// proportion to `p^alpha`, with weights `(N P(i))^-beta / max`.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, beta: f64, rng: &mut R) -> SampledBatch {
        assert!(!self.is_empty(), "cannot sample an empty replay buffer");
        let total = self.tree.total();
        let n = self.len() as f64;
        let mut indices = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mass = rng.random::<f64>() * total;
            let i = self.tree.find(mass).min(self.len() - 1);
            indices.push(i);
        }
        let raw: Vec<f64> = indices
            .iter()
            .map(|&i| (n * self.probability(i)).powf(-beta))
            .collect();
        let max = raw.iter().cloned().fold(f64::MIN, f64::max);
        let weights = raw.iter().map(|w| w / max).collect();
        let transitions = indices.iter().map(|&i| self.slots[i].clone()).collect();
        SampledBatch {
            indices,
            weights,
            transitions,
        }
    }
}
