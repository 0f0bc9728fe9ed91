//! Replay storage and the running statistics behind the stage switch.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Action;

/// One environment step.
///
/// `a_g` is the action the learning agent proposed. When a supervisor took
/// over, `a_h` carries the action that was executed instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub a_g: Action,
    pub a_h: Option<Action>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// The step ended the episode in a state that does not bootstrap.
    pub done: bool,
}

impl Transition {
    pub fn intervened(&self) -> bool {
        self.a_h.is_some()
    }

    /// The action the environment actually received.
    pub fn executed(&self) -> Action {
        self.a_h.unwrap_or(self.a_g)
    }
}

/// Fixed-capacity ring buffer; the oldest entry is overwritten when full.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    head: usize,
    inserted: u64,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            head: 0,
            inserted: 0,
        }
    }

    /// Rebuilds a buffer from its parts, as written by a checkpoint.
    pub fn from_parts(capacity: usize, items: Vec<T>, head: usize, inserted: u64) -> Option<Self> {
        if capacity == 0 || items.len() > capacity || head >= capacity.max(1) || (items.len() < capacity && head != items.len() % capacity) {
            return None;
        }
        Some(Self {
            capacity,
            items,
            head,
            inserted,
        })
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
        }
        self.head = (self.head + 1) % self.capacity;
        self.inserted += 1;
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

    /// Total pushes ever made, including evicted entries.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Slot the next push writes to.
    pub fn head(&self) -> usize {
        self.head
    }

    /// Storage order (not insertion order once wrapped).
    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// Entries from oldest to newest.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.head };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }
}

/// The novice buffer (every step) and the human buffer (takeover steps only).
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffers {
    pub novice: RingBuffer<Transition>,
    pub human: RingBuffer<Transition>,
}

impl ReplayBuffers {
    pub fn new(novice_capacity: usize, human_capacity: usize) -> Self {
        Self {
            novice: RingBuffer::new(novice_capacity),
            human: RingBuffer::new(human_capacity),
        }
    }

    pub fn record(&mut self, t: Transition) {
        if t.intervened() {
            self.human.push(t.clone());
        }
        self.novice.push(t);
    }
}

/// Running mean over the most recent `capacity` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    capacity: usize,
    values: VecDeque<f64>,
}

impl Window {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Mean of the stored values; NaN when empty.
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }
}

/// Statistics watched by the stage-transition test.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStats {
    /// Mean `Z^c` spread per update batch.
    pub sigma_c: Window,
    /// `-log pi^g` of the agent's proposed action per step.
    pub nll: Window,
    pub env_steps: u64,
}

impl StageStats {
    pub fn new(window: usize) -> Self {
        Self {
            sigma_c: Window::new(window),
            nll: Window::new(window),
            env_steps: 0,
        }
    }

    pub fn sigma_mean_c(&self) -> f64 {
        self.sigma_c.mean()
    }

    pub fn mean_nll(&self) -> f64 {
        self.nll.mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub theta_c: f64,
    pub kappa: f64,
    pub n_g: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            theta_c: 2.0,
            kappa: 2.5,
            n_g: 30_000,
        }
    }
}

/// All three stage-switch conditions, each a strict inequality. Empty windows
/// never pass.
pub fn transition_ready(stats: &StageStats, th: &Thresholds) -> bool {
    !stats.sigma_c.is_empty()
        && !stats.nll.is_empty()
        && stats.sigma_mean_c() < th.theta_c
        && stats.mean_nll() < th.kappa
        && stats.env_steps > th.n_g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(i: usize, intervened: bool) -> Transition {
        Transition {
            obs: vec![i as f64],
            a_g: [0.0, 0.0],
            a_h: intervened.then_some([1.0, 0.0]),
            reward: i as f64,
            next_obs: vec![i as f64 + 1.0],
            done: false,
        }
    }

    #[test]
    fn record_routes_by_intervention() {
        let mut b = ReplayBuffers::new(8, 4);
        b.record(t(0, false));
        assert_eq!((b.novice.len(), b.human.len()), (1, 0));
        b.record(t(1, true));
        assert_eq!((b.novice.len(), b.human.len()), (2, 1));
        assert!(b.human.items().iter().all(Transition::intervened));
    }

    #[test]
    fn overflow_matches_queue_model() {
        let cap = 5;
        let mut ring = RingBuffer::new(cap);
        let mut model: VecDeque<usize> = VecDeque::new();
        for i in 0..2 * cap + 3 {
            ring.push(i);
            model.push_back(i);
            if model.len() > cap {
                model.pop_front();
            }
            assert_eq!(ring.iter_ordered().copied().collect::<Vec<_>>(), Vec::from(model.clone()));
            assert_eq!(ring.inserted(), i as u64 + 1);
        }
    }

    #[test]
    fn transition_boundaries() {
        let th = Thresholds::default();
        let mut s = StageStats::new(10);
        assert!(!transition_ready(&s, &th));
        s.sigma_c.push(1.0);
        s.nll.push(1.0);
        s.env_steps = th.n_g;
        assert!(!transition_ready(&s, &th));
        s.env_steps = th.n_g + 1;
        assert!(transition_ready(&s, &th));
        s.sigma_c = Window::new(10);
        s.sigma_c.push(th.theta_c);
        assert!(!transition_ready(&s, &th));
    }
}
