//! FIFO buffer of detached student features and gradient elements that
//! supplies negatives.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elements::ElementKind;
use crate::error::{CrcdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// The most recent eligible entries.
    Queue,
    /// Uniform without replacement.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub sample_id: usize,
    pub feature: Array1<f64>,
    pub gradient: Array1<f64>,
    /// Global insertion counter.
    pub age: u64,
    /// Index of the `push_batch` call that inserted the entry.
    pub batch: u64,
}

impl QueueEntry {
    pub fn element(&self, e: ElementKind) -> &Array1<f64> {
        match e {
            ElementKind::Feature => &self.feature,
            ElementKind::Gradient => &self.gradient,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayQueue {
    capacity: usize,
    feature_dim: usize,
    gradient_dim: usize,
    policy: SamplingPolicy,
    entries: VecDeque<QueueEntry>,
    inserted: u64,
    batches: u64,
    rng: ChaCha8Rng,
}

impl ReplayQueue {
    pub fn new(
        capacity: usize,
        feature_dim: usize,
        gradient_dim: usize,
        policy: SamplingPolicy,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(CrcdError::config("queue capacity must be positive"));
        }
        Ok(Self {
            capacity,
            feature_dim,
            gradient_dim,
            policy,
            entries: VecDeque::with_capacity(capacity),
            inserted: 0,
            batches: 0,
            rng,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn policy(&self) -> SamplingPolicy {
        self.policy
    }
    /// Number of `push_batch` calls so far.
    pub fn batches_pushed(&self) -> u64 {
        self.batches
    }

    /// Replaces the generator used by the random policy.
    pub fn reseed(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Fraction of capacity in use.
    pub fn fill(&self) -> f64 {
        self.entries.len() as f64 / self.capacity as f64
    }

    pub fn entry(&self, i: usize) -> &QueueEntry {
        &self.entries[i]
    }

    /// Copies of all entries, oldest first.
    pub fn snapshot(&self) -> Vec<QueueEntry> {
        self.entries.iter().cloned().collect()
    }

    /// Appends one row per sample; evicts the oldest entries on overflow.
    pub fn push_batch(
        &mut self,
        sample_ids: &[usize],
        features: ArrayView2<f64>,
        gradients: ArrayView2<f64>,
    ) -> Result<()> {
        let b = sample_ids.len();
        if features.nrows() != b || gradients.nrows() != b {
            return Err(CrcdError::usage("row count differs from sample id count"));
        }
        if features.ncols() != self.feature_dim || gradients.ncols() != self.gradient_dim {
            return Err(CrcdError::usage(format!(
                "entry dims ({}, {}) but queue holds ({}, {})",
                features.ncols(),
                gradients.ncols(),
                self.feature_dim,
                self.gradient_dim
            )));
        }
        if b > self.capacity {
            return Err(CrcdError::usage(format!(
                "batch of {b} exceeds queue capacity {}",
                self.capacity
            )));
        }
        for (r, &id) in sample_ids.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                sample_id: id,
                feature: features.row(r).to_owned(),
                gradient: gradients.row(r).to_owned(),
                age: self.inserted,
                batch: self.batches,
            });
            self.inserted += 1;
        }
        self.batches += 1;
        Ok(())
    }

    /// Positions (oldest = 0) of `count` entries eligible for `anchor`.
    ///
    /// Queue policy returns the most recent eligible entries in insertion
    /// order. Random policy runs a partial Fisher–Yates over the eligible
    /// positions: for `i` in `0..count`, swap slot `i` with a uniform slot in
    /// `i..len`, then keep the first `count` slots.
    pub fn sample_indices(&mut self, anchor: usize, count: usize) -> Result<Vec<usize>> {
        let mut eligible: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].sample_id != anchor)
            .collect();
        if eligible.len() < count {
            return Err(CrcdError::WarmUp {
                eligible: eligible.len(),
                needed: count,
            });
        }
        match self.policy {
            SamplingPolicy::Queue => Ok(eligible.split_off(eligible.len() - count)),
            SamplingPolicy::Random => {
                let n = eligible.len();
                for i in 0..count {
                    let j = self.rng.random_range(i..n);
                    eligible.swap(i, j);
                }
                eligible.truncate(count);
                Ok(eligible)
            }
        }
    }

    pub fn sample_negatives(&mut self, anchor: usize, count: usize) -> Result<Vec<QueueEntry>> {
        let idx = self.sample_indices(anchor, count)?;
        Ok(idx.into_iter().map(|i| self.entries[i].clone()).collect())
    }

    /// Number of entries whose sample id differs from `anchor`.
    pub fn eligible_count(&self, anchor: usize) -> usize {
        self.entries.iter().filter(|e| e.sample_id != anchor).count()
    }

    /// Stacks one element of the given entries into a matrix.
    pub fn gather(&self, positions: &[usize], element: ElementKind) -> Array2<f64> {
        let dim = match element {
            ElementKind::Feature => self.feature_dim,
            ElementKind::Gradient => self.gradient_dim,
        };
        let mut out = Array2::zeros((positions.len(), dim));
        for (r, &p) in positions.iter().enumerate() {
            out.row_mut(r).assign(self.entries[p].element(element));
        }
        out
    }
}
