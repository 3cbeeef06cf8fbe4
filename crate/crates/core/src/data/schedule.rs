use super::{batch_encoded, Batch, EncodedExample};
use crate::rng::derive_seed;

/// Infinite round-robin over task indices in registration order.
///
/// The seed is accepted for interface symmetry with the batch cursors; the
/// order itself is fixed.
#[derive(Clone, Debug)]
pub struct TaskAlternator {
    tasks: Vec<usize>,
    next: usize,
}

impl TaskAlternator {
    pub fn new(tasks: Vec<usize>, _seed: u64) -> Self {
        assert!(!tasks.is_empty(), "alternator needs at least one task");
        Self { tasks, next: 0 }
    }
}

impl Iterator for TaskAlternator {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let t = self.tasks[self.next];
        self.next = (self.next + 1) % self.tasks.len();
        Some(t)
    }
}

/// Endless stream of one task's batches. Each pass over the data is
/// reshuffled with a seed derived from the run seed, task and pass number.
#[derive(Clone, Debug)]
pub struct BatchCursor {
    task: String,
    encoded: Vec<EncodedExample>,
    batch_size: usize,
    seed: u64,
    pass: u64,
    batches: Vec<Batch>,
    pos: usize,
}

impl BatchCursor {
    pub fn new(task: &str, encoded: Vec<EncodedExample>, batch_size: usize, seed: u64) -> Self {
        let mut c = Self {
            task: task.to_string(),
            encoded,
            batch_size,
            seed,
            pass: 0,
            batches: Vec::new(),
            pos: 0,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.batches = batch_encoded(
            &self.task,
            &self.encoded,
            self.batch_size,
            derive_seed(self.seed, self.pass),
        );
        self.pos = 0;
    }

    pub fn batches_per_pass(&self) -> usize {
        self.batches.len()
    }

    pub fn passes(&self) -> u64 {
        self.pass
    }

    pub fn encoded(&self) -> &[EncodedExample] {
        &self.encoded
    }

    /// Next batch, wrapping to a freshly shuffled pass at the end.
    /// `None` only when the task has no data.
    pub fn next_batch(&mut self) -> Option<&Batch> {
        if self.batches.is_empty() {
            return None;
        }
        if self.pos == self.batches.len() {
            self.pass += 1;
            self.reshuffle();
        }
        self.pos += 1;
        self.batches.get(self.pos - 1)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn round_robin_order() {
        let s: Vec<usize> = TaskAlternator::new(vec![0, 1, 2], 5).take(7).collect();
        assert_eq!(s, vec![0, 1, 2, 0, 1, 2, 0]);
        let single: Vec<usize> = TaskAlternator::new(vec![4], 5).take(3).collect();
        assert_eq!(single, vec![4, 4, 4]);
    }

    fn encoded(n: usize) -> Vec<EncodedExample> {
        (0..n)
            .map(|i| EncodedExample {
                id: i.to_string(),
                text_ids: vec![2 + i % 3],
                condition_ids: vec![],
                label: Some(i % 2),
                group: None,
                diversity: [1.0, 1.0, 0.0, 1.0, 0.0],
            })
            .collect()
    }

    #[test]
    fn cursor_wraps_and_is_deterministic() {
        let mut a = BatchCursor::new("t", encoded(5), 2, 11);
        let mut b = BatchCursor::new("t", encoded(5), 2, 11);
        assert_eq!(a.batches_per_pass(), 3);
        for _ in 0..7 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        assert_eq!(a.passes(), 2);
        let mut empty = BatchCursor::new("t", vec![], 2, 1);
        assert!(empty.next_batch().is_none());
    }

    proptest! {
        #[test]
        fn prefix_counts_balanced(n in 1usize..6, k in 1usize..20, extra in 0usize..6) {
            let tasks: Vec<usize> = (0..n).collect();
            let len = k * n + extra.min(n - 1);
            let mut counts = vec![0usize; n];
            for t in TaskAlternator::new(tasks, 0).take(len) {
                counts[t] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
