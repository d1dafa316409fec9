//! Synthetic sequence classification for desk-scale training.
//!
//! A sequence is labeled 1 when more than half of its tokens come from the
//! lower half of the vocabulary.

use serde::{Deserialize, Serialize};

use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MajorityTask {
    pub vocab: usize,
    pub seq_len: usize,
}

impl MajorityTask {
    pub const DEFAULT_SEQ_LEN: usize = 8;

    pub fn new(vocab: usize, seq_len: usize) -> Self {
        assert!(
            vocab >= 2 && seq_len >= 1,
            "need at least two tokens and one position"
        );
        Self { vocab, seq_len }
    }

    pub fn label_of(&self, ids: &[usize]) -> usize {
        let low = ids.iter().filter(|&&t| t < self.vocab / 2).count();
        usize::from(2 * low > ids.len())
    }

    /// The number of low tokens is drawn uniformly, so both classes and the
    /// hard cases near the boundary are well represented.
    pub fn sample(&self, rng: &mut Rng) -> Example {
        let half = self.vocab / 2;
        let low = rng.int_in(0, self.seq_len);
        let mut ids: Vec<usize> = (0..self.seq_len)
            .map(|k| {
                if k < low {
                    rng.below(half)
                } else {
                    half + rng.below(self.vocab - half)
                }
            })
            .collect();
        rng.shuffle(&mut ids);
        let label = self.label_of(&ids);
        Example { ids, label }
    }

    pub fn dataset(&self, n: usize, rng: &mut Rng) -> Vec<Example> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Uniform token sequences with no task structure, labeled anyway.
    pub fn generic(&self, n: usize, rng: &mut Rng) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let ids: Vec<usize> = (0..self.seq_len).map(|_| rng.below(self.vocab)).collect();
                let label = self.label_of(&ids);
                Example { ids, label }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_the_rule() {
        let t = MajorityTask::new(64, 8);
        assert_eq!(t.label_of(&[0, 1, 2, 3, 4, 40, 41, 42]), 1);
        assert_eq!(t.label_of(&[0, 1, 2, 3, 40, 41, 42, 43]), 0);
        let mut rng = Rng::new(0);
        let data = t.dataset(400, &mut rng);
        assert!(data
            .iter()
            .all(|e| e.label == t.label_of(&e.ids) && e.ids.iter().all(|&i| i < 64)));
        let pos = data.iter().filter(|e| e.label == 1).count();
        assert!((100..300).contains(&pos), "{pos}");
    }
}
