//! Synthetic sequence-classification tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::derive_seed;
use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label 1 iff `token_a` occurs more often than `token_b`. Ties are
    /// never generated.
    MajorityToken { token_a: usize, token_b: usize },
    /// Label 1 iff positions `first` and `second` hold the same token.
    PairwiseMatch { first: usize, second: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn majority(vocab: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::MajorityToken { token_a: 0, token_b: 1 },
            vocab,
            seq_len,
            seed,
        }
    }

    pub fn pairwise(vocab: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::PairwiseMatch { first: 0, second: seq_len.saturating_sub(1) },
            vocab,
            seq_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "task needs vocab ≥ 2 and seq_len ≥ 2, got {} and {}",
                self.vocab, self.seq_len
            )));
        }
        match self.kind {
            TaskKind::MajorityToken { token_a, token_b } => {
                if token_a == token_b || token_a >= self.vocab || token_b >= self.vocab {
                    return Err(Error::InvalidConfig(format!(
                        "majority-token needs two distinct tokens below {}, got {token_a} and {token_b}",
                        self.vocab
                    )));
                }
            }
            TaskKind::PairwiseMatch { first, second } => {
                if first == second || first >= self.seq_len || second >= self.seq_len {
                    return Err(Error::InvalidConfig(format!(
                        "pairwise-match needs two distinct positions below {}, got {first} and {second}",
                        self.seq_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of output classes.
    pub fn classes(&self) -> usize {
        2
    }

    fn example(&self, index: usize) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[index as u64]));
        match self.kind {
            TaskKind::MajorityToken { token_a, token_b } => loop {
                // A and B each fill about a third of the positions.
                let tokens: Vec<usize> = (0..self.seq_len)
                    .map(|_| match rng.random_range(0..3) {
                        0 => token_a,
                        1 => token_b,
                        _ => rng.random_range(0..self.vocab),
                    })
                    .collect();
                let a = tokens.iter().filter(|&&t| t == token_a).count();
                let b = tokens.iter().filter(|&&t| t == token_b).count();
                if a != b {
                    return Example {
                        tokens,
                        label: usize::from(a > b),
                    };
                }
            },
            TaskKind::PairwiseMatch { first, second } => {
                let mut tokens: Vec<usize> =
                    (0..self.seq_len).map(|_| rng.random_range(0..self.vocab)).collect();
                let matched = rng.random_bool(0.5);
                if matched {
                    tokens[second] = tokens[first];
                } else {
                    let shift = rng.random_range(1..self.vocab);
                    tokens[second] = (tokens[first] + shift) % self.vocab;
                }
                Example {
                    tokens,
                    label: usize::from(matched),
                }
            }
        }
    }
}

/// `count` labelled examples; example `i` depends only on `(seed, i)`.
pub fn make_task(task: &SyntheticTask, count: usize) -> Result<Vec<Example>> {
    task.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("dataset size must be ≥ 1".into()));
    }
    Ok(parallel::map_range(count, |i| task.example(i)))
}

/// Examples `start..start + count`, the same ones [`make_task`] would produce
/// at those indices. Disjoint ranges give disjoint train and held-out splits.
pub fn make_task_range(task: &SyntheticTask, start: usize, count: usize) -> Result<Vec<Example>> {
    task.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("dataset size must be ≥ 1".into()));
    }
    Ok(parallel::map_range(count, |i| task.example(start + i)))
}

/// Majority-token label rule applied to an explicit sequence.
pub fn majority_label(tokens: &[usize], token_a: usize, token_b: usize) -> Option<usize> {
    let a = tokens.iter().filter(|&&t| t == token_a).count();
    let b = tokens.iter().filter(|&&t| t == token_b).count();
    (a != b).then_some(usize::from(a > b))
}

/// Pairwise-match label rule applied to an explicit sequence.
pub fn pairwise_label(tokens: &[usize], first: usize, second: usize) -> usize {
    usize::from(tokens[first] == tokens[second])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balance(data: &[Example]) -> f64 {
        data.iter().filter(|e| e.label == 1).count() as f64 / data.len() as f64
    }

    #[test]
    fn all_a_sequence_is_positive() {
        assert_eq!(majority_label(&[0; 16], 0, 1), Some(1));
        assert_eq!(majority_label(&[0, 1], 0, 1), None);
    }

    #[test]
    fn forced_identical_tokens_match() {
        assert_eq!(pairwise_label(&[3, 5, 3], 0, 2), 1);
        assert_eq!(pairwise_label(&[3, 5, 4], 0, 2), 0);
    }

    #[test]
    fn generated_labels_follow_the_rule() {
        let t = SyntheticTask::majority(8, 16, 3);
        for e in make_task(&t, 500).unwrap() {
            assert_eq!(majority_label(&e.tokens, 0, 1), Some(e.label));
            assert!(e.tokens.iter().all(|&x| x < 8));
        }
        let t = SyntheticTask::pairwise(8, 16, 3);
        for e in make_task(&t, 500).unwrap() {
            assert_eq!(pairwise_label(&e.tokens, 0, 15), e.label);
        }
    }

    #[test]
    fn classes_are_balanced() {
        for t in [SyntheticTask::majority(8, 16, 11), SyntheticTask::pairwise(8, 16, 11)] {
            let b = balance(&make_task(&t, 10_000).unwrap());
            assert!((b - 0.5).abs() < 0.05, "{t:?}: {b}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let t = SyntheticTask::majority(8, 16, 5);
        assert_eq!(make_task(&t, 64).unwrap(), make_task(&t, 64).unwrap());
        let other = SyntheticTask { seed: 6, ..t.clone() };
        assert_ne!(make_task(&t, 64).unwrap(), make_task(&other, 64).unwrap());
    }

    #[test]
    fn ranges_continue_the_sequence() {
        let t = SyntheticTask::pairwise(8, 16, 5);
        let all = make_task(&t, 30).unwrap();
        assert_eq!(make_task_range(&t, 10, 20).unwrap(), all[10..].to_vec());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut t = SyntheticTask::majority(8, 16, 0);
        t.kind = TaskKind::MajorityToken { token_a: 2, token_b: 2 };
        assert!(make_task(&t, 4).is_err());
        let mut p = SyntheticTask::pairwise(8, 16, 0);
        p.kind = TaskKind::PairwiseMatch { first: 0, second: 16 };
        assert!(make_task(&p, 4).is_err());
        assert!(make_task(&SyntheticTask::majority(8, 16, 0), 0).is_err());
    }
}
