//! Small reference teachers and datasets with known joints.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{DdError, Result};
use crate::rng::{rng_from_seed, split};
use crate::teacher::{NextTokenDist, TabularTeacher, Teacher};
use crate::{TokenId, TokenSeq};

/// `{(0,0), (1,1)}`: two equiprobable sequences with fully dependent tokens.
pub fn two_sample_dataset() -> Vec<TokenSeq> {
    vec![TokenSeq::new(vec![0, 0], 0), TokenSeq::new(vec![1, 1], 0)]
}

/// Teacher that always emits `seq`.
pub fn deterministic(seq: &[TokenId], vocab: usize) -> Result<TabularTeacher> {
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab) {
        return Err(DdError::out_of_range("token id", bad as usize, format!("0..{vocab}")));
    }
    let seq = seq.to_vec();
    TabularTeacher::from_fn(seq.len(), vocab, 1, move |_, prefix| {
        let mut w = vec![0.0; vocab];
        w[seq[prefix.len()] as usize] = 1.0;
        w
    })
}

/// Markov chain: the first token is uniform; afterwards the previous token
/// repeats with probability `stay`, otherwise a different token is drawn uniformly.
///
/// Computes conditionals on the fly, so any length works.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StickyChain {
    pub n: usize,
    pub vocab: usize,
    pub stay: f64,
}

impl StickyChain {
    pub fn new(n: usize, vocab: usize, stay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&stay) {
            return Err(DdError::InvalidInput(format!("stay probability {stay} outside [0, 1]")));
        }
        if vocab < 2 || n == 0 {
            return Err(DdError::InvalidInput("a sticky chain needs n >= 1 and at least two tokens".into()));
        }
        Ok(StickyChain { n, vocab, stay })
    }

    fn weights(&self, prefix: &[TokenId]) -> Vec<f64> {
        match prefix.last() {
            None => vec![1.0; self.vocab],
            Some(&prev) => (0..self.vocab)
                .map(|j| if j == prev as usize { self.stay } else { (1.0 - self.stay) / (self.vocab - 1) as f64 })
                .collect(),
        }
    }
}

impl Teacher for StickyChain {
    fn seq_len(&self) -> usize {
        self.n
    }
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_dist(&self, condition: u32, prefix: &[TokenId]) -> Result<NextTokenDist> {
        crate::teacher::check_query(self.n, 1, condition, prefix.len())?;
        NextTokenDist::from_weights(self.weights(prefix))
    }
}

/// [`StickyChain`] tabulated into a [`TabularTeacher`].
pub fn sticky_markov(n: usize, vocab: usize, stay: f64) -> Result<TabularTeacher> {
    let chain = StickyChain::new(n, vocab, stay)?;
    TabularTeacher::from_fn(n, vocab, 1, move |_, prefix| chain.weights(prefix))
}

/// Every conditional drawn independently from a symmetric Dirichlet(`concentration`).
pub fn random_tabular(n: usize, vocab: usize, classes: usize, concentration: f64, seed: u64) -> Result<TabularTeacher> {
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| DdError::InvalidInput(format!("Dirichlet concentration {concentration}: {e}")))?;
    TabularTeacher::from_fn(n, vocab, classes, move |class, prefix| {
        let mut key = split(seed, class as u64);
        for &t in prefix {
            key = split(key, t as u64 + 1);
        }
        key = split(key, prefix.len() as u64);
        let mut rng = rng_from_seed(key);
        // Guard against an all-underflow draw at tiny concentrations.
        let mut w: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng)).collect();
        if w.iter().sum::<f64>() <= 0.0 {
            w[rng.random_range(0..vocab)] = 1.0;
        }
        w
    })
}

/// `count` sequences drawn from `teacher` with per-sequence seeds.
pub fn sample_dataset<T: Teacher + ?Sized>(teacher: &T, count: usize, classes: usize, seed: u64) -> Result<Vec<TokenSeq>> {
    (0..count)
        .map(|i| {
            let mut rng = rng_from_seed(split(seed, i as u64));
            let condition = if classes > 1 { rng.random_range(0..classes as u32) } else { 0 };
            crate::teacher::ar_sample(teacher, condition, &mut rng)
        })
        .collect()
}
