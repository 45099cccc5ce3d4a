use std::collections::BTreeMap;

use super::{check_query, NextTokenDist, Teacher};
use crate::container::{Container, ContainerKind, Entry};
use crate::error::{DdError, Result};
use crate::{TokenId, TokenSeq};

const MAX_PREFIXES: usize = 1_000_000;

/// Count table over `(class, prefix)` with additive smoothing.
///
/// `p(j | prefix) = (count_j + α) / (total + V α)`; a prefix with no mass at
/// all falls back to the uniform distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularTeacher {
    n: usize,
    vocab: usize,
    classes: usize,
    alpha: f64,
    counts: BTreeMap<(u32, Vec<TokenId>), Vec<f64>>,
}

/// Empirical prefix-conditional counts of `dataset`.
pub fn fit_tabular(dataset: &[TokenSeq], vocab: usize, alpha: f64) -> Result<TabularTeacher> {
    let first = dataset
        .first()
        .ok_or_else(|| DdError::InvalidInput("cannot fit a teacher on an empty dataset".into()))?;
    let n = first.len();
    if n == 0 || vocab == 0 {
        return Err(DdError::InvalidInput("sequence length and vocabulary must be positive".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(DdError::InvalidInput(format!("smoothing α={alpha} must be finite and >= 0")));
    }
    let mut counts: BTreeMap<(u32, Vec<TokenId>), Vec<f64>> = BTreeMap::new();
    let mut classes = 1;
    for seq in dataset {
        if seq.len() != n {
            return Err(DdError::Structural(format!(
                "dataset mixes sequence lengths {n} and {}",
                seq.len()
            )));
        }
        seq.check_vocab(vocab)?;
        classes = classes.max(seq.condition as usize + 1);
        for i in 0..n {
            let row = counts
                .entry((seq.condition, seq.ids[..i].to_vec()))
                .or_insert_with(|| vec![0.0; vocab]);
            row[seq.ids[i] as usize] += 1.0;
        }
    }
    Ok(TabularTeacher {
        n,
        vocab,
        classes,
        alpha,
        counts,
    })
}

impl TabularTeacher {
    /// Builds an exact teacher by tabulating `cond(class, prefix)` for every prefix.
    pub fn from_fn(n: usize, vocab: usize, classes: usize, cond: impl Fn(u32, &[TokenId]) -> Vec<f64>) -> Result<Self> {
        if n == 0 || vocab == 0 || classes == 0 {
            return Err(DdError::InvalidInput("n, V and class count must be positive".into()));
        }
        let total: f64 = (0..n).map(|l| (vocab as f64).powi(l as i32)).sum::<f64>() * classes as f64;
        if total > MAX_PREFIXES as f64 {
            return Err(DdError::InvalidInput(format!("{total} prefixes exceed the table limit")));
        }
        let mut counts = BTreeMap::new();
        for c in 0..classes as u32 {
            let mut layer: Vec<Vec<TokenId>> = vec![Vec::new()];
            for _ in 0..n {
                let mut next = Vec::with_capacity(layer.len() * vocab);
                for prefix in layer {
                    let w = cond(c, &prefix);
                    if w.len() != vocab || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                        return Err(DdError::InvalidInput(format!(
                            "conditional for prefix {prefix:?} is not a length-{vocab} non-negative vector"
                        )));
                    }
                    for j in 0..vocab as TokenId {
                        let mut p = prefix.clone();
                        p.push(j);
                        next.push(p);
                    }
                    counts.insert((c, prefix), w);
                }
                layer = next;
            }
        }
        Ok(TabularTeacher {
            n,
            vocab,
            classes,
            alpha: 0.0,
            counts,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Raw count vector for a prefix, if one was observed.
    pub fn counts(&self, condition: u32, prefix: &[TokenId]) -> Option<&[f64]> {
        self.counts.get(&(condition, prefix.to_vec())).map(Vec::as_slice)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::TabularTeacher);
        c.put("n", Entry::U64(self.n as u64));
        c.put("vocab", Entry::U64(self.vocab as u64));
        c.put("classes", Entry::U64(self.classes as u64));
        c.put("alpha", Entry::F64(self.alpha));
        let mut keys = Vec::new();
        let mut values = Vec::with_capacity(self.counts.len() * self.vocab);
        for ((cond, prefix), row) in &self.counts {
            keys.push(*cond);
            keys.push(prefix.len() as u32);
            keys.extend_from_slice(prefix);
            values.extend_from_slice(row);
        }
        c.put("keys", Entry::U32s(keys));
        c.put("counts", Entry::F64s(values));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(ContainerKind::TabularTeacher)?;
        let n = c.usize("n")?;
        let vocab = c.usize("vocab")?;
        let classes = c.usize("classes")?;
        let alpha = c.f64("alpha")?;
        let keys = c.u32s("keys")?;
        let values = c.f64s("counts")?;
        if vocab == 0 || values.len() % vocab != 0 {
            return Err(DdError::Format("count table size does not match V".into()));
        }
        let mut counts = BTreeMap::new();
        let mut pos = 0;
        for row in values.chunks_exact(vocab) {
            if pos + 2 > keys.len() {
                return Err(DdError::Format("count table keys truncated".into()));
            }
            let cond = keys[pos];
            let len = keys[pos + 1] as usize;
            pos += 2;
            if pos + len > keys.len() || len >= n {
                return Err(DdError::Format("count table key is malformed".into()));
            }
            let prefix = keys[pos..pos + len].to_vec();
            pos += len;
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(DdError::Format("negative or non-finite count".into()));
            }
            counts.insert((cond, prefix), row.to_vec());
        }
        if pos != keys.len() {
            return Err(DdError::Format("count table has extra keys".into()));
        }
        Ok(TabularTeacher {
            n,
            vocab,
            classes,
            alpha,
            counts,
        })
    }
}

impl Teacher for TabularTeacher {
    fn seq_len(&self) -> usize {
        self.n
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn next_dist(&self, condition: u32, prefix: &[TokenId]) -> Result<NextTokenDist> {
        check_query(self.n, self.classes, condition, prefix.len())?;
        let row = self.counts.get(&(condition, prefix.to_vec()));
        let total: f64 = row.map_or(0.0, |r| r.iter().sum());
        let denom = total + self.vocab as f64 * self.alpha;
        if denom <= 0.0 {
            return Ok(NextTokenDist::uniform(self.vocab));
        }
        let weights = (0..self.vocab)
            .map(|j| (row.map_or(0.0, |r| r[j]) + self.alpha) / denom)
            .collect();
        NextTokenDist::from_weights(weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::teacher::ar_sample;
    use crate::toy;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashMap;

    #[test]
    fn two_sample_dataset_conditionals() {
        let t = fit_tabular(&toy::two_sample_dataset(), 2, 0.0).unwrap();
        assert_eq!(t.next_dist(0, &[]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(t.next_dist(0, &[0]).unwrap().probs(), &[1.0, 0.0]);
        assert_eq!(t.next_dist(0, &[1]).unwrap().probs(), &[0.0, 1.0]);
    }

    #[test]
    fn additive_smoothing() {
        let t = fit_tabular(&[TokenSeq::new(vec![0], 0)], 2, 1.0).unwrap();
        let d = t.next_dist(0, &[]).unwrap();
        assert!((d.prob(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.prob(1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn repeated_sequence_is_sampled_surely() {
        let data = vec![TokenSeq::new(vec![3, 1, 2], 0); 5];
        let t = fit_tabular(&data, 4, 0.0).unwrap();
        for seed in 0..50 {
            assert_eq!(ar_sample(&t, 0, &mut rng_from_seed(seed)).unwrap().ids, vec![3, 1, 2]);
        }
    }

    #[test]
    fn unseen_prefix_is_uniform() {
        let t = fit_tabular(&toy::two_sample_dataset(), 2, 0.0).unwrap();
        let data = vec![TokenSeq::new(vec![0, 0, 0], 0)];
        let t3 = fit_tabular(&data, 3, 0.0).unwrap();
        assert_eq!(t3.next_dist(0, &[2, 2]).unwrap().probs(), NextTokenDist::uniform(3).probs());
        assert!(t.next_dist(0, &[1]).is_ok());
    }

    #[test]
    fn empty_or_ragged_dataset_rejected() {
        assert!(fit_tabular(&[], 2, 0.0).is_err());
        let ragged = vec![TokenSeq::new(vec![0, 1], 0), TokenSeq::new(vec![0], 0)];
        assert!(fit_tabular(&ragged, 2, 0.0).is_err());
        assert!(fit_tabular(&[TokenSeq::new(vec![5], 0)], 2, 0.0).is_err());
    }

    #[test]
    fn next_dist_is_pure() {
        let t = toy::sticky_markov(3, 4, 0.6).unwrap();
        assert_eq!(t.next_dist(0, &[1, 2]).unwrap(), t.next_dist(0, &[1, 2]).unwrap());
    }

    #[test]
    fn container_round_trip() {
        let data = vec![TokenSeq::new(vec![0, 1], 0), TokenSeq::new(vec![1, 1], 2)];
        let t = fit_tabular(&data, 3, 0.25).unwrap();
        let back = TabularTeacher::from_container(&Container::from_bytes(&t.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 32, .. ProptestConfig::default() })]
        #[test]
        fn chain_rule_reproduces_empirical_joint(seed in any::<u64>(), n in 1usize..4, vocab in 1usize..4, size in 1usize..40) {
            let mut rng = rng_from_seed(seed);
            let data: Vec<TokenSeq> = (0..size)
                .map(|_| TokenSeq::new((0..n).map(|_| rng.random_range(0..vocab as TokenId)).collect(), 0))
                .collect();
            let t = fit_tabular(&data, vocab, 0.0).unwrap();
            let mut freq: HashMap<Vec<TokenId>, f64> = HashMap::new();
            for s in &data {
                *freq.entry(s.ids.clone()).or_default() += 1.0 / size as f64;
            }
            for (seq, f) in freq {
                let mut p = 1.0;
                for i in 0..n {
                    p *= t.next_dist(0, &seq[..i]).unwrap().prob(seq[i]);
                }
                prop_assert!((p - f).abs() < 1e-12);
            }
        }
    }
}
