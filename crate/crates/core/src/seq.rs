//! Token sequences, noise sequences and mixed trajectory points.
//!
//! Positions follow 1-based inclusive slicing: `slice_head(x, t)` is
//! `(x_1, ..., x_t)` and `slice_tail(x, t)` is `(x_t, ..., x_n)`. A trajectory
//! point at position `t` holds data tokens at positions `1..t-1` and noise at
//! `t..=n`, so `t = 1` is pure noise and `t = n + 1` is pure data.

use rand_distr::{Distribution, StandardNormal};

use crate::codebook::Codebook;
use crate::error::{DdError, Result};
use crate::rng::rng_from_seed;
use crate::TokenId;

/// `(x_1, ..., x_t)`; `t = 0` gives the empty slice.
pub fn slice_head<T>(seq: &[T], t: usize) -> Result<&[T]> {
    if t > seq.len() {
        return Err(DdError::out_of_range("t", t, format!("0..={}", seq.len())));
    }
    Ok(&seq[..t])
}

/// `(x_t, ..., x_n)`; `t = n + 1` gives the empty slice.
pub fn slice_tail<T>(seq: &[T], t: usize) -> Result<&[T]> {
    if t == 0 || t > seq.len() + 1 {
        return Err(DdError::out_of_range("t", t, format!("1..={}", seq.len() + 1)));
    }
    Ok(&seq[t - 1..])
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub condition: u32,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, condition: u32) -> Self {
        TokenSeq { ids, condition }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(DdError::InvalidInput(format!(
                "token id {id} outside codebook of size {vocab}"
            ))),
            None => Ok(()),
        }
    }

    /// First `t` tokens, keeping the condition.
    pub fn head(&self, t: usize) -> Result<TokenSeq> {
        Ok(TokenSeq::new(slice_head(&self.ids, t)?.to_vec(), self.condition))
    }
}

/// `n` standard-normal vectors of dimension `C`, reproducible from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSeq {
    values: Vec<f32>,
    dim: usize,
    seed: u64,
}

impl NoiseSeq {
    pub fn from_seed(seed: u64, len: usize, dim: usize) -> Self {
        let mut rng = rng_from_seed(seed);
        let values = (0..len * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        NoiseSeq { values, dim, seed }
    }

    /// Rebuilds from stored values; callers vouch that `values` came from `seed`.
    pub fn from_parts(values: Vec<f32>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(DdError::Structural(format!(
                "{} noise values do not divide into vectors of dimension {dim}",
                values.len()
            )));
        }
        Ok(NoiseSeq { values, dim, seed })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Noise vector at 1-based position `pos`.
    pub fn at(&self, pos: usize) -> &[f32] {
        let start = (pos - 1) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Flattened `(ε_t, ..., ε_n)`.
    pub fn tail(&self, t: usize) -> Result<&[f32]> {
        if t == 0 || t > self.len() + 1 {
            return Err(DdError::out_of_range("t", t, format!("1..={}", self.len() + 1)));
        }
        Ok(&self.values[(t - 1) * self.dim..])
    }
}

/// One slot of a trajectory point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot<'a> {
    Data(TokenId),
    Noise(&'a [f32]),
}

/// `X_t = (q_1, ..., q_{t-1}, ε_t, ..., ε_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    prefix: TokenSeq,
    noise_tail: Vec<f32>,
    dim: usize,
    t: usize,
}

impl TrajectoryPoint {
    /// Joins a data prefix of length `t - 1` with a noise tail.
    pub fn concat(prefix: TokenSeq, noise_tail: Vec<f32>, dim: usize, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(DdError::out_of_range("t", t, ">= 1"));
        }
        if prefix.len() != t - 1 {
            return Err(DdError::Structural(format!(
                "data prefix has {} tokens, position t={t} needs {}",
                prefix.len(),
                t - 1
            )));
        }
        if dim == 0 || noise_tail.len() % dim != 0 {
            return Err(DdError::Structural(format!(
                "noise tail of {} values is not a whole number of C={dim} vectors",
                noise_tail.len()
            )));
        }
        Ok(TrajectoryPoint {
            prefix,
            noise_tail,
            dim,
            t,
        })
    }

    pub fn pure_noise(noise: &NoiseSeq, condition: u32) -> Self {
        TrajectoryPoint {
            prefix: TokenSeq::new(Vec::new(), condition),
            noise_tail: noise.values().to_vec(),
            dim: noise.dim(),
            t: 1,
        }
    }

    pub fn pure_data(data: TokenSeq, dim: usize) -> Self {
        let t = data.len() + 1;
        TrajectoryPoint {
            prefix: data,
            noise_tail: Vec::new(),
            dim,
            t,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Total length `n`.
    pub fn len(&self) -> usize {
        self.prefix.len() + self.noise_tail.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn condition(&self) -> u32 {
        self.prefix.condition
    }

    pub fn prefix(&self) -> &TokenSeq {
        &self.prefix
    }

    pub fn noise_tail(&self) -> &[f32] {
        &self.noise_tail
    }

    pub fn is_pure_noise(&self) -> bool {
        self.t == 1
    }

    pub fn is_pure_data(&self) -> bool {
        self.t == self.len() + 1
    }

    /// Slot at 1-based position `pos`.
    pub fn slot(&self, pos: usize) -> Slot<'_> {
        if pos < self.t {
            Slot::Data(self.prefix.ids[pos - 1])
        } else {
            let start = (pos - self.t) * self.dim;
            Slot::Noise(&self.noise_tail[start..start + self.dim])
        }
    }

    /// Each slot as a `C`-vector, data tokens replaced by their codebook entries.
    pub fn embed(&self, cb: &Codebook) -> Vec<Vec<f32>> {
        (1..=self.len())
            .map(|pos| match self.slot(pos) {
                Slot::Data(id) => cb.entry(id).to_vec(),
                Slot::Noise(v) => v.to_vec(),
            })
            .collect()
    }
}

/// `Concat(data_head, noise_tail)` as the trajectory point at position `t`.
pub fn concat_mixed(data_head: &TokenSeq, noise_tail: &[f32], dim: usize, t: usize) -> Result<TrajectoryPoint> {
    TrajectoryPoint::concat(data_head.clone(), noise_tail.to_vec(), dim, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn slice_head_is_inclusive() {
        let x = ['a', 'b', 'c'];
        assert_eq!(slice_head(&x, 2).unwrap(), &['a', 'b']);
        assert!(slice_head(&x, 0).unwrap().is_empty());
        assert_eq!(slice_head(&x, 3).unwrap(), &x);
        assert!(matches!(slice_head(&x, 4), Err(DdError::OutOfRange { .. })));
    }

    #[test]
    fn slice_tail_bounds() {
        let x = [1, 2, 3];
        assert_eq!(slice_tail(&x, 1).unwrap(), &x);
        assert_eq!(slice_tail(&x, 3).unwrap(), &[3]);
        assert!(slice_tail(&x, 4).unwrap().is_empty());
        assert!(slice_tail(&x, 0).is_err());
        assert!(slice_tail(&x, 5).is_err());
    }

    #[test]
    fn concat_mixed_layout() {
        let noise = NoiseSeq::from_seed(3, 4, 2);
        let head = TokenSeq::new(vec![7, 9], 0);
        let x = concat_mixed(&head, noise.tail(3).unwrap(), 2, 3).unwrap();
        assert_eq!(x.len(), 4);
        assert_eq!(x.slot(1), Slot::Data(7));
        assert_eq!(x.slot(2), Slot::Data(9));
        assert_eq!(x.slot(3), Slot::Noise(noise.at(3)));
        assert_eq!(x.slot(4), Slot::Noise(noise.at(4)));
    }

    #[test]
    fn concat_mixed_endpoints() {
        let noise = NoiseSeq::from_seed(5, 3, 1);
        let x1 = concat_mixed(&TokenSeq::default(), noise.values(), 1, 1).unwrap();
        assert!(x1.is_pure_noise());
        assert_eq!(x1, TrajectoryPoint::pure_noise(&noise, 0));
        let data = TokenSeq::new(vec![0, 1, 2], 0);
        let xn = concat_mixed(&data, &[], 1, 4).unwrap();
        assert!(xn.is_pure_data());
        assert_eq!(xn.len(), 3);
    }

    #[test]
    fn concat_mixed_rejects_length_mismatch() {
        let head = TokenSeq::new(vec![1], 0);
        assert!(matches!(concat_mixed(&head, &[0.0; 2], 1, 3), Err(DdError::Structural(_))));
        assert!(matches!(concat_mixed(&head, &[0.0; 3], 2, 2), Err(DdError::Structural(_))));
    }

    #[test]
    fn noise_regenerates_bit_exactly() {
        let a = NoiseSeq::from_seed(99, 6, 3);
        let b = NoiseSeq::from_seed(99, 6, 3);
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a.values(), NoiseSeq::from_seed(100, 6, 3).values());
    }

    proptest! {
        #[test]
        fn mixed_point_always_has_length_n(n in 1usize..10, dim in 1usize..4, seed in any::<u64>(), t_frac in 0.0f64..1.0) {
            let t = 1 + ((n + 1) as f64 * t_frac) as usize;
            let t = t.min(n + 1);
            let data: Vec<TokenId> = (0..n as TokenId).collect();
            let noise = NoiseSeq::from_seed(seed, n, dim);
            let head = TokenSeq::new(slice_head(&data, t - 1).unwrap().to_vec(), 0);
            let x = concat_mixed(&head, noise.tail(t).unwrap(), dim, t).unwrap();
            prop_assert_eq!(x.len(), n);
            prop_assert_eq!(slice_head(&data, t - 1).unwrap(), &data[..t - 1]);
        }
    }
}
