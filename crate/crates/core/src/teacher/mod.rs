//! Autoregressive teachers: anything that yields `p(q_i | q_<i, class)`.

mod neural;
mod tabular;

use std::path::Path;

use rand::Rng;

pub(crate) use neural::{get_arch, put_arch};
pub use neural::{train_neural_teacher, NeuralTeacher, NeuralTeacherConfig, TeacherTrainReport};
pub use tabular::{fit_tabular, TabularTeacher};

use crate::container::{sha256, Container, ContainerKind};
use crate::error::{DdError, Result};
use crate::{TokenId, TokenSeq};

const SUM_TOL: f64 = 1e-9;

/// Categorical distribution over the codebook for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist {
    probs: Vec<f64>,
}

impl NextTokenDist {
    /// Exact probabilities; must be non-negative and sum to one within 1e-9.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DdError::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DdError::InvalidInput("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(DdError::InvalidInput(format!("probabilities sum to {sum}")));
        }
        Ok(NextTokenDist { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DdError::InvalidInput("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(DdError::InvalidInput("weights sum to zero".into()));
        }
        Ok(NextTokenDist {
            probs: weights.into_iter().map(|w| w / sum).collect(),
        })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(DdError::InvalidInput("logits are not finite".into()));
        }
        Self::from_weights(logits.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn uniform(vocab: usize) -> Self {
        NextTokenDist {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn one_hot(vocab: usize, id: TokenId) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[id as usize] = 1.0;
        NextTokenDist { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    /// Inverse-CDF draw for a uniform `u` in [0, 1).
    pub fn sample_with(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (j, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = j;
                acc += p;
                if u < acc {
                    return j as TokenId;
                }
            }
        }
        last_positive as TokenId
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (j, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = j;
            }
        }
        best as TokenId
    }
}

/// A pre-trained autoregressive model over sequences of fixed length `n`.
pub trait Teacher: Send + Sync {
    /// Sequence length `n`.
    fn seq_len(&self) -> usize;
    /// Codebook size `V`.
    fn vocab_size(&self) -> usize;
    fn num_classes(&self) -> usize {
        1
    }

    /// `p(· | prefix, condition)`; `prefix.len() < n`.
    fn next_dist(&self, condition: u32, prefix: &[TokenId]) -> Result<NextTokenDist>;

    /// Same as calling [`Teacher::next_dist`] per prefix; neural teachers batch it.
    fn next_dists(&self, condition: u32, prefixes: &[Vec<TokenId>]) -> Result<Vec<NextTokenDist>> {
        prefixes.iter().map(|p| self.next_dist(condition, p)).collect()
    }
}

impl<T: Teacher + ?Sized> Teacher for &T {
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn next_dist(&self, condition: u32, prefix: &[TokenId]) -> Result<NextTokenDist> {
        (**self).next_dist(condition, prefix)
    }
    fn next_dists(&self, condition: u32, prefixes: &[Vec<TokenId>]) -> Result<Vec<NextTokenDist>> {
        (**self).next_dists(condition, prefixes)
    }
}

pub(crate) fn check_query(n: usize, classes: usize, condition: u32, prefix_len: usize) -> Result<()> {
    if prefix_len >= n {
        return Err(DdError::out_of_range("prefix length", prefix_len, format!("0..{n}")));
    }
    if condition as usize >= classes {
        return Err(DdError::out_of_range("condition", condition as usize, format!("0..{classes}")));
    }
    Ok(())
}

/// Token-by-token ancestral sampling; consumes exactly `n` uniforms from `rng`.
pub fn ar_sample<T: Teacher + ?Sized>(teacher: &T, condition: u32, rng: &mut impl Rng) -> Result<TokenSeq> {
    let n = teacher.seq_len();
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let dist = teacher.next_dist(condition, &ids)?;
        ids.push(dist.sample_with(u));
    }
    Ok(TokenSeq::new(ids, condition))
}

/// Classifier-free-guidance style mixing of two class conditionals:
/// `log p = log p_u + scale * (log p_c - log p_u)`, renormalized.
///
/// The result is no longer the conditional of any single joint, so exact
/// total-variation evaluation against the unguided teacher does not apply.
pub struct GuidedTeacher<'a, T: Teacher + ?Sized> {
    inner: &'a T,
    scale: f64,
    uncond_class: u32,
}

impl<'a, T: Teacher + ?Sized> GuidedTeacher<'a, T> {
    pub fn new(inner: &'a T, scale: f64, uncond_class: u32) -> Result<Self> {
        if uncond_class as usize >= inner.num_classes() {
            return Err(DdError::out_of_range("unconditional class", uncond_class as usize, format!("0..{}", inner.num_classes())));
        }
        Ok(GuidedTeacher { inner, scale, uncond_class })
    }
}

impl<T: Teacher + ?Sized> Teacher for GuidedTeacher<'_, T> {
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn next_dist(&self, condition: u32, prefix: &[TokenId]) -> Result<NextTokenDist> {
        let cond = self.inner.next_dist(condition, prefix)?;
        let uncond = self.inner.next_dist(self.uncond_class, prefix)?;
        let floor = 1e-30f64.ln();
        let logits: Vec<f64> = cond
            .probs()
            .iter()
            .zip(uncond.probs())
            .map(|(&c, &u)| {
                let lc = if c > 0.0 { c.ln() } else { floor };
                let lu = if u > 0.0 { u.ln() } else { floor };
                lu + self.scale * (lc - lu)
            })
            .collect();
        NextTokenDist::from_logits(&logits)
    }
}

/// A teacher as stored in a `DDTC` checkpoint.
#[derive(Debug, Clone)]
pub enum AnyTeacher {
    Tabular(TabularTeacher),
    Neural(NeuralTeacher),
}

impl AnyTeacher {
    pub fn to_container(&self) -> Container {
        match self {
            AnyTeacher::Tabular(t) => t.to_container(),
            AnyTeacher::Neural(t) => t.to_container(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        match c.kind() {
            ContainerKind::TabularTeacher => Ok(AnyTeacher::Tabular(TabularTeacher::from_container(c)?)),
            ContainerKind::NeuralTeacher => Ok(AnyTeacher::Neural(NeuralTeacher::from_container(c)?)),
            ContainerKind::Student => Err(DdError::Format("checkpoint is a student, not a teacher".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn as_neural(&self) -> Option<&NeuralTeacher> {
        match self {
            AnyTeacher::Neural(t) => Some(t),
            AnyTeacher::Tabular(_) => None,
        }
    }

    fn inner(&self) -> &dyn Teacher {
        match self {
            AnyTeacher::Tabular(t) => t,
            AnyTeacher::Neural(t) => t,
        }
    }
}

impl Teacher for AnyTeacher {
    fn seq_len(&self) -> usize {
        self.inner().seq_len()
    }
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }
    fn next_dist(&self, condition: u32, prefix: &[TokenId]) -> Result<NextTokenDist> {
        self.inner().next_dist(condition, prefix)
    }
    fn next_dists(&self, condition: u32, prefixes: &[Vec<TokenId>]) -> Result<Vec<NextTokenDist>> {
        self.inner().next_dists(condition, prefixes)
    }
}

impl From<TabularTeacher> for AnyTeacher {
    fn from(t: TabularTeacher) -> Self {
        AnyTeacher::Tabular(t)
    }
}

impl From<NeuralTeacher> for AnyTeacher {
    fn from(t: NeuralTeacher) -> Self {
        AnyTeacher::Neural(t)
    }
}
