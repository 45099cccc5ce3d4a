//! Fidelity measurement on enumerable sequence spaces: exact and empirical
//! joints, total variation, marginal and pairwise-dependence diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::baselines::MarginalTable;
use crate::error::{DdError, Result};
use crate::flowmatch::SolverConfig;
use crate::rng::{rng_from_seed, split};
use crate::sampler::{sample_batch, sample_hybrid, Denoiser, HybridVariant, SamplePath};
use crate::teacher::{ar_sample, Teacher};
use crate::{Codebook, NoiseSeq, TokenId, TokenSeq};

/// Largest outcome space stored densely.
pub const DENSE_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Dense(Vec<f64>),
    Sparse(BTreeMap<Vec<TokenId>, f64>),
}

/// Distribution over all `V^n` sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    n: usize,
    vocab: usize,
    repr: Repr,
    samples: Option<usize>,
}

fn space_size(n: usize, vocab: usize) -> Option<usize> {
    (vocab as u128).checked_pow(n as u32).and_then(|s| usize::try_from(s).ok())
}

/// Lexicographic index with position 1 most significant.
fn index_of(seq: &[TokenId], vocab: usize) -> usize {
    seq.iter().fold(0, |acc, &t| acc * vocab + t as usize)
}

fn seq_of(mut index: usize, n: usize, vocab: usize) -> Vec<TokenId> {
    let mut out = vec![0; n];
    for slot in out.iter_mut().rev() {
        *slot = (index % vocab) as TokenId;
        index /= vocab;
    }
    out
}

impl JointDist {
    fn empty(n: usize, vocab: usize) -> Self {
        let repr = match space_size(n, vocab) {
            Some(s) if s <= DENSE_LIMIT => Repr::Dense(vec![0.0; s]),
            _ => Repr::Sparse(BTreeMap::new()),
        };
        JointDist { n, vocab, repr, samples: None }
    }

    /// Builds from `(sequence, probability)` pairs; probabilities must sum to one.
    pub fn from_outcomes(n: usize, vocab: usize, outcomes: impl IntoIterator<Item = (Vec<TokenId>, f64)>) -> Result<Self> {
        let mut d = Self::empty(n, vocab);
        for (seq, p) in outcomes {
            if seq.len() != n || seq.iter().any(|&t| t as usize >= vocab) {
                return Err(DdError::Structural(format!("outcome {seq:?} outside the {vocab}^{n} space")));
            }
            d.add(&seq, p);
        }
        let total = d.total();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DdError::InvalidInput(format!("joint sums to {total}")));
        }
        Ok(d)
    }

    pub fn point_mass(seq: &[TokenId], vocab: usize) -> Result<Self> {
        Self::from_outcomes(seq.len(), vocab, [(seq.to_vec(), 1.0)])
    }

    fn add(&mut self, seq: &[TokenId], p: f64) {
        match &mut self.repr {
            Repr::Dense(v) => v[index_of(seq, self.vocab)] += p,
            Repr::Sparse(m) => *m.entry(seq.to_vec()).or_default() += p,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, Repr::Dense(_))
    }

    /// Sample count for empirical joints.
    pub fn samples(&self) -> Option<usize> {
        self.samples
    }

    /// `sqrt(V^n / M) / 2`: rough scale of the TV noise floor of an empirical joint.
    pub fn half_width(&self) -> Option<f64> {
        let space = (self.vocab as f64).powi(self.n as i32);
        self.samples.map(|m| (space / m as f64).sqrt() / 2.0)
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        if seq.len() != self.n || seq.iter().any(|&t| t as usize >= self.vocab) {
            return 0.0;
        }
        match &self.repr {
            Repr::Dense(v) => v[index_of(seq, self.vocab)],
            Repr::Sparse(m) => m.get(seq).copied().unwrap_or(0.0),
        }
    }

    /// Outcomes with non-zero mass, in lexicographic order.
    pub fn support(&self) -> Vec<(Vec<TokenId>, f64)> {
        match &self.repr {
            Repr::Dense(v) => v
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(i, &p)| (seq_of(i, self.n, self.vocab), p))
                .collect(),
            Repr::Sparse(m) => m.iter().filter(|(_, &p)| p > 0.0).map(|(s, &p)| (s.clone(), p)).collect(),
        }
    }

    pub fn total(&self) -> f64 {
        match &self.repr {
            Repr::Dense(v) => v.iter().sum(),
            Repr::Sparse(m) => m.values().sum(),
        }
    }

    /// Per-position marginals, `n x V`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.vocab]; self.n];
        for (seq, p) in self.support() {
            for (row, &t) in out.iter_mut().zip(&seq) {
                row[t as usize] += p;
            }
        }
        out
    }

    /// Mutual information (nats) between 1-based positions `i` and `j`.
    pub fn mutual_information(&self, i: usize, j: usize) -> f64 {
        let v = self.vocab;
        let mut pair = vec![0.0; v * v];
        for (seq, p) in self.support() {
            pair[seq[i - 1] as usize * v + seq[j - 1] as usize] += p;
        }
        let pi: Vec<f64> = (0..v).map(|a| (0..v).map(|b| pair[a * v + b]).sum()).collect();
        let pj: Vec<f64> = (0..v).map(|b| (0..v).map(|a| pair[a * v + b]).sum()).collect();
        let mut mi = 0.0;
        for a in 0..v {
            for b in 0..v {
                let pab = pair[a * v + b];
                if pab > 0.0 {
                    mi += pab * (pab / (pi[a] * pj[b])).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// Product of this joint's per-position marginals.
    pub fn product_of_marginals(&self) -> Result<JointDist> {
        MarginalTable::new(self.marginals())?.joint()
    }
}

/// Chain-rule joint of `teacher` under `condition`, by enumeration.
pub fn exact_joint<T: Teacher + ?Sized>(teacher: &T, condition: u32) -> Result<JointDist> {
    let (n, vocab) = (teacher.seq_len(), teacher.vocab_size());
    match space_size(n, vocab) {
        Some(s) if s <= DENSE_LIMIT => {}
        _ => {
            return Err(DdError::InvalidInput(format!(
                "{vocab}^{n} outcomes exceed the enumeration limit of {DENSE_LIMIT}"
            )))
        }
    }
    let mut layer: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    for _ in 0..n {
        let prefixes: Vec<Vec<TokenId>> = layer.iter().map(|(s, _)| s.clone()).collect();
        let dists = teacher.next_dists(condition, &prefixes)?;
        let mut next = Vec::with_capacity(layer.len() * vocab);
        for ((prefix, p), d) in layer.into_iter().zip(dists) {
            for (j, &q) in d.probs().iter().enumerate() {
                if q > 0.0 {
                    let mut s = prefix.clone();
                    s.push(j as TokenId);
                    next.push((s, p * q));
                }
            }
        }
        layer = next;
    }
    JointDist::from_outcomes(n, vocab, layer)
}

/// Frequency estimate from samples.
pub fn empirical_joint<'a>(n: usize, vocab: usize, samples: impl IntoIterator<Item = &'a TokenSeq>) -> Result<JointDist> {
    let mut d = JointDist::empty(n, vocab);
    let mut m = 0usize;
    for s in samples {
        if s.len() != n {
            return Err(DdError::Structural(format!("sample of length {} in a length-{n} space", s.len())));
        }
        s.check_vocab(vocab)?;
        d.add(&s.ids, 1.0);
        m += 1;
    }
    if m == 0 {
        return Err(DdError::InvalidInput("empirical joint needs at least one sample".into()));
    }
    let scale = 1.0 / m as f64;
    match &mut d.repr {
        Repr::Dense(v) => v.iter_mut().for_each(|p| *p *= scale),
        Repr::Sparse(map) => map.values_mut().for_each(|p| *p *= scale),
    }
    d.samples = Some(m);
    Ok(d)
}

fn check_space(a: &JointDist, b: &JointDist) -> Result<()> {
    if a.n != b.n || a.vocab != b.vocab {
        return Err(DdError::Structural(format!(
            "joints live on different spaces: {}^{} vs {}^{}",
            a.vocab, a.n, b.vocab, b.n
        )));
    }
    Ok(())
}

/// `½ Σ |a - b|` over all outcomes.
pub fn tv_distance(a: &JointDist, b: &JointDist) -> Result<f64> {
    check_space(a, b)?;
    let tv = match (&a.repr, &b.repr) {
        (Repr::Dense(x), Repr::Dense(y)) => x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>(),
        _ => {
            let mut keys: BTreeMap<Vec<TokenId>, (f64, f64)> = BTreeMap::new();
            for (s, p) in a.support() {
                keys.entry(s).or_default().0 = p;
            }
            for (s, p) in b.support() {
                keys.entry(s).or_default().1 = p;
            }
            keys.values().map(|(p, q)| (p - q).abs()).sum()
        }
    };
    Ok((0.5 * tv).clamp(0.0, 1.0))
}

/// TV between the per-position marginals of `a` and `b`.
pub fn marginal_tvs(a: &JointDist, b: &JointDist) -> Result<Vec<f64>> {
    check_space(a, b)?;
    Ok(a.marginals()
        .iter()
        .zip(b.marginals())
        .map(|(x, y)| 0.5 * x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .collect())
}

/// Mean absolute difference of pairwise mutual information over position pairs.
pub fn mi_gap(a: &JointDist, b: &JointDist) -> Result<f64> {
    check_space(a, b)?;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 1..=a.n {
        for j in i + 1..=a.n {
            total += (a.mutual_information(i, j) - b.mutual_information(i, j)).abs();
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// A sampler being scored against the teacher.
pub trait SystemUnderTest: Sync {
    fn name(&self) -> String;
    /// Model invocations per sample.
    fn steps(&self) -> usize;
    /// Deterministic sample from one seed.
    fn sample_one(&self, seed: u64) -> Result<TokenSeq>;

    fn sample_many(&self, seeds: &[u64]) -> Result<Vec<TokenSeq>> {
        seeds.par_iter().map(|&s| self.sample_one(s)).collect()
    }

    /// The system's exact output joint, when it can be computed directly.
    fn exact(&self) -> Option<Result<JointDist>> {
        None
    }
}

/// The teacher sampling itself token by token.
pub struct TeacherSystem<'a, T: Teacher + ?Sized> {
    pub teacher: &'a T,
    pub condition: u32,
}

impl<T: Teacher + ?Sized> SystemUnderTest for TeacherSystem<'_, T> {
    fn name(&self) -> String {
        "teacher".into()
    }
    fn steps(&self) -> usize {
        self.teacher.seq_len()
    }
    fn sample_one(&self, seed: u64) -> Result<TokenSeq> {
        ar_sample(self.teacher, self.condition, &mut rng_from_seed(seed))
    }
}

/// Few-step denoiser sampling along a fixed path.
pub struct DenoiserSystem<'a, D: Denoiser + ?Sized> {
    pub label: String,
    pub model: &'a D,
    pub path: SamplePath,
    pub condition: u32,
}

impl<D: Denoiser + ?Sized> SystemUnderTest for DenoiserSystem<'_, D> {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn steps(&self) -> usize {
        self.path.steps().len()
    }
    fn sample_one(&self, seed: u64) -> Result<TokenSeq> {
        Ok(self.sample_many(&[seed])?.remove(0))
    }
    fn sample_many(&self, seeds: &[u64]) -> Result<Vec<TokenSeq>> {
        let (n, c) = (self.model.seq_len(), self.model.noise_dim());
        let chunks: Vec<Vec<TokenSeq>> = seeds
            .par_chunks(1024)
            .map(|chunk| {
                let noises: Vec<NoiseSeq> = chunk.iter().map(|&s| NoiseSeq::from_seed(s, n, c)).collect();
                sample_batch(self.model, &self.path, &vec![self.condition; chunk.len()], &noises)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Student, teacher segment, student.
pub struct HybridSystem<'a, D: Denoiser + ?Sized, T: Teacher + ?Sized> {
    pub model: &'a D,
    pub teacher: &'a T,
    pub codebook: &'a Codebook,
    pub solver: SolverConfig,
    pub t_k2: usize,
    pub t_s: usize,
    pub variant: HybridVariant,
    pub condition: u32,
}

impl<D: Denoiser + ?Sized, T: Teacher + ?Sized> SystemUnderTest for HybridSystem<'_, D, T> {
    fn name(&self) -> String {
        format!("hybrid-{}-{}", self.t_s, self.t_k2)
    }
    fn steps(&self) -> usize {
        2 + self.t_k2 - self.t_s
    }
    fn sample_one(&self, seed: u64) -> Result<TokenSeq> {
        let x1 = NoiseSeq::from_seed(seed, self.model.seq_len(), self.model.noise_dim());
        let mut rng = rng_from_seed(split(seed, 1));
        let (s, _) = sample_hybrid(
            self.model,
            self.teacher,
            self.codebook,
            &self.solver,
            self.t_k2,
            self.t_s,
            self.condition,
            &x1,
            self.variant,
            &mut rng,
        )?;
        Ok(s)
    }
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system: String,
    pub steps: usize,
    pub teacher_steps: usize,
    pub tv_joint: f64,
    pub tv_marginal: Vec<f64>,
    pub mi_gap: f64,
    pub wall_ms: f64,
    /// 0 when the system's joint was computed exactly.
    pub samples: usize,
    pub half_width: f64,
}

impl EvalReport {
    /// Invocation ratio against token-by-token teacher sampling.
    pub fn speedup(&self) -> f64 {
        self.teacher_steps as f64 / self.steps as f64
    }

    pub fn tv_marginal_mean(&self) -> f64 {
        if self.tv_marginal.is_empty() {
            0.0
        } else {
            self.tv_marginal.iter().sum::<f64>() / self.tv_marginal.len() as f64
        }
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "system={}", self.system);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "teacher_steps={}", self.teacher_steps);
        let _ = writeln!(s, "speedup={:.6}", self.speedup());
        let _ = writeln!(s, "tv_joint={:.6}", self.tv_joint);
        let _ = writeln!(s, "tv_marginal_mean={:.6}", self.tv_marginal_mean());
        let marg: Vec<String> = self.tv_marginal.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "tv_marginal={}", marg.join(","));
        let _ = writeln!(s, "mi_gap={:.6}", self.mi_gap);
        let _ = writeln!(s, "wall_ms={:.3}", self.wall_ms);
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "half_width={:.6}", self.half_width);
        s
    }

    pub const CSV_HEADER: &'static str = "system,steps,tv_joint,tv_marginal_mean,wall_ms,samples";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.3},{}",
            self.system,
            self.steps,
            self.tv_joint,
            self.tv_marginal_mean(),
            self.wall_ms,
            self.samples
        )
    }
}

/// Scores `system` against the exact joint `reference`, using the system's
/// own exact joint when available and `samples` draws otherwise.
pub fn evaluate_run(reference: &JointDist, system: &dyn SystemUnderTest, samples: usize, seed: u64) -> Result<EvalReport> {
    let start = Instant::now();
    let (produced, m) = match system.exact() {
        Some(exact) => (exact?, 0),
        None => {
            if samples == 0 {
                return Err(DdError::InvalidInput("sample count must be positive".into()));
            }
            let seeds: Vec<u64> = (0..samples as u64).map(|i| split(seed, i)).collect();
            let drawn = system.sample_many(&seeds)?;
            (empirical_joint(reference.n, reference.vocab, &drawn)?, samples)
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(EvalReport {
        system: system.name(),
        steps: system.steps(),
        teacher_steps: reference.n,
        tv_joint: tv_distance(reference, &produced)?,
        tv_marginal: marginal_tvs(reference, &produced)?,
        mi_gap: mi_gap(reference, &produced)?,
        wall_ms,
        samples: m,
        half_width: produced.half_width().unwrap_or(0.0),
    })
}
