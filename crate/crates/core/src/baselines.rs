//! Reference samplers: the best factorized one-step sampler and the
//! skip-the-last-tokens sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DdError, Result};
use crate::eval::{exact_joint, JointDist, SystemUnderTest, DENSE_LIMIT};
use crate::rng::rng_from_seed;
use crate::teacher::{ar_sample, NextTokenDist, Teacher};
use crate::{TokenId, TokenSeq};

/// Independent per-position categorical distributions, `n x V`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalTable {
    rows: Vec<Vec<f64>>,
}

impl MarginalTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = rows.first().map_or(0, Vec::len);
        if vocab == 0 {
            return Err(DdError::InvalidInput("marginal table needs at least one position and one token".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != vocab {
                return Err(DdError::Structural(format!("row {} has {} entries, expected {vocab}", i + 1, row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(DdError::InvalidInput(format!("row {} is not a distribution: {row:?}", i + 1)));
            }
        }
        Ok(MarginalTable { rows })
    }

    /// Marginals of an arbitrary joint.
    pub fn from_joint(joint: &JointDist) -> Result<Self> {
        Self::new(joint.marginals())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.rows.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.rows[0].len()
    }

    /// `Σ_i Σ_j log p̂_j(q_ij)` over a dataset; `-inf` when a seen token has zero mass.
    pub fn objective(&self, dataset: &[TokenSeq]) -> f64 {
        dataset
            .iter()
            .map(|s| s.ids.iter().zip(&self.rows).map(|(&t, row)| row[t as usize].ln()).sum::<f64>())
            .sum()
    }

    /// One independent draw per position.
    pub fn sample(&self, condition: u32, rng: &mut impl Rng) -> Result<TokenSeq> {
        let ids = self
            .rows
            .iter()
            .map(|row| Ok(NextTokenDist::from_probs(row.clone())?.sample_with(rng.random())))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSeq::new(ids, condition))
    }

    /// Product joint. Zero entries are skipped so sparse tables stay cheap.
    pub fn joint(&self) -> Result<JointDist> {
        let (n, vocab) = (self.seq_len(), self.vocab_size());
        let support: usize = self
            .rows
            .iter()
            .map(|r| r.iter().filter(|&&p| p > 0.0).count())
            .try_fold(1usize, |acc, k| acc.checked_mul(k))
            .unwrap_or(usize::MAX);
        if support > DENSE_LIMIT {
            return Err(DdError::InvalidInput(format!("product joint has {support} outcomes")));
        }
        let mut layer: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
        for row in &self.rows {
            layer = layer
                .into_iter()
                .flat_map(|(s, p)| {
                    row.iter().enumerate().filter(|(_, &q)| q > 0.0).map(move |(j, &q)| {
                        let mut s = s.clone();
                        s.push(j as TokenId);
                        (s, p * q)
                    })
                })
                .collect();
        }
        JointDist::from_outcomes(n, vocab, layer)
    }
}

/// Per-position empirical frequencies: the maximizer of the factorized
/// log-likelihood over a dataset.
pub fn fit_onestep_star(dataset: &[TokenSeq], vocab: usize) -> Result<MarginalTable> {
    let n = dataset
        .first()
        .map(TokenSeq::len)
        .ok_or_else(|| DdError::InvalidInput("cannot fit marginals to an empty dataset".into()))?;
    let mut counts = vec![vec![0.0; vocab]; n];
    for s in dataset {
        if s.len() != n {
            return Err(DdError::Structural(format!("ragged dataset: lengths {n} and {}", s.len())));
        }
        s.check_vocab(vocab)?;
        for (row, &t) in counts.iter_mut().zip(&s.ids) {
            row[t as usize] += 1.0;
        }
    }
    let total = dataset.len() as f64;
    MarginalTable::new(counts.into_iter().map(|r| r.into_iter().map(|c| c / total).collect()).collect())
}

pub fn sample_onestep_star(table: &MarginalTable, condition: u32, rng: &mut impl Rng) -> Result<TokenSeq> {
    table.sample(condition, rng)
}

/// Outcome of checking that the frequency table maximizes the factorized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub optimum: f64,
    /// Objective of each perturbed table.
    pub perturbed: Vec<f64>,
    /// Perturbed tables that beat the optimum by more than rounding.
    pub violations: usize,
    /// Lagrange multiplier of each row's normalization constraint, recovered
    /// from stationarity; all equal one for the frequency table.
    pub multipliers: Vec<f64>,
}

impl OptimalityReport {
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.multipliers.iter().all(|l| (l - 1.0).abs() < 1e-9)
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let cand = (cum - 1.0) / (k + 1) as f64;
        if x - cand > 0.0 {
            theta = cand;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Compares the fitted table against `trials` Gaussian perturbations of size
/// `scale` projected back onto the simplex.
pub fn verify_onestep_optimality(dataset: &[TokenSeq], vocab: usize, trials: usize, scale: f64, seed: u64) -> Result<OptimalityReport> {
    let table = fit_onestep_star(dataset, vocab)?;
    let optimum = table.objective(dataset);
    let mut rng = rng_from_seed(seed);
    let mut perturbed = Vec::with_capacity(trials);
    for _ in 0..trials {
        let rows = table
            .rows
            .iter()
            .map(|row| {
                let moved: Vec<f64> = row
                    .iter()
                    .map(|p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p + scale * z
                    })
                    .collect();
                let mut q = project_simplex(&moved);
                let s: f64 = q.iter().sum();
                q.iter_mut().for_each(|x| *x /= s);
                q
            })
            .collect();
        perturbed.push(MarginalTable { rows }.objective(dataset));
    }
    let tol = 1e-9 * optimum.abs().max(1.0);
    let violations = perturbed.iter().filter(|&&v| v > optimum + tol).count();
    // Stationarity: count_jk / p̂_jk = N λ_j on the support; row sums fix λ_j.
    let total = dataset.len() as f64;
    let multipliers = table
        .rows
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let mut counts = vec![0.0; vocab];
            for s in dataset {
                counts[s.ids[j] as usize] += 1.0;
            }
            let k = row.iter().position(|&p| p > 0.0).expect("row has mass");
            counts[k] / (row[k] * total)
        })
        .collect();
    Ok(OptimalityReport { optimum, perturbed, violations, multipliers })
}

fn check_skip<T: Teacher + ?Sized>(teacher: &T, table: &MarginalTable, skip: usize) -> Result<()> {
    if table.seq_len() != teacher.seq_len() || table.vocab_size() != teacher.vocab_size() {
        return Err(DdError::Structural("marginal table shape does not match the teacher".into()));
    }
    if skip >= teacher.seq_len() {
        return Err(DdError::out_of_range("skipped tokens", skip, format!("0..{}", teacher.seq_len())));
    }
    Ok(())
}

/// Teacher samples the first `n - skip` tokens; the rest come from `table`.
pub fn skip_n_sample<T: Teacher + ?Sized>(
    teacher: &T,
    table: &MarginalTable,
    skip: usize,
    condition: u32,
    rng: &mut impl Rng,
) -> Result<TokenSeq> {
    check_skip(teacher, table, skip)?;
    let keep = teacher.seq_len() - skip;
    let mut ids = Vec::with_capacity(teacher.seq_len());
    for _ in 0..keep {
        ids.push(teacher.next_dist(condition, &ids)?.sample_with(rng.random()));
    }
    for row in &table.rows[keep..] {
        ids.push(NextTokenDist::from_probs(row.clone())?.sample_with(rng.random()));
    }
    Ok(TokenSeq::new(ids, condition))
}

/// Just the teacher's first `n - skip` tokens.
pub fn skip_n_truncate<T: Teacher + ?Sized>(teacher: &T, skip: usize, condition: u32, rng: &mut impl Rng) -> Result<TokenSeq> {
    let full = ar_sample(teacher, condition, rng)?;
    if skip >= teacher.seq_len() {
        return Err(DdError::out_of_range("skipped tokens", skip, format!("0..{}", teacher.seq_len())));
    }
    full.head(teacher.seq_len() - skip)
}

/// Exact output joint of [`skip_n_sample`].
pub fn skip_n_joint<T: Teacher + ?Sized>(teacher: &T, table: &MarginalTable, skip: usize, condition: u32) -> Result<JointDist> {
    check_skip(teacher, table, skip)?;
    let full = exact_joint(teacher, condition)?;
    let keep = teacher.seq_len() - skip;
    let mut prefix_mass = std::collections::BTreeMap::<Vec<TokenId>, f64>::new();
    for (s, p) in full.support() {
        *prefix_mass.entry(s[..keep].to_vec()).or_default() += p;
    }
    let tail = MarginalTable { rows: table.rows[keep..].to_vec() };
    let tail_joint: Vec<(Vec<TokenId>, f64)> = if skip == 0 { vec![(Vec::new(), 1.0)] } else { tail.joint()?.support() };
    let outcomes = prefix_mass.iter().flat_map(|(head, &p)| {
        tail_joint.iter().map(move |(rest, q)| {
            let mut s = head.clone();
            s.extend_from_slice(rest);
            (s, p * q)
        })
    });
    JointDist::from_outcomes(teacher.seq_len(), teacher.vocab_size(), outcomes.collect::<Vec<_>>())
}

/// The factorized one-step sampler as a scored system.
pub struct OneStepStarSystem<'a> {
    pub table: &'a MarginalTable,
    pub condition: u32,
}

impl SystemUnderTest for OneStepStarSystem<'_> {
    fn name(&self) -> String {
        "onestep-star".into()
    }
    fn steps(&self) -> usize {
        1
    }
    fn sample_one(&self, seed: u64) -> Result<TokenSeq> {
        self.table.sample(self.condition, &mut rng_from_seed(seed))
    }
    fn exact(&self) -> Option<Result<JointDist>> {
        Some(self.table.joint())
    }
}

/// Skip-n sampler as a scored system.
pub struct SkipNSystem<'a, T: Teacher + ?Sized> {
    pub teacher: &'a T,
    pub table: &'a MarginalTable,
    pub skip: usize,
    pub condition: u32,
}

impl<T: Teacher + ?Sized> SystemUnderTest for SkipNSystem<'_, T> {
    fn name(&self) -> String {
        format!("skip-{}", self.skip)
    }
    fn steps(&self) -> usize {
        // The marginal fill costs one lookup pass.
        self.teacher.seq_len() - self.skip + usize::from(self.skip > 0)
    }
    fn sample_one(&self, seed: u64) -> Result<TokenSeq> {
        skip_n_sample(self.teacher, self.table, self.skip, self.condition, &mut rng_from_seed(seed))
    }
    fn exact(&self) -> Option<Result<JointDist>> {
        Some(skip_n_joint(self.teacher, self.table, self.skip, self.condition))
    }
}
