//! Noise/data pair generation along the teacher's autoregressive order, and
//! the `DDPR` pair store.
//!
//! `DDPR` layout (little-endian):
//!
//! ```text
//! magic "DDPR" | version u32 | N u64 | n u32 | V u32 | C u32
//! teacher fingerprint [u8; 32] | scheme u32 (0 euler, 1 heun) | steps u32 | t_end f64
//! N records: seed u64 | condition u32 | noise f32 * (n*C) | data u32 * n
//! ```

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{DdError, Result};
use crate::flowmatch::{fm_map, Scheme, SolverConfig};
use crate::rng::{rng_from_seed, split};
use crate::teacher::Teacher;
use crate::{Codebook, NoiseSeq, TokenId, TokenSeq, TrajectoryPoint};

const MAGIC: &[u8; 4] = b"DDPR";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 76;

/// One `(X_1, final data)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub noise: NoiseSeq,
    pub data: TokenSeq,
    pub seed: u64,
}

impl PairRecord {
    pub fn condition(&self) -> u32 {
        self.data.condition
    }
}

/// Continues the trajectory from `prefix` (tokens at positions `< t`) to the
/// final data sequence, mapping each remaining noise vector through the
/// teacher's conditional. One teacher query per generated token.
pub fn complete_trajectory<T: Teacher + ?Sized>(
    teacher: &T,
    cb: &Codebook,
    prefix: &TokenSeq,
    noise: &NoiseSeq,
    cfg: &SolverConfig,
) -> Result<TokenSeq> {
    let n = teacher.seq_len();
    if noise.len() != n || noise.dim() != cb.dim() {
        return Err(DdError::Structural(format!(
            "noise is {}x{}, teacher/codebook need {n}x{}",
            noise.len(),
            noise.dim(),
            cb.dim()
        )));
    }
    if cb.len() != teacher.vocab_size() {
        return Err(DdError::Structural(format!(
            "codebook has {} entries, teacher vocabulary is {}",
            cb.len(),
            teacher.vocab_size()
        )));
    }
    if prefix.len() > n {
        return Err(DdError::out_of_range("prefix length", prefix.len(), format!("0..={n}")));
    }
    let mut ids = prefix.ids.clone();
    for pos in prefix.len() + 1..=n {
        let step = || -> Result<TokenId> {
            let dist = teacher.next_dist(prefix.condition, &ids)?;
            fm_map(noise.at(pos), &dist, cb, cfg)
        };
        let id = step().map_err(|e| DdError::PairPosition {
            position: pos,
            source: Box::new(e),
        })?;
        ids.push(id);
    }
    Ok(TokenSeq::new(ids, prefix.condition))
}

/// Runs the full trajectory from the noise drawn by `seed`.
pub fn generate_pair<T: Teacher + ?Sized>(
    teacher: &T,
    cb: &Codebook,
    condition: u32,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<PairRecord> {
    let noise = NoiseSeq::from_seed(seed, teacher.seq_len(), cb.dim());
    let data = complete_trajectory(teacher, cb, &TokenSeq::new(Vec::new(), condition), &noise, cfg)?;
    Ok(PairRecord { noise, data, seed })
}

/// Tokens of a pair's trajectory point at position `t`: data before, noise from `t` on.
pub fn build_xt(pair: &PairRecord, t: usize) -> Result<TrajectoryPoint> {
    let n = pair.data.len();
    if t == 0 || t > n + 1 {
        return Err(DdError::out_of_range("t", t, format!("1..={}", n + 1)));
    }
    TrajectoryPoint::concat(pair.data.head(t - 1)?, pair.noise.tail(t)?.to_vec(), pair.noise.dim(), t)
}

/// How each pair's class label is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSampler {
    Fixed(u32),
    Uniform { classes: u32 },
}

impl ConditionSampler {
    /// Class for the pair with seed `seed`; independent of the noise stream.
    pub fn draw(&self, seed: u64) -> u32 {
        match *self {
            ConditionSampler::Fixed(c) => c,
            ConditionSampler::Uniform { classes } => rng_from_seed(split(seed, u64::MAX)).random_range(0..classes.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairHeader {
    pub n: usize,
    pub vocab: usize,
    pub dim: usize,
    pub fingerprint: [u8; 32],
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairStore {
    pub header: PairHeader,
    pub records: Vec<PairRecord>,
}

/// `N` pairs with seeds `split(base_seed, i)`; the result does not depend on
/// the number of worker threads.
pub fn generate_dataset<T: Teacher + ?Sized>(
    teacher: &T,
    cb: &Codebook,
    count: usize,
    conditions: ConditionSampler,
    base_seed: u64,
    cfg: &SolverConfig,
    fingerprint: [u8; 32],
) -> Result<PairStore> {
    if count == 0 {
        return Err(DdError::InvalidInput("pair dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = split(base_seed, i as u64);
            generate_pair(teacher, cb, conditions.draw(seed), seed, cfg).map_err(|e| DdError::PairIndex {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairStore {
        header: PairHeader {
            n: teacher.seq_len(),
            vocab: teacher.vocab_size(),
            dim: cb.dim(),
            fingerprint,
            solver: *cfg,
        },
        records,
    })
}

impl PairStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.header.fingerprint != expected {
            return Err(DdError::FingerprintMismatch {
                expected: hex::encode(expected),
                actual: hex::encode(self.header.fingerprint),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(64 + self.records.len() * (12 + h.n * (4 * h.dim + 4)));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for v in [h.n, h.vocab, h.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&h.fingerprint);
        let scheme: u32 = match h.solver.scheme {
            Scheme::Euler => 0,
            Scheme::Heun => 1,
        };
        out.extend_from_slice(&scheme.to_le_bytes());
        out.extend_from_slice(&h.solver.steps.to_le_bytes());
        out.extend_from_slice(&h.solver.t_end.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.seed.to_le_bytes());
            out.extend_from_slice(&r.data.condition.to_le_bytes());
            for v in r.noise.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for id in &r.data.ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |k: usize| -> Result<&[u8]> {
            if pos + k > bytes.len() {
                return Err(DdError::Format("pair store truncated".into()));
            }
            pos += k;
            Ok(&bytes[pos - k..pos])
        };
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        if take(4)? != MAGIC {
            return Err(DdError::Format("not a DDPR pair store".into()));
        }
        let version = u32_of(take(4)?);
        if version != VERSION {
            return Err(DdError::Format(format!("unsupported DDPR version {version}")));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let n = u32_of(take(4)?) as usize;
        let vocab = u32_of(take(4)?) as usize;
        let dim = u32_of(take(4)?) as usize;
        if dim == 0 {
            return Err(DdError::Format("pair store has C = 0".into()));
        }
        let fingerprint: [u8; 32] = take(32)?.try_into().unwrap();
        let scheme = match u32_of(take(4)?) {
            0 => Scheme::Euler,
            1 => Scheme::Heun,
            other => return Err(DdError::Format(format!("unknown solver scheme code {other}"))),
        };
        let steps = u32_of(take(4)?);
        let t_end = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let record_len = 12 + n * dim * 4 + n * 4;
        let remaining = bytes.len() - HEADER_LEN;
        if count.checked_mul(record_len) != Some(remaining) {
            return Err(DdError::Format(format!(
                "pair store header declares {count} records of {record_len} bytes, body has {remaining}"
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let condition = u32_of(take(4)?);
            let noise = take(n * dim * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let ids: Vec<TokenId> = take(n * 4)?.chunks_exact(4).map(u32_of).collect();
            let data = TokenSeq::new(ids, condition);
            data.check_vocab(vocab)?;
            records.push(PairRecord {
                noise: NoiseSeq::from_parts(noise, dim, seed)?,
                data,
                seed,
            });
        }
        Ok(PairStore {
            header: PairHeader {
                n,
                vocab,
                dim,
                fingerprint,
                solver: SolverConfig { scheme, steps, t_end },
            },
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DdError::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
