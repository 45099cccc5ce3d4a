//! The token embedding table and nearest-atom projection.
//!
//! On-disk layout (`.ddcb`), all little-endian:
//!
//! ```text
//! magic   "DDCB"
//! version u32  (= 1)
//! V       u32
//! C       u32
//! V*C     f32  row-major, one row per entry
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{DdError, Result};
use crate::rng::rng_from_seed;
use crate::TokenId;

const MAGIC: &[u8; 4] = b"DDCB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
    dim: usize,
}

impl Codebook {
    /// Builds a codebook from row-major `entries`; rejects non-finite values and duplicate rows.
    pub fn new(entries: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(DdError::InvalidInput("codebook dimension must be >= 1".into()));
        }
        if entries.is_empty() || entries.len() % dim != 0 {
            return Err(DdError::Structural(format!(
                "codebook has {} values, not a positive multiple of C={dim}",
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(DdError::InvalidInput(format!("codebook value #{pos} is not finite")));
        }
        let cb = Codebook { entries, dim };
        for i in 0..cb.len() {
            for j in 0..i {
                if cb.entry(i as TokenId) == cb.entry(j as TokenId) {
                    return Err(DdError::InvalidInput(format!(
                        "codebook entries {j} and {i} are identical"
                    )));
                }
            }
        }
        Ok(cb)
    }

    /// `V` evenly spaced scalars in [-1, 1] (C = 1).
    pub fn line(vocab: usize) -> Result<Self> {
        let entries = if vocab == 1 {
            vec![0.0]
        } else {
            (0..vocab)
                .map(|i| -1.0 + 2.0 * i as f32 / (vocab - 1) as f32)
                .collect()
        };
        Self::new(entries, 1)
    }

    /// Standard-normal entries drawn from `seed`.
    pub fn random(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let entries = (0..vocab * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self::new(entries, dim)
    }

    /// Number of entries `V`.
    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Embedding dimension `C`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, id: TokenId) -> &[f32] {
        let start = id as usize * self.dim;
        &self.entries[start..start + self.dim]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry_f64(&self, id: TokenId) -> Vec<f64> {
        self.entry(id).iter().map(|&v| v as f64).collect()
    }

    /// Index of the closest entry in Euclidean distance. Ties go to the smallest index.
    pub fn nearest(&self, x: &[f64]) -> TokenId {
        debug_assert_eq!(x.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.len() {
            let d: f64 = self
                .entry(j as TokenId)
                .iter()
                .zip(x)
                .map(|(&c, &xv)| {
                    let diff = xv - c as f64;
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best as TokenId
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.entries.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.entries {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(DdError::Format("not a DDCB codebook file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(DdError::Format(format!("unsupported DDCB version {version}")));
        }
        let vocab = word(8) as usize;
        let dim = word(12) as usize;
        let expected = 16 + 4 * vocab * dim;
        if bytes.len() != expected {
            return Err(DdError::Format(format!(
                "DDCB payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let entries = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(entries, dim)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
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

/// Free-function form of [`Codebook::nearest`].
pub fn nearest_token(x: &[f64], cb: &Codebook) -> TokenId {
    cb.nearest(x)
}
