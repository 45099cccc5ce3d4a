//! Distilled decoding for autoregressive token models.
//!
//! An autoregressive teacher defines, for every prefix, a categorical
//! distribution over a codebook. Treating that distribution as a mixture of
//! Diracs in embedding space gives an analytic flow-matching ODE that maps a
//! Gaussian noise vector to a token deterministically. Chaining the map along
//! the teacher's autoregressive order turns a whole noise sequence into a
//! whole token sequence; a student network is then trained to jump from any
//! point of that trajectory straight to its end, which gives one- and
//! two-step samplers whose output distribution tracks the teacher's.
//!
//! Module map:
//! - [`codebook`], [`seq`]: tokens, noise and mixed trajectory points
//! - [`teacher`]: tabular and neural autoregressive teachers
//! - [`flowmatch`]: the velocity field, ODE solvers, noise-to-token map
//! - [`trajgen`]: noise/data pair generation and the pair store
//! - [`nn`]: tensors, autodiff, transformer, AdamW, EMA
//! - [`student`]: the distilled model and its training loop
//! - [`sampler`]: few-step and teacher-hybrid sampling
//! - [`baselines`]: the independent-marginals and skip baselines
//! - [`eval`]: exact joints, total variation, run reports
//! - [`cli`]: configuration and subcommands of the `dd` binary

pub mod baselines;
pub mod cli;
pub mod codebook;
pub mod container;
pub mod error;
pub mod eval;
pub mod flowmatch;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod seq;
pub mod student;
pub mod teacher;
pub mod toy;
pub mod trajgen;

/// Zero-based codebook index.
pub type TokenId = u32;

pub use codebook::{nearest_token, Codebook};
pub use error::{DdError, Result};
pub use seq::{concat_mixed, slice_head, slice_tail, NoiseSeq, Slot, TokenSeq, TrajectoryPoint};
