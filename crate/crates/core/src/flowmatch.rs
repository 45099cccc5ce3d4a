//! Analytic flow matching onto a mixture of Diracs.
//!
//! With `x_t = (1-t) x0 + t x1`, `x0 ~ N(0, I)` and `x1` drawn from
//! `Σ_j p_j δ(c_j)`, the marginal velocity is
//!
//! ```text
//! V(x, t) = Σ_j w_j (c_j - x) / (1 - t),   w_j ∝ p_j exp(-|x - t c_j|² / (2 (1-t)²))
//! ```
//!
//! Integrating it from Gaussian noise lands (up to truncation) on an atom whose
//! law is `p`, which gives a deterministic noise-to-token map.

use crate::error::{DdError, Result};
use crate::teacher::NextTokenDist;
use crate::{Codebook, TokenId};

/// Default integration end; the field has a `1/(1-t)` factor.
pub const DEFAULT_T_END: f64 = 1.0 - 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Heun,
}

impl std::str::FromStr for Scheme {
    type Err = DdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "heun" => Ok(Scheme::Heun),
            other => Err(DdError::Config(format!("unknown solver scheme `{other}` (euler|heun)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Heun => "heun",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub steps: u32,
    pub t_end: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: Scheme::Heun,
            steps: 64,
            t_end: DEFAULT_T_END,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DdError::Config("solver.steps must be at least 1".into()));
        }
        if !(self.t_end > 0.0 && self.t_end <= 1.0) {
            return Err(DdError::Config(format!("solver.t_end={} outside (0, 1]", self.t_end)));
        }
        Ok(())
    }
}

/// ODE position `x` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Vec<f64>,
    pub t: f64,
}

/// Linear interpolation path `(1-t) x0 + t x1`.
pub fn perturb(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

fn check(x: &[f64], t: f64, p: &NextTokenDist, cb: &Codebook) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(DdError::Domain(format!("flow time t={t} outside [0, 1)")));
    }
    if x.len() != cb.dim() {
        return Err(DdError::Structural(format!("state has dim {}, codebook has {}", x.len(), cb.dim())));
    }
    if p.len() != cb.len() {
        return Err(DdError::Structural(format!(
            "distribution over {} tokens, codebook has {}",
            p.len(),
            cb.len()
        )));
    }
    Ok(())
}

/// Posterior weights `w_j(x, t)` over atoms; zero-probability atoms get weight zero.
pub fn posterior_weights(x: &[f64], t: f64, p: &NextTokenDist, cb: &Codebook) -> Result<Vec<f64>> {
    check(x, t, p, cb)?;
    let inv = 1.0 / (2.0 * (1.0 - t) * (1.0 - t));
    let logw: Vec<f64> = (0..cb.len())
        .map(|j| {
            let pj = p.probs()[j];
            if pj <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let dist2: f64 = x
                .iter()
                .zip(cb.entry(j as TokenId))
                .map(|(xi, &c)| {
                    let d = xi - t * c as f64;
                    d * d
                })
                .sum();
            pj.ln() - dist2 * inv
        })
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    Ok(w)
}

pub fn velocity(x: &[f64], t: f64, p: &NextTokenDist, cb: &Codebook) -> Result<Vec<f64>> {
    let w = posterior_weights(x, t, p, cb)?;
    let mut target = vec![0.0; x.len()];
    for (j, &wj) in w.iter().enumerate() {
        if wj > 0.0 {
            for (acc, &c) in target.iter_mut().zip(cb.entry(j as TokenId)) {
                *acc += wj * c as f64;
            }
        }
    }
    let scale = 1.0 / (1.0 - t);
    Ok(target.iter().zip(x).map(|(m, xi)| (m - xi) * scale).collect())
}

/// `ε(x, t) = x - t V(x, t)`: the noise endpoint implied by the current state.
pub fn noise_prediction(x: &[f64], t: f64, p: &NextTokenDist, cb: &Codebook) -> Result<Vec<f64>> {
    let v = velocity(x, t, p, cb)?;
    Ok(x.iter().zip(&v).map(|(xi, vi)| xi - t * vi).collect())
}

/// Integrates `dx = V(x, t) dt` on a uniform grid from 0 to `cfg.t_end`.
pub fn solve_ode(x0: &[f64], p: &NextTokenDist, cb: &Codebook, cfg: &SolverConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(DdError::Solver { step: 0 });
    }
    let h = cfg.t_end / cfg.steps as f64;
    let mut state = FlowState { x: x0.to_vec(), t: 0.0 };
    for k in 0..cfg.steps {
        let t = k as f64 * h;
        let t_next = if k + 1 == cfg.steps { cfg.t_end } else { (k + 1) as f64 * h };
        let dt = t_next - t;
        let v0 = velocity(&state.x, t, p, cb)?;
        let euler: Vec<f64> = state.x.iter().zip(&v0).map(|(x, v)| x + dt * v).collect();
        state.x = match cfg.scheme {
            Scheme::Euler => euler,
            Scheme::Heun if t_next >= 1.0 => euler,
            Scheme::Heun => {
                let v1 = velocity(&euler, t_next, p, cb)?;
                state.x.iter().zip(v0.iter().zip(&v1)).map(|(x, (a, b))| x + 0.5 * dt * (a + b)).collect()
            }
        };
        state.t = t_next;
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(DdError::Solver { step: k as usize + 1 });
        }
    }
    Ok(state.x)
}

/// The deterministic token reached from noise `eps` under `p`.
pub fn fm_map<E: Copy + Into<f64>>(eps: &[E], p: &NextTokenDist, cb: &Codebook, cfg: &SolverConfig) -> Result<TokenId> {
    let x0: Vec<f64> = eps.iter().map(|&e| e.into()).collect();
    if x0.len() != cb.dim() {
        return Err(DdError::Structural(format!("noise has dim {}, codebook has {}", x0.len(), cb.dim())));
    }
    if let Some(id) = degenerate(p) {
        return Ok(id);
    }
    let x1 = solve_ode(&x0, p, cb, cfg)?;
    Ok(cb.nearest(&x1))
}

/// The atom carrying all the mass, if any. Every trajectory ends there.
fn degenerate(p: &NextTokenDist) -> Option<TokenId> {
    let mut support = p.probs().iter().enumerate().filter(|(_, &q)| q > 0.0);
    let first = support.next()?;
    support.next().is_none().then_some(first.0 as TokenId)
}
