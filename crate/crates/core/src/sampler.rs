//! Few-step sampling with a trained denoiser, optionally handing a segment
//! of the sequence back to the teacher.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{DdError, Result};
use crate::flowmatch::{fm_map, SolverConfig};
use crate::student::StudentModel;
use crate::teacher::{NextTokenDist, Teacher};
use crate::trajgen::complete_trajectory;
use crate::{Codebook, NoiseSeq, TokenId, TokenSeq, TrajectoryPoint};

/// Anything that maps a trajectory point to a final sequence in one call.
pub trait Denoiser: Sync {
    fn seq_len(&self) -> usize;
    fn noise_dim(&self) -> usize;
    /// Whether `t` is a legal jump-off point.
    fn supports(&self, t: usize) -> bool;
    fn predict_final(&self, x: &TrajectoryPoint) -> Result<TokenSeq>;

    fn predict_final_batch(&self, xs: &[&TrajectoryPoint]) -> Result<Vec<TokenSeq>> {
        xs.iter().map(|x| self.predict_final(x)).collect()
    }
}

impl Denoiser for StudentModel {
    fn seq_len(&self) -> usize {
        self.spec().n
    }
    fn noise_dim(&self) -> usize {
        self.spec().dim()
    }
    fn supports(&self, t: usize) -> bool {
        self.schedule().contains(t)
    }
    fn predict_final(&self, x: &TrajectoryPoint) -> Result<TokenSeq> {
        StudentModel::predict_final(self, x)
    }
    fn predict_final_batch(&self, xs: &[&TrajectoryPoint]) -> Result<Vec<TokenSeq>> {
        StudentModel::predict_final_batch(self, xs)
    }
}

/// A perfectly distilled student: finishes the trajectory with the teacher
/// and the flow map, so its jumps land exactly where the pairs do.
pub struct TrajectoryOracle<'a, T: Teacher + ?Sized> {
    pub teacher: &'a T,
    pub codebook: &'a Codebook,
    pub solver: SolverConfig,
}

impl<T: Teacher + ?Sized> Denoiser for TrajectoryOracle<'_, T> {
    fn seq_len(&self) -> usize {
        self.teacher.seq_len()
    }
    fn noise_dim(&self) -> usize {
        self.codebook.dim()
    }
    fn supports(&self, t: usize) -> bool {
        (1..=self.teacher.seq_len()).contains(&t)
    }
    fn predict_final(&self, x: &TrajectoryPoint) -> Result<TokenSeq> {
        let c = x.dim();
        let mut values = vec![0f32; (x.t() - 1) * c];
        values.extend_from_slice(x.noise_tail());
        let noise = NoiseSeq::from_parts(values, c, 0)?;
        complete_trajectory(self.teacher, self.codebook, x.prefix(), &noise, &self.solver)
    }
}

/// Counts `predict_final` calls on the wrapped denoiser.
pub struct CountingDenoiser<'a, D: Denoiser + ?Sized> {
    inner: &'a D,
    calls: AtomicUsize,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        CountingDenoiser { inner, calls: AtomicUsize::new(0) }
    }
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }
    fn supports(&self, t: usize) -> bool {
        self.inner.supports(t)
    }
    fn predict_final(&self, x: &TrajectoryPoint) -> Result<TokenSeq> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_final(x)
    }
}

/// Counts `next_dist` calls on the wrapped teacher.
pub struct CountingTeacher<'a, T: Teacher + ?Sized> {
    inner: &'a T,
    calls: AtomicUsize,
}

impl<'a, T: Teacher + ?Sized> CountingTeacher<'a, T> {
    pub fn new(inner: &'a T) -> Self {
        CountingTeacher { inner, calls: AtomicUsize::new(0) }
    }
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<T: Teacher + ?Sized> Teacher for CountingTeacher<'_, T> {
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
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.next_dist(condition, prefix)
    }
}

/// Model invocations spent on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepReport {
    pub student: usize,
    pub teacher: usize,
    pub total: usize,
}

impl StepReport {
    pub fn new(student: usize, teacher: usize) -> Self {
        StepReport { student, teacher, total: student + teacher }
    }
}

/// Strictly increasing jump-off timesteps starting at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePath {
    steps: Vec<usize>,
}

impl SamplePath {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.first() != Some(&1) {
            return Err(DdError::InvalidInput(format!("sampling path {steps:?} must start at t=1")));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DdError::InvalidInput(format!("sampling path {steps:?} is not strictly increasing")));
        }
        Ok(SamplePath { steps })
    }

    pub fn one_step() -> Self {
        SamplePath { steps: vec![1] }
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn check_for<D: Denoiser + ?Sized>(&self, model: &D) -> Result<()> {
        match self.steps.iter().find(|&&t| !model.supports(t)) {
            Some(&t) => Err(DdError::InvalidInput(format!("timestep {t} of path {:?} was not trained", self.steps))),
            None => Ok(()),
        }
    }
}

/// `current`'s first `t - 1` tokens followed by the original noise from `t` on.
pub fn jump_back(current: &TokenSeq, x1: &NoiseSeq, t: usize) -> Result<TrajectoryPoint> {
    if t == 0 || t > x1.len() + 1 || current.len() + 1 < t {
        return Err(DdError::out_of_range("t", t, format!("1..={}", x1.len() + 1)));
    }
    TrajectoryPoint::concat(current.head(t - 1)?, x1.tail(t)?.to_vec(), x1.dim(), t)
}

fn check_noise<D: Denoiser + ?Sized>(model: &D, x1: &NoiseSeq) -> Result<()> {
    if x1.len() != model.seq_len() || x1.dim() != model.noise_dim() {
        return Err(DdError::Structural(format!(
            "noise is {}x{}, model expects {}x{}",
            x1.len(),
            x1.dim(),
            model.seq_len(),
            model.noise_dim()
        )));
    }
    Ok(())
}

/// Jumps along `path` from the noise `x1`, re-noising the suffix before each jump.
pub fn sample<D: Denoiser + ?Sized>(model: &D, path: &SamplePath, condition: u32, x1: &NoiseSeq) -> Result<(TokenSeq, StepReport)> {
    path.check_for(model)?;
    check_noise(model, x1)?;
    let counted = CountingDenoiser::new(model);
    let mut current = TokenSeq::new(Vec::new(), condition);
    for &t in path.steps() {
        current = counted.predict_final(&jump_back(&current, x1, t)?)?;
    }
    Ok((current, StepReport::new(counted.calls(), 0)))
}

/// [`sample`] over many noises, batching each jump.
pub fn sample_batch<D: Denoiser + ?Sized>(model: &D, path: &SamplePath, conditions: &[u32], x1s: &[NoiseSeq]) -> Result<Vec<TokenSeq>> {
    path.check_for(model)?;
    if conditions.len() != x1s.len() {
        return Err(DdError::Structural("one condition per noise sequence".into()));
    }
    for x1 in x1s {
        check_noise(model, x1)?;
    }
    let mut current: Vec<TokenSeq> = conditions.iter().map(|&c| TokenSeq::new(Vec::new(), c)).collect();
    for &t in path.steps() {
        let points = current.iter().zip(x1s).map(|(c, x1)| jump_back(c, x1, t)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TrajectoryPoint> = points.iter().collect();
        current = model.predict_final_batch(&refs)?;
    }
    Ok(current)
}

/// How the teacher fills the hand-over segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HybridVariant {
    /// Flow map on the stored noise: the sample stays a function of `X_1`.
    #[default]
    Deterministic,
    /// Categorical draw from the teacher's conditional.
    Stochastic,
}

/// Student jump from `t = 1`, teacher regeneration of positions
/// `t_s..t_k2-1`, then a second student jump from `t_k2`.
/// Costs `2 + (t_k2 - t_s)` invocations.
#[allow(clippy::too_many_arguments)]
pub fn sample_hybrid<D: Denoiser + ?Sized, T: Teacher + ?Sized>(
    model: &D,
    teacher: &T,
    codebook: &Codebook,
    solver: &SolverConfig,
    t_k2: usize,
    t_s: usize,
    condition: u32,
    x1: &NoiseSeq,
    variant: HybridVariant,
    rng: &mut impl Rng,
) -> Result<(TokenSeq, StepReport)> {
    if !(1 < t_s && t_s <= t_k2) {
        return Err(DdError::InvalidInput(format!("hybrid bounds need 1 < t_s <= t_k2, got t_s={t_s}, t_k2={t_k2}")));
    }
    SamplePath::new(vec![1, t_k2])?.check_for(model)?;
    check_noise(model, x1)?;
    let student = CountingDenoiser::new(model);
    let teacher = CountingTeacher::new(teacher);
    let first = student.predict_final(&TrajectoryPoint::pure_noise(x1, condition))?;
    let mut ids = first.ids[..t_s - 1].to_vec();
    for pos in t_s..t_k2 {
        let dist = teacher.next_dist(condition, &ids)?;
        let id = match variant {
            HybridVariant::Deterministic => fm_map(x1.at(pos), &dist, codebook, solver)?,
            HybridVariant::Stochastic => dist.sample_with(rng.random()),
        };
        ids.push(id);
    }
    let prefix = TokenSeq::new(ids, condition);
    let out = student.predict_final(&jump_back(&prefix, x1, t_k2)?)?;
    Ok((out, StepReport::new(student.calls(), teacher.calls())))
}
