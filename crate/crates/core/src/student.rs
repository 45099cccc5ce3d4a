//! The distilled student and its training loop.
//!
//! The student reads a trajectory point `X_t` (data tokens before `t`, noise
//! from `t` on) and predicts the whole final sequence in one forward pass.
//!
//! Slot layout over `n + 1` positions:
//!
//! ```text
//! slot 0     : class embedding                         + noise ε_1 (if 1 >= t)
//! slot k > 0 : token embedding of q_k + data type      (k < t)
//!              noise type                              (k >= t)
//!              + noise ε_{k+1} (if k + 1 >= t and k < n)
//! ```
//!
//! Position `i` is decoded from slot `i - 1`, which under a causal mask sees
//! the data prefix and `ε_t..ε_i`: exactly what the flow map makes `q_i`
//! depend on. Slots `0..n-1` line up with the teacher's next-token slots, so
//! the teacher's weights transfer unchanged and the positional table gets one
//! extra row.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::container::{get_params, put_params, Container, ContainerKind, Entry};
use crate::error::{DdError, Result};
use crate::nn::{causal_mask, AdamW, AdamWConfig, Backbone, Bound, Ema, Graph, Linear, ParamStore, Tensor, TransformerConfig, Var};
use crate::rng::{rng_from_seed, split};
use crate::teacher::{AnyTeacher, NeuralTeacher, Teacher};
use crate::trajgen::{build_xt, PairRecord, PairStore};
use crate::{Codebook, Slot, TokenId, TokenSeq, TrajectoryPoint};

const DATA_TYPE: usize = 0;
const NOISE_TYPE: usize = 1;
const FRESH_STD: f64 = 1e-2;

/// Trained timesteps `t_1 = 1 < t_2 < ... < t_L` with loss weights `λ(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSchedule {
    steps: Vec<usize>,
    weights: Vec<f64>,
}

impl TimestepSchedule {
    pub fn new(steps: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(DdError::InvalidInput("timestep schedule is empty".into()));
        }
        if steps[0] != 1 {
            return Err(DdError::InvalidInput(format!(
                "schedule must start at t=1 so one-step generation is trained, got {}",
                steps[0]
            )));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DdError::InvalidInput(format!("schedule {steps:?} is not strictly increasing")));
        }
        if weights.len() != steps.len() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(DdError::InvalidInput("schedule weights must be positive, one per timestep".into()));
        }
        Ok(TimestepSchedule { steps, weights })
    }

    /// `λ(t) = 1` everywhere.
    pub fn uniform(steps: Vec<usize>) -> Result<Self> {
        let w = vec![1.0; steps.len()];
        Self::new(steps, w)
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        match self.steps.last() {
            Some(&last) if last > n => Err(DdError::out_of_range("schedule timestep", last, format!("1..={n}"))),
            _ => Ok(()),
        }
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn contains(&self, t: usize) -> bool {
        self.steps.binary_search(&t).is_ok()
    }

    pub fn weight(&self, t: usize) -> Option<f64> {
        self.steps.binary_search(&t).ok().map(|i| self.weights[i])
    }

    /// Uniform draw over the schedule.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.steps[rng.random_range(0..self.steps.len())]
    }

    /// The schedule's middle timestep; `n + 1` (logits everywhere) for a single step.
    pub fn default_split(&self, n: usize) -> usize {
        if self.steps.len() < 2 {
            n + 1
        } else {
            self.steps[self.steps.len() / 2]
        }
    }
}

/// Static shape of a student.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentSpec {
    pub n: usize,
    pub classes: usize,
    pub arch: TransformerConfig,
    pub schedule: TimestepSchedule,
    /// Logits head for `t < split`, embedding head otherwise.
    pub split: usize,
    pub codebook: Codebook,
}

impl StudentSpec {
    pub fn vocab(&self) -> usize {
        self.codebook.len()
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.classes == 0 {
            return Err(DdError::InvalidInput("n and class count must be positive".into()));
        }
        self.arch.validate()?;
        self.schedule.check_len(self.n)?;
        if self.split == 0 || self.split > self.n + 1 {
            return Err(DdError::out_of_range("split point", self.split, format!("1..={}", self.n + 1)));
        }
        Ok(())
    }
}

/// How the logits head turns into a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadDecoding {
    #[default]
    Argmax,
    Sample,
}

/// Raw head outputs for all `n` positions of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    /// `n * V`, row-major.
    pub logits: Vec<f32>,
    /// `n * C`, row-major.
    pub embeds: Vec<f32>,
}

#[derive(Debug, Clone)]
struct Layout {
    cls: usize,
    tok: usize,
    token_type: usize,
    noise_in: usize,
    pos: usize,
    backbone: Backbone,
    head_logits: Linear,
    head_embed: Linear,
}

impl Layout {
    fn lookup(params: &ParamStore<f32>, arch: TransformerConfig) -> Result<Self> {
        let id = |name: &str| params.id(name).ok_or_else(|| DdError::Format(format!("missing parameter `{name}`")));
        Ok(Layout {
            cls: id("cls_emb")?,
            tok: id("tok_emb")?,
            token_type: id("token_type")?,
            noise_in: id("noise_in")?,
            pos: id("pos")?,
            backbone: Backbone::lookup(params, arch)?,
            head_logits: Linear::lookup(params, "head_logits")?,
            head_embed: Linear::lookup(params, "head_embed")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StudentModel {
    spec: StudentSpec,
    params: ParamStore<f32>,
    layout: Layout,
}

impl StudentModel {
    /// Fresh student; with a neural teacher of the same architecture, every
    /// shared parameter is copied and only the extra pieces start random.
    pub fn init(spec: StudentSpec, teacher: Option<&NeuralTeacher>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (n, v, c, d) = (spec.n, spec.vocab(), spec.dim(), spec.arch.width);
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        params.add("cls_emb", Tensor::randn(&[spec.classes, d], 0.5, &mut rng));
        params.add("tok_emb", Tensor::randn(&[v, d], 0.5, &mut rng));
        params.add("token_type", Tensor::randn(&[2, d], FRESH_STD, &mut rng));
        params.add("noise_in", Tensor::randn(&[c, d], 0.1, &mut rng));
        params.add("pos", Tensor::randn(&[n + 1, d], 0.1, &mut rng));
        Backbone::init(&mut params, spec.arch, &mut rng)?;
        Linear::init(&mut params, "head_logits", d, v, 1.0 / (d as f64).sqrt(), &mut rng);
        Linear::init(&mut params, "head_embed", d, c, 1.0 / (d as f64).sqrt(), &mut rng);

        if let Some(t) = teacher {
            if t.arch() != spec.arch || t.seq_len() != n || t.vocab_size() != v || t.num_classes() != spec.classes {
                return Err(DdError::Structural(format!(
                    "teacher (n={}, V={}, classes={}, {:?}) does not match student (n={n}, V={v}, classes={}, {:?})",
                    t.seq_len(),
                    t.vocab_size(),
                    t.num_classes(),
                    t.arch(),
                    spec.classes,
                    spec.arch
                )));
            }
            for (name, tensor) in t.params().names().iter().zip(t.params().tensors()) {
                if name == "pos" {
                    let mut extended = params.get("pos").expect("pos registered").clone();
                    extended.data_mut()[..n * d].copy_from_slice(tensor.data());
                    for x in &mut extended.data_mut()[n * d..] {
                        *x *= (FRESH_STD / 0.1) as f32;
                    }
                    params.set("pos", extended)?;
                } else {
                    params.set(name, tensor.clone())?;
                }
            }
        }
        let layout = Layout::lookup(&params, spec.arch)?;
        Ok(StudentModel { spec, params, layout })
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn seq_len(&self) -> usize {
        self.spec.n
    }

    pub fn schedule(&self) -> &TimestepSchedule {
        &self.spec.schedule
    }

    pub fn codebook(&self) -> &Codebook {
        &self.spec.codebook
    }

    fn check_point(&self, x: &TrajectoryPoint) -> Result<()> {
        let n = self.spec.n;
        if x.len() != n || x.dim() != self.spec.dim() {
            return Err(DdError::Structural(format!(
                "trajectory point is {}x{}, student expects {n}x{}",
                x.len(),
                x.dim(),
                self.spec.dim()
            )));
        }
        if x.t() == 0 || x.t() > n + 1 {
            return Err(DdError::out_of_range("t", x.t(), format!("1..={}", n + 1)));
        }
        if x.condition() as usize >= self.spec.classes {
            return Err(DdError::out_of_range("condition", x.condition() as usize, format!("0..{}", self.spec.classes)));
        }
        x.prefix().check_vocab(self.spec.vocab())
    }

    /// Head outputs `([B*n, V], [B*n, C])`, row `b*n + i - 1` for position `i`.
    fn forward(&self, g: &mut Graph<f32>, p: &Bound, points: &[&TrajectoryPoint]) -> Result<(Var, Var)> {
        let (n, c) = (self.spec.n, self.spec.dim());
        let slots = n + 1;
        let rows = points.len() * slots;
        let mut cls_ids = Vec::with_capacity(rows);
        let mut tok_ids = Vec::with_capacity(rows);
        let mut type_ids = Vec::with_capacity(rows);
        let mut pos_ids = Vec::with_capacity(rows);
        let mut noise = vec![0f32; rows * c];
        let mut out_rows = Vec::with_capacity(points.len() * n);
        for (b, x) in points.iter().enumerate() {
            self.check_point(x)?;
            let t = x.t();
            for k in 0..slots {
                let row = b * slots + k;
                cls_ids.push((k == 0).then_some(x.condition() as usize));
                tok_ids.push(if k >= 1 && k < t { Some(x.prefix().ids[k - 1] as usize) } else { None });
                type_ids.push((k >= 1).then_some(if k < t { DATA_TYPE } else { NOISE_TYPE }));
                pos_ids.push(Some(k));
                if k < n && k + 1 >= t {
                    if let Slot::Noise(e) = x.slot(k + 1) {
                        noise[row * c..(row + 1) * c].copy_from_slice(e);
                    }
                }
                if k < n {
                    out_rows.push(row);
                }
            }
        }
        let l = &self.layout;
        let mut h = g.embedding(p.var(l.cls), &cls_ids)?;
        for (table, ids) in [(l.tok, &tok_ids), (l.token_type, &type_ids), (l.pos, &pos_ids)] {
            let e = g.embedding(p.var(table), ids)?;
            h = g.add(h, e)?;
        }
        let noise = g.input(Tensor::new(vec![rows, c], noise)?);
        let noise = g.matmul(noise, p.var(l.noise_in))?;
        h = g.add(h, noise)?;
        let h = l.backbone.forward(g, p, h, points.len(), slots, &causal_mask(slots))?;
        let h = g.gather_rows(h, &out_rows)?;
        let logits = l.head_logits.forward(g, p, h)?;
        let embeds = l.head_embed.forward(g, p, h)?;
        Ok((logits, embeds))
    }

    /// One forward pass per point, batched.
    pub fn f_theta(&self, points: &[&TrajectoryPoint]) -> Result<Vec<StudentOutput>> {
        let (n, v, c) = (self.spec.n, self.spec.vocab(), self.spec.dim());
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (logits, embeds) = self.forward(&mut g, &p, points)?;
        let (lv, ev) = (g.value(logits).data(), g.value(embeds).data());
        Ok((0..points.len())
            .map(|b| StudentOutput {
                logits: lv[b * n * v..(b + 1) * n * v].to_vec(),
                embeds: ev[b * n * c..(b + 1) * n * c].to_vec(),
            })
            .collect())
    }

    /// Whether position decoding at time `t` uses the logits head.
    pub fn uses_logits(&self, t: usize) -> bool {
        t < self.spec.split
    }

    fn decode(&self, x: &TrajectoryPoint, out: &StudentOutput, decoding: HeadDecoding, rng: Option<&mut dyn rand::RngCore>) -> TokenSeq {
        let (n, v, c) = (self.spec.n, self.spec.vocab(), self.spec.dim());
        let mut ids = x.prefix().ids.clone();
        let use_logits = self.uses_logits(x.t());
        let mut rng = rng;
        for i in x.t()..=n {
            let id = if use_logits {
                let row = &out.logits[(i - 1) * v..i * v];
                match (decoding, rng.as_deref_mut()) {
                    (HeadDecoding::Sample, Some(r)) => sample_logits(row, r.random()),
                    _ => argmax(row),
                }
            } else {
                let e: Vec<f64> = out.embeds[(i - 1) * c..i * c].iter().map(|&v| v as f64).collect();
                self.spec.codebook.nearest(&e)
            };
            ids.push(id);
        }
        TokenSeq::new(ids, x.condition())
    }

    /// `Concat(X_t[:t-1], f_θ(X_t)[t:])` with argmax decoding.
    pub fn predict_final(&self, x: &TrajectoryPoint) -> Result<TokenSeq> {
        Ok(self.predict_final_batch(&[x])?.remove(0))
    }

    pub fn predict_final_batch(&self, points: &[&TrajectoryPoint]) -> Result<Vec<TokenSeq>> {
        let outs = self.f_theta(points)?;
        Ok(points
            .iter()
            .zip(&outs)
            .map(|(x, o)| self.decode(x, o, HeadDecoding::Argmax, None))
            .collect())
    }

    /// As [`StudentModel::predict_final`], drawing logits-head tokens from their softmax.
    pub fn predict_final_sampled(&self, x: &TrajectoryPoint, rng: &mut dyn rand::RngCore) -> Result<TokenSeq> {
        let out = self.f_theta(&[x])?.remove(0);
        Ok(self.decode(x, &out, HeadDecoding::Sample, Some(rng)))
    }

    /// Distillation loss of one batch, scaled by `1 / total` so chunk losses add up.
    fn batch_loss(&self, g: &mut Graph<f32>, p: &Bound, items: &[(&PairRecord, usize)], weights: LossWeights, total: usize) -> Result<Var> {
        let (n, c) = (self.spec.n, self.spec.dim());
        let points = items.iter().map(|(pair, t)| build_xt(pair, *t)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TrajectoryPoint> = points.iter().collect();
        let (logits, embeds) = self.forward(g, p, &refs)?;
        let mut targets = Vec::with_capacity(items.len() * n);
        let mut target_emb = Vec::with_capacity(items.len() * n * c);
        let mut w_ce = Vec::with_capacity(items.len() * n);
        let mut w_emb = Vec::with_capacity(items.len() * n);
        for (pair, t) in items {
            let lambda = self
                .spec
                .schedule
                .weight(*t)
                .or((*t == n + 1).then_some(1.0))
                .ok_or_else(|| DdError::out_of_range("t", *t, format!("schedule {:?}", self.spec.schedule.steps())))?;
            let supervised = (n + 1 - t) as f64;
            for i in 1..=n {
                let id = pair.data.ids[i - 1];
                targets.push(id as usize);
                target_emb.extend_from_slice(self.spec.codebook.entry(id));
                let w = if i >= *t { lambda / (supervised * total as f64) } else { 0.0 };
                w_ce.push((w * weights.logits) as f32);
                w_emb.push((w * weights.embed) as f32);
            }
        }
        let ce = g.softmax_cross_entropy(logits, &targets, &w_ce)?;
        let mse = g.squared_error(embeds, &target_emb, &w_emb)?;
        g.add(ce, mse)
    }

    /// `λ(t) [w_emb · MSE(embeds) + w_logit · CE(logits)]`, averaged over
    /// positions `>= t`, with gradients per parameter.
    pub fn distill_loss(&self, pair: &PairRecord, t: usize, weights: LossWeights) -> Result<(f64, Vec<Vec<f32>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let loss = self.batch_loss(&mut g, &p, &[(pair, t)], weights, 1)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(DdError::Training(format!("distillation loss is {value} at t={t}")));
        }
        let mut grads = g.backward(loss)?;
        Ok((value, p.collect(&mut grads, &self.params)))
    }

    pub fn to_container(&self, teacher_fingerprint: &str) -> Container {
        let s = &self.spec;
        let mut c = Container::new(ContainerKind::Student);
        c.put("n", Entry::U64(s.n as u64));
        c.put("classes", Entry::U64(s.classes as u64));
        crate::teacher::put_arch(&mut c, s.arch);
        c.put("schedule", Entry::U32s(s.schedule.steps().iter().map(|&t| t as u32).collect()));
        c.put("lambda", Entry::F64s(s.schedule.weights().to_vec()));
        c.put("split", Entry::U64(s.split as u64));
        c.put(
            "codebook",
            Entry::Tensor(Tensor::new(vec![s.vocab(), s.dim()], s.codebook.entries().to_vec()).expect("codebook shape")),
        );
        c.put("teacher_fingerprint", Entry::Str(teacher_fingerprint.to_string()));
        put_params(&mut c, &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(ContainerKind::Student)?;
        let cb = c.tensor("codebook")?;
        if cb.shape().len() != 2 {
            return Err(DdError::Format("student codebook is not a matrix".into()));
        }
        let spec = StudentSpec {
            n: c.usize("n")?,
            classes: c.usize("classes")?,
            arch: crate::teacher::get_arch(c)?,
            schedule: TimestepSchedule::new(
                c.u32s("schedule")?.iter().map(|&t| t as usize).collect(),
                c.f64s("lambda")?.to_vec(),
            )?,
            split: c.usize("split")?,
            codebook: Codebook::new(cb.data().to_vec(), cb.shape()[1])?,
        };
        spec.validate()?;
        let params = get_params(c)?;
        let layout = Layout::lookup(&params, spec.arch)?;
        let (n, v, dim, d) = (spec.n, spec.vocab(), spec.dim(), spec.arch.width);
        let expect = [
            ("cls_emb", vec![spec.classes, d]),
            ("tok_emb", vec![v, d]),
            ("token_type", vec![2, d]),
            ("noise_in", vec![dim, d]),
            ("pos", vec![n + 1, d]),
            ("head_logits.w", vec![d, v]),
            ("head_embed.w", vec![d, dim]),
        ];
        for (name, shape) in expect {
            if params.get(name).map(|x| x.shape()) != Some(&shape[..]) {
                return Err(DdError::Format(format!("parameter `{name}` does not have shape {shape:?}")));
            }
        }
        Ok(StudentModel { spec, params, layout })
    }

    pub fn teacher_fingerprint(c: &Container) -> Result<String> {
        Ok(c.str("teacher_fingerprint")?.to_string())
    }
}

fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as TokenId
}

fn sample_logits(row: &[f32], u: f64) -> TokenId {
    let logits: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    match crate::teacher::NextTokenDist::from_logits(&logits) {
        Ok(d) => d.sample_with(u),
        Err(_) => argmax(row),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub embed: f64,
    pub logits: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { embed: 1.0, logits: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Effective learning rate (after any batch scaling).
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub loss: LossWeights,
    pub seed: u64,
    /// Each batch is split into this many gradient chunks, evaluated in
    /// parallel and summed in a fixed order.
    pub grad_chunks: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 10,
            batch_size: 512,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            loss: LossWeights::default(),
            seed: 0,
            grad_chunks: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistillReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
    /// How often each schedule timestep was drawn, in schedule order.
    pub timestep_counts: Vec<u64>,
}

/// Per-epoch callback receiving the epoch index and current EMA weights.
pub type EpochHook<'a> = dyn FnMut(usize, &StudentModel) -> Result<()> + 'a;

/// Distills `store` into a student. A neural teacher also provides the
/// initial weights; the store must carry the teacher's fingerprint.
/// Returns the EMA weights.
pub fn train_student(
    store: &PairStore,
    teacher: &AnyTeacher,
    spec: StudentSpec,
    config: &DistillConfig,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<(StudentModel, DistillReport)> {
    store.check_fingerprint(&teacher.fingerprint())?;
    let h = &store.header;
    if h.n != spec.n || h.vocab != spec.vocab() || h.dim != spec.dim() {
        return Err(DdError::Structural(format!(
            "pair store is n={} V={} C={}, student is n={} V={} C={}",
            h.n,
            h.vocab,
            h.dim,
            spec.n,
            spec.vocab(),
            spec.dim()
        )));
    }
    if store.is_empty() || config.batch_size == 0 || config.grad_chunks == 0 {
        return Err(DdError::InvalidInput("need pairs, a positive batch size and at least one gradient chunk".into()));
    }
    let mut model = StudentModel::init(spec, teacher.as_neural(), split(config.seed, 0))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let mut ema = Ema::new(&model.params, config.ema_decay);
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut rng = rng_from_seed(split(config.seed, 1));
    let mut report = DistillReport {
        timestep_counts: vec![0; model.spec.schedule.steps().len()],
        ..DistillReport::default()
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<(&PairRecord, usize)> = batch
                .iter()
                .map(|&i| {
                    let k = rng.random_range(0..model.spec.schedule.steps().len());
                    report.timestep_counts[k] += 1;
                    (&store.records[i], model.spec.schedule.steps()[k])
                })
                .collect();
            let chunk = items.len().div_ceil(config.grad_chunks);
            let parts = items
                .par_chunks(chunk)
                .map(|part| {
                    let mut g = Graph::new();
                    let p = model.params.bind(&mut g, true);
                    let loss = model.batch_loss(&mut g, &p, part, config.loss, items.len())?;
                    let value = g.value(loss).data()[0] as f64;
                    let mut grads = g.backward(loss)?;
                    Ok((value, p.collect(&mut grads, &model.params)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut parts = parts.into_iter();
            let (mut loss, mut grads) = parts.next().expect("at least one chunk");
            for (l, gs) in parts {
                loss += l;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(DdError::Training(format!(
                    "distillation loss became {loss} at epoch {epoch}, step {}",
                    opt.steps_taken()
                )));
            }
            opt.step(&mut model.params, &grads)?;
            ema.update(&model.params)?;
            total += loss * items.len() as f64;
        }
        report.epoch_loss.push(total / store.len() as f64);
        log::debug!("distill epoch {epoch}: loss {:.5}", total / store.len() as f64);
        if let Some(h) = hook.as_deref_mut() {
            let mut snapshot = model.clone();
            snapshot.params = ema.shadow().clone();
            h(epoch, &snapshot)?;
        }
    }
    report.steps = opt.steps_taken();
    ema.swap_in(&mut model.params)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::SolverConfig;
    use crate::teacher::{train_neural_teacher, NeuralTeacherConfig};
    use crate::toy;
    use crate::trajgen::{generate_dataset, generate_pair, ConditionSampler};
    use crate::NoiseSeq;

    fn tiny_arch() -> TransformerConfig {
        TransformerConfig { width: 16, heads: 2, layers: 1, mlp_ratio: 2 }
    }

    fn spec(n: usize, cb: Codebook, steps: Vec<usize>) -> StudentSpec {
        let schedule = TimestepSchedule::uniform(steps).unwrap();
        StudentSpec { n, classes: 1, arch: tiny_arch(), split: schedule.default_split(n), schedule, codebook: cb }
    }

    #[test]
    fn schedule_rules() {
        assert!(TimestepSchedule::uniform(vec![2, 3]).is_err());
        assert!(TimestepSchedule::uniform(vec![1, 3, 3]).is_err());
        assert!(TimestepSchedule::new(vec![1, 2], vec![1.0, 0.0]).is_err());
        let s = TimestepSchedule::uniform(vec![1, 3]).unwrap();
        assert_eq!(s.default_split(4), 3);
        assert_eq!(TimestepSchedule::uniform(vec![1]).unwrap().default_split(4), 5);
        assert!(s.check_len(2).is_err());
    }

    #[test]
    fn schedule_draws_are_uniform() {
        let s = TimestepSchedule::uniform(vec![1, 2]).unwrap();
        let mut rng = rng_from_seed(4);
        let ones = (0..10_000).filter(|_| s.sample(&mut rng) == 1).count();
        assert!((ones as f64 / 1e4 - 0.5).abs() <= 0.05);
    }

    #[test]
    fn output_shapes_and_prefix_copy() {
        let cb = Codebook::random(5, 3, 1).unwrap();
        let m = StudentModel::init(spec(4, cb, vec![1, 2, 3]), None, 7).unwrap();
        let noise = NoiseSeq::from_seed(3, 4, 3);
        for t in 1..=5 {
            let prefix = TokenSeq::new((0..t as u32 - 1).map(|i| i % 5).collect(), 0);
            let x = TrajectoryPoint::concat(prefix.clone(), noise.tail(t).unwrap().to_vec(), 3, t).unwrap();
            let out = m.f_theta(&[&x]).unwrap().remove(0);
            assert_eq!(out.logits.len(), 4 * 5);
            assert_eq!(out.embeds.len(), 4 * 3);
            let pred = m.predict_final(&x).unwrap();
            assert_eq!(pred.len(), 4);
            assert_eq!(&pred.ids[..t - 1], &prefix.ids[..]);
        }
    }

    #[test]
    fn later_noise_only_moves_later_positions() {
        let cb = Codebook::random(4, 2, 2).unwrap();
        let m = StudentModel::init(spec(4, cb, vec![1]), None, 3).unwrap();
        let noise = NoiseSeq::from_seed(1, 4, 2);
        let mut swapped = noise.values().to_vec();
        swapped.swap(4, 6);
        swapped.swap(5, 7);
        let a = TrajectoryPoint::concat(TokenSeq::new(vec![1], 0), noise.tail(2).unwrap().to_vec(), 2, 2).unwrap();
        let b = TrajectoryPoint::concat(TokenSeq::new(vec![1], 0), swapped[2..].to_vec(), 2, 2).unwrap();
        let (oa, ob) = (m.f_theta(&[&a]).unwrap().remove(0), m.f_theta(&[&b]).unwrap().remove(0));
        // Noise at positions 3 and 4 was permuted: outputs for positions 1 and 2 are untouched.
        assert_eq!(&oa.logits[..2 * 4], &ob.logits[..2 * 4]);
        assert_ne!(&oa.logits[2 * 4..], &ob.logits[2 * 4..]);
    }

    #[test]
    fn zero_heads_give_uniform_logits_and_zero_embeddings() {
        let cb = Codebook::random(4, 2, 2).unwrap();
        let mut m = StudentModel::init(spec(3, cb, vec![1]), None, 3).unwrap();
        for name in ["head_logits.w", "head_logits.b", "head_embed.w", "head_embed.b"] {
            let shape = m.params().get(name).unwrap().shape().to_vec();
            m.params_mut().set(name, Tensor::zeros(&shape)).unwrap();
        }
        let x = TrajectoryPoint::pure_noise(&NoiseSeq::from_seed(0, 3, 2), 0);
        let out = m.f_theta(&[&x]).unwrap().remove(0);
        assert!(out.logits.iter().all(|&v| v == 0.0));
        assert!(out.embeds.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_data_point_is_returned_unchanged() {
        let cb = Codebook::random(3, 2, 5).unwrap();
        let m = StudentModel::init(spec(3, cb, vec![1]), None, 1).unwrap();
        let data = TokenSeq::new(vec![2, 0, 1], 0);
        assert_eq!(m.predict_final(&TrajectoryPoint::pure_data(data.clone(), 2)).unwrap(), data);
    }

    fn pair_for(n: usize) -> PairRecord {
        let t = toy::deterministic(&vec![1; n], 4).unwrap();
        generate_pair(&t, &Codebook::random(4, 2, 0).unwrap(), 0, 3, &SolverConfig::default()).unwrap()
    }

    #[test]
    fn uniform_logits_cost_log_v() {
        let cb = Codebook::random(4, 2, 0).unwrap();
        let mut m = StudentModel::init(spec(3, cb.clone(), vec![1, 2, 3]), None, 3).unwrap();
        for name in ["head_logits.w", "head_logits.b"] {
            let shape = m.params().get(name).unwrap().shape().to_vec();
            m.params_mut().set(name, Tensor::zeros(&shape)).unwrap();
        }
        // Embedding head emits exactly the target entry, so only the logits term remains.
        m.params_mut().set("head_embed.w", Tensor::zeros(&[16, 2])).unwrap();
        m.params_mut().set("head_embed.b", Tensor::new(vec![2], cb.entry(1).to_vec()).unwrap()).unwrap();
        let pair = pair_for(3);
        let (loss, _) = m.distill_loss(&pair, 1, LossWeights { embed: 1.0, logits: 1.0 }).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-5, "{loss}");
    }

    #[test]
    fn empty_suffix_has_zero_loss() {
        let cb = Codebook::random(4, 2, 0).unwrap();
        let m = StudentModel::init(spec(3, cb, vec![1, 2, 3]), None, 3).unwrap();
        let pair = pair_for(3);
        let (l4, _) = m.distill_loss(&pair, 4, LossWeights::default()).unwrap();
        assert_eq!(l4, 0.0);
        assert!(m.distill_loss(&pair, 5, LossWeights::default()).is_err());
        let (l1, grads) = m.distill_loss(&pair, 1, LossWeights::default()).unwrap();
        assert!(l1 > 0.0);
        assert!(grads.iter().any(|g| g.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cb = Codebook::random(3, 2, 5).unwrap();
        let m = StudentModel::init(spec(3, cb, vec![1, 2]), None, 1).unwrap();
        let c = Container::from_bytes(&m.to_container("abc").to_bytes()).unwrap();
        let back = StudentModel::from_container(&c).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.spec(), m.spec());
        assert_eq!(StudentModel::teacher_fingerprint(&c).unwrap(), "abc");
    }

    #[test]
    fn teacher_weights_are_inherited() {
        let cb = Codebook::random(3, 2, 5).unwrap();
        let teacher = NeuralTeacher::init(3, 3, 1, tiny_arch(), 9).unwrap();
        let m = StudentModel::init(spec(3, cb, vec![1]), Some(&teacher), 1).unwrap();
        assert_eq!(m.params().get("block0.attn.q.w"), teacher.params().get("block0.attn.q.w"));
        let pos = m.params().get("pos").unwrap();
        assert_eq!(&pos.data()[..3 * 16], teacher.params().get("pos").unwrap().data());
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let t: AnyTeacher = toy::sticky_markov(2, 2, 0.9).unwrap().into();
        let cb = Codebook::line(2).unwrap();
        let store = generate_dataset(&t, &cb, 8, ConditionSampler::Fixed(0), 0, &SolverConfig::default(), [1; 32]).unwrap();
        let r = train_student(&store, &t, spec(2, cb, vec![1]), &DistillConfig::default(), None);
        assert!(matches!(r, Err(DdError::FingerprintMismatch { .. })));
    }

    #[test]
    fn tiny_correlated_task_is_learned() {
        let t: AnyTeacher = toy::sticky_markov(2, 2, 0.9).unwrap().into();
        let cb = Codebook::line(2).unwrap();
        let cfg = SolverConfig { steps: 32, ..SolverConfig::default() };
        let store = generate_dataset(&t, &cb, 2000, ConditionSampler::Fixed(0), 1, &cfg, t.fingerprint()).unwrap();
        let dc = DistillConfig { epochs: 15, batch_size: 64, lr: 3e-3, ema_decay: 0.99, seed: 2, ..DistillConfig::default() };
        let (m, report) = train_student(&store, &t, spec(2, cb, vec![1, 2]), &dc, None).unwrap();
        assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
        let agree = (0..400)
            .filter(|&seed| {
                let pair = generate_pair(&t, m.codebook(), 0, 10_000 + seed, &cfg).unwrap();
                m.predict_final(&TrajectoryPoint::pure_noise(&pair.noise, 0)).unwrap() == pair.data
            })
            .count();
        assert!(agree >= 360, "only {agree}/400 one-step predictions match the trajectory");
    }

    #[test]
    fn inherited_logits_match_teacher_at_last_position() {
        let teacher_t = toy::sticky_markov(3, 3, 0.8).unwrap();
        let data = toy::sample_dataset(&teacher_t, 600, 1, 5).unwrap();
        let cfg = NeuralTeacherConfig { arch: tiny_arch(), epochs: 15, batch_size: 32, lr: 5e-3, seed: 1, ..NeuralTeacherConfig::default() };
        let (teacher, _) = train_neural_teacher(&data, 3, 1, &cfg).unwrap();
        let held = toy::sample_dataset(&teacher_t, 300, 1, 99).unwrap();
        let cb = Codebook::line(3).unwrap();
        let m = StudentModel::init(spec(3, cb, vec![1]), Some(&teacher), 4).unwrap();
        let (mut ce_teacher, mut ce_student) = (0.0, 0.0);
        for (i, s) in held.iter().enumerate() {
            let p = teacher.next_dist(0, &s.ids[..2]).unwrap();
            ce_teacher -= p.prob(s.ids[2]).ln();
            let noise = NoiseSeq::from_seed(i as u64, 3, 1);
            let x = TrajectoryPoint::concat(s.head(2).unwrap(), noise.tail(3).unwrap().to_vec(), 1, 3).unwrap();
            let out = m.f_theta(&[&x]).unwrap().remove(0);
            let row: Vec<f64> = out.logits[2 * 3..].iter().map(|&v| v as f64).collect();
            let q = crate::teacher::NextTokenDist::from_logits(&row).unwrap();
            ce_student -= q.prob(s.ids[2]).ln();
        }
        assert!((ce_student - ce_teacher).abs() <= 0.1 * ce_teacher, "{ce_student} vs {ce_teacher}");
    }
}
