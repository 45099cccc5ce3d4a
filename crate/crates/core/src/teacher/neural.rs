use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{check_query, NextTokenDist, Teacher};
use crate::container::{get_params, put_params, Container, ContainerKind, Entry};
use crate::error::{DdError, Result};
use crate::nn::{causal_mask, AdamW, AdamWConfig, Backbone, Bound, Graph, Linear, ParamStore, Tensor, TransformerConfig, Var};
use crate::rng::{rng_from_seed, split};
use crate::{TokenId, TokenSeq};

/// Decoder-only transformer over `[class, q_1, .., q_{n-1}]`; slot `k`
/// predicts `q_{k+1}`.
///
/// Parameter names (`cls_emb`, `tok_emb`, `pos`, the backbone, `head_logits`)
/// are shared with the student so it can start from these weights.
#[derive(Debug, Clone)]
pub struct NeuralTeacher {
    n: usize,
    vocab: usize,
    classes: usize,
    params: ParamStore<f32>,
    layout: Layout,
}

#[derive(Debug, Clone)]
struct Layout {
    cls: usize,
    tok: usize,
    pos: usize,
    backbone: Backbone,
    head: Linear,
}

impl Layout {
    fn lookup(params: &ParamStore<f32>, arch: TransformerConfig) -> Result<Self> {
        let id = |name: &str| params.id(name).ok_or_else(|| DdError::Format(format!("missing parameter `{name}`")));
        Ok(Layout {
            cls: id("cls_emb")?,
            tok: id("tok_emb")?,
            pos: id("pos")?,
            backbone: Backbone::lookup(params, arch)?,
            head: Linear::lookup(params, "head_logits")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTeacherConfig {
    pub arch: TransformerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Effective learning rate (after any batch scaling).
    pub lr: f64,
    pub weight_decay: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for NeuralTeacherConfig {
    fn default() -> Self {
        NeuralTeacherConfig {
            arch: TransformerConfig::default(),
            epochs: 20,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Mean per-token cross-entropy (nats) over training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherTrainReport {
    pub initial_holdout_loss: Option<f64>,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_holdout_loss: Vec<f64>,
    pub steps: u64,
}

impl NeuralTeacher {
    pub fn init(n: usize, vocab: usize, classes: usize, arch: TransformerConfig, seed: u64) -> Result<Self> {
        if n == 0 || vocab == 0 || classes == 0 {
            return Err(DdError::InvalidInput("n, V and class count must be positive".into()));
        }
        arch.validate()?;
        let mut rng = rng_from_seed(seed);
        let d = arch.width;
        let mut params = ParamStore::new();
        params.add("cls_emb", Tensor::randn(&[classes, d], 0.5, &mut rng));
        params.add("tok_emb", Tensor::randn(&[vocab, d], 0.5, &mut rng));
        params.add("pos", Tensor::randn(&[n, d], 0.1, &mut rng));
        Backbone::init(&mut params, arch, &mut rng)?;
        Linear::init(&mut params, "head_logits", d, vocab, 1.0 / (d as f64).sqrt(), &mut rng);
        let layout = Layout::lookup(&params, arch)?;
        Ok(NeuralTeacher { n, vocab, classes, params, layout })
    }

    pub fn arch(&self) -> TransformerConfig {
        self.layout.backbone.config()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Logits `[batch * slots, V]` for `slots = prefix_len + 1`.
    fn logits(&self, g: &mut Graph<f32>, p: &Bound, conds: &[u32], prefixes: &[&[TokenId]]) -> Result<Var> {
        let batch = prefixes.len();
        let slots = prefixes.first().map_or(1, |s| s.len() + 1);
        let mut cls_ids = Vec::with_capacity(batch * slots);
        let mut tok_ids = Vec::with_capacity(batch * slots);
        let mut pos_ids = Vec::with_capacity(batch * slots);
        for (b, prefix) in prefixes.iter().enumerate() {
            if prefix.len() + 1 != slots {
                return Err(DdError::Structural("batched prefixes must share a length".into()));
            }
            for k in 0..slots {
                cls_ids.push((k == 0).then_some(conds[b] as usize));
                tok_ids.push((k > 0).then(|| prefix[k - 1] as usize));
                pos_ids.push(Some(k));
            }
        }
        let l = &self.layout;
        let e_cls = g.embedding(p.var(l.cls), &cls_ids)?;
        let e_tok = g.embedding(p.var(l.tok), &tok_ids)?;
        let e_pos = g.embedding(p.var(l.pos), &pos_ids)?;
        let x = g.add(e_cls, e_tok)?;
        let x = g.add(x, e_pos)?;
        let h = l.backbone.forward(g, p, x, batch, slots, &causal_mask(slots))?;
        l.head.forward(g, p, h)
    }

    /// Summed cross-entropy of whole sequences and the number of tokens scored.
    fn sequence_loss(&self, g: &mut Graph<f32>, p: &Bound, batch: &[&TokenSeq], scale: f32) -> Result<Var> {
        let n = self.n;
        let conds: Vec<u32> = batch.iter().map(|s| s.condition).collect();
        let prefixes: Vec<&[TokenId]> = batch.iter().map(|s| &s.ids[..n - 1]).collect();
        let logits = self.logits(g, p, &conds, &prefixes)?;
        let targets: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().map(|&t| t as usize)).collect();
        let weights = vec![scale; targets.len()];
        g.softmax_cross_entropy(logits, &targets, &weights)
    }

    /// Mean per-token cross-entropy on `data`, in nats.
    pub fn mean_nll(&self, data: &[TokenSeq]) -> Result<f64> {
        if data.is_empty() {
            return Err(DdError::InvalidInput("no sequences to score".into()));
        }
        let mut total = 0.0;
        for chunk in data.chunks(256) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let refs: Vec<&TokenSeq> = chunk.iter().collect();
            let loss = self.sequence_loss(&mut g, &p, &refs, 1.0)?;
            total += g.value(loss).data()[0] as f64;
        }
        Ok(total / (data.len() * self.n) as f64)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::NeuralTeacher);
        c.put("n", Entry::U64(self.n as u64));
        c.put("vocab", Entry::U64(self.vocab as u64));
        c.put("classes", Entry::U64(self.classes as u64));
        put_arch(&mut c, self.arch());
        put_params(&mut c, &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(ContainerKind::NeuralTeacher)?;
        let arch = get_arch(c)?;
        let params = get_params(c)?;
        let layout = Layout::lookup(&params, arch)?;
        let t = NeuralTeacher {
            n: c.usize("n")?,
            vocab: c.usize("vocab")?,
            classes: c.usize("classes")?,
            params,
            layout,
        };
        let d = arch.width;
        let expect = [("cls_emb", [t.classes, d]), ("tok_emb", [t.vocab, d]), ("pos", [t.n, d]), ("head_logits.w", [d, t.vocab])];
        for (name, shape) in expect {
            if t.params.get(name).map(|x| x.shape()) != Some(&shape[..]) {
                return Err(DdError::Format(format!("parameter `{name}` does not have shape {shape:?}")));
            }
        }
        Ok(t)
    }
}

pub(crate) fn put_arch(c: &mut Container, arch: TransformerConfig) {
    c.put("arch.width", Entry::U64(arch.width as u64));
    c.put("arch.heads", Entry::U64(arch.heads as u64));
    c.put("arch.layers", Entry::U64(arch.layers as u64));
    c.put("arch.mlp_ratio", Entry::U64(arch.mlp_ratio as u64));
}

pub(crate) fn get_arch(c: &Container) -> Result<TransformerConfig> {
    Ok(TransformerConfig {
        width: c.usize("arch.width")?,
        heads: c.usize("arch.heads")?,
        layers: c.usize("arch.layers")?,
        mlp_ratio: c.usize("arch.mlp_ratio")?,
    })
}

impl Teacher for NeuralTeacher {
    fn seq_len(&self) -> usize {
        self.n
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn next_dist(&self, condition: u32, prefix: &[TokenId]) -> Result<NextTokenDist> {
        Ok(self.next_dists(condition, &[prefix.to_vec()])?.remove(0))
    }

    fn next_dists(&self, condition: u32, prefixes: &[Vec<TokenId>]) -> Result<Vec<NextTokenDist>> {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, prefix) in prefixes.iter().enumerate() {
            check_query(self.n, self.classes, condition, prefix.len())?;
            if let Some(&bad) = prefix.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(DdError::out_of_range("token id", bad as usize, format!("0..{}", self.vocab)));
            }
            by_len.entry(prefix.len()).or_default().push(i);
        }
        let mut out = vec![None; prefixes.len()];
        for (len, idx) in by_len {
            for chunk in idx.chunks(512) {
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let refs: Vec<&[TokenId]> = chunk.iter().map(|&i| prefixes[i].as_slice()).collect();
                let conds = vec![condition; chunk.len()];
                let logits = self.logits(&mut g, &p, &conds, &refs)?;
                let lv = g.value(logits);
                for (b, &i) in chunk.iter().enumerate() {
                    let row: Vec<f64> = lv.row(b * (len + 1) + len).iter().map(|&v| v as f64).collect();
                    out[i] = Some(NextTokenDist::from_logits(&row)?);
                }
            }
        }
        Ok(out.into_iter().map(|d| d.expect("every prefix scored")).collect())
    }
}

/// Fits a [`NeuralTeacher`] by next-token cross-entropy with AdamW.
///
/// A seeded shuffle holds out `holdout_fraction` of the data; the report
/// tracks its loss before training and after each epoch.
pub fn train_neural_teacher(
    dataset: &[TokenSeq],
    vocab: usize,
    classes: usize,
    config: &NeuralTeacherConfig,
) -> Result<(NeuralTeacher, TeacherTrainReport)> {
    let n = dataset
        .first()
        .ok_or_else(|| DdError::InvalidInput("cannot train a teacher on an empty dataset".into()))?
        .len();
    for s in dataset {
        if s.len() != n {
            return Err(DdError::Structural(format!("dataset mixes sequence lengths {n} and {}", s.len())));
        }
        s.check_vocab(vocab)?;
        if s.condition as usize >= classes {
            return Err(DdError::out_of_range("condition", s.condition as usize, format!("0..{classes}")));
        }
    }
    if config.batch_size == 0 {
        return Err(DdError::InvalidInput("batch size must be positive".into()));
    }
    let mut teacher = NeuralTeacher::init(n, vocab, classes, config.arch, split(config.seed, 0))?;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from_seed(split(config.seed, 1)));
    let holdout_len = if dataset.len() >= 2 && config.holdout_fraction > 0.0 {
        ((dataset.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, dataset.len() - 1)
    } else {
        0
    };
    let holdout: Vec<TokenSeq> = order[..holdout_len].iter().map(|&i| dataset[i].clone()).collect();
    let mut train: Vec<&TokenSeq> = order[holdout_len..].iter().map(|&i| &dataset[i]).collect();

    let mut report = TeacherTrainReport::default();
    if !holdout.is_empty() {
        report.initial_holdout_loss = Some(teacher.mean_nll(&holdout)?);
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &teacher.params,
    );
    let mut shuffle_rng = rng_from_seed(split(config.seed, 2));
    for epoch in 0..config.epochs {
        train.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(config.batch_size) {
            let mut g = Graph::new();
            let p = teacher.params.bind(&mut g, true);
            let scale = 1.0 / (batch.len() * n) as f32;
            let loss = teacher.sequence_loss(&mut g, &p, batch, scale)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(DdError::Training(format!(
                    "teacher loss became {value} at epoch {epoch}, step {}",
                    opt.steps_taken()
                )));
            }
            epoch_loss += value * batch.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads = p.collect(&mut grads, &teacher.params);
            opt.step(&mut teacher.params, &grads)?;
        }
        report.epoch_train_loss.push(epoch_loss / train.len().max(1) as f64);
        if !holdout.is_empty() {
            report.epoch_holdout_loss.push(teacher.mean_nll(&holdout)?);
        }
        log::debug!("teacher epoch {epoch}: train {:.4}", report.epoch_train_loss.last().unwrap());
    }
    report.steps = opt.steps_taken();
    Ok((teacher, report))
}
