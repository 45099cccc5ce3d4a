//! The `dd` command line: configuration files, pipeline subcommands,
//! manifests, JSONL logs and plot output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::baselines::{MarginalTable, OneStepStarSystem, SkipNSystem};
use crate::container::{sha256_hex, Container};
use crate::error::{DdError, Result};
use crate::eval::{evaluate_run, exact_joint, DenoiserSystem, EvalReport, HybridSystem, SystemUnderTest, TeacherSystem};
use crate::flowmatch::{Scheme, SolverConfig};
use crate::nn::TransformerConfig;
use crate::rng::{rng_from_seed, split};
use crate::sampler::{jump_back, sample, sample_hybrid, HybridVariant, SamplePath, StepReport};
use crate::student::{train_student, DistillConfig, HeadDecoding, LossWeights, StudentModel, StudentSpec, TimestepSchedule};
use crate::teacher::{fit_tabular, train_neural_teacher, AnyTeacher, NeuralTeacherConfig, Teacher};
use crate::trajgen::{generate_dataset, ConditionSampler, PairStore};
use crate::{toy, Codebook, NoiseSeq, TokenSeq};

pub const TEACHER_FILE: &str = "teacher.ddtc";
pub const PAIRS_FILE: &str = "pairs.ddpr";
pub const STUDENT_FILE: &str = "student.ddtc";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const EVAL_FILE: &str = "eval.txt";
pub const RESULTS_FILE: &str = "results.csv";
pub const PLOT_CSV_FILE: &str = "plot.csv";
pub const PLOT_SVG_FILE: &str = "plot.svg";
pub const LOG_FILE: &str = "log.jsonl";

/// Every accepted key with its default.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("domain.n", "4"),
    ("domain.vocab", "4"),
    ("domain.dim", "1"),
    ("domain.classes", "1"),
    // `random`, `line`, or a path to a saved codebook
    ("domain.codebook", "line"),
    ("domain.codebook_seed", "7"),
    // sticky | random | tabular | neural
    ("teacher.kind", "sticky"),
    ("teacher.stay", "0.85"),
    ("teacher.concentration", "0.5"),
    ("teacher.alpha", "0"),
    // training corpus for tabular/neural: a file, or samples of teacher.corpus_source
    ("teacher.corpus", ""),
    ("teacher.corpus_source", "sticky"),
    ("teacher.corpus_size", "10000"),
    ("teacher.width", "32"),
    ("teacher.heads", "4"),
    ("teacher.layers", "2"),
    ("teacher.mlp_ratio", "4"),
    ("teacher.epochs", "20"),
    ("teacher.batch", "64"),
    ("teacher.lr", "3e-3"),
    ("teacher.weight_decay", "0"),
    ("teacher.holdout", "0.1"),
    ("solver.scheme", "heun"),
    ("solver.steps", "64"),
    ("solver.t_end", "0.9999"),
    ("data.count", "20000"),
    // `uniform` or a fixed class index
    ("data.condition", "uniform"),
    // `all` (1..=n) or a comma list
    ("train.schedule", "all"),
    // `uniform` or a comma list matching the schedule
    ("train.weights", "uniform"),
    // `auto` or a timestep in 1..=n+1
    ("train.split", "auto"),
    ("train.width", "64"),
    ("train.heads", "4"),
    ("train.layers", "2"),
    ("train.mlp_ratio", "4"),
    ("train.epochs", "12"),
    ("train.batch", "256"),
    ("train.lr", "2e-3"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.95"),
    ("train.weight_decay", "0"),
    ("train.ema_decay", "0.99"),
    ("train.loss_embed", "1.0"),
    ("train.loss_logits", "0.1"),
    ("train.grad_chunks", "8"),
    // jump points joined by `+`, e.g. `1+3`
    ("sample.path", "1"),
    ("sample.count", "16"),
    ("sample.condition", "0"),
    // argmax | sample
    ("sample.decoding", "argmax"),
    // path | hybrid
    ("sample.mode", "path"),
    ("sample.t_s", "2"),
    ("sample.t_k2", "3"),
    // deterministic | stochastic
    ("sample.variant", "deterministic"),
    ("eval.samples", "100000"),
    ("eval.condition", "0"),
    // comma list of teacher, dd:<path>, hybrid:<t_s>:<t_k2>, onestep, skip:<k>
    ("eval.systems", "teacher,dd:1,dd:1+3,onestep,skip:1,skip:2"),
    ("plot.title", "TV to teacher vs model invocations"),
];

/// Fully resolved `key = value` configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> DdError {
    DdError::Config(msg.into())
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and repeated
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !cfg.values.contains_key(key) {
                return Err(cfg_err(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
                return Err(cfg_err(format!("line {}: `{key}` already set on line {prev}", lineno + 1)));
            }
            cfg.values.insert(key.to_string(), value.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DdError::MissingInput(path.to_path_buf()),
            _ => DdError::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(cfg_err(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key listed in KEYS")
    }

    fn parse_key<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| cfg_err(format!("`{key} = {}`: {e}", self.get(key))))
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        self.values.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_key("seed")
    }

    pub fn seq_len(&self) -> Result<usize> {
        let n: usize = self.parse_key("domain.n")?;
        if n == 0 {
            return Err(cfg_err("domain.n must be positive"));
        }
        Ok(n)
    }

    pub fn vocab(&self) -> Result<usize> {
        let v: usize = self.parse_key("domain.vocab")?;
        if v < 2 {
            return Err(cfg_err("domain.vocab must be at least 2"));
        }
        Ok(v)
    }

    pub fn classes(&self) -> Result<usize> {
        let c: usize = self.parse_key("domain.classes")?;
        if c == 0 {
            return Err(cfg_err("domain.classes must be positive"));
        }
        Ok(c)
    }

    /// The codebook, or the path it must be read from.
    fn codebook_source(&self) -> Result<std::result::Result<Codebook, PathBuf>> {
        let v = self.vocab()?;
        let dim: usize = self.parse_key("domain.dim")?;
        match self.get("domain.codebook") {
            "random" => Ok(Ok(Codebook::random(v, dim, self.parse_key("domain.codebook_seed")?)
                .map_err(|e| cfg_err(e.to_string()))?)),
            "line" if dim != 1 => Err(cfg_err("the line codebook is one-dimensional; set domain.dim = 1")),
            "line" => Ok(Ok(Codebook::line(v).map_err(|e| cfg_err(e.to_string()))?)),
            path => Ok(Err(PathBuf::from(path))),
        }
    }

    pub fn codebook(&self) -> Result<Codebook> {
        match self.codebook_source()? {
            Ok(cb) => Ok(cb),
            Err(path) => {
                let cb = Codebook::load(&path)?;
                if cb.len() != self.vocab()? {
                    return Err(cfg_err(format!("codebook {} has {} entries, domain.vocab is {}", path.display(), cb.len(), self.vocab()?)));
                }
                Ok(cb)
            }
        }
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        let cfg = SolverConfig {
            scheme: self.parse_key::<Scheme>("solver.scheme")?,
            steps: self.parse_key("solver.steps")?,
            t_end: self.parse_key("solver.t_end")?,
        };
        cfg.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(cfg)
    }

    fn arch(&self, prefix: &str) -> Result<TransformerConfig> {
        let arch = TransformerConfig {
            width: self.parse_key(&format!("{prefix}.width"))?,
            heads: self.parse_key(&format!("{prefix}.heads"))?,
            layers: self.parse_key(&format!("{prefix}.layers"))?,
            mlp_ratio: self.parse_key(&format!("{prefix}.mlp_ratio"))?,
        };
        arch.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(arch)
    }

    pub fn teacher_kind(&self) -> Result<TeacherKind> {
        self.get("teacher.kind").parse()
    }

    pub fn neural_teacher_config(&self) -> Result<NeuralTeacherConfig> {
        Ok(NeuralTeacherConfig {
            arch: self.arch("teacher")?,
            epochs: self.parse_key("teacher.epochs")?,
            batch_size: self.parse_key("teacher.batch")?,
            lr: self.parse_key("teacher.lr")?,
            weight_decay: self.parse_key("teacher.weight_decay")?,
            holdout_fraction: self.parse_key("teacher.holdout")?,
            seed: split(self.seed()?, 10),
        })
    }

    pub fn condition_sampler(&self) -> Result<ConditionSampler> {
        let classes = self.classes()? as u32;
        match self.get("data.condition") {
            "uniform" => Ok(ConditionSampler::Uniform { classes }),
            _ => {
                let c: u32 = self.parse_key("data.condition")?;
                check_class(c, classes, "data.condition")?;
                Ok(ConditionSampler::Fixed(c))
            }
        }
    }

    pub fn pair_count(&self) -> Result<usize> {
        let n: usize = self.parse_key("data.count")?;
        if n == 0 {
            return Err(cfg_err("data.count must be positive"));
        }
        Ok(n)
    }

    pub fn schedule(&self) -> Result<TimestepSchedule> {
        let n = self.seq_len()?;
        let steps = match self.get("train.schedule") {
            "all" => (1..=n).collect(),
            list => parse_list::<usize>(list, ',', "train.schedule")?,
        };
        let schedule = match self.get("train.weights") {
            "uniform" => TimestepSchedule::uniform(steps),
            list => TimestepSchedule::new(steps, parse_list(list, ',', "train.weights")?),
        }
        .map_err(|e| cfg_err(e.to_string()))?;
        schedule.check_len(n).map_err(|e| cfg_err(e.to_string()))?;
        Ok(schedule)
    }

    /// Student shape; a neural teacher dictates the backbone so its weights can be inherited.
    pub fn student_spec(&self, teacher_arch: Option<TransformerConfig>) -> Result<StudentSpec> {
        let n = self.seq_len()?;
        let schedule = self.schedule()?;
        let split = match self.get("train.split") {
            "auto" => schedule.default_split(n),
            _ => self.parse_key("train.split")?,
        };
        let spec = StudentSpec {
            n,
            classes: self.classes()?,
            arch: match teacher_arch {
                Some(a) => a,
                None => self.arch("train")?,
            },
            schedule,
            split,
            codebook: self.codebook()?,
        };
        spec.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(spec)
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let cfg = DistillConfig {
            epochs: self.parse_key("train.epochs")?,
            batch_size: self.parse_key("train.batch")?,
            lr: self.parse_key("train.lr")?,
            beta1: self.parse_key("train.beta1")?,
            beta2: self.parse_key("train.beta2")?,
            weight_decay: self.parse_key("train.weight_decay")?,
            ema_decay: self.parse_key("train.ema_decay")?,
            loss: LossWeights {
                embed: self.parse_key("train.loss_embed")?,
                logits: self.parse_key("train.loss_logits")?,
            },
            seed: split(self.seed()?, 30),
            grad_chunks: self.parse_key("train.grad_chunks")?,
        };
        if cfg.batch_size == 0 || cfg.grad_chunks == 0 || !(0.0..1.0).contains(&cfg.ema_decay) {
            return Err(cfg_err("train.batch and train.grad_chunks must be positive and train.ema_decay in [0, 1)"));
        }
        Ok(cfg)
    }

    pub fn sample_path(&self) -> Result<SamplePath> {
        SamplePath::new(parse_list(self.get("sample.path"), '+', "sample.path")?).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn decoding(&self) -> Result<HeadDecoding> {
        match self.get("sample.decoding") {
            "argmax" => Ok(HeadDecoding::Argmax),
            "sample" => Ok(HeadDecoding::Sample),
            other => Err(cfg_err(format!("sample.decoding must be argmax or sample, not `{other}`"))),
        }
    }

    pub fn hybrid_variant(&self) -> Result<HybridVariant> {
        match self.get("sample.variant") {
            "deterministic" => Ok(HybridVariant::Deterministic),
            "stochastic" => Ok(HybridVariant::Stochastic),
            other => Err(cfg_err(format!("sample.variant must be deterministic or stochastic, not `{other}`"))),
        }
    }

    fn hybrid_points(&self) -> Result<(usize, usize)> {
        let (t_s, t_k2): (usize, usize) = (self.parse_key("sample.t_s")?, self.parse_key("sample.t_k2")?);
        check_hybrid(t_s, t_k2, self.seq_len()?)?;
        Ok((t_s, t_k2))
    }

    pub fn eval_systems(&self) -> Result<Vec<SystemSpec>> {
        let n = self.seq_len()?;
        let systems = self
            .get("eval.systems")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(SystemSpec::from_str)
            .collect::<Result<Vec<_>>>()?;
        for s in &systems {
            match s {
                SystemSpec::Dd(path) => {
                    if path.last().is_some_and(|&t| t > n) {
                        return Err(cfg_err(format!("eval system {s} jumps past n = {n}")));
                    }
                }
                SystemSpec::Hybrid { t_s, t_k2 } => check_hybrid(*t_s, *t_k2, n)?,
                SystemSpec::Skip(k) if *k >= n => return Err(cfg_err(format!("eval system {s} skips all {n} tokens"))),
                _ => {}
            }
        }
        if systems.is_empty() {
            return Err(cfg_err("eval.systems is empty"));
        }
        Ok(systems)
    }

    /// Checks every section, touching no files except a codebook path.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.seq_len()?;
        let classes = self.classes()?;
        let _ = self.codebook_source()?;
        self.solver()?;
        match self.teacher_kind()? {
            TeacherKind::Neural => {
                self.neural_teacher_config()?;
            }
            TeacherKind::Tabular => {
                let alpha: f64 = self.parse_key("teacher.alpha")?;
                if !(alpha >= 0.0) {
                    return Err(cfg_err("teacher.alpha must be non-negative"));
                }
            }
            TeacherKind::Sticky | TeacherKind::Random => {}
        }
        self.get("teacher.corpus_source").parse::<TeacherKind>()?;
        self.parse_key::<f64>("teacher.stay")?;
        self.parse_key::<f64>("teacher.concentration")?;
        self.parse_key::<usize>("teacher.corpus_size")?;
        self.pair_count()?;
        self.condition_sampler()?;
        self.schedule()?;
        self.distill_config()?;
        self.arch("train")?;
        if self.get("train.split") != "auto" {
            let split: usize = self.parse_key("train.split")?;
            if split == 0 || split > self.seq_len()? + 1 {
                return Err(cfg_err(format!("train.split = {split} outside 1..={}", self.seq_len()? + 1)));
            }
        }
        self.sample_path()?;
        self.parse_key::<usize>("sample.count")?;
        check_class(self.parse_key("sample.condition")?, classes as u32, "sample.condition")?;
        check_class(self.parse_key("eval.condition")?, classes as u32, "eval.condition")?;
        self.decoding()?;
        self.hybrid_variant()?;
        match self.get("sample.mode") {
            "path" => {}
            "hybrid" => {
                self.hybrid_points()?;
            }
            other => return Err(cfg_err(format!("sample.mode must be path or hybrid, not `{other}`"))),
        }
        self.parse_key::<usize>("eval.samples")?;
        self.eval_systems()?;
        Ok(())
    }
}

fn check_class(c: u32, classes: u32, key: &str) -> Result<()> {
    if c >= classes {
        return Err(cfg_err(format!("{key} = {c} but domain.classes = {classes}")));
    }
    Ok(())
}

fn check_hybrid(t_s: usize, t_k2: usize, n: usize) -> Result<()> {
    if !(1 < t_s && t_s <= t_k2 && t_k2 <= n) {
        return Err(cfg_err(format!("hybrid needs 1 < t_s <= t_k2 <= n, got t_s = {t_s}, t_k2 = {t_k2}, n = {n}")));
    }
    Ok(())
}

fn parse_list<T: FromStr>(text: &str, sep: char, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(sep)
        .map(|s| s.trim().parse().map_err(|e| cfg_err(format!("`{key}` entry `{s}`: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    /// Built-in sticky Markov chain.
    Sticky,
    /// Built-in random Dirichlet table.
    Random,
    /// Count table fitted to a corpus.
    Tabular,
    /// Transformer fitted to a corpus.
    Neural,
}

impl FromStr for TeacherKind {
    type Err = DdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sticky" => Ok(TeacherKind::Sticky),
            "random" => Ok(TeacherKind::Random),
            "tabular" => Ok(TeacherKind::Tabular),
            "neural" => Ok(TeacherKind::Neural),
            other => Err(cfg_err(format!("unknown teacher kind `{other}`"))),
        }
    }
}

/// One entry of `eval.systems`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SystemSpec {
    Teacher,
    Dd(Vec<usize>),
    Hybrid { t_s: usize, t_k2: usize },
    OneStep,
    Skip(usize),
}

impl FromStr for SystemSpec {
    type Err = DdError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || cfg_err(format!("unknown eval system `{s}`"));
        let mut parts = s.split(':');
        let spec = match (parts.next(), parts.next(), parts.next()) {
            (Some("teacher"), None, None) => SystemSpec::Teacher,
            (Some("onestep"), None, None) => SystemSpec::OneStep,
            (Some("dd"), Some(path), None) => {
                let steps = parse_list(path, '+', "eval.systems")?;
                SamplePath::new(steps.clone()).map_err(|e| cfg_err(e.to_string()))?;
                SystemSpec::Dd(steps)
            }
            (Some("skip"), Some(k), None) => SystemSpec::Skip(k.parse().map_err(|_| bad())?),
            (Some("hybrid"), Some(a), Some(b)) => SystemSpec::Hybrid {
                t_s: a.parse().map_err(|_| bad())?,
                t_k2: b.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(spec)
    }
}

impl std::fmt::Display for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SystemSpec::Teacher => write!(f, "teacher"),
            SystemSpec::OneStep => write!(f, "onestep"),
            SystemSpec::Skip(k) => write!(f, "skip:{k}"),
            SystemSpec::Hybrid { t_s, t_k2 } => write!(f, "hybrid:{t_s}:{t_k2}"),
            SystemSpec::Dd(path) => {
                let parts: Vec<String> = path.iter().map(usize::to_string).collect();
                write!(f, "dd:{}", parts.join("+"))
            }
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &DdError) -> i32 {
    match err.root() {
        DdError::Config(_) => 2,
        DdError::MissingInput(_) => 3,
        DdError::FingerprintMismatch { .. } => 4,
        DdError::Io(_) => 5,
        DdError::Solver { .. } | DdError::NonFiniteGradient(_) | DdError::Training(_) | DdError::Domain(_) => 6,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dd", version, about = "Few-step samplers distilled from autoregressive teachers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Validate the configuration and print it, writing nothing.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or fit the teacher.
    TrainTeacher(CommonArgs),
    /// Generate noise/data pairs from the teacher.
    GenData(CommonArgs),
    /// Train the student on the pair store.
    Distill(CommonArgs),
    /// Draw sequences from the student.
    Sample(CommonArgs),
    /// Score samplers against the teacher's exact joint.
    Eval(CommonArgs),
    /// Render the eval results as CSV and SVG.
    Plot(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher(_) => "train-teacher",
            Command::GenData(_) => "gen-data",
            Command::Distill(_) => "distill",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
            Command::Plot(_) => "plot",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::TrainTeacher(a)
            | Command::GenData(a)
            | Command::Distill(a)
            | Command::Sample(a)
            | Command::Eval(a)
            | Command::Plot(a) => a,
        }
    }
}

/// Caps the global worker pool at `DD_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DD_THREADS") {
        let n: usize = v.parse().map_err(|_| cfg_err(format!("DD_THREADS = `{v}` is not a count")))?;
        // A pool built earlier in the same process wins; that only happens in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

/// Line-delimited JSON records appended to `log.jsonl`.
struct RunLog {
    file: File,
    command: &'static str,
}

impl RunLog {
    fn open(dir: &Path, command: &'static str) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(RunLog { file, command })
    }

    fn event(&mut self, event: &str, fields: Value) -> Result<()> {
        let record = json!({ "command": self.command, "event": event, "fields": fields });
        writeln!(self.file, "{record}")?;
        Ok(())
    }
}

/// Provenance record written next to the outputs of each command.
struct Manifest {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new() -> Self {
        Manifest { inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    fn input(&mut self, dir: &Path, name: &str) -> Result<Vec<u8>> {
        let bytes = read_input(&dir.join(name))?;
        self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write(&self, dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
        let doc = json!({
            "command": command,
            "config_sha256": cfg.hash(),
            "seed": cfg.seed()?,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| DdError::Format(e.to_string()))?;
        fs::write(dir.join(format!("manifest.{command}.json")), text + "\n")?;
        Ok(())
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DdError::MissingInput(path.to_path_buf()),
        _ => DdError::Io(e),
    })
}

/// Runs a parsed command line. `--dry-run` prints the resolved configuration to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let args = cli.command.args();
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string())?;
    }
    cfg.validate()?;
    if args.dry_run {
        write!(stdout, "{}", cfg.to_text())?;
        return Ok(());
    }
    init_threads()?;
    fs::create_dir_all(&args.out)?;
    let command = cli.command.name();
    let mut log = RunLog::open(&args.out, command)?;
    let config_map: BTreeMap<&str, &str> = cfg.values.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    log.event("config", json!({ "config_sha256": cfg.hash(), "values": config_map }))?;
    let start = Instant::now();
    let mut manifest = Manifest::new();
    let dir = args.out.as_path();
    let result = match &cli.command {
        Command::TrainTeacher(_) => cmd_train_teacher(&cfg, dir, &mut manifest, &mut log),
        Command::GenData(_) => cmd_gen_data(&cfg, dir, &mut manifest, &mut log),
        Command::Distill(_) => cmd_distill(&cfg, dir, &mut manifest, &mut log),
        Command::Sample(_) => cmd_sample(&cfg, dir, &mut manifest, &mut log),
        Command::Eval(_) => cmd_eval(&cfg, dir, &mut manifest, &mut log),
        Command::Plot(_) => cmd_plot(&cfg, dir, &mut manifest),
    };
    match result {
        Ok(()) => {
            manifest.write(dir, command, &cfg)?;
            log.event("done", json!({ "wall_ms": start.elapsed().as_secs_f64() * 1e3, "outputs": manifest.outputs }))?;
            Ok(())
        }
        Err(e) => {
            log.event("error", json!({ "message": e.to_string(), "exit_code": exit_code(&e) }))?;
            Err(e)
        }
    }
}

/// Reads a corpus file: one sequence per line as whitespace-separated ids,
/// optionally prefixed by `<class>:`.
pub fn parse_corpus(text: &str) -> Result<Vec<TokenSeq>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, line)| {
            let (cond, ids) = match line.split_once(':') {
                Some((c, rest)) => (c.trim().parse().map_err(|_| DdError::Format(format!("corpus line {}: bad class", i + 1)))?, rest),
                None => (0, line),
            };
            let ids = ids
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| DdError::Format(format!("corpus line {}: bad token `{t}`", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenSeq::new(ids, cond))
        })
        .collect()
}

fn builtin_teacher(cfg: &RunConfig, kind: TeacherKind) -> Result<crate::teacher::TabularTeacher> {
    let (n, v, classes) = (cfg.seq_len()?, cfg.vocab()?, cfg.classes()?);
    match kind {
        TeacherKind::Sticky => {
            if classes != 1 {
                return Err(cfg_err("the sticky teacher has a single class"));
            }
            toy::sticky_markov(n, v, cfg.parse_key("teacher.stay")?)
        }
        TeacherKind::Random => toy::random_tabular(n, v, classes, cfg.parse_key("teacher.concentration")?, split(cfg.seed()?, 11)),
        _ => Err(cfg_err("corpus source must be sticky or random")),
    }
}

fn cmd_train_teacher(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest, log: &mut RunLog) -> Result<()> {
    let kind = cfg.teacher_kind()?;
    let (v, classes) = (cfg.vocab()?, cfg.classes()?);
    let teacher: AnyTeacher = match kind {
        TeacherKind::Sticky | TeacherKind::Random => builtin_teacher(cfg, kind)?.into(),
        TeacherKind::Tabular | TeacherKind::Neural => {
            let corpus = match cfg.get("teacher.corpus") {
                "" => {
                    let source = builtin_teacher(cfg, cfg.get("teacher.corpus_source").parse()?)?;
                    toy::sample_dataset(&source, cfg.parse_key("teacher.corpus_size")?, classes, split(cfg.seed()?, 12))?
                }
                path => {
                    let bytes = read_input(Path::new(path))?;
                    manifest.inputs.insert(path.to_string(), sha256_hex(&bytes));
                    parse_corpus(&String::from_utf8_lossy(&bytes))?
                }
            };
            if corpus.first().is_some_and(|s| s.len() != cfg.seq_len().unwrap_or(0)) {
                return Err(cfg_err("corpus sequence length differs from domain.n"));
            }
            log.event("corpus", json!({ "sequences": corpus.len() }))?;
            if kind == TeacherKind::Tabular {
                fit_tabular(&corpus, v, cfg.parse_key("teacher.alpha")?)?.into()
            } else {
                let (t, report) = train_neural_teacher(&corpus, v, classes, &cfg.neural_teacher_config()?)?;
                for (epoch, loss) in report.epoch_train_loss.iter().enumerate() {
                    log.event(
                        "teacher_epoch",
                        json!({ "epoch": epoch, "train_loss": loss, "holdout_loss": report.epoch_holdout_loss.get(epoch) }),
                    )?;
                }
                t.into()
            }
        }
    };
    let bytes = teacher.to_bytes();
    log.event("teacher", json!({ "kind": cfg.get("teacher.kind"), "fingerprint": hex::encode(teacher.fingerprint()) }))?;
    manifest.output(dir, TEACHER_FILE, &bytes)
}

fn load_teacher(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<AnyTeacher> {
    let bytes = manifest.input(dir, TEACHER_FILE)?;
    let teacher = AnyTeacher::from_container(&Container::from_bytes(&bytes)?)?;
    if teacher.seq_len() != cfg.seq_len()? || teacher.vocab_size() != cfg.vocab()? {
        return Err(cfg_err(format!(
            "teacher is n={} V={}, config says n={} V={}",
            teacher.seq_len(),
            teacher.vocab_size(),
            cfg.seq_len()?,
            cfg.vocab()?
        )));
    }
    Ok(teacher)
}

fn load_student(dir: &Path, manifest: &mut Manifest, teacher: Option<&AnyTeacher>) -> Result<StudentModel> {
    let c = Container::from_bytes(&manifest.input(dir, STUDENT_FILE)?)?;
    if let Some(t) = teacher {
        let expected = StudentModel::teacher_fingerprint(&c)?;
        let actual = hex::encode(t.fingerprint());
        if expected != actual {
            return Err(DdError::FingerprintMismatch { expected, actual });
        }
    }
    StudentModel::from_container(&c)
}

fn cmd_gen_data(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest, log: &mut RunLog) -> Result<()> {
    let teacher = load_teacher(cfg, dir, manifest)?;
    let cb = cfg.codebook()?;
    let store = generate_dataset(
        &teacher,
        &cb,
        cfg.pair_count()?,
        cfg.condition_sampler()?,
        split(cfg.seed()?, 20),
        &cfg.solver()?,
        teacher.fingerprint(),
    )?;
    let solver = cfg.solver()?;
    log.event(
        "pairs",
        json!({ "count": store.len(), "scheme": solver.scheme.to_string(), "steps": solver.steps, "t_end": solver.t_end }),
    )?;
    manifest.output(dir, PAIRS_FILE, &store.to_bytes())
}

fn cmd_distill(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest, log: &mut RunLog) -> Result<()> {
    let teacher = load_teacher(cfg, dir, manifest)?;
    let store = PairStore::from_bytes(&manifest.input(dir, PAIRS_FILE)?)?;
    let spec = cfg.student_spec(teacher.as_neural().map(|t| t.arch()))?;
    let dcfg = cfg.distill_config()?;
    let mut log_err = Ok(());
    let start = Instant::now();
    let (model, report) = {
        let mut hook = |epoch: usize, _: &StudentModel| {
            log_err = log.event("distill_epoch", json!({ "epoch": epoch, "elapsed_ms": start.elapsed().as_secs_f64() * 1e3 }));
            Ok(())
        };
        train_student(&store, &teacher, spec, &dcfg, Some(&mut hook))?
    };
    log_err?;
    for (epoch, loss) in report.epoch_loss.iter().enumerate() {
        log.event("distill_loss", json!({ "epoch": epoch, "loss": loss }))?;
    }
    log.event("timesteps", json!({ "counts": report.timestep_counts, "steps": report.steps }))?;
    let bytes = model.to_container(&hex::encode(teacher.fingerprint())).to_bytes();
    manifest.output(dir, STUDENT_FILE, &bytes)
}

/// One decoded sequence with its invocation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub tokens: TokenSeq,
    pub steps: StepReport,
}

impl SampleRecord {
    pub fn to_json(&self) -> Value {
        json!({
            "index": self.index,
            "seed": self.seed,
            "condition": self.tokens.condition,
            "tokens": self.tokens.ids,
            "student_calls": self.steps.student,
            "teacher_calls": self.steps.teacher,
            "total_calls": self.steps.total,
        })
    }
}

fn sample_with_decoding(model: &StudentModel, path: &SamplePath, condition: u32, x1: &NoiseSeq, seed: u64) -> Result<(TokenSeq, StepReport)> {
    let mut rng = rng_from_seed(split(seed, 2));
    let mut current = TokenSeq::new(Vec::new(), condition);
    for &t in path.steps() {
        current = model.predict_final_sampled(&jump_back(&current, x1, t)?, &mut rng)?;
    }
    Ok((current, StepReport::new(path.steps().len(), 0)))
}

fn cmd_sample(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest, log: &mut RunLog) -> Result<()> {
    let hybrid = cfg.get("sample.mode") == "hybrid";
    let teacher = if hybrid { Some(load_teacher(cfg, dir, manifest)?) } else { None };
    let model = load_student(dir, manifest, teacher.as_ref())?;
    let (n, c) = (model.seq_len(), model.codebook().dim());
    let condition: u32 = cfg.parse_key("sample.condition")?;
    let path = cfg.sample_path()?;
    let decoding = cfg.decoding()?;
    let base = split(cfg.seed()?, 40);
    let mut out = String::new();
    for index in 0..cfg.parse_key::<usize>("sample.count")? {
        let seed = split(base, index as u64);
        let x1 = NoiseSeq::from_seed(seed, n, c);
        let (tokens, steps) = match &teacher {
            Some(t) => {
                let (t_s, t_k2) = cfg.hybrid_points()?;
                let mut rng = rng_from_seed(split(seed, 1));
                sample_hybrid(&model, t, model.codebook(), &cfg.solver()?, t_k2, t_s, condition, &x1, cfg.hybrid_variant()?, &mut rng)?
            }
            None if decoding == HeadDecoding::Sample => sample_with_decoding(&model, &path, condition, &x1, seed)?,
            None => sample(&model, &path, condition, &x1)?,
        };
        let record = SampleRecord { index, seed, tokens, steps };
        let _ = writeln!(out, "{}", record.to_json());
    }
    log.event("samples", json!({ "count": cfg.get("sample.count"), "mode": cfg.get("sample.mode") }))?;
    manifest.output(dir, SAMPLES_FILE, out.as_bytes())
}

fn cmd_eval(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest, log: &mut RunLog) -> Result<()> {
    let teacher = load_teacher(cfg, dir, manifest)?;
    let systems = cfg.eval_systems()?;
    let needs_student = systems.iter().any(|s| matches!(s, SystemSpec::Dd(_) | SystemSpec::Hybrid { .. }));
    let student = if needs_student { Some(load_student(dir, manifest, Some(&teacher))?) } else { None };
    let condition: u32 = cfg.parse_key("eval.condition")?;
    let samples: usize = cfg.parse_key("eval.samples")?;
    let reference = exact_joint(&teacher, condition)?;
    let table = MarginalTable::from_joint(&reference)?;
    let solver = cfg.solver()?;
    let base = split(cfg.seed()?, 50);
    let mut kv = String::new();
    let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
    for (i, spec) in systems.iter().enumerate() {
        let system: Box<dyn SystemUnderTest + '_> = match spec {
            SystemSpec::Teacher => Box::new(TeacherSystem { teacher: &teacher, condition }),
            SystemSpec::OneStep => Box::new(OneStepStarSystem { table: &table, condition }),
            SystemSpec::Skip(k) => Box::new(SkipNSystem { teacher: &teacher, table: &table, skip: *k, condition }),
            SystemSpec::Dd(path) => Box::new(DenoiserSystem {
                label: spec.to_string(),
                model: student.as_ref().expect("student loaded"),
                path: SamplePath::new(path.clone())?,
                condition,
            }),
            SystemSpec::Hybrid { t_s, t_k2 } => {
                let model = student.as_ref().expect("student loaded");
                Box::new(HybridSystem {
                    model,
                    teacher: &teacher,
                    codebook: model.codebook(),
                    solver,
                    t_k2: *t_k2,
                    t_s: *t_s,
                    variant: cfg.hybrid_variant()?,
                    condition,
                })
            }
        };
        let mut report = evaluate_run(&reference, system.as_ref(), samples, split(base, i as u64))?;
        report.system = spec.to_string();
        log.event(
            "eval",
            json!({
                "system": report.system,
                "steps": report.steps,
                "tv_joint": report.tv_joint,
                "tv_marginal_mean": report.tv_marginal_mean(),
                "mi_gap": report.mi_gap,
                "speedup": report.speedup(),
                "wall_ms": report.wall_ms,
                "samples": report.samples,
            }),
        )?;
        kv.push_str(&report.to_kv());
        kv.push('\n');
        csv.push_str(&report.to_csv_row());
        csv.push('\n');
    }
    manifest.output(dir, EVAL_FILE, kv.as_bytes())?;
    manifest.output(dir, RESULTS_FILE, csv.as_bytes())
}

/// One parsed row of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub system: String,
    pub steps: usize,
    pub tv_joint: f64,
    pub tv_marginal_mean: f64,
    pub wall_ms: f64,
    pub samples: usize,
}

pub fn parse_results(text: &str) -> Result<Vec<PlotRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EvalReport::CSV_HEADER) {
        return Err(DdError::Format("results file does not start with the expected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || DdError::Format(format!("bad results row `{l}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(PlotRow {
                system: f[0].to_string(),
                steps: f[1].parse().map_err(|_| bad())?,
                tv_joint: f[2].parse().map_err(|_| bad())?,
                tv_marginal_mean: f[3].parse().map_err(|_| bad())?,
                wall_ms: f[4].parse().map_err(|_| bad())?,
                samples: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Groups rows by family (the name before the first `:`), sorted by steps.
fn families(rows: &[PlotRow]) -> BTreeMap<String, Vec<&PlotRow>> {
    let mut out: BTreeMap<String, Vec<&PlotRow>> = BTreeMap::new();
    for r in rows {
        let family = r.system.split(':').next().unwrap_or(&r.system).to_string();
        out.entry(family).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.steps.cmp(&b.steps).then(a.system.cmp(&b.system)));
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// TV-vs-invocations chart, one polyline per system family, log2 x axis.
pub fn render_svg(rows: &[PlotRow], title: &str) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 150.0, 40.0, 50.0);
    let max_steps = rows.iter().map(|r| r.steps).max().unwrap_or(1).max(2) as f64;
    let max_tv = rows.iter().map(|r| r.tv_joint).fold(0.0, f64::max).max(0.05) * 1.1;
    let x = |s: usize| left + (s.max(1) as f64).log2() / max_steps.log2() * (w - left - right);
    let y = |tv: f64| top + (1.0 - tv / max_tv) * (h - top - bottom);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, xml_escape(title));
    let (x0, y0, x1) = (left, h - bottom, w - right);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{top}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    let mut tick = 1usize;
    while tick as f64 <= max_steps {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{tick}</text>"#, x(tick), y0 + 16.0);
        tick *= 2;
    }
    for k in 0..=4 {
        let tv = max_tv * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tv:.2}</text>"#, x0 - 6.0, y(tv) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">model invocations</text>"#, (x0 + x1) / 2.0, h - 12.0);
    let _ = writeln!(svg, r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">joint TV</text>"#, (top + y0) / 2.0, (top + y0) / 2.0);
    for (i, (family, pts)) in families(rows).iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", x(r.steps), y(r.tv_joint))).collect();
        if coords.len() > 1 {
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, coords.join(" "));
        }
        for r in pts {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"><title>{} ({} steps): {:.4}</title></circle>"#,
                x(r.steps),
                y(r.tv_joint),
                xml_escape(&r.system),
                r.steps,
                r.tv_joint
            );
        }
        let ly = top + 18.0 * i as f64;
        let _ = writeln!(svg, r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, x1 + 16.0, ly);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x1 + 34.0, ly + 10.0, xml_escape(family));
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_plot(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let text = String::from_utf8(manifest.input(dir, RESULTS_FILE)?).map_err(|e| DdError::Format(e.to_string()))?;
    let rows = parse_results(&text)?;
    let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
    for pts in families(&rows).values() {
        for r in pts {
            let _ = writeln!(
                csv,
                "{},{},{:.6},{:.6},{:.3},{}",
                r.system, r.steps, r.tv_joint, r.tv_marginal_mean, r.wall_ms, r.samples
            );
        }
    }
    manifest.output(dir, PLOT_CSV_FILE, csv.as_bytes())?;
    manifest.output(dir, PLOT_SVG_FILE, render_svg(&rows, cfg.get("plot.title")).as_bytes())
}
