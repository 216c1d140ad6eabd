//! Flat key=value run configuration.
//!
//! One `key = value` pair per line, `#` starts a comment, blank lines are
//! ignored. Unknown and duplicate keys are rejected with their line
//! number, as are missing required keys. Model fields that the task
//! dictates (vocabulary, maximum length, output head) are derived from
//! the task block rather than spelled out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use grc_core::model::{ModelConfig, TaskHead};
use grc_core::tasks::{
    gen_copy_batch, gen_listops_batch, prototype_task, PrototypeTask, TaskBatch, LISTOPS_VOCAB,
};
use grc_core::trainer::TrainConfig;
use grc_core::{Error, Precision, Result, SeededRng};

use crate::error::{CliError, CliResult};

/// Which synthetic task a run trains on, with its generator knobs.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSel {
    Copy { t: usize, vocab: u32 },
    ListOps { max_len: usize, max_depth: usize },
    Prototype { t: usize, classes: usize, vocab: u32, noise: f64 },
}

impl TaskSel {
    pub fn vocab(&self) -> usize {
        match *self {
            TaskSel::Copy { vocab, .. } => vocab as usize,
            TaskSel::ListOps { .. } => LISTOPS_VOCAB as usize,
            TaskSel::Prototype { vocab, .. } => vocab as usize,
        }
    }

    pub fn t_max(&self) -> usize {
        match *self {
            TaskSel::Copy { t, .. } => t,
            TaskSel::ListOps { max_len, .. } => max_len,
            TaskSel::Prototype { t, .. } => t,
        }
    }

    pub fn head(&self) -> TaskHead {
        match *self {
            TaskSel::Copy { .. } => TaskHead::Lm,
            TaskSel::ListOps { .. } => TaskHead::Classification { classes: 10 },
            TaskSel::Prototype { classes, .. } => TaskHead::Classification { classes },
        }
    }

    /// Batch generator closure for this task. The prototype task derives
    /// its class motifs from `task_seed`, so every stream built from the
    /// same config samples the same underlying task.
    pub fn source(
        &self,
        task_seed: u64,
        batch: usize,
    ) -> Result<Box<dyn FnMut(&mut SeededRng) -> Result<TaskBatch> + Send>> {
        match *self {
            TaskSel::Copy { t, vocab } => {
                Ok(Box::new(move |rng| gen_copy_batch(rng, batch, t, vocab)))
            }
            TaskSel::ListOps { max_len, max_depth } => Ok(Box::new(move |rng| {
                gen_listops_batch(rng, batch, max_len, max_depth)
            })),
            TaskSel::Prototype { t, classes, vocab, noise } => {
                let task = prototype_task(task_seed, t, classes, vocab, noise)?;
                Ok(Box::new(move |rng| task.gen_batch(rng, batch)))
            }
        }
    }

    /// The underlying prototype task, when this selection is one.
    pub fn prototype(&self, task_seed: u64) -> Result<Option<PrototypeTask>> {
        match *self {
            TaskSel::Prototype { t, classes, vocab, noise } => {
                Ok(Some(prototype_task(task_seed, t, classes, vocab, noise)?))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskSel,
    pub out: PathBuf,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Keeps eval batches decorrelated from the training stream when both
/// come from the same user seed.
pub const EVAL_SEED_SALT: u64 = 0x51ed_2701_93d4_ab61;

impl RunConfig {
    pub fn parse_file(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self::parse_str(&text)?)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {line_no}: expected 'key = value', got '{line}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(Error::config(format!(
                    "line {line_no}: empty key or value"
                )));
            }
            if let Some((first_line, _)) = entries.get(key) {
                return Err(Error::config(format!(
                    "line {line_no}: duplicate key '{key}' (first set on line {first_line})"
                )));
            }
            entries.insert(key, (line_no, value));
        }
        let mut bag = Bag { entries, used: Vec::new() };

        let task = match bag.required_str("task")? {
            "copy" => TaskSel::Copy {
                t: bag.get("copy.t", 16)?,
                vocab: bag.get("copy.vocab", 8u32)?,
            },
            "listops" => TaskSel::ListOps {
                max_len: bag.get("listops.max_len", 64)?,
                max_depth: bag.get("listops.max_depth", 3)?,
            },
            "prototype" => TaskSel::Prototype {
                t: bag.get("prototype.t", 16)?,
                classes: bag.get("prototype.classes", 4)?,
                vocab: bag.get("prototype.vocab", 10u32)?,
                noise: bag.get("prototype.noise", 0.3)?,
            },
            other => {
                let line = bag.line_of("task");
                return Err(Error::config(format!(
                    "line {line}: unknown task '{other}' (copy, listops, prototype)"
                )));
            }
        };

        let out = PathBuf::from(bag.required_str("out")?);
        let precision = match bag.get_str("precision", "f64")? {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                let line = bag.line_of("precision");
                return Err(Error::config(format!(
                    "line {line}: unknown precision '{other}' (f32, f64)"
                )));
            }
        };

        let model = ModelConfig {
            layers: bag.required("layers")?,
            d: bag.required("d")?,
            heads: bag.required("heads")?,
            t_m: bag.get("t_m", 8)?,
            r: bag.get("r", 0.5)?,
            ffn_mult: bag.get("ffn_mult", 2)?,
            vocab: task.vocab(),
            t_max: task.t_max(),
            task_head: task.head(),
            cache_enabled: bag.get("cache", true)?,
            dropout: bag.get("dropout", 0.0)?,
            bptt_window: bag.get("bptt_window", 1)?,
        };

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            lr: bag.required("lr")?,
            beta1: bag.get("beta1", defaults.beta1)?,
            beta2: bag.get("beta2", defaults.beta2)?,
            eps: bag.get("eps", defaults.eps)?,
            weight_decay: bag.get("weight_decay", defaults.weight_decay)?,
            warmup: bag.get("warmup", defaults.warmup)?,
            steps: bag.required("steps")?,
            batch: bag.required("batch")?,
            seed: bag.required("seed")?,
            eval_interval: bag.get("eval_interval", defaults.eval_interval)?,
            eval_batches: bag.get("eval_batches", defaults.eval_batches)?,
        };

        bag.reject_unknown()?;
        model.validate()?;
        train.validate()?;
        Ok(RunConfig { task, out, precision, model, train })
    }

    /// Fixed held-out batches for evaluation, drawn from a salted seed so
    /// they never overlap the training stream.
    pub fn eval_set(&self) -> Result<Vec<TaskBatch>> {
        let mut source = self.task.source(self.train.seed, self.train.batch)?;
        let mut rng = SeededRng::new(self.train.seed ^ EVAL_SEED_SALT);
        (0..self.train.eval_batches)
            .map(|_| source(&mut rng))
            .collect()
    }
}

/// Parsed entries plus bookkeeping for unknown-key rejection.
struct Bag<'a> {
    entries: BTreeMap<&'a str, (usize, &'a str)>,
    used: Vec<&'a str>,
}

/// Value types a config line can carry.
trait FromValue: Sized {
    fn from_value(s: &str) -> Option<Self>;
}

macro_rules! from_value_via_parse {
    ($($ty:ty),*) => {$(
        impl FromValue for $ty {
            fn from_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}

from_value_via_parse!(usize, u32, u64, f64);

impl FromValue for bool {
    fn from_value(s: &str) -> Option<Self> {
        match s {
            "true" | "yes" | "1" => Some(true),
            "false" | "no" | "0" => Some(false),
            _ => None,
        }
    }
}

impl<'a> Bag<'a> {
    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|&(l, _)| l).unwrap_or(0)
    }

    fn take(&mut self, key: &'a str) -> Option<(usize, &'a str)> {
        let hit = self.entries.get(key).copied();
        if hit.is_some() {
            self.used.push(key);
        }
        hit
    }

    fn required_str(&mut self, key: &'a str) -> Result<&'a str> {
        self.take(key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::config(format!("missing required key '{key}'")))
    }

    fn get_str(&mut self, key: &'a str, default: &'a str) -> Result<&'a str> {
        Ok(self.take(key).map(|(_, v)| v).unwrap_or(default))
    }

    fn parse<V: FromValue>(key: &str, line: usize, value: &str) -> Result<V> {
        V::from_value(value).ok_or_else(|| {
            Error::config(format!("line {line}: bad value '{value}' for key '{key}'"))
        })
    }

    fn required<V: FromValue>(&mut self, key: &'a str) -> Result<V> {
        let (line, value) = self
            .take(key)
            .ok_or_else(|| Error::config(format!("missing required key '{key}'")))?;
        Self::parse(key, line, value)
    }

    fn get<V: FromValue>(&mut self, key: &'a str, default: V) -> Result<V> {
        match self.take(key) {
            Some((line, value)) => Self::parse(key, line, value),
            None => Ok(default),
        }
    }

    fn reject_unknown(&self) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !self.used.contains(key) {
                return Err(Error::config(format!("line {line}: unknown key '{key}'")));
            }
        }
        Ok(())
    }
}
