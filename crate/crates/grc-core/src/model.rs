//! Pre-norm transformer encoder built from cached-attention blocks.
//!
//! Each block applies `x + Attn(LN(x))` then `x + FFN(LN(x))`; a final
//! layer norm feeds either a mean-pooled classification head or a
//! per-position language-model head. With `cache_enabled` off the blocks
//! hold plain self-attention layers and the model is a vanilla encoder,
//! which is the controlled baseline for cache experiments.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{CacheSpec, GrcAttentionLayer, ParamBinds};
use crate::cache::cache_width;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tape::{NodeId, Tape};
use crate::tasks::TaskBatch;
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskHead {
    Classification { classes: usize },
    Lm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub t_m: usize,
    pub r: f64,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub t_max: usize,
    pub task_head: TaskHead,
    pub cache_enabled: bool,
    pub dropout: f64,
    /// Number of cache updates the gradient may traverse; 1 truncates at
    /// the previous step.
    pub bptt_window: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 6] = [
            ("layers", self.layers),
            ("d", self.d),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("vocab", self.vocab),
            ("t_max", self.t_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.cache_enabled {
            if self.t_m == 0 {
                return Err(Error::config("t_m must be at least 1"));
            }
            let d_m = cache_width(self.r, self.d)?;
            if d_m % self.heads != 0 {
                return Err(Error::config(format!(
                    "cache width {} (ratio {} of d={}) is not divisible by heads={}",
                    d_m, self.r, self.d, self.heads
                )));
            }
            if self.bptt_window == 0 {
                return Err(Error::config("bptt_window must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if let TaskHead::Classification { classes } = self.task_head {
            if classes == 0 {
                return Err(Error::config("classes must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        match self.task_head {
            TaskHead::Classification { classes } => classes,
            TaskHead::Lm => self.vocab,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(&[d], T::from_f64(1.0)).with_grad(),
            beta: Tensor::zeros(&[d]).with_grad(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ffn<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNormParams<T>,
    pub attn: GrcAttentionLayer<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: Ffn<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    /// Token embedding table [vocab, D].
    pub embedding: Tensor<T>,
    /// Learned absolute position table [T_max, D].
    pub pos: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub head_ln: LayerNormParams<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Everything a caller needs after one forward pass: the logits (values
/// and node), the scalar loss node, and the name-to-node map for reading
/// parameter gradients after backward.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    pub logits_node: NodeId,
    pub loss_node: NodeId,
    pub binds: ParamBinds,
}

pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let d = cfg.d;
    let bound = 1.0 / (d as f64).sqrt();
    let embedding = Tensor::rand_uniform(&[cfg.vocab, d], -bound, bound, &mut rng).with_grad();
    let pos = Tensor::rand_uniform(&[cfg.t_max, d], -bound, bound, &mut rng).with_grad();
    let cache_spec = cfg.cache_enabled.then_some(CacheSpec {
        t_m: cfg.t_m,
        r: cfg.r,
    });
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let mut attn = GrcAttentionLayer::init(d, cfg.heads, cache_spec, &mut rng)?;
        if let Some(cb) = &mut attn.cached {
            cb.cache.set_window(cfg.bptt_window)?;
        }
        let f = cfg.ffn_mult * d;
        let fb = 1.0 / (f as f64).sqrt();
        let ffn = Ffn {
            w1: Tensor::rand_uniform(&[d, f], -bound, bound, &mut rng).with_grad(),
            b1: Tensor::zeros(&[f]).with_grad(),
            w2: Tensor::rand_uniform(&[f, d], -fb, fb, &mut rng).with_grad(),
            b2: Tensor::zeros(&[d]).with_grad(),
        };
        blocks.push(EncoderBlock {
            ln1: LayerNormParams::init(d),
            attn,
            ln2: LayerNormParams::init(d),
            ffn,
        });
    }
    let head_w =
        Tensor::rand_uniform(&[d, cfg.head_width()], -bound, bound, &mut rng).with_grad();
    let head_b = Tensor::zeros(&[cfg.head_width()]).with_grad();
    Ok(Model {
        cfg: cfg.clone(),
        embedding,
        pos,
        blocks,
        head_ln: LayerNormParams::init(d),
        head_w,
        head_b,
    })
}

impl<T: Real> Model<T> {
    /// Visits every trainable tensor with its stable registry name; the
    /// order never changes between calls on the same config.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("embedding".into(), &mut self.embedding);
        f("pos".into(), &mut self.pos);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            f(format!("blocks.{i}.ln1.gamma"), &mut block.ln1.gamma);
            f(format!("blocks.{i}.ln1.beta"), &mut block.ln1.beta);
            block.attn.for_each_param(&format!("blocks.{i}.attn"), f);
            f(format!("blocks.{i}.ln2.gamma"), &mut block.ln2.gamma);
            f(format!("blocks.{i}.ln2.beta"), &mut block.ln2.beta);
            f(format!("blocks.{i}.ffn.w1"), &mut block.ffn.w1);
            f(format!("blocks.{i}.ffn.b1"), &mut block.ffn.b1);
            f(format!("blocks.{i}.ffn.w2"), &mut block.ffn.w2);
            f(format!("blocks.{i}.ffn.b2"), &mut block.ffn.b2);
        }
        f("head_ln.gamma".into(), &mut self.head_ln.gamma);
        f("head_ln.beta".into(), &mut self.head_ln.beta);
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    pub fn freeze_caches(&mut self) {
        for block in &mut self.blocks {
            if let Some(cb) = &mut block.attn.cached {
                cb.cache.freeze();
            }
        }
    }

    pub fn thaw_caches(&mut self) {
        for block in &mut self.blocks {
            if let Some(cb) = &mut block.attn.cached {
                cb.cache.thaw();
            }
        }
    }

    /// Mixing ratios σ(λ) per layer, one inner vector per block; empty
    /// inner vectors for a baseline model.
    pub fn lambda_by_layer(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| b.attn.inspect_lambda())
            .collect()
    }

    /// One forward pass over a batch. Training mode updates every block's
    /// cache and applies dropout; eval mode touches nothing. The returned
    /// loss node is the mean cross-entropy over labeled targets.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: &TaskBatch,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<ForwardPass<T>> {
        let (b, t) = (batch.b, batch.t);
        if t > self.cfg.t_max {
            return Err(Error::dim(format!(
                "sequence length {t} exceeds t_max {}",
                self.cfg.t_max
            )));
        }
        let expect_labels = match self.cfg.task_head {
            TaskHead::Classification { .. } => b,
            TaskHead::Lm => b * t,
        };
        if batch.labels.len() != expect_labels {
            return Err(Error::data(format!(
                "expected {expect_labels} labels, got {}",
                batch.labels.len()
            )));
        }
        if batch.lengths.len() != b || batch.lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::data("per-item lengths must lie in 1..=T"));
        }

        let mut binds = ParamBinds::new();
        let emb_table = tape.leaf(&self.embedding);
        let pos_table = tape.leaf(&self.pos);
        binds.push(("embedding".into(), emb_table));
        binds.push(("pos".into(), pos_table));

        let emb = tape.embedding(emb_table, &batch.tokens, &[b, t])?;
        let positions: Vec<u32> = (0..t as u32).collect();
        let pos_rows = tape.embedding(pos_table, &positions, &[t])?;
        let mut x = tape.add_suffix(emb, pos_rows)?;

        let lengths = if batch.lengths.iter().all(|&l| l == t) {
            None
        } else {
            Some(batch.lengths.as_slice())
        };

        let dropout = if training { self.cfg.dropout } else { 0.0 };
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let g1 = tape.leaf(&block.ln1.gamma);
            let b1 = tape.leaf(&block.ln1.beta);
            binds.push((format!("blocks.{i}.ln1.gamma"), g1));
            binds.push((format!("blocks.{i}.ln1.beta"), b1));
            let normed = tape.layer_norm(x, g1, b1, T::from_f64(LN_EPS))?;
            let attn_out = block.attn.forward(
                tape,
                &mut binds,
                &format!("blocks.{i}.attn"),
                normed,
                lengths,
                training,
            )?;
            let attn_out = tape.dropout(attn_out, dropout, rng)?;
            x = tape.add(x, attn_out)?;

            let g2 = tape.leaf(&block.ln2.gamma);
            let b2 = tape.leaf(&block.ln2.beta);
            binds.push((format!("blocks.{i}.ln2.gamma"), g2));
            binds.push((format!("blocks.{i}.ln2.beta"), b2));
            let normed2 = tape.layer_norm(x, g2, b2, T::from_f64(LN_EPS))?;
            let w1 = tape.leaf(&block.ffn.w1);
            let fb1 = tape.leaf(&block.ffn.b1);
            let w2 = tape.leaf(&block.ffn.w2);
            let fb2 = tape.leaf(&block.ffn.b2);
            binds.push((format!("blocks.{i}.ffn.w1"), w1));
            binds.push((format!("blocks.{i}.ffn.b1"), fb1));
            binds.push((format!("blocks.{i}.ffn.w2"), w2));
            binds.push((format!("blocks.{i}.ffn.b2"), fb2));
            let h = tape.matmul(normed2, w1)?;
            let h = tape.add_suffix(h, fb1)?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, w2)?;
            let h = tape.add_suffix(h, fb2)?;
            let h = tape.dropout(h, dropout, rng)?;
            x = tape.add(x, h)?;
        }

        let hg = tape.leaf(&self.head_ln.gamma);
        let hb = tape.leaf(&self.head_ln.beta);
        binds.push(("head_ln.gamma".into(), hg));
        binds.push(("head_ln.beta".into(), hb));
        let x = tape.layer_norm(x, hg, hb, T::from_f64(LN_EPS))?;

        let hw = tape.leaf(&self.head_w);
        let hbias = tape.leaf(&self.head_b);
        binds.push(("head.w".into(), hw));
        binds.push(("head.b".into(), hbias));

        let (logits_node, loss_node) = match self.cfg.task_head {
            TaskHead::Classification { classes } => {
                let pooled = tape.mean_axis(x, 1)?;
                let logits = tape.matmul(pooled, hw)?;
                let logits = tape.add_suffix(logits, hbias)?;
                debug_assert_eq!(tape.shape(logits), &[b, classes]);
                let loss = tape.cross_entropy_mean(logits, &batch.labels)?;
                (logits, loss)
            }
            TaskHead::Lm => {
                let logits = tape.matmul(x, hw)?;
                let logits = tape.add_suffix(logits, hbias)?;
                let flat = tape.reshape(logits, &[b * t, self.cfg.vocab])?;
                let loss = tape.cross_entropy_mean(flat, &batch.labels)?;
                (logits, loss)
            }
        };

        Ok(ForwardPass {
            logits: tape.to_tensor(logits_node),
            logits_node,
            loss_node,
            binds,
        })
    }
}

/// Fraction of labeled positions where the argmax logit hits the label.
/// Classification logits are [B, C] with [B] labels; language-model logits
/// are [B, T, V] with [B*T] labels, -1 skipping a position. Returns `None`
/// when nothing is labeled.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[i64]) -> Option<f64> {
    let classes = *logits.shape().last().unwrap_or(&1);
    let rows = logits.numel() / classes;
    debug_assert_eq!(rows, labels.len());
    let mut hit = 0usize;
    let mut counted = 0usize;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label < 0 {
            continue;
        }
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        counted += 1;
        if best == label as usize {
            hit += 1;
        }
    }
    (counted > 0).then(|| hit as f64 / counted as f64)
}
