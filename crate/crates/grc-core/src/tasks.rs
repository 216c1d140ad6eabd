//! Synthetic task generators with built-in verification oracles.
//!
//! Three task families: a copy task probing within-sequence recall, a
//! desk-scale ListOps variant probing hierarchical reduction, and a
//! prototype task where class evidence is a persistent per-class motif
//! shared across samples, so memory that outlives a single batch pays off.
//!
//! Each generator is deterministic given an rng state. ListOps labels are
//! re-derived by an independent token-level interpreter at generation time;
//! the prototype task carries a brute-force nearest-motif classifier that
//! doubles as a Bayes-ceiling estimator.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// One batch of token sequences with task labels.
///
/// `tokens` is [B, T] row-major. Classification labels are one per item;
/// language-model labels are one per position with -1 marking positions
/// excluded from the loss. `lengths` gives the valid prefix per item;
/// positions past it hold padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub tokens: Vec<u32>,
    pub b: usize,
    pub t: usize,
    pub labels: Vec<i64>,
    pub lengths: Vec<usize>,
}

impl TaskBatch {
    pub fn token_at(&self, item: usize, pos: usize) -> u32 {
        self.tokens[item * self.t + pos]
    }
}

/// Sequences whose first half is repeated verbatim in the second half.
/// Labels ask for the next token at each position of the copy region
/// (from the last slot of the first half through the penultimate slot),
/// -1 everywhere else.
pub fn gen_copy_batch(
    rng: &mut SeededRng,
    b: usize,
    t: usize,
    vocab: u32,
) -> Result<TaskBatch> {
    if vocab < 3 {
        return Err(Error::config("copy task needs a vocabulary of at least 3"));
    }
    if b == 0 || t < 2 || t % 2 != 0 {
        return Err(Error::config(
            "copy task needs a positive batch and an even length of at least 2",
        ));
    }
    let half = t / 2;
    let mut tokens = vec![0u32; b * t];
    let mut labels = vec![-1i64; b * t];
    for bi in 0..b {
        let row = &mut tokens[bi * t..(bi + 1) * t];
        for i in 0..half {
            let tok = rng.below(vocab as usize) as u32;
            row[i] = tok;
            row[half + i] = tok;
        }
        for p in half - 1..t - 1 {
            labels[bi * t + p] = row[p + 1] as i64;
        }
    }
    Ok(TaskBatch {
        tokens,
        b,
        t,
        labels,
        lengths: vec![t; b],
    })
}

pub const LISTOPS_PAD: u32 = 0;
pub const LISTOPS_OPEN_MIN: u32 = 11;
pub const LISTOPS_OPEN_MAX: u32 = 12;
pub const LISTOPS_OPEN_MED: u32 = 13;
pub const LISTOPS_OPEN_SM: u32 = 14;
pub const LISTOPS_CLOSE: u32 = 15;
pub const LISTOPS_VOCAB: u32 = 16;

fn digit_token(d: i64) -> u32 {
    d as u32 + 1
}

fn apply_listops(op: u32, vals: &[i64]) -> i64 {
    match op {
        LISTOPS_OPEN_MIN => vals.iter().copied().min().unwrap(),
        LISTOPS_OPEN_MAX => vals.iter().copied().max().unwrap(),
        LISTOPS_OPEN_MED => {
            let mut sorted = vals.to_vec();
            sorted.sort_unstable();
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2
            }
        }
        _ => vals.iter().sum::<i64>().rem_euclid(10),
    }
}

/// Emits one expression into `out` and returns its value. `budget` bounds
/// the number of tokens this subtree may occupy.
fn gen_expr(rng: &mut SeededRng, depth_left: usize, budget: usize, out: &mut Vec<u32>) -> i64 {
    if depth_left == 0 || budget < 4 || rng.coin(0.3) {
        let d = rng.below(10) as i64;
        out.push(digit_token(d));
        return d;
    }
    let op = LISTOPS_OPEN_MIN + rng.below(4) as u32;
    out.push(op);
    let mut remaining = budget - 2;
    let want = 2 + rng.below(3);
    let mut vals = Vec::new();
    while vals.len() < want && remaining > 0 {
        let slice = if vals.len() + 1 == want {
            remaining
        } else {
            1 + rng.below(remaining)
        };
        let before = out.len();
        vals.push(gen_expr(rng, depth_left - 1, slice, out));
        remaining -= out.len() - before;
    }
    out.push(LISTOPS_CLOSE);
    apply_listops(op, &vals)
}

fn parse_listops(tokens: &[u32], pos: &mut usize) -> Result<i64> {
    let tok = *tokens
        .get(*pos)
        .ok_or_else(|| Error::data("expression ends mid-parse"))?;
    *pos += 1;
    match tok {
        1..=10 => Ok(tok as i64 - 1),
        LISTOPS_OPEN_MIN..=LISTOPS_OPEN_SM => {
            let mut vals = Vec::new();
            loop {
                match tokens.get(*pos) {
                    Some(&LISTOPS_CLOSE) => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => vals.push(parse_listops(tokens, pos)?),
                    None => return Err(Error::data("unclosed expression")),
                }
            }
            if vals.is_empty() {
                return Err(Error::data("operator with no arguments"));
            }
            Ok(apply_listops(tok, &vals))
        }
        _ => Err(Error::data("unexpected token in expression")),
    }
}

/// Evaluates a serialized expression, ignoring trailing padding. Written as
/// a fresh recursive-descent pass over the tokens so it can cross-check the
/// generator.
pub fn listops_eval(tokens: &[u32]) -> Result<i64> {
    let end = tokens
        .iter()
        .position(|&t| t == LISTOPS_PAD)
        .unwrap_or(tokens.len());
    let mut pos = 0;
    let val = parse_listops(&tokens[..end], &mut pos)?;
    if pos != end {
        return Err(Error::data("trailing tokens after expression"));
    }
    Ok(val)
}

/// Nested MIN/MAX/MED/SUM-MOD-10 reduction trees, padded to `max_len`,
/// with the tree value (0..=9) as the class label. Every label is
/// re-derived from the emitted tokens by `listops_eval` before the batch is
/// returned.
pub fn gen_listops_batch(
    rng: &mut SeededRng,
    b: usize,
    max_len: usize,
    max_depth: usize,
) -> Result<TaskBatch> {
    if max_len < 8 {
        return Err(Error::config("listops needs max_len of at least 8"));
    }
    if b == 0 || max_depth == 0 {
        return Err(Error::config(
            "listops needs a positive batch and a positive depth",
        ));
    }
    let mut tokens = vec![LISTOPS_PAD; b * max_len];
    let mut labels = vec![0i64; b];
    let mut lengths = vec![0usize; b];
    let mut expr = Vec::with_capacity(max_len);
    for bi in 0..b {
        expr.clear();
        let op = LISTOPS_OPEN_MIN + rng.below(4) as u32;
        expr.push(op);
        let mut remaining = max_len - 2;
        let want = 2 + rng.below(3);
        let mut vals = Vec::new();
        while vals.len() < want && remaining > 0 {
            let slice = if vals.len() + 1 == want {
                remaining
            } else {
                1 + rng.below(remaining)
            };
            let before = expr.len();
            vals.push(gen_expr(rng, max_depth - 1, slice, &mut expr));
            remaining -= expr.len() - before;
        }
        expr.push(LISTOPS_CLOSE);
        let label = apply_listops(op, &vals);
        let checked = listops_eval(&expr)?;
        if checked != label {
            return Err(Error::data(
                "generator and interpreter disagree on a listops label",
            ));
        }
        tokens[bi * max_len..bi * max_len + expr.len()].copy_from_slice(&expr);
        labels[bi] = label;
        lengths[bi] = expr.len();
    }
    Ok(TaskBatch {
        tokens,
        b,
        t: max_len,
        labels,
        lengths,
    })
}

/// Classification task whose class evidence lives in persistent per-class
/// token motifs: every sample is its class motif with each position
/// independently replaced by a uniform random token with probability
/// `noise`.
#[derive(Debug, Clone)]
pub struct PrototypeTask {
    /// One motif of length T per class, pairwise distinct.
    pub motifs: Vec<Vec<u32>>,
    pub vocab: u32,
    pub noise: f64,
}

pub fn prototype_task(
    seed: u64,
    t: usize,
    classes: usize,
    vocab: u32,
    noise: f64,
) -> Result<PrototypeTask> {
    if classes < 2 {
        return Err(Error::config("prototype task needs at least 2 classes"));
    }
    if t == 0 || vocab < 2 {
        return Err(Error::config(
            "prototype task needs positive length and a vocabulary of at least 2",
        ));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::config("prototype noise must lie in [0, 1)"));
    }
    let mut rng = SeededRng::new(seed);
    let mut motifs: Vec<Vec<u32>> = Vec::with_capacity(classes);
    while motifs.len() < classes {
        let motif: Vec<u32> = (0..t).map(|_| rng.below(vocab as usize) as u32).collect();
        if !motifs.contains(&motif) {
            motifs.push(motif);
        }
    }
    Ok(PrototypeTask {
        motifs,
        vocab,
        noise,
    })
}

impl PrototypeTask {
    pub fn t(&self) -> usize {
        self.motifs[0].len()
    }

    pub fn classes(&self) -> usize {
        self.motifs.len()
    }

    pub fn gen_batch(&self, rng: &mut SeededRng, b: usize) -> Result<TaskBatch> {
        if b == 0 {
            return Err(Error::config("prototype batch size must be positive"));
        }
        let t = self.t();
        let mut tokens = vec![0u32; b * t];
        let mut labels = vec![0i64; b];
        for bi in 0..b {
            let class = rng.below(self.classes());
            labels[bi] = class as i64;
            for (i, &m) in self.motifs[class].iter().enumerate() {
                tokens[bi * t + i] = if self.noise > 0.0 && rng.coin(self.noise) {
                    rng.below(self.vocab as usize) as u32
                } else {
                    m
                };
            }
        }
        Ok(TaskBatch {
            tokens,
            b,
            t,
            labels,
            lengths: vec![t; b],
        })
    }

    /// Class whose motif agrees with `row` at the most positions; ties go
    /// to the lower class index. This is the Bayes-optimal decision for the
    /// uniform-replacement noise model.
    pub fn nearest_motif(&self, row: &[u32]) -> usize {
        let mut best = 0;
        let mut best_matches = 0;
        for (class, motif) in self.motifs.iter().enumerate() {
            let matches = motif.iter().zip(row).filter(|(m, r)| m == r).count();
            if matches > best_matches {
                best = class;
                best_matches = matches;
            }
        }
        best
    }

    /// Monte-Carlo estimate of the nearest-motif classifier's accuracy at
    /// this noise level: the task's ceiling.
    pub fn bayes_estimate(&self, rng: &mut SeededRng, trials: usize) -> Result<f64> {
        if trials == 0 {
            return Err(Error::config("ceiling estimate needs at least one trial"));
        }
        let mut correct = 0usize;
        let mut done = 0usize;
        while done < trials {
            let batch = self.gen_batch(rng, trials.min(256))?;
            for bi in 0..batch.b {
                if done == trials {
                    break;
                }
                let row = &batch.tokens[bi * batch.t..(bi + 1) * batch.t];
                if self.nearest_motif(row) == batch.labels[bi] as usize {
                    correct += 1;
                }
                done += 1;
            }
        }
        Ok(correct as f64 / trials as f64)
    }
}
