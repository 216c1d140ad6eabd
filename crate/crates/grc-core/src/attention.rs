//! Multi-head attention with an optional cached branch.
//!
//! The self branch is standard scaled dot-product attention over the input
//! sequence. The cached branch projects queries from the channel slice of
//! the input and keys/values from the recurrent cache, all to width D so
//! the two branches can be mixed per head with a learned sigmoid ratio
//! before the output projection.
//!
//! One training forward runs, in order: channel slice, token interpolation,
//! gated cache update, self attention, cached attention over the freshly
//! updated cache, per-head mixing, output projection. With `training` off
//! the cache is read-only and the pass has no side effects.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cache::{cache_width, GrcCache};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{fmt_shape, Tensor};

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Names and tape handles of every parameter entered during a forward pass,
/// in registry order. The trainer reads gradients back through these.
pub type ParamBinds = Vec<(String, NodeId)>;

/// Everything the cached branch adds to a plain attention layer.
#[derive(Debug, Clone)]
pub struct CachedBranch<T> {
    /// Per-head mixing logits, zero-initialized so both branches start at
    /// equal weight.
    pub lambda: Tensor<T>,
    /// Query projection from the channel slice, [D_m, D].
    pub w_qbar: Tensor<T>,
    /// Key projection from the cache, [D_m, D].
    pub w_kbar: Tensor<T>,
    /// Value projection from the cache, [D_m, D]; width D keeps per-head
    /// outputs the same size as the self branch.
    pub w_vbar: Tensor<T>,
    pub cache: GrcCache<T>,
}

#[derive(Debug, Clone)]
pub struct GrcAttentionLayer<T> {
    pub heads: usize,
    pub d: usize,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    /// Present when the layer mixes in cached attention; a plain
    /// self-attention layer otherwise.
    pub cached: Option<CachedBranch<T>>,
}

/// Cache geometry for layers that carry one.
#[derive(Debug, Clone, Copy)]
pub struct CacheSpec {
    pub t_m: usize,
    pub r: f64,
}

impl<T: Real> GrcAttentionLayer<T> {
    pub fn init(
        d: usize,
        heads: usize,
        cache: Option<CacheSpec>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "head count {heads} must divide model width {d}"
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let proj = |rng: &mut SeededRng| -> Tensor<T> {
            Tensor::rand_uniform(&[d, d], -bound, bound, rng).with_grad()
        };
        let w_q = proj(rng);
        let w_k = proj(rng);
        let w_v = proj(rng);
        let w_o = proj(rng);
        let cached = match cache {
            None => None,
            Some(spec) => {
                let d_m = cache_width(spec.r, d)?;
                if d_m % heads != 0 {
                    return Err(Error::config(format!(
                        "cache width {d_m} (ratio {}) not divisible by {heads} heads",
                        spec.r
                    )));
                }
                let bound_m = 1.0 / (d_m as f64).sqrt();
                let cproj = |rng: &mut SeededRng| -> Tensor<T> {
                    Tensor::rand_uniform(&[d_m, d], -bound_m, bound_m, rng).with_grad()
                };
                Some(CachedBranch {
                    lambda: Tensor::zeros(&[heads]).with_grad(),
                    w_qbar: cproj(rng),
                    w_kbar: cproj(rng),
                    w_vbar: cproj(rng),
                    cache: GrcCache::init(spec.t_m, d_m, spec.r, rng)?,
                })
            }
        };
        Ok(GrcAttentionLayer {
            heads,
            d,
            w_q,
            w_k,
            w_v,
            w_o,
            cached,
        })
    }

    /// Current per-head mixing ratios σ(λ_h); empty for a plain layer.
    pub fn inspect_lambda(&self) -> Vec<f64> {
        match &self.cached {
            None => Vec::new(),
            Some(cb) => cb
                .lambda
                .data()
                .iter()
                .map(|&l| {
                    let x = l.as_f64();
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                })
                .collect(),
        }
    }

    /// Visits every trainable tensor with its stable registry name.
    pub fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor<T>),
    ) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        if let Some(cb) = &mut self.cached {
            f(format!("{prefix}.lambda"), &mut cb.lambda);
            f(format!("{prefix}.w_qbar"), &mut cb.w_qbar);
            f(format!("{prefix}.w_kbar"), &mut cb.w_kbar);
            f(format!("{prefix}.w_vbar"), &mut cb.w_vbar);
            f(format!("{prefix}.cache.w_u"), &mut cb.cache.w_u);
            f(format!("{prefix}.cache.w_r"), &mut cb.cache.w_r);
            f(format!("{prefix}.cache.w_c"), &mut cb.cache.w_c);
            f(format!("{prefix}.cache.b_u"), &mut cb.cache.b_u);
            f(format!("{prefix}.cache.b_r"), &mut cb.cache.b_r);
            f(format!("{prefix}.cache.b_c"), &mut cb.cache.b_c);
        }
    }

    /// Self branch only, heads concatenated, no output projection.
    pub fn self_attention(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let wq = tape.constant(&self.w_q);
        let wk = tape.constant(&self.w_k);
        let wv = tape.constant(&self.w_v);
        let heads = self_heads(&mut tape, xid, wq, wk, wv, self.heads)?;
        let merged = merge_heads(&mut tape, heads)?;
        Ok(tape.to_tensor(merged))
    }

    /// Cached branch only: queries from the un-interpolated slice `xbar`
    /// ([B, T, D_m]), keys and values from `c` ([T_m, D_m]). Heads
    /// concatenated, no output projection.
    pub fn cached_attention(&self, xbar: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let cb = self
            .cached
            .as_ref()
            .ok_or_else(|| Error::state("layer has no cached branch"))?;
        let mut tape = Tape::new();
        let xid = tape.constant(xbar);
        let cid = tape.constant(c);
        let wq = tape.constant(&cb.w_qbar);
        let wk = tape.constant(&cb.w_kbar);
        let wv = tape.constant(&cb.w_vbar);
        let heads = cached_heads(&mut tape, xid, cid, wq, wk, wv, self.heads)?;
        let merged = merge_heads(&mut tape, heads)?;
        Ok(tape.to_tensor(merged))
    }

    /// Full forward on `tape`. With `training` set, the cache is updated
    /// before the cached branch reads it and the new value is committed;
    /// otherwise the stored cache is used read-only.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        binds: &mut ParamBinds,
        prefix: &str,
        x: NodeId,
        lengths: Option<&[usize]>,
        training: bool,
    ) -> Result<NodeId> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::dim(format!(
                "attention expects [B, T, {}], got {}",
                self.d,
                fmt_shape(shape)
            )));
        }
        let wq = tape.leaf(&self.w_q);
        let wk = tape.leaf(&self.w_k);
        let wv = tape.leaf(&self.w_v);
        let wo = tape.leaf(&self.w_o);
        binds.push((format!("{prefix}.w_q"), wq));
        binds.push((format!("{prefix}.w_k"), wk));
        binds.push((format!("{prefix}.w_v"), wv));
        binds.push((format!("{prefix}.w_o"), wo));

        let o_self = self_heads(tape, x, wq, wk, wv, self.heads)?;

        let mixed = match &mut self.cached {
            None => o_self,
            Some(cb) => {
                if training && cb.cache.frozen {
                    return Err(Error::state(
                        "training forward on a frozen cache; thaw it first",
                    ));
                }
                let lam = tape.leaf(&cb.lambda);
                let wqb = tape.leaf(&cb.w_qbar);
                let wkb = tape.leaf(&cb.w_kbar);
                let wvb = tape.leaf(&cb.w_vbar);
                binds.push((format!("{prefix}.lambda"), lam));
                binds.push((format!("{prefix}.w_qbar"), wqb));
                binds.push((format!("{prefix}.w_kbar"), wkb));
                binds.push((format!("{prefix}.w_vbar"), wvb));

                let xbar = tape.slice_last_prefix(x, cb.cache.d_m)?;
                let c_t = if training {
                    let w = cb.cache.enter_weights(tape);
                    binds.push((format!("{prefix}.cache.w_u"), w.w_u));
                    binds.push((format!("{prefix}.cache.w_r"), w.w_r));
                    binds.push((format!("{prefix}.cache.w_c"), w.w_c));
                    binds.push((format!("{prefix}.cache.b_u"), w.b_u));
                    binds.push((format!("{prefix}.cache.b_r"), w.b_r));
                    binds.push((format!("{prefix}.cache.b_c"), w.b_c));
                    let xbar_i = tape.interp_tokens(xbar, cb.cache.t_m, lengths)?;
                    let c_t = cb.cache.build_chain(tape, xbar_i, &w)?;
                    let xbar_val = tape.to_tensor(xbar_i);
                    let c_val = tape.to_tensor(c_t);
                    cb.cache.commit_update(&xbar_val, c_val)?;
                    c_t
                } else {
                    tape.constant(&cb.cache.c)
                };

                let o_mem = cached_heads(tape, xbar, c_t, wqb, wkb, wvb, self.heads)?;
                let ratio = tape.sigmoid(lam)?;
                let keep = tape.one_minus(ratio)?;
                let mem_part = tape.mul_axis_vec(o_mem, ratio, 1)?;
                let self_part = tape.mul_axis_vec(o_self, keep, 1)?;
                tape.add(mem_part, self_part)?
            }
        };

        let merged = merge_heads(tape, mixed)?;
        tape.matmul(merged, wo)
    }
}

/// [B, T, D] to [B, H, T, D/H].
fn split_heads<T: Real>(tape: &mut Tape<T>, x: NodeId, heads: usize) -> Result<NodeId> {
    let (b, t, d) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let r = tape.reshape(x, &[b, t, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// Inverse of `split_heads`.
fn merge_heads<T: Real>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let (b, h, t, dh) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2], s[3])
    };
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, t, h * dh])
}

/// Scaled dot-product attention of the input against itself, per head:
/// [B, T, D] in, [B, H, T, D/H] out.
fn self_heads<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let d = tape.shape(x)[2];
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let kt = tape.transpose_last2(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scale = T::from_f64(1.0 / ((d / heads) as f64).sqrt());
    let scaled = tape.scale(scores, scale)?;
    let attn = tape.softmax_last(scaled)?;
    tape.matmul(attn, vh)
}

/// Attention of slice queries against the cache, per head: xbar
/// [B, T, D_m] and c [T_m, D_m] in, [B, H, T, D/H] out. The softmax
/// temperature is sqrt(D_m/H) even though projections are D wide.
fn cached_heads<T: Real>(
    tape: &mut Tape<T>,
    xbar: NodeId,
    c: NodeId,
    w_qbar: NodeId,
    w_kbar: NodeId,
    w_vbar: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let d_m = tape.shape(xbar)[2];
    let (t_m, d) = {
        let s = tape.shape(w_kbar);
        (tape.shape(c)[0], s[1])
    };
    let q = tape.matmul(xbar, w_qbar)?;
    let k = tape.matmul(c, w_kbar)?;
    let v = tape.matmul(c, w_vbar)?;
    let qh = split_heads(tape, q, heads)?;
    let dh = d / heads;
    let k3 = tape.reshape(k, &[t_m, heads, dh])?;
    let kh = tape.permute(k3, &[1, 0, 2])?;
    let v3 = tape.reshape(v, &[t_m, heads, dh])?;
    let vh = tape.permute(v3, &[1, 0, 2])?;
    let kt = tape.transpose_last2(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scale = T::from_f64(1.0 / ((d_m / heads) as f64).sqrt());
    let scaled = tape.scale(scores, scale)?;
    let attn = tape.softmax_last(scaled)?;
    tape.matmul(attn, vh)
}
