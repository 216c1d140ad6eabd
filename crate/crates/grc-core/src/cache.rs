//! The gated recurrent cache: a fixed-size memory tensor updated once per
//! training step through reset/update gates, shared across the batch by
//! averaging per-item updates.
//!
//! The cache value `C` is a buffer, not an optimizer parameter: it changes
//! through `commit_update` during forward passes and is persisted alongside
//! parameters. The gate weights are ordinary trainable parameters.
//!
//! Gradient flow across steps is truncated: each update treats the previous
//! cache value as a constant. `bptt_window` widens that to k steps by
//! replaying the last k-1 recorded inputs with the current weights; the
//! replayed final state is what gets committed, so the attention branch
//! always reads exactly the value that was stored.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{fmt_shape, Tensor};

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Cache channel width for ratio `r` and model width `d`: round-half-up of
/// r*d. The ratio must lie in (0, 1] and the width must come out >= 1.
pub fn cache_width(r: f64, d: usize) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("caching ratio {r} outside (0, 1]")));
    }
    let d_m = (r * d as f64 + 0.5).floor() as usize;
    if d_m == 0 {
        return Err(Error::config(format!(
            "caching ratio {r} with width {d} rounds to an empty cache"
        )));
    }
    Ok(d_m)
}

/// First `round(r*D)` channels of every token.
pub fn slice_channels<T: Real>(x: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("slice_channels: rank-0 input"))?;
    let d_m = cache_width(r, d)?;
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let s = tape.slice_last_prefix(xid, d_m)?;
    Ok(tape.to_tensor(s))
}

/// Linear resampling of the token axis to `t_m` points; see
/// `Tape::interp_tokens` for the exact sampling rule.
pub fn token_interpolate<T: Real>(
    x: &Tensor<T>,
    t_m: usize,
    lengths: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let s = tape.interp_tokens(xid, t_m, lengths)?;
    Ok(tape.to_tensor(s))
}

/// Tape handles for the gate parameters of one cache.
#[derive(Debug, Clone, Copy)]
pub struct CacheWeightNodes {
    pub w_u: NodeId,
    pub w_r: NodeId,
    pub w_c: NodeId,
    pub b_u: NodeId,
    pub b_r: NodeId,
    pub b_c: NodeId,
}

#[derive(Debug, Clone)]
struct HistoryEntry<T> {
    /// Cache value before this step's update was applied.
    c_before: Tensor<T>,
    /// Detached interpolated slice batch that drove the update.
    xbar: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct GrcCache<T> {
    /// Current cache value, shape [T_m, D_m].
    pub c: Tensor<T>,
    /// Update/reset/candidate projections, each [2*D_m, D_m], applied to the
    /// channel concatenation of the incoming slice and the previous cache.
    pub w_u: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_c: Tensor<T>,
    pub b_u: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_c: Tensor<T>,
    pub t_m: usize,
    pub d_m: usize,
    /// Caching ratio that produced `d_m`; kept for serialization and sweeps.
    pub r: f64,
    /// Number of committed updates.
    pub step: u64,
    /// While set, commits are rejected and forward passes are read-only.
    pub frozen: bool,
    bptt_window: usize,
    history: Vec<HistoryEntry<T>>,
}

impl<T: Real> GrcCache<T> {
    /// Zero cache with gate weights drawn uniformly at scale 1/sqrt(2*D_m)
    /// and zero biases, so initial gates sit near one half.
    pub fn init(t_m: usize, d_m: usize, r: f64, rng: &mut SeededRng) -> Result<Self> {
        if t_m == 0 || d_m == 0 {
            return Err(Error::config(format!(
                "cache needs positive dimensions, got T_m={t_m}, D_m={d_m}"
            )));
        }
        let bound = 1.0 / ((2 * d_m) as f64).sqrt();
        let weight =
            |rng: &mut SeededRng| Tensor::rand_uniform(&[2 * d_m, d_m], -bound, bound, rng).with_grad();
        Ok(GrcCache {
            c: Tensor::zeros(&[t_m, d_m]),
            w_u: weight(rng),
            w_r: weight(rng),
            w_c: weight(rng),
            b_u: Tensor::zeros(&[d_m]).with_grad(),
            b_r: Tensor::zeros(&[d_m]).with_grad(),
            b_c: Tensor::zeros(&[d_m]).with_grad(),
            t_m,
            d_m,
            r,
            step: 0,
            frozen: false,
            bptt_window: 1,
            history: Vec::new(),
        })
    }

    /// Number of update steps whose gradients are kept; 1 means the
    /// previous cache is always a constant.
    pub fn set_window(&mut self, window: usize) -> Result<()> {
        if window == 0 {
            return Err(Error::config("bptt window must be at least 1"));
        }
        self.bptt_window = window;
        let keep = window - 1;
        if self.history.len() > keep {
            let drop = self.history.len() - keep;
            self.history.drain(..drop);
        }
        Ok(())
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        self.set_window(window)?;
        Ok(self)
    }

    pub fn window(&self) -> usize {
        self.bptt_window
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn thaw(&mut self) {
        self.frozen = false;
    }

    /// Enters the gate parameters on a tape, tracking gradients.
    pub fn enter_weights(&self, tape: &mut Tape<T>) -> CacheWeightNodes {
        CacheWeightNodes {
            w_u: tape.leaf(&self.w_u),
            w_r: tape.leaf(&self.w_r),
            w_c: tape.leaf(&self.w_c),
            b_u: tape.leaf(&self.b_u),
            b_r: tape.leaf(&self.b_r),
            b_c: tape.leaf(&self.b_c),
        }
    }

    fn enter_weights_const(&self, tape: &mut Tape<T>) -> CacheWeightNodes {
        CacheWeightNodes {
            w_u: tape.constant(&self.w_u),
            w_r: tape.constant(&self.w_r),
            w_c: tape.constant(&self.w_c),
            b_u: tape.constant(&self.b_u),
            b_r: tape.constant(&self.b_r),
            b_c: tape.constant(&self.b_c),
        }
    }

    fn check_xbar_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.t_m || shape[2] != self.d_m {
            return Err(Error::dim(format!(
                "cache update expects [B, {}, {}], got {}",
                self.t_m,
                self.d_m,
                fmt_shape(shape)
            )));
        }
        Ok(())
    }

    /// Update and reset gates for one batch item ([T_m, D_m]) against the
    /// current cache.
    pub fn compute_gates(&self, xbar: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if xbar.shape() != [self.t_m, self.d_m] {
            return Err(Error::dim(format!(
                "compute_gates expects [{}, {}], got {}",
                self.t_m,
                self.d_m,
                fmt_shape(xbar.shape())
            )));
        }
        let mut tape = Tape::new();
        let w = self.enter_weights_const(&mut tape);
        let x3 = Tensor::new(&[1, self.t_m, self.d_m], xbar.data().to_vec())?;
        let xid = tape.constant(&x3);
        let c_prev = tape.constant(&self.c);
        let (g_u, g_r) = gates_graph(&mut tape, xid, c_prev, &w)?;
        let squeeze = |tape: &mut Tape<T>, id: NodeId| -> Result<Tensor<T>> {
            let s = tape.reshape(id, &[self.t_m, self.d_m])?;
            Ok(tape.to_tensor(s))
        };
        Ok((squeeze(&mut tape, g_u)?, squeeze(&mut tape, g_r)?))
    }

    /// Builds the full differentiable update chain on `tape`: oldest
    /// recorded cache state as a constant, recorded inputs replayed with the
    /// supplied weight nodes, then the live input. Returns the node holding
    /// the new [T_m, D_m] cache value.
    pub fn build_chain(
        &self,
        tape: &mut Tape<T>,
        live_xbar: NodeId,
        w: &CacheWeightNodes,
    ) -> Result<NodeId> {
        self.check_xbar_shape(tape.shape(live_xbar))?;
        let mut c = match self.history.first() {
            Some(entry) => tape.constant(&entry.c_before),
            None => tape.constant(&self.c),
        };
        for entry in &self.history {
            let x = tape.constant(&entry.xbar);
            c = update_step_graph(tape, x, c, w)?;
        }
        update_step_graph(tape, live_xbar, c, w)
    }

    /// Stores a computed cache value and records the driving input for the
    /// replay window. Rejected while frozen.
    pub fn commit_update(&mut self, xbar_interp: &Tensor<T>, c_new: Tensor<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::state("cache is frozen; thaw before updating"));
        }
        self.check_xbar_shape(xbar_interp.shape())?;
        if c_new.shape() != [self.t_m, self.d_m] {
            return Err(Error::dim(format!(
                "committed cache must be [{}, {}], got {}",
                self.t_m,
                self.d_m,
                fmt_shape(c_new.shape())
            )));
        }
        if self.bptt_window > 1 {
            let mut detached = xbar_interp.clone();
            detached.requires_grad = false;
            detached.grad = None;
            self.history.push(HistoryEntry {
                c_before: self.c.clone(),
                xbar: detached,
            });
            let keep = self.bptt_window - 1;
            if self.history.len() > keep {
                let drop = self.history.len() - keep;
                self.history.drain(..drop);
            }
        }
        self.c = c_new;
        self.c.requires_grad = false;
        self.c.grad = None;
        self.step += 1;
        Ok(())
    }

    /// One eager update from an already-interpolated slice batch
    /// [B, T_m, D_m]: gates, candidate, convex combination, batch mean,
    /// commit. Matches the training-path values exactly.
    pub fn update(&mut self, xbar_interp: &Tensor<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::state("cache is frozen; thaw before updating"));
        }
        let mut tape = Tape::new();
        let w = self.enter_weights_const(&mut tape);
        let xid = tape.constant(xbar_interp);
        let c_new = self.build_chain(&mut tape, xid, &w)?;
        let value = tape.to_tensor(c_new);
        self.commit_update(xbar_interp, value)
    }
}

/// g_u and g_r for a [B, T_m, D_m] input against a [T_m, D_m] cache node.
fn gates_graph<T: Real>(
    tape: &mut Tape<T>,
    xbar: NodeId,
    c_prev: NodeId,
    w: &CacheWeightNodes,
) -> Result<(NodeId, NodeId)> {
    let b = tape.shape(xbar)[0];
    let cexp = tape.expand_leading(c_prev, b)?;
    let cat = tape.concat_last(xbar, cexp)?;
    let pre_u = tape.matmul(cat, w.w_u)?;
    let pre_u = tape.add_suffix(pre_u, w.b_u)?;
    let g_u = tape.sigmoid(pre_u)?;
    let pre_r = tape.matmul(cat, w.w_r)?;
    let pre_r = tape.add_suffix(pre_r, w.b_r)?;
    let g_r = tape.sigmoid(pre_r)?;
    Ok((g_u, g_r))
}

/// One gated update step: per-item candidate and convex combination, then
/// the batch mean. `xbar` is [B, T_m, D_m], `c_prev` is [T_m, D_m]; the
/// result is the new [T_m, D_m] cache node.
pub fn update_step_graph<T: Real>(
    tape: &mut Tape<T>,
    xbar: NodeId,
    c_prev: NodeId,
    w: &CacheWeightNodes,
) -> Result<NodeId> {
    let b = tape.shape(xbar)[0];
    let (g_u, g_r) = gates_graph(tape, xbar, c_prev, w)?;
    let cexp = tape.expand_leading(c_prev, b)?;
    let reset = tape.mul(g_r, cexp)?;
    let cat = tape.concat_last(xbar, reset)?;
    let cand = tape.matmul(cat, w.w_c)?;
    let cand = tape.add_suffix(cand, w.b_c)?;
    let keep_ratio = tape.one_minus(g_u)?;
    let kept = tape.mul(keep_ratio, cexp)?;
    let taken = tape.mul(g_u, cand)?;
    let per_item = tape.add(kept, taken)?;
    tape.mean_axis(per_item, 0)
}
