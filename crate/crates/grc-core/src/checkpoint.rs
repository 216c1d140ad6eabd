//! Versioned binary snapshots of a full training run: model parameters,
//! cache buffers, optimizer moments, and RNG streams.
//!
//! Layout is little-endian with fixed-width fields throughout. A file
//! starts with magic bytes, a format version, and a precision tag, so a
//! loader can reject foreign or truncated input before touching the rest.
//! Any stored cache resumes with an empty gradient-truncation history;
//! only its committed state travels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, TaskHead};
use crate::optim::AdamW;
use crate::real::{Precision, Real};
use crate::rng::{RngState, SeededRng};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: [u8; 4] = *b"GRCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u128(out: &mut Vec<u8>, v: u128) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_data<T: Real>(out: &mut Vec<u8>, data: &[T]) {
    for &v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| Error::format("checkpoint holds a non-UTF-8 name"))
    }

    fn data<T: Real>(&mut self, numel: usize) -> Result<Vec<T>> {
        let width = T::PRECISION.tag() as usize;
        let bytes = self.take(numel * width)?;
        Ok(bytes.chunks_exact(width).map(T::read_le).collect())
    }
}

fn put_model_config(out: &mut Vec<u8>, cfg: &ModelConfig) {
    put_u32(out, cfg.layers as u32);
    put_u32(out, cfg.d as u32);
    put_u32(out, cfg.heads as u32);
    put_u32(out, cfg.t_m as u32);
    put_f64(out, cfg.r);
    put_u32(out, cfg.ffn_mult as u32);
    put_u32(out, cfg.vocab as u32);
    put_u32(out, cfg.t_max as u32);
    match cfg.task_head {
        TaskHead::Classification { classes } => {
            out.push(0);
            put_u32(out, classes as u32);
        }
        TaskHead::Lm => out.push(1),
    }
    out.push(cfg.cache_enabled as u8);
    put_f64(out, cfg.dropout);
    put_u32(out, cfg.bptt_window as u32);
}

fn read_model_config(r: &mut Reader) -> Result<ModelConfig> {
    let layers = r.u32()? as usize;
    let d = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let t_m = r.u32()? as usize;
    let ratio = r.f64()?;
    let ffn_mult = r.u32()? as usize;
    let vocab = r.u32()? as usize;
    let t_max = r.u32()? as usize;
    let task_head = match r.u8()? {
        0 => TaskHead::Classification {
            classes: r.u32()? as usize,
        },
        1 => TaskHead::Lm,
        tag => return Err(Error::format(format!("unknown task head tag {tag}"))),
    };
    let cache_enabled = match r.u8()? {
        0 => false,
        1 => true,
        tag => return Err(Error::format(format!("bad cache flag {tag}"))),
    };
    let dropout = r.f64()?;
    let bptt_window = r.u32()? as usize;
    Ok(ModelConfig {
        layers,
        d,
        heads,
        t_m,
        r: ratio,
        ffn_mult,
        vocab,
        t_max,
        task_head,
        cache_enabled,
        dropout,
        bptt_window,
    })
}

fn put_rng(out: &mut Vec<u8>, name: &str, state: &RngState) {
    put_str(out, name);
    out.extend_from_slice(&state.seed);
    put_u128(out, state.word_pos);
}

fn read_rng(r: &mut Reader) -> Result<(String, RngState)> {
    let name = r.string()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    Ok((name, RngState { seed, word_pos }))
}

/// Serializes the full run state. The byte stream is deterministic for a
/// given (model, optimizer, state) triple.
pub fn save_checkpoint<T: Real>(
    model: &mut Model<T>,
    opt: &AdamW<T>,
    state: &TrainState,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::PRECISION.tag());
    put_model_config(&mut out, &model.cfg);
    put_u64(&mut out, state.step);
    put_u32(&mut out, 2);
    put_rng(&mut out, "data", &state.data_rng.state());
    put_rng(&mut out, "dropout", &state.dropout_rng.state());

    let mut params: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
    model.for_each_param(&mut |name, tensor| {
        params.push((name, tensor.shape().to_vec(), tensor.data().to_vec()));
    });
    put_u32(&mut out, params.len() as u32);
    for (name, shape, data) in &params {
        put_str(&mut out, name);
        put_u32(&mut out, shape.len() as u32);
        for &dim in shape {
            put_u64(&mut out, dim as u64);
        }
        put_data(&mut out, data);
    }

    let cached: Vec<usize> = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.attn.cached.is_some())
        .map(|(i, _)| i)
        .collect();
    put_u32(&mut out, cached.len() as u32);
    for i in cached {
        let cache = &model.blocks[i].attn.cached.as_ref().unwrap().cache;
        put_u32(&mut out, i as u32);
        put_u32(&mut out, cache.t_m as u32);
        put_u32(&mut out, cache.d_m as u32);
        put_f64(&mut out, cache.r);
        put_u64(&mut out, cache.step);
        out.push(cache.frozen as u8);
        put_data(&mut out, cache.c.data());
        put_data(&mut out, cache.w_u.data());
        put_data(&mut out, cache.w_r.data());
        put_data(&mut out, cache.w_c.data());
        put_data(&mut out, cache.b_u.data());
        put_data(&mut out, cache.b_r.data());
        put_data(&mut out, cache.b_c.data());
    }

    put_u64(&mut out, opt.step);
    let moments: Vec<(&str, &[T], &[T])> = opt.iter_moments().collect();
    put_u32(&mut out, moments.len() as u32);
    for (name, m, v) in moments {
        put_str(&mut out, name);
        put_u64(&mut out, m.len() as u64);
        put_data(&mut out, m);
        put_data(&mut out, v);
    }
    out
}

/// Element width stored in a checkpoint, read from the header alone.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::format("bad magic bytes, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    Precision::from_tag(r.u8()?)
        .ok_or_else(|| Error::format("unknown precision tag"))
}

fn copy_into<T: Real>(target: &mut Tensor<T>, data: Vec<T>, what: &str) -> Result<()> {
    if data.len() != target.numel() {
        return Err(Error::format(format!(
            "checkpoint section {what} holds {} elements, expected {}",
            data.len(),
            target.numel()
        )));
    }
    target.data_mut().copy_from_slice(&data);
    Ok(())
}

/// Rebuilds the model, optimizer, and loop state from checkpoint bytes.
/// Optimizer hyperparameters come from `train`; the stored moments and
/// step counters are installed on top.
pub fn load_checkpoint<T: Real>(
    bytes: &[u8],
    train: &TrainConfig,
) -> Result<(Model<T>, AdamW<T>, TrainState)> {
    let precision = peek_precision(bytes)?;
    if precision != T::PRECISION {
        return Err(Error::format(format!(
            "checkpoint stores {}-byte elements, requested {}-byte",
            precision.tag(),
            T::PRECISION.tag()
        )));
    }
    let mut r = Reader::new(bytes);
    r.take(4)?;
    r.u32()?;
    r.u8()?;

    let cfg = read_model_config(&mut r)?;
    cfg.validate()
        .map_err(|e| Error::format(format!("checkpoint model config invalid: {e}")))?;
    let mut model = build_model::<T>(&cfg, 0)
        .map_err(|e| Error::format(format!("checkpoint model rebuild failed: {e}")))?;

    let step = r.u64()?;
    let rng_count = r.u32()?;
    let mut rngs: BTreeMap<String, RngState> = BTreeMap::new();
    for _ in 0..rng_count {
        let (name, state) = read_rng(&mut r)?;
        rngs.insert(name, state);
    }
    let data_rng = rngs
        .remove("data")
        .map(|s| SeededRng::restore(&s))
        .ok_or_else(|| Error::format("checkpoint lacks the data RNG stream"))?;
    let dropout_rng = rngs
        .remove("dropout")
        .map(|s| SeededRng::restore(&s))
        .ok_or_else(|| Error::format("checkpoint lacks the dropout RNG stream"))?;

    let param_count = r.u32()?;
    let mut stored: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for _ in 0..param_count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut numel = 1usize;
        for _ in 0..ndim {
            numel = numel.saturating_mul(r.u64()? as usize);
        }
        stored.insert(name, r.data(numel)?);
    }
    let mut problem: Option<String> = None;
    model.for_each_param(&mut |name, tensor| {
        if problem.is_some() {
            return;
        }
        match stored.remove(&name) {
            Some(data) => {
                if let Err(e) = copy_into(tensor, data, &name) {
                    problem = Some(format!("{e}"));
                }
            }
            None => problem = Some(format!("checkpoint lacks parameter {name}")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::format(p));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::format(format!(
            "checkpoint holds unknown parameter {extra}"
        )));
    }

    let cache_count = r.u32()? as usize;
    for _ in 0..cache_count {
        let idx = r.u32()? as usize;
        let t_m = r.u32()? as usize;
        let d_m = r.u32()? as usize;
        let ratio = r.f64()?;
        let cache_step = r.u64()?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            tag => return Err(Error::format(format!("bad frozen flag {tag}"))),
        };
        let c = r.data::<T>(t_m * d_m)?;
        let w = r.data::<T>(2 * d_m * d_m)?;
        let w_r = r.data::<T>(2 * d_m * d_m)?;
        let w_c = r.data::<T>(2 * d_m * d_m)?;
        let b_u = r.data::<T>(d_m)?;
        let b_r = r.data::<T>(d_m)?;
        let b_c = r.data::<T>(d_m)?;

        let block = model
            .blocks
            .get_mut(idx)
            .ok_or_else(|| Error::format(format!("cache section names missing block {idx}")))?;
        let cache = block
            .attn
            .cached
            .as_mut()
            .map(|cb| &mut cb.cache)
            .ok_or_else(|| Error::format(format!("block {idx} has no cache to restore")))?;
        if cache.t_m != t_m || cache.d_m != d_m {
            return Err(Error::format(format!(
                "cache section {idx} is {t_m}x{d_m}, model expects {}x{}",
                cache.t_m, cache.d_m
            )));
        }
        cache.r = ratio;
        cache.step = cache_step;
        cache.frozen = frozen;
        copy_into(&mut cache.c, c, "cache.c")?;
        copy_into(&mut cache.w_u, w, "cache.w_u")?;
        copy_into(&mut cache.w_r, w_r, "cache.w_r")?;
        copy_into(&mut cache.w_c, w_c, "cache.w_c")?;
        copy_into(&mut cache.b_u, b_u, "cache.b_u")?;
        copy_into(&mut cache.b_r, b_r, "cache.b_r")?;
        copy_into(&mut cache.b_c, b_c, "cache.b_c")?;
    }

    let mut opt = train
        .optimizer::<T>()
        .map_err(|e| Error::format(format!("optimizer rebuild failed: {e}")))?;
    opt.step = r.u64()?;
    let moment_count = r.u32()?;
    for _ in 0..moment_count {
        let name = r.string()?;
        let len = r.u64()? as usize;
        let m = r.data::<T>(len)?;
        let v = r.data::<T>(len)?;
        opt.restore_moments(&name, m, v)?;
    }

    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok((
        model,
        opt,
        TrainState {
            step,
            data_rng,
            dropout_rng,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_copy_batch, TaskBatch};
    use crate::trainer::{evaluate, train_loop, train_step};
    use alloc::vec;

    fn tiny_cfg(cache: bool) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d: 8,
            heads: 2,
            t_m: 3,
            r: 0.5,
            ffn_mult: 2,
            vocab: 6,
            t_max: 8,
            task_head: TaskHead::Lm,
            cache_enabled: cache,
            dropout: 0.0,
            bptt_window: 1,
        }
    }

    fn train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            warmup: 3,
            steps,
            batch: 4,
            seed: 23,
            weight_decay: 0.01,
            ..TrainConfig::default()
        }
    }

    fn copy_src(rng: &mut SeededRng) -> crate::error::Result<TaskBatch> {
        gen_copy_batch(rng, 4, 8, 6)
    }

    fn trained_run<T: Real>(
        cache: bool,
        steps: u64,
    ) -> (Model<T>, AdamW<T>, TrainState, TrainConfig) {
        let mut model = build_model::<T>(&tiny_cfg(cache), 31).unwrap();
        let cfg = train_cfg(steps.max(1));
        let mut opt = cfg.optimizer().unwrap();
        let mut state = TrainState::new(cfg.seed);
        for _ in 0..steps {
            train_step(&mut model, &mut opt, &cfg, &mut state, &mut copy_src).unwrap();
        }
        (model, opt, state, cfg)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for cache in [false, true] {
            let (mut model, opt, state, cfg) = trained_run::<f64>(cache, 5);
            let bytes = save_checkpoint(&mut model, &opt, &state);
            let (mut loaded, loaded_opt, loaded_state) =
                load_checkpoint::<f64>(&bytes, &cfg).unwrap();

            let mut originals = vec![];
            model.for_each_param(&mut |name, t| originals.push((name, t.clone())));
            let mut i = 0;
            loaded.for_each_param(&mut |name, t| {
                assert_eq!(name, originals[i].0);
                assert!(t.bits_eq(&originals[i].1), "{name} differs");
                i += 1;
            });
            assert_eq!(i, originals.len());

            if cache {
                for (a, b) in model.blocks.iter().zip(loaded.blocks.iter()) {
                    let ca = &a.attn.cached.as_ref().unwrap().cache;
                    let cb = &b.attn.cached.as_ref().unwrap().cache;
                    assert!(ca.c.bits_eq(&cb.c));
                    assert_eq!(ca.step, cb.step);
                    assert_eq!(ca.frozen, cb.frozen);
                }
            }

            assert_eq!(opt.step, loaded_opt.step);
            for (name, m, v) in opt.iter_moments() {
                let (lm, lv) = loaded_opt.moments_of(name).unwrap();
                assert!(m.iter().zip(lm).all(|(a, b)| a.bits() == b.bits()));
                assert!(v.iter().zip(lv).all(|(a, b)| a.bits() == b.bits()));
            }
            assert_eq!(state.step, loaded_state.step);
            assert_eq!(state.data_rng.state(), loaded_state.data_rng.state());

            let mut rng = SeededRng::new(77);
            let batches: Vec<TaskBatch> =
                (0..2).map(|_| gen_copy_batch(&mut rng, 4, 8, 6).unwrap()).collect();
            let before = evaluate(&mut model, &batches).unwrap();
            let after = evaluate(&mut loaded, &batches).unwrap();
            assert_eq!(before.loss.to_bits(), after.loss.to_bits());
        }
    }

    #[test]
    fn f32_round_trip_preserves_forward_bits() {
        let (mut model, opt, state, cfg) = trained_run::<f32>(true, 4);
        let bytes = save_checkpoint(&mut model, &opt, &state);
        let (mut loaded, _, _) = load_checkpoint::<f32>(&bytes, &cfg).unwrap();
        let mut rng = SeededRng::new(78);
        let batches = vec![gen_copy_batch(&mut rng, 4, 8, 6).unwrap()];
        let before = evaluate(&mut model, &batches).unwrap();
        let after = evaluate(&mut loaded, &batches).unwrap();
        assert_eq!(before.loss.to_bits(), after.loss.to_bits());
    }

    #[test]
    fn resume_continues_bit_identically() {
        let cfg = train_cfg(10);
        let straight = {
            let mut model = build_model::<f64>(&tiny_cfg(true), 31).unwrap();
            let mut opt = cfg.optimizer().unwrap();
            let mut state = TrainState::new(cfg.seed);
            let mut records = Vec::new();
            train_loop(&mut model, &mut opt, &cfg, &mut state, copy_src, &[], |r| {
                records.push((r.step, r.loss.to_bits()))
            })
            .unwrap();
            records
        };

        let (mut model, opt, state, _) = trained_run::<f64>(true, 5);
        let bytes = save_checkpoint(&mut model, &opt, &state);
        drop((model, opt, state));

        let (mut model, mut opt, mut state) = load_checkpoint::<f64>(&bytes, &cfg).unwrap();
        let mut records: Vec<(u64, u64)> = Vec::new();
        train_loop(&mut model, &mut opt, &cfg, &mut state, copy_src, &[], |r| {
            records.push((r.step, r.loss.to_bits()))
        })
        .unwrap();
        assert_eq!(&straight[5..], &records[..], "resumed tail diverged");
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let (mut model, opt, state, cfg) = trained_run::<f64>(true, 1);
        let mut bytes = save_checkpoint(&mut model, &opt, &state);
        bytes[0] ^= 0xff;
        let err = load_checkpoint::<f64>(&bytes, &cfg).unwrap_err();
        let msg = format!("{err}");
        assert!(matches!(err, Error::Format(_)), "{msg}");
        assert!(msg.contains("magic"), "{msg}");
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let (mut model, opt, state, cfg) = trained_run::<f64>(true, 1);
        let mut bytes = save_checkpoint(&mut model, &opt, &state);
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = load_checkpoint::<f64>(&bytes, &cfg).unwrap_err();
        assert!(format!("{err}").contains("version 99"), "{err}");
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let (mut model, opt, state, cfg) = trained_run::<f64>(true, 1);
        let bytes = save_checkpoint(&mut model, &opt, &state);
        assert_eq!(peek_precision(&bytes).unwrap(), Precision::F64);
        let err = load_checkpoint::<f32>(&bytes, &cfg).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncated_and_padded_files_are_rejected() {
        let (mut model, opt, state, cfg) = trained_run::<f64>(true, 1);
        let bytes = save_checkpoint(&mut model, &opt, &state);
        let err = load_checkpoint::<f64>(&bytes[..bytes.len() - 3], &cfg).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");

        let mut padded = bytes.clone();
        padded.push(0);
        let err = load_checkpoint::<f64>(&padded, &cfg).unwrap_err();
        assert!(format!("{err}").contains("trailing"), "{err}");
    }

    #[test]
    fn frozen_flag_survives_round_trip() {
        let (mut model, opt, state, cfg) = trained_run::<f64>(true, 2);
        model.freeze_caches();
        let bytes = save_checkpoint(&mut model, &opt, &state);
        let (loaded, _, _) = load_checkpoint::<f64>(&bytes, &cfg).unwrap();
        assert!(loaded.blocks[0].attn.cached.as_ref().unwrap().cache.frozen);
    }
}
