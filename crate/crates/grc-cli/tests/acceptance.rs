//! Acceptance gate for the library and CLI. Every test verifies one
//! shipping criterion and prints a single `[acceptance]` line with the
//! measured numbers, pass or fail. Run with `--nocapture` to see the
//! lines for passing criteria too.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use grc_core::attention::{CacheSpec, GrcAttentionLayer, ParamBinds};
use grc_core::checkpoint::{load_checkpoint, save_checkpoint};
use grc_core::model::{build_model, Model, ModelConfig, TaskHead};
use grc_core::oracle::{reference_grc_step, RefInstance, RefWeights};
use grc_core::tasks::{gen_copy_batch, TaskBatch, LISTOPS_VOCAB};
use grc_core::trainer::{train_step, TrainConfig, TrainState};
use grc_core::{Precision, SeededRng, Tape, Tensor};

use grc_cli::commands::{gradcheck_model, run_train};
use grc_cli::config::{RunConfig, TaskSel};

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("[acceptance] {criterion}: {status} ({detail})");
    assert!(pass, "{criterion}: {detail}");
}

fn grc_binary(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_grc"))
        .args(args)
        .output()
        .expect("binary failed to launch")
}

/// Small copy-task model shared by several criteria.
fn copy_model_cfg(cache_enabled: bool) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d: 16,
        heads: 2,
        t_m: 4,
        r: 0.5,
        ffn_mult: 2,
        vocab: 6,
        t_max: 8,
        task_head: TaskHead::Lm,
        cache_enabled,
        dropout: 0.0,
        bptt_window: 1,
    }
}

fn copy_batch(seed: u64) -> TaskBatch {
    let mut rng = SeededRng::new(seed);
    gen_copy_batch(&mut rng, 2, 8, 6).unwrap()
}

/// Trains `n` steps on the copy stream, driving the optimizer so the
/// cache and weights move away from their initial values.
fn warm_model(model: &mut Model<f64>, cfg: &TrainConfig, n: u64) {
    let mut opt = cfg.optimizer::<f64>().unwrap();
    let mut state = TrainState::new(cfg.seed);
    let mut source = |rng: &mut SeededRng| gen_copy_batch(rng, 2, 8, 6);
    for _ in 0..n {
        train_step(model, &mut opt, cfg, &mut state, &mut source).unwrap();
    }
}

fn quick_train_cfg(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup: 2,
        steps,
        batch: 2,
        seed,
        eval_interval: 0,
        eval_batches: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn gradients_match_finite_differences() {
    let started = Instant::now();
    let cfg = ModelConfig {
        layers: 1,
        d: 4,
        heads: 2,
        t_m: 2,
        r: 0.5,
        ffn_mult: 2,
        vocab: 5,
        t_max: 2,
        task_head: TaskHead::Lm,
        cache_enabled: true,
        dropout: 0.0,
        bptt_window: 1,
    };
    let reports = gradcheck_model(&cfg, 1, 3, 1e-5).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    let all_pass = reports.iter().all(|r| r.passed);
    verdict(
        "gradient correctness",
        all_pass && elapsed < 60.0,
        &format!(
            "{} parameters, worst rel err {worst:.3e} < 1e-5, {elapsed:.2} s",
            reports.len()
        ),
    );
}

fn mat_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows)
        .map(|i| (0..cols).map(|j| t.at(&[i, j])).collect())
        .collect()
}

fn ref_weights_of(layer: &GrcAttentionLayer<f64>) -> RefWeights {
    let cb = layer.cached.as_ref().unwrap();
    RefWeights {
        w_q: mat_rows(&layer.w_q),
        w_k: mat_rows(&layer.w_k),
        w_v: mat_rows(&layer.w_v),
        w_o: mat_rows(&layer.w_o),
        w_qbar: mat_rows(&cb.w_qbar),
        w_kbar: mat_rows(&cb.w_kbar),
        w_vbar: mat_rows(&cb.w_vbar),
        lambda: cb.lambda.data().to_vec(),
        w_u: mat_rows(&cb.cache.w_u),
        w_r: mat_rows(&cb.cache.w_r),
        w_c: mat_rows(&cb.cache.w_c),
        b_u: cb.cache.b_u.data().to_vec(),
        b_r: cb.cache.b_r.data().to_vec(),
        b_c: cb.cache.b_c.data().to_vec(),
    }
}

fn layer_forward(
    layer: &mut GrcAttentionLayer<f64>,
    x: &Tensor<f64>,
    lengths: Option<&[usize]>,
    training: bool,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let mut binds = ParamBinds::new();
    let xid = tape.constant(x);
    let out = layer
        .forward(&mut tape, &mut binds, "attn", xid, lengths, training)
        .unwrap();
    tape.to_tensor(out)
}

#[test]
fn library_matches_scalar_reference() {
    let mut rng = SeededRng::new(0xacce97);
    let mut worst = 0.0f64;
    for trial in 0..100u32 {
        let h = 1 + rng.below(2);
        let dh = 1 + rng.below(2);
        let dmh = 1 + rng.below(dh);
        let (d, d_m) = (2 * h * dh, h * dmh);
        let b = 1 + rng.below(3);
        let t = 1 + rng.below(4);
        let t_m = 1 + rng.below(4);
        let r = d_m as f64 / d as f64;

        let mut init_rng = SeededRng::new(7000 + trial as u64);
        let mut layer =
            GrcAttentionLayer::<f64>::init(d, h, Some(CacheSpec { t_m, r }), &mut init_rng)
                .unwrap();
        let x = Tensor::rand_uniform(&[b, t, d], -1.0, 1.0, &mut rng);
        let c_prev = Tensor::rand_uniform(&[t_m, d_m], -1.0, 1.0, &mut rng);
        layer.cached.as_mut().unwrap().cache.c = c_prev.clone();
        let lengths: Option<Vec<usize>> = if t > 1 && rng.coin(0.5) {
            Some((0..b).map(|_| 1 + rng.below(t)).collect())
        } else {
            None
        };

        let w = ref_weights_of(&layer);
        let inst = RefInstance {
            b,
            t,
            t_m,
            d,
            d_m,
            h,
            x: (0..b)
                .map(|bi| {
                    (0..t)
                        .map(|ti| (0..d).map(|ci| x.at(&[bi, ti, ci])).collect())
                        .collect()
                })
                .collect(),
            c_prev: mat_rows(&c_prev),
            lengths: lengths.clone(),
        };
        let expect = reference_grc_step(&inst, &w).unwrap();

        let out = layer_forward(&mut layer, &x, lengths.as_deref(), true);
        let cache = &layer.cached.as_ref().unwrap().cache;
        for s in 0..t_m {
            for ch in 0..d_m {
                worst = worst.max((cache.c.at(&[s, ch]) - expect.c_t[s][ch]).abs());
            }
        }
        for bi in 0..b {
            for tok in 0..t {
                for ch in 0..d {
                    worst =
                        worst.max((out.at(&[bi, tok, ch]) - expect.output[bi][tok][ch]).abs());
                }
            }
        }
    }
    verdict(
        "oracle equivalence",
        worst <= 1e-10,
        &format!("100 random instances, worst abs diff {worst:.3e} <= 1e-10"),
    );
}

fn tiny_cached_layer(seed: u64) -> GrcAttentionLayer<f64> {
    let mut rng = SeededRng::new(seed);
    GrcAttentionLayer::init(4, 2, Some(CacheSpec { t_m: 2, r: 0.5 }), &mut rng).unwrap()
}

#[test]
fn gate_identities_hold() {
    let mut rng = SeededRng::new(31);
    let x = Tensor::rand_uniform(&[1, 2, 4], -1.0, 1.0, &mut rng);

    // Update gate forced shut: the committed cache does not move.
    let mut keep = tiny_cached_layer(310);
    layer_forward(&mut keep, &x, None, true);
    keep.cached.as_mut().unwrap().cache.b_u = Tensor::new(&[2], vec![-30.0, -30.0])
        .unwrap()
        .with_grad();
    let before = keep.cached.as_ref().unwrap().cache.c.clone();
    layer_forward(&mut keep, &x, None, true);
    let keep_diff = keep
        .cached
        .as_ref()
        .unwrap()
        .cache
        .c
        .max_abs_diff(&before);

    // Update gate forced open on an empty cache: the committed value is
    // the candidate projection of the interpolated slice alone. With
    // T = T_m the interpolation is the identity, so the expected rows
    // come straight from the first d_m channels of x.
    let mut write = tiny_cached_layer(311);
    {
        let cb = write.cached.as_mut().unwrap();
        cb.cache.c = Tensor::zeros(&[2, 2]);
        cb.cache.b_u = Tensor::new(&[2], vec![30.0, 30.0]).unwrap().with_grad();
    }
    let w_c = mat_rows(&write.cached.as_ref().unwrap().cache.w_c);
    let b_c = write.cached.as_ref().unwrap().cache.b_c.data().to_vec();
    layer_forward(&mut write, &x, None, true);
    let mut write_diff = 0.0f64;
    for s in 0..2 {
        for ch in 0..2 {
            let mut want = b_c[ch];
            for i in 0..2 {
                want += x.at(&[0, s, i]) * w_c[i][ch];
            }
            let got = write.cached.as_ref().unwrap().cache.c.at(&[s, ch]);
            write_diff = write_diff.max((got - want).abs());
        }
    }

    // Zero mixing logits average the branches exactly. The branches are
    // recomputed separately against the cache value the forward committed.
    let mut mid = tiny_cached_layer(312);
    let c_prev = Tensor::rand_uniform(&[2, 2], -0.5, 0.5, &mut rng);
    mid.cached.as_mut().unwrap().cache.c = c_prev;
    let out = layer_forward(&mut mid, &x, None, true);
    let mut xbar = Tensor::zeros(&[1, 2, 2]);
    for tok in 0..2 {
        for ch in 0..2 {
            xbar.set(&[0, tok, ch], x.at(&[0, tok, ch]));
        }
    }
    let o_self = mid.self_attention(&x).unwrap();
    let o_mem = mid
        .cached_attention(&xbar, &mid.cached.as_ref().unwrap().cache.c)
        .unwrap();
    let w_o = mat_rows(&mid.w_o);
    let mut mid_diff = 0.0f64;
    for tok in 0..2 {
        for j in 0..4 {
            let mut want = 0.0;
            for i in 0..4 {
                let m = 0.5 * (o_self.at(&[0, tok, i]) + o_mem.at(&[0, tok, i]));
                want += m * w_o[i][j];
            }
            mid_diff = mid_diff.max((out.at(&[0, tok, j]) - want).abs());
        }
    }

    verdict(
        "convex-update identities",
        keep_diff <= 1e-9 && write_diff <= 1e-9 && mid_diff <= 1e-9,
        &format!(
            "closed gate drift {keep_diff:.3e}, open gate error {write_diff:.3e}, \
             midpoint error {mid_diff:.3e}, all <= 1e-9"
        ),
    );
}

#[test]
fn frozen_inference_is_pure() {
    let mut model = build_model::<f64>(&copy_model_cfg(true), 41).unwrap();
    warm_model(&mut model, &quick_train_cfg(5, 41), 5);
    model.freeze_caches();
    let batch = copy_batch(411);
    let cache_before: Vec<Tensor<f64>> = model
        .blocks
        .iter()
        .filter_map(|b| b.attn.cached.as_ref().map(|cb| cb.cache.c.clone()))
        .collect();
    let run = |model: &mut Model<f64>| -> Tensor<f64> {
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(0);
        let pass = model.forward(&mut tape, &batch, false, &mut rng).unwrap();
        pass.logits
    };
    let a = run(&mut model);
    let b = run(&mut model);
    let cache_after: Vec<Tensor<f64>> = model
        .blocks
        .iter()
        .filter_map(|bl| bl.attn.cached.as_ref().map(|cb| cb.cache.c.clone()))
        .collect();
    let logits_same = a.bits_eq(&b);
    let cache_same = cache_before.len() == cache_after.len()
        && cache_before
            .iter()
            .zip(&cache_after)
            .all(|(x, y)| x.bits_eq(y));
    verdict(
        "inference purity",
        logits_same && cache_same,
        &format!("logits bit-identical: {logits_same}, cache bit-identical: {cache_same}"),
    );
}

#[test]
fn step_cost_stays_flat() {
    let cfg = copy_model_cfg(true);
    let train = TrainConfig {
        lr: 1e-3,
        warmup: 10,
        steps: 2040,
        batch: 2,
        seed: 77,
        eval_interval: 0,
        eval_batches: 1,
        ..TrainConfig::default()
    };
    let mut model = build_model::<f64>(&cfg, train.seed).unwrap();
    let mut opt = train.optimizer::<f64>().unwrap();
    let mut state = TrainState::new(train.seed);
    let mut source = |rng: &mut SeededRng| gen_copy_batch(rng, 2, 8, 6);
    for _ in 0..40 {
        train_step(&mut model, &mut opt, &train, &mut state, &mut source).unwrap();
    }
    let n = 2000usize;
    let mut dts = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = Instant::now();
        train_step(&mut model, &mut opt, &train, &mut state, &mut source).unwrap();
        dts.push(t0.elapsed().as_secs_f64());
    }
    let mean = dts.iter().sum::<f64>() / n as f64;
    let x_mean = (n as f64 - 1.0) / 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &dt) in dts.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (dt - mean);
        den += dx * dx;
    }
    let slope = num / den;
    verdict(
        "constant-cost cache",
        slope.abs() < 0.01 * mean,
        &format!(
            "2000 steps, mean {:.3} ms, least-squares slope {:+.2e} ms per step ({:+.3}% of mean)",
            mean * 1e3,
            slope * 1e3,
            100.0 * slope / mean
        ),
    );
}

#[test]
fn quenched_mixing_recovers_the_baseline() {
    let mut cached = build_model::<f64>(&copy_model_cfg(true), 53).unwrap();
    warm_model(&mut cached, &quick_train_cfg(3, 53), 3);
    cached.for_each_param(&mut |name, t| {
        if name.ends_with(".lambda") {
            t.data_mut().fill(-30.0);
        }
    });

    let mut shared: std::collections::BTreeMap<String, Tensor<f64>> =
        std::collections::BTreeMap::new();
    cached.for_each_param(&mut |name, t| {
        shared.insert(name, t.clone());
    });
    let mut baseline = build_model::<f64>(&copy_model_cfg(false), 99).unwrap();
    baseline.for_each_param(&mut |name, t| {
        let src = shared
            .get(&name)
            .unwrap_or_else(|| panic!("cached model lacks parameter {name}"));
        *t = src.clone();
    });

    let batch = copy_batch(531);
    cached.freeze_caches();
    let run = |model: &mut Model<f64>| -> Tensor<f64> {
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(0);
        model.forward(&mut tape, &batch, false, &mut rng).unwrap().logits
    };
    let diff = run(&mut cached).max_abs_diff(&run(&mut baseline));
    verdict(
        "baseline degeneracy",
        diff <= 1e-5,
        &format!("mixing logits at -30, logits max abs diff {diff:.3e} <= 1e-5"),
    );
}

struct TrendArm {
    seed: u64,
    accuracy: f64,
}

struct ListopsFixture {
    cached: Vec<TrendArm>,
    baseline: Vec<TrendArm>,
    cached_ckpt: PathBuf,
    wall_minutes: f64,
    _dir: tempfile::TempDir,
}

fn listops_run_cfg(out: PathBuf, seed: u64, cache_enabled: bool) -> RunConfig {
    RunConfig {
        task: TaskSel::ListOps {
            max_len: 32,
            max_depth: 2,
        },
        out,
        precision: Precision::F64,
        model: ModelConfig {
            layers: 2,
            d: 64,
            heads: 4,
            t_m: 16,
            r: 1.0,
            ffn_mult: 2,
            vocab: LISTOPS_VOCAB as usize,
            t_max: 32,
            task_head: TaskHead::Classification { classes: 10 },
            cache_enabled,
            dropout: 0.0,
            bptt_window: 1,
        },
        train: TrainConfig {
            lr: 3e-3,
            warmup: 30,
            steps: 312,
            batch: 64,
            seed,
            weight_decay: 0.0,
            eval_interval: 0,
            eval_batches: 16,
            ..TrainConfig::default()
        },
    }
}

static LISTOPS: OnceLock<ListopsFixture> = OnceLock::new();

/// Six desk-scale runs, three seeds each for the cached model and the
/// no-cache baseline, 20k examples apiece. Computed once and shared by
/// the trend and mixing-report criteria.
fn listops_fixture() -> &'static ListopsFixture {
    LISTOPS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let mut cached = Vec::new();
        let mut baseline = Vec::new();
        for seed in [1u64, 2, 3] {
            for arm_cached in [true, false] {
                let name = format!("listops_{}_{seed}", if arm_cached { "cached" } else { "base" });
                let cfg = listops_run_cfg(dir.path().join(name), seed, arm_cached);
                let stats = run_train(&cfg, true).unwrap();
                let arm = TrendArm {
                    seed,
                    accuracy: stats.accuracy.unwrap(),
                };
                if arm_cached {
                    cached.push(arm);
                } else {
                    baseline.push(arm);
                }
            }
        }
        ListopsFixture {
            cached,
            baseline,
            cached_ckpt: dir.path().join("listops_cached_1").join("checkpoint.bin"),
            wall_minutes: started.elapsed().as_secs_f64() / 60.0,
            _dir: dir,
        }
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn arm_summary(arms: &[TrendArm]) -> String {
    arms.iter()
        .map(|a| format!("seed {} {:.3}", a.seed, a.accuracy))
        .collect::<Vec<_>>()
        .join(", ")
}

#[test]
fn listops_cached_matches_or_beats_baseline() {
    let fx = listops_fixture();
    let cached_med = median(&fx.cached.iter().map(|a| a.accuracy).collect::<Vec<_>>());
    let base_med = median(&fx.baseline.iter().map(|a| a.accuracy).collect::<Vec<_>>());
    verdict(
        "listops trend",
        cached_med >= base_med && fx.wall_minutes < 30.0,
        &format!(
            "median cached {cached_med:.3} vs baseline {base_med:.3}; cached [{}]; baseline [{}]; {:.1} min",
            arm_summary(&fx.cached),
            arm_summary(&fx.baseline),
            fx.wall_minutes
        ),
    );
}

#[test]
fn mixing_report_shows_an_engaged_layer() {
    let fx = listops_fixture();
    let out = grc_binary(&["inspect", "--checkpoint", fx.cached_ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "inspect failed");
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let mut per_layer: std::collections::BTreeMap<usize, Vec<f64>> =
        std::collections::BTreeMap::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        if parts.next() == Some("layer") {
            let rest: Vec<&str> = parts.collect();
            if rest.len() == 4 && rest[1] == "head" {
                let layer: usize = rest[0].parse().unwrap();
                let value: f64 = rest[3].parse().unwrap();
                per_layer.entry(layer).or_default().push(value);
            }
        }
    }
    let means: Vec<(usize, f64)> = per_layer
        .iter()
        .map(|(l, vs)| (*l, vs.iter().sum::<f64>() / vs.len() as f64))
        .collect();
    let engaged = means.iter().filter(|(_, m)| *m > 0.5).count();
    let summary = means
        .iter()
        .map(|(l, m)| format!("layer {l} mean {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "mixing-ratio report",
        !means.is_empty() && engaged >= 1,
        &format!("{summary}; {engaged} layer(s) above 0.5"),
    );
}

struct ProtoFixture {
    ceilings: Vec<f64>,
    cached: Vec<f64>,
    baseline: Vec<f64>,
}

fn proto_run_cfg(out: PathBuf, seed: u64, cache_enabled: bool) -> RunConfig {
    RunConfig {
        task: TaskSel::Prototype {
            t: 16,
            classes: 4,
            vocab: 10,
            noise: 0.55,
        },
        out,
        precision: Precision::F64,
        model: ModelConfig {
            layers: 1,
            d: 32,
            heads: 4,
            t_m: 4,
            r: 0.5,
            ffn_mult: 2,
            vocab: 10,
            t_max: 16,
            task_head: TaskHead::Classification { classes: 4 },
            cache_enabled,
            dropout: 0.0,
            bptt_window: 1,
        },
        train: TrainConfig {
            lr: 2e-3,
            warmup: 15,
            steps: 150,
            batch: 64,
            seed,
            eval_interval: 0,
            eval_batches: 16,
            ..TrainConfig::default()
        },
    }
}

static PROTO: OnceLock<ProtoFixture> = OnceLock::new();

fn proto_fixture() -> &'static ProtoFixture {
    PROTO.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut ceilings = Vec::new();
        let mut cached = Vec::new();
        let mut baseline = Vec::new();
        for seed in [5u64, 6, 7] {
            let cfg = proto_run_cfg(dir.path().join(format!("proto_cached_{seed}")), seed, true);
            let task = cfg.task.prototype(seed).unwrap().unwrap();
            let mut crng = SeededRng::new(0xce111);
            ceilings.push(task.bayes_estimate(&mut crng, 4000).unwrap());
            cached.push(run_train(&cfg, true).unwrap().accuracy.unwrap());
            let cfg = proto_run_cfg(dir.path().join(format!("proto_base_{seed}")), seed, false);
            baseline.push(run_train(&cfg, true).unwrap().accuracy.unwrap());
        }
        ProtoFixture {
            ceilings,
            cached,
            baseline,
        }
    })
}

#[test]
fn prototype_cached_approaches_the_ceiling() {
    let fx = proto_fixture();
    let gaps: Vec<f64> = fx
        .ceilings
        .iter()
        .zip(&fx.cached)
        .map(|(c, a)| c - a)
        .collect();
    let margins: Vec<f64> = fx
        .cached
        .iter()
        .zip(&fx.baseline)
        .map(|(c, b)| c - b)
        .collect();
    let near_ceiling = gaps.iter().all(|g| *g <= 0.05);
    let separated = margins.iter().all(|m| *m > 0.0);
    verdict(
        "prototype separation",
        near_ceiling && separated,
        &format!(
            "gaps to ceiling {:?} all <= 0.05, margins over baseline {:?} all > 0",
            gaps.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>(),
            margins.iter().map(|m| format!("{m:+.3}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let cfg = copy_model_cfg(true);
    let train = quick_train_cfg(5, 61);
    let mut model = build_model::<f64>(&cfg, train.seed).unwrap();
    let mut opt = train.optimizer::<f64>().unwrap();
    let mut state = TrainState::new(train.seed);
    let mut source = |rng: &mut SeededRng| gen_copy_batch(rng, 2, 8, 6);
    for _ in 0..5 {
        train_step(&mut model, &mut opt, &train, &mut state, &mut source).unwrap();
    }
    let batch = copy_batch(611);
    let run = |model: &mut Model<f64>| -> Tensor<f64> {
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(0);
        model.forward(&mut tape, &batch, false, &mut rng).unwrap().logits
    };
    let bytes = save_checkpoint(&mut model, &opt, &state);
    let (mut loaded, mut opt2, state2) = load_checkpoint::<f64>(&bytes, &train).unwrap();
    let forward_same = run(&mut model).bits_eq(&run(&mut loaded));
    let resaved = save_checkpoint(&mut loaded, &opt2, &state2);
    let bytes_same = bytes == resaved;
    let _ = &mut opt2;

    let dir = tempfile::tempdir().unwrap();
    let bad_path = dir.path().join("bad.bin");
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    std::fs::write(&bad_path, bad).unwrap();
    let out = grc_binary(&["inspect", "--checkpoint", bad_path.to_str().unwrap()]);
    let code = out.status.code();
    verdict(
        "checkpoint round-trip",
        forward_same && bytes_same && code == Some(4),
        &format!(
            "forward bit-identical: {forward_same}, resave byte-identical: {bytes_same}, \
             corrupted magic exit code {code:?} == 4"
        ),
    );
}
