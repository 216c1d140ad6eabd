//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn grc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grc"))
        .args(args)
        .output()
        .expect("binary failed to launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("killed by signal")
}

/// A copy-task config small enough for sub-second training runs.
fn micro_config(out_dir: &Path) -> String {
    format!(
        "task = copy\n\
         copy.t = 8\n\
         copy.vocab = 5\n\
         out = {}\n\
         layers = 1\n\
         d = 8\n\
         heads = 2\n\
         t_m = 2\n\
         r = 0.5\n\
         lr = 1e-3\n\
         warmup = 2\n\
         steps = 8\n\
         batch = 2\n\
         seed = 5\n\
         eval_interval = 4\n\
         eval_batches = 2\n",
        out_dir.display()
    )
}

fn write_micro_config(dir: &Path) -> std::path::PathBuf {
    let cfg_path = dir.join("run.cfg");
    std::fs::write(&cfg_path, micro_config(&dir.join("run"))).unwrap();
    cfg_path
}

#[test]
fn missing_required_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    let text = micro_config(&dir.path().join("run")).replace("steps = 8\n", "");
    std::fs::write(&cfg, text).unwrap();
    let out = grc(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("'steps'"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_key_exits_2_with_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    let mut text = micro_config(&dir.path().join("run"));
    text.push_str("mystery_knob = 3\n");
    std::fs::write(&cfg, text).unwrap();
    let out = grc(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("line 17") && err.contains("mystery_knob"), "stderr: {err}");
}

#[test]
fn train_writes_metrics_checkpoint_and_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = grc(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let run = dir.path().join("run");
    for file in ["metrics.csv", "checkpoint.bin", "lambda.csv"] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    assert!(stdout(&out).contains("final eval"));
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = grc(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    }
    for file in ["metrics.csv", "checkpoint.bin", "lambda.csv"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let base = ["train", "--config"];
    let out = grc(&[&base[..], &[cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()]].concat());
    assert_eq!(exit_code(&out), 0);
    let out = grc(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(exit_code(&out), 0);
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_ne!(a, b, "seed override had no effect");
}

#[test]
fn eval_is_repeatable_and_corruption_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = grc(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt = dir.path().join("run").join("checkpoint.bin");

    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for out_dir in [&e1, &e2] {
        let out = grc(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    }
    let a = std::fs::read(e1.join("eval.csv")).unwrap();
    let b = std::fs::read(e2.join("eval.csv")).unwrap();
    assert_eq!(a, b, "eval.csv differs between identical invocations");

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, bytes).unwrap();
    for sub in ["eval", "inspect"] {
        let mut args = vec![sub, "--checkpoint", bad.to_str().unwrap()];
        if sub == "eval" {
            args.extend(["--config", cfg.to_str().unwrap()]);
        }
        let out = grc(&args);
        assert_eq!(exit_code(&out), 4, "{sub} stderr: {}", stderr(&out));
        assert!(stderr(&out).contains("magic"), "{sub} stderr: {}", stderr(&out));
    }
}

#[test]
fn inspect_prints_ratios_without_touching_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = grc(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt = dir.path().join("run").join("checkpoint.bin");
    let before = std::fs::read(&ckpt).unwrap();
    let out = grc(&["inspect", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("step 8"), "stdout: {text}");
    assert!(text.contains("sigma(lambda)"), "stdout: {text}");
    assert!(text.contains("cache 2x4"), "stdout: {text}");
    assert_eq!(before, std::fs::read(&ckpt).unwrap(), "inspect modified the checkpoint");
}

#[test]
fn gradcheck_prints_a_table_and_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.csv");
    let out = grc(&[
        "gradcheck",
        "--sizes",
        "tiny",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("parameter") && text.contains("max rel err"), "stdout: {text}");
    assert!(text.contains("blocks.0.attn.cache.w_u"), "stdout: {text}");
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("size,parameter,max_rel_err"));
    assert_eq!(report_text.matches("\ntiny,").count() + 1, 29, "28 rows plus header");
    assert!(!report_text.contains(",fail"));
}

#[test]
fn gradcheck_rejects_unknown_sizes() {
    let out = grc(&["gradcheck", "--sizes", "galactic"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("galactic"));
}

#[test]
fn sweep_skips_bad_ratios_and_runs_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = grc(&[
        "sweep-ratio",
        "--config",
        cfg.to_str().unwrap(),
        "--ratios",
        "0.5,0.4,junk,0",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let run = dir.path().join("run");
    let csv = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    assert!(csv.contains("0.5,ok"), "csv: {csv}");
    assert!(csv.contains("0.4,skipped") && csv.contains("divisible"), "csv: {csv}");
    assert!(csv.contains("junk,skipped"), "csv: {csv}");
    assert!(csv.contains("0,ok"), "csv: {csv}");
    assert!(run.join("ratio_0.5").join("checkpoint.bin").exists());
    assert!(run.join("ratio_0").join("checkpoint.bin").exists());
    assert!(!run.join("ratio_0.4").exists());
}

#[test]
fn plot_is_deterministic_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = grc(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let metrics = dir.path().join("run").join("metrics.csv");

    let p1 = dir.path().join("p1");
    let p2 = dir.path().join("p2");
    for out_dir in [&p1, &p2] {
        let out = grc(&[
            "plot",
            "--metrics",
            metrics.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    }
    for file in ["loss.svg", "accuracy.svg", "lambda.svg"] {
        let a = std::fs::read(p1.join(file)).unwrap();
        let b = std::fs::read(p2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical invocations");
    }

    let mangled = dir.path().join("mangled.csv");
    let mut text = std::fs::read_to_string(&metrics).unwrap();
    text.push_str("not,a,valid,row,at,all,x\n");
    let last_line = text.trim_end().lines().count();
    std::fs::write(&mangled, text).unwrap();
    let out = grc(&["plot", "--metrics", mangled.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains(&format!("line {last_line}")),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn missing_metrics_file_exits_4() {
    let out = grc(&["plot", "--metrics", "/nonexistent/metrics.csv"]);
    assert_eq!(exit_code(&out), 4);
}
