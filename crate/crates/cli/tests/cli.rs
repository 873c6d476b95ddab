//! End-to-end command tests against the built binary: artifact layout,
//! idempotence rules, exit codes, and determinism of the emitted files.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ptseg"))
}

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut c = bin();
    for a in args {
        c.arg(a.as_ref());
    }
    c.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_spec(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("gen.spec");
    std::fs::write(&p, "count=10\nsize=64\n").unwrap();
    p
}

/// Small training config used across tests; four images, ten steps.
fn write_train_cfg(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(
        &p,
        format!(
            "[model]\npreset = desk\n\
             [adapter]\nmode = PT_MD\n\
             [train]\nepochs = 2\nsteps_per_epoch = 5\nbatch_size = 2\nseed = 1\n\
             [data]\ncount = 10\ntrain_n = 4\n{extra}"
        ),
    )
    .unwrap();
    p
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&[&"--help"])), 0);
    assert_eq!(code(&run(&[&"--version"])), 0);
    // Unknown flags are usage errors.
    assert_eq!(code(&run(&[&"--frobnicate"])), 1);
}

#[test]
fn gen_writes_a_loadable_deterministic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let (o1, o2) = (dir.path().join("c1"), dir.path().join("c2"));
    let out = run(&[&"gen", &"--spec", &spec, &"--seed", &"9", &"--out", &o1]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("mask coverage"));
    assert_eq!(code(&run(&[&"gen", &"--spec", &spec, &"--seed", &"9", &"--out", &o2])), 0);

    let manifest1 = std::fs::read(o1.join("manifest.txt")).unwrap();
    let manifest2 = std::fs::read(o2.join("manifest.txt")).unwrap();
    assert_eq!(manifest1, manifest2);
    let img = std::fs::read_dir(o1.join("images")).unwrap().count();
    assert_eq!(img, 10);

    // Same out dir again without --force refuses, with --force succeeds.
    let again = run(&[&"gen", &"--spec", &spec, &"--seed", &"9", &"--out", &o1]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    let forced = run(&[&"gen", &"--spec", &spec, &"--seed", &"9", &"--out", &o1, &"--force"]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn train_emits_config_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_cfg(dir.path(), "");
    let out_dir = dir.path().join("run");
    let out = run(&[&"train", &"--config", &cfg, &"--out", &out_dir]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("test Dice"));
    for f in ["config.txt", "metrics.jsonl", "adapter.ckpt"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    assert!(!out_dir.join("full.ckpt").exists(), "full checkpoint is opt-in");

    // metrics.jsonl: one JSON object per line with the logged fields.
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "lr", "loss"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }
    // Echoed config parses back.
    let echoed = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(echoed.contains("mode = PT_MD"));
}

#[test]
fn print_config_echoes_resolved_values_and_skips_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_cfg(dir.path(), "");
    let out_dir = dir.path().join("never");
    let out =
        run(&[&"train", &"--config", &cfg, &"--out", &out_dir, &"--seed", &"42", &"--print-config"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("seed = 42"), "--seed override must show: {text}");
    assert!(text.contains("lr = "), "resolved lr must show");
    assert!(!out_dir.exists(), "print-config must not create outputs");
}

#[test]
fn train_seed_flag_changes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_cfg(dir.path(), "");
    let (o1, o2) = (dir.path().join("s1"), dir.path().join("s2"));
    assert_eq!(code(&run(&[&"train", &"--config", &cfg, &"--out", &o1])), 0);
    assert_eq!(code(&run(&[&"train", &"--config", &cfg, &"--out", &o2, &"--seed", &"2"])), 0);
    let m1 = std::fs::read(o1.join("metrics.jsonl")).unwrap();
    let m2 = std::fs::read(o2.join("metrics.jsonl")).unwrap();
    assert_ne!(m1, m2, "a different seed must change the run");
}

#[test]
fn bad_configs_exit_one_with_named_offender() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    std::fs::write(&p, "[train]\nepoch = 5\n").unwrap();
    let out = run(&[&"train", &"--config", &p, &"--out", &dir.path().join("x")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("epoch"), "error must name the key: {}", stderr(&out));

    // Missing config file is an I/O failure, not a usage error.
    let missing = run(&[&"train", &"--config", &dir.path().join("nope.cfg"), &"--out", &dir.path().join("y")]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn eval_scores_checkpoint_and_writes_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_cfg(dir.path(), "");
    let run_dir = dir.path().join("run");
    assert_eq!(code(&run(&[&"train", &"--config", &cfg, &"--out", &run_dir])), 0);

    // Rebuild the same corpus the config described, then evaluate on it.
    let spec = write_spec(dir.path());
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&run(&[&"gen", &"--spec", &spec, &"--seed", &"0", &"--out", &corpus])), 0);

    let ckpt = run_dir.join("adapter.ckpt");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let out = run(&[&"eval", &"--checkpoint", &ckpt, &"--data", &corpus, &"--out", &e1, &"--maps"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(e1.join("eval.csv")).unwrap();
    assert!(csv.starts_with("id,dice\n"));
    assert!(csv.contains("\nmean,"));
    assert!(csv.contains("\nstd,"));
    let maps = std::fs::read_dir(e1.join("maps")).unwrap().count();
    assert_eq!(maps, 2, "held-out fifth of 10 images");

    // Determinism: same checkpoint, same corpus, same bytes.
    assert_eq!(
        code(&run(&[&"eval", &"--checkpoint", &ckpt, &"--data", &corpus, &"--out", &e2])),
        0
    );
    assert_eq!(
        std::fs::read(e1.join("eval.csv")).unwrap(),
        std::fs::read(e2.join("eval.csv")).unwrap()
    );

    // Train split selects the images the checkpoint was fitted on.
    let et = dir.path().join("et");
    let out = run(&[
        &"eval", &"--checkpoint", &ckpt, &"--data", &corpus, &"--out", &et, &"--split", &"train",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tcsv = std::fs::read_to_string(et.join("eval.csv")).unwrap();
    assert_eq!(tcsv.lines().count(), 1 + 4 + 2, "4 train rows plus header and aggregates");
}

#[test]
fn matrix_runs_resumes_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("matrix.cfg");
    std::fs::write(
        &p,
        "[model]\npreset = desk\n\
         [adapter]\nmode = PT_MD\n\
         [train]\nepochs = 2\nsteps_per_epoch = 5\nbatch_size = 2\n\
         [data]\ncount = 10\n\
         [matrix]\nmethods = PT_MD\ntrain_ns = 4\nseeds = 0,1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("m");
    let out = run(&[&"matrix", &"--config", &p, &"--out", &out_dir]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(csv.starts_with("dataset,shift,method,train_n,seed,dice\n"));
    assert_eq!(csv.lines().count(), 3, "header plus one row per seed");
    assert!(csv.contains("ellipse64,none,PT_MD,4,0,"));
    assert!(out_dir.join("table.txt").exists());
    let cells = std::fs::read_dir(out_dir.join("cells")).unwrap().count();
    assert_eq!(cells, 2);

    // Rerun resumes from the cell files and reproduces the summary.
    let t0 = std::time::Instant::now();
    let again = run(&[&"matrix", &"--config", &p, &"--out", &out_dir]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert!(t0.elapsed().as_secs_f64() < 20.0, "resume must skip training");
    assert_eq!(
        csv,
        std::fs::read_to_string(out_dir.join("summary.csv")).unwrap(),
        "resumed summary must match"
    );
}

#[test]
fn ablate_emits_curve_rows_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ab.cfg");
    std::fs::write(
        &p,
        "[model]\npreset = desk\n\
         [train]\nepochs = 2\nsteps_per_epoch = 5\nbatch_size = 2\n\
         [data]\ncount = 10\ntrain_n = 4\n\
         [ablate]\nparam = n_md\nvalues = 0,2\nseeds = 0\n",
    )
    .unwrap();
    let out_dir = dir.path().join("a");
    let out = run(&[&"ablate", &"--config", &p, &"--out", &out_dir]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,seed,dice");
    // Per value: one seed row plus mean and std rows.
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("n_md,0,0,"));
    assert!(lines[2].starts_with("n_md,0,mean,"));
    assert!(lines[3].starts_with("n_md,0,std,"));

    // Byte determinism across reruns.
    let out_dir2 = dir.path().join("b");
    assert_eq!(code(&run(&[&"ablate", &"--config", &p, &"--out", &out_dir2])), 0);
    assert_eq!(csv, std::fs::read_to_string(out_dir2.join("ablation.csv")).unwrap());
}

#[test]
fn count_reports_modes_from_config_or_preset() {
    let out = run(&[&"count", &"--preset", &"desk"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for mode in ["PT_MD", "PT_MD_IE", "LORA_MD", "LORA_MD_IE", "FULL_MD", "FULL_MD_LORA_IE"] {
        assert!(text.contains(mode), "count output lacks {mode}: {text}");
    }

    // The full-scale shape hits the published adapter counts exactly.
    let big = stdout(&run(&[&"count", &"--preset", &"vitb-shape"]));
    assert!(big.contains("2048"));
    assert!(big.contains("75776"));
    assert!(big.contains("23552"));
    assert!(big.contains("171008"));
    assert!(big.contains("reference"), "decoder-unfreezing rows carry the reference note");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_cfg(dir.path(), "");
    let from_cfg = run(&[&"count", &"--config", &cfg]);
    assert_eq!(code(&from_cfg), 0);
    assert!(stdout(&from_cfg).contains("PT_MD"));

    assert_eq!(code(&run(&[&"count"])), 1, "one source must be chosen");
}

#[test]
fn eval_on_missing_checkpoint_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        &"eval",
        &"--checkpoint",
        &dir.path().join("no.ckpt"),
        &"--data",
        &dir.path(),
        &"--out",
        &dir.path().join("o"),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}
