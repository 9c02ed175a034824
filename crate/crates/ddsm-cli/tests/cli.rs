//! Black-box tests of the `ddsm` binary: exit codes, flag and config-file
//! handling, artifact layout, and the failure paths of every command.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddsm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary launches")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    bin().args(args).env(key, value).output().expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("not killed by signal")
}

#[test]
fn help_lists_commands_and_config_keys() {
    for invocation in [&["help"][..], &["--help"], &["-h"]] {
        let out = run(invocation);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        for command in ["gradcheck", "equiv", "train", "dump", "cost", "fscore"] {
            assert!(text.contains(command), "help is missing {command}");
        }
        for key in ["seed", "preset", "c_r", "thresholds", "checkpoint"] {
            assert!(text.contains(key), "help is missing config key {key}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let cases: Vec<Vec<&str>> = vec![
        vec![],                                    // no command
        vec!["frobnicate"],                        // unknown command
        vec!["cost", "--bogus", "1"],              // unknown key
        vec!["cost", "--h", "zero"],               // bad value
        vec!["cost", "--h"],                       // flag without value
        vec!["cost", "--h", "0"],                  // rejected by validation
        vec!["train", "--preset", "banana"],       // unknown preset
        vec!["gradcheck", "extra"],                // unexpected positional
        vec!["dump", "only_one.txt"],              // dump needs both or neither
        vec!["fscore", "one.pgm"],                 // fscore needs two files
        vec!["fscore", "a.pgm", "b.pgm", "c.pgm"], // too many
        vec!["gradcheck", "--corrupt", "not.a.param"],
        vec!["cost", "--thresholds", ""],          // empty threshold list
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(code(&out), 2, "args {args:?}: stderr {}", stderr(&out));
        assert!(stderr(&out).starts_with("error: "), "args {args:?}");
    }
}

#[test]
fn config_file_is_read_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.cfg");
    std::fs::write(&good, "# comment\nh=8\nw=8\n\nseed=3\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["cost", "--config", good.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "definitely_not_a_key=1\n").unwrap();
    let out = run(&["cost", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("definitely_not_a_key"));

    // --config may appear only once, and the file must exist.
    let out = run(&["cost", "--config", good.to_str().unwrap(), "--config", good.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let out = run(&["cost", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("seed.cfg");
    std::fs::write(&cfg, "seed=3\nh=8\nw=8\nhh=4\nwh=4\nc=4\nc_r=4\n").unwrap();
    let render = |name: &str, extra: &[&str], env_seed: Option<&str>| -> Vec<u8> {
        let out_dir = dir.path().join(name);
        let mut args = vec!["dump", "--config", cfg.to_str().unwrap()];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out_dir.to_str().unwrap()]);
        let out = match env_seed {
            None => run(&args),
            Some(s) => run_env(&args, "DDSM_SEED", s),
        };
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        std::fs::read(out_dir.join("input_low.pgm")).unwrap()
    };
    let from_file = render("file", &[], None);
    let file_again = render("file2", &[], None);
    let from_env = render("env", &[], Some("5"));
    let env_beats_file = render("env2", &[], Some("3"));
    let flag_beats_env = render("flag", &["--seed", "3"], Some("5"));

    assert_eq!(from_file, file_again, "equal configs must render identically");
    assert_ne!(from_file, from_env, "env seed must override the file seed");
    assert_eq!(from_file, env_beats_file, "env seed equal to file seed is a no-op");
    assert_eq!(from_file, flag_beats_env, "flag seed must override the env seed");

    let out = run_env(&["cost"], "DDSM_SEED", "not_a_number");
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["gradcheck", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("gradcheck.csv")).unwrap();
    assert_eq!(csv, stdout(&out));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("group,coords,max_analytic,max_abs_diff,max_rel_err,status")
    );
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 20, "expected one row per parameter group, got {}", rows.len());
    for row in &rows {
        assert!(row.ends_with(",pass"), "row failed: {row}");
    }
    for group in ["spatial.w_theta.weight", "channel.w_alpha.weight", "sampler.input"] {
        assert!(csv.contains(group), "missing gradcheck row for {group}");
    }
}

#[test]
fn corrupted_gradient_is_caught_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gradcheck",
        "--corrupt", "spatial.w_theta.weight",
        "--out", dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("spatial.w_theta.weight"), "stderr: {}", stderr(&out));
}

#[test]
fn equiv_reports_all_checks_passing() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["equiv", "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for check in [
        "dense_full_coverage",
        "spatial_enumeration",
        "block_enumeration",
        "cost_instrumented",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(check) && l.ends_with(",pass")),
            "missing passing row for {check}: {text}"
        );
    }
}

#[test]
fn train_writes_artifacts_and_diverges_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train", "--steps", "5", "--h", "16", "--w", "16", "--samples", "2",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("final_loss="), "summary missing: {}", stdout(&out));

    let loss = std::fs::read_to_string(out_dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss,accuracy\n"));
    assert_eq!(loss.lines().count(), 6, "header plus one row per step");

    let manifest = std::fs::read_to_string(out_dir.join("checkpoint/manifest.txt")).unwrap();
    let first = manifest.lines().next().unwrap();
    let count: usize = first.strip_prefix("tensors: ").unwrap().parse().unwrap();
    assert_eq!(manifest.lines().count(), count + 1);

    // A hopeless learning rate must fail loudly, not write artifacts quietly.
    let diverge_dir = dir.path().join("diverge");
    let out = run(&[
        "train", "--steps", "20", "--h", "16", "--w", "16", "--samples", "2",
        "--lr", "1e8", "--out", diverge_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("diverged"), "stderr: {}", stderr(&out));
    assert!(!diverge_dir.join("loss.csv").exists());
}

#[test]
fn dump_accepts_checkpoint_prefix_with_or_without_dot() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let out = run(&[
        "train", "--steps", "3", "--h", "16", "--w", "16", "--samples", "2",
        "--out", train_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt = train_dir.join("checkpoint");
    // The second junction fuses 16-channel maps at quarter resolution (8x8
    // for a 16x16 input), so the dump geometry must match.
    for (name, prefix) in [("plain", "fuse2"), ("dotted", "fuse2.")] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "dump", "--h", "8", "--w", "8", "--hh", "4", "--wh", "4",
            "--c", "16", "--c_r", "16",
            "--checkpoint", ckpt.to_str().unwrap(), "--prefix", prefix,
            "--out", out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "prefix {prefix:?}: stderr {}", stderr(&out));
        assert!(out_dir.join("samples.csv").exists());
    }
    let out = run(&[
        "dump", "--h", "8", "--w", "8", "--c", "16", "--c_r", "16",
        "--checkpoint", ckpt.to_str().unwrap(), "--prefix", "fuse9",
        "--out", dir.path().join("nope").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("fuse9"));
}

#[test]
fn dump_rejects_out_of_range_query_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "dump", "--h", "8", "--w", "8", "--query_y", "8",
        "--out", dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("query"));

    // Input tensors must match the configured geometry.
    let x = dir.path().join("x.txt");
    std::fs::write(&x, "shape: 2 3 3\n").unwrap();
    let body: String = std::iter::repeat("0.5\n").take(18).collect();
    std::fs::write(&x, format!("shape: 2 3 3\n{body}")).unwrap();
    let out = run(&[
        "dump", "--h", "8", "--w", "8", "--c", "4",
        "--out", dir.path().join("out2").to_str().unwrap(),
        x.to_str().unwrap(), x.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("shape"));
}

#[test]
fn fscore_runs_end_to_end_and_respects_threshold_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mask = dir.path().join("mask.pgm");
    let mut body = String::from("P2\n8 8\n1\n");
    for y in 0..8 {
        for x in 0..8 {
            body.push_str(if x >= 4 && y >= 2 { "1 " } else { "0 " });
        }
        body.push('\n');
    }
    std::fs::write(&mask, &body).unwrap();

    let out_dir = dir.path().join("out");
    let out = run(&[
        "fscore", mask.to_str().unwrap(), mask.to_str().unwrap(),
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("fscore.csv")).unwrap();
    assert_eq!(csv, stdout(&out));
    assert!(csv.starts_with("threshold_px,precision,recall,f_score\n"));
    assert!(csv.contains("3,1.000000,1.000000,1.000000"));
    assert!(csv.ends_with("mean,,,1.000000\n"));

    let out = run(&[
        "fscore", mask.to_str().unwrap(), mask.to_str().unwrap(),
        "--thresholds", "1,2", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 4, "header, two thresholds, mean");

    let out = run(&[
        "fscore", dir.path().join("missing.pgm").to_str().unwrap(), mask.to_str().unwrap(),
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn cost_writes_both_tables_and_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["cost", "--h", "64", "--w", "64", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("affinity_ratio,25/4096"));
    for file in ["cost_block.csv", "cost_dense.csv"] {
        let csv = std::fs::read_to_string(out_dir.join(file)).unwrap();
        assert!(csv.starts_with("block,params,macs,flops\n"), "{file} header");
        assert!(csv.lines().last().unwrap().starts_with("total,"), "{file} total row");
    }
    let dense = std::fs::read_to_string(out_dir.join("cost_dense.csv")).unwrap();
    assert!(dense.contains("dense_affinity"), "dense table lists the full-map term");
}

#[test]
fn artifacts_land_under_the_requested_directory(){
    // `--out` paths are respected verbatim; nothing is written elsewhere
    // relative to the current directory.
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("deeply/nested/out");
    let out = run(&["cost", "--out", nested.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(nested.join("cost_block.csv").exists());
    assert!(Path::new(&nested).is_dir());
}
