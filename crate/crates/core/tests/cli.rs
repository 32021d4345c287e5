use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edgert"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is json")
}

/// Base and draft artifacts plus a config with one prefixed slot.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(d, &["--seed", "1", "gen-artifact", "--output", "base.efmt"])
        .status
        .success());
    assert!(run(
        d,
        &[
            "--seed",
            "2",
            "gen-artifact",
            "--kind",
            "draft",
            "--output",
            "draft.efmt"
        ]
    )
    .status
    .success());
    let cfg = d.join("config.json");
    std::fs::write(
        &cfg,
        r#"{
  "prefill_artifact_path": "base.efmt",
  "draft_artifact_path": "draft.efmt",
  "kv": {"max_slots": 2, "max_seq_len": 128},
  "slots": [
    {"request_id": "a", "prefix_tokens": [10, 11, 12], "max_new_tokens": 16},
    {"request_id": "b", "max_new_tokens": 16}
  ]
}"#,
    )
    .unwrap();
    (dir, cfg)
}

#[test]
fn run_prints_tokens_and_stats() {
    let (dir, _) = workspace();
    let o = run(
        dir.path(),
        &[
            "--config",
            "config.json",
            "run",
            "--request-id",
            "a",
            "--tokens",
            "1,2,3",
            "--max-new-tokens",
            "8",
        ],
    );
    let v = stdout_json(&o);
    assert_eq!(v["output_tokens"].as_array().unwrap().len(), 8);
    let s = &v["stats"];
    assert_eq!(s["new_tokens"], 8);
    assert_eq!(s["prompt_tokens"], 6);
    for k in ["prefill_ms", "decode_ms", "total_ms"] {
        assert!(s[k].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn tokens_file_matches_inline_tokens() {
    let (dir, _) = workspace();
    edgert::config::write_token_file(dir.path().join("t.bin"), &[1, 2, 3]).unwrap();
    let args = |src: &[&'static str]| {
        let mut a = vec![
            "--config",
            "config.json",
            "run",
            "--request-id",
            "b",
            "--max-new-tokens",
            "5",
        ];
        a.extend_from_slice(src);
        a
    };
    let inline = stdout_json(&run(dir.path(), &args(&["--tokens", "1,2,3"])));
    let file = stdout_json(&run(dir.path(), &args(&["--tokens-file", "t.bin"])));
    assert_eq!(inline["output_tokens"], file["output_tokens"]);
}

#[test]
fn unknown_request_exits_2() {
    let (dir, _) = workspace();
    let o = run(
        dir.path(),
        &[
            "--config",
            "config.json",
            "run",
            "--request-id",
            "ghost",
            "--tokens",
            "1",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ghost") && err.contains("UnknownRequest"), "{err}");
}

#[test]
fn config_errors_exit_1() {
    let (dir, _) = workspace();
    let o = run(dir.path(), &["--config", "missing.json", "run", "--tokens", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"prefill_artifact_path": "base.efmt", "batch": 2}"#,
    )
    .unwrap();
    let o = run(dir.path(), &["--config", "bad.json", "run", "--tokens", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(dir.path(), &["--config", "config.json", "run", "--tokens", "1,x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_shapes_exit_1() {
    let (dir, _) = workspace();
    for shapes in ["128", "128/0", "a/b", "128/16,"] {
        let o = run(dir.path(), &["--config", "config.json", "bench", "--shapes", shapes]);
        assert_eq!(o.status.code(), Some(1), "{shapes}");
    }
}

fn bench(dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["--config", "config.json", "bench", "--report", "r.json"];
    args.extend_from_slice(extra);
    let o = run(dir, &args);
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap()
}

#[test]
fn bench_rows_follow_the_shape_list() {
    let (dir, _) = workspace();
    let r = bench(dir.path(), &["--shapes", "24/4,12/6", "--warmup", "1", "--runs", "2"]);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["shape"], "24/4");
    assert_eq!(rows[1]["shape"], "12/6");
    for (row, d) in rows.iter().zip([4, 6]) {
        assert_eq!(row["output_tokens"].as_array().unwrap().len(), d);
        for phase in ["prefill_ms", "decode_ms", "total_ms"] {
            for stat in ["mean", "median", "min", "max"] {
                assert!(row[phase][stat].is_number(), "{phase}.{stat}");
            }
        }
    }
}

#[test]
fn single_run_summaries_collapse() {
    let (dir, _) = workspace();
    let r = bench(dir.path(), &["--shapes", "16/4", "--warmup", "0", "--runs", "1"]);
    let row = &r["rows"][0];
    for phase in ["prefill_ms", "decode_ms", "total_ms"] {
        let s = &row[phase];
        assert_eq!(s["min"], s["max"]);
        assert_eq!(s["mean"], s["median"]);
        assert_eq!(s["min"], s["mean"]);
    }
}

#[test]
fn bench_tokens_depend_on_seed_not_timing() {
    let (dir, _) = workspace();
    let a = bench(dir.path(), &["--shapes", "20/8", "--runs", "1", "--warmup", "0"]);
    let b = bench(dir.path(), &["--shapes", "20/8", "--runs", "3", "--warmup", "1"]);
    assert_eq!(a["rows"][0]["output_tokens"], b["rows"][0]["output_tokens"]);
    let c = bench(
        dir.path(),
        &["--seed", "9", "--shapes", "20/8", "--runs", "1", "--warmup", "0"],
    );
    assert_ne!(a["rows"][0]["output_tokens"], c["rows"][0]["output_tokens"]);
}

#[test]
fn bench_modes_agree_on_tokens() {
    let (dir, _) = workspace();
    let mut outs = Vec::new();
    for plan in ["on", "off"] {
        for spec in ["on", "off"] {
            let r = bench(
                dir.path(),
                &[
                    "--shapes",
                    "20/12",
                    "--runs",
                    "1",
                    "--warmup",
                    "0",
                    "--plan",
                    plan,
                    "--speculative",
                    spec,
                ],
            );
            assert_eq!(r["rows"][0]["mode"]["plan"], plan == "on");
            assert_eq!(r["rows"][0]["accept_ratio"].is_number(), spec == "on");
            outs.push(r["rows"][0]["output_tokens"].clone());
        }
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]), "{outs:?}");
}

#[test]
fn tune_then_bench_uses_tuned_entries() {
    let (dir, _) = workspace();
    let o = run(
        dir.path(),
        &[
            "--config",
            "config.json",
            "tune",
            "--output",
            "tuned.json",
            "--reps",
            "3",
        ],
    );
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let tuned: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("tuned.json")).unwrap()).unwrap();
    let entries = tuned.as_array().unwrap();
    assert!(!entries.is_empty());
    for e in entries {
        for k in [
            "model_name",
            "hw_profile",
            "op_kind",
            "layer_role",
            "op_name",
            "stage",
            "shape_sig",
        ] {
            assert!(!e[k].as_str().unwrap().is_empty(), "wildcard {k} in {e}");
        }
    }
    let with = bench(
        dir.path(),
        &[
            "--shapes",
            "16/4",
            "--runs",
            "1",
            "--warmup",
            "0",
            "--table",
            "tuned.json",
        ],
    );
    assert!(with["rows"][0]["override_hits"].as_u64().unwrap() > 0);
    let without = bench(dir.path(), &["--shapes", "16/4", "--runs", "1", "--warmup", "0"]);
    assert_eq!(without["rows"][0]["override_hits"], 0);
    assert_eq!(with["rows"][0]["output_tokens"], without["rows"][0]["output_tokens"]);
}

#[test]
fn tune_into_unwritable_path_exits_1() {
    let (dir, _) = workspace();
    let o = run(
        dir.path(),
        &["--config", "config.json", "tune", "--output", "no/such/dir/t.json"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn list_kernels_shows_the_registry() {
    let o = bin().arg("list-kernels").output().unwrap();
    let v = stdout_json(&o);
    let text = v.to_string();
    for id in [
        "linear.naive",
        "linear.blocked",
        "attention.decode_cached",
        "rope.decomposed",
        "gelu.tanh",
    ] {
        assert!(text.contains(id), "{id}");
    }
}
