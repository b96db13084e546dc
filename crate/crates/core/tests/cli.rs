//! The command-line front end and its exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn streamal(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamal"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn full_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("scenario.toml"),
        "dim = 8\nn_tasks = 2\nframes_per_demo = 20\n",
    )
    .unwrap();
    fs::write(
        d.join("run.toml"),
        "write_checkpoints = false\n[scenario]\ndim = 8\nn_tasks = 2\nframes_per_demo = 20\n",
    )
    .unwrap();

    let out = streamal(
        &[
            "gen-data",
            "--scenario",
            "scenario.toml",
            "--seed",
            "3",
            "--out",
            "s.csv",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(csv.starts_with("task_id,class_id,frame_idx,binary_label,f0,"));

    let out = streamal(&["pretrain", "--config", "run.toml", "--out", "ckpt"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("ckpt/manifest.json").exists());

    let out = streamal(
        &[
            "eval",
            "--checkpoint",
            "ckpt",
            "--test",
            "s.csv",
            "--out",
            "eval.json",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert!(eval.get("accuracy").is_some());

    // A checkpoint that lost a head file is a runtime failure.
    fs::remove_file(d.join("ckpt/head_00000.bin")).unwrap();
    let out = streamal(&["eval", "--checkpoint", "ckpt", "--test", "s.csv"], d);
    assert_eq!(code(&out), 3);

    for variant in ["vanilla", "full"] {
        let out = streamal(
            &[
                "run",
                "--config",
                "run.toml",
                "--variant",
                variant,
                "--out",
                variant,
            ],
            d,
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = streamal(&["compare", "vanilla/metrics.json", "full/metrics.json"], d);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("vanilla") && table.contains("full"));
}

#[test]
fn configuration_mistakes_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "gama = 0.1\n").unwrap();
    assert_eq!(
        code(&streamal(&["run", "--config", "bad.toml", "--out", "o"], d)),
        2
    );
    fs::write(d.join("neg.toml"), "gamma = -1.0\n").unwrap();
    assert_eq!(
        code(&streamal(&["run", "--config", "neg.toml", "--out", "o"], d)),
        2
    );
    fs::write(d.join("scn.toml"), "n_clases = 2\n").unwrap();
    assert_eq!(
        code(&streamal(
            &["gen-data", "--scenario", "scn.toml", "--out", "s.csv"],
            d
        )),
        2
    );
    assert_eq!(
        code(&streamal(
            &["pretrain", "--variant", "vanilla", "--out", "c"],
            d
        )),
        2
    );
    assert_eq!(
        code(&streamal(
            &["eval", "--checkpoint", "nowhere", "--test", "x.csv"],
            d
        )),
        2
    );
    assert_eq!(code(&streamal(&["compare", "missing.json"], d)), 2);
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("broken.csv"),
        "task_id,class_id,frame_idx,binary_label,f0\n0,0,1,1,abc\n",
    )
    .unwrap();
    fs::write(d.join("run.toml"), "stream_path = \"broken.csv\"\n").unwrap();
    assert_eq!(
        code(&streamal(&["run", "--config", "run.toml", "--out", "o"], d)),
        3
    );
}
