//! End-to-end checks of the command-line binary: every subcommand, the
//! run-directory layout, exit codes, and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::Command;

use gnmr::graph::EquipmentGraph;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gnmr"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

/// Fresh workspace with synthesized FD001 raw files under data/.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data");
    run_ok(
        bin()
            .args(["synth-data", "--dataset", "FD001"])
            .arg("--data-dir")
            .arg(&data),
    );
    (dir, data)
}

fn tiny_train(data: &Path, model: &str, out_dir: &Path) -> String {
    let mut c = bin();
    c.args([
        "train",
        "--dataset",
        "FD001",
        "--model",
        model,
        "--d",
        "4",
        "--gru-layers",
        "1",
        "--tau",
        "1",
        "--max-epochs",
        "1",
        "--window-shift",
        "200",
        "--seed",
        "7",
    ]);
    c.arg("--data-dir").arg(data);
    c.arg("--out-dir").arg(out_dir);
    run_ok(&mut c)
}

fn tiny_evaluate(data: &Path, checkpoint: &Path) -> String {
    let mut c = bin();
    c.args([
        "evaluate",
        "--dataset",
        "FD001",
        "--window-shift",
        "200",
        "--seed",
        "7",
    ]);
    c.arg("--data-dir").arg(data);
    c.arg("--checkpoint").arg(checkpoint);
    run_ok(&mut c)
}

#[test]
fn prepare_reports_the_published_counts() {
    let (_ws, data) = workspace();
    let stdout = run_ok(
        bin()
            .args(["prepare", "--dataset", "FD001", "--seed", "7"])
            .arg("--data-dir")
            .arg(&data),
    );
    assert!(stdout.contains("units: train 80, val 20, test 100"), "{stdout}");
    assert!(stdout.contains("train+val 2286, test 100"), "{stdout}");
    assert!(stdout.contains("(written)"), "{stdout}");

    // second invocation hits the cache
    let again = run_ok(
        bin()
            .args(["prepare", "--dataset", "FD001", "--seed", "7"])
            .arg("--data-dir")
            .arg(&data),
    );
    assert!(again.contains("(reused)"), "{again}");
}

#[test]
fn the_environment_supplies_a_default_data_dir() {
    let (_ws, data) = workspace();
    let stdout = run_ok(
        bin()
            .args(["prepare", "--dataset", "FD001", "--seed", "7"])
            .env("GNMR_DATA_DIR", &data),
    );
    assert!(stdout.contains("test 100"), "{stdout}");
}

#[test]
fn missing_data_files_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["prepare", "--dataset", "FD001"])
        .arg("--data-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("synth-data"), "stderr should point at the generator: {err}");
}

#[test]
fn training_writes_the_run_layout_and_reruns_bit_identically() {
    let (ws, data) = workspace();
    let run_a = ws.path().join("runs/a");
    let run_b = ws.path().join("runs/b");
    let stdout = tiny_train(&data, "gru_mr", &run_a);
    assert!(stdout.contains("validation rmse"), "{stdout}");
    for name in ["config.toml", "history.csv", "best.ckpt"] {
        assert!(run_a.join(name).is_file(), "missing {name}");
    }
    let config = std::fs::read_to_string(run_a.join("config.toml")).unwrap();
    assert!(config.contains("model = \"gru_mr\""), "{config}");
    assert!(config.contains("window_shift = 200"), "{config}");

    tiny_train(&data, "gru_mr", &run_b);
    assert_eq!(
        std::fs::read(run_a.join("history.csv")).unwrap(),
        std::fs::read(run_b.join("history.csv")).unwrap(),
        "same seed, same history bytes"
    );
    assert_eq!(
        std::fs::read(run_a.join("best.ckpt")).unwrap(),
        std::fs::read(run_b.join("best.ckpt")).unwrap(),
        "same seed, same checkpoint bytes"
    );
}

#[test]
fn evaluation_writes_reports_and_repeats_bit_identically() {
    let (ws, data) = workspace();
    let run = ws.path().join("run");
    tiny_train(&data, "gnmr", &run);
    let stdout = tiny_evaluate(&data, &run.join("best.ckpt"));
    assert!(stdout.contains("rmse "), "{stdout}");
    assert!(stdout.contains("s "), "{stdout}");

    let report = std::fs::read_to_string(run.join("eval_report.csv")).unwrap();
    let header = report.lines().next().unwrap();
    assert!(header.starts_with("unit,r,rhat,e,w_1"), "{header}");
    assert!(header.ends_with("rhat_8"), "{header}");
    assert_eq!(report.lines().count(), 1 + 100, "one row per test unit");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("rmse,s\n"), "{metrics}");

    let first = std::fs::read(run.join("eval_report.csv")).unwrap();
    tiny_evaluate(&data, &run.join("best.ckpt"));
    assert_eq!(
        std::fs::read(run.join("eval_report.csv")).unwrap(),
        first,
        "re-evaluation reproduces the report bytes"
    );
}

#[test]
fn evaluating_against_the_wrong_graph_is_an_artifact_error() {
    let (ws, data) = workspace();
    let run = ws.path().join("run");
    tiny_train(&data, "gnmr", &run);
    let out = bin()
        .args([
            "evaluate",
            "--dataset",
            "FD001",
            "--window-shift",
            "200",
            "--seed",
            "7",
            "--graph",
            "reduced4",
        ])
        .arg("--data-dir")
        .arg(&data)
        .arg("--checkpoint")
        .arg(run.join("best.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "graph-hash mismatch exit code");
}

#[test]
fn projection_runs_carry_their_sidecar() {
    let (ws, data) = workspace();
    let run = ws.path().join("run");
    tiny_train(&data, "pca_gru_mr", &run);
    assert!(run.join("pca.bin").is_file(), "projection sidecar missing");
    let stdout = tiny_evaluate(&data, &run.join("best.ckpt"));
    assert!(stdout.contains("rmse "), "{stdout}");
    let header_line = std::fs::read_to_string(run.join("eval_report.csv")).unwrap();
    assert!(
        header_line.starts_with("unit,r,rhat,e\n"),
        "flat reports carry no attention columns"
    );
}

#[test]
fn attention_report_accepts_names_and_indices() {
    let (ws, data) = workspace();
    let run = ws.path().join("run");
    tiny_train(&data, "gnmr", &run);
    tiny_evaluate(&data, &run.join("best.ckpt"));
    let report = run.join("eval_report.csv");

    let stdout = run_ok(
        bin()
            .args(["attention-report", "--fault-node", "HPC"])
            .arg("--report")
            .arg(&report),
    );
    assert!(stdout.contains("fault node 2"), "{stdout}");
    let profile = std::fs::read_to_string(run.join("attention_profile.csv")).unwrap();
    assert!(profile.starts_with("bin,count,mean_w_fault"), "{profile}");
    assert_eq!(profile.lines().count(), 1 + 13, "13 life bins");

    let by_index = ws.path().join("by_index.csv");
    let stdout = run_ok(
        bin()
            .args(["attention-report", "--fault-node", "0"])
            .arg("--report")
            .arg(&report)
            .arg("--out")
            .arg(&by_index),
    );
    assert!(stdout.contains("fault node 0"), "{stdout}");
    assert!(by_index.is_file());
}

#[test]
fn grid_searches_the_configured_axes_and_retrains_the_winner() {
    let (ws, data) = workspace();
    let out_dir = ws.path().join("grid");
    let config = ws.path().join("exp.toml");
    std::fs::write(
        &config,
        format!(
            "dataset = \"FD001\"\nseed = 7\nmax_epochs = 1\nwindow_shift = 200\n\
             out_dir = \"{}\"\ngrid_d = [4]\ngrid_tau = [0, 1]\ngrid_gru_layers = [1]\n",
            out_dir.display()
        ),
    )
    .unwrap();
    let stdout = run_ok(
        bin()
            .args(["grid", "--jobs", "1"])
            .arg("--config")
            .arg(&config)
            .arg("--data-dir")
            .arg(&data),
    );
    assert!(stdout.contains("best candidate"), "{stdout}");

    let results = std::fs::read_to_string(out_dir.join("grid_results.csv")).unwrap();
    assert!(results.starts_with("d,tau,gru_layers,val_rmse\n"), "{results}");
    assert_eq!(results.lines().count(), 1 + 2, "one row per candidate");
    for name in ["config.toml", "best/best.ckpt", "best/history.csv", "best/config.toml"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let best_cfg = std::fs::read_to_string(out_dir.join("best/config.toml")).unwrap();
    assert!(best_cfg.contains("d = 4"), "{best_cfg}");
}

#[test]
fn perturb_graph_covers_the_published_node_counts() {
    let (ws, _data) = workspace();
    let mut seen = Vec::new();
    for variant in ["single_node", "reduced4", "original", "increased13", "per_sensor"] {
        let out = ws.path().join(format!("{variant}.toml"));
        let stdout = run_ok(
            bin()
                .args(["perturb-graph", "--variant", variant, "--seed", "3"])
                .arg("--out")
                .arg(&out),
        );
        let graph = EquipmentGraph::from_toml_path(&out).expect("written config loads");
        assert!(
            stdout.contains(&format!("{} nodes", graph.num_nodes())),
            "{stdout}"
        );
        seen.push(graph.num_nodes());
    }
    assert_eq!(seen, vec![1, 4, 8, 13, 21]);
}
