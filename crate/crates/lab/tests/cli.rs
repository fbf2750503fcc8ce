use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hra_lab::checkpoint::Checkpoint;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hra-lab"))
        .env("HRA_LAB_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs `count-params` and returns (shared, per_task, total) from count.csv.
fn counts(out: &Path, cfg: &str, sets: &[&str]) -> (usize, usize, usize) {
    let path = config(cfg);
    let mut args = vec!["count-params", "--config", path.to_str().unwrap()];
    for s in sets {
        args.extend(["--set", s]);
    }
    let o = lab(out, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("runs/tiny/count.csv")).unwrap();
    let row = text.lines().nth(2).unwrap();
    let f: Vec<&str> = row.split(',').collect();
    (f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap())
}

const TINY: &str = "output_dir=\"runs/tiny\"";

#[test]
fn count_params_reproduces_hand_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    // IndRNN d=8, d_r=4, linear head, one task: 32 + 4 + 4 + 32
    let hra = counts(
        out,
        "golden.json",
        &[TINY, "adapter.head=\"linear\"", "adapter.recurrent_dim=4", "tasks.count=1"],
    );
    assert_eq!(hra, (40, 32, 72));
    // two layers of 2x4 + 4x2
    let residual = counts(
        out,
        "golden.json",
        &[TINY, "adapter.method=\"residual\"", "backbone.layers=2", "backbone.model_dim=4", "adapter.bottleneck=2", "tasks.count=1"],
    );
    assert_eq!(residual, (0, 32, 32));
    let bitfit = counts(out, "golden.json", &[TINY, "adapter.method=\"bitfit\"", "tasks.count=1"]);
    assert_eq!(bitfit, (0, 48, 48));
}

#[test]
fn exit_codes_distinguish_config_from_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(tmp.path(), &["count-params"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`seed`"), "{}", stderr(&o));

    let golden = config("golden.json");
    let g = golden.to_str().unwrap();
    let o = lab(tmp.path(), &["count-params", "--config", g, "--set", "adapter.typo=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("adapter.typo"), "{}", stderr(&o));

    let o = lab(tmp.path(), &["count-params", "--config", g, "--set", "adapter.method=\"lora\"", "--set", "adapter.rank=9"]);
    assert_eq!(o.status.code(), Some(2));

    let o = lab(tmp.path(), &["eval", "--config", g]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = lab(tmp.path(), &["count-params", "--config", g]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn growth_curve_csv_is_affine_in_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("growth.json");
    let o = lab(tmp.path(), &["growth-curve", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("runs/growth/growth_curve.csv")).unwrap();
    assert!(text.starts_with("# hra-lab growth-curve v1 config="));
    assert!(tmp.path().join("runs/growth/growth_curve.svg").exists());
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut hra: Vec<(usize, usize, f64)> = Vec::new();
    for r in rdr.records() {
        let r = r.unwrap();
        if &r[0] == "hra" {
            hra.push((r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap()));
        }
    }
    assert_eq!(hra.len(), 128);
    let step = hra[1].1 - hra[0].1;
    let shared = hra[0].1 - step;
    assert!(shared > 0);
    for (i, &(n, total, avg)) in hra.iter().enumerate() {
        assert_eq!(n, i + 1);
        assert_eq!(total, shared + n * step);
        if i > 0 {
            assert!(avg < hra[i - 1].2);
        }
    }
}

#[test]
fn checkpoint_elements_match_closed_form_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("isolation.json");
    let cfg = cfg.to_str().unwrap();
    for method in ["hra", "residual", "lora", "bitfit", "full"] {
        let m = format!("adapter.method=\"{method}\"");
        let sets = ["--set", &m, "--set", "training.steps=0", "--set", TINY];
        let mut args = vec!["train", "--config", cfg];
        args.extend(sets);
        let o = lab(tmp.path(), &args);
        assert!(o.status.success(), "{method}: {}", stderr(&o));
        let ck = Checkpoint::read(&tmp.path().join("runs/tiny/checkpoint.json")).unwrap();
        let mut args = vec!["count-params", "--config", cfg];
        args.extend(sets);
        assert!(lab(tmp.path(), &args).status.success());
        let text = std::fs::read_to_string(tmp.path().join("runs/tiny/count.csv")).unwrap();
        let total: usize = text.lines().nth(2).unwrap().split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(ck.tensors.num_elements(), total, "{method}");
    }
}

#[test]
fn repeated_runs_write_identical_artifacts() {
    let cfg = config("isolation.json");
    let cfg = cfg.to_str().unwrap();
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        let o = lab(dir.path(), &["train", "--config", cfg, "--set", "training.steps=20"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("method hra"));
        let o = lab(dir.path(), &["eval", "--config", cfg, "--set", "training.steps=20"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["report.json", "checkpoint.json", "loss.csv", "config.json", "eval.json"] {
        let a = std::fs::read(runs[0].path().join("runs/isolation").join(file)).unwrap();
        let b = std::fs::read(runs[1].path().join("runs/isolation").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(runs[0].path().join("runs/isolation/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "hra-lab-report-v1");
    assert_eq!(report["training"]["loss_curve"].as_array().unwrap().len(), 20);
}

#[test]
fn eval_refuses_a_checkpoint_from_another_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("isolation.json");
    let cfg = cfg.to_str().unwrap();
    assert!(lab(tmp.path(), &["train", "--config", cfg, "--set", "training.steps=1"]).status.success());
    let o = lab(tmp.path(), &["eval", "--config", cfg, "--set", "backbone.seed=99"]);
    assert_eq!(o.status.code(), Some(3));
}
