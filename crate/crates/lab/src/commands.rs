//! The five CLI commands. Each returns the text it prints on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::report::{self, write_file, ReportJson};
use crate::run::{self, World};

pub const OUT_ENV: &str = "HRA_LAB_OUT";

/// `$HRA_LAB_OUT/<output_dir>`, or `<output_dir>` under the working directory.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_default();
    root.join(&cfg.output_dir)
}

fn prepare(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = output_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(LabError::io(&dir))?;
    let mut resolved = serde_json::to_string_pretty(cfg)?;
    resolved.push('\n');
    write_file(&dir.join("config.json"), resolved)?;
    Ok(dir)
}

pub fn checkpoint_for(cfg: &ExperimentConfig, world: &World, out: &run::RunOutcome) -> Checkpoint {
    Checkpoint::new(out.params.clone())
        .with_meta("config_hash", cfg.hash())
        .with_meta("seed", cfg.seed)
        .with_meta("method", cfg.adapter.method.name())
        .with_meta("backbone_sha256", out.backbone_after.clone())
        .with_meta("backbone_seed", cfg.backbone_seed())
        .with_meta(
            "tasks",
            World::task_ids(world.final_tasks()).iter().map(|t| t.0).collect::<Vec<_>>(),
        )
}

pub fn train(cfg: &ExperimentConfig) -> Result<String> {
    let dir = prepare(cfg)?;
    let world = World::build(cfg)?;
    let start = Instant::now();
    let out = run::run(&world)?;
    let seconds = start.elapsed().as_secs_f64();
    if out.backbone_before != out.backbone_after {
        return Err(LabError::Checkpoint("backbone weights changed during training".into()));
    }

    let rep = ReportJson::new(cfg, &out);
    write_file(&dir.join("report.json"), rep.to_json())?;
    write_file(&dir.join("loss.csv"), report::loss_csv(cfg, &out.report.curve)?)?;
    if let Some(o) = &out.online {
        write_file(&dir.join("pretrain_loss.csv"), report::loss_csv(cfg, &o.pretrain.curve)?)?;
    }
    checkpoint_for(cfg, &world, &out).write(&dir.join("checkpoint.json"))?;
    write_file(
        &dir.join("timing.json"),
        format!("{}\n", json!({"config_hash": cfg.hash(), "wall_clock_seconds": seconds})),
    )?;

    let r = &out.report;
    let mut s = String::new();
    writeln!(s, "method {} mode {} seed {}", rep.method, rep.mode, cfg.seed).ok();
    writeln!(
        s,
        "train loss {:.6} -> {:.6}  val loss {:.6} -> {:.6}  val label error {:.4}",
        r.initial_train.loss, r.final_train.loss, r.initial_val.loss, r.final_val.loss, r.final_val.label_error_rate
    )
    .ok();
    writeln!(
        s,
        "params shared {} per_task {} total {} (checkpoint elements {})",
        r.param_count.shared,
        r.param_count.per_task,
        r.param_count.total,
        out.params.num_elements()
    )
    .ok();
    if let Some(o) = &out.online {
        writeln!(
            s,
            "controller sha256 before {} after {}",
            &o.controller_before[..16],
            &o.controller_after[..16]
        )
        .ok();
    }
    writeln!(s, "wrote {} ({seconds:.2}s)", dir.display()).ok();
    Ok(s)
}

pub fn eval(cfg: &ExperimentConfig) -> Result<String> {
    let dir = output_dir(cfg);
    let ck = Checkpoint::read(&dir.join("checkpoint.json"))?;
    let world = World::build(cfg)?;
    let digest = world.bb.digest();
    match ck.meta.get("backbone_sha256").and_then(|v| v.as_str()) {
        Some(d) if d == digest => {}
        _ => {
            return Err(LabError::Checkpoint(
                "checkpoint was trained on a different backbone than this config builds".into(),
            ))
        }
    }
    let results = run::evaluate_world(&world, &ck.tensors)?;
    let mut s = String::from("task  test_loss  label_error_rate  examples\n");
    let mut rows = Vec::new();
    let (mut loss, mut n) = (0.0, 0usize);
    for (task, e) in &results {
        writeln!(s, "{:>4}  {:>9.6}  {:>16.4}  {:>8}", task.0, e.loss, e.label_error_rate, e.examples).ok();
        rows.push(json!({"task": task.0, "loss": e.loss, "label_error_rate": e.label_error_rate, "examples": e.examples}));
        loss += e.loss * e.examples as f64;
        n += e.examples;
    }
    let mean = loss / n.max(1) as f64;
    writeln!(s, "mean test loss {mean:.6}").ok();
    let doc = json!({
        "schema": "hra-lab-eval-v1",
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "tasks": rows,
        "mean_test_loss": mean,
    });
    write_file(&dir.join("eval.json"), format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    Ok(s)
}

pub fn count_params(cfg: &ExperimentConfig) -> Result<String> {
    let row = run::count_params(cfg, cfg.adapter.method, cfg.tasks.count)?;
    let dir = prepare(cfg)?;
    write_file(&dir.join("count.csv"), report::count_csv(cfg, std::slice::from_ref(&row))?)?;
    Ok(format!(
        "method    N  shared  per_task  total\n{:<8} {:>2} {:>7} {:>9} {:>6}\n",
        row.method.name(),
        row.tasks,
        row.count.shared,
        row.count.per_task,
        row.count.total
    ))
}

pub fn growth_curve(cfg: &ExperimentConfig) -> Result<String> {
    let rows = run::growth_curve(cfg)?;
    let dir = prepare(cfg)?;
    let path = dir.join("growth_curve.csv");
    write_file(&path, report::growth_csv(cfg, &rows)?)?;
    if cfg.growth.svg {
        write_file(&dir.join("growth_curve.svg"), report::growth_svg(&rows))?;
    }
    let mut s = String::from("method    N=1 total  N=max total  per_task_avg(N=max)\n");
    for m in &cfg.growth.methods {
        let mine: Vec<_> = rows.iter().filter(|r| r.method == *m).collect();
        let (first, last) = (mine[0], mine[mine.len() - 1]);
        writeln!(s, "{:<8} {:>10} {:>12} {:>20.2}", m.name(), first.total, last.total, last.per_task_avg).ok();
    }
    writeln!(s, "wrote {}", display(&path)).ok();
    Ok(s)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<String> {
    let rows = run::ablate(cfg)?;
    let dir = prepare(cfg)?;
    write_file(&dir.join("ablation.csv"), report::ablation_csv(cfg, &rows)?)?;
    let md = report::ablation_markdown(cfg, &rows);
    write_file(&dir.join("ablation.md"), &md)?;
    Ok(md)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
