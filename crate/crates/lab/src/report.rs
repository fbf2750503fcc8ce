//! Artifact formats: report JSON and the versioned CSV files.
//!
//! Every CSV starts with one comment line
//! `# hra-lab <kind> v1 config=<sha256> seed=<seed>` followed by a header row.

use std::io::Write;
use std::path::Path;

use hra_core::hra::ParamCount;
use hra_core::train::{Evaluation, StepLoss, TrainReport};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::run::{AblationRow, CountRow, GrowthRow, RunOutcome};

pub const REPORT_SCHEMA: &str = "hra-lab-report-v1";

#[derive(Debug, Serialize)]
pub struct CountJson {
    pub shared: usize,
    pub per_task: usize,
    pub total: usize,
    pub tasks: usize,
}

impl CountJson {
    pub fn new(c: ParamCount, tasks: usize) -> Self {
        CountJson {
            shared: c.shared,
            per_task: c.per_task,
            total: c.total,
            tasks,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EvalJson {
    pub loss: f64,
    pub label_error_rate: f64,
    pub examples: usize,
}

impl From<Evaluation> for EvalJson {
    fn from(e: Evaluation) -> Self {
        EvalJson {
            loss: e.loss,
            label_error_rate: e.label_error_rate,
            examples: e.examples,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TrainJson {
    pub tasks: Vec<u32>,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub trainable_elements: usize,
    pub initial_train: EvalJson,
    pub initial_val: EvalJson,
    pub final_train: EvalJson,
    pub final_val: EvalJson,
    pub loss_curve: Vec<f64>,
}

impl From<&TrainReport> for TrainJson {
    fn from(r: &TrainReport) -> Self {
        TrainJson {
            tasks: r.tasks.iter().map(|t| t.0).collect(),
            steps: r.steps,
            batch_size: r.batch_size,
            seed: r.seed,
            trainable_elements: r.trainable_elements,
            initial_train: r.initial_train.into(),
            initial_val: r.initial_val.into(),
            final_train: r.final_train.into(),
            final_val: r.final_val.into(),
            loss_curve: r.curve.iter().map(|s| s.loss).collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct OnlineJson {
    pub pretrain: TrainJson,
    pub controller_sha256_before: String,
    pub controller_sha256_after: String,
}

/// Contents of `report.json`. Wall-clock time is deliberately absent so the
/// file is byte-reproducible; it goes to `timing.json`.
#[derive(Debug, Serialize)]
pub struct ReportJson {
    pub schema: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub method: &'static str,
    pub mode: &'static str,
    pub backbone_sha256: String,
    pub param_count: CountJson,
    pub checkpoint_elements: usize,
    pub training: TrainJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineJson>,
}

impl ReportJson {
    pub fn new(cfg: &ExperimentConfig, out: &RunOutcome) -> Self {
        ReportJson {
            schema: REPORT_SCHEMA,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            method: cfg.adapter.method.name(),
            mode: match cfg.training.mode {
                crate::config::Mode::MultiTask => "multi_task",
                crate::config::Mode::Online => "online",
            },
            backbone_sha256: out.backbone_after.clone(),
            param_count: CountJson::new(out.report.param_count, out.report.tasks.len()),
            checkpoint_elements: out.params.num_elements(),
            training: (&out.report).into(),
            online: out.online.as_ref().map(|o| OnlineJson {
                pretrain: (&o.pretrain).into(),
                controller_sha256_before: o.controller_before.clone(),
                controller_sha256_after: o.controller_after.clone(),
            }),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn header_line(kind: &str, cfg: &ExperimentConfig) -> String {
    format!("# hra-lab {kind} v1 config={} seed={}\n", cfg.hash(), cfg.seed)
}

fn csv_bytes(kind: &str, cfg: &ExperimentConfig, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut buf = header_line(kind, cfg).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| LabError::Csv(e.into()))?;
    }
    Ok(buf)
}

pub fn loss_csv(cfg: &ExperimentConfig, curve: &[StepLoss]) -> Result<Vec<u8>> {
    let rows = curve
        .iter()
        .map(|s| vec![s.step.to_string(), s.loss.to_string(), format!("{:016x}", s.task_mix_hash)])
        .collect();
    csv_bytes("loss", cfg, &["step", "loss", "task_mix_hash"], rows)
}

pub fn growth_csv(cfg: &ExperimentConfig, rows: &[GrowthRow]) -> Result<Vec<u8>> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.method.name().to_string(),
                r.tasks.to_string(),
                r.total.to_string(),
                r.per_task_avg.to_string(),
            ]
        })
        .collect();
    csv_bytes("growth-curve", cfg, &["method", "N", "total_params", "per_task_avg"], rows)
}

pub fn count_csv(cfg: &ExperimentConfig, rows: &[CountRow]) -> Result<Vec<u8>> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.method.name().to_string(),
                r.tasks.to_string(),
                r.count.shared.to_string(),
                r.count.per_task.to_string(),
                r.count.total.to_string(),
            ]
        })
        .collect();
    csv_bytes("count-params", cfg, &["method", "N", "shared", "per_task", "total"], rows)
}

pub fn ablation_csv(cfg: &ExperimentConfig, rows: &[AblationRow]) -> Result<Vec<u8>> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.setting.to_string(),
                r.variant.name().to_string(),
                r.count.shared.to_string(),
                r.count.per_task.to_string(),
                r.count.total.to_string(),
                r.report.initial_train.loss.to_string(),
                r.report.final_train.loss.to_string(),
                r.report.final_val.loss.to_string(),
                r.report.final_val.label_error_rate.to_string(),
            ]
        })
        .collect();
    csv_bytes(
        "ablate",
        cfg,
        &[
            "setting",
            "variant",
            "shared_params",
            "per_task_params",
            "total_params",
            "initial_train_loss",
            "final_train_loss",
            "final_val_loss",
            "val_label_error_rate",
        ],
        rows,
    )
}

/// Markdown in the two ablation table shapes: settings for the configured
/// variant, then variants for the shared setting.
pub fn ablation_markdown(cfg: &ExperimentConfig, rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let base = hra_core::hra::ControllerVariant::from(cfg.adapter.variant);
    s.push_str(&header_line("ablate", cfg).replacen("# ", "<!-- ", 1).replace('\n', " -->\n\n"));
    s.push_str(&format!("Recurrence and sharing ({} controller)\n\n", base.name()));
    s.push_str("| setting | # params | final train loss | val loss | val label error |\n");
    s.push_str("|---|---:|---:|---:|---:|\n");
    for r in rows.iter().filter(|r| r.variant == base) {
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.3} |\n",
            r.setting, r.count.total, r.report.final_train.loss, r.report.final_val.loss, r.report.final_val.label_error_rate
        ));
    }
    s.push_str("\nController variants (shared, with recurrence)\n\n");
    s.push_str("| variant | # params | final train loss | val loss | val label error |\n");
    s.push_str("|---|---:|---:|---:|---:|\n");
    for r in rows.iter().filter(|r| r.setting == "shared") {
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.3} |\n",
            r.variant.name(), r.count.total, r.report.final_train.loss, r.report.final_val.loss, r.report.final_val.label_error_rate
        ));
    }
    s
}

/// Line chart of per-task average size against task count, one line per method.
pub fn growth_svg(rows: &[GrowthRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let n_max = rows.iter().map(|r| r.tasks).max().unwrap_or(1).max(2) as f64;
    let y_max = rows.iter().map(|r| r.per_task_avg).fold(1.0, f64::max);
    let x = |n: usize| PAD + (n as f64 - 1.0) / (n_max - 1.0) * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - v / y_max * (H - 2.0 * PAD);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - PAD,
        W - PAD
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">tasks N</text>\n<text x=\"12\" y=\"{PAD}\">params per task (max {y_max})</text>\n",
        W / 2.0,
        H - 12.0
    ));
    let mut methods: Vec<_> = rows.iter().map(|r| r.method).collect();
    methods.dedup();
    for (i, m) in methods.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.method == *m)
            .map(|r| format!("{:.1},{:.1}", x(r.tasks), y(r.per_task_avg)))
            .collect();
        let color = colors[i % colors.len()];
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - PAD - 60.0,
            PAD + 16.0 * i as f64,
            m.name()
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(LabError::io(path))?;
    f.write_all(bytes.as_ref()).map_err(LabError::io(path))
}
