//! In-memory experiment runners. The commands in [`crate::commands`] wrap
//! these and write artifacts; tests call them directly.

use hra_core::adapter::{Adapter, AdapterSpec};
use hra_core::backbone::{build_backbone, FrozenBackbone};
use hra_core::data::{make_synthetic_tasks_from, SyntheticTask};
use hra_core::hra::{ControllerVariant, ParamCount, TaskId};
use hra_core::params::ParamSet;
use hra_core::train::{evaluate, online_adapt, train_multi_task, Evaluation, TrainReport};

use crate::config::{ExperimentConfig, Method, Mode};
use crate::error::Result;

/// Everything a run needs, rebuilt deterministically from a config.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: ExperimentConfig,
    pub bb: FrozenBackbone,
    pub adapter: Adapter,
    /// Training tasks (pretraining tasks in online mode).
    pub tasks: Vec<SyntheticTask>,
    /// Online mode only.
    pub new_tasks: Vec<SyntheticTask>,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<World> {
        cfg.validate()?;
        let bb = build_backbone(cfg.backbone_dims(), cfg.backbone_seed())?;
        let data = cfg.synthetic();
        let tasks = make_synthetic_tasks_from(cfg.seed, cfg.tasks.first_id, cfg.tasks.count, &data)?;
        let new_tasks = match (&cfg.online, cfg.training.mode) {
            (Some(o), Mode::Online) => make_synthetic_tasks_from(cfg.seed, o.new_first_id, o.new_tasks, &data)?,
            _ => Vec::new(),
        };
        Ok(World {
            cfg: cfg.clone(),
            bb,
            adapter: cfg.adapter()?,
            tasks,
            new_tasks,
        })
    }

    /// The tasks whose heads end up in the checkpoint.
    pub fn final_tasks(&self) -> &[SyntheticTask] {
        if self.new_tasks.is_empty() {
            &self.tasks
        } else {
            &self.new_tasks
        }
    }

    pub fn task_ids(tasks: &[SyntheticTask]) -> Vec<TaskId> {
        tasks.iter().map(|t| t.id).collect()
    }

    pub fn initial_params(&self) -> ParamSet {
        self.adapter
            .init(&self.bb, &Self::task_ids(&self.tasks), self.cfg.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutcome {
    pub pretrain: TrainReport,
    pub controller_before: String,
    pub controller_after: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub params: ParamSet,
    /// The (final-stage) training report.
    pub report: TrainReport,
    pub online: Option<OnlineOutcome>,
    pub backbone_before: String,
    pub backbone_after: String,
}

pub fn run(world: &World) -> Result<RunOutcome> {
    let cfg = &world.cfg;
    let backbone_before = world.bb.digest();
    let outcome = match cfg.training.mode {
        Mode::MultiTask => {
            let mut params = world.initial_params();
            let report = train_multi_task(&world.bb, &world.adapter, &mut params, &world.tasks, &cfg.train_config())?;
            (params, report, None)
        }
        Mode::Online => {
            let online = cfg.online.as_ref().expect("validated");
            let stage1 = cfg.train_config();
            let mut stage2 = stage1.clone();
            stage2.steps = online.stage2_steps;
            if let Some(lr) = online.stage2_lr {
                stage2.optimizer.lr = lr;
            }
            let (params, r) = online_adapt(
                &world.bb,
                &world.adapter,
                &world.tasks,
                &world.new_tasks,
                cfg.seed,
                &stage1,
                &stage2,
            )?;
            let extra = OnlineOutcome {
                pretrain: r.stage1,
                controller_before: r.controller_before,
                controller_after: r.controller_after,
            };
            (params, r.stage2, Some(extra))
        }
    };
    Ok(RunOutcome {
        params: outcome.0,
        report: outcome.1,
        online: outcome.2,
        backbone_before,
        backbone_after: world.bb.digest(),
    })
}

/// Test-split evaluation of every task that has a head in `params`.
pub fn evaluate_world(world: &World, params: &ParamSet) -> Result<Vec<(TaskId, Evaluation)>> {
    world
        .final_tasks()
        .iter()
        .map(|t| Ok((t.id, evaluate(&world.bb, &world.adapter, params, t.id, &t.test)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub method: Method,
    pub tasks: usize,
    pub count: ParamCount,
}

pub fn count_params(cfg: &ExperimentConfig, method: Method, tasks: usize) -> Result<CountRow> {
    Ok(CountRow {
        method,
        tasks,
        count: cfg.adapter_for(method)?.param_count(tasks)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthRow {
    pub method: Method,
    pub tasks: usize,
    pub total: usize,
    pub per_task_avg: f64,
}

pub fn growth_curve(cfg: &ExperimentConfig) -> Result<Vec<GrowthRow>> {
    let mut rows = Vec::new();
    for &method in &cfg.growth.methods {
        let adapter = cfg.adapter_for(method)?;
        for n in 1..=cfg.growth.n_max {
            let c = adapter.param_count(n)?;
            rows.push(GrowthRow {
                method,
                tasks: n,
                total: c.total,
                per_task_avg: c.per_task_average(n),
            });
        }
    }
    Ok(rows)
}

/// One cell of the ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: &'static str,
    pub variant: ControllerVariant,
    pub count: ParamCount,
    pub report: TrainReport,
}

pub const ABLATION_SETTINGS: [(&str, bool, bool); 3] = [
    ("shared", false, false),
    ("no_recurrence", true, false),
    ("no_recurrence_unshared", true, true),
];

/// Config for one ablation cell: `base` with the recurrence and sharing
/// switches and the controller variant replaced.
pub fn ablation_config(
    base: &ExperimentConfig,
    disable_recurrence: bool,
    unshare: bool,
    variant: ControllerVariant,
) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.adapter.disable_recurrence = disable_recurrence;
    cfg.adapter.unshare_weights = unshare;
    cfg.adapter.variant = variant.into();
    cfg.training.mode = Mode::MultiTask;
    cfg
}

/// Runs {shared, no_recurrence, no_recurrence_unshared} x {IndRNN, RNN,
/// LightGRU} at matched seeds.
pub fn ablate(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    if !matches!(base.adapter_spec(base.adapter.method), AdapterSpec::Hra(_)) {
        return Err(crate::error::LabError::Config(
            "ablate needs `adapter.method` = hra".into(),
        ));
    }
    let mut rows = Vec::new();
    for (setting, disable, unshare) in ABLATION_SETTINGS {
        for variant in ControllerVariant::ALL {
            let cfg = ablation_config(base, disable, unshare, variant);
            let world = World::build(&cfg)?;
            let out = run(&world)?;
            rows.push(AblationRow {
                setting,
                variant,
                count: world.adapter.param_count(world.tasks.len())?,
                report: out.report,
            });
        }
    }
    Ok(rows)
}
