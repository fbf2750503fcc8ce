//! Multi-task training with per-task routing, evaluation, and the two-stage
//! online-adaptation workflow.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adapter::{task_of, Adapter};
use crate::backbone::{backbone_forward, forward_graph, BackboneNodes, FrozenBackbone};
use crate::ctc::{ctc_loss, edit_distance, greedy_decode};
use crate::data::{Example, SyntheticTask};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hra::{ParamCount, TaskId};
use crate::optim::{FreezeMask, Optimizer, OptimizerConfig};
use crate::params::{fnv1a64, Binding, ParamSet};
use crate::rng::SplitMix64;

const STREAM_BATCH: u64 = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Drives batch sampling.
    pub seed: u64,
    pub freeze: FreezeMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            steps: 100,
            batch_size: 8,
            seed: 0,
            freeze: FreezeMask::none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    /// Mean batch loss before the update of this step.
    pub loss: f64,
    /// FNV-1a of the batch's task ids, in batch order.
    pub task_mix_hash: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean CTC loss per sequence.
    pub loss: f64,
    /// Total greedy-decode edit distance over total reference length.
    pub label_error_rate: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub tasks: Vec<TaskId>,
    pub curve: Vec<StepLoss>,
    pub initial_train: Evaluation,
    pub final_train: Evaluation,
    pub initial_val: Evaluation,
    pub final_val: Evaluation,
    pub param_count: ParamCount,
    /// Elements actually updated (not frozen) in this run.
    pub trainable_elements: usize,
}

/// Hash of a batch's task composition.
pub fn task_mix_hash(tasks: &[TaskId]) -> u64 {
    let bytes: Vec<u8> = tasks.iter().flat_map(|t| t.0.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

/// Mean CTC loss over `items` and its gradient with respect to every
/// parameter not covered by `freeze`. Parameters the batch does not reach get
/// exact zeros.
pub fn batch_gradients(
    bb: &FrozenBackbone,
    adapter: &Adapter,
    params: &ParamSet,
    items: &[(TaskId, &Example)],
    freeze: &FreezeMask,
) -> Result<(f64, ParamSet)> {
    if items.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let mut g = Graph::new();
    let binding = Binding::bind(&mut g, params, |n| !freeze.is_frozen(n));
    let shared = BackboneNodes::constants(&mut g, bb);
    // resolve every route before recording anything
    for &(task, ex) in items {
        adapter.hook(&binding, task)?;
        crate::backbone::check_input(bb, &ex.input)?;
    }
    let mut losses = Vec::with_capacity(items.len());
    for &(task, ex) in items {
        losses.push(example_loss(&mut g, &shared, adapter, &binding, task, ex)?);
    }
    let total = g.add_all(&losses)?;
    let loss = g.scale(total, 1.0 / items.len() as f64);
    let grads = g.backward(loss)?;
    let mut out = ParamSet::new();
    for (name, id) in binding.iter() {
        if let Some(t) = grads.get(id) {
            out.insert(name, t.clone());
        }
    }
    Ok((g.value(loss).item(), out))
}

/// Records the CTC loss of one example routed through `task` on `g`.
pub fn example_loss(
    g: &mut Graph,
    backbone: &BackboneNodes,
    adapter: &Adapter,
    binding: &Binding,
    task: TaskId,
    ex: &Example,
) -> Result<NodeId> {
    let weights = adapter.backbone_nodes(binding, backbone, task)?;
    let mut hook = adapter.hook(binding, task)?;
    let x = g.constant(ex.input.clone());
    let fwd = forward_graph(g, &weights, &mut hook, x)?;
    g.ctc_loss(fwd.log_probs, &ex.labels)
}

/// Loss and label error rate of `task` on `split`. Pure.
pub fn evaluate(
    bb: &FrozenBackbone,
    adapter: &Adapter,
    params: &ParamSet,
    task: TaskId,
    split: &[Example],
) -> Result<Evaluation> {
    evaluate_many(bb, adapter, params, split.iter().map(|e| (task, e)))
}

fn evaluate_many<'a>(
    bb: &FrozenBackbone,
    adapter: &Adapter,
    params: &ParamSet,
    items: impl Iterator<Item = (TaskId, &'a Example)>,
) -> Result<Evaluation> {
    let (mut loss, mut edits, mut reference, mut n) = (0.0, 0usize, 0usize, 0usize);
    for (task, ex) in items {
        let trace = backbone_forward(bb, &ex.input, Some((adapter, params)), Some(task))?;
        let out = ctc_loss(&trace.log_probs, &ex.labels)?;
        loss += out.loss;
        edits += edit_distance(&greedy_decode(&trace.log_probs), &ex.labels);
        reference += ex.labels.len();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("evaluation split"));
    }
    Ok(Evaluation {
        loss: loss / n as f64,
        label_error_rate: edits as f64 / reference.max(1) as f64,
        examples: n,
    })
}

/// Example-weighted evaluation over the train (or validation) splits of all tasks.
pub fn evaluate_tasks(
    bb: &FrozenBackbone,
    adapter: &Adapter,
    params: &ParamSet,
    tasks: &[SyntheticTask],
    validation: bool,
) -> Result<Evaluation> {
    let items = tasks.iter().flat_map(|t| {
        let split = if validation { &t.val } else { &t.train };
        split.iter().map(move |e| (t.id, e))
    });
    evaluate_many(bb, adapter, params, items)
}

/// Trains `params` on mixed-task batches: every element picks a task
/// uniformly, then an example of that task uniformly. Parameters of tasks
/// absent from a batch are left alone for that step, so a head only ever
/// moves on its own task's data.
pub fn train_multi_task(
    bb: &FrozenBackbone,
    adapter: &Adapter,
    params: &mut ParamSet,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if tasks.is_empty() {
        return Err(Error::Config("training needs at least one task".into()));
    }
    if cfg.batch_size < 1 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.train.is_empty()) {
        return Err(Error::Config(format!("task {} has an empty train split", t.id)));
    }
    let registered: BTreeSet<TaskId> = adapter.registered_tasks(params.names()).into_iter().collect();
    if let Some(t) = tasks.iter().find(|t| !registered.contains(&t.id)) {
        return Err(Error::Routing(t.id.0));
    }

    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = SplitMix64::derive(cfg.seed, &[STREAM_BATCH]);
    let initial_train = evaluate_tasks(bb, adapter, params, tasks, false)?;
    let initial_val = evaluate_tasks(bb, adapter, params, tasks, true)?;

    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let task = &tasks[rng.below(tasks.len())];
            let ex = &task.train[rng.below(task.train.len())];
            items.push((task.id, ex));
        }
        let ids: Vec<TaskId> = items.iter().map(|(t, _)| *t).collect();
        let present: BTreeSet<TaskId> = ids.iter().copied().collect();
        let (loss, mut grads) = batch_gradients(bb, adapter, params, &items, &cfg.freeze)?;
        let absent: Vec<String> = grads
            .names()
            .filter(|n| task_of(n).is_some_and(|t| !present.contains(&t)))
            .map(String::from)
            .collect();
        for n in absent {
            grads.remove(&n);
        }
        opt.step(params, &grads, &cfg.freeze).map_err(|e| match e {
            Error::NonFiniteGradient { param, .. } => Error::NonFiniteGradient {
                step: step as u64,
                param,
            },
            e => e,
        })?;
        curve.push(StepLoss {
            step,
            loss,
            task_mix_hash: task_mix_hash(&ids),
        });
    }

    let (final_train, final_val) = if cfg.steps == 0 {
        (initial_train, initial_val)
    } else {
        (
            evaluate_tasks(bb, adapter, params, tasks, false)?,
            evaluate_tasks(bb, adapter, params, tasks, true)?,
        )
    };
    let trainable_elements = params
        .iter()
        .filter(|(n, _)| !cfg.freeze.is_frozen(n))
        .map(|(_, t)| t.len())
        .sum();
    Ok(TrainReport {
        seed: cfg.seed,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        tasks: tasks.iter().map(|t| t.id).collect(),
        curve,
        initial_train,
        final_train,
        initial_val,
        final_val,
        param_count: adapter.param_count(tasks.len())?,
        trainable_elements,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineReport {
    pub stage1: TrainReport,
    pub stage2: TrainReport,
    /// SHA-256 of the controller section entering stage 2.
    pub controller_before: String,
    pub controller_after: String,
}

/// Stage 1 trains the controller with throwaway heads on `pretrain`; stage 2
/// drops those heads, freezes the controller and trains fresh heads for
/// `new_tasks` only. `params` ends holding the controller and the new heads.
pub fn online_adapt(
    bb: &FrozenBackbone,
    adapter: &Adapter,
    pretrain: &[SyntheticTask],
    new_tasks: &[SyntheticTask],
    init_seed: u64,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
) -> Result<(ParamSet, OnlineReport)> {
    let shared = adapter
        .shared_prefix()
        .ok_or_else(|| Error::Config("online adaptation needs an adapter with a shared controller".into()))?;
    let old: BTreeSet<TaskId> = pretrain.iter().map(|t| t.id).collect();
    if let Some(t) = new_tasks.iter().find(|t| old.contains(&t.id)) {
        return Err(Error::Config(format!(
            "task {} appears in both the pretraining and the new task set",
            t.id
        )));
    }
    let ids: Vec<TaskId> = pretrain.iter().map(|t| t.id).collect();
    let mut params = adapter.init(bb, &ids, init_seed);
    let report1 = train_multi_task(bb, adapter, &mut params, pretrain, stage1)?;

    for t in &ids {
        params.remove_prefix(&adapter.task_prefix(*t));
    }
    for t in new_tasks {
        params.extend(adapter.init_task(bb, t.id, init_seed));
    }
    let controller_before = params.digest(shared);
    let mut cfg2 = stage2.clone();
    cfg2.freeze.freeze(shared);
    let report2 = train_multi_task(bb, adapter, &mut params, new_tasks, &cfg2)?;
    let controller_after = params.digest(shared);
    Ok((
        params,
        OnlineReport {
            stage1: report1,
            stage2: report2,
            controller_before,
            controller_after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterSpec, HraConfig};
    use crate::backbone::{build_backbone, BackboneDims};
    use crate::data::{make_synthetic_tasks, make_synthetic_tasks_from, SyntheticConfig};
    use crate::hra::{ControllerVariant, HeadKind};

    fn setup(n: usize) -> (FrozenBackbone, Adapter, Vec<SyntheticTask>) {
        let dims = BackboneDims {
            layers: 2,
            model_dim: 6,
            ff_dim: 8,
            input_dim: 4,
            vocab: 2,
        };
        let bb = build_backbone(dims, 1).unwrap();
        let spec = AdapterSpec::Hra(HraConfig {
            variant: ControllerVariant::IndRnn,
            head: HeadKind::Ffn,
            recurrent_dim: 4,
            head_hidden: 4,
            disable_recurrence: false,
            unshare_weights: false,
            zero_init_head: false,
        });
        let adapter = Adapter::new(spec, dims, None).unwrap();
        let data = SyntheticConfig {
            input_dim: 4,
            train_size: 6,
            val_size: 3,
            test_size: 3,
            ..Default::default()
        };
        (bb, adapter, make_synthetic_tasks(2, n, &data).unwrap())
    }

    fn ids(tasks: &[SyntheticTask]) -> Vec<TaskId> {
        tasks.iter().map(|t| t.id).collect()
    }

    #[test]
    fn zero_steps_echo_initial_losses() {
        let (bb, a, tasks) = setup(1);
        let mut p = a.init(&bb, &ids(&tasks), 3);
        let before = p.clone();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let r = train_multi_task(&bb, &a, &mut p, &tasks, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(r.final_train, r.initial_train);
        assert!(r.curve.is_empty());
    }

    #[test]
    fn absent_task_head_stays_bit_identical() {
        let (bb, a, tasks) = setup(2);
        let mut p = a.init(&bb, &ids(&tasks), 3);
        let head1 = p.digest("heads/1/");
        let ctrl = p.digest("controller/");
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            ..Default::default()
        };
        train_multi_task(&bb, &a, &mut p, &tasks[..1], &cfg).unwrap();
        assert_eq!(p.digest("heads/1/"), head1);
        assert_ne!(p.digest("controller/"), ctrl);
    }

    #[test]
    fn unknown_task_is_routing_error_before_update() {
        let (bb, a, tasks) = setup(2);
        let mut p = a.init(&bb, &[TaskId(0)], 3);
        let before = p.clone();
        let err = train_multi_task(&bb, &a, &mut p, &tasks, &TrainConfig::default()).unwrap_err();
        assert_eq!(err, Error::Routing(1));
        assert_eq!(p, before);
    }

    #[test]
    fn gradient_of_absent_head_is_exact_zero() {
        let (bb, a, tasks) = setup(3);
        let p = a.init(&bb, &ids(&tasks), 3);
        let items = [(TaskId(0), &tasks[0].train[0]), (TaskId(2), &tasks[2].train[1])];
        let (_, g) = batch_gradients(&bb, &a, &p, &items, &FreezeMask::none()).unwrap();
        for (name, t) in g.iter().filter(|(n, _)| n.starts_with("heads/1/")) {
            assert!(t.data().iter().all(|x| *x == 0.0), "{name}");
        }
        assert!(g.get("heads/0/M1").unwrap().data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn mixed_batch_is_weighted_mean_of_sub_batches() {
        let (bb, a, tasks) = setup(2);
        let p = a.init(&bb, &ids(&tasks), 3);
        let t0 = [(TaskId(0), &tasks[0].train[0]), (TaskId(0), &tasks[0].train[1])];
        let t1 = [(TaskId(1), &tasks[1].train[0])];
        let mixed = [t0[0], t1[0], t0[1]];
        let none = FreezeMask::none();
        let (l0, g0) = batch_gradients(&bb, &a, &p, &t0, &none).unwrap();
        let (l1, g1) = batch_gradients(&bb, &a, &p, &t1, &none).unwrap();
        let (lm, gm) = batch_gradients(&bb, &a, &p, &mixed, &none).unwrap();
        assert!((lm - (2.0 * l0 + l1) / 3.0).abs() < 1e-10);
        let w = g0.get("controller/W").unwrap();
        let v = g1.get("controller/W").unwrap();
        let m = gm.get("controller/W").unwrap();
        for i in 0..m.len() {
            let expect = (2.0 * w.data()[i] + v.data()[i]) / 3.0;
            assert!((m.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn evaluation_is_pure_and_rejects_empty_split() {
        let (bb, a, tasks) = setup(1);
        let p = a.init(&bb, &ids(&tasks), 3);
        let e1 = evaluate(&bb, &a, &p, TaskId(0), &tasks[0].test).unwrap();
        let e2 = evaluate(&bb, &a, &p, TaskId(0), &tasks[0].test).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(
            evaluate(&bb, &a, &p, TaskId(0), &[]),
            Err(Error::EmptyInput("evaluation split"))
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (bb, a, tasks) = setup(2);
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 3,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut p = a.init(&bb, &ids(&tasks), 3);
            let r = train_multi_task(&bb, &a, &mut p, &tasks, &cfg).unwrap();
            (p, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn online_adaptation_freezes_controller() {
        let (bb, a, pre) = setup(2);
        let data = SyntheticConfig {
            input_dim: 4,
            train_size: 6,
            val_size: 3,
            test_size: 3,
            ..Default::default()
        };
        let new = make_synthetic_tasks_from(2, 10, 1, &data).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            ..Default::default()
        };
        let (p, r) = online_adapt(&bb, &a, &pre, &new, 4, &cfg, &cfg).unwrap();
        assert_eq!(r.controller_before, r.controller_after);
        assert!(p.contains("heads/10/M1") && !p.contains("heads/0/M1"));
        assert!(online_adapt(&bb, &a, &pre, &pre[..1], 4, &cfg, &cfg).is_err());
    }
}
