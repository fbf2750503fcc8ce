use hra_core::adapter::{Adapter, AdapterSpec, HraConfig};
use hra_core::backbone::{backbone_forward, build_backbone, BackboneDims, FrozenBackbone};
use hra_core::baselines::Placement;
use hra_core::data::{make_synthetic_tasks, SyntheticConfig};
use hra_core::hra::{ControllerVariant, HeadKind, TaskId};
use hra_core::optim::{FreezeMask, OptimizerConfig};
use hra_core::params::ParamSet;
use hra_core::rng::SplitMix64;
use hra_core::tensor::Tensor;
use hra_core::train::{batch_gradients, train_multi_task, TrainConfig};
use proptest::prelude::*;

fn dims(layers: usize, d: usize, d_ff: usize) -> BackboneDims {
    BackboneDims {
        layers,
        model_dim: d,
        ff_dim: d_ff,
        input_dim: 6,
        vocab: 2,
    }
}

fn hra(variant: ControllerVariant, head: HeadKind, d_r: usize) -> HraConfig {
    HraConfig {
        variant,
        head,
        recurrent_dim: d_r,
        head_hidden: 3,
        disable_recurrence: false,
        unshare_weights: false,
        zero_init_head: false,
    }
}

fn all_specs(d_r: usize) -> Vec<AdapterSpec> {
    let mut v: Vec<AdapterSpec> = ControllerVariant::ALL
        .iter()
        .flat_map(|&var| [HeadKind::Linear, HeadKind::Ffn].map(|h| AdapterSpec::Hra(hra(var, h, d_r))))
        .collect();
    v.extend([
        AdapterSpec::Residual { bottleneck: 2, placement: Placement::Sequential, zero_init: false },
        AdapterSpec::Residual { bottleneck: 2, placement: Placement::Parallel, zero_init: false },
        AdapterSpec::Lora { rank: 1, alpha: 1.0 },
        AdapterSpec::BitFit,
        AdapterSpec::FullFineTune,
    ]);
    v
}

fn input(t: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[t, 6], -1.0, 1.0, &mut SplitMix64::new(seed))
}

fn trace(bb: &FrozenBackbone, a: &Adapter, p: &ParamSet, task: u32, x: &Tensor) -> Tensor {
    backbone_forward(bb, x, Some((a, p)), Some(TaskId(task))).unwrap().log_probs
}

fn bare(bb: &FrozenBackbone, x: &Tensor) -> Tensor {
    backbone_forward(bb, x, None, None).unwrap().log_probs
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=3, 1usize..=8, 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn frames_are_normalized_and_independent((layers, d, d_ff, seed) in shape(), t in 1usize..=6) {
        let bb = build_backbone(dims(layers, d, d_ff), seed).unwrap();
        let x = input(t, seed);
        for spec in all_specs(3) {
            let Ok(a) = Adapter::new(spec, bb.dims(), None) else { continue };
            let p = a.init(&bb, &[TaskId(0)], seed);
            let lp = trace(&bb, &a, &p, 0, &x);
            for r in 0..t {
                let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                let single = Tensor::new(&[1, 6], x.row(r).to_vec()).unwrap();
                let one = trace(&bb, &a, &p, 0, &single);
                prop_assert_eq!(one.row(0), lp.row(r));
            }
        }
    }

    #[test]
    fn identity_initializations_reproduce_the_backbone((layers, d, d_ff, seed) in shape()) {
        let bb = build_backbone(dims(layers, d, d_ff), seed).unwrap();
        let x = input(4, seed);
        let mut zero_head = hra(ControllerVariant::LightGru, HeadKind::Ffn, 3);
        zero_head.zero_init_head = true;
        for spec in [
            AdapterSpec::Lora { rank: 1, alpha: 1.0 },
            AdapterSpec::BitFit,
            AdapterSpec::FullFineTune,
            AdapterSpec::Residual { bottleneck: 2, placement: Placement::Sequential, zero_init: true },
            AdapterSpec::Hra(zero_head),
        ] {
            let a = Adapter::new(spec, bb.dims(), None).unwrap();
            let p = a.init(&bb, &[TaskId(0)], seed);
            prop_assert_eq!(trace(&bb, &a, &p, 0, &x), bare(&bb, &x));
        }
    }

    #[test]
    fn a_head_only_changes_its_own_task((layers, d, d_ff, seed) in shape(), head in prop_oneof![Just(HeadKind::Linear), Just(HeadKind::Ffn)]) {
        let bb = build_backbone(dims(layers, d, d_ff), seed).unwrap();
        let a = Adapter::new(AdapterSpec::Hra(hra(ControllerVariant::IndRnn, head, 3)), bb.dims(), None).unwrap();
        let p = a.init(&bb, &[TaskId(0), TaskId(1)], seed);
        let x = input(3, seed);
        let mut q = p.clone();
        for (name, t) in q.iter_mut() {
            if name.starts_with("heads/1/") {
                *t = t.map(|v| v + 0.5);
            }
        }
        prop_assert_eq!(trace(&bb, &a, &p, 0, &x), trace(&bb, &a, &q, 0, &x));
        // shifting every entry of M by c moves o by c·sum(h), so a linear head with
        // a live state must change its own task's output
        let states = backbone_forward(&bb, &x, Some((&a, &p)), Some(TaskId(1))).unwrap().states;
        if head == HeadKind::Linear && states.iter().any(|h| h.data().iter().any(|&v| v > 0.0)) {
            prop_assert_ne!(trace(&bb, &a, &p, 1, &x), trace(&bb, &a, &q, 1, &x));
        }
    }

    #[test]
    fn hra_size_ignores_depth_residual_size_is_linear_in_it(d in 1usize..=8, d_ff in 1usize..=8, d_r in 1usize..=8, n in 1usize..=16) {
        let hra_counts: Vec<_> = (1..=4)
            .map(|l| Adapter::new(AdapterSpec::Hra(hra(ControllerVariant::LightGru, HeadKind::Ffn, d_r)), dims(l, d, d_ff), None).unwrap().param_count(n).unwrap())
            .collect();
        prop_assert!(hra_counts.windows(2).all(|w| w[0] == w[1]));
        for spec in [
            AdapterSpec::Residual { bottleneck: 2, placement: Placement::Sequential, zero_init: false },
            AdapterSpec::BitFit,
        ] {
            let one = Adapter::new(spec.clone(), dims(1, d, d_ff), None).unwrap().param_count(n).unwrap();
            for l in 2..=4 {
                let c = Adapter::new(spec.clone(), dims(l, d, d_ff), None).unwrap().param_count(n).unwrap();
                prop_assert_eq!(c.per_task, l * one.per_task);
            }
        }
    }

    #[test]
    fn recurrence_switch_equals_zero_recurrent_weights((layers, d, d_ff, seed) in shape(), rnn in any::<bool>()) {
        let bb = build_backbone(dims(layers, d, d_ff), seed).unwrap();
        let variant = if rnn { ControllerVariant::VanillaRnn } else { ControllerVariant::IndRnn };
        let on = Adapter::new(AdapterSpec::Hra(hra(variant, HeadKind::Linear, 3)), bb.dims(), None).unwrap();
        let mut cfg = hra(variant, HeadKind::Linear, 3);
        cfg.disable_recurrence = true;
        let off = Adapter::new(AdapterSpec::Hra(cfg), bb.dims(), None).unwrap();
        let p = on.init(&bb, &[TaskId(0)], seed);
        let mut zeroed = p.clone();
        let key = if rnn { "controller/U" } else { "controller/u" };
        let z = Tensor::zeros(p.get(key).unwrap().shape());
        zeroed.insert(key, z);
        let x = input(3, seed);
        prop_assert_eq!(trace(&bb, &off, &p, 0, &x), trace(&bb, &on, &zeroed, 0, &x));
    }

    #[test]
    fn unshared_copies_match_shared_at_init((layers, d, d_ff, seed) in shape(), disable in any::<bool>()) {
        let bb = build_backbone(dims(layers, d, d_ff), seed).unwrap();
        let mut cfg = hra(ControllerVariant::IndRnn, HeadKind::Ffn, 3);
        cfg.disable_recurrence = disable;
        let shared = Adapter::new(AdapterSpec::Hra(cfg.clone()), bb.dims(), None).unwrap();
        cfg.unshare_weights = true;
        let unshared = Adapter::new(AdapterSpec::Hra(cfg), bb.dims(), None).unwrap();
        let x = input(3, seed);
        let ps = shared.init(&bb, &[TaskId(2)], seed);
        let pu = unshared.init(&bb, &[TaskId(2)], seed);
        prop_assert_eq!(pu.num_elements(), layers * ps.num_elements());
        prop_assert_eq!(trace(&bb, &shared, &ps, 2, &x), trace(&bb, &unshared, &pu, 2, &x));
    }

    #[test]
    fn unshared_linear_hra_without_recurrence_is_a_residual_adapter((layers, d, d_ff, seed) in shape(), d_r in 1usize..=4) {
        let bb = build_backbone(dims(layers, d, d_ff), seed).unwrap();
        let mut cfg = hra(ControllerVariant::IndRnn, HeadKind::Linear, d_r);
        cfg.disable_recurrence = true;
        cfg.unshare_weights = true;
        let h = Adapter::new(AdapterSpec::Hra(cfg), bb.dims(), None).unwrap();
        let r = Adapter::new(
            AdapterSpec::Residual { bottleneck: d_r, placement: Placement::Sequential, zero_init: false },
            bb.dims(),
            None,
        )
        .unwrap();
        let ph = h.init(&bb, &[TaskId(0)], seed);
        // controller biases are zero at init; A1 = W_l, A2 = M_l
        let mut pr = ParamSet::new();
        for l in 0..layers {
            prop_assert_eq!(ph.get(&format!("controller/{l}/b")).unwrap(), &Tensor::zeros(&[d_r]));
            pr.insert(format!("residual/0/{l}/A1"), ph.get(&format!("controller/{l}/W")).unwrap().clone());
            pr.insert(format!("residual/0/{l}/A2"), ph.get(&format!("heads/0/{l}/M")).unwrap().clone());
        }
        let x = input(4, seed);
        prop_assert_eq!(trace(&bb, &h, &ph, 0, &x), trace(&bb, &r, &pr, 0, &x));
    }
}

fn small_tasks(n: usize, seed: u64) -> Vec<hra_core::data::SyntheticTask> {
    let cfg = SyntheticConfig {
        train_size: 6,
        val_size: 3,
        test_size: 3,
        ..SyntheticConfig::default()
    };
    make_synthetic_tasks(seed, n, &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_never_touches_frozen_weights(seed in any::<u64>(), spec_ix in 0usize..11) {
        let bb = build_backbone(dims(2, 4, 6), seed).unwrap();
        let spec = all_specs(3).swap_remove(spec_ix);
        let a = Adapter::new(spec, bb.dims(), None).unwrap();
        let tasks = small_tasks(2, seed);
        let mut p = a.init(&bb, &[TaskId(0), TaskId(1)], seed);
        let before_bb = bb.digest();
        let frozen = a.task_prefix(TaskId(1));
        let before = p.digest(&frozen);
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::adam(1e-2),
            steps: 5,
            batch_size: 3,
            seed,
            freeze: FreezeMask::prefixes([frozen.clone()]),
        };
        train_multi_task(&bb, &a, &mut p, &tasks, &cfg).unwrap();
        prop_assert_eq!(bb.digest(), before_bb);
        prop_assert_eq!(p.digest(&frozen), before);
    }

    #[test]
    fn absent_tasks_receive_exactly_zero_gradient(seed in any::<u64>(), picks in prop::collection::vec(0usize..4, 1..6), ffn in any::<bool>()) {
        let bb = build_backbone(dims(2, 4, 6), seed).unwrap();
        let head = if ffn { HeadKind::Ffn } else { HeadKind::Linear };
        let a = Adapter::new(AdapterSpec::Hra(hra(ControllerVariant::LightGru, head, 3)), bb.dims(), None).unwrap();
        let tasks = small_tasks(4, seed);
        let ids: Vec<TaskId> = tasks.iter().map(|t| t.id).collect();
        let p = a.init(&bb, &ids, seed);
        let items: Vec<_> = picks.iter().map(|&i| (tasks[i].id, &tasks[i].train[i % 6])).collect();
        let (_, grads) = batch_gradients(&bb, &a, &p, &items, &FreezeMask::none()).unwrap();
        for (name, g) in grads.iter() {
            let owner = hra_core::adapter::task_of(name);
            let present = owner.map_or(true, |t| picks.iter().any(|&i| tasks[i].id == t));
            if !present {
                prop_assert!(g.data().iter().all(|v| v.to_bits() == 0), "{name}");
            }
        }
    }
}
