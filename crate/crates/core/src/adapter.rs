//! Adaptation methods behind one interface: parameter layout, initialization,
//! closed-form sizes and the layer hook used in the forward pass.
//!
//! Parameter names (the checkpoint sections):
//!
//! | method   | shared                      | per task `n`                              |
//! |----------|-----------------------------|-------------------------------------------|
//! | HRA      | `controller/{W,b,u,...}`    | `heads/<n>/{M | M1,M2}`                   |
//! | HRA, unshared | `controller/<l>/...`   | `heads/<n>/<l>/...`                       |
//! | residual | -                           | `residual/<n>/<l>/{A1,A2}`                |
//! | LoRA     | -                           | `lora/<n>/<l>.{V1,V2}/{down,up}`          |
//! | BitFit   | -                           | `bitfit/<n>/<l>/{gamma,beta}`             |
//! | full     | -                           | `finetune/<n>/<backbone weight name>`     |

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{BackboneDims, BackboneNodes, FrozenBackbone, LayerHook};
use crate::baselines::{mask_layers, BitFitHook, LoraHook, Placement, ResidualHook};
use crate::error::{Error, Result};
use crate::hra::{
    ControllerNodes, ControllerParams, ControllerVariant, HeadKind, HeadNodes, HraHook, ParamCount,
    TaskHead, TaskId,
};
use crate::params::{Binding, ParamSet};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const STREAM_SHARED: u64 = 1;
const STREAM_TASK: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct HraConfig {
    pub variant: ControllerVariant,
    pub head: HeadKind,
    pub recurrent_dim: usize,
    /// Hidden width of FFN heads; ignored for linear heads.
    pub head_hidden: usize,
    /// Feed a zero state to the controller at every layer.
    pub disable_recurrence: bool,
    /// One independent controller + head per layer, initialized identically.
    pub unshare_weights: bool,
    /// Start the head's output matrix at zero.
    pub zero_init_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterSpec {
    Hra(HraConfig),
    Residual {
        bottleneck: usize,
        placement: Placement,
        zero_init: bool,
    },
    Lora {
        rank: usize,
        alpha: f64,
    },
    BitFit,
    FullFineTune,
}

impl AdapterSpec {
    pub fn method(&self) -> &'static str {
        match self {
            AdapterSpec::Hra(_) => "hra",
            AdapterSpec::Residual { .. } => "residual",
            AdapterSpec::Lora { .. } => "lora",
            AdapterSpec::BitFit => "bitfit",
            AdapterSpec::FullFineTune => "full",
        }
    }

    fn task_section(&self) -> &'static str {
        match self {
            AdapterSpec::Hra(_) => "heads",
            AdapterSpec::Residual { .. } => "residual",
            AdapterSpec::Lora { .. } => "lora",
            AdapterSpec::BitFit => "bitfit",
            AdapterSpec::FullFineTune => "finetune",
        }
    }
}

/// Task index encoded in a per-task parameter name, if any.
pub fn task_of(name: &str) -> Option<TaskId> {
    let mut parts = name.split('/');
    match parts.next()? {
        "heads" | "residual" | "lora" | "bitfit" | "finetune" => {
            parts.next()?.parse().ok().map(TaskId)
        }
        _ => None,
    }
}

/// Closed-form size of a baseline method for `tasks` tasks on `dims`, all
/// layers adapted. Baselines have no shared part.
pub fn baseline_param_count(spec: &AdapterSpec, dims: &BackboneDims, tasks: usize) -> Result<ParamCount> {
    let adapter = Adapter::new(spec.clone(), *dims, None)?;
    if matches!(spec, AdapterSpec::Hra(_)) {
        return Err(Error::Config("baseline_param_count called with an HRA spec".into()));
    }
    adapter.param_count(tasks)
}

/// An adaptation method bound to a backbone shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    spec: AdapterSpec,
    dims: BackboneDims,
    layer_mask: Vec<bool>,
}

impl Adapter {
    pub fn new(spec: AdapterSpec, dims: BackboneDims, layer_mask: Option<Vec<bool>>) -> Result<Self> {
        dims.validate()?;
        let layer_mask = layer_mask.unwrap_or_else(|| vec![true; dims.layers]);
        if layer_mask.len() != dims.layers {
            return Err(Error::Config(format!(
                "layer_mask has {} entries for {} layers",
                layer_mask.len(),
                dims.layers
            )));
        }
        match &spec {
            AdapterSpec::Hra(c) => {
                if c.recurrent_dim < 1 {
                    return Err(Error::Config("recurrent_dim must be >= 1".into()));
                }
                if c.head == HeadKind::Ffn && c.head_hidden < 1 {
                    return Err(Error::Config("head_hidden must be >= 1 for ffn heads".into()));
                }
            }
            AdapterSpec::Residual { bottleneck, .. } if *bottleneck < 1 => {
                return Err(Error::Config("bottleneck must be >= 1".into()));
            }
            AdapterSpec::Lora { rank, alpha } => {
                let max = dims.model_dim.min(dims.ff_dim);
                if *rank < 1 || *rank > max {
                    return Err(Error::Config(format!(
                        "LoRA rank {rank} must lie in [1, min(model_dim, ff_dim) = {max}]"
                    )));
                }
                if !alpha.is_finite() {
                    return Err(Error::Config("LoRA alpha must be finite".into()));
                }
            }
            _ => {}
        }
        Ok(Adapter {
            spec,
            dims,
            layer_mask,
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn dims(&self) -> &BackboneDims {
        &self.dims
    }

    pub fn layer_mask(&self) -> &[bool] {
        &self.layer_mask
    }

    pub fn active_layers(&self) -> usize {
        self.layer_mask.iter().filter(|&&m| m).count()
    }

    fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.layer_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(l, _)| l)
    }

    /// Prefix of the parameters shared by all tasks, for freeze masks.
    pub fn shared_prefix(&self) -> Option<&'static str> {
        match self.spec {
            AdapterSpec::Hra(_) => Some("controller/"),
            _ => None,
        }
    }

    pub fn task_prefix(&self, task: TaskId) -> String {
        format!("{}/{}/", self.spec.task_section(), task.0)
    }

    /// Closed-form (shared, per-task, total) for `tasks` tasks.
    pub fn param_count(&self, tasks: usize) -> Result<ParamCount> {
        if tasks < 1 {
            return Err(Error::Config("task count must be >= 1".into()));
        }
        let d = self.dims.model_dim;
        let active = self.active_layers();
        let (shared, per_task) = match &self.spec {
            AdapterSpec::Hra(c) => {
                let copies = if c.unshare_weights { active } else { 1 };
                (
                    copies * c.variant.param_count(d, c.recurrent_dim),
                    copies * c.head.param_count(d, c.recurrent_dim, c.head_hidden),
                )
            }
            AdapterSpec::Residual { bottleneck, .. } => (0, active * 2 * d * bottleneck),
            AdapterSpec::Lora { rank, .. } => (0, active * 2 * rank * (d + self.dims.ff_dim)),
            AdapterSpec::BitFit => (0, active * 2 * d),
            AdapterSpec::FullFineTune => (0, self.dims.param_count()),
        };
        Ok(ParamCount::new(shared, per_task, tasks))
    }

    /// Parameters shared across tasks (the HRA controller); empty otherwise.
    pub fn init_shared(&self, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        if let AdapterSpec::Hra(c) = &self.spec {
            let mut rng = SplitMix64::derive(seed, &[STREAM_SHARED]);
            let controller =
                ControllerParams::init(c.variant, self.dims.model_dim, c.recurrent_dim, &mut rng);
            if c.unshare_weights {
                for l in self.active() {
                    controller.write(&mut p, &format!("controller/{l}/"));
                }
            } else {
                controller.write(&mut p, "controller/");
            }
        }
        p
    }

    /// Fresh parameters for one task. The stream depends only on
    /// `(seed, task)`, so adding tasks never perturbs existing ones.
    pub fn init_task(&self, bb: &FrozenBackbone, task: TaskId, seed: u64) -> ParamSet {
        let mut rng = SplitMix64::derive(seed, &[STREAM_TASK, task.0 as u64]);
        let mut p = ParamSet::new();
        let d = self.dims.model_dim;
        let prefix = self.task_prefix(task);
        match &self.spec {
            AdapterSpec::Hra(c) => {
                let head = TaskHead::init(
                    c.head,
                    d,
                    c.recurrent_dim,
                    c.head_hidden,
                    c.zero_init_head,
                    &mut rng,
                );
                if c.unshare_weights {
                    for l in self.active() {
                        head.write(&mut p, &format!("{prefix}{l}/"));
                    }
                } else {
                    head.write(&mut p, &prefix);
                }
            }
            AdapterSpec::Residual {
                bottleneck,
                zero_init,
                ..
            } => {
                for l in self.active() {
                    let a1 = Tensor::fan_in_uniform(*bottleneck, d, &mut rng);
                    let a2 = Tensor::fan_in_uniform(d, *bottleneck, &mut rng);
                    let a2 = if *zero_init { Tensor::zeros(a2.shape()) } else { a2 };
                    p.insert(format!("{prefix}{l}/A1"), a1);
                    p.insert(format!("{prefix}{l}/A2"), a2);
                }
            }
            AdapterSpec::Lora { rank, .. } => {
                let d_ff = self.dims.ff_dim;
                for l in self.active() {
                    // V1 is [d_ff x d], V2 is [d x d_ff]
                    for (name, rows, cols) in [("V1", d_ff, d), ("V2", d, d_ff)] {
                        p.insert(
                            format!("{prefix}{l}.{name}/down"),
                            Tensor::fan_in_uniform(*rank, cols, &mut rng),
                        );
                        p.insert(format!("{prefix}{l}.{name}/up"), Tensor::zeros(&[rows, *rank]));
                    }
                }
            }
            AdapterSpec::BitFit => {
                for l in self.active() {
                    p.insert(format!("{prefix}{l}/gamma"), Tensor::ones(&[d]));
                    p.insert(format!("{prefix}{l}/beta"), Tensor::zeros(&[d]));
                }
            }
            AdapterSpec::FullFineTune => {
                for (name, t) in bb.weights().iter() {
                    p.insert(format!("{prefix}{name}"), t.clone());
                }
            }
        }
        p
    }

    /// Shared parameters plus one set per task.
    pub fn init(&self, bb: &FrozenBackbone, tasks: &[TaskId], seed: u64) -> ParamSet {
        let mut p = self.init_shared(seed);
        for &t in tasks {
            p.extend(self.init_task(bb, t, seed));
        }
        p
    }

    /// Tasks that have parameters in `params`.
    pub fn registered_tasks<'a>(&self, names: impl Iterator<Item = &'a str>) -> Vec<TaskId> {
        let section = self.spec.task_section();
        let mut out: Vec<TaskId> = names
            .filter(|n| n.split('/').next() == Some(section))
            .filter_map(task_of)
            .collect();
        out.dedup();
        out.sort();
        out.dedup();
        out
    }

    fn check_task(&self, binding: &Binding, task: TaskId) -> Result<()> {
        let prefix = self.task_prefix(task);
        if binding.iter().any(|(n, _)| n.starts_with(&prefix)) {
            Ok(())
        } else {
            Err(Error::Routing(task.0))
        }
    }

    /// Backbone weights as seen by `task`: the shared frozen constants, or the
    /// task's own trainable copy under full fine-tuning.
    pub fn backbone_nodes(
        &self,
        binding: &Binding,
        shared: &BackboneNodes,
        task: TaskId,
    ) -> Result<BackboneNodes> {
        if !matches!(self.spec, AdapterSpec::FullFineTune) {
            return Ok(shared.clone());
        }
        self.check_task(binding, task)?;
        let prefix = self.task_prefix(task);
        let get = |n: &str| binding.get(&format!("{prefix}{n}"));
        Ok(BackboneNodes {
            input_proj: get("input_proj")?,
            blocks: (0..self.dims.layers)
                .map(|l| Ok((get(&format!("layers/{l}/V1"))?, get(&format!("layers/{l}/V2"))?)))
                .collect::<Result<Vec<_>>>()?,
            output_proj: get("output_proj")?,
        })
    }

    /// The forward-pass hook routing through `task`'s parameters.
    pub fn hook(&self, binding: &Binding, task: TaskId) -> Result<Box<dyn LayerHook>> {
        self.check_task(binding, task)?;
        let prefix = self.task_prefix(task);
        let layers = self.dims.layers;
        let mask = &self.layer_mask;
        Ok(match &self.spec {
            AdapterSpec::Hra(c) => {
                let (controllers, heads) = if c.unshare_weights {
                    let mut cs = Vec::with_capacity(layers);
                    let mut hs = Vec::with_capacity(layers);
                    // masked layers keep a placeholder slot that is never read
                    let first = self.active().next().unwrap_or(0);
                    for l in 0..layers {
                        let src = if mask[l] { l } else { first };
                        cs.push(ControllerNodes::from_binding(
                            binding,
                            &format!("controller/{src}/"),
                            c.variant,
                            c.recurrent_dim,
                        )?);
                        hs.push(HeadNodes::from_binding(
                            binding,
                            &format!("{prefix}{src}/"),
                            c.head,
                        )?);
                    }
                    (cs, hs)
                } else {
                    (
                        vec![ControllerNodes::from_binding(
                            binding,
                            "controller/",
                            c.variant,
                            c.recurrent_dim,
                        )?],
                        vec![HeadNodes::from_binding(binding, &prefix, c.head)?],
                    )
                };
                Box::new(HraHook::new(controllers, heads, c.disable_recurrence, mask.clone())?)
            }
            AdapterSpec::Residual { placement, .. } => Box::new(ResidualHook {
                layers: mask_layers(mask, layers, |l| {
                    Ok((
                        binding.get(&format!("{prefix}{l}/A1"))?,
                        binding.get(&format!("{prefix}{l}/A2"))?,
                    ))
                })?,
                placement: *placement,
            }),
            AdapterSpec::Lora { rank, alpha } => Box::new(LoraHook {
                layers: mask_layers(mask, layers, |l| {
                    let pair = |m: &str| -> Result<_> {
                        Ok((
                            binding.get(&format!("{prefix}{l}.{m}/down"))?,
                            binding.get(&format!("{prefix}{l}.{m}/up"))?,
                        ))
                    };
                    Ok([pair("V1")?, pair("V2")?])
                })?,
                scale: alpha / *rank as f64,
            }),
            AdapterSpec::BitFit => Box::new(BitFitHook {
                layers: mask_layers(mask, layers, |l| {
                    Ok((
                        binding.get(&format!("{prefix}{l}/gamma"))?,
                        binding.get(&format!("{prefix}{l}/beta"))?,
                    ))
                })?,
            }),
            AdapterSpec::FullFineTune => Box::new(crate::backbone::NullHook),
        })
    }
}
