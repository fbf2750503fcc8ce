//! Hierarchical recurrent adapter.
//!
//! One recurrent controller reads the backbone activation `x_l` of every
//! layer together with its own previous state and produces `h_l`; the
//! recurrence runs over depth, so frames are independent. A per-task head
//! maps `h_l` to a correction `o_l` that is added back: `x'_l = x_l + o_l`.
//! The controller is shared by all layers and tasks, a head by all layers of
//! its task, so the trainable size does not depend on depth.
//!
//! Controller variants, per frame, with `h_0 = 0`:
//!
//! | variant    | state update                                              |
//! |------------|-----------------------------------------------------------|
//! | IndRNN     | `relu(W x + u ⊙ h + b)`                                   |
//! | VanillaRNN | `tanh(W x + U h + b)`                                     |
//! | LightGRU   | `z = σ(W_z x + U_z h + b_z)`, `c = relu(W x + U_h h + b)`, `z ⊙ h + (1 - z) ⊙ c` |
//!
//! Heads: linear `o = M h`, or feed-forward `o = M2 relu(M1 h)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::backbone::{
    check_input, forward_graph, BackboneNodes, ForwardTrace, FrozenBackbone, LayerHook, LayerOutput,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binding, ParamSet};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerVariant {
    IndRnn,
    VanillaRnn,
    LightGru,
}

impl ControllerVariant {
    pub const ALL: [ControllerVariant; 3] = [
        ControllerVariant::IndRnn,
        ControllerVariant::VanillaRnn,
        ControllerVariant::LightGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerVariant::IndRnn => "indrnn",
            ControllerVariant::VanillaRnn => "rnn",
            ControllerVariant::LightGru => "lightgru",
        }
    }

    /// Closed-form controller size for input width `d`, state width `d_r`.
    pub fn param_count(self, d: usize, d_r: usize) -> usize {
        match self {
            ControllerVariant::IndRnn => d_r * d + 2 * d_r,
            ControllerVariant::VanillaRnn => d_r * d + d_r * d_r + d_r,
            ControllerVariant::LightGru => 2 * d_r * d + 2 * d_r * d_r + 2 * d_r,
        }
    }
}

impl FromStr for ControllerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "indrnn" => Ok(ControllerVariant::IndRnn),
            "rnn" | "vanilla" | "vanillarnn" => Ok(ControllerVariant::VanillaRnn),
            "lightgru" | "light_gru" | "ligru" => Ok(ControllerVariant::LightGru),
            other => Err(Error::Config(format!("unknown controller variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Linear,
    Ffn,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Ffn => "ffn",
        }
    }

    pub fn param_count(self, d: usize, d_r: usize, d_h: usize) -> usize {
        match self {
            HeadKind::Linear => d * d_r,
            HeadKind::Ffn => d_h * d_r + d * d_h,
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(HeadKind::Linear),
            "ffn" => Ok(HeadKind::Ffn),
            other => Err(Error::Config(format!("unknown head kind `{other}`"))),
        }
    }
}

/// Recurrent part of the controller; exactly one variant's weights exist.
#[derive(Debug, Clone, PartialEq)]
pub enum Recurrence {
    /// Elementwise recurrent scaling vector `u`, `[d_r]`.
    IndRnn { u: Tensor },
    /// Full recurrent matrix `U`, `[d_r x d_r]`.
    VanillaRnn { u: Tensor },
    LightGru {
        w_z: Tensor,
        u_z: Tensor,
        u_h: Tensor,
        b_z: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    /// Input projection, `[d_r x d]`.
    pub w: Tensor,
    /// `[d_r]`
    pub b: Tensor,
    pub recurrence: Recurrence,
}

impl ControllerParams {
    /// IndRNN controller from explicit weights.
    pub fn indrnn(w: Tensor, u: Tensor, b: Tensor) -> Self {
        ControllerParams {
            w,
            b,
            recurrence: Recurrence::IndRnn { u },
        }
    }

    pub fn variant(&self) -> ControllerVariant {
        match self.recurrence {
            Recurrence::IndRnn { .. } => ControllerVariant::IndRnn,
            Recurrence::VanillaRnn { .. } => ControllerVariant::VanillaRnn,
            Recurrence::LightGru { .. } => ControllerVariant::LightGru,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Matrices `Uniform(±1/sqrt(fan_in))`, IndRNN `u ~ Uniform(0, 1)`,
    /// biases zero.
    pub fn init(variant: ControllerVariant, d: usize, d_r: usize, rng: &mut SplitMix64) -> Self {
        let w = Tensor::fan_in_uniform(d_r, d, rng);
        let b = Tensor::zeros(&[d_r]);
        let recurrence = match variant {
            ControllerVariant::IndRnn => Recurrence::IndRnn {
                u: Tensor::uniform(&[d_r], 0.0, 1.0, rng),
            },
            ControllerVariant::VanillaRnn => Recurrence::VanillaRnn {
                u: Tensor::fan_in_uniform(d_r, d_r, rng),
            },
            ControllerVariant::LightGru => Recurrence::LightGru {
                w_z: Tensor::fan_in_uniform(d_r, d, rng),
                u_z: Tensor::fan_in_uniform(d_r, d_r, rng),
                u_h: Tensor::fan_in_uniform(d_r, d_r, rng),
                b_z: Tensor::zeros(&[d_r]),
            },
        };
        ControllerParams { w, b, recurrence }
    }

    fn entries(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("W", &self.w), ("b", &self.b)];
        match &self.recurrence {
            Recurrence::IndRnn { u } => v.push(("u", u)),
            Recurrence::VanillaRnn { u } => v.push(("U", u)),
            Recurrence::LightGru { w_z, u_z, u_h, b_z } => {
                v.extend([("W_z", w_z), ("U_z", u_z), ("U_h", u_h), ("b_z", b_z)])
            }
        }
        v
    }

    fn names(variant: ControllerVariant) -> &'static [&'static str] {
        match variant {
            ControllerVariant::IndRnn => &["W", "b", "u"],
            ControllerVariant::VanillaRnn => &["W", "b", "U"],
            ControllerVariant::LightGru => &["W", "b", "W_z", "U_z", "U_h", "b_z"],
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Stores the tensors as `<prefix>W`, `<prefix>b`, ...
    pub fn write(&self, params: &mut ParamSet, prefix: &str) {
        for (name, t) in self.entries() {
            params.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn read(params: &ParamSet, prefix: &str, variant: ControllerVariant) -> Result<Self> {
        let get = |n: &str| -> Result<Tensor> {
            params.get(&format!("{prefix}{n}")).cloned().ok_or_else(|| {
                Error::Config(format!(
                    "{} controller is missing weight `{prefix}{n}`",
                    variant.name()
                ))
            })
        };
        let recurrence = match variant {
            ControllerVariant::IndRnn => Recurrence::IndRnn { u: get("u")? },
            ControllerVariant::VanillaRnn => Recurrence::VanillaRnn { u: get("U")? },
            ControllerVariant::LightGru => Recurrence::LightGru {
                w_z: get("W_z")?,
                u_z: get("U_z")?,
                u_h: get("U_h")?,
                b_z: get("b_z")?,
            },
        };
        Ok(ControllerParams {
            w: get("W")?,
            b: get("b")?,
            recurrence,
        })
    }

    pub fn insert_constants(&self, g: &mut Graph) -> ControllerNodes {
        let mut c = |t: &Tensor| g.constant(t.clone());
        let w = c(&self.w);
        let b = c(&self.b);
        let recurrence = match &self.recurrence {
            Recurrence::IndRnn { u } => RecurrenceNodes::IndRnn { u: c(u) },
            Recurrence::VanillaRnn { u } => RecurrenceNodes::VanillaRnn { u: c(u) },
            Recurrence::LightGru { w_z, u_z, u_h, b_z } => RecurrenceNodes::LightGru {
                w_z: c(w_z),
                u_z: c(u_z),
                u_h: c(u_h),
                b_z: c(b_z),
            },
        };
        ControllerNodes { w, b, recurrence, state_dim: self.state_dim() }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RecurrenceNodes {
    IndRnn { u: NodeId },
    VanillaRnn { u: NodeId },
    LightGru {
        w_z: NodeId,
        u_z: NodeId,
        u_h: NodeId,
        b_z: NodeId,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ControllerNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub recurrence: RecurrenceNodes,
    pub state_dim: usize,
}

impl ControllerNodes {
    pub fn from_binding(
        binding: &Binding,
        prefix: &str,
        variant: ControllerVariant,
        state_dim: usize,
    ) -> Result<Self> {
        for n in ControllerParams::names(variant) {
            if !binding.contains(&format!("{prefix}{n}")) {
                return Err(Error::Config(format!(
                    "{} controller is missing weight `{prefix}{n}`",
                    variant.name()
                )));
            }
        }
        let get = |n: &str| binding.get(&format!("{prefix}{n}"));
        let recurrence = match variant {
            ControllerVariant::IndRnn => RecurrenceNodes::IndRnn { u: get("u")? },
            ControllerVariant::VanillaRnn => RecurrenceNodes::VanillaRnn { u: get("U")? },
            ControllerVariant::LightGru => RecurrenceNodes::LightGru {
                w_z: get("W_z")?,
                u_z: get("U_z")?,
                u_h: get("U_h")?,
                b_z: get("b_z")?,
            },
        };
        Ok(ControllerNodes {
            w: get("W")?,
            b: get("b")?,
            recurrence,
            state_dim,
        })
    }
}

/// One controller update on graph nodes. `x` is `[T x d]`, `h_prev` is
/// `[T x d_r]`.
pub fn controller_step_graph(
    g: &mut Graph,
    x: NodeId,
    h_prev: NodeId,
    c: &ControllerNodes,
) -> Result<NodeId> {
    let wx = g.matmul_t(x, c.w)?;
    match c.recurrence {
        RecurrenceNodes::IndRnn { u } => {
            let uh = g.mul(h_prev, u)?;
            let pre = g.add(wx, uh)?;
            let pre = g.add(pre, c.b)?;
            Ok(g.relu(pre))
        }
        RecurrenceNodes::VanillaRnn { u } => {
            let uh = g.matmul_t(h_prev, u)?;
            let pre = g.add(wx, uh)?;
            let pre = g.add(pre, c.b)?;
            Ok(g.tanh(pre))
        }
        RecurrenceNodes::LightGru { w_z, u_z, u_h, b_z } => {
            let zx = g.matmul_t(x, w_z)?;
            let zh = g.matmul_t(h_prev, u_z)?;
            let z = g.add(zx, zh)?;
            let z = g.add(z, b_z)?;
            let z = g.sigmoid(z);
            let ch = g.matmul_t(h_prev, u_h)?;
            let cand = g.add(wx, ch)?;
            let cand = g.add(cand, c.b)?;
            let cand = g.relu(cand);
            let keep = g.mul(z, h_prev)?;
            let one_minus_z = g.affine(z, -1.0, 1.0);
            let fresh = g.mul(one_minus_z, cand)?;
            g.add(keep, fresh)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    /// `M`, `[d x d_r]`.
    Linear { m: Tensor },
    /// `M1` `[d_h x d_r]`, `M2` `[d x d_h]`.
    Ffn { m1: Tensor, m2: Tensor },
}

impl TaskHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            TaskHead::Linear { .. } => HeadKind::Linear,
            TaskHead::Ffn { .. } => HeadKind::Ffn,
        }
    }

    /// Output width; must equal the backbone model dimension.
    pub fn output_dim(&self) -> usize {
        match self {
            TaskHead::Linear { m } => m.shape()[0],
            TaskHead::Ffn { m2, .. } => m2.shape()[0],
        }
    }

    /// Fan-in uniform weights; with `zero_output` the last matrix starts at
    /// zero so the adapted model equals the backbone.
    pub fn init(
        kind: HeadKind,
        d: usize,
        d_r: usize,
        d_h: usize,
        zero_output: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        match kind {
            HeadKind::Linear => {
                let m = Tensor::fan_in_uniform(d, d_r, rng);
                TaskHead::Linear {
                    m: if zero_output { Tensor::zeros(&[d, d_r]) } else { m },
                }
            }
            HeadKind::Ffn => {
                let m1 = Tensor::fan_in_uniform(d_h, d_r, rng);
                let m2 = Tensor::fan_in_uniform(d, d_h, rng);
                TaskHead::Ffn {
                    m1,
                    m2: if zero_output { Tensor::zeros(&[d, d_h]) } else { m2 },
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TaskHead::Linear { m } => m.len(),
            TaskHead::Ffn { m1, m2 } => m1.len() + m2.len(),
        }
    }

    pub fn write(&self, params: &mut ParamSet, prefix: &str) {
        match self {
            TaskHead::Linear { m } => {
                params.insert(format!("{prefix}M"), m.clone());
            }
            TaskHead::Ffn { m1, m2 } => {
                params.insert(format!("{prefix}M1"), m1.clone());
                params.insert(format!("{prefix}M2"), m2.clone());
            }
        }
    }

    pub fn read(params: &ParamSet, prefix: &str, kind: HeadKind) -> Result<Self> {
        let get = |n: &str| params.require(&format!("{prefix}{n}")).cloned();
        Ok(match kind {
            HeadKind::Linear => TaskHead::Linear { m: get("M")? },
            HeadKind::Ffn => TaskHead::Ffn {
                m1: get("M1")?,
                m2: get("M2")?,
            },
        })
    }

    pub fn insert_constants(&self, g: &mut Graph) -> HeadNodes {
        match self {
            TaskHead::Linear { m } => HeadNodes::Linear {
                m: g.constant(m.clone()),
            },
            TaskHead::Ffn { m1, m2 } => HeadNodes::Ffn {
                m1: g.constant(m1.clone()),
                m2: g.constant(m2.clone()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum HeadNodes {
    Linear { m: NodeId },
    Ffn { m1: NodeId, m2: NodeId },
}

impl HeadNodes {
    pub fn from_binding(binding: &Binding, prefix: &str, kind: HeadKind) -> Result<Self> {
        let get = |n: &str| binding.get(&format!("{prefix}{n}"));
        Ok(match kind {
            HeadKind::Linear => HeadNodes::Linear { m: get("M")? },
            HeadKind::Ffn => HeadNodes::Ffn {
                m1: get("M1")?,
                m2: get("M2")?,
            },
        })
    }
}

pub fn head_apply_graph(g: &mut Graph, h: NodeId, head: &HeadNodes) -> Result<NodeId> {
    match *head {
        HeadNodes::Linear { m } => g.matmul_t(h, m),
        HeadNodes::Ffn { m1, m2 } => {
            let hidden = g.matmul_t(h, m1)?;
            let hidden = g.relu(hidden);
            g.matmul_t(hidden, m2)
        }
    }
}

/// Task id → head. Heads never share tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadRegistry {
    heads: BTreeMap<TaskId, TaskHead>,
}

impl HeadRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a head under the next dense id.
    pub fn push(&mut self, head: TaskHead) -> TaskId {
        let id = TaskId(self.heads.len() as u32);
        self.heads.insert(id, head);
        id
    }

    pub fn insert(&mut self, task: TaskId, head: TaskHead) -> Option<TaskHead> {
        self.heads.insert(task, head)
    }

    pub fn resolve(&self, task: TaskId) -> Result<&TaskHead> {
        self.heads.get(&task).ok_or(Error::Routing(task.0))
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, &TaskHead)> {
        self.heads.iter().map(|(k, v)| (*k, v))
    }
}

/// Layer hook running the controller/head recursion.
#[derive(Debug, Clone)]
pub struct HraHook {
    /// One entry when shared across layers, else one per layer.
    controllers: Vec<ControllerNodes>,
    heads: Vec<HeadNodes>,
    disable_recurrence: bool,
    layer_mask: Vec<bool>,
    state: Option<NodeId>,
}

impl HraHook {
    pub fn new(
        controllers: Vec<ControllerNodes>,
        heads: Vec<HeadNodes>,
        disable_recurrence: bool,
        layer_mask: Vec<bool>,
    ) -> Result<Self> {
        if controllers.is_empty() || controllers.len() != heads.len() {
            return Err(Error::Config(format!(
                "{} controller(s) for {} head(s)",
                controllers.len(),
                heads.len()
            )));
        }
        Ok(HraHook {
            controllers,
            heads,
            disable_recurrence,
            layer_mask,
            state: None,
        })
    }
}

impl LayerHook for HraHook {
    fn after_block(
        &mut self,
        g: &mut Graph,
        layer: usize,
        _block_input: NodeId,
        block_output: NodeId,
    ) -> Result<LayerOutput> {
        if !self.layer_mask.get(layer).copied().unwrap_or(true) {
            return Ok(LayerOutput {
                adapted: block_output,
                state: None,
            });
        }
        let slot = if self.controllers.len() == 1 { 0 } else { layer };
        let (controller, head) = match (self.controllers.get(slot), self.heads.get(slot)) {
            (Some(c), Some(h)) => (*c, *h),
            _ => {
                return Err(Error::Config(format!(
                    "no unshared controller for layer {layer}"
                )))
            }
        };
        let h_prev = match self.state {
            Some(h) if !self.disable_recurrence => h,
            _ => {
                let frames = g.value(block_output).rows();
                g.constant(Tensor::zeros(&[frames, controller.state_dim]))
            }
        };
        let h = controller_step_graph(g, block_output, h_prev, &controller)?;
        let o = head_apply_graph(g, h, &head)?;
        let adapted = g.add(block_output, o)?;
        self.state = Some(h);
        Ok(LayerOutput {
            adapted,
            state: Some(h),
        })
    }
}

fn check_controller(x: &Tensor, h_prev: &Tensor, c: &ControllerParams) -> Result<()> {
    if x.rank() != 2 || x.cols() != c.input_dim() {
        return Err(Error::dims("controller input", x.shape(), c.w.shape()));
    }
    if h_prev.shape() != [x.rows(), c.state_dim()] {
        return Err(Error::dims(
            "controller state",
            h_prev.shape(),
            &[x.rows(), c.state_dim()],
        ));
    }
    Ok(())
}

fn check_head(h: &Tensor, head: &TaskHead) -> Result<()> {
    let d_r = match head {
        TaskHead::Linear { m } => m.shape()[1],
        TaskHead::Ffn { m1, .. } => m1.shape()[1],
    };
    if let TaskHead::Ffn { m1, m2 } = head {
        if m2.shape()[1] != m1.shape()[0] {
            return Err(Error::dims("ffn head", m1.shape(), m2.shape()));
        }
    }
    if h.rank() != 2 || h.cols() != d_r {
        return Err(Error::dims("head input", h.shape(), &[h.rows(), d_r]));
    }
    Ok(())
}

/// `h_l` from `x_l` (`[T x d]`) and `h_{l-1}` (`[T x d_r]`).
pub fn controller_step(x: &Tensor, h_prev: &Tensor, c: &ControllerParams) -> Result<Tensor> {
    check_controller(x, h_prev, c)?;
    let mut g = Graph::new();
    let cn = c.insert_constants(&mut g);
    let xn = g.constant(x.clone());
    let hn = g.constant(h_prev.clone());
    let out = controller_step_graph(&mut g, xn, hn, &cn)?;
    Ok(g.value(out).clone())
}

/// `o_l` from `h_l`.
pub fn head_apply(h: &Tensor, head: &TaskHead) -> Result<Tensor> {
    check_head(h, head)?;
    let mut g = Graph::new();
    let hn = head.insert_constants(&mut g);
    let x = g.constant(h.clone());
    let out = head_apply_graph(&mut g, x, &hn)?;
    Ok(g.value(out).clone())
}

/// One adapted layer: returns `(x'_l, h_l)`.
pub fn adapt_layer(
    x: &Tensor,
    h_prev: &Tensor,
    c: &ControllerParams,
    head: &TaskHead,
    disable_recurrence: bool,
) -> Result<(Tensor, Tensor)> {
    let zeros;
    let h_in = if disable_recurrence {
        zeros = Tensor::zeros(h_prev.shape());
        &zeros
    } else {
        h_prev
    };
    let h = controller_step(x, h_in, c)?;
    if head.output_dim() != x.cols() {
        return Err(Error::dims("head output", &[head.output_dim()], x.shape()));
    }
    let o = head_apply(&h, head)?;
    Ok((x.add(&o)?, h))
}

/// Backbone forward with one shared controller and the head of `task` at
/// every layer.
pub fn hra_forward(
    bb: &FrozenBackbone,
    c: &ControllerParams,
    reg: &HeadRegistry,
    task: TaskId,
    input: &Tensor,
) -> Result<ForwardTrace> {
    let head = reg.resolve(task)?;
    check_input(bb, input)?;
    let d = bb.dims().model_dim;
    if c.input_dim() != d || head.output_dim() != d {
        return Err(Error::dims(
            "hra adapter",
            &[c.input_dim(), head.output_dim()],
            &[d, d],
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let weights = BackboneNodes::constants(&mut g, bb);
    let cn = c.insert_constants(&mut g);
    let hn = head.insert_constants(&mut g);
    let mut hook = HraHook::new(vec![cn], vec![hn], false, vec![true; bb.dims().layers])?;
    let nodes = forward_graph(&mut g, &weights, &mut hook, x)?;
    Ok(ForwardTrace::from_nodes(&g, &nodes))
}

/// Sizes of an HRA adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub shared: usize,
    pub per_task: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn new(shared: usize, per_task: usize, tasks: usize) -> Self {
        ParamCount {
            shared,
            per_task,
            total: shared + tasks * per_task,
        }
    }

    /// `total / N`.
    pub fn per_task_average(&self, tasks: usize) -> f64 {
        self.total as f64 / tasks as f64
    }
}

/// Closed-form HRA size for `N` tasks: one controller plus `N` heads.
pub fn hra_param_count(
    d: usize,
    d_r: usize,
    d_h: usize,
    variant: ControllerVariant,
    head: HeadKind,
    tasks: usize,
) -> Result<ParamCount> {
    if d < 1 || d_r < 1 || tasks < 1 || (head == HeadKind::Ffn && d_h < 1) {
        return Err(Error::Config(String::from(
            "hra_param_count needs d, d_r, N >= 1 (and d_h >= 1 for ffn heads)",
        )));
    }
    Ok(ParamCount::new(
        variant.param_count(d, d_r),
        head.param_count(d, d_r, d_h),
        tasks,
    ))
}
