//! The frozen toy backbone and the layer-hook forward pass adapters plug into.
//!
//! Layer `l` applies a residual feed-forward block `z + V2·relu(V1·z)` to every
//! frame of its input; its output `x_l` goes through the adapter hook to give
//! `x'_l`, which feeds layer `l + 1`. The last adapted activation is projected
//! to `V + 1` logits (blank last) and log-softmaxed. There is no time
//! subsampling: `T` input frames give `T` output frames.
//!
//! Weights are drawn from `SplitMix64::new(seed)` in the order `input_proj`,
//! then `V1`, `V2` for each layer, then `output_proj`, each entry
//! `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` in row-major order.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hra::TaskId;
use crate::params::ParamSet;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneDims {
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub input_dim: usize,
    /// Label vocabulary size, excluding the CTC blank.
    pub vocab: usize,
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("input_dim", self.input_dim),
            ("vocab", self.vocab),
        ];
        for (name, v) in fields {
            if v < 1 {
                return Err(Error::Config(format!("backbone {name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// `d·d_in + L·(2·d·d_ff) + (V+1)·d`.
    pub fn param_count(&self) -> usize {
        self.model_dim * self.input_dim
            + self.layers * 2 * self.model_dim * self.ff_dim
            + (self.vocab + 1) * self.model_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `[d_ff x d]`
    pub v1: Tensor,
    /// `[d x d_ff]`
    pub v2: Tensor,
}

/// Which of a block's two matrices is being applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnMatrix {
    V1,
    V2,
}

impl FfnMatrix {
    pub fn name(self) -> &'static str {
        match self {
            FfnMatrix::V1 => "V1",
            FfnMatrix::V2 => "V2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    dims: BackboneDims,
    seed: u64,
    input_proj: Tensor,
    blocks: Vec<Block>,
    output_proj: Tensor,
}

pub fn build_backbone(dims: BackboneDims, seed: u64) -> Result<FrozenBackbone> {
    dims.validate()?;
    let mut rng = SplitMix64::new(seed);
    let d = dims.model_dim;
    let input_proj = Tensor::fan_in_uniform(d, dims.input_dim, &mut rng);
    let blocks = (0..dims.layers)
        .map(|_| {
            let v1 = Tensor::fan_in_uniform(dims.ff_dim, d, &mut rng);
            let v2 = Tensor::fan_in_uniform(d, dims.ff_dim, &mut rng);
            Block { v1, v2 }
        })
        .collect();
    let output_proj = Tensor::fan_in_uniform(dims.vocab + 1, d, &mut rng);
    Ok(FrozenBackbone {
        dims,
        seed,
        input_proj,
        blocks,
        output_proj,
    })
}

impl FrozenBackbone {
    pub fn dims(&self) -> BackboneDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_proj(&self) -> &Tensor {
        &self.input_proj
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn output_proj(&self) -> &Tensor {
        &self.output_proj
    }

    /// Weights under checkpoint names: `input_proj`, `layers/<l>/V1`,
    /// `layers/<l>/V2`, `output_proj`.
    pub fn weights(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("input_proj", self.input_proj.clone());
        for (l, b) in self.blocks.iter().enumerate() {
            p.insert(format!("layers/{l}/V1"), b.v1.clone());
            p.insert(format!("layers/{l}/V2"), b.v2.clone());
        }
        p.insert("output_proj", self.output_proj.clone());
        p
    }

    /// Inverse of [`weights`](Self::weights), checking every shape.
    pub fn from_weights(dims: BackboneDims, seed: u64, weights: &ParamSet) -> Result<Self> {
        dims.validate()?;
        let d = dims.model_dim;
        let take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = weights.require(name)?;
            if t.shape() != shape {
                return Err(Error::dims("backbone weight", t.shape(), shape));
            }
            Ok(t.clone())
        };
        let input_proj = take("input_proj", &[d, dims.input_dim])?;
        let blocks = (0..dims.layers)
            .map(|l| {
                Ok(Block {
                    v1: take(&format!("layers/{l}/V1"), &[dims.ff_dim, d])?,
                    v2: take(&format!("layers/{l}/V2"), &[d, dims.ff_dim])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output_proj = take("output_proj", &[dims.vocab + 1, d])?;
        if weights.len() != 2 + 2 * dims.layers {
            return Err(Error::Config("unexpected tensors in backbone weights".into()));
        }
        Ok(FrozenBackbone {
            dims,
            seed,
            input_proj,
            blocks,
            output_proj,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights().num_elements()
    }

    /// SHA-256 over the canonical serialization of every weight.
    pub fn digest(&self) -> alloc::string::String {
        self.weights().digest("")
    }
}

/// Backbone weights as graph nodes (constants when frozen).
#[derive(Debug, Clone)]
pub struct BackboneNodes {
    pub input_proj: NodeId,
    pub blocks: Vec<(NodeId, NodeId)>,
    pub output_proj: NodeId,
}

impl BackboneNodes {
    pub fn constants(g: &mut Graph, bb: &FrozenBackbone) -> Self {
        BackboneNodes {
            input_proj: g.constant(bb.input_proj.clone()),
            blocks: bb
                .blocks
                .iter()
                .map(|b| (g.constant(b.v1.clone()), g.constant(b.v2.clone())))
                .collect(),
            output_proj: g.constant(bb.output_proj.clone()),
        }
    }
}

/// What an adapter returns for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub adapted: NodeId,
    /// Controller state produced at this layer, if the adapter has one.
    pub state: Option<NodeId>,
}

/// Points where an adapter can intervene in the backbone forward pass.
pub trait LayerHook {
    /// Applies block matrix `which` of layer `layer` to the rows of `input`.
    fn project(
        &mut self,
        g: &mut Graph,
        _layer: usize,
        _which: FfnMatrix,
        input: NodeId,
        weight: NodeId,
    ) -> Result<NodeId> {
        g.matmul_t(input, weight)
    }

    /// Maps the block output `x_l` to `x'_l`. `block_input` is `x'_{l-1}`.
    fn after_block(
        &mut self,
        _g: &mut Graph,
        _layer: usize,
        _block_input: NodeId,
        block_output: NodeId,
    ) -> Result<LayerOutput> {
        Ok(LayerOutput {
            adapted: block_output,
            state: None,
        })
    }
}

/// The bare backbone.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullHook;

impl LayerHook for NullHook {}

impl<H: LayerHook + ?Sized> LayerHook for Box<H> {
    fn project(
        &mut self,
        g: &mut Graph,
        layer: usize,
        which: FfnMatrix,
        input: NodeId,
        weight: NodeId,
    ) -> Result<NodeId> {
        (**self).project(g, layer, which, input, weight)
    }

    fn after_block(
        &mut self,
        g: &mut Graph,
        layer: usize,
        block_input: NodeId,
        block_output: NodeId,
    ) -> Result<LayerOutput> {
        (**self).after_block(g, layer, block_input, block_output)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub inputs: Vec<NodeId>,
    pub adapted: Vec<NodeId>,
    pub states: Vec<NodeId>,
    pub log_probs: NodeId,
}

/// Records the backbone forward pass on `g`, routing every layer through `hook`.
pub fn forward_graph(
    g: &mut Graph,
    weights: &BackboneNodes,
    hook: &mut dyn LayerHook,
    input: NodeId,
) -> Result<ForwardNodes> {
    let mut z = g.matmul_t(input, weights.input_proj)?;
    let layers = weights.blocks.len();
    let mut out = ForwardNodes {
        inputs: Vec::with_capacity(layers),
        adapted: Vec::with_capacity(layers),
        states: Vec::new(),
        log_probs: z,
    };
    for (l, &(v1, v2)) in weights.blocks.iter().enumerate() {
        let hidden = hook.project(g, l, FfnMatrix::V1, z, v1)?;
        let hidden = g.relu(hidden);
        let delta = hook.project(g, l, FfnMatrix::V2, hidden, v2)?;
        let x = g.add(z, delta)?;
        let step = hook.after_block(g, l, z, x)?;
        out.inputs.push(x);
        out.adapted.push(step.adapted);
        out.states.extend(step.state);
        z = step.adapted;
    }
    let logits = g.matmul_t(z, weights.output_proj)?;
    out.log_probs = g.log_softmax(logits);
    Ok(out)
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Block outputs `x_l`, `[T x d]` each.
    pub inputs: Vec<Tensor>,
    /// Adapted activations `x'_l`.
    pub adapted: Vec<Tensor>,
    /// Controller states `h_l` (`[T x d_r]`), for adapters that have them.
    pub states: Vec<Tensor>,
    /// `[T x (V+1)]`.
    pub log_probs: Tensor,
}

impl ForwardTrace {
    pub(crate) fn from_nodes(g: &Graph, nodes: &ForwardNodes) -> Self {
        let grab = |ids: &[NodeId]| ids.iter().map(|&id| g.value(id).clone()).collect();
        ForwardTrace {
            inputs: grab(&nodes.inputs),
            adapted: grab(&nodes.adapted),
            states: grab(&nodes.states),
            log_probs: g.value(nodes.log_probs).clone(),
        }
    }
}

pub(crate) fn check_input(bb: &FrozenBackbone, input: &Tensor) -> Result<()> {
    if input.rank() != 2 || input.cols() != bb.dims.input_dim {
        return Err(Error::dims(
            "backbone input",
            input.shape(),
            &[input.rows(), bb.dims.input_dim],
        ));
    }
    Ok(())
}

/// Runs the backbone on a `[T x d_in]` input, optionally through an adapter
/// routed to `task`.
pub fn backbone_forward(
    bb: &FrozenBackbone,
    input: &Tensor,
    adapter: Option<(&crate::adapter::Adapter, &ParamSet)>,
    task: Option<TaskId>,
) -> Result<ForwardTrace> {
    check_input(bb, input)?;
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let nodes = match adapter {
        None => {
            let weights = BackboneNodes::constants(&mut g, bb);
            forward_graph(&mut g, &weights, &mut NullHook, x)?
        }
        Some((adapter, params)) => {
            let task = task.ok_or_else(|| {
                Error::Contract("an adapted forward pass needs a task id".into())
            })?;
            let binding = crate::params::Binding::bind(&mut g, params, |_| false);
            let shared = BackboneNodes::constants(&mut g, bb);
            let weights = adapter.backbone_nodes(&binding, &shared, task)?;
            let mut hook = adapter.hook(&binding, task)?;
            forward_graph(&mut g, &weights, &mut hook, x)?
        }
    };
    Ok(ForwardTrace::from_nodes(&g, &nodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(layers: usize, d: usize, d_ff: usize, d_in: usize, vocab: usize) -> BackboneDims {
        BackboneDims {
            layers,
            model_dim: d,
            ff_dim: d_ff,
            input_dim: d_in,
            vocab,
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_backbone(dims(2, 4, 8, 3, 2), 7).unwrap();
        let b = build_backbone(dims(2, 4, 8, 3, 2), 7).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a, b);
        let c = build_backbone(dims(2, 4, 8, 3, 2), 8).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn unit_dims_draw_inside_unit_interval() {
        let bb = build_backbone(dims(1, 1, 1, 1, 1), 0).unwrap();
        let w = bb.weights();
        assert_eq!(w.num_elements(), 1 + 2 + 2);
        // fan_in = 1 for every matrix, so the bound is 1
        for (_, t) in w.iter() {
            assert!(t.data().iter().all(|x| *x > -1.0 && *x < 1.0));
        }
    }

    #[test]
    fn closed_form_count_matches_stored_elements() {
        let d = dims(3, 8, 16, 5, 4);
        let bb = build_backbone(d, 1).unwrap();
        assert_eq!(bb.param_count(), 8 * 5 + 3 * (2 * 8 * 16) + 5 * 8);
        assert_eq!(bb.param_count(), d.param_count());
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            build_backbone(dims(0, 4, 8, 3, 2), 0),
            Err(Error::Config(_))
        ));
        assert!(build_backbone(dims(1, 4, 8, 3, 0), 0).is_err());
    }

    #[test]
    fn bare_forward_keeps_frames_and_normalizes() {
        let bb = build_backbone(dims(2, 4, 8, 3, 2), 3).unwrap();
        let mut rng = SplitMix64::new(4);
        let input = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let trace = backbone_forward(&bb, &input, None, None).unwrap();
        assert_eq!(trace.log_probs.shape(), &[5, 3]);
        assert_eq!(trace.inputs, trace.adapted);
        assert!(trace.states.is_empty());
        for t in 0..5 {
            let s: f64 = trace.log_probs.row(t).iter().map(|&x| libm::exp(x)).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn weights_round_trip() {
        let d = dims(2, 3, 5, 2, 2);
        let bb = build_backbone(d, 9).unwrap();
        let back = FrozenBackbone::from_weights(d, 9, &bb.weights()).unwrap();
        assert_eq!(bb, back);
        let mut w = bb.weights();
        w.remove("layers/1/V2");
        assert!(FrozenBackbone::from_weights(d, 9, &w).is_err());
    }

    #[test]
    fn input_width_checked() {
        let bb = build_backbone(dims(1, 2, 2, 3, 1), 0).unwrap();
        let bad = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            backbone_forward(&bb, &bad, None, None),
            Err(Error::Dimension { .. })
        ));
    }
}
