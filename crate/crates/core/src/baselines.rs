//! Comparison adapters: per-layer residual bottlenecks, LoRA on the block
//! matrices, and BitFit-style scale/shift vectors.

use alloc::vec::Vec;
use core::str::FromStr;

use alloc::format;

use crate::backbone::{FfnMatrix, LayerHook, LayerOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Placement {
    /// Adapter reads the block output `x_l`.
    #[default]
    Sequential,
    /// Adapter reads the block input and its output is added to the block output.
    Parallel,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Sequential => "sequential",
            Placement::Parallel => "parallel",
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Placement::Sequential),
            "parallel" => Ok(Placement::Parallel),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }
}

/// One layer of a residual adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer {
    /// `[d_b x d]`
    pub a1: Tensor,
    /// `[d x d_b]`
    pub a2: Tensor,
}

/// `x + relu(x·A1ᵀ)·A2ᵀ`.
pub fn residual_adapter_apply(x: &Tensor, p: &ResidualLayer) -> Result<Tensor> {
    if p.a1.shape()[0] != p.a2.shape()[1] || p.a2.shape()[0] != p.a1.shape()[1] {
        return Err(Error::dims("residual adapter", p.a1.shape(), p.a2.shape()));
    }
    let hidden = x.matmul_t(&p.a1)?.relu();
    x.add(&hidden.matmul_t(&p.a2)?)
}

/// Low-rank update for one frozen `[rows x cols]` matrix:
/// `W + (alpha / r)·up·down`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    /// `[r x cols]`
    pub down: Tensor,
    /// `[rows x r]`
    pub up: Tensor,
    pub alpha: f64,
}

impl LoraEntry {
    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let r = self.rank();
        if r > rows.min(cols) {
            return Err(Error::Config(format!(
                "LoRA rank {r} exceeds min({rows}, {cols})"
            )));
        }
        if self.down.shape() != [r, cols] || self.up.shape() != [rows, r] {
            return Err(Error::dims("lora", self.up.shape(), self.down.shape()));
        }
        Ok(())
    }

    /// The adapted weight, formed explicitly.
    pub fn materialize(&self, w: &Tensor) -> Result<Tensor> {
        self.check(w)?;
        w.add(&self.up.matmul(&self.down)?.scale(self.scale()))
    }
}

/// Applies the adapted weight to the rows of `x` (`[T x cols]` → `[T x rows]`)
/// without forming it: `x·Wᵀ + s·(x·downᵀ)·upᵀ`.
pub fn lora_apply(w_frozen: &Tensor, p: &LoraEntry, x: &Tensor) -> Result<Tensor> {
    p.check(w_frozen)?;
    let base = x.matmul_t(w_frozen)?;
    let low = x.matmul_t(&p.down)?.matmul_t(&p.up)?.scale(p.scale());
    base.add(&low)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitFitLayer {
    /// `[d]`
    pub gamma: Tensor,
    /// `[d]`
    pub beta: Tensor,
}

impl BitFitLayer {
    pub fn identity(d: usize) -> Self {
        BitFitLayer {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// `γ ⊙ x + β`, per frame.
pub fn bitfit_apply(x: &Tensor, p: &BitFitLayer) -> Result<Tensor> {
    x.mul(&p.gamma)?.add(&p.beta)
}

fn active(mask: &[bool], layer: usize) -> bool {
    mask.get(layer).copied().unwrap_or(true)
}

/// Residual adapters for one task; `None` for layers left unadapted.
#[derive(Debug, Clone)]
pub struct ResidualHook {
    pub layers: Vec<Option<(NodeId, NodeId)>>,
    pub placement: Placement,
}

impl LayerHook for ResidualHook {
    fn after_block(
        &mut self,
        g: &mut Graph,
        layer: usize,
        block_input: NodeId,
        block_output: NodeId,
    ) -> Result<LayerOutput> {
        let adapted = match self.layers.get(layer).copied().flatten() {
            None => block_output,
            Some((a1, a2)) => {
                let source = match self.placement {
                    Placement::Sequential => block_output,
                    Placement::Parallel => block_input,
                };
                let hidden = g.matmul_t(source, a1)?;
                let hidden = g.relu(hidden);
                let delta = g.matmul_t(hidden, a2)?;
                g.add(block_output, delta)?
            }
        };
        Ok(LayerOutput {
            adapted,
            state: None,
        })
    }
}

/// `(down, up)` node pairs per layer for V1 and V2.
#[derive(Debug, Clone)]
pub struct LoraHook {
    pub layers: Vec<Option<[(NodeId, NodeId); 2]>>,
    pub scale: f64,
}

impl LayerHook for LoraHook {
    fn project(
        &mut self,
        g: &mut Graph,
        layer: usize,
        which: FfnMatrix,
        input: NodeId,
        weight: NodeId,
    ) -> Result<NodeId> {
        let base = g.matmul_t(input, weight)?;
        let Some(pairs) = self.layers.get(layer).copied().flatten() else {
            return Ok(base);
        };
        let (down, up) = match which {
            FfnMatrix::V1 => pairs[0],
            FfnMatrix::V2 => pairs[1],
        };
        let low = g.matmul_t(input, down)?;
        let low = g.matmul_t(low, up)?;
        let low = g.scale(low, self.scale);
        g.add(base, low)
    }
}

#[derive(Debug, Clone)]
pub struct BitFitHook {
    /// `(gamma, beta)` per layer.
    pub layers: Vec<Option<(NodeId, NodeId)>>,
}

impl LayerHook for BitFitHook {
    fn after_block(
        &mut self,
        g: &mut Graph,
        layer: usize,
        _block_input: NodeId,
        block_output: NodeId,
    ) -> Result<LayerOutput> {
        let adapted = match self.layers.get(layer).copied().flatten() {
            None => block_output,
            Some((gamma, beta)) => {
                let scaled = g.mul(block_output, gamma)?;
                g.add(scaled, beta)?
            }
        };
        Ok(LayerOutput {
            adapted,
            state: None,
        })
    }
}

pub(crate) fn mask_layers<T: Copy>(mask: &[bool], layers: usize, f: impl Fn(usize) -> Result<T>) -> Result<Vec<Option<T>>> {
    (0..layers)
        .map(|l| if active(mask, l) { f(l).map(Some) } else { Ok(None) })
        .collect()
}
