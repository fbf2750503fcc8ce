//! First-order optimizers over named parameters, with prefix freeze masks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.kind == OptimizerKind::Adam {
            let in_unit = |b: f64| (0.0..1.0).contains(&b);
            if !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.eps > 0.0) {
                return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// Parameters whose name starts with any of the prefixes are never updated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    prefixes: Vec<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::default()
    }

    pub fn prefixes<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        FreezeMask {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.prefixes.push(prefix.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient and is not
    /// frozen. All gradients are checked before anything is written, so a
    /// failed step leaves `params` and the moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, mask: &FreezeMask) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::dims("optimizer_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    step: self.step,
                    param: name.into(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.cfg;
        for (name, g) in grads.iter() {
            if mask.is_frozen(name) {
                continue;
            }
            let p = params.get_mut(name).expect("checked above");
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= cfg.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.into())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .v
                        .entry(name.into())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
                    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let gi = g.data()[i];
                        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                        let m_hat = md[i] / c1;
                        let v_hat = vd[i] / c2;
                        pd[i] -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
