//! Experiment configuration: one JSON document, with `--set key=value`
//! overrides applied to dotted paths before validation.

use std::path::Path;

use hra_core::adapter::{Adapter, AdapterSpec, HraConfig};
use hra_core::backbone::BackboneDims;
use hra_core::baselines::Placement;
use hra_core::data::{RuleFamily, SyntheticConfig};
use hra_core::hra::{ControllerVariant, HeadKind};
use hra_core::optim::{OptimizerConfig, OptimizerKind};
use hra_core::params::sha256_hex;
use hra_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneSection,
    pub adapter: AdapterSection,
    pub tasks: TaskSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub online: Option<OnlineSection>,
    #[serde(default)]
    pub growth: GrowthSection,
    /// Relative to the output root (`HRA_LAB_OUT`, else the working directory).
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "runs/default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub input_dim: usize,
    pub vocab: usize,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hra,
    Residual,
    Lora,
    Bitfit,
    Full,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Hra => "hra",
            Method::Residual => "residual",
            Method::Lora => "lora",
            Method::Bitfit => "bitfit",
            Method::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Indrnn,
    Rnn,
    Lightgru,
}

impl From<Variant> for ControllerVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Indrnn => ControllerVariant::IndRnn,
            Variant::Rnn => ControllerVariant::VanillaRnn,
            Variant::Lightgru => ControllerVariant::LightGru,
        }
    }
}

impl From<ControllerVariant> for Variant {
    fn from(v: ControllerVariant) -> Self {
        match v {
            ControllerVariant::IndRnn => Variant::Indrnn,
            ControllerVariant::VanillaRnn => Variant::Rnn,
            ControllerVariant::LightGru => Variant::Lightgru,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementName {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub method: Method,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_head")]
    pub head: Head,
    #[serde(default = "default_width")]
    pub recurrent_dim: usize,
    #[serde(default = "default_width")]
    pub head_hidden: usize,
    #[serde(default)]
    pub disable_recurrence: bool,
    #[serde(default)]
    pub unshare_weights: bool,
    /// Zero-initialize the output matrix of HRA heads / residual adapters.
    #[serde(default)]
    pub zero_init: bool,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    #[serde(default = "default_placement")]
    pub placement: PlacementName,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// LoRA scale numerator; defaults to the rank.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub layer_mask: Option<Vec<bool>>,
}

fn default_variant() -> Variant {
    Variant::Indrnn
}
fn default_head() -> Head {
    Head::Linear
}
fn default_width() -> usize {
    8
}
fn default_bottleneck() -> usize {
    4
}
fn default_placement() -> PlacementName {
    PlacementName::Sequential
}
fn default_rank() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Linear,
    Xor,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub count: usize,
    #[serde(default)]
    pub first_id: u32,
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_segments")]
    pub segments: [usize; 2],
    #[serde(default = "default_frames")]
    pub symbol_frames: [usize; 2],
    #[serde(default = "default_frames")]
    pub silence_frames: [usize; 2],
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_spread")]
    pub task_spread: f64,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_eval_size")]
    pub val_size: usize,
    #[serde(default = "default_eval_size")]
    pub test_size: usize,
}

fn default_family() -> Family {
    Family::Linear
}
fn default_latent() -> usize {
    3
}
fn default_segments() -> [usize; 2] {
    [1, 3]
}
fn default_frames() -> [usize; 2] {
    [1, 2]
}
fn default_noise() -> f64 {
    0.05
}
fn default_spread() -> f64 {
    1.0
}
fn default_train_size() -> usize {
    32
}
fn default_eval_size() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_opt")]
    pub kind: OptimizerName,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_opt() -> OptimizerName {
    OptimizerName::Adam
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: default_opt(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MultiTask,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_batch() -> usize {
    8
}
fn default_mode() -> Mode {
    Mode::MultiTask
}

/// Online adaptation: `tasks` pretrain the controller (for
/// `training.steps` steps), then `new_tasks` fresh tasks train heads only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    pub new_tasks: usize,
    #[serde(default = "default_new_first")]
    pub new_first_id: u32,
    pub stage2_steps: usize,
    /// Defaults to `optimizer.lr`.
    #[serde(default)]
    pub stage2_lr: Option<f64>,
}

fn default_new_first() -> u32 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub svg: bool,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Hra, Method::Residual, Method::Lora, Method::Bitfit]
}
fn default_n_max() -> usize {
    128
}

impl Default for GrowthSection {
    fn default() -> Self {
        GrowthSection {
            methods: default_methods(),
            n_max: default_n_max(),
            svg: false,
        }
    }
}

/// Sets `value` at the dotted `path`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(LabError::Config(format!("malformed key `{path}`")));
    }
    for (i, key) in keys.iter().enumerate() {
        if !cur.is_object() {
            return Err(LabError::Config(format!(
                "`{}` is not an object",
                keys[..i].join(".")
            )));
        }
        let map = cur.as_object_mut().expect("checked");
        if i + 1 == keys.len() {
            map.insert((*key).into(), value);
            return Ok(());
        }
        cur = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

/// Applies `key=value` overrides. Values parse as JSON when they can and
/// fall back to plain strings, so `--set adapter.method=lora` works unquoted.
pub fn apply_overrides(root: &mut Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("override `{s}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        set_path(root, key.trim(), value)?;
    }
    Ok(())
}

fn describe(err: serde_path_to_error::Error<serde_json::Error>) -> LabError {
    let path = err.path().to_string();
    let inner = err.inner().to_string();
    let prefix = if path == "." { String::new() } else { format!("{path}.") };
    if let Some(rest) = inner.strip_prefix("missing field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        return LabError::Config(format!("missing required key `{prefix}{field}`"));
    }
    if let Some(rest) = inner.strip_prefix("unknown field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        return LabError::Config(format!("unknown key `{prefix}{field}`"));
    }
    LabError::Config(format!("key `{path}`: {inner}"))
}

impl ExperimentConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(describe)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from an empty document) and applies `sets`.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(LabError::io(p))?;
                serde_json::from_str(&text)
                    .map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        apply_overrides(&mut value, sets)?;
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_dims().validate()?;
        self.adapter()?;
        self.synthetic().validate()?;
        self.optimizer_config().validate()?;
        if self.tasks.count < 1 {
            return Err(LabError::Config("`tasks.count` must be >= 1".into()));
        }
        if self.tasks.latent_dim < 1 {
            return Err(LabError::Config("`tasks.latent_dim` must be >= 1".into()));
        }
        if self.training.batch_size < 1 {
            return Err(LabError::Config("`training.batch_size` must be >= 1".into()));
        }
        if self.growth.n_max < 1 {
            return Err(LabError::Config("`growth.n_max` must be >= 1".into()));
        }
        if self.training.mode == Mode::Online {
            let online = self
                .online
                .as_ref()
                .ok_or_else(|| LabError::Config("missing required key `online` for online mode".into()))?;
            if online.new_tasks < 1 {
                return Err(LabError::Config("`online.new_tasks` must be >= 1".into()));
            }
            if self.adapter.method != Method::Hra {
                return Err(LabError::Config("online mode needs `adapter.method` = hra".into()));
            }
            let old = self.tasks.first_id as u64..self.tasks.first_id as u64 + self.tasks.count as u64;
            let new = online.new_first_id as u64..online.new_first_id as u64 + online.new_tasks as u64;
            if old.start < new.end && new.start < old.end {
                return Err(LabError::Config(
                    "`online.new_first_id` makes the new tasks overlap the pretraining tasks".into(),
                ));
            }
        }
        Ok(())
    }

    /// The config with every default filled in, as canonical JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .expect("config serializes")
            .to_string()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn backbone_dims(&self) -> BackboneDims {
        BackboneDims {
            layers: self.backbone.layers,
            model_dim: self.backbone.model_dim,
            ff_dim: self.backbone.ff_dim,
            input_dim: self.backbone.input_dim,
            vocab: self.backbone.vocab,
        }
    }

    pub fn backbone_seed(&self) -> u64 {
        self.backbone.seed.unwrap_or(self.seed)
    }

    pub fn adapter_spec(&self, method: Method) -> AdapterSpec {
        let a = &self.adapter;
        match method {
            Method::Hra => AdapterSpec::Hra(HraConfig {
                variant: a.variant.into(),
                head: match a.head {
                    Head::Linear => HeadKind::Linear,
                    Head::Ffn => HeadKind::Ffn,
                },
                recurrent_dim: a.recurrent_dim,
                head_hidden: a.head_hidden,
                disable_recurrence: a.disable_recurrence,
                unshare_weights: a.unshare_weights,
                zero_init_head: a.zero_init,
            }),
            Method::Residual => AdapterSpec::Residual {
                bottleneck: a.bottleneck,
                placement: match a.placement {
                    PlacementName::Sequential => Placement::Sequential,
                    PlacementName::Parallel => Placement::Parallel,
                },
                zero_init: a.zero_init,
            },
            Method::Lora => AdapterSpec::Lora {
                rank: a.rank,
                alpha: a.alpha.unwrap_or(a.rank as f64),
            },
            Method::Bitfit => AdapterSpec::BitFit,
            Method::Full => AdapterSpec::FullFineTune,
        }
    }

    pub fn adapter_for(&self, method: Method) -> Result<Adapter> {
        Ok(Adapter::new(
            self.adapter_spec(method),
            self.backbone_dims(),
            self.adapter.layer_mask.clone(),
        )?)
    }

    pub fn adapter(&self) -> Result<Adapter> {
        self.adapter_for(self.adapter.method)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let t = &self.tasks;
        SyntheticConfig {
            input_dim: self.backbone.input_dim,
            vocab: self.backbone.vocab,
            latent_dim: t.latent_dim,
            family: match t.family {
                Family::Linear => RuleFamily::Linear,
                Family::Xor => RuleFamily::Xor,
                Family::Mixed => RuleFamily::Mixed,
            },
            segments: (t.segments[0], t.segments[1]),
            symbol_frames: (t.symbol_frames[0], t.symbol_frames[1]),
            silence_frames: (t.silence_frames[0], t.silence_frames[1]),
            noise: t.noise,
            task_spread: t.task_spread,
            train_size: t.train_size,
            val_size: t.val_size,
            test_size: t.test_size,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            kind: match o.kind {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::Adam,
            },
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer_config(),
            steps: self.training.steps,
            batch_size: self.training.batch_size,
            seed: self.seed,
            freeze: Default::default(),
        }
    }
}
