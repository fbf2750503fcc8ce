//! Synthetic multi-task sequence labelling data.
//!
//! A sequence is a run of segments. Each segment draws a latent `z ~ N(0, I_k)`
//! and emits one or more frames `G_n z + noise` followed by one or more
//! silence frames `s + noise`, where `G_n` is the task's private projection and
//! `s` a silence pattern common to all tasks. The segment's label is the
//! task's rule applied to `z`:
//!
//! - linear: `argmax_v (A_n z)_v`
//! - xor: `(argmax_v (A_n z)_v + argmax_v (B_n z)_v) mod V`, which for `V = 2`
//!   is the exclusive-or of two half-plane tests
//!
//! Each task matrix is `sqrt(1 - s^2) C + s P` with `C` drawn once for all
//! tasks and `P` private to the task, so the spread `s` moves the task set
//! from identical (`s = 0`) to independent (`s = 1`).
//!
//! Because every segment ends in silence, a sequence with `S` labels has at
//! least `2S` frames and is always CTC-feasible.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hra::TaskId;
use crate::params::fnv1a64;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const STREAM_SILENCE: u64 = 11;
const STREAM_RULE: u64 = 12;
const STREAM_DATA: u64 = 13;
const STREAM_COMMON: u64 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleFamily {
    Linear,
    Xor,
    /// Even task ids linear, odd ids xor.
    Mixed,
}

impl core::str::FromStr for RuleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(RuleFamily::Linear),
            "xor" => Ok(RuleFamily::Xor),
            "mixed" => Ok(RuleFamily::Mixed),
            other => Err(Error::Config(format!("unknown rule family `{other}`"))),
        }
    }
}

impl RuleFamily {
    pub fn name(self) -> &'static str {
        match self {
            RuleFamily::Linear => "linear",
            RuleFamily::Xor => "xor",
            RuleFamily::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    /// Number of non-blank labels.
    pub vocab: usize,
    pub latent_dim: usize,
    pub family: RuleFamily,
    /// Inclusive range of segments (labels) per sequence.
    pub segments: (usize, usize),
    /// Inclusive range of symbol frames per segment.
    pub symbol_frames: (usize, usize),
    /// Inclusive range of silence frames after each segment.
    pub silence_frames: (usize, usize),
    pub noise: f64,
    /// How far tasks depart from the common projection and rule, in `[0, 1]`.
    pub task_spread: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            input_dim: 6,
            vocab: 2,
            latent_dim: 3,
            family: RuleFamily::Linear,
            segments: (1, 3),
            symbol_frames: (1, 2),
            silence_frames: (1, 2),
            noise: 0.05,
            task_spread: 1.0,
            train_size: 32,
            val_size: 16,
            test_size: 16,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if self.input_dim < 1 || self.vocab < 1 || self.latent_dim < 1 {
            return Err(Error::Config("data dims must be >= 1".into()));
        }
        if !range_ok(self.segments) || !range_ok(self.symbol_frames) || !range_ok(self.silence_frames) {
            return Err(Error::Config("data ranges must satisfy 1 <= lo <= hi".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.task_spread) {
            return Err(Error::Config("task_spread must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Longest sequence the generator can emit.
    pub fn max_frames(&self) -> usize {
        self.segments.1 * (self.symbol_frames.1 + self.silence_frames.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[T x input_dim]`
    pub input: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelRule {
    Linear { a: Tensor },
    Xor { a: Tensor, b: Tensor },
}

impl LabelRule {
    pub fn label(&self, z: &[f64]) -> usize {
        let argmax = |m: &Tensor| {
            let mut best = (0, f64::NEG_INFINITY);
            for v in 0..m.rows() {
                let s: f64 = m.row(v).iter().zip(z).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (v, s);
                }
            }
            best.0
        };
        match self {
            LabelRule::Linear { a } => argmax(a),
            LabelRule::Xor { a, b } => (argmax(a) + argmax(b)) % a.rows(),
        }
    }

    pub fn family(&self) -> RuleFamily {
        match self {
            LabelRule::Linear { .. } => RuleFamily::Linear,
            LabelRule::Xor { .. } => RuleFamily::Xor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub id: TaskId,
    pub rule: LabelRule,
    /// `G_n`, `[input_dim x latent_dim]`.
    pub projection: Tensor,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn fingerprint(t: &Tensor) -> u64 {
    let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
    fnv1a64(&bytes)
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SplitMix64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.gaussian()).collect();
    Tensor::new(&[rows, cols], data).expect("non-empty shape")
}

fn range(rng: &mut SplitMix64, (lo, hi): (usize, usize)) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Tasks `first..first + n`, each a deterministic function of `(seed, id)`
/// and `cfg`. Generating a task never depends on which other tasks exist.
pub fn make_synthetic_tasks_from(
    seed: u64,
    first: u32,
    n: usize,
    cfg: &SyntheticConfig,
) -> Result<Vec<SyntheticTask>> {
    cfg.validate()?;
    if n < 1 {
        return Err(Error::Config("task count must be >= 1".into()));
    }
    let mut srng = SplitMix64::derive(seed, &[STREAM_SILENCE]);
    let silence: Vec<f64> = (0..cfg.input_dim).map(|_| srng.gaussian()).collect();
    let mut crng = SplitMix64::derive(seed, &[STREAM_COMMON]);
    let k = cfg.latent_dim;
    let common = Common {
        projection: gaussian_matrix(cfg.input_dim, k, 1.0 / libm::sqrt(k as f64), &mut crng),
        a: gaussian_matrix(cfg.vocab, k, 1.0, &mut crng),
        b: gaussian_matrix(cfg.vocab, k, 1.0, &mut crng),
    };
    (first..first + n as u32)
        .map(|id| make_task(seed, TaskId(id), cfg, &silence, &common))
        .collect()
}

/// `n` tasks with ids `0..n`.
pub fn make_synthetic_tasks(seed: u64, n: usize, cfg: &SyntheticConfig) -> Result<Vec<SyntheticTask>> {
    make_synthetic_tasks_from(seed, 0, n, cfg)
}

struct Common {
    projection: Tensor,
    a: Tensor,
    b: Tensor,
}

fn make_task(seed: u64, id: TaskId, cfg: &SyntheticConfig, silence: &[f64], common: &Common) -> Result<SyntheticTask> {
    let mut rng = SplitMix64::derive(seed, &[STREAM_RULE, id.0 as u64]);
    let k = cfg.latent_dim;
    let s = cfg.task_spread;
    let c = libm::sqrt(1.0 - s * s);
    let mix = |shared: &Tensor, private: Tensor| {
        let data = shared
            .data()
            .iter()
            .zip(private.data())
            .map(|(x, y)| c * x + s * y)
            .collect();
        Tensor::new(shared.shape(), data).expect("same shape")
    };
    let projection = mix(
        &common.projection,
        gaussian_matrix(cfg.input_dim, k, 1.0 / libm::sqrt(k as f64), &mut rng),
    );
    let family = match cfg.family {
        RuleFamily::Mixed if id.0 % 2 == 0 => RuleFamily::Linear,
        RuleFamily::Mixed => RuleFamily::Xor,
        f => f,
    };
    let rule = match family {
        RuleFamily::Xor => LabelRule::Xor {
            a: mix(&common.a, gaussian_matrix(cfg.vocab, k, 1.0, &mut rng)),
            b: mix(&common.b, gaussian_matrix(cfg.vocab, k, 1.0, &mut rng)),
        },
        _ => LabelRule::Linear {
            a: mix(&common.a, gaussian_matrix(cfg.vocab, k, 1.0, &mut rng)),
        },
    };

    let mut drng = SplitMix64::derive(seed, &[STREAM_DATA, id.0 as u64]);
    let mut seen = BTreeSet::new();
    let mut split = |size: usize| -> Vec<Example> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let ex = sample(&mut drng, cfg, &projection, &rule, silence);
            // splits are disjoint by construction: a repeated sequence is redrawn
            let key = fingerprint(&ex.input);
            if seen.insert(key) {
                out.push(ex);
            }
        }
        out
    };
    let train = split(cfg.train_size);
    let val = split(cfg.val_size);
    let test = split(cfg.test_size);
    Ok(SyntheticTask {
        id,
        rule,
        projection,
        train,
        val,
        test,
    })
}

fn sample(
    rng: &mut SplitMix64,
    cfg: &SyntheticConfig,
    g: &Tensor,
    rule: &LabelRule,
    silence: &[f64],
) -> Example {
    let d = cfg.input_dim;
    let segments = range(rng, cfg.segments);
    let mut frames: Vec<f64> = Vec::new();
    let mut labels = Vec::with_capacity(segments);
    for _ in 0..segments {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.gaussian()).collect();
        labels.push(rule.label(&z));
        let clean: Vec<f64> = (0..d)
            .map(|i| g.row(i).iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect();
        for _ in 0..range(rng, cfg.symbol_frames) {
            frames.extend(clean.iter().map(|c| c + cfg.noise * rng.gaussian()));
        }
        for _ in 0..range(rng, cfg.silence_frames) {
            frames.extend(silence.iter().map(|s| s + cfg.noise * rng.gaussian()));
        }
    }
    let t = frames.len() / d;
    Example {
        input: Tensor::new(&[t, d], frames).expect("at least one frame"),
        labels,
    }
}
