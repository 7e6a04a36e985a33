//! Run configuration: a TOML tree whose every key can be overridden by a
//! dotted path such as `optim.peak_lr=3e-4`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::codec::CodecConfig;
use crate::error::{config_err, Error, Result};
use crate::flow::SamplerConfig;
use crate::layout::{LayoutConfig, SeqMode};
use crate::optim::OptimConfig;
use crate::rope::RopeConfig;
use crate::synth::{SynthConfig, Task};

/// Trunk sizes; vision width and the rotary split are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub vocab_size: usize,
    pub c_text: usize,
    pub time_freq_dim: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
    #[serde(with = "crate::wide")]
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 2.0,
            vocab_size: 64,
            c_text: 64,
            time_freq_dim: 64,
            norm_eps: 1e-6,
            rope_base: 10_000.0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Samples per task in the training split.
    pub train: BTreeMap<Task, usize>,
    /// Samples per task in the held-out split.
    pub test: BTreeMap<Task, usize>,
    /// Examples drawn per task in every training step.
    pub slots: BTreeMap<Task, usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let all = |n: usize| Task::ALL.iter().map(|&t| (t, n)).collect();
        Self {
            train: all(400),
            test: all(8),
            slots: all(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Rows per packed batch.
    pub token_budget: usize,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_budget: 1024,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out samples per task; 0 evaluates the whole split.
    pub max_per_task: usize,
    /// Requests integrated together.
    pub batch: usize,
    /// Palette accuracy inside the mask for an edit to count as a success.
    pub success_accuracy: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_per_task: 0,
            batch: 16,
            success_accuracy: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSwitches {
    /// Keep text and vision in instruction order; off moves all vision
    /// after all text.
    pub interleave: bool,
    /// Rotate the sequential axis.
    pub seq_pe: bool,
    pub seq_mode: SeqMode,
    /// Text-to-image and image editing tasks.
    pub image_data: bool,
    /// Text-to-video.
    pub video_gen_data: bool,
    /// Video editing and propagation.
    pub video_edit_data: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            interleave: true,
            seq_pe: true,
            seq_mode: SeqMode::PerFrame,
            image_data: true,
            video_gen_data: true,
            video_edit_data: true,
        }
    }
}

impl AblationSwitches {
    pub fn task_enabled(&self, task: Task) -> bool {
        if task.is_video_edit() {
            self.video_edit_data
        } else if task == Task::T2v {
            self.video_gen_data
        } else {
            self.image_data
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(with = "crate::wide")]
    pub seed: u64,
    pub model: ModelSpec,
    pub codec: CodecConfig,
    pub synth: SynthConfig,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSwitches,
}

impl RunConfig {
    /// The recipe used for the reference run: 16x16 canvas, 4-frame
    /// videos, 3000 steps, two documents per editing task and one per
    /// generation task in every step.
    pub fn toy() -> Self {
        let mut cfg = Self {
            synth: SynthConfig {
                height: 16,
                width: 16,
                video_frames: 4,
            },
            ..Self::default()
        };
        cfg.optim.peak_lr = 3e-3;
        for (task, n) in cfg.data.slots.iter_mut() {
            *n = if task.is_generation() { 1 } else { 2 };
        }
        cfg
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::sized(m.hidden, m.layers, m.heads, self.codec.c_vision())?;
        cfg.mlp_ratio = m.mlp_ratio;
        cfg.vocab_size = m.vocab_size;
        cfg.c_text = m.c_text;
        cfg.time_freq_dim = m.time_freq_dim;
        cfg.norm_eps = m.norm_eps;
        cfg.seed = m.init_seed;
        cfg.rope = RopeConfig {
            base: m.rope_base,
            sequential_axis: self.ablation.seq_pe,
            ..RopeConfig::proportional(cfg.head_dim)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> LayoutConfig {
        LayoutConfig {
            seq_mode: self.ablation.seq_mode,
            pixel_stride: self.codec.pixel_stride(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.synth.validate()?;
        self.sampler.validate()?;
        self.optim.validate()?;
        self.model_config()?;
        self.codec.token_grid(self.synth.video_frames, self.synth.height, self.synth.width)?;
        if self.model.vocab_size < crate::synth::VOCAB.len() {
            return Err(config_err!(
                "model.vocab_size {} is smaller than the {}-word instruction vocabulary",
                self.model.vocab_size,
                crate::synth::VOCAB.len()
            ));
        }
        if self.train.token_budget == 0 || self.train.checkpoint_every == 0 {
            return Err(config_err!("train.token_budget and train.checkpoint_every must be >= 1"));
        }
        if self.eval.batch == 0 {
            return Err(config_err!("eval.batch must be >= 1"));
        }
        if !self.data.slots.iter().any(|(&t, &n)| n > 0 && self.ablation.task_enabled(t)) {
            return Err(config_err!("no training slots left after the data toggles"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{e}"))
    }

    /// Parse `text`, apply `key=value` overrides, validate.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: toml::Table = text.parse().map_err(|e| config_err!("{e}"))?;
        for (key, raw) in overrides {
            set_path(&mut tree, key, parse_value(raw))?;
        }
        let cfg: Self = tree.try_into().map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, or start from [`RunConfig::toy`] when `path` is
    /// `None`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => Self::toy().to_toml(),
        };
        Self::parse_with_overrides(&text, overrides)
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for p in parents {
        node = match node.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(config_err!("unknown config key {key:?}")),
        };
    }
    match node.get_mut(*last) {
        Some(slot) if !slot.is_table() => {
            *slot = value;
            Ok(())
        }
        _ => Err(config_err!("unknown config key {key:?}")),
    }
}
