//! Procedural shape scenes and the generation/editing task suite built on
//! them, with exact ground truth for every edit.

mod dataset;
mod eval;
mod scene;
mod tasks;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};

pub use dataset::{make_dataset, read_dataset, DatasetSpec, Manifest, MANIFEST_FORMAT};
pub use eval::{eval_edit, palette_accuracy, psnr, EditMetrics, PSNR_CAP};
pub use scene::{diff_mask, Anchor, Color, Direction, Object, SceneSpec, Shape, PALETTE};
pub use tasks::{gen_sample, parse_instruction, render_prompt, Instruction, SampleSegment, TaskSample, Verb};

/// Word list of the instruction language; ids are indices.
pub const VOCAB: [&str; 33] = [
    "<pad>", "recolor", "remove", "add", "propagate", "to", "in", "from", "moving", "black", "white", "red", "green",
    "blue", "yellow", "cyan", "magenta", "square", "circle", "triangle", "center", "left", "right", "top", "bottom",
    "up", "down", "image", "video", "a", "the", "with", "edit",
];

pub fn word_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

/// Space-separated words to ids.
pub fn encode_words(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| word_id(w).ok_or_else(|| input_err!("word {w:?} is not in the vocabulary")))
        .collect()
}

pub fn decode_words(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| VOCAB.get(i).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    T2i,
    T2v,
    ImgRecolor,
    ImgRemove,
    ImgAdd,
    VidRecolor,
    VidRemove,
    VidAdd,
    Propagate,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::T2i,
        Task::T2v,
        Task::ImgRecolor,
        Task::ImgRemove,
        Task::ImgAdd,
        Task::VidRecolor,
        Task::VidRemove,
        Task::VidAdd,
        Task::Propagate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::T2i => "t2i",
            Task::T2v => "t2v",
            Task::ImgRecolor => "img_recolor",
            Task::ImgRemove => "img_remove",
            Task::ImgAdd => "img_add",
            Task::VidRecolor => "vid_recolor",
            Task::VidRemove => "vid_remove",
            Task::VidAdd => "vid_add",
            Task::Propagate => "propagate",
        }
    }

    pub fn index(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn is_video(self) -> bool {
        matches!(self, Task::T2v | Task::VidRecolor | Task::VidRemove | Task::VidAdd | Task::Propagate)
    }

    pub fn is_generation(self) -> bool {
        matches!(self, Task::T2i | Task::T2v)
    }

    /// Editing tasks on videos, including propagation.
    pub fn is_video_edit(self) -> bool {
        self.is_video() && !self.is_generation()
    }

    pub fn is_image_edit(self) -> bool {
        matches!(self, Task::ImgRecolor | Task::ImgRemove | Task::ImgAdd)
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| input_err!("unknown task {s:?}"))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Canvas geometry of generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub video_frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            video_frames: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 12 || self.width < 12 {
            return Err(config_err!("canvas must be at least 12x12, got {}x{}", self.height, self.width));
        }
        if self.video_frames < 2 {
            return Err(config_err!("videos need at least 2 frames, got {}", self.video_frames));
        }
        Ok(())
    }

    pub fn frames(&self, task: Task) -> usize {
        if task.is_video() {
            self.video_frames
        } else {
            1
        }
    }

    fn short(&self) -> usize {
        self.height.min(self.width)
    }

    /// Object side length range for edit scenes.
    pub fn size_range(&self) -> (usize, usize) {
        let s = self.short();
        (s / 4, s / 4 + s / 8)
    }

    /// Object size in generation prompts.
    pub fn prompt_size(&self) -> usize {
        3 * self.short() / 8
    }

    /// Pixels per frame for generated motion.
    pub fn prompt_speed(&self) -> i32 {
        (self.short() / 16).max(1) as i32
    }
}

/// Pixels in `[0, 1]` to the codec's `[-1, 1]` range.
pub fn to_signed(px: &ndarray::Array4<f32>) -> ndarray::Array4<f32> {
    px.mapv(|v| 2.0 * v - 1.0)
}

/// Inverse of `to_signed`, clamped to the displayable range.
pub fn from_signed(px: &ndarray::Array4<f32>) -> ndarray::Array4<f32> {
    px.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_round_trip() {
        let ids = encode_words("recolor square in").unwrap();
        assert_eq!(decode_words(&ids), "recolor square in");
        assert!(encode_words("paint it").is_err());
    }

    #[test]
    fn task_names_parse() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("style".parse::<Task>().is_err());
    }
}
