use ndarray::{s, Array3, Array4};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scene::{diff_mask, Anchor, Color, Direction, Object, SceneSpec, Shape};
use super::{encode_words, SynthConfig, Task, VOCAB};
use crate::error::{input_err, Result};

/// A context piece before tokenization.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSegment {
    Text(Vec<usize>),
    /// `(frames, height, width, 3)` in `[0, 1]`.
    Pixels(Array4<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub task: Task,
    /// All text ids of the context, in order.
    pub instruction: Vec<usize>,
    pub context: Vec<SampleSegment>,
    /// Ground truth for the segment generated after the context.
    pub target: Array4<f32>,
    /// The clip the edit applies to; a blank canvas for generation tasks.
    pub source: Array4<f32>,
    /// `(frames, height, width)`; true where target and source differ.
    pub edit_mask: Array3<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Generate,
    Recolor,
    Remove,
    Add,
    Propagate,
}

/// Attributes recovered from instruction ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub verb: Verb,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
    pub anchor: Option<Anchor>,
    pub direction: Option<Direction>,
}

pub fn parse_instruction(ids: &[usize]) -> Result<Instruction> {
    let words: Vec<&str> = ids
        .iter()
        .map(|&i| VOCAB.get(i).copied().ok_or_else(|| input_err!("token id {i} is outside the vocabulary")))
        .collect::<Result<_>>()?;
    let verb = match words.first() {
        Some(&"recolor") => Verb::Recolor,
        Some(&"remove") => Verb::Remove,
        Some(&"add") => Verb::Add,
        Some(&"propagate") => Verb::Propagate,
        Some(_) => Verb::Generate,
        None => return Err(input_err!("empty instruction")),
    };
    let mut out = Instruction {
        verb,
        color: None,
        shape: None,
        anchor: None,
        direction: None,
    };
    let mut moving = false;
    for w in words {
        if w == "moving" {
            moving = true;
            continue;
        }
        if let Some(c) = Color::ALL.into_iter().find(|c| c.word() == w) {
            out.color = Some(c);
        } else if let Some(sh) = Shape::ALL.into_iter().find(|x| x.word() == w) {
            out.shape = Some(sh);
        } else if let (true, Some(d)) = (moving, Direction::ALL.into_iter().find(|d| d.word() == w)) {
            out.direction = Some(d);
        } else if let Some(a) = Anchor::ALL.into_iter().find(|a| a.word() == w) {
            out.anchor = Some(a);
        }
    }
    Ok(out)
}

/// Scene described by a generation prompt, e.g. `red square left` or
/// `blue circle moving up`.
pub fn render_prompt(instr: &Instruction, cfg: &SynthConfig) -> Result<SceneSpec> {
    let (Some(color), Some(shape)) = (instr.color, instr.shape) else {
        return Err(input_err!("a generation prompt needs a color and a shape"));
    };
    if instr.verb != Verb::Generate {
        return Err(input_err!("only generation prompts can be rendered from text alone"));
    }
    if color == Color::Black {
        return Err(input_err!("black objects are invisible on the prompt background"));
    }
    let size = cfg.prompt_size();
    let (frames, origin, velocity) = match instr.direction {
        None => {
            let anchor = instr.anchor.unwrap_or(Anchor::Center);
            (1, anchor.origin(size, cfg.height, cfg.width), (0, 0))
        }
        Some(d) => {
            let (uy, ux) = d.unit();
            let speed = cfg.prompt_speed();
            let back = speed * (cfg.video_frames as i32 - 1) / 2;
            let (cy, cx) = Anchor::Center.origin(size, cfg.height, cfg.width);
            (cfg.video_frames, (cy - uy * back, cx - ux * back), (uy * speed, ux * speed))
        }
    };
    let obj = Object {
        shape,
        color,
        size,
        origin,
        velocity,
    };
    if !obj.inside(frames, cfg.height, cfg.width) {
        return Err(input_err!("prompt object leaves the {}x{} canvas", cfg.height, cfg.width));
    }
    Ok(SceneSpec {
        height: cfg.height,
        width: cfg.width,
        frames,
        background: Color::Black,
        objects: vec![obj],
    })
}

fn text(words: &str) -> SampleSegment {
    SampleSegment::Text(encode_words(words).expect("template words are in the vocabulary"))
}

fn blank(scene: &SceneSpec) -> SceneSpec {
    SceneSpec {
        objects: Vec::new(),
        ..scene.clone()
    }
}

const MAX_ATTEMPTS: usize = 10_000;

/// Random scene with `n` objects of distinct shapes and colors, all inside
/// the canvas and pairwise separated at every frame.
fn random_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, frames: usize, n: usize, palette: &[Color]) -> SceneSpec {
    let background = *[Color::Black, Color::White].choose(rng).expect("non-empty");
    let (lo, hi) = cfg.size_range();
    let moving = frames > 1;
    let shapes: Vec<Shape> = Shape::ALL.choose_multiple(rng, n).copied().collect();
    let colors: Vec<Color> = palette
        .iter()
        .copied()
        .filter(|&c| c != background)
        .collect::<Vec<_>>()
        .choose_multiple(rng, n)
        .copied()
        .collect();
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            // crowded canvas; start over with fresh placements
            objects.clear();
            attempts = 0;
        }
        let i = objects.len();
        let size = rng.random_range(lo..=hi);
        let velocity = if moving {
            (rng.random_range(-1..=1), rng.random_range(-1..=1))
        } else {
            (0, 0)
        };
        let obj = Object {
            shape: shapes[i],
            color: colors[i],
            size,
            origin: (
                rng.random_range(0..=(cfg.height - size) as i32),
                rng.random_range(0..=(cfg.width - size) as i32),
            ),
            velocity,
        };
        if obj.inside(frames, cfg.height, cfg.width) && objects.iter().all(|o| o.separated(&obj, frames, 1)) {
            objects.push(obj);
        }
    }
    SceneSpec {
        height: cfg.height,
        width: cfg.width,
        frames,
        background,
        objects,
    }
}

fn unused_color(rng: &mut ChaCha8Rng, scene: &SceneSpec) -> Color {
    let free: Vec<Color> = Color::ALL
        .into_iter()
        .filter(|&c| c != scene.background && scene.objects.iter().all(|o| o.color != c))
        .collect();
    *free.choose(rng).expect("at most 3 objects leave free colors")
}

fn recolor(rng: &mut ChaCha8Rng, cfg: &SynthConfig, frames: usize) -> (SceneSpec, SceneSpec, Shape, Color) {
    let n = rng.random_range(1..=3);
    let scene = random_scene(rng, cfg, frames, n, &Color::ALL);
    let k = rng.random_range(0..n);
    let color = unused_color(rng, &scene);
    let mut edited = scene.clone();
    edited.objects[k].color = color;
    let shape = scene.objects[k].shape;
    (scene, edited, shape, color)
}

fn finish(task: Task, context: Vec<SampleSegment>, source: &SceneSpec, target: &SceneSpec) -> TaskSample {
    let source = source.render();
    let target = target.render();
    let edit_mask = diff_mask(&source, &target);
    let instruction = context
        .iter()
        .filter_map(|s| match s {
            SampleSegment::Text(ids) => Some(ids.iter().copied()),
            SampleSegment::Pixels(_) => None,
        })
        .flatten()
        .collect();
    TaskSample {
        task,
        instruction,
        context,
        target,
        source,
        edit_mask,
    }
}

/// One sample of `task`, fully determined by the generator state.
pub fn gen_sample(task: Task, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
    cfg.validate()?;
    let frames = cfg.frames(task);
    let visible: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != Color::Black).collect();
    match task {
        Task::T2i | Task::T2v => {
            let color = *visible.choose(rng).expect("non-empty");
            let shape = *Shape::ALL.choose(rng).expect("non-empty");
            let mut instr = Instruction {
                verb: Verb::Generate,
                color: Some(color),
                shape: Some(shape),
                anchor: None,
                direction: None,
            };
            let mut words = format!("{} {}", color.word(), shape.word());
            if task == Task::T2i {
                let anchor = *Anchor::ALL.choose(rng).expect("non-empty");
                if anchor != Anchor::Center {
                    instr.anchor = Some(anchor);
                    words = format!("{words} {}", anchor.word());
                }
            } else {
                let d = *Direction::ALL.choose(rng).expect("non-empty");
                instr.direction = Some(d);
                words = format!("{words} moving {}", d.word());
            }
            let scene = render_prompt(&instr, cfg)?;
            Ok(finish(task, vec![text(&words)], &blank(&scene), &scene))
        }
        Task::ImgRecolor | Task::VidRecolor => {
            let (scene, edited, shape, color) = recolor(rng, cfg, frames);
            let ctx = vec![
                text(&format!("recolor {} in", shape.word())),
                SampleSegment::Pixels(scene.render()),
                text(&format!("to {}", color.word())),
            ];
            Ok(finish(task, ctx, &scene, &edited))
        }
        Task::ImgRemove | Task::VidRemove => {
            let n = rng.random_range(1..=3);
            let scene = random_scene(rng, cfg, frames, n, &Color::ALL);
            let k = rng.random_range(0..n);
            let mut edited = scene.clone();
            let gone = edited.objects.remove(k);
            let ctx = vec![
                text(&format!("remove {} from", gone.shape.word())),
                SampleSegment::Pixels(scene.render()),
            ];
            Ok(finish(task, ctx, &scene, &edited))
        }
        Task::ImgAdd | Task::VidAdd => loop {
            let n = rng.random_range(1..=2);
            let scene = random_scene(rng, cfg, frames, n, &Color::ALL);
            let shape = **Shape::ALL
                .iter()
                .filter(|s| scene.objects.iter().all(|o| o.shape != **s))
                .collect::<Vec<_>>()
                .choose(rng)
                .expect("at most 2 objects leave a free shape");
            let color = unused_color(rng, &scene);
            let anchor = *Anchor::ALL.choose(rng).expect("non-empty");
            let (lo, hi) = cfg.size_range();
            let size = rng.random_range(lo..=hi);
            let obj = Object {
                shape,
                color,
                size,
                origin: anchor.origin(size, cfg.height, cfg.width),
                velocity: (0, 0),
            };
            if !scene.objects.iter().all(|o| o.separated(&obj, frames, 1)) {
                continue;
            }
            let mut edited = scene.clone();
            edited.objects.push(obj);
            let ctx = vec![
                text(&format!("add {} {} {} to", color.word(), shape.word(), anchor.word())),
                SampleSegment::Pixels(scene.render()),
            ];
            return Ok(finish(task, ctx, &scene, &edited));
        },
        Task::Propagate => {
            let (scene, edited, _, _) = recolor(rng, cfg, frames);
            let first = edited.render().slice(s![0..1, .., .., ..]).to_owned();
            let ctx = vec![
                text("propagate"),
                SampleSegment::Pixels(first),
                text("to"),
                SampleSegment::Pixels(scene.render()),
            ];
            Ok(finish(task, ctx, &scene, &edited))
        }
    }
}
