//! Flow-matching objective, the training step, and the Euler sampler with
//! text-only classifier-free guidance.

use ndarray::{s, Array2, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Params};
use crate::codec::VisionTokens;
use crate::error::{config_err, contract_err, input_err, Result};
use crate::layout::{assemble, without_text, LayoutConfig, Payload, Role, Segment};
use crate::optim::{AdamW, OptimConfig};
use crate::packing::{pack, Document, PackedBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Euler steps.
    pub steps: usize,
    pub cfg_scale: f64,
    /// Probability of dropping all text from a training example.
    pub text_dropout_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 5.0,
            text_dropout_p: 0.1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("sampler needs at least one step"));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(config_err!("cfg_scale must be >= 0, got {}", self.cfg_scale));
        }
        if !(0.0..1.0).contains(&self.text_dropout_p) {
            return Err(config_err!("text_dropout_p must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Interpolant between noise `x0` and data `x1` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x0: Array2<f32>,
    pub x1: Array2<f32>,
    pub xt: Array2<f32>,
    pub vt: Array2<f32>,
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Draw `x0 ~ N(0, 1)` and build `xt = t x1 + (1 - t) x0`, `vt = x1 - x0`.
pub fn make_flow_state(x1: &Array2<f32>, rng: &mut ChaCha8Rng, t: f64) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(input_err!("timestep {t} is outside [0, 1]"));
    }
    let x0 = gaussian(rng, x1.nrows(), x1.ncols());
    Ok(flow_state_from(x0, x1.clone(), t))
}

pub fn flow_state_from(x0: Array2<f32>, x1: Array2<f32>, t: f64) -> FlowState {
    let mut xt = Array2::<f32>::zeros(x1.raw_dim());
    let mut vt = Array2::<f32>::zeros(x1.raw_dim());
    Zip::from(&mut xt).and(&mut vt).and(&x0).and(&x1).for_each(|xt, vt, &a, &b| {
        *xt = (t * b as f64 + (1.0 - t) * a as f64) as f32;
        *vt = b - a;
    });
    FlowState { t, x0, x1, xt, vt }
}

/// Clean segments of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub segments: Vec<Segment>,
    /// Segment to generate; when absent one vision segment is drawn
    /// uniformly.
    pub target: Option<usize>,
}

/// Noise the target segment, optionally drop text, and assemble.
pub fn prepare_document(
    ex: &TrainExample,
    id: usize,
    rng: &mut ChaCha8Rng,
    sampler: &SamplerConfig,
    layout: &LayoutConfig,
) -> Result<Document> {
    let vision: Vec<usize> = ex
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.modality.is_vision())
        .map(|(i, _)| i)
        .collect();
    if vision.is_empty() {
        return Err(input_err!("training example {id} has no vision segment"));
    }
    let target = match ex.target {
        Some(t) if vision.contains(&t) => t,
        Some(t) => return Err(input_err!("segment {t} of example {id} is not a vision segment")),
        None => vision[rng.random_range(0..vision.len())],
    };
    let t: f64 = rng.random_range(0.0..=1.0);
    let drop_text = rng.random_bool(sampler.text_dropout_p);
    let x1 = &ex.segments[target].vision_tokens().expect("vision target").tokens;
    let state = make_flow_state(x1, rng, t)?;

    let mut segments = Vec::with_capacity(ex.segments.len());
    for (i, seg) in ex.segments.iter().enumerate() {
        if drop_text && !seg.modality.is_vision() {
            continue;
        }
        if i == target {
            let grid = seg.grid().expect("vision target");
            segments.push(Segment {
                modality: seg.modality,
                role: Role::Target,
                payload: Payload::Vision(VisionTokens::new(state.xt.clone(), grid)?),
            });
        } else {
            let mut seg = seg.clone();
            seg.role = Role::Context;
            segments.push(seg);
        }
    }
    let seq = assemble(segments, layout)?;
    let mut doc = Document::new(id, seq, t);
    doc.velocity = Some(state.vt);
    Ok(doc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub docs: usize,
    pub batches: usize,
}

/// Everything a training step needs besides the mutable state.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub backbone: &'a Backbone,
    pub sampler: &'a SamplerConfig,
    pub layout: &'a LayoutConfig,
    pub optim: &'a OptimConfig,
    pub token_budget: usize,
}

/// One optimizer update over `examples`: every document counts equally in
/// the loss, whichever packed batch it lands in.
pub fn training_step(
    ctx: &StepContext<'_>,
    params: &mut Params<f32>,
    opt: &mut AdamW<f32>,
    examples: &[TrainExample],
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if examples.is_empty() {
        return Err(input_err!("training step needs at least one example"));
    }
    let docs = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| prepare_document(ex, i, rng, ctx.sampler, ctx.layout))
        .collect::<Result<Vec<_>>>()?;
    let n = docs.len();
    let batches = pack(docs, ctx.token_budget)?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for batch in &batches {
        let w = vec![1.0 / n as f64; batch.docs.len()];
        let out = ctx.backbone.loss_and_grad_weighted(params, batch, &w)?;
        loss += out.loss;
        grads.add_scaled(&out.grads, 1.0);
    }
    if !loss.is_finite() {
        return Err(contract_err!("non-finite training loss at step {}", opt.step));
    }
    let upd = opt.update(params, &grads, ctx.optim);
    Ok(StepStats {
        loss,
        lr: upd.lr,
        grad_norm: upd.grad_norm,
        docs: n,
        batches: batches.len(),
    })
}

/// Velocity of one noisy target segment inside a sequence.
#[derive(Debug, Clone)]
pub struct VelocityQuery {
    pub segments: Vec<Segment>,
    pub target: usize,
    pub t: f64,
}

/// Anything that predicts target velocities; the trained model or a
/// closed-form oracle.
pub trait VelocityField {
    fn c_vision(&self) -> usize;
    fn velocities(&self, queries: &[VelocityQuery]) -> Result<Vec<Array2<f32>>>;
}

/// The backbone as a velocity field; all queries of a call share one
/// packed forward pass.
pub struct ModelField<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a Params<f32>,
    pub layout: LayoutConfig,
}

impl VelocityField for ModelField<'_> {
    fn c_vision(&self) -> usize {
        self.backbone.cfg.c_vision
    }

    fn velocities(&self, queries: &[VelocityQuery]) -> Result<Vec<Array2<f32>>> {
        let docs = queries
            .iter()
            .enumerate()
            .map(|(i, q)| Ok(Document::new(i, assemble(q.segments.clone(), &self.layout)?, q.t)))
            .collect::<Result<Vec<_>>>()?;
        let batch = PackedBatch::from_docs(docs, usize::MAX)?;
        let out = self.backbone.predict(self.params, &batch)?;
        (0..queries.len())
            .map(|d| {
                let span = batch.target_span(d).ok_or_else(|| contract_err!("query {d} has no target"))?;
                Ok(out.slice(s![span.start..span.end, ..]).to_owned())
            })
            .collect()
    }
}

/// Context segments plus the shape of the vision segment to generate,
/// which is appended after the context.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub context: Vec<Segment>,
    pub target_grid: (usize, usize, usize),
}

fn with_target(context: &[Segment], x: &Array2<f32>, grid: (usize, usize, usize)) -> Result<(Vec<Segment>, usize)> {
    let mut segs: Vec<Segment> = context
        .iter()
        .cloned()
        .map(|mut s| {
            s.role = Role::Context;
            s
        })
        .collect();
    segs.push(Segment::vision(VisionTokens::new(x.clone(), grid)?, Role::Target));
    let target = segs.len() - 1;
    Ok((segs, target))
}

/// Euler integration from `t = 0` to `t = 1` on the grid `k / N`.
///
/// When `cfg_scale != 1` and the context has text, the velocity is
/// `v_uncond + scale * (v_cond - v_uncond)` where the unconditional branch
/// drops all text and keeps the vision context.
pub fn sample_batch<V: VelocityField>(
    field: &V,
    requests: &[SampleRequest],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<VisionTokens>> {
    cfg.validate()?;
    let cv = field.c_vision();
    let mut xs: Vec<Array2<f32>> = Vec::with_capacity(requests.len());
    for r in requests {
        let (t, h, w) = r.target_grid;
        if t * h * w == 0 {
            return Err(input_err!("target grid {:?} is empty", r.target_grid));
        }
        xs.push(gaussian(rng, t * h * w, cv));
    }
    let guided: Vec<bool> = requests
        .iter()
        .map(|r| cfg.cfg_scale != 1.0 && r.context.iter().any(|s| !s.modality.is_vision()))
        .collect();
    let dt = 1.0 / cfg.steps as f64;
    let scale = cfg.cfg_scale as f32;
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let mut queries = Vec::with_capacity(2 * requests.len());
        for (r, x) in requests.iter().zip(&xs) {
            let (segs, target) = with_target(&r.context, x, r.target_grid)?;
            queries.push(VelocityQuery { segments: segs, target, t });
        }
        for (i, r) in requests.iter().enumerate() {
            if guided[i] {
                let ctx = without_text(&r.context);
                let (segs, target) = with_target(&ctx, &xs[i], r.target_grid)?;
                queries.push(VelocityQuery { segments: segs, target, t });
            }
        }
        let vels = field.velocities(&queries)?;
        let mut uncond = vels[requests.len()..].iter();
        for (i, x) in xs.iter_mut().enumerate() {
            let vc = &vels[i];
            if guided[i] {
                let vu = uncond.next().expect("one unconditional query per guided request");
                Zip::from(x).and(vc).and(vu).for_each(|x, &c, &u| {
                    *x += (u + scale * (c - u)) * dt as f32;
                });
            } else {
                Zip::from(x).and(vc).for_each(|x, &c| *x += c * dt as f32);
            }
        }
    }
    requests
        .iter()
        .zip(xs)
        .map(|(r, x)| VisionTokens::new(x, r.target_grid))
        .collect()
}

pub fn sample<V: VelocityField>(
    field: &V,
    request: &SampleRequest,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<VisionTokens> {
    Ok(sample_batch(field, std::slice::from_ref(request), cfg, rng)?.remove(0))
}
