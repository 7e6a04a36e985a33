//! Central finite-difference check of every parameter block's analytic
//! gradient, plus random document fixtures shared with the test suites.

use ndarray::{s, Array2, Zip};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::backbone::{Backbone, ModelConfig, Params};
use crate::codec::VisionTokens;
use crate::error::Result;
use crate::layout::{assemble, LayoutConfig, Role, Segment};
use crate::packing::{Document, PackedBatch};

/// Model used by the gradient check: 2 layers, head_dim 16.
pub fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig::sized(32, 2, 2, 12).expect("valid");
    cfg.vocab_size = 16;
    cfg.c_text = 8;
    cfg.time_freq_dim = 8;
    cfg.seed = 11;
    cfg
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// A random sequence with text and vision segments, exactly one vision
/// target, a random timestep and a random velocity target.
pub fn random_document(rng: &mut ChaCha8Rng, id: usize, cfg: &ModelConfig, layout: &LayoutConfig) -> Result<Document> {
    let n_segments = rng.random_range(1..=4);
    let mut segments = Vec::with_capacity(n_segments + 1);
    for _ in 0..n_segments {
        if rng.random_bool(0.5) {
            let len = rng.random_range(1..=4);
            segments.push(Segment::text((0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()));
        } else {
            segments.push(random_vision(rng, cfg, Role::Context)?);
        }
    }
    let target = random_vision(rng, cfg, Role::Target)?;
    let at = rng.random_range(0..=segments.len());
    segments.insert(at, target);
    let seq = assemble(segments, layout)?;
    let rows = seq.target_tokens().map_or(0, VisionTokens::len);
    let mut doc = Document::new(id, seq, rng.random_range(0.0..=1.0));
    doc.velocity = Some(gaussian_matrix(rng, rows, cfg.c_vision));
    Ok(doc)
}

fn random_vision(rng: &mut ChaCha8Rng, cfg: &ModelConfig, role: Role) -> Result<Segment> {
    let grid = (
        *[1usize, 1, 2].choose(rng).expect("non-empty"),
        rng.random_range(1..=2),
        rng.random_range(1..=2),
    );
    let n = grid.0 * grid.1 * grid.2;
    let tokens = VisionTokens::new(gaussian_matrix(rng, n, cfg.c_vision), grid)?;
    Ok(Segment::vision(tokens, role))
}

/// Initialised parameters with every block perturbed so no gradient is
/// trivially zero.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64, std: f64) -> Result<Params<f64>> {
    let mut p = Params::<f64>::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("positive std");
    for (_, mut b) in p.blocks_mut() {
        b.mapv_inplace(|v| v + dist.sample(&mut rng));
    }
    Ok(p)
}

/// Loss recomputed from the forward prediction alone; independent of the
/// backward pass.
pub fn reference_loss(bb: &Backbone, params: &Params<f64>, batch: &PackedBatch) -> Result<f64> {
    let out = bb.predict(params, batch)?;
    let n = batch.docs.len() as f64;
    let mut total = 0.0;
    for (d, doc) in batch.docs.iter().enumerate() {
        let span = batch.target_span(d).expect("fixture documents have targets");
        let vel = doc.velocity.as_ref().expect("fixture documents have velocities");
        let pred = out.slice(s![span.start..span.end, ..]);
        let mut sq = 0.0;
        Zip::from(&pred).and(vel).for_each(|&y, &t| sq += (y - t as f64).powi(2));
        total += sq / (vel.len() as f64) / n;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// checked entries.
    pub rel_err: f64,
    pub entries: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub loss: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> &BlockCheck {
        self.blocks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("at least one block")
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.rel_err < tol)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Entries sampled per block; blocks smaller than this are checked fully.
    pub entries_per_block: usize,
    pub docs: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-3,
            entries_per_block: 24,
            docs: 3,
        }
    }
}

pub fn run(cfg: &ModelConfig, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let bb = Backbone::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let layout = LayoutConfig::default();
    let docs = (0..opts.docs)
        .map(|i| random_document(&mut rng, i, cfg, &layout))
        .collect::<Result<Vec<_>>>()?;
    let batch = PackedBatch::from_docs(docs, usize::MAX)?;
    let mut params = perturbed_params(cfg, opts.seed ^ 0x9e37, 0.1)?;
    let analytic = bb.loss_and_grad(&params, &batch)?;

    // entries that can carry gradient in the lookup table
    let mut used_ids: Vec<usize> = batch
        .docs
        .iter()
        .flat_map(|d| d.seq.segments.iter())
        .filter_map(|s| match &s.payload {
            crate::layout::Payload::Text(ids) => Some(ids.clone()),
            _ => None,
        })
        .flatten()
        .collect();
    used_ids.sort_unstable();
    used_ids.dedup();

    let grads: Vec<(String, Vec<f64>)> = analytic
        .grads
        .blocks()
        .into_iter()
        .map(|(n, b)| (n, b.iter().copied().collect()))
        .collect();
    let mut report = Vec::with_capacity(grads.len());
    for (bi, (name, g)) in grads.iter().enumerate() {
        let candidates: Vec<usize> = if name == "proj.text_embed" {
            let width = cfg.c_text;
            used_ids.iter().flat_map(|&id| id * width..(id + 1) * width).collect()
        } else {
            (0..g.len()).collect()
        };
        let picks: Vec<usize> = if candidates.len() <= opts.entries_per_block {
            candidates
        } else {
            candidates.choose_multiple(&mut rng, opts.entries_per_block).copied().collect()
        };
        let mut num = Vec::with_capacity(picks.len());
        for &e in &picks {
            let orig = flat_get(&mut params, bi, e);
            flat_set(&mut params, bi, e, orig + opts.step);
            let plus = reference_loss(&bb, &params, &batch)?;
            flat_set(&mut params, bi, e, orig - opts.step);
            let minus = reference_loss(&bb, &params, &batch)?;
            flat_set(&mut params, bi, e, orig);
            num.push((plus - minus) / (2.0 * opts.step));
        }
        let ana: Vec<f64> = picks.iter().map(|&e| g[e]).collect();
        report.push(BlockCheck {
            name: name.clone(),
            rel_err: relative_error(&ana, &num),
            entries: picks.len(),
        });
    }
    Ok(GradcheckReport {
        loss: analytic.loss,
        blocks: report,
    })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

fn flat_get(p: &mut Params<f64>, block: usize, idx: usize) -> f64 {
    let mut blocks = p.blocks_mut();
    let b = &mut blocks[block].1;
    *b.iter_mut().nth(idx).expect("index inside block")
}

fn flat_set(p: &mut Params<f64>, block: usize, idx: usize, v: f64) {
    let mut blocks = p.blocks_mut();
    let b = &mut blocks[block].1;
    *b.iter_mut().nth(idx).expect("index inside block") = v;
}
