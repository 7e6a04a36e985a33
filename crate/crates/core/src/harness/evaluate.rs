use std::collections::BTreeMap;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::sample_request;
use crate::backbone::{Backbone, Params};
use crate::codec::Codec;
use crate::error::{input_err, Result};
use crate::flow::{sample_batch, ModelField, SamplerConfig};
use crate::synth::{eval_edit, from_signed, palette_accuracy, Task, TaskSample};

const EVAL_SALT: u64 = 0xe7a1_5eed;

/// Aggregates for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: Task,
    pub count: usize,
    pub edit_psnr: f64,
    pub preserve_psnr: f64,
    pub exact_preserve_rate: f64,
    /// Mean palette accuracy inside the edit mask.
    pub edit_accuracy: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<TaskRow>,
}

impl EvalReport {
    pub fn row(&self, task: Task) -> Option<&TaskRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    /// Count-weighted mean of `f` over rows whose task passes `keep`.
    pub fn mean_over(&self, keep: impl Fn(Task) -> bool, f: impl Fn(&TaskRow) -> f64) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for r in self.rows.iter().filter(|r| keep(r.task)) {
            s += f(r) * r.count as f64;
            n += r.count;
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("| task | n | edit PSNR | preserve PSNR | exact preserve | edit acc | success |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.3} | {:.3} | {:.3} |\n",
                r.task, r.count, r.edit_psnr, r.preserve_psnr, r.exact_preserve_rate, r.edit_accuracy, r.success_rate
            ));
        }
        out
    }
}

/// First `max_per_task` samples of each task in `keep`, in split order.
pub fn select<'a>(samples: &'a [TaskSample], max_per_task: usize, keep: impl Fn(Task) -> bool) -> Vec<&'a TaskSample> {
    let mut seen: BTreeMap<Task, usize> = BTreeMap::new();
    samples
        .iter()
        .filter(|s| keep(s.task))
        .filter(|s| {
            let n = seen.entry(s.task).or_default();
            *n += 1;
            max_per_task == 0 || *n <= max_per_task
        })
        .collect()
}

/// Generate the target of every sample with the model. Batch `b` uses its
/// own generator stream, so results do not depend on scheduling.
pub fn predict(
    cfg: &RunConfig,
    params: &Params<f32>,
    sampler: &SamplerConfig,
    samples: &[&TaskSample],
) -> Result<Vec<Array4<f32>>> {
    let codec = Codec::new(cfg.codec)?;
    let backbone = Backbone::new(cfg.model_config()?)?;
    let field = ModelField {
        backbone: &backbone,
        params,
        layout: cfg.layout(),
    };
    let mut out = Vec::with_capacity(samples.len());
    for (b, chunk) in samples.chunks(cfg.eval.batch).enumerate() {
        let requests = chunk
            .iter()
            .map(|s| sample_request(s, &codec, cfg.ablation.interleave))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SALT);
        rng.set_stream(b as u64);
        for tokens in sample_batch(&field, &requests, sampler, &mut rng)? {
            out.push(from_signed(&codec.detokenize(&tokens)?));
        }
    }
    Ok(out)
}

/// Score predictions against the samples they were made for.
pub fn score(cfg: &RunConfig, samples: &[&TaskSample], preds: &[Array4<f32>]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(input_err!("nothing to evaluate: the split selection is empty"));
    }
    let mut acc: BTreeMap<Task, Vec<(crate::synth::EditMetrics, f64)>> = BTreeMap::new();
    for (s, p) in samples.iter().zip(preds) {
        let m = eval_edit(p, &s.target, &s.edit_mask)?;
        let a = palette_accuracy(p, &s.target, &s.edit_mask)?;
        acc.entry(s.task).or_default().push((m, a));
    }
    let rows = acc
        .into_iter()
        .map(|(task, v)| {
            let n = v.len() as f64;
            TaskRow {
                task,
                count: v.len(),
                edit_psnr: v.iter().map(|(m, _)| m.edit_psnr).sum::<f64>() / n,
                preserve_psnr: v.iter().map(|(m, _)| m.preserve_psnr).sum::<f64>() / n,
                exact_preserve_rate: v.iter().filter(|(m, _)| m.preserve_exact).count() as f64 / n,
                edit_accuracy: v.iter().map(|(_, a)| a).sum::<f64>() / n,
                success_rate: v.iter().filter(|(_, a)| *a >= cfg.eval.success_accuracy).count() as f64 / n,
            }
        })
        .collect();
    Ok(EvalReport { rows })
}

pub fn evaluate(cfg: &RunConfig, params: &Params<f32>, samples: &[&TaskSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(input_err!("nothing to evaluate: the split selection is empty"));
    }
    let preds = predict(cfg, params, &cfg.sampler, samples)?;
    score(cfg, samples, &preds)
}

/// Baseline that returns the unedited source clip.
pub fn evaluate_copy(cfg: &RunConfig, samples: &[&TaskSample]) -> Result<EvalReport> {
    let preds: Vec<Array4<f32>> = samples.iter().map(|s| s.source.clone()).collect();
    score(cfg, samples, &preds)
}
