use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::backbone::{Backbone, Params};
use crate::codec::Codec;
use crate::error::{input_err, Error, Result};
use crate::flow::{training_step, SampleRequest, StepContext, TrainExample};
use crate::layout::{deinterleave, Role, Segment};
use crate::optim::AdamW;
use crate::synth::{read_dataset, to_signed, SampleSegment, Task, TaskSample};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Context segments of a sample, tokenized, in the order the ablation
/// switches ask for.
pub fn context_segments(sample: &TaskSample, codec: &Codec, interleave: bool) -> Result<Vec<Segment>> {
    let segs = sample
        .context
        .iter()
        .map(|s| match s {
            SampleSegment::Text(ids) => Ok(Segment::text(ids.clone())),
            SampleSegment::Pixels(px) => Ok(Segment::vision(codec.tokenize(&to_signed(px))?, Role::Context)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(if interleave { segs } else { deinterleave(segs) })
}

/// Context followed by the clean target.
pub fn train_example(sample: &TaskSample, codec: &Codec, interleave: bool) -> Result<TrainExample> {
    let mut segments = context_segments(sample, codec, interleave)?;
    segments.push(Segment::vision(codec.tokenize(&to_signed(&sample.target))?, Role::Context));
    let target = Some(segments.len() - 1);
    Ok(TrainExample { segments, target })
}

pub fn sample_request(sample: &TaskSample, codec: &Codec, interleave: bool) -> Result<SampleRequest> {
    let (t, h, w, _) = sample.target.dim();
    Ok(SampleRequest {
        context: context_segments(sample, codec, interleave)?,
        target_grid: codec.config().token_grid(t, h, w)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    /// Records of the steps run by this call, plus any kept from before a
    /// resume.
    pub log: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    /// Mean loss over the last `window` logged steps.
    pub fn tail_loss(&self, window: usize) -> f64 {
        tail_loss(&self.log, window)
    }
}

pub fn tail_loss(log: &[StepRecord], window: usize) -> f64 {
    let tail = &log[log.len().saturating_sub(window)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
}

/// Tokenized training pools, one per task the run draws from.
pub fn training_pools(cfg: &RunConfig, samples: &[TaskSample]) -> Result<BTreeMap<Task, Vec<TrainExample>>> {
    let codec = Codec::new(cfg.codec)?;
    let mut pools: BTreeMap<Task, Vec<TrainExample>> = BTreeMap::new();
    for (&task, &slots) in &cfg.data.slots {
        if slots > 0 && cfg.ablation.task_enabled(task) {
            pools.insert(task, Vec::new());
        }
    }
    for s in samples {
        if let Some(pool) = pools.get_mut(&s.task) {
            pool.push(train_example(s, &codec, cfg.ablation.interleave)?);
        }
    }
    if let Some((task, _)) = pools.iter().find(|(_, p)| p.is_empty()) {
        return Err(input_err!("training split has no {task} samples but the run draws from it"));
    }
    Ok(pools)
}

/// Examples of step `step`, drawn from the step's own generator.
fn draw_step(
    cfg: &RunConfig,
    pools: &BTreeMap<Task, Vec<TrainExample>>,
    rng: &mut ChaCha8Rng,
) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for (task, pool) in pools {
        for _ in 0..cfg.data.slots[task] {
            out.push(pool[rng.random_range(0..pool.len())].clone());
        }
    }
    out
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub struct TrainOptions {
    /// Continue from `out/checkpoint.bin` when present.
    pub resume: bool,
    /// Stop (and checkpoint) once this many updates have been applied.
    pub stop_at: Option<u64>,
}

/// Train on `data_dir/train`, writing checkpoints and the metrics log to
/// `out_dir`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (_, samples) = read_dataset(data_dir, "train")?;
    let pools = training_pools(cfg, &samples)?;
    drop(samples);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let mcfg = cfg.model_config()?;
    let backbone = Backbone::new(mcfg.clone())?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let (mut params, mut opt): (Params<f32>, AdamW<f32>) = if opts.resume && ck_path.exists() {
        let ck = Checkpoint::load_matching(&ck_path, cfg)?;
        (ck.params, ck.opt)
    } else {
        (backbone.init_params()?, AdamW::new(&mcfg))
    };

    let log_path = out_dir.join(METRICS_FILE);
    let mut log: Vec<StepRecord> = if opts.resume {
        read_log(&log_path)?.into_iter().filter(|r| r.step < opt.step).collect()
    } else {
        Vec::new()
    };
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for r in &log {
        writeln!(log_file, "{}", serde_json::to_string(r).expect("serializable")).map_err(|e| Error::io(&log_path, e))?;
    }

    let layout = cfg.layout();
    let ctx = StepContext {
        backbone: &backbone,
        sampler: &cfg.sampler,
        layout: &layout,
        optim: &cfg.optim,
        token_budget: cfg.train.token_budget,
    };
    let end = opts.stop_at.unwrap_or(cfg.optim.total_steps).min(cfg.optim.total_steps);
    let save = |params: &Params<f32>, opt: &AdamW<f32>| -> Result<()> {
        let ck = Checkpoint {
            config: cfg.clone(),
            params: params.clone(),
            opt: opt.clone(),
        };
        ck.save(&ck_path)?;
        if opt.step % cfg.train.checkpoint_every == 0 || opt.step == cfg.optim.total_steps {
            ck.save(&out_dir.join(format!("ckpt-{:06}.bin", opt.step)))?;
        }
        Ok(())
    };
    while opt.step < end {
        let step = opt.step;
        let mut rng = step_rng(cfg.seed, step);
        let examples = draw_step(cfg, &pools, &mut rng);
        let stats = training_step(&ctx, &mut params, &mut opt, &examples, &mut rng)?;
        let rec = StepRecord {
            step,
            loss: stats.loss,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
        };
        writeln!(log_file, "{}", serde_json::to_string(&rec).expect("serializable"))
            .map_err(|e| Error::io(&log_path, e))?;
        if step % 100 == 0 {
            log::info!("step {step} loss {:.4} lr {:.2e} grad {:.3}", rec.loss, rec.lr, rec.grad_norm);
        }
        log.push(rec);
        if opt.step % cfg.train.checkpoint_every == 0 && opt.step < end {
            save(&params, &opt)?;
        }
    }
    save(&params, &opt)?;
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        steps: opt.step,
        log,
        checkpoint: ck_path,
    })
}
