use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use interleave_core::codec::Codec;
use interleave_core::error::{Error, Result};
use interleave_core::flow::{sample, ModelField};
use interleave_core::gradcheck::{self, GradcheckOptions};
use interleave_core::harness::bench::bench_pack;
use interleave_core::harness::evaluate::select;
use interleave_core::harness::render::write_clip;
use interleave_core::harness::train::sample_request;
use interleave_core::harness::{
    default_out_root, evaluate, evaluate_copy, make_data, run_ablations, train, Checkpoint, RunConfig, TrainOptions,
};
use interleave_core::backbone::Backbone;
use interleave_core::layout::Segment;
use interleave_core::synth::{
    encode_words, eval_edit, from_signed, gen_sample, parse_instruction, read_dataset, render_prompt, SampleSegment,
    Task,
};

/// Interleaved text/image/video diffusion transformer toolkit.
///
/// Any config key can also be set with a flag named after its dotted path,
/// e.g. `--optim.peak_lr 3e-4` or `--data.slots.t2v=2`.
#[derive(Parser, Debug)]
#[command(name = "interleave", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run config; the built-in toy recipe when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to $INTERLEAVE_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Drop video editing and propagation from the training mix.
    #[arg(long, global = true)]
    no_video_edit: bool,
    /// `per_frame` or `per_segment`.
    #[arg(long, global = true)]
    seq_mode: Option<String>,
    /// Move every vision segment after all text.
    #[arg(long, global = true)]
    no_interleave: bool,
    /// Leave the sequential rotary axis unrotated.
    #[arg(long, global = true)]
    no_seq_pe: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test splits.
    MakeData {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many updates.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Generate from a text prompt or a freshly drawn task sample.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generation prompt such as "red square left".
        #[arg(long, conflicts_with = "task")]
        prompt: Option<String>,
        /// Task template to draw a context from.
        #[arg(long)]
        task: Option<String>,
        /// Sample index within the template's stream.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Pixel magnification of written frames.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// `copy` scores the unedited source instead of the model.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Data-mix and design ablation grids.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    BenchPack {
        #[arg(long, default_value_t = 1024)]
        budget: usize,
    },
}

/// Pull `--a.b value` and `--a.b=value` pairs out of the argument list.
fn split_dotted(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => overrides.push((k.to_string(), it.next().unwrap_or_default())),
            },
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn overrides_from(global: &Global, mut dotted: Vec<(String, String)>) -> Vec<(String, String)> {
    let mut ov = Vec::new();
    if let Some(s) = global.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    if global.no_video_edit {
        ov.push(("ablation.video_edit_data".into(), "false".into()));
    }
    if let Some(m) = &global.seq_mode {
        ov.push(("ablation.seq_mode".into(), format!("{m:?}")));
    }
    if global.no_interleave {
        ov.push(("ablation.interleave".into(), "false".into()));
    }
    if global.no_seq_pe {
        ov.push(("ablation.seq_pe".into(), "false".into()));
    }
    ov.append(&mut dotted);
    ov
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Config embedded in a checkpoint, with command-line overrides on top.
fn checkpoint_config(ck: &Checkpoint, overrides: &[(String, String)]) -> Result<RunConfig> {
    RunConfig::parse_with_overrides(&ck.config.to_toml(), overrides)
}

fn run(cli: Cli, dotted: Vec<(String, String)>) -> Result<ExitCode> {
    let out = cli.global.out.clone().unwrap_or_else(default_out_root);
    let overrides = overrides_from(&cli.global, dotted);
    let load_cfg = || RunConfig::load(cli.global.config.as_deref(), &overrides);
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| out.join("data"));
    match &cli.cmd {
        Command::MakeData { data } => {
            let cfg = load_cfg()?;
            let dir = data_dir(data);
            let (tr, te) = make_data(&cfg, &dir)?;
            println!("wrote {} train and {} test samples to {}", tr.samples, te.samples, dir.display());
        }
        Command::Train { data, resume, stop_at } => {
            let cfg = load_cfg()?;
            let run_dir = out.join("train");
            let outcome = train(
                &cfg,
                &data_dir(data),
                &run_dir,
                &TrainOptions {
                    resume: *resume,
                    stop_at: *stop_at,
                },
            )?;
            println!(
                "{} steps, mean loss of last 100 steps {:.5}, checkpoint {}",
                outcome.steps,
                outcome.tail_loss(100),
                outcome.checkpoint.display()
            );
        }
        Command::Sample {
            checkpoint,
            prompt,
            task,
            index,
            scale,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(&ck, &overrides)?;
            let codec = Codec::new(cfg.codec)?;
            let dir = out.join("samples");
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (stem, request, truth) = match (prompt, task) {
                (Some(p), _) => {
                    let ids = encode_words(p)?;
                    let scene = render_prompt(&parse_instruction(&ids)?, &cfg.synth)?;
                    let (t, h, w) = (scene.frames, scene.height, scene.width);
                    let req = interleave_core::flow::SampleRequest {
                        context: vec![Segment::text(ids)],
                        target_grid: codec.config().token_grid(t, h, w)?,
                    };
                    let truth = scene.render();
                    let mask = ndarray::Array3::from_elem((t, h, w), true);
                    (p.replace(' ', "_"), req, (truth, mask))
                }
                (None, Some(name)) => {
                    let task: Task = name.parse()?;
                    let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a3e);
                    srng.set_stream(*index as u64);
                    let s = gen_sample(task, &cfg.synth, &mut srng)?;
                    for (i, seg) in s.context.iter().enumerate() {
                        if let SampleSegment::Pixels(px) = seg {
                            write_clip(&dir, &format!("{name}_{index}_context{i}"), px, *scale)?;
                        }
                    }
                    write_clip(&dir, &format!("{name}_{index}_truth"), &s.target, *scale)?;
                    let req = sample_request(&s, &codec, cfg.ablation.interleave)?;
                    (format!("{name}_{index}"), req, (s.target.clone(), s.edit_mask.clone()))
                }
                (None, None) => return Err(Error::Input("sample needs --prompt or --task".into())),
            };
            let backbone = Backbone::new(cfg.model_config()?)?;
            let field = ModelField {
                backbone: &backbone,
                params: &ck.params,
                layout: cfg.layout(),
            };
            let tokens = sample(&field, &request, &cfg.sampler, &mut rng)?;
            let pixels = from_signed(&codec.detokenize(&tokens)?);
            let files = write_clip(&dir, &stem, &pixels, *scale)?;
            let latents = dir.join(format!("{stem}.latents"));
            let bytes: Vec<u8> = tokens.tokens.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(&latents, bytes).map_err(|e| Error::io(&latents, e))?;
            let m = eval_edit(&pixels, &truth.0, &truth.1)?;
            let summary = json!({
                "grid": tokens.grid,
                "token_width": tokens.width(),
                "files": files,
                "latents": latents,
                "psnr_vs_template": m.edit_psnr,
            });
            write_json(&dir.join(format!("{stem}.json")), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            baseline,
        } => {
            let (_, samples) = read_dataset(&data_dir(data), split)?;
            let (report, name) = match (baseline.as_deref(), checkpoint) {
                (Some("copy"), _) => {
                    let cfg = load_cfg()?;
                    let chosen = select(&samples, cfg.eval.max_per_task, |_| true);
                    (evaluate_copy(&cfg, &chosen)?, format!("{split}-copy"))
                }
                (Some(other), _) => return Err(Error::Input(format!("unknown baseline {other:?}"))),
                (None, Some(path)) => {
                    let ck = Checkpoint::load(path)?;
                    let cfg = checkpoint_config(&ck, &overrides)?;
                    let chosen = select(&samples, cfg.eval.max_per_task, |_| true);
                    (evaluate(&cfg, &ck.params, &chosen)?, split.clone())
                }
                (None, None) => return Err(Error::Input("eval needs --checkpoint or --baseline".into())),
            };
            write_json(&out.join("eval").join(format!("{name}.json")), &report)?;
            print!("{}", report.to_table());
        }
        Command::Ablate { data } => {
            let cfg = load_cfg()?;
            let report = run_ablations(&cfg, &data_dir(data), &out.join("ablate"))?;
            print!("{}", report.to_markdown());
        }
        Command::Gradcheck { tol } => {
            let report = gradcheck::run(&gradcheck::gradcheck_config(), GradcheckOptions::default())?;
            let worst = report.worst();
            println!("max relative error {:.3e} in {}", worst.rel_err, worst.name);
            if !report.passed(*tol) {
                eprintln!("gradient check failed: block {} exceeds {tol:e}", worst.name);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::BenchPack { budget } => {
            let seed = load_cfg()?.seed;
            for b in bench_pack(*budget, seed)? {
                println!("{}", serde_json::to_string(&b).expect("serializable"));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, dotted) = split_dotted(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, dotted) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
