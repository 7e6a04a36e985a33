use interleave_core::backbone::{Backbone, ModelConfig, Params};
use interleave_core::codec::VisionTokens;
use interleave_core::flow::{gaussian, prepare_document, training_step, SamplerConfig, StepContext, TrainExample};
use interleave_core::harness::{make_data, train, Checkpoint, RunConfig, TrainOptions, CHECKPOINT_FILE, METRICS_FILE};
use interleave_core::layout::{LayoutConfig, Role, Segment};
use interleave_core::optim::{AdamW, OptimConfig};
use interleave_core::packing::PackedBatch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

fn fixed_loss(bb: &Backbone, params: &Params<f32>, ex: &TrainExample, sampler: &SamplerConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let docs = (0..16)
        .map(|i| prepare_document(ex, i, &mut rng, sampler, &LayoutConfig::default()).unwrap())
        .collect();
    bb.loss_and_grad(params, &PackedBatch::from_docs(docs, usize::MAX).unwrap()).unwrap().loss
}

#[test]
fn memorizing_one_example_cuts_loss_tenfold() {
    let cfg = ModelConfig::sized(64, 2, 2, 48).unwrap();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let mut params: Params<f32> = bb.init_params().unwrap();
    let mut opt = AdamW::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = VisionTokens::new(gaussian(&mut rng, 16, 48), (1, 4, 4)).unwrap();
    let ex = TrainExample {
        segments: vec![Segment::text(vec![2, 9, 14]), Segment::vision(image, Role::Context)],
        target: Some(1),
    };
    let sampler = SamplerConfig {
        text_dropout_p: 0.0,
        ..Default::default()
    };
    let optim = OptimConfig {
        peak_lr: 3e-3,
        min_lr: 1e-3,
        warmup_steps: 10,
        total_steps: 200,
        ..Default::default()
    };
    let layout = LayoutConfig::default();
    let ctx = StepContext {
        backbone: &bb,
        sampler: &sampler,
        layout: &layout,
        optim: &optim,
        token_budget: 1024,
    };
    let before = fixed_loss(&bb, &params, &ex, &sampler);
    for _ in 0..200 {
        training_step(&ctx, &mut params, &mut opt, &vec![ex.clone(); 8], &mut rng).unwrap();
    }
    let after = fixed_loss(&bb, &params, &ex, &sampler);
    assert!(after * 10.0 <= before, "before {before} after {after}");
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model.hidden = 32;
    cfg.model.layers = 2;
    cfg.model.heads = 2;
    cfg.model.time_freq_dim = 16;
    for n in cfg.data.train.values_mut() {
        *n = 3;
    }
    for n in cfg.data.test.values_mut() {
        *n = 1;
    }
    cfg.optim.total_steps = 12;
    cfg.optim.warmup_steps = 3;
    cfg.train.checkpoint_every = 4;
    cfg
}

fn run(cfg: &RunConfig, data: &Path, out: &Path, opts: TrainOptions) -> interleave_core::harness::TrainOutcome {
    train(cfg, data, out, &opts).unwrap()
}

fn opts(resume: bool, stop_at: Option<u64>) -> TrainOptions {
    TrainOptions { resume, stop_at }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&cfg, &data).unwrap();

    let full = run(&cfg, &data, &dir.path().join("full"), opts(false, None));
    let part = dir.path().join("part");
    let first = run(&cfg, &data, &part, opts(false, Some(5)));
    assert_eq!(first.steps, 5);
    let rest = run(&cfg, &data, &part, opts(true, None));
    assert_eq!(rest.steps, 12);
    assert_eq!(rest.log.len(), full.log.len());
    for (a, b) in rest.log.iter().zip(&full.log) {
        assert_eq!(a.step, b.step);
        assert!((a.loss - b.loss).abs() < 1e-6, "step {}: {} vs {}", a.step, a.loss, b.loss);
    }
    assert_eq!(
        fs::read(part.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(dir.path().join("full").join(CHECKPOINT_FILE)).unwrap()
    );

    let mut other = cfg.clone();
    other.optim.peak_lr *= 2.0;
    let err = train(&other, &data, &part, &opts(true, None)).unwrap_err();
    assert!(matches!(err, interleave_core::Error::Checkpoint(_)), "{err}");
}

#[test]
fn runs_are_byte_identical_across_repeats_and_thread_counts() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&cfg, &data).unwrap();
    let go = |name: &str, threads: usize| {
        let out = dir.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run(&cfg, &data, &out, opts(false, None)));
        (fs::read(out.join(CHECKPOINT_FILE)).unwrap(), fs::read(out.join(METRICS_FILE)).unwrap())
    };
    let a = go("a", 1);
    let b = go("b", 1);
    let c = go("c", 3);
    assert!(a == b, "repeat differs");
    assert!(a == c, "thread count changes the run");
    let ck = Checkpoint::from_bytes(&a.0).unwrap();
    assert_eq!(ck.opt.step, 12);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = train(&tiny_config(), &dir.path().join("nope"), &dir.path().join("out"), &opts(false, None)).unwrap_err();
    assert!(matches!(err, interleave_core::Error::Io { .. }), "{err}");
}
