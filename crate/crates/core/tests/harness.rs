use interleave_core::backbone::Params;
use interleave_core::harness::evaluate::select;
use interleave_core::harness::{
    evaluate, evaluate_copy, make_data, run_ablations, train, Checkpoint, RunConfig, TrainOptions,
};
use interleave_core::layout::SeqMode;
use interleave_core::synth::{read_dataset, PSNR_CAP};
use proptest::prelude::*;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model.hidden = 32;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.time_freq_dim = 16;
    cfg.data.train.values_mut().for_each(|n| *n = 2);
    cfg.data.test.values_mut().for_each(|n| *n = 2);
    cfg.optim.total_steps = 6;
    cfg.optim.warmup_steps = 2;
    cfg.sampler.steps = 3;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_survives_toml_round_trip(
        seed in any::<u64>(),
        hidden in 1usize..5,
        layers in 1usize..6,
        lr in 1e-5f64..1e-2,
        scale in 0.0f64..10.0,
        steps in 1usize..200,
        budget in 64usize..4096,
        counts in prop::collection::vec(0usize..50, 9),
        flags in prop::collection::vec(any::<bool>(), 6),
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.hidden = hidden * 64;
        cfg.model.layers = layers;
        cfg.optim.peak_lr = lr;
        cfg.optim.min_lr = lr / 7.0;
        cfg.sampler.cfg_scale = scale;
        cfg.sampler.steps = steps;
        cfg.train.token_budget = budget;
        for (n, c) in cfg.data.train.values_mut().zip(&counts) {
            *n = *c;
        }
        let a = &mut cfg.ablation;
        (a.interleave, a.seq_pe, a.image_data, a.video_gen_data, a.video_edit_data) =
            (flags[0], flags[1], flags[2], flags[3], flags[4]);
        a.seq_mode = if flags[5] { SeqMode::PerSegment } else { SeqMode::PerFrame };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.digest(), cfg.digest());
    }
}

#[test]
fn overrides_reach_nested_keys_and_reject_unknown_ones() {
    let base = RunConfig::toy().to_toml();
    let cfg = RunConfig::parse_with_overrides(
        &base,
        &[
            ("optim.peak_lr".into(), "5e-4".into()),
            ("data.slots.t2v".into(), "3".into()),
            ("ablation.seq_mode".into(), "per_segment".into()),
        ],
    )
    .unwrap();
    assert_eq!(cfg.optim.peak_lr, 5e-4);
    assert_eq!(cfg.data.slots[&interleave_core::synth::Task::T2v], 3);
    assert_eq!(cfg.ablation.seq_mode, SeqMode::PerSegment);
    for bad in ["optim.peak", "nope", "model.hidden.x"] {
        let err = RunConfig::parse_with_overrides(&base, &[(bad.into(), "1".into())]).unwrap_err();
        assert!(matches!(err, interleave_core::Error::Config(_)), "{bad}: {err}");
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let cfg = tiny();
    let params = Params::<f32>::init(&cfg.model_config().unwrap()).unwrap();
    let ck = Checkpoint {
        config: cfg.clone(),
        params,
        opt: interleave_core::optim::AdamW::new(&cfg.model_config().unwrap()),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    ck.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn evaluation_is_consistent_and_thread_independent() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&cfg, &data).unwrap();
    let out = train(&cfg, &data, &dir.path().join("run"), &TrainOptions { resume: false, stop_at: None }).unwrap();
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    let (manifest, samples) = read_dataset(&data, "test").unwrap();
    let chosen = select(&samples, 0, |_| true);

    let at = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| serde_json::to_string(&evaluate(&cfg, &ck.params, &chosen).unwrap()).unwrap())
    };
    let one = at(1);
    assert_eq!(one, at(3));

    let report = evaluate(&cfg, &ck.params, &chosen).unwrap();
    assert_eq!(report.rows.iter().map(|r| r.count).sum::<usize>(), manifest.samples);
    for r in &report.rows {
        assert_eq!(r.count, cfg.data.test[&r.task]);
    }

    let copy = evaluate_copy(&cfg, &chosen).unwrap();
    for r in &copy.rows {
        assert_eq!(r.preserve_psnr, PSNR_CAP);
        assert_eq!(r.exact_preserve_rate, 1.0);
        assert!(r.edit_psnr < 12.0, "{:?}", r);
    }

    let none = select(&samples, 0, |_| false);
    assert!(matches!(evaluate(&cfg, &ck.params, &none), Err(interleave_core::Error::Input(_))));
}

#[test]
fn ablation_report_has_every_row_and_reproduces() {
    let mut cfg = tiny();
    cfg.optim.total_steps = 3;
    cfg.data.test.values_mut().for_each(|n| *n = 1);
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&cfg, &data).unwrap();
    let a = run_ablations(&cfg, &data, &dir.path().join("a")).unwrap();
    let b = run_ablations(&cfg, &data, &dir.path().join("b")).unwrap();
    assert_eq!(a.data_rows.len(), 5);
    assert_eq!(a.design_rows.len(), 3);
    let flags: Vec<_> = a.data_rows.iter().map(|r| (r.image_data, r.video_gen_data, r.video_edit_data)).collect();
    assert_eq!(
        flags,
        [(true, true, false), (false, false, true), (true, false, true), (false, true, true), (true, true, true)]
    );
    assert!(!a.design_rows[0].seq_pe && !a.design_rows[1].interleave);
    for f in ["report.json", "report.md"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    assert_eq!(a.to_markdown(), b.to_markdown());
}
