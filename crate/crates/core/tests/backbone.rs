use interleave_core::backbone::{Backbone, ModelConfig, Params};
use interleave_core::codec::VisionTokens;
use interleave_core::flow::{gaussian, prepare_document, SamplerConfig, TrainExample};
use interleave_core::gradcheck::{gradcheck_config, perturbed_params, random_document, relative_error};
use interleave_core::layout::{assemble, LayoutConfig, Projectors, Role, Segment, SeqMode};
use interleave_core::packing::PackedBatch;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn vision(rng: &mut ChaCha8Rng, grid: (usize, usize, usize), c: usize, role: Role) -> Segment {
    let n = grid.0 * grid.1 * grid.2;
    Segment::vision(VisionTokens::new(gaussian(rng, n, c), grid).unwrap(), role)
}

#[test]
fn swapping_context_segments_with_their_coords_keeps_target_output() {
    let cfg = gradcheck_config();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let params = perturbed_params(&cfg, 21, 0.1).unwrap();
    let layout = LayoutConfig {
        seq_mode: SeqMode::PerSegment,
        ..LayoutConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a = vision(&mut rng, (2, 1, 2), cfg.c_vision, Role::Context);
        let b = vision(&mut rng, (1, 2, 2), cfg.c_vision, Role::Context);
        let text = Segment::text(vec![1, 4, 2]);
        let target = vision(&mut rng, (1, 2, 1), cfg.c_vision, Role::Target);
        let first = assemble(vec![a.clone(), b.clone(), text.clone(), target.clone()], &layout).unwrap();
        let mut second = assemble(vec![b, a, text, target], &layout).unwrap();

        // per-segment h/w/tau survive the swap; only s moves
        let (la, lb) = (first.spans[0].end + 1, first.spans[1].end + 1 - first.spans[0].end - 1);
        for (src, dst, n) in [(0, lb, la), (la, 0, lb)] {
            for k in 0..n {
                let (p, q) = (first.coords.get(src + k), second.coords.get(dst + k));
                assert_eq!((p[0], p[1], p[3]), (q[0], q[1], q[3]));
            }
        }
        // carry every token's coordinates along with it
        let mut coords = second.coords.clone();
        for (src, dst, n) in [(0, lb, la), (la, 0, lb)] {
            for k in 0..n {
                coords.s[dst + k] = first.coords.s[src + k];
            }
        }
        second.coords = coords;

        let t = rng.random_range(0.0..1.0);
        let out1 = bb.predict(&params, &PackedBatch::single(interleave_core::packing::Document::new(0, first.clone(), t))).unwrap();
        let out2 = bb.predict(&params, &PackedBatch::single(interleave_core::packing::Document::new(0, second.clone(), t))).unwrap();
        let (s1, s2) = (first.target_span().unwrap(), second.target_span().unwrap());
        let diff = (&out1.slice(s![s1.start..s1.end, ..]) - &out2.slice(s![s2.start..s2.end, ..])).mapv(f64::abs);
        assert!(diff.fold(0.0f64, |m, &v| m.max(v)) < 1e-5);
    }
}

#[test]
fn zero_prediction_loss_is_two() {
    let cfg = ModelConfig::sized(32, 1, 2, 48).unwrap();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let params: Params<f32> = bb.init_params().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sampler = SamplerConfig::default();
    let mut docs = Vec::new();
    for i in 0..64 {
        let ex = TrainExample {
            segments: vec![Segment::text(vec![3]), vision(&mut rng, (1, 2, 2), 48, Role::Context)],
            target: Some(1),
        };
        docs.push(prepare_document(&ex, i, &mut rng, &sampler, &LayoutConfig::default()).unwrap());
    }
    let draws: usize = docs.iter().map(|d| d.velocity.as_ref().unwrap().len()).sum();
    assert!(draws >= 10_000);
    let loss = bb.loss_and_grad(&params, &PackedBatch::from_docs(docs, usize::MAX).unwrap()).unwrap().loss;
    assert!((loss - 2.0).abs() < 0.1, "loss {loss}");
}

#[test]
fn projector_gradients_match_finite_differences() {
    let (vocab, ct, cv, hidden) = (6, 3, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut proj = Projectors::<f64>::zeros(vocab, ct, cv, hidden);
    let mut fill = |a: &mut ndarray::ArrayViewMutD<'_, f64>| a.mapv_inplace(|_| StandardNormal.sample(&mut rng));
    fill(&mut proj.text_embed.view_mut().into_dyn());
    fill(&mut proj.text_w.view_mut().into_dyn());
    fill(&mut proj.text_b.view_mut().into_dyn());
    fill(&mut proj.vision_w.view_mut().into_dyn());
    fill(&mut proj.vision_b.view_mut().into_dyn());
    fill(&mut proj.vision_start.view_mut().into_dyn());
    fill(&mut proj.vision_end.view_mut().into_dyn());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = assemble(
        vec![
            Segment::text(vec![0, 5, 5]),
            vision(&mut rng, (2, 1, 2), cv, Role::Context),
            Segment::text(vec![2]),
            vision(&mut rng, (1, 1, 1), cv, Role::Target),
        ],
        &LayoutConfig::default(),
    )
    .unwrap();
    let weights: Array2<f64> = Array2::from_shape_fn((seq.len(), hidden), |_| StandardNormal.sample(&mut rng));
    let objective = |p: &Projectors<f64>| (&p.embed(&seq).unwrap() * &weights).sum();

    let mut grads = Projectors::<f64>::zeros(vocab, ct, cv, hidden);
    proj.backward(&seq, weights.view(), &mut grads);

    let h = 1e-5;
    macro_rules! check {
        ($field:ident) => {{
            let n = proj.$field.len();
            let mut num = Vec::with_capacity(n);
            for i in 0..n {
                let orig = proj.$field.as_slice().unwrap()[i];
                proj.$field.as_slice_mut().unwrap()[i] = orig + h;
                let plus = objective(&proj);
                proj.$field.as_slice_mut().unwrap()[i] = orig - h;
                let minus = objective(&proj);
                proj.$field.as_slice_mut().unwrap()[i] = orig;
                num.push((plus - minus) / (2.0 * h));
            }
            let ana: Vec<f64> = grads.$field.iter().copied().collect();
            let err = relative_error(&ana, &num);
            assert!(err < 1e-6, "{}: {err:e}", stringify!($field));
        }};
    }
    check!(text_embed);
    check!(text_w);
    check!(text_b);
    check!(vision_w);
    check!(vision_b);
    check!(vision_start);
    check!(vision_end);
}

#[test]
fn outputs_and_gradients_independent_of_thread_count() {
    let cfg = gradcheck_config();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let params: Params<f32> = perturbed_params(&cfg, 1, 0.1).unwrap().cast(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let docs: Vec<_> = (0..6)
        .map(|i| random_document(&mut rng, i, &cfg, &LayoutConfig::default()).unwrap())
        .collect();
    let batch = PackedBatch::from_docs(docs, usize::MAX).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = bb.predict(&params, &batch).unwrap();
            let lg = bb.loss_and_grad(&params, &batch).unwrap();
            (out, lg.loss, lg.grads)
        })
    };
    let (o1, l1, g1) = run(1);
    for threads in [2, 4] {
        let (o, l, g) = run(threads);
        assert_eq!(o, o1);
        assert_eq!(l.to_bits(), l1.to_bits());
        assert!(g == g1);
    }
}

#[test]
fn same_seed_same_params() {
    let cfg = ModelConfig::default();
    let a = Params::<f32>::init(&cfg).unwrap();
    let b = Params::<f32>::init(&cfg).unwrap();
    assert!(a == b);
    assert_eq!(a.count(), cfg.param_count());
}
