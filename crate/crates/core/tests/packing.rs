use interleave_core::backbone::Backbone;
use interleave_core::gradcheck::{gradcheck_config, perturbed_params, random_document};
use interleave_core::harness::bench::fixed_suite;
use interleave_core::layout::LayoutConfig;
use interleave_core::packing::{bin_lower_bound, build_mask, ffd_bins, pack, Document, PackedBatch};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn docs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Document> {
    let cfg = gradcheck_config();
    (0..n)
        .map(|i| random_document(rng, i, &cfg, &LayoutConfig::default()).unwrap())
        .collect()
}

#[test]
fn packed_outputs_match_individual_outputs() {
    let cfg = gradcheck_config();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let params = perturbed_params(&cfg, 3, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let set = docs(&mut rng, n);
        let batch = PackedBatch::from_docs(set.clone(), usize::MAX).unwrap();
        let packed = bb.predict(&params, &batch).unwrap();
        for (d, doc) in set.into_iter().enumerate() {
            let span = batch.doc_spans[d];
            let alone = bb.predict(&params, &PackedBatch::single(doc)).unwrap();
            let diff = (&packed.slice(s![span.start..span.end, ..]) - &alone).mapv(f64::abs);
            worst = worst.max(diff.fold(0.0, |a, &b| a.max(b)));
        }
    }
    assert!(worst < 1e-5, "max deviation {worst:e}");
}

#[test]
fn other_documents_do_not_leak() {
    let cfg = gradcheck_config();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let params = perturbed_params(&cfg, 4, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let a = docs(&mut rng, 2);
        let mut b = a.clone();
        b[1] = docs(&mut rng, 1).remove(0);
        let ba = PackedBatch::from_docs(a, usize::MAX).unwrap();
        let bb_ = PackedBatch::from_docs(b, usize::MAX).unwrap();
        let n0 = ba.doc_spans[0].end;
        let oa = bb.predict(&params, &ba).unwrap();
        let ob = bb.predict(&params, &bb_).unwrap();
        let diff = (&oa.slice(s![..n0, ..]) - &ob.slice(s![..n0, ..])).mapv(f64::abs);
        assert!(diff.fold(0.0f64, |a, &b| a.max(b)) < 1e-5);
    }
}

#[test]
fn packing_loses_no_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let set = docs(&mut rng, n);
        let longest = set.iter().map(Document::len).max().unwrap();
        let budget = rng.random_range(longest..=3 * longest);
        let mut expected: Vec<(usize, usize)> = set.iter().map(|d| (d.id, d.len())).collect();
        let batches = pack(set, budget).unwrap();
        let mut got: Vec<(usize, usize)> = Vec::new();
        for b in &batches {
            assert!(b.rows() <= budget);
            for span in &b.doc_spans {
                got.push((span.doc_id, span.end - span.start));
            }
        }
        expected.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, expected);
    }
}

#[test]
fn mask_is_symmetric_block_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let n = rng.random_range(1..=5);
        let batch = PackedBatch::from_docs(docs(&mut rng, n), usize::MAX).unwrap();
        let mask = build_mask(&batch).unwrap();
        let owner = batch.row_docs();
        for i in 0..batch.rows() {
            for j in 0..batch.rows() {
                assert_eq!(mask.allowed(i, j), mask.allowed(j, i));
                assert_eq!(mask.allowed(i, j), owner[i] == owner[j]);
            }
        }
    }
}

#[test]
fn ffd_stays_near_lower_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let budget = 512;
    let lengths: Vec<usize> = (0..1000).map(|_| rng.random_range(1..=budget)).collect();
    let bins = ffd_bins(&lengths, budget).unwrap();
    let ratio = bins.len() as f64 / bin_lower_bound(&lengths, budget) as f64;
    assert!(ratio <= 1.2, "ratio {ratio}");
    for (name, lengths) in fixed_suite(1024, 0) {
        let bins = ffd_bins(&lengths, 1024).unwrap();
        let ratio = bins.len() as f64 / bin_lower_bound(&lengths, 1024) as f64;
        assert!(ratio <= 1.2, "{name}: ratio {ratio}");
    }
}

#[test]
fn packed_loss_equals_mean_of_single_losses() {
    let cfg = gradcheck_config();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let params = perturbed_params(&cfg, 5, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let n = rng.random_range(1..=5);
        let set = docs(&mut rng, n);
        let packed = bb
            .loss_and_grad(&params, &PackedBatch::from_docs(set.clone(), usize::MAX).unwrap())
            .unwrap()
            .loss;
        let mean = set
            .iter()
            .map(|d| bb.loss_and_grad(&params, &PackedBatch::single(d.clone())).unwrap().loss)
            .sum::<f64>()
            / n as f64;
        assert!((packed - mean).abs() < 1e-6, "{packed} vs {mean}");
        let mut rev = set;
        rev.reverse();
        let reordered = bb
            .loss_and_grad(&params, &PackedBatch::from_docs(rev, usize::MAX).unwrap())
            .unwrap()
            .loss;
        assert!((packed - reordered).abs() < 1e-12);
    }
}
