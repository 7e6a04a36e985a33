use interleave_core::rope::{ntk_scale, RopeConfig, RopeTables, AXES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_coords(rng: &mut ChaCha8Rng) -> [f64; AXES] {
    std::array::from_fn(|_| rng.random_range(0..64) as f64)
}

/// Attention logit between a query at `pq` and a key at `pk`.
fn logit(t: &RopeTables, q: &[f64], k: &[f64], pq: [f64; AXES], pk: [f64; AXES]) -> f64 {
    dot(&t.apply(q, pq).unwrap(), &t.apply(k, pk).unwrap())
}

#[test]
fn logits_depend_only_on_relative_position() {
    let tables = RopeTables::build(&RopeConfig::proportional(32).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q = random_vec(&mut rng, 32);
        let k = random_vec(&mut rng, 32);
        let pq = random_coords(&mut rng);
        let pk = random_coords(&mut rng);
        let shift = random_coords(&mut rng);
        let axis = rng.random_range(0..AXES);
        let mut sq = pq;
        let mut sk = pk;
        sq[axis] += shift[axis];
        sk[axis] += shift[axis];
        let base = logit(&tables, &q, &k, pq, pk);
        worst = worst.max((base - logit(&tables, &q, &k, sq, sk)).abs());
        let aq: [f64; AXES] = std::array::from_fn(|a| pq[a] + shift[a]);
        let ak: [f64; AXES] = std::array::from_fn(|a| pk[a] + shift[a]);
        worst = worst.max((base - logit(&tables, &q, &k, aq, ak)).abs());
    }
    assert!(worst < 1e-5, "max deviation {worst:e}");
}

#[test]
fn axes_rotate_disjoint_slices() {
    let cfg = RopeConfig::proportional(32).unwrap();
    let tables = RopeTables::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random_vec(&mut rng, 32);
    let mut offset = 0;
    for axis in 0..AXES {
        let mut c = [0.0; AXES];
        c[axis] = 7.0;
        let out = tables.apply(&v, c).unwrap();
        let slice = offset..offset + cfg.dims[axis];
        for i in 0..32 {
            if !slice.contains(&i) {
                assert_eq!(out[i], v[i], "axis {axis} touched dim {i}");
            }
        }
        assert!(slice.clone().any(|i| (out[i] - v[i]).abs() > 1e-9), "axis {axis} inert");
        offset += cfg.dims[axis];
    }
}

#[test]
fn zero_coordinates_are_identity_and_rotation_preserves_norm() {
    let tables = RopeTables::build(&RopeConfig::proportional(128).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let v = random_vec(&mut rng, 128);
        assert_eq!(tables.apply(&v, [0.0; AXES]).unwrap(), v);
        let r = tables.apply(&v, random_coords(&mut rng)).unwrap();
        assert!((dot(&r, &r) - dot(&v, &v)).abs() < 1e-9);
    }
}

#[test]
fn ntk_scale_grows_with_extension() {
    let mut prev = ntk_scale(10_000.0, 16.0, 16.0, 56).unwrap();
    assert_eq!(prev, 10_000.0);
    for target in [20.0, 32.0, 64.0, 128.0, 512.0] {
        let b = ntk_scale(10_000.0, 16.0, target, 56).unwrap();
        assert!(b > prev, "{target}: {b} <= {prev}");
        prev = b;
    }
    assert!(ntk_scale(10_000.0, 16.0, 64.0, 2).is_err());
}
