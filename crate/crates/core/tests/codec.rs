use interleave_core::codec::{patchify, unpatchify, Codec, CodecConfig, LatentGrid};
use ndarray::Array4;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

fn pixels(seed: u64, t: usize, h: usize, w: usize) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0f32, 1.0).unwrap();
    Array4::from_shape_fn((t, h, w, 3), |_| u.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trip(
        seed in any::<u64>(),
        r_t in 1usize..=2, r_h in 1usize..=2, r_w in 1usize..=2,
        tm in 1usize..=3, hm in 1usize..=4, wm in 1usize..=4,
        mix_seed in any::<u64>(),
    ) {
        let codec = Codec::new(CodecConfig { r_t, r_h, r_w, mix_seed }).unwrap();
        let px = pixels(seed, r_t * tm, r_h * 2 * hm, r_w * 2 * wm);
        let back = codec.decode(&codec.encode(&px).unwrap()).unwrap();
        let err = (&back - &px).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        prop_assert!(err < 1e-6, "max abs error {}", err);
        let tokens = codec.tokenize(&px).unwrap();
        prop_assert_eq!(tokens.grid, (tm, hm, wm));
        prop_assert_eq!(tokens.len(), tm * hm * wm);
        prop_assert_eq!(tokens.width(), 3 * r_t * r_h * r_w * 4);
    }

    #[test]
    fn patchify_is_exactly_invertible(
        seed in any::<u64>(), t in 1usize..=3, hh in 1usize..=4, ww in 1usize..=4, c in 1usize..=13,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-10.0f32, 10.0).unwrap();
        let data = Array4::from_shape_fn((t, 2 * hh, 2 * ww, c), |_| u.sample(&mut rng));
        let grid = LatentGrid::new(data).unwrap();
        let tokens = patchify(&grid).unwrap();
        prop_assert_eq!(tokens.tokens.dim(), (t * hh * ww, 4 * c));
        prop_assert_eq!(unpatchify(&tokens).unwrap(), grid);
    }
}

#[test]
fn indivisible_extents_rejected() {
    let codec = Codec::new(CodecConfig::default()).unwrap();
    assert!(codec.encode(&pixels(0, 1, 6, 8)).is_err());
    assert!(codec.tokenize(&pixels(0, 1, 8, 10)).is_err());
}
