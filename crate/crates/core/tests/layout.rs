use interleave_core::codec::VisionTokens;
use interleave_core::layout::{assemble, deinterleave, LayoutConfig, Modality, Role, Segment, SeqMode};
use ndarray::Array2;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Spec {
    Text(usize),
    Vision(usize, usize, usize),
}

fn spec() -> impl Strategy<Value = Spec> {
    prop_oneof![
        (1usize..6).prop_map(Spec::Text),
        (1usize..4, 1usize..4, 1usize..4).prop_map(|(t, h, w)| Spec::Vision(t, h, w)),
    ]
}

fn build(specs: &[Spec]) -> Vec<Segment> {
    specs
        .iter()
        .map(|s| match *s {
            Spec::Text(n) => Segment::text((0..n).collect()),
            Spec::Vision(t, h, w) => {
                let tokens = VisionTokens::new(Array2::zeros((t * h * w, 3)), (t, h, w)).unwrap();
                Segment::vision(tokens, Role::Context)
            }
        })
        .collect()
}

fn mode() -> impl Strategy<Value = SeqMode> {
    prop_oneof![Just(SeqMode::PerFrame), Just(SeqMode::PerSegment)]
}

proptest! {
    #[test]
    fn token_count_law(specs in prop::collection::vec(spec(), 1..8), seq_mode in mode()) {
        let cfg = LayoutConfig { seq_mode, ..LayoutConfig::default() };
        let seq = assemble(build(&specs), &cfg).unwrap();
        let expected: usize = specs
            .iter()
            .map(|s| match *s {
                Spec::Text(n) => n,
                Spec::Vision(t, h, w) => t * h * w + 2,
            })
            .sum();
        prop_assert_eq!(seq.len(), expected);
        prop_assert_eq!(seq.coords.len(), expected);
        prop_assert_eq!(assemble(build(&specs), &cfg).unwrap().coords, seq.coords);
    }

    #[test]
    fn video_coords_enumerate_the_grid(specs in prop::collection::vec(spec(), 1..6)) {
        let cfg = LayoutConfig::default();
        let seq = assemble(build(&specs), &cfg).unwrap();
        for span in seq.spans.iter().filter(|s| s.modality.is_vision()) {
            let (t, h, w) = seq.segments[span.segment].grid().unwrap();
            let mut seen: Vec<(u32, u32, u32)> = (span.start..span.end)
                .map(|i| (seq.coords.tau[i], seq.coords.h[i], seq.coords.w[i]))
                .collect();
            seen.sort_unstable();
            let mut want: Vec<(u32, u32, u32)> = Vec::new();
            for f in 0..t {
                for r in 0..h {
                    for c in 0..w {
                        let (sh, sw) = cfg.pixel_stride;
                        want.push((f as u32, (r * sh) as u32, (c * sw) as u32));
                    }
                }
            }
            prop_assert_eq!(seen, want);
        }
    }

    #[test]
    fn swapping_segments_moves_only_s(specs in prop::collection::vec(spec(), 2..6), i in 0usize..6, j in 0usize..6) {
        let (i, j) = (i % specs.len(), j % specs.len());
        let cfg = LayoutConfig::default();
        let a = assemble(build(&specs), &cfg).unwrap();
        let mut swapped = specs.clone();
        swapped.swap(i, j);
        let b = assemble(build(&swapped), &cfg).unwrap();
        let rows = |seq: &interleave_core::layout::UnifiedSequence, k: usize| {
            let sp = seq.spans[k];
            let (lo, hi) = if sp.modality.is_vision() { (sp.start - 1, sp.end + 1) } else { (sp.start, sp.end) };
            (lo..hi).map(|r| (seq.coords.h[r], seq.coords.w[r], seq.coords.tau[r])).collect::<Vec<_>>()
        };
        for k in 0..specs.len() {
            let k2 = if k == i { j } else if k == j { i } else { k };
            prop_assert_eq!(rows(&a, k), rows(&b, k2));
        }
    }

    #[test]
    fn deinterleave_keeps_relative_order(specs in prop::collection::vec(spec(), 1..8)) {
        let segs = build(&specs);
        let out = deinterleave(segs.clone());
        let first_vision = out.iter().position(|s| s.modality != Modality::Text).unwrap_or(out.len());
        prop_assert!(out[first_vision..].iter().all(|s| s.modality != Modality::Text));
        let text: Vec<_> = segs.iter().filter(|s| s.modality == Modality::Text).cloned().collect();
        let vision: Vec<_> = segs.iter().filter(|s| s.modality != Modality::Text).cloned().collect();
        prop_assert_eq!(&out[..first_vision], &text[..]);
        prop_assert_eq!(&out[first_vision..], &vision[..]);
    }
}
