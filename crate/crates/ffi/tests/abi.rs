use std::ffi::{CStr, CString};
use std::ptr;

use interleave::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(il_last_error()) }.to_string_lossy().into_owned()
}

fn codec() -> *mut IlCodec {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { il_codec_new(1, 2, 2, 7, &mut c) }, IlStatus::Ok);
    c
}

#[test]
fn codec_round_trips_through_the_abi() {
    let c = codec();
    let (f, h, w) = (2usize, 8usize, 8usize);
    let px: Vec<f32> = (0..f * h * w * 3).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let mut grid = [0usize; 3];
    assert_eq!(unsafe { il_codec_token_grid(c, f, h, w, grid.as_mut_ptr()) }, IlStatus::Ok);
    assert_eq!(grid, [2, 2, 2]);
    let width = unsafe { il_codec_token_width(c) };
    assert_eq!(width, 48);

    let mut need = 0usize;
    let st = unsafe { il_codec_tokenize(c, px.as_ptr(), f, h, w, ptr::null_mut(), 0, &mut need) };
    assert_eq!(st, IlStatus::BufferTooSmall);
    assert_eq!(need, 8 * width);
    let mut tokens = vec![0f32; need];
    let st = unsafe { il_codec_tokenize(c, px.as_ptr(), f, h, w, tokens.as_mut_ptr(), need, &mut need) };
    assert_eq!(st, IlStatus::Ok, "{}", last_error());
    assert!(last_error().is_empty());

    let mut back = vec![0f32; px.len()];
    let mut n = 0usize;
    let st = unsafe { il_codec_detokenize(c, tokens.as_ptr(), 2, 2, 2, back.as_mut_ptr(), back.len(), &mut n) };
    assert_eq!(st, IlStatus::Ok);
    assert_eq!(n, px.len());
    let err = px.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-6, "{err}");
    unsafe { il_codec_free(c) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { il_codec_new(0, 2, 2, 0, &mut c) }, IlStatus::Config);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { il_codec_new(1, 2, 2, 0, ptr::null_mut()) }, IlStatus::NullArgument);

    let c = codec();
    let mut grid = [0usize; 3];
    assert_eq!(unsafe { il_codec_token_grid(c, 1, 6, 8, grid.as_mut_ptr()) }, IlStatus::Dimension);
    assert_eq!(unsafe { il_codec_token_grid(ptr::null(), 1, 8, 8, grid.as_mut_ptr()) }, IlStatus::NullArgument);
    unsafe { il_codec_free(c) };
    unsafe { il_codec_free(ptr::null_mut()) };

    let mut m = ptr::null_mut();
    let path = CString::new("/nonexistent/checkpoint.bin").unwrap();
    assert_eq!(unsafe { il_model_load(path.as_ptr(), &mut m) }, IlStatus::Io);
    assert!(last_error().contains("/nonexistent"));
}

#[test]
fn packer_assigns_every_document() {
    let lens = [5usize, 9, 3, 7, 1, 10, 4];
    let mut bins = [usize::MAX; 7];
    let mut nbins = 0usize;
    assert_eq!(unsafe { il_pack(lens.as_ptr(), lens.len(), 10, bins.as_mut_ptr(), &mut nbins) }, IlStatus::Ok);
    let lb = unsafe { il_pack_lower_bound(lens.as_ptr(), lens.len(), 10) };
    assert!(nbins >= lb && nbins as f64 <= 1.2 * lb as f64);
    let mut fill = vec![0usize; nbins];
    for (i, &b) in bins.iter().enumerate() {
        fill[b] += lens[i];
    }
    assert!(fill.iter().all(|&f| f > 0 && f <= 10));

    let too_long = [11usize];
    assert_ne!(unsafe { il_pack(too_long.as_ptr(), 1, 10, bins.as_mut_ptr(), &mut nbins) }, IlStatus::Ok);
}

#[test]
fn model_samples_deterministically() {
    use interleave_core::harness::{make_data, train, RunConfig, TrainOptions};
    let mut cfg = RunConfig::toy();
    cfg.model.hidden = 32;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.time_freq_dim = 16;
    cfg.data.train.values_mut().for_each(|n| *n = 1);
    cfg.data.test.values_mut().for_each(|n| *n = 1);
    cfg.optim.total_steps = 2;
    cfg.optim.warmup_steps = 1;
    let dir = tempfile::tempdir().unwrap();
    make_data(&cfg, &dir.path().join("data")).unwrap();
    let out = train(&cfg, &dir.path().join("data"), &dir.path().join("run"), &TrainOptions { resume: false, stop_at: None }).unwrap();

    let path = CString::new(out.checkpoint.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { il_model_load(path.as_ptr(), &mut m) }, IlStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { il_model_step(m) }, 2);
    let prompt = CString::new("green circle moving left").unwrap();
    let draw = |seed: u64| {
        let mut px = vec![0f32; 4 * 16 * 16 * 3];
        let (mut shape, mut n) = ([0usize; 4], 0usize);
        let st = unsafe {
            il_model_sample_prompt(m, prompt.as_ptr(), seed, 3, -1.0, px.as_mut_ptr(), px.len(), shape.as_mut_ptr(), &mut n)
        };
        assert_eq!(st, IlStatus::Ok, "{}", last_error());
        assert_eq!(shape, [4, 16, 16, 3]);
        px
    };
    let (a, b) = (draw(3), draw(3));
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    let bad = CString::new("green dodecahedron").unwrap();
    let (mut shape, mut n) = ([0usize; 4], 0usize);
    let st = unsafe { il_model_sample_prompt(m, bad.as_ptr(), 0, 1, 1.0, ptr::null_mut(), 0, shape.as_mut_ptr(), &mut n) };
    assert_eq!(st, IlStatus::Input);
    unsafe { il_model_free(m) };
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(il_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
