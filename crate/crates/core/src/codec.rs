//! Invertible toy latent codec and 1x2x2 patchification.
//!
//! Pixels are rearranged space-to-channel by the downsampling ratios, then
//! mixed by a fixed orthogonal matrix. Because the channel count equals
//! `3 * r_t * r_h * r_w` the map is square and decoding is its transpose.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};

/// Temporal patch extent.
pub const PATCH_T: usize = 1;
/// Spatial patch extent (height and width).
pub const PATCH_HW: usize = 2;
/// Cells per patch.
pub const PATCH_CELLS: usize = PATCH_T * PATCH_HW * PATCH_HW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Frames per latent frame.
    pub r_t: usize,
    /// Pixel rows per latent cell.
    pub r_h: usize,
    /// Pixel columns per latent cell.
    pub r_w: usize,
    /// Seed of the orthogonal channel mix.
    #[serde(with = "crate::wide")]
    pub mix_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            r_t: 1,
            r_h: 2,
            r_w: 2,
            mix_seed: 0x5eed_c0de,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_t == 0 || self.r_h == 0 || self.r_w == 0 {
            return Err(config_err!(
                "downsample ratios must be >= 1, got ({}, {}, {})",
                self.r_t,
                self.r_h,
                self.r_w
            ));
        }
        Ok(())
    }

    /// Latent channel count.
    pub fn c_vae(&self) -> usize {
        3 * self.r_t * self.r_h * self.r_w
    }

    /// Width of one vision token.
    pub fn c_vision(&self) -> usize {
        PATCH_CELLS * self.c_vae()
    }

    /// Pixel distance between horizontally (or vertically) adjacent tokens.
    pub fn pixel_stride(&self) -> (usize, usize) {
        (self.r_h * PATCH_HW, self.r_w * PATCH_HW)
    }

    /// Token grid `(t, h', w')` for a pixel clip of the given extents.
    pub fn token_grid(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        self.check_pixel_extents(frames, height, width)?;
        Ok((
            frames / (self.r_t * PATCH_T),
            height / (self.r_h * PATCH_HW),
            width / (self.r_w * PATCH_HW),
        ))
    }

    fn check_pixel_extents(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        let checks = [
            ("time", frames, self.r_t * PATCH_T),
            ("height", height, self.r_h * PATCH_HW),
            ("width", width, self.r_w * PATCH_HW),
        ];
        for (axis, extent, unit) in checks {
            if extent == 0 || extent % unit != 0 {
                return Err(dim_err!(
                    "{axis} extent {extent} is not a positive multiple of {unit}"
                ));
            }
        }
        Ok(())
    }
}

/// Latent tensor of shape `(t, h, w, c_vae)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: Array4<f32>,
}

impl LatentGrid {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (t, h, w, c) = data.dim();
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(dim_err!("latent extents must be >= 1, got {:?}", data.dim()));
        }
        Ok(Self { data })
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.data.dim();
        (t, h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }
}

/// Flat token sequence produced by [`patchify`].
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTokens {
    /// `(t * h' * w') x (4 * c_vae)` matrix.
    pub tokens: Array2<f32>,
    /// Token grid `(t, h', w')`.
    pub grid: (usize, usize, usize),
}

impl VisionTokens {
    pub fn new(tokens: Array2<f32>, grid: (usize, usize, usize)) -> Result<Self> {
        let expected = grid.0 * grid.1 * grid.2;
        if tokens.nrows() != expected || expected == 0 {
            return Err(dim_err!(
                "token count {} does not match grid {:?} ({} tokens)",
                tokens.nrows(),
                grid,
                expected
            ));
        }
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Space-to-channel rearrangement followed by a fixed orthogonal mix.
#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    /// Row-major `c x c` orthogonal matrix; latent = mix * block.
    mix: Vec<f64>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_vae();
        Ok(Self {
            cfg,
            mix: orthogonal_matrix(c, cfg.mix_seed),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Pixels `(T, H, W, 3)` to latent `(T/r_t, H/r_h, W/r_w, c_vae)`.
    pub fn encode(&self, pixels: &Array4<f32>) -> Result<LatentGrid> {
        let (frames, height, width, ch) = pixels.dim();
        if ch != 3 {
            return Err(dim_err!("pixel tensors need 3 channels, got {ch}"));
        }
        self.cfg.check_pixel_extents(frames, height, width)?;
        let CodecConfig { r_t, r_h, r_w, .. } = self.cfg;
        let c = self.cfg.c_vae();
        let (lt, lh, lw) = (frames / r_t, height / r_h, width / r_w);
        let mut out = Array4::<f32>::zeros((lt, lh, lw, c));
        let mut block = vec![0f64; c];
        for t in 0..lt {
            for y in 0..lh {
                for x in 0..lw {
                    let mut k = 0;
                    for dt in 0..r_t {
                        for dy in 0..r_h {
                            for dx in 0..r_w {
                                for ch in 0..3 {
                                    block[k] = pixels[[t * r_t + dt, y * r_h + dy, x * r_w + dx, ch]] as f64;
                                    k += 1;
                                }
                            }
                        }
                    }
                    for i in 0..c {
                        let row = &self.mix[i * c..(i + 1) * c];
                        let v: f64 = row.iter().zip(&block).map(|(m, b)| m * b).sum();
                        out[[t, y, x, i]] = v as f32;
                    }
                }
            }
        }
        Ok(LatentGrid { data: out })
    }

    /// Exact inverse of [`Codec::encode`].
    pub fn decode(&self, latent: &LatentGrid) -> Result<Array4<f32>> {
        let c = self.cfg.c_vae();
        if latent.channels() != c {
            return Err(dim_err!(
                "latent has {} channels, codec expects {c}",
                latent.channels()
            ));
        }
        let CodecConfig { r_t, r_h, r_w, .. } = self.cfg;
        let (lt, lh, lw) = latent.extents();
        let mut out = Array4::<f32>::zeros((lt * r_t, lh * r_h, lw * r_w, 3));
        let mut block = vec![0f64; c];
        for t in 0..lt {
            for y in 0..lh {
                for x in 0..lw {
                    block.iter_mut().for_each(|b| *b = 0.0);
                    for i in 0..c {
                        let z = latent.data[[t, y, x, i]] as f64;
                        let row = &self.mix[i * c..(i + 1) * c];
                        for (b, m) in block.iter_mut().zip(row) {
                            *b += m * z;
                        }
                    }
                    let mut k = 0;
                    for dt in 0..r_t {
                        for dy in 0..r_h {
                            for dx in 0..r_w {
                                for ch in 0..3 {
                                    out[[t * r_t + dt, y * r_h + dy, x * r_w + dx, ch]] = block[k] as f32;
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Pixels straight to vision tokens.
    pub fn tokenize(&self, pixels: &Array4<f32>) -> Result<VisionTokens> {
        patchify(&self.encode(pixels)?)
    }

    /// Vision tokens straight to pixels.
    pub fn detokenize(&self, tokens: &VisionTokens) -> Result<Array4<f32>> {
        self.decode(&unpatchify(tokens)?)
    }
}

/// Gaussian matrix orthonormalised by modified Gram-Schmidt.
fn orthogonal_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut m: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
                for k in 0..n {
                    m[i * n + k] -= dot * m[j * n + k];
                }
            }
            let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for k in 0..n {
                m[i * n + k] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

/// 1x2x2 patchification; token index is `f * h' * w' + row * w' + col`.
pub fn patchify(latent: &LatentGrid) -> Result<VisionTokens> {
    let (t, h, w, c) = latent.data.dim();
    if h % PATCH_HW != 0 || w % PATCH_HW != 0 {
        return Err(dim_err!("latent grid {h}x{w} must have even height and width"));
    }
    let (hp, wp) = (h / PATCH_HW, w / PATCH_HW);
    let mut tokens = Array2::<f32>::zeros((t * hp * wp, PATCH_CELLS * c));
    for f in 0..t {
        for row in 0..hp {
            for col in 0..wp {
                let idx = f * hp * wp + row * wp + col;
                let mut dst = tokens.row_mut(idx);
                for dy in 0..PATCH_HW {
                    for dx in 0..PATCH_HW {
                        let cell = dy * PATCH_HW + dx;
                        for ch in 0..c {
                            dst[cell * c + ch] = latent.data[[f, row * PATCH_HW + dy, col * PATCH_HW + dx, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(VisionTokens {
        tokens,
        grid: (t, hp, wp),
    })
}

pub fn unpatchify(tokens: &VisionTokens) -> Result<LatentGrid> {
    let (t, hp, wp) = tokens.grid;
    if tokens.tokens.nrows() != t * hp * wp || t * hp * wp == 0 {
        return Err(dim_err!(
            "{} tokens cannot fill grid {:?}",
            tokens.tokens.nrows(),
            tokens.grid
        ));
    }
    if tokens.width() % PATCH_CELLS != 0 {
        return Err(dim_err!("token width {} is not a multiple of {PATCH_CELLS}", tokens.width()));
    }
    let c = tokens.width() / PATCH_CELLS;
    let mut data = Array4::<f32>::zeros((t, hp * PATCH_HW, wp * PATCH_HW, c));
    for f in 0..t {
        for row in 0..hp {
            for col in 0..wp {
                let src = tokens.tokens.row(f * hp * wp + row * wp + col);
                for dy in 0..PATCH_HW {
                    for dx in 0..PATCH_HW {
                        let cell = dy * PATCH_HW + dx;
                        for ch in 0..c {
                            data[[f, row * PATCH_HW + dy, col * PATCH_HW + dx, ch]] = src[cell * c + ch];
                        }
                    }
                }
            }
        }
    }
    Ok(LatentGrid { data })
}
