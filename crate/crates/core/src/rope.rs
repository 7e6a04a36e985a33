//! Four-axis rotary positional embedding.
//!
//! The head dimension is split into four consecutive slices, one per
//! coordinate axis (height, width, sequential, temporal). Each slice is
//! rotated pairwise by its own axis coordinate with its own frequency table.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};

/// Axis order used everywhere: height, width, sequential, temporal.
pub const AXES: usize = 4;
pub const AXIS_NAMES: [&str; AXES] = ["height", "width", "sequential", "temporal"];

/// Reference split of a 128-wide head.
const REFERENCE_SPLIT: [usize; AXES] = [56, 56, 12, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    /// Rotary dims per axis `[h, w, s, tau]`; each even, summing to head_dim.
    pub dims: [usize; AXES],
    pub base: f64,
    /// Coordinate extent seen in training, per axis.
    pub trained_extent: [f64; AXES],
    /// Coordinate extent to support at inference, per axis.
    pub target_extent: [f64; AXES],
    /// When false the sequential slice is left unrotated.
    #[serde(default = "default_true")]
    pub sequential_axis: bool,
}

fn default_true() -> bool {
    true
}

impl RopeConfig {
    /// Split `head_dim` with the reference 56:56:12:4 proportions, keeping
    /// every slice even and at least 2 wide.
    pub fn proportional(head_dim: usize) -> Result<Self> {
        if head_dim < 8 || head_dim % 2 != 0 {
            return Err(config_err!("head_dim {head_dim} must be even and >= 8"));
        }
        let total: usize = REFERENCE_SPLIT.iter().sum();
        let small = |r: usize| {
            let exact = (head_dim * r) as f64 / total as f64;
            ((exact / 2.0).floor() as usize * 2).max(2)
        };
        let d_s = small(REFERENCE_SPLIT[2]);
        let d_t = small(REFERENCE_SPLIT[3]);
        let rest = head_dim - d_s - d_t;
        let pairs = rest / 2;
        let d_w = (pairs / 2) * 2;
        let d_h = rest - d_w;
        Ok(Self {
            dims: [d_h, d_w, d_s, d_t],
            base: 10_000.0,
            trained_extent: [1.0; AXES],
            target_extent: [1.0; AXES],
            sequential_axis: true,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, &d) in self.dims.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return Err(config_err!(
                    "rotary dim for {} axis must be even and positive, got {d}",
                    AXIS_NAMES[axis]
                ));
            }
        }
        if !(self.base > 1.0) {
            return Err(config_err!("rotary base must exceed 1, got {}", self.base));
        }
        for axis in 0..AXES {
            if self.trained_extent[axis] < 1.0 || self.target_extent[axis] < 1.0 {
                return Err(config_err!("{} extents must be >= 1", AXIS_NAMES[axis]));
            }
        }
        Ok(())
    }
}

/// NTK-aware base rescaling: `base * s^(d / (d - 2))` with
/// `s = target / trained` when extending, otherwise the base is unchanged.
pub fn ntk_scale(base: f64, trained_extent: f64, target_extent: f64, d_axis: usize) -> Result<f64> {
    if trained_extent < 1.0 || target_extent < 1.0 {
        return Err(config_err!("extents must be >= 1"));
    }
    let s = target_extent / trained_extent;
    if s <= 1.0 {
        return Ok(base);
    }
    if d_axis <= 2 {
        return Err(config_err!(
            "NTK scaling needs an axis wider than 2 dims, got {d_axis}"
        ));
    }
    let d = d_axis as f64;
    Ok(base * s.powf(d / (d - 2.0)))
}

/// Per-axis frequency tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTables {
    pub freqs: [Vec<f64>; AXES],
    offsets: [usize; AXES],
    head_dim: usize,
}

impl RopeTables {
    pub fn build(cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut freqs: [Vec<f64>; AXES] = Default::default();
        let mut offsets = [0; AXES];
        let mut off = 0;
        for axis in 0..AXES {
            let d = cfg.dims[axis];
            offsets[axis] = off;
            off += d;
            let base = ntk_scale(cfg.base, cfg.trained_extent[axis], cfg.target_extent[axis], d)?;
            freqs[axis] = if axis == 2 && !cfg.sequential_axis {
                vec![0.0; d / 2]
            } else {
                (0..d / 2)
                    .map(|k| base.powf(-(2.0 * k as f64) / d as f64))
                    .collect()
            };
        }
        Ok(Self {
            freqs,
            offsets,
            head_dim: off,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    /// Rotation angle of every pair for one coordinate tuple.
    pub fn angles(&self, coords: [f64; AXES], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.pairs());
        for axis in 0..AXES {
            let start = self.offsets[axis] / 2;
            for (k, f) in self.freqs[axis].iter().enumerate() {
                out[start + k] = coords[axis] * f;
            }
        }
    }

    /// Cos/sin table for a list of coordinates: `rows x pairs` each.
    pub fn rotations(&self, coords: &[[f64; AXES]]) -> Rotations {
        let p = self.pairs();
        let mut cos = Vec::with_capacity(coords.len() * p);
        let mut sin = Vec::with_capacity(coords.len() * p);
        let mut ang = vec![0.0; p];
        for c in coords {
            self.angles(*c, &mut ang);
            for a in &ang {
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Rotations { cos, sin, pairs: p }
    }

    /// Rotate a single head vector by the given coordinates.
    pub fn apply(&self, vec: &[f64], coords: [f64; AXES]) -> Result<Vec<f64>> {
        if vec.len() != self.head_dim {
            return Err(dim_err!(
                "vector width {} does not match head_dim {}",
                vec.len(),
                self.head_dim
            ));
        }
        let rot = self.rotations(&[coords]);
        let mut out = vec.to_vec();
        rot.rotate_row(0, &mut out, false);
        Ok(out)
    }
}

/// Precomputed rotations for a run of rows.
#[derive(Debug, Clone)]
pub struct Rotations {
    cos: Vec<f64>,
    sin: Vec<f64>,
    pairs: usize,
}

impl Rotations {
    pub fn rows(&self) -> usize {
        self.cos.len() / self.pairs.max(1)
    }

    /// Rotate `v` (one head, `2 * pairs` wide) in place; `inverse` applies
    /// the transpose rotation, which is the backward pass.
    pub fn rotate_row<F: crate::Real>(&self, row: usize, v: &mut [F], inverse: bool) {
        let base = row * self.pairs;
        for k in 0..self.pairs {
            let c = F::of(self.cos[base + k]);
            let s = if inverse {
                -F::of(self.sin[base + k])
            } else {
                F::of(self.sin[base + k])
            };
            let (a, b) = (v[2 * k], v[2 * k + 1]);
            v[2 * k] = a * c - b * s;
            v[2 * k + 1] = a * s + b * c;
        }
    }
}
