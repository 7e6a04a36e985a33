use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::layout::Projectors;
use crate::real::Real;
use crate::rope::RopeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Gated-MLP inner width as a multiple of `hidden`.
    pub mlp_ratio: f64,
    pub vocab_size: usize,
    pub c_text: usize,
    pub c_vision: usize,
    /// Width of the sinusoidal timestep features.
    pub time_freq_dim: usize,
    pub norm_eps: f64,
    pub rope: RopeConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::sized(128, 4, 4, 48).expect("default sizes are valid")
    }
}

impl ModelConfig {
    /// Config with the given trunk size and proportional RoPE split.
    pub fn sized(hidden: usize, layers: usize, heads: usize, c_vision: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(config_err!("hidden {hidden} is not divisible by {heads} heads"));
        }
        let head_dim = hidden / heads;
        Ok(Self {
            hidden,
            layers,
            heads,
            head_dim,
            mlp_ratio: 2.0,
            vocab_size: 128,
            c_text: 64,
            c_vision,
            time_freq_dim: 64,
            norm_eps: 1e-6,
            rope: RopeConfig::proportional(head_dim)?,
            seed: 0,
        })
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.hidden as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("c_text", self.c_text),
            ("c_vision", self.c_vision),
            ("time_freq_dim", self.time_freq_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("{name} must be >= 1"));
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(config_err!(
                "heads ({}) x head_dim ({}) != hidden ({})",
                self.heads,
                self.head_dim,
                self.hidden
            ));
        }
        if self.rope.head_dim() != self.head_dim {
            return Err(config_err!(
                "rope dims sum to {}, head_dim is {}",
                self.rope.head_dim(),
                self.head_dim
            ));
        }
        if self.time_freq_dim % 2 != 0 {
            return Err(config_err!("time_freq_dim must be even"));
        }
        if !(self.mlp_ratio > 0.0) || !(self.norm_eps > 0.0) {
            return Err(config_err!("mlp_ratio and norm_eps must be positive"));
        }
        self.rope.validate()
    }

    /// Parameter count from the shapes alone.
    pub fn param_count(&self) -> usize {
        let (c, h, v) = (self.hidden, self.mlp_hidden(), self.c_vision);
        let proj = self.vocab_size * self.c_text + self.c_text * c + c + v * c + c + 2 * c;
        let time = self.time_freq_dim * c + c + c * c + c;
        let layer = c + 4 * c * c + c + 3 * c * h + c * 4 * c + 4 * c;
        let fin = c + c * 2 * c + 2 * c + c * v + v;
        proj + time + self.layers * layer + fin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Real> {
    pub norm1: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub norm2: Array1<F>,
    pub w_gate: Array2<F>,
    pub w_up: Array2<F>,
    pub w_down: Array2<F>,
    /// Timestep modulation: `[shift1 | scale1 | shift2 | scale2]`.
    pub mod_w: Array2<F>,
    pub mod_b: Array1<F>,
}

/// Every learnable block of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F: Real> {
    pub proj: Projectors<F>,
    pub time_w1: Array2<F>,
    pub time_b1: Array1<F>,
    pub time_w2: Array2<F>,
    pub time_b2: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Array1<F>,
    /// Final modulation: `[shift | scale]`.
    pub final_mod_w: Array2<F>,
    pub final_mod_b: Array1<F>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

macro_rules! named_blocks {
    ($self:ident, $view:ident, $iter:ident, $push:expr) => {{
        let mut out = Vec::new();
        let push = $push;
        push(&mut out, "proj.text_embed".to_string(), $self.proj.text_embed.$view().into_dyn());
        push(&mut out, "proj.text_w".to_string(), $self.proj.text_w.$view().into_dyn());
        push(&mut out, "proj.text_b".to_string(), $self.proj.text_b.$view().into_dyn());
        push(&mut out, "proj.vision_w".to_string(), $self.proj.vision_w.$view().into_dyn());
        push(&mut out, "proj.vision_b".to_string(), $self.proj.vision_b.$view().into_dyn());
        push(&mut out, "proj.vision_start".to_string(), $self.proj.vision_start.$view().into_dyn());
        push(&mut out, "proj.vision_end".to_string(), $self.proj.vision_end.$view().into_dyn());
        push(&mut out, "time.w1".to_string(), $self.time_w1.$view().into_dyn());
        push(&mut out, "time.b1".to_string(), $self.time_b1.$view().into_dyn());
        push(&mut out, "time.w2".to_string(), $self.time_w2.$view().into_dyn());
        push(&mut out, "time.b2".to_string(), $self.time_b2.$view().into_dyn());
        for (i, l) in $self.layers.$iter().enumerate() {
            push(&mut out, format!("layers.{i}.norm1"), l.norm1.$view().into_dyn());
            push(&mut out, format!("layers.{i}.wq"), l.wq.$view().into_dyn());
            push(&mut out, format!("layers.{i}.wk"), l.wk.$view().into_dyn());
            push(&mut out, format!("layers.{i}.wv"), l.wv.$view().into_dyn());
            push(&mut out, format!("layers.{i}.wo"), l.wo.$view().into_dyn());
            push(&mut out, format!("layers.{i}.norm2"), l.norm2.$view().into_dyn());
            push(&mut out, format!("layers.{i}.w_gate"), l.w_gate.$view().into_dyn());
            push(&mut out, format!("layers.{i}.w_up"), l.w_up.$view().into_dyn());
            push(&mut out, format!("layers.{i}.w_down"), l.w_down.$view().into_dyn());
            push(&mut out, format!("layers.{i}.mod_w"), l.mod_w.$view().into_dyn());
            push(&mut out, format!("layers.{i}.mod_b"), l.mod_b.$view().into_dyn());
        }
        push(&mut out, "final.norm".to_string(), $self.final_norm.$view().into_dyn());
        push(&mut out, "final.mod_w".to_string(), $self.final_mod_w.$view().into_dyn());
        push(&mut out, "final.mod_b".to_string(), $self.final_mod_b.$view().into_dyn());
        push(&mut out, "head.w".to_string(), $self.head_w.$view().into_dyn());
        push(&mut out, "head.b".to_string(), $self.head_b.$view().into_dyn());
        out
    }};
}

impl<F: Real> Params<F> {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (c, h, v) = (cfg.hidden, cfg.mlp_hidden(), cfg.c_vision);
        let layer = || LayerParams {
            norm1: Array1::zeros(c),
            wq: Array2::zeros((c, c)),
            wk: Array2::zeros((c, c)),
            wv: Array2::zeros((c, c)),
            wo: Array2::zeros((c, c)),
            norm2: Array1::zeros(c),
            w_gate: Array2::zeros((c, h)),
            w_up: Array2::zeros((c, h)),
            w_down: Array2::zeros((h, c)),
            mod_w: Array2::zeros((c, 4 * c)),
            mod_b: Array1::zeros(4 * c),
        };
        Self {
            proj: Projectors::zeros(cfg.vocab_size, cfg.c_text, v, c),
            time_w1: Array2::zeros((cfg.time_freq_dim, c)),
            time_b1: Array1::zeros(c),
            time_w2: Array2::zeros((c, c)),
            time_b2: Array1::zeros(c),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            final_norm: Array1::zeros(c),
            final_mod_w: Array2::zeros((c, 2 * c)),
            final_mod_b: Array1::zeros(2 * c),
            head_w: Array2::zeros((c, v)),
            head_b: Array1::zeros(v),
        }
    }

    /// Seeded initialisation: fan-in scaled normal weights, unit norm
    /// gains, zero biases, and zero modulation and output head so the
    /// untrained model predicts zero velocity.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fill = |a: &mut Array2<F>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            a.mapv_inplace(|_| F::of(dist.sample(&mut rng)));
        };
        let fan_in = |a: &Array2<F>| 1.0 / (a.nrows() as f64).sqrt();
        fill(&mut p.proj.text_embed, 1.0);
        let s = fan_in(&p.proj.text_w);
        fill(&mut p.proj.text_w, s);
        let s = fan_in(&p.proj.vision_w);
        fill(&mut p.proj.vision_w, s);
        let mut boundary = Array2::zeros((2, cfg.hidden));
        fill(&mut boundary, 0.02);
        p.proj.vision_start.assign(&boundary.row(0));
        p.proj.vision_end.assign(&boundary.row(1));
        let s = fan_in(&p.time_w1);
        fill(&mut p.time_w1, s);
        let s = fan_in(&p.time_w2);
        fill(&mut p.time_w2, s);
        let depth = (2.0 * cfg.layers as f64).sqrt();
        for l in &mut p.layers {
            l.norm1.fill(F::one());
            l.norm2.fill(F::one());
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.w_gate, &mut l.w_up] {
                let s = fan_in(w);
                fill(w, s);
            }
            let s = fan_in(&l.wo) / depth;
            fill(&mut l.wo, s);
            let s = fan_in(&l.w_down) / depth;
            fill(&mut l.w_down, s);
        }
        p.final_norm.fill(F::one());
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut b) in z.blocks_mut() {
            b.fill(F::zero());
        }
        z
    }

    pub fn blocks(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        named_blocks!(self, view, iter, |out: &mut Vec<_>, n, v| out.push((n, v)))
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        named_blocks!(self, view_mut, iter_mut, |out: &mut Vec<_>, n, v| out.push((n, v)))
    }

    pub fn count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, alpha: F) {
        for ((_, mut a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for (_, mut a) in self.blocks_mut() {
            a.mapv_inplace(|x| x * alpha);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, b)| b.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum()
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<G: Real>(&self, cfg: &ModelConfig) -> Params<G> {
        let mut out = Params::<G>::zeros(cfg);
        for ((_, src), (_, mut dst)) in self.blocks().into_iter().zip(out.blocks_mut()) {
            Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = G::of(s.as_f64()));
        }
        out
    }
}
