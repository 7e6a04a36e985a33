//! AdamW with linear warmup, cosine decay and post-warmup norm clipping.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, Params};
use crate::error::{config_err, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip, inactive during warmup.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 3000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(config_err!(
                "need 0 <= warmup_steps < total_steps, got {} and {}",
                self.warmup_steps,
                self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return Err(config_err!("need 0 <= min_lr <= peak_lr and peak_lr > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("betas must lie in [0, 1)"));
        }
        if self.clip_norm <= 0.0 || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(config_err!("clip_norm and eps must be positive, weight_decay non-negative"));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear from 0 to peak over the warmup, then
    /// cosine down to `min_lr` at the final step.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - 1).saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn in_warmup(&self, step: u64) -> bool {
        step < self.warmup_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F: Real> {
    pub m: Params<F>,
    pub v: Params<F>,
    /// Updates applied so far.
    pub step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            step: 0,
        }
    }

    /// Apply one update. Weight decay is decoupled and only touches matrix
    /// blocks.
    pub fn update(&mut self, params: &mut Params<F>, grads: &Params<F>, cfg: &OptimConfig) -> UpdateStats {
        let lr = cfg.lr_at(self.step);
        let grad_norm = grads.sq_norm().sqrt();
        let clipped = !cfg.in_warmup(self.step) && grad_norm > cfg.clip_norm;
        let gscale = if clipped { cfg.clip_norm / grad_norm } else { 1.0 };
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let (one, gs) = (F::one(), F::of(gscale));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(cfg.eps);
        let decay = F::of(lr * cfg.weight_decay);

        let blocks = params.blocks_mut();
        let gblocks = grads.blocks();
        let mblocks = self.m.blocks_mut();
        let vblocks = self.v.blocks_mut();
        for (((mut p, g), mut m), mut v) in blocks
            .into_iter()
            .map(|(_, b)| b)
            .zip(gblocks.into_iter().map(|(_, b)| b))
            .zip(mblocks.into_iter().map(|(_, b)| b))
            .zip(vblocks.into_iter().map(|(_, b)| b))
        {
            let is_matrix = p.ndim() == 2;
            Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                let g = g * gs;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                if is_matrix {
                    *p -= decay * *p;
                }
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
        self.step += 1;
        UpdateStats { lr, grad_norm, clipped }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimConfig {
            peak_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 10,
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(10) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(99) - 1e-5).abs() < 1e-15);
        assert!(cfg.lr_at(5) < cfg.lr_at(6));
        assert!(cfg.lr_at(50) < cfg.lr_at(20));
    }

    #[test]
    fn paper_hyperparameters_are_defaults() {
        let cfg = OptimConfig::default();
        assert_eq!((cfg.beta1, cfg.beta2), (0.9, 0.95));
        assert_eq!(cfg.weight_decay, 0.01);
        assert_eq!(cfg.clip_norm, 1.0);
    }

    #[test]
    fn invalid_schedule_rejected() {
        let cfg = OptimConfig {
            warmup_steps: 10,
            total_steps: 10,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clipping_only_after_warmup() {
        let mcfg = crate::gradcheck::gradcheck_config();
        let cfg = OptimConfig {
            warmup_steps: 1,
            total_steps: 10,
            ..Default::default()
        };
        let mut p = Params::<f64>::init(&mcfg).unwrap();
        let mut g = p.zeros_like();
        g.head_b.fill(10.0);
        let mut opt = AdamW::new(&mcfg);
        let s0 = opt.update(&mut p, &g, &cfg);
        assert!(!s0.clipped && s0.grad_norm > 1.0);
        let s1 = opt.update(&mut p, &g, &cfg);
        assert!(s1.clipped);
    }
}
