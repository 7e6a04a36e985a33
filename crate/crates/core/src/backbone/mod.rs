//! Dense pre-norm transformer over packed unified sequences.
//!
//! Every block is `x + attn(mod(norm(x)))` then `x + mlp(mod(norm(x)))`,
//! where `mod` is a per-document scale/shift computed from the timestep.
//! Attention is full inside each packed document and absent across them.
//! Gradients are computed analytically by [`Backbone::loss_and_grad`].

mod params;

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

pub use params::{LayerParams, ModelConfig, Params};

use crate::error::{contract_err, input_err, Result};
use crate::packing::{doc_loss_weights, PackedBatch};
use crate::real::Real;
use crate::rope::{RopeTables, Rotations};

/// Scale applied to `t` before the sinusoidal features.
const TIME_SCALE: f64 = 1000.0;

/// Model shape plus the rotary tables derived from it.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub tables: RopeTables,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F: Real> {
    /// `rows x c_vision` velocity prediction for every packed row.
    pub velocity: Array2<F>,
    /// Residual stream entering each block, then the final stream.
    pub activations: Option<Vec<Array2<F>>>,
}

#[derive(Debug, Clone)]
pub struct LossOutput<F: Real> {
    pub loss: f64,
    pub per_doc: Vec<f64>,
    pub grads: Params<F>,
}

struct LayerCache<F: Real> {
    x: Array2<F>,
    nhat1: Array2<F>,
    rinv1: Array1<F>,
    a1: Array2<F>,
    qr: Array2<F>,
    kr: Array2<F>,
    v: Array2<F>,
    /// `[block][head]` softmax matrices.
    probs: Vec<Vec<Array2<F>>>,
    o: Array2<F>,
    nhat2: Array2<F>,
    rinv2: Array1<F>,
    a2: Array2<F>,
    u: Array2<F>,
    up: Array2<F>,
    hact: Array2<F>,
    mods: Array2<F>,
}

struct Cache<F: Real> {
    row_docs: Vec<usize>,
    blocks: Vec<Range<usize>>,
    rot: Rotations,
    temb_feat: Array2<F>,
    h1: Array2<F>,
    a1t: Array2<F>,
    temb: Array2<F>,
    cond: Array2<F>,
    layers: Vec<LayerCache<F>>,
    xf: Array2<F>,
    nhatf: Array2<F>,
    rinvf: Array1<F>,
    af: Array2<F>,
    modf: Array2<F>,
}

fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

fn silu_grad<F: Real>(x: F) -> F {
    let sig = F::one() / (F::one() + (-x).exp());
    sig * (F::one() + x * (F::one() - sig))
}

/// Sinusoidal features of `t`: `[cos | sin]`, `dim` wide.
pub fn timestep_features<F: Real>(t: f64, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[k] = F::of(arg.cos());
        out[half + k] = F::of(arg.sin());
    }
    out
}

fn rms_norm<F: Real>(x: &Array2<F>, eps: f64) -> (Array2<F>, Array1<F>) {
    let c = F::of(x.ncols() as f64);
    let eps = F::of(eps);
    let rinv = x.map_axis(Axis(1), |r| {
        let ms = r.iter().fold(F::zero(), |a, &v| a + v * v) / c;
        F::one() / (ms + eps).sqrt()
    });
    let nhat = x * &rinv.view().insert_axis(Axis(1));
    (nhat, rinv)
}

fn rms_norm_backward<F: Real>(d_nhat: &Array2<F>, nhat: &Array2<F>, rinv: &Array1<F>) -> Array2<F> {
    let c = F::of(nhat.ncols() as f64);
    let mut dx = d_nhat.clone();
    for ((mut row, n), &r) in dx.axis_iter_mut(Axis(0)).zip(nhat.axis_iter(Axis(0))).zip(rinv) {
        let dot = row.iter().zip(n.iter()).fold(F::zero(), |a, (&d, &v)| a + d * v) / c;
        Zip::from(&mut row).and(&n).for_each(|d, &v| *d = r * (*d - v * dot));
    }
    dx
}

/// `n * (1 + scale[doc]) + shift[doc]` with `shift`/`scale` taken from
/// column blocks `shift_col`/`shift_col + 1` of `mods`.
fn modulate<F: Real>(n: &Array2<F>, mods: &Array2<F>, shift_col: usize, row_docs: &[usize]) -> Array2<F> {
    let c = n.ncols();
    let mut out = n.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let m = mods.row(row_docs[i]);
        let shift = m.slice(s![shift_col * c..(shift_col + 1) * c]);
        let scale = m.slice(s![(shift_col + 1) * c..(shift_col + 2) * c]);
        Zip::from(&mut row)
            .and(&shift)
            .and(&scale)
            .for_each(|x, &sh, &sc| *x = *x * (F::one() + sc) + sh);
    }
    out
}

/// Returns `d_n` and accumulates shift/scale gradients into `d_mods`.
fn modulate_backward<F: Real>(
    d_a: &Array2<F>,
    n: &Array2<F>,
    mods: &Array2<F>,
    shift_col: usize,
    row_docs: &[usize],
    d_mods: &mut Array2<F>,
) -> Array2<F> {
    let c = n.ncols();
    let mut d_n = d_a.clone();
    for (i, mut row) in d_n.axis_iter_mut(Axis(0)).enumerate() {
        let d = row_docs[i];
        let scale = mods.slice(s![d, (shift_col + 1) * c..(shift_col + 2) * c]);
        {
            let mut dm = d_mods.row_mut(d);
            let (mut d_shift, mut d_scale) = dm
                .slice_mut(s![shift_col * c..(shift_col + 2) * c])
                .split_at(Axis(0), c);
            Zip::from(&mut d_shift).and(&row).for_each(|a, &g| *a += g);
            Zip::from(&mut d_scale)
                .and(&row)
                .and(n.row(i))
                .for_each(|a, &g, &v| *a += g * v);
        }
        Zip::from(&mut row).and(&scale).for_each(|g, &sc| *g = *g * (F::one() + sc));
    }
    d_n
}

fn scale_cols<F: Real>(x: &Array2<F>, g: &Array1<F>) -> Array2<F> {
    x * &g.view().insert_axis(Axis(0))
}

fn rotate_heads<F: Real>(m: &mut Array2<F>, rot: &Rotations, head_dim: usize, inverse: bool) {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let slice = row.as_slice_mut().expect("standard layout rows");
        for head in slice.chunks_mut(head_dim) {
            rot.rotate_row(i, head, inverse);
        }
    }
}

fn softmax_rows<F: Real>(s: &mut Array2<F>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        let mut sum = F::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

impl Backbone {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tables = RopeTables::build(&cfg.rope)?;
        Ok(Self { cfg, tables })
    }

    pub fn init_params<F: Real>(&self) -> Result<Params<F>> {
        Params::init(&self.cfg)
    }

    fn check_batch(&self, batch: &PackedBatch) -> Result<()> {
        batch.validate_attention()?;
        for d in &batch.docs {
            if !(0.0..=1.0).contains(&d.t) {
                return Err(input_err!("timestep {} of document {} is outside [0, 1]", d.t, d.id));
            }
            if d.seq.coords.len() != d.seq.len() {
                return Err(contract_err!("document {} has no coordinates for every row", d.id));
            }
        }
        Ok(())
    }

    pub fn forward<F: Real>(&self, params: &Params<F>, batch: &PackedBatch) -> Result<ForwardOutput<F>> {
        let (velocity, cache) = self.forward_cached(params, batch)?;
        let mut acts: Vec<Array2<F>> = cache.layers.into_iter().map(|l| l.x).collect();
        acts.push(cache.xf);
        Ok(ForwardOutput {
            velocity,
            activations: Some(acts),
        })
    }

    /// Velocity prediction without retaining activations.
    pub fn predict<F: Real>(&self, params: &Params<F>, batch: &PackedBatch) -> Result<Array2<F>> {
        Ok(self.forward_cached(params, batch)?.0)
    }

    fn forward_cached<F: Real>(&self, p: &Params<F>, batch: &PackedBatch) -> Result<(Array2<F>, Cache<F>)> {
        self.check_batch(batch)?;
        let cfg = &self.cfg;
        let c = cfg.hidden;
        let rows = batch.rows();
        let row_docs = batch.row_docs();
        let blocks = batch.attention.blocks();
        let rot = self.tables.rotations(&batch.coords().as_rows());

        let mut x = Array2::<F>::zeros((rows, c));
        for (doc, span) in batch.docs.iter().zip(&batch.doc_spans) {
            let e = p.proj.embed(&doc.seq)?;
            x.slice_mut(s![span.start..span.end, ..]).assign(&e);
        }

        let n_docs = batch.docs.len();
        let mut temb_feat = Array2::<F>::zeros((n_docs, cfg.time_freq_dim));
        for (d, doc) in batch.docs.iter().enumerate() {
            temb_feat.row_mut(d).assign(&timestep_features::<F>(doc.t, cfg.time_freq_dim));
        }
        let h1 = temb_feat.dot(&p.time_w1) + &p.time_b1;
        let a1t = h1.mapv(silu);
        let temb = a1t.dot(&p.time_w2) + &p.time_b2;
        let cond = temb.mapv(silu);

        let scale = F::of(1.0 / (cfg.head_dim as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &p.layers {
            let mods = cond.dot(&lp.mod_w) + &lp.mod_b;
            let (nhat1, rinv1) = rms_norm(&x, cfg.norm_eps);
            let a1 = modulate(&scale_cols(&nhat1, &lp.norm1), &mods, 0, &row_docs);
            let mut qr = a1.dot(&lp.wq);
            let mut kr = a1.dot(&lp.wk);
            let v = a1.dot(&lp.wv);
            rotate_heads(&mut qr, &rot, cfg.head_dim, false);
            rotate_heads(&mut kr, &rot, cfg.head_dim, false);

            let per_block: Vec<(Array2<F>, Vec<Array2<F>>)> = blocks
                .par_iter()
                .map(|blk| attend_block(&qr, &kr, &v, blk.clone(), cfg.heads, cfg.head_dim, scale))
                .collect();
            let mut o = Array2::<F>::zeros((rows, c));
            let mut probs = Vec::with_capacity(blocks.len());
            for (blk, (ob, pb)) in blocks.iter().zip(per_block) {
                o.slice_mut(s![blk.clone(), ..]).assign(&ob);
                probs.push(pb);
            }
            let x2 = &x + &o.dot(&lp.wo);

            let (nhat2, rinv2) = rms_norm(&x2, cfg.norm_eps);
            let a2 = modulate(&scale_cols(&nhat2, &lp.norm2), &mods, 2, &row_docs);
            let u = a2.dot(&lp.w_gate);
            let up = a2.dot(&lp.w_up);
            let mut hact = u.mapv(silu);
            hact *= &up;
            let x3 = &x2 + &hact.dot(&lp.w_down);

            layers.push(LayerCache {
                x: std::mem::replace(&mut x, x3),
                nhat1,
                rinv1,
                a1,
                qr,
                kr,
                v,
                probs,
                o,
                nhat2,
                rinv2,
                a2,
                u,
                up,
                hact,
                mods,
            });
        }

        let modf = cond.dot(&p.final_mod_w) + &p.final_mod_b;
        let (nhatf, rinvf) = rms_norm(&x, cfg.norm_eps);
        let af = modulate(&scale_cols(&nhatf, &p.final_norm), &modf, 0, &row_docs);
        let out = af.dot(&p.head_w) + &p.head_b;
        Ok((
            out,
            Cache {
                row_docs,
                blocks,
                rot,
                temb_feat,
                h1,
                a1t,
                temb,
                cond,
                layers,
                xf: x,
                nhatf,
                rinvf,
                af,
                modf,
            },
        ))
    }

    /// Mean over documents of the per-document mean squared velocity error
    /// on target vision rows, with exact gradients.
    pub fn loss_and_grad<F: Real>(&self, params: &Params<F>, batch: &PackedBatch) -> Result<LossOutput<F>> {
        let w = doc_loss_weights(batch);
        self.loss_and_grad_weighted(params, batch, &w)
    }

    /// Like [`Backbone::loss_and_grad`] with explicit per-document weights.
    pub fn loss_and_grad_weighted<F: Real>(
        &self,
        params: &Params<F>,
        batch: &PackedBatch,
        weights: &[f64],
    ) -> Result<LossOutput<F>> {
        if weights.len() != batch.docs.len() {
            return Err(contract_err!("{} weights for {} documents", weights.len(), batch.docs.len()));
        }
        let (out, cache) = self.forward_cached(params, batch)?;
        let (loss, per_doc, d_out) = velocity_loss(&out, batch, weights)?;
        let grads = self.backward(params, batch, &cache, d_out)?;
        Ok(LossOutput { loss, per_doc, grads })
    }

    fn backward<F: Real>(
        &self,
        p: &Params<F>,
        batch: &PackedBatch,
        cache: &Cache<F>,
        d_out: Array2<F>,
    ) -> Result<Params<F>> {
        let cfg = &self.cfg;
        let mut g = p.zeros_like();
        let row_docs = &cache.row_docs;
        let n_docs = batch.docs.len();

        g.head_w = cache.af.t().dot(&d_out);
        g.head_b = d_out.sum_axis(Axis(0));
        let d_af = d_out.dot(&p.head_w.t());
        let mut d_modf = Array2::<F>::zeros(cache.modf.raw_dim());
        let nf = scale_cols(&cache.nhatf, &p.final_norm);
        let d_nf = modulate_backward(&d_af, &nf, &cache.modf, 0, row_docs, &mut d_modf);
        g.final_norm = (&d_nf * &cache.nhatf).sum_axis(Axis(0));
        let mut dx = rms_norm_backward(&scale_cols(&d_nf, &p.final_norm), &cache.nhatf, &cache.rinvf);
        g.final_mod_w = cache.cond.t().dot(&d_modf);
        g.final_mod_b = d_modf.sum_axis(Axis(0));
        let mut d_cond = d_modf.dot(&p.final_mod_w.t());

        let scale = F::of(1.0 / (cfg.head_dim as f64).sqrt());
        for (li, (lp, lc)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
            let gl = &mut g.layers[li];
            let mut d_mods = Array2::<F>::zeros(lc.mods.raw_dim());

            // MLP branch
            gl.w_down = lc.hact.t().dot(&dx);
            let d_hact = dx.dot(&lp.w_down.t());
            let mut d_up = lc.u.mapv(silu);
            d_up *= &d_hact;
            let mut d_u = lc.u.mapv(silu_grad);
            d_u *= &d_hact;
            d_u *= &lc.up;
            gl.w_gate = lc.a2.t().dot(&d_u);
            gl.w_up = lc.a2.t().dot(&d_up);
            let d_a2 = d_u.dot(&lp.w_gate.t()) + d_up.dot(&lp.w_up.t());
            let n2 = scale_cols(&lc.nhat2, &lp.norm2);
            let d_n2 = modulate_backward(&d_a2, &n2, &lc.mods, 2, row_docs, &mut d_mods);
            gl.norm2 = (&d_n2 * &lc.nhat2).sum_axis(Axis(0));
            let d_x2 = &dx + &rms_norm_backward(&scale_cols(&d_n2, &lp.norm2), &lc.nhat2, &lc.rinv2);

            // attention branch
            gl.wo = lc.o.t().dot(&d_x2);
            let d_o = d_x2.dot(&lp.wo.t());
            let per_block: Vec<(Array2<F>, Array2<F>, Array2<F>)> = cache
                .blocks
                .par_iter()
                .zip(lc.probs.par_iter())
                .map(|(blk, probs)| {
                    attend_block_backward(&d_o, &lc.qr, &lc.kr, &lc.v, probs, blk.clone(), cfg.head_dim, scale)
                })
                .collect();
            let mut d_qr = Array2::<F>::zeros(lc.qr.raw_dim());
            let mut d_kr = Array2::<F>::zeros(lc.kr.raw_dim());
            let mut d_v = Array2::<F>::zeros(lc.v.raw_dim());
            for (blk, (dq, dk, dv)) in cache.blocks.iter().zip(per_block) {
                d_qr.slice_mut(s![blk.clone(), ..]).assign(&dq);
                d_kr.slice_mut(s![blk.clone(), ..]).assign(&dk);
                d_v.slice_mut(s![blk.clone(), ..]).assign(&dv);
            }
            rotate_heads(&mut d_qr, &cache.rot, cfg.head_dim, true);
            rotate_heads(&mut d_kr, &cache.rot, cfg.head_dim, true);
            gl.wq = lc.a1.t().dot(&d_qr);
            gl.wk = lc.a1.t().dot(&d_kr);
            gl.wv = lc.a1.t().dot(&d_v);
            let d_a1 = d_qr.dot(&lp.wq.t()) + d_kr.dot(&lp.wk.t()) + d_v.dot(&lp.wv.t());
            let n1 = scale_cols(&lc.nhat1, &lp.norm1);
            let d_n1 = modulate_backward(&d_a1, &n1, &lc.mods, 0, row_docs, &mut d_mods);
            gl.norm1 = (&d_n1 * &lc.nhat1).sum_axis(Axis(0));
            dx = d_x2 + rms_norm_backward(&scale_cols(&d_n1, &lp.norm1), &lc.nhat1, &lc.rinv1);

            gl.mod_w = cache.cond.t().dot(&d_mods);
            gl.mod_b = d_mods.sum_axis(Axis(0));
            d_cond += &d_mods.dot(&lp.mod_w.t());
        }

        // timestep MLP
        let mut d_temb = cache.temb.mapv(silu_grad);
        d_temb *= &d_cond;
        g.time_w2 = cache.a1t.t().dot(&d_temb);
        g.time_b2 = d_temb.sum_axis(Axis(0));
        let mut d_h1 = cache.h1.mapv(silu_grad);
        d_h1 *= &d_temb.dot(&p.time_w2.t());
        g.time_w1 = cache.temb_feat.t().dot(&d_h1);
        g.time_b1 = d_h1.sum_axis(Axis(0));
        debug_assert_eq!(d_cond.nrows(), n_docs);

        for (doc, span) in batch.docs.iter().zip(&batch.doc_spans) {
            p.proj.backward(&doc.seq, dx.slice(s![span.start..span.end, ..]), &mut g.proj);
        }
        Ok(g)
    }
}

/// Full attention inside one block of rows; returns the block's output rows
/// and the softmax matrix of every head.
fn attend_block<F: Real>(
    qr: &Array2<F>,
    kr: &Array2<F>,
    v: &Array2<F>,
    blk: Range<usize>,
    heads: usize,
    head_dim: usize,
    scale: F,
) -> (Array2<F>, Vec<Array2<F>>) {
    let n = blk.len();
    let mut o = Array2::<F>::zeros((n, heads * head_dim));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let q = qr.slice(s![blk.clone(), cols.clone()]);
        let k = kr.slice(s![blk.clone(), cols.clone()]);
        let vv = v.slice(s![blk.clone(), cols.clone()]);
        let mut sc = q.dot(&k.t());
        sc *= scale;
        softmax_rows(&mut sc);
        o.slice_mut(s![.., cols]).assign(&sc.dot(&vv));
        probs.push(sc);
    }
    (o, probs)
}

#[allow(clippy::too_many_arguments)]
fn attend_block_backward<F: Real>(
    d_o: &Array2<F>,
    qr: &Array2<F>,
    kr: &Array2<F>,
    v: &Array2<F>,
    probs: &[Array2<F>],
    blk: Range<usize>,
    head_dim: usize,
    scale: F,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let n = blk.len();
    let width = qr.ncols();
    let mut dq = Array2::<F>::zeros((n, width));
    let mut dk = Array2::<F>::zeros((n, width));
    let mut dv = Array2::<F>::zeros((n, width));
    for (h, p) in probs.iter().enumerate() {
        let cols = h * head_dim..(h + 1) * head_dim;
        let q = qr.slice(s![blk.clone(), cols.clone()]);
        let k = kr.slice(s![blk.clone(), cols.clone()]);
        let vv = v.slice(s![blk.clone(), cols.clone()]);
        let dob = d_o.slice(s![blk.clone(), cols.clone()]);
        dv.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&dob));
        let mut ds = dob.dot(&vv.t());
        softmax_backward_inplace(&mut ds, p.view());
        ds *= scale;
        dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&k));
        dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&q));
    }
    (dq, dk, dv)
}

/// Turns `dP` into `dS` for row-wise softmax `P`.
fn softmax_backward_inplace<F: Real>(dp: &mut Array2<F>, p: ArrayView2<F>) {
    for (mut drow, prow) in dp.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
        let dot = drow.iter().zip(prow.iter()).fold(F::zero(), |a, (&d, &q)| a + d * q);
        Zip::from(&mut drow).and(&prow).for_each(|d, &q| *d = q * (*d - dot));
    }
}

/// Weighted mean squared error over each document's target rows and its
/// gradient with respect to the prediction.
fn velocity_loss<F: Real>(out: &Array2<F>, batch: &PackedBatch, weights: &[f64]) -> Result<(f64, Vec<f64>, Array2<F>)> {
    let mut d_out = Array2::<F>::zeros(out.raw_dim());
    let mut total = 0.0;
    let mut per_doc = Vec::with_capacity(batch.docs.len());
    for (d, doc) in batch.docs.iter().enumerate() {
        let span = batch
            .target_span(d)
            .ok_or_else(|| contract_err!("document {} has no target segment", doc.id))?;
        let vel = doc
            .velocity
            .as_ref()
            .ok_or_else(|| contract_err!("document {} has no velocity target", doc.id))?;
        let n = span.end - span.start;
        if vel.nrows() != n || vel.ncols() != out.ncols() {
            return Err(contract_err!(
                "velocity target {:?} does not match target span of {n} rows x {}",
                vel.dim(),
                out.ncols()
            ));
        }
        let count = (n * out.ncols()) as f64;
        let pred = out.slice(s![span.start..span.end, ..]);
        let mut sq = 0.0;
        let coef = F::of(2.0 * weights[d] / count);
        let mut dslice = d_out.slice_mut(s![span.start..span.end, ..]);
        Zip::from(&mut dslice).and(&pred).and(vel).for_each(|g, &y, &t| {
            let diff = y - F::of(t as f64);
            sq += diff.as_f64() * diff.as_f64();
            *g = coef * diff;
        });
        let mse = sq / count;
        per_doc.push(mse);
        total += weights[d] * mse;
    }
    Ok((total, per_doc, d_out))
}
