use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::scene::Color;
use crate::error::{dim_err, Result};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    /// Inside the edit mask; capped when the region is empty or exact.
    pub edit_psnr: f64,
    /// Outside the edit mask.
    pub preserve_psnr: f64,
    /// Every outside-mask pixel equal after 8-bit quantization.
    pub preserve_exact: bool,
}

/// PSNR for signals in `[0, 1]` from a mean squared error.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn check_shapes(pred: &Array4<f32>, gt: &Array4<f32>, mask: &Array3<bool>) -> Result<()> {
    let (t, h, w, c) = gt.dim();
    if pred.dim() != gt.dim() || mask.dim() != (t, h, w) || c != 3 {
        return Err(dim_err!(
            "prediction {:?}, ground truth {:?} and mask {:?} disagree",
            pred.dim(),
            gt.dim(),
            mask.dim()
        ));
    }
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Compare a predicted clip against ground truth. Predictions are clamped
/// to `[0, 1]` first.
pub fn eval_edit(pred: &Array4<f32>, gt: &Array4<f32>, mask: &Array3<bool>) -> Result<EditMetrics> {
    check_shapes(pred, gt, mask)?;
    let (mut se_in, mut n_in, mut se_out, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
    let mut exact = true;
    for ((f, y, x), &m) in mask.indexed_iter() {
        for c in 0..3 {
            let p = pred[[f, y, x, c]].clamp(0.0, 1.0);
            let g = gt[[f, y, x, c]];
            let d = (p as f64 - g as f64).powi(2);
            if m {
                se_in += d;
                n_in += 1;
            } else {
                se_out += d;
                n_out += 1;
                exact &= quantize(p) == quantize(g);
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EditMetrics {
        edit_psnr: psnr(mean(se_in, n_in)),
        preserve_psnr: psnr(mean(se_out, n_out)),
        preserve_exact: exact,
    })
}

/// Fraction of masked pixels whose nearest palette color matches the
/// ground truth's; 1.0 for an empty mask.
pub fn palette_accuracy(pred: &Array4<f32>, gt: &Array4<f32>, mask: &Array3<bool>) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for ((f, y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let p = [pred[[f, y, x, 0]], pred[[f, y, x, 1]], pred[[f, y, x, 2]]];
        let g = [gt[[f, y, x, 0]], gt[[f, y, x, 1]], gt[[f, y, x, 2]]];
        total += 1;
        hit += usize::from(Color::nearest(p) == Color::nearest(g));
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_capped() {
        let gt = Array4::from_elem((1, 2, 2, 3), 0.5f32);
        let mut mask = Array3::from_elem((1, 2, 2), false);
        mask[[0, 0, 0]] = true;
        let m = eval_edit(&gt, &gt, &mask).unwrap();
        assert_eq!((m.edit_psnr, m.preserve_psnr, m.preserve_exact), (PSNR_CAP, PSNR_CAP, true));
    }

    #[test]
    fn known_error_level() {
        let gt = Array4::zeros((1, 2, 2, 3));
        let pred = Array4::from_elem((1, 2, 2, 3), 0.1f32);
        let mask = Array3::from_elem((1, 2, 2), true);
        let m = eval_edit(&pred, &gt, &mask).unwrap();
        assert!((m.edit_psnr - 20.0).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        let gt = Array4::<f32>::zeros((1, 2, 2, 3));
        let pred = Array4::<f32>::zeros((1, 2, 3, 3));
        let mask = Array3::from_elem((1, 2, 2), true);
        assert!(matches!(eval_edit(&pred, &gt, &mask), Err(crate::Error::Dimension(_))));
    }
}
