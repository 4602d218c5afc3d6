//! Forecast verification: thresholded CSI (and its average over a threshold
//! set), Heidke skill score, windowed SSIM, and MSE.

use crate::error::{Error, Result};
use crate::grid::{Field, SequenceField};
use crate::real::Real;

/// Pixel counts of the binary contingency table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }
}

/// Binarizes both fields at `tau` and counts the four cells.
pub fn confusion<T: Real>(
    pred: &SequenceField<T>,
    truth: &SequenceField<T>,
    tau: f64,
) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() || pred.frame_shape() != truth.frame_shape() {
        return Err(Error::contract(
            "confusion needs shape-matched prediction and truth",
        ));
    }
    let mut c = ConfusionCounts::default();
    for (pf, tf) in pred.frames().iter().zip(truth.frames()) {
        for (p, t) in pf.data().iter().zip(tf.data()) {
            let p = p.f64() >= tau;
            let t = t.f64() >= tau;
            match (p, t) {
                (true, true) => c.hits += 1,
                (false, true) => c.misses += 1,
                (true, false) => c.false_alarms += 1,
                (false, false) => c.correct_negatives += 1,
            }
        }
    }
    Ok(c)
}

/// Critical success index `TP / (TP + FN + FP)`; 1 when there is nothing to
/// detect and nothing predicted.
pub fn csi(c: &ConfusionCounts) -> f64 {
    let denom = c.hits + c.misses + c.false_alarms;
    if denom == 0 {
        return 1.0;
    }
    c.hits as f64 / denom as f64
}

/// Mean CSI over a threshold set.
pub fn csi_m<T: Real>(
    pred: &SequenceField<T>,
    truth: &SequenceField<T>,
    thresholds: &[f64],
) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::contract("csi_m needs a non-empty threshold list"));
    }
    let mut sum = 0.0;
    for &tau in thresholds {
        sum += csi(&confusion(pred, truth, tau)?);
    }
    Ok(sum / thresholds.len() as f64)
}

/// Heidke skill score; 0 when the denominator vanishes.
pub fn hss(c: &ConfusionCounts) -> f64 {
    let (tp, fn_, fp, tn) = (
        c.hits as f64,
        c.misses as f64,
        c.false_alarms as f64,
        c.correct_negatives as f64,
    );
    let denom = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * (tp * tn - fn_ * fp) / denom
}

/// SSIM window parameters: 11x11 Gaussian, sigma 1.5, unit dynamic range.
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW - 1) / 2;
    let mut w1 = vec![0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, w) in w1.iter_mut().enumerate() {
        let d = i as f64 - r as f64;
        *w = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *w;
    }
    for w in &mut w1 {
        *w /= sum;
    }
    let mut w2 = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w2[y * SSIM_WINDOW + x] = w1[y] * w1[x];
        }
    }
    w2
}

/// Mean local SSIM over all fully interior windows. Frames smaller than the
/// window fall back to one global window over the whole frame.
pub fn ssim<T: Real>(pred: &Field<T>, truth: &Field<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::contract("ssim needs shape-matched frames"));
    }
    if pred.channels() != 1 {
        return Err(Error::contract("ssim expects single-channel frames"));
    }
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Ok(ssim_window_stat(
            &to_f64(pred),
            &to_f64(truth),
            w,
            0,
            0,
            h,
            w,
            &uniform_window(h, w),
        ));
    }
    let window = gaussian_window();
    let a = to_f64(pred);
    let b = to_f64(truth);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..=(h - SSIM_WINDOW) {
        for x in 0..=(w - SSIM_WINDOW) {
            sum += ssim_window_stat(&a, &b, w, y, x, SSIM_WINDOW, SSIM_WINDOW, &window);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

fn to_f64<T: Real>(f: &Field<T>) -> Vec<f64> {
    f.data().iter().map(|v| v.f64()).collect()
}

fn uniform_window(h: usize, w: usize) -> Vec<f64> {
    vec![1.0 / (h * w) as f64; h * w]
}

#[allow(clippy::too_many_arguments)]
fn ssim_window_stat(
    a: &[f64],
    b: &[f64],
    stride: usize,
    oy: usize,
    ox: usize,
    wh: usize,
    ww: usize,
    window: &[f64],
) -> f64 {
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    for y in 0..wh {
        for x in 0..ww {
            let wgt = window[y * ww + x];
            mu_a += wgt * a[(oy + y) * stride + ox + x];
            mu_b += wgt * b[(oy + y) * stride + ox + x];
        }
    }
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for y in 0..wh {
        for x in 0..ww {
            let wgt = window[y * ww + x];
            let da = a[(oy + y) * stride + ox + x] - mu_a;
            let db = b[(oy + y) * stride + ox + x] - mu_b;
            var_a += wgt * da * da;
            var_b += wgt * db * db;
            cov += wgt * da * db;
        }
    }
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Mean SSIM across the frames of a sequence.
pub fn ssim_sequence<T: Real>(pred: &SequenceField<T>, truth: &SequenceField<T>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::contract("ssim needs equal-length sequences"));
    }
    let mut sum = 0.0;
    for (p, t) in pred.frames().iter().zip(truth.frames()) {
        sum += ssim(p, t)?;
    }
    Ok(sum / pred.len() as f64)
}

/// Mean squared error over all pixels and frames.
pub fn mse<T: Real>(pred: &SequenceField<T>, truth: &SequenceField<T>) -> Result<f64> {
    if pred.len() != truth.len() || pred.frame_shape() != truth.frame_shape() {
        return Err(Error::contract("mse needs shape-matched sequences"));
    }
    pred.mse(truth)
}

/// The normalized threshold set used for averaged CSI on synthetic data;
/// the two top entries mirror the usual high-intensity radar cutoffs
/// (181/255 and 219/255).
pub fn default_thresholds() -> Vec<f64> {
    vec![0.125, 0.25, 0.375, 0.5, 0.71, 0.86]
}
