//! Evaluation metrics and the stereo log-disparity loss.

use crate::error::{Error, Result};
use crate::io::RawMap;

pub const STEREO_EPS: f64 = 1e-3;
pub const DELTA1_THRESHOLD: f64 = 1.25;

fn same_size(pred: &RawMap, gt: &RawMap, channels: usize) -> Result<()> {
    if pred.channels != channels || gt.channels != channels {
        return Err(Error::Format(format!(
            "expected {channels}-channel maps, got {} and {}",
            pred.channels, gt.channels
        )));
    }
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::dim(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

fn check_valid(valid: Option<&[bool]>, n: usize) -> Result<()> {
    match valid {
        Some(v) if v.len() != n => Err(Error::dim(format!("valid mask has {} entries for {n} pixels", v.len()))),
        _ => Ok(()),
    }
}

fn mean(sum: f64, count: usize, what: &str) -> Result<f64> {
    if count == 0 {
        return Err(Error::Empty(format!("{what}: no valid pixels")));
    }
    Ok(sum / count as f64)
}

/// Average endpoint error of two-channel flow fields over `valid` pixels
/// (all pixels when `None`).
pub fn aepe(pred: &RawMap, gt: &RawMap, valid: Option<&[bool]>) -> Result<f64> {
    same_size(pred, gt, 2)?;
    let n = gt.height * gt.width;
    check_valid(valid, n)?;
    let (mut sum, mut count) = (0.0, 0);
    for i in 0..n {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let du = (pred.data[2 * i] - gt.data[2 * i]) as f64;
        let dv = (pred.data[2 * i + 1] - gt.data[2 * i + 1]) as f64;
        sum += du.hypot(dv);
        count += 1;
    }
    mean(sum, count, "AEPE")
}

fn usable_gt(g: f32) -> bool {
    g.is_finite() && g > 0.0
}

/// Fraction of pixels with `max(pred/gt, gt/pred) < threshold` over `gt > 0`.
pub fn delta1(pred: &[f32], gt: &[f32], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let (mut hit, mut count) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if !usable_gt(g) {
            continue;
        }
        count += 1;
        let (p, g) = (p as f64, g as f64);
        if p > 0.0 && (p / g).max(g / p) < threshold {
            hit += 1;
        }
    }
    mean(hit as f64, count, "delta1")
}

/// Error rate: fraction of valid (`gt > 0`) pixels whose disparity error
/// exceeds both 3 px and 5% of the ground truth.
pub fn bad3(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let (mut bad, mut count) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if !usable_gt(g) {
            continue;
        }
        count += 1;
        let err = (p as f64 - g as f64).abs();
        if !(err <= 3.0 || err <= 0.05 * g as f64) {
            bad += 1;
        }
    }
    mean(bad as f64, count, "bad3")
}

/// Mean absolute error over valid pixels, times 1000.
pub fn l1x1000(pred: &[f32], gt: &[f32], valid: Option<&[bool]>) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    check_valid(valid, gt.len())?;
    let (mut sum, mut count) = (0.0, 0);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        sum += (p as f64 - g as f64).abs();
        count += 1;
    }
    Ok(1000.0 * mean(sum, count, "L1")?)
}

/// Mean of `(ln max(pred, eps) - ln max(gt, eps))²` over finite-gt pixels.
pub fn stereo_mse_log_loss(pred: &[f32], gt: &[f32], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        if !g.is_finite() {
            continue;
        }
        let d = (p as f64).max(eps).ln() - (g as f64).max(eps).ln();
        sum += d * d;
        count += 1;
    }
    mean(sum, count, "stereo loss")
}
