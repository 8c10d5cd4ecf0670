//! End-point error metrics.

use crate::error::{Error, Result};
use crate::warp::FlowField;

fn epe_per_pixel(est: &FlowField<f32>, gt: &FlowField<f32>, mask: Option<&[bool]>) -> Result<Vec<(f64, f64)>> {
    if est.height() != gt.height() {
        return Err(Error::ShapeMismatch { op: "metric", dim: "height", expected: gt.height(), actual: est.height() });
    }
    if est.width() != gt.width() {
        return Err(Error::ShapeMismatch { op: "metric", dim: "width", expected: gt.width(), actual: est.width() });
    }
    let n = gt.height() * gt.width();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::ShapeMismatch { op: "metric", dim: "mask length", expected: n, actual: m.len() });
        }
    }
    let out: Vec<(f64, f64)> = (0..n)
        .filter(|&p| mask.is_none_or(|m| m[p]))
        .map(|p| {
            let (gu, gv) = (gt.u()[p] as f64, gt.v()[p] as f64);
            let du = est.u()[p] as f64 - gu;
            let dv = est.v()[p] as f64 - gv;
            (du.hypot(dv), gu.hypot(gv))
        })
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(out)
}

/// Mean end-point error over valid pixels.
pub fn aee(est: &FlowField<f32>, gt: &FlowField<f32>, mask: Option<&[bool]>) -> Result<f64> {
    let e = epe_per_pixel(est, gt, mask)?;
    Ok(e.iter().map(|p| p.0).sum::<f64>() / e.len() as f64)
}

/// Percentage of valid pixels whose error is at least 3 px and at least 5%
/// of the ground-truth magnitude.
pub fn fl_all(est: &FlowField<f32>, gt: &FlowField<f32>, mask: Option<&[bool]>) -> Result<f64> {
    let e = epe_per_pixel(est, gt, mask)?;
    let outliers = e.iter().filter(|&&(epe, mag)| epe >= 3.0 && epe >= 0.05 * mag).count();
    Ok(100.0 * outliers as f64 / e.len() as f64)
}
