//! Box overlap measures: IoU and Complete IoU.
//!
//! Boxes are closed real rectangles with area `(x2 - x1) * (y2 - y1)`.
//! CIoU follows the usual definition:
//!
//! ```text
//! ciou  = iou - rho^2 / c^2 - alpha * v
//! v     = 4 / pi^2 * (atan(w_a / h_a) - atan(w_b / h_b))^2
//! alpha = v / ((1 - iou) + v),   alpha = 0 when v = 0
//! ```
//!
//! where `rho^2` is the squared distance between box centers and `c^2` the
//! squared diagonal of the smallest enclosing box.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::scene_graph::BBox;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("degenerate box {0:?}: area must be positive and coordinates finite")]
pub struct DegenerateBox(pub BBox);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub iou: f64,
    pub center_distance_sq: f64,
    pub enclosing_diag_sq: f64,
    pub aspect_term_v: f64,
    pub alpha: f64,
    pub ciou: f64,
}

fn ensure_proper(b: &BBox) -> Result<(), DegenerateBox> {
    let finite = b.as_array().iter().all(|c| c.is_finite());
    if finite && b.width() > 0.0 && b.height() > 0.0 {
        Ok(())
    } else {
        Err(DegenerateBox(*b))
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, DegenerateBox> {
    ensure_proper(a)?;
    ensure_proper(b)?;
    Ok(iou_unchecked(a, b))
}

/// Complete IoU with all intermediate terms.
pub fn ciou(a: &BBox, b: &BBox) -> Result<OverlapReport, DegenerateBox> {
    ensure_proper(a)?;
    ensure_proper(b)?;

    let iou = iou_unchecked(a, b);
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let center_distance_sq = (acx - bcx).powi(2) + (acy - bcy).powi(2);
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing_diag_sq = ew * ew + eh * eh;

    if a == b {
        return Ok(OverlapReport {
            iou: 1.0,
            center_distance_sq: 0.0,
            enclosing_diag_sq,
            aspect_term_v: 0.0,
            alpha: 0.0,
            ciou: 1.0,
        });
    }

    let dtheta = (a.width() / a.height()).atan() - (b.width() / b.height()).atan();
    let aspect_term_v = 4.0 / (PI * PI) * dtheta * dtheta;
    let alpha = if aspect_term_v == 0.0 { 0.0 } else { aspect_term_v / ((1.0 - iou) + aspect_term_v) };
    let ciou = iou - center_distance_sq / enclosing_diag_sq - alpha * aspect_term_v;

    Ok(OverlapReport { iou, center_distance_sq, enclosing_diag_sq, aspect_term_v, alpha, ciou })
}
