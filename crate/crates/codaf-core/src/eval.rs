//! Detection boxes and average-precision evaluation.
//!
//! Boxes are corner-form [x0, y0, x1, y1] in pixels with x1 > x0, y1 > y0.
//! Ground truth lives in the IR frame. AP uses greedy score-descending
//! matching and all-points interpolation of the precision envelope;
//! classes absent from the ground truth are excluded from the mean.

use std::collections::BTreeSet;

use crate::error::{CodafError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// Intersection-over-union of two corner-form boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix0 = a[0].max(b[0]);
    let iy0 = a[1].max(b[1]);
    let ix1 = a[2].min(b[2]);
    let iy1 = a[3].min(b[3]);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn validate_boxes(dets: &[Detection], gts: &[GtBox]) -> Result<()> {
    for d in dets {
        if !(d.bbox.iter().all(|v| v.is_finite()) && d.score.is_finite()) {
            return Err(CodafError::data("detection with non-finite box or score".to_string()));
        }
    }
    for g in gts {
        if !g.bbox.iter().all(|v| v.is_finite()) {
            return Err(CodafError::data("ground-truth box with non-finite corner".to_string()));
        }
    }
    Ok(())
}

/// Average precision for one class at one IoU threshold.
///
/// Detections are visited in descending score (ties broken by image id,
/// then insertion order, so results are deterministic); each claims the
/// highest-IoU unmatched ground-truth box in its image at or above the
/// threshold.
fn ap_single_class(
    dets: &[(usize, [f64; 4], f64)], // (image, box, score)
    gts: &[(usize, [f64; 4])],
    thr: f64,
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].2
            .partial_cmp(&dets[a].2)
            .expect("finite scores")
            .then(dets[a].0.cmp(&dets[b].0))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    // (recall, precision) after each detection.
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(dets.len());
    for &di in &order {
        let (img, dbox, _) = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, gbox)) in gts.iter().enumerate() {
            if taken[gi] || gimg != img {
                continue;
            }
            let v = iou(dbox, gbox);
            if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    // All-points interpolation: integrate the running-max precision
    // envelope from the right.
    let mut ap = 0.0;
    let mut env = 0.0;
    let mut prev_recall = f64::NAN;
    for &(r, p) in curve.iter().rev() {
        if prev_recall.is_nan() {
            env = p;
            prev_recall = r;
            continue;
        }
        // Entering a new (lower) recall level: settle the segment above.
        if r < prev_recall {
            ap += (prev_recall - r) * env;
            prev_recall = r;
        }
        env = env.max(p);
    }
    if !prev_recall.is_nan() {
        ap += prev_recall * env;
    }
    ap
}

/// Mean AP over the classes present in the ground truth at one threshold.
pub fn mean_ap(dets: &[Detection], gts: &[GtBox], thr: f64) -> Result<f64> {
    validate_boxes(dets, gts)?;
    if !(0.0..=1.0).contains(&thr) {
        return Err(CodafError::config(format!("IoU threshold {thr} outside [0, 1]")));
    }
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in &classes {
        let d: Vec<(usize, [f64; 4], f64)> = dets
            .iter()
            .filter(|d| d.class_id == c)
            .map(|d| (d.image_id, d.bbox, d.score))
            .collect();
        let g: Vec<(usize, [f64; 4])> = gts
            .iter()
            .filter(|g| g.class_id == c)
            .map(|g| (g.image_id, g.bbox))
            .collect();
        total += ap_single_class(&d, &g, thr);
    }
    Ok(total / classes.len() as f64)
}

/// (AP at IoU 0.5, mean AP over IoU 0.50:0.05:0.95).
pub fn coco_ap(dets: &[Detection], gts: &[GtBox]) -> Result<(f64, f64)> {
    let ap50 = mean_ap(dets, gts, 0.5)?;
    let mut acc = 0.0;
    for i in 0..10 {
        acc += mean_ap(dets, gts, 0.5 + 0.05 * i as f64)?;
    }
    Ok((ap50, acc / 10.0))
}
