use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::geometry::BBox;

/// IoU a proposal needs to count as a detection of a ground-truth box.
pub const DEFAULT_AP_THRESHOLD: f64 = 0.2;

/// Scored proposals and ground truth of one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApImage {
    pub proposals: Vec<BBox>,
    pub scores: Vec<f64>,
    pub gt_boxes: Vec<BBox>,
}

/// Average precision over a corpus.
///
/// Proposals from every image are ranked together by descending score; equal
/// scores keep corpus order (image, then proposal index). Walking the ranking,
/// each proposal claims the unmatched ground-truth box of its image with the
/// highest IoU at or above `threshold`, or is a false positive. AP is the area
/// under the all-points interpolated precision-recall curve. `None` if the
/// corpus has no ground-truth boxes.
pub fn average_precision(images: &[ApImage], threshold: f64) -> Result<Option<f64>, MetricsError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MetricsError::Invalid(format!(
            "IoU threshold {threshold} outside (0, 1]"
        )));
    }
    let mut ranked = Vec::new();
    for (m, img) in images.iter().enumerate() {
        if img.proposals.len() != img.scores.len() {
            return Err(MetricsError::Length(img.scores.len(), img.proposals.len()));
        }
        if img.scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricsError::Invalid("non-finite detection score".into()));
        }
        ranked.extend((0..img.proposals.len()).map(|i| (img.scores[i], m, i)));
    }
    let n_gt: usize = images.iter().map(|i| i.gt_boxes.len()).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    // Stable sort: ties stay in corpus order.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut matched: Vec<Vec<bool>> = images.iter().map(|i| vec![false; i.gt_boxes.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, &(_, m, i)) in ranked.iter().enumerate() {
        let b = &images[m].proposals[i];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in images[m].gt_boxes.iter().enumerate() {
            if matched[m][g] {
                continue;
            }
            let iou = b.iou(gt);
            if iou >= threshold && best.is_none_or(|(v, _)| iou > v) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            matched[m][g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(Some(interpolated_area(&curve)))
}

/// `Σ (r_k - r_{k-1}) · max_{j ≥ k} p_j` over `(recall, precision)` points.
fn interpolated_area(curve: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; curve.len()];
    let mut running: f64 = 0.0;
    for k in (0..curve.len()).rev() {
        running = running.max(curve[k].1);
        envelope[k] = running;
    }
    let mut prev = 0.0;
    let mut area = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        area += (r - prev) * envelope[k];
        prev = r;
    }
    area
}

/// AP computed separately for each question class (images grouped by the
/// class they ask about), then averaged over classes with ground truth.
pub fn class_pooled_ap(images: &[(usize, ApImage)], threshold: f64) -> Result<Option<f64>, MetricsError> {
    let mut groups: BTreeMap<usize, Vec<ApImage>> = BTreeMap::new();
    for (c, img) in images {
        groups.entry(*c).or_default().push(img.clone());
    }
    let mut aps = Vec::new();
    for imgs in groups.values() {
        if let Some(ap) = average_precision(imgs, threshold)? {
            aps.push(ap);
        }
    }
    Ok((!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64))
}
