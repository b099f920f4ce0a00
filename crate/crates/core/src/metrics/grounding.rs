use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::geometry::BBox;

/// Exact area of a union of axis-aligned rectangles by coordinate
/// compression: every cell of the grid spanned by the distinct edges is
/// either fully covered or fully uncovered.
pub fn rect_union_area(rects: &[BBox]) -> f64 {
    let rects: Vec<&BBox> = rects.iter().filter(|r| r.is_proper()).collect();
    if rects.is_empty() {
        return 0.0;
    }
    let edges = |f: &dyn Fn(&BBox) -> [f64; 2]| -> Vec<f64> {
        let mut v: Vec<f64> = rects.iter().flat_map(|r| f(r)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let xs = edges(&|r| [r.x1, r.x2]);
    let ys = edges(&|r| [r.y1, r.y2]);
    let mut area = 0.0;
    for i in 0..xs.len() - 1 {
        let (x0, x1) = (xs[i], xs[i + 1]);
        for j in 0..ys.len() - 1 {
            let (y0, y1) = (ys[j], ys[j + 1]);
            if rects
                .iter()
                .any(|r| r.x1 <= x0 && x1 <= r.x2 && r.y1 <= y0 && y1 <= r.y2)
            {
                area += (x1 - x0) * (y1 - y0);
            }
        }
    }
    area
}

/// Area of `b ∩ (∪ gts)`.
pub fn rect_union_intersection(b: &BBox, gts: &[BBox]) -> f64 {
    let clipped: Vec<BBox> = gts.iter().filter_map(|g| g.intersection(b)).collect();
    rect_union_area(&clipped)
}

/// Fraction of `b` covered by the ground-truth union; zero for a degenerate box.
pub fn region_precision(b: &BBox, gts: &[BBox]) -> f64 {
    let a = b.area();
    if !(a > 0.0) {
        return 0.0;
    }
    (rect_union_intersection(b, gts) / a).clamp(0.0, 1.0)
}

/// Grounding bookkeeping for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingEval {
    pub proposals: Vec<BBox>,
    pub scores: Vec<f64>,
    pub gt_boxes: Vec<BBox>,
    /// Area of the ground-truth union.
    pub gt_area: f64,
    pub precisions: Vec<f64>,
    /// `Σ_i s_i p_i`.
    pub weighted: f64,
    /// `Σ_i s_i`.
    pub total: f64,
}

impl GroundingEval {
    pub fn new(proposals: Vec<BBox>, scores: Vec<f64>, gt_boxes: Vec<BBox>) -> Result<Self, MetricsError> {
        if proposals.len() != scores.len() {
            return Err(MetricsError::Length(scores.len(), proposals.len()));
        }
        if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(MetricsError::Invalid(
                "grounding scores must be finite and non-negative".into(),
            ));
        }
        let precisions: Vec<f64> = proposals.iter().map(|b| region_precision(b, &gt_boxes)).collect();
        let weighted = scores.iter().zip(&precisions).map(|(s, p)| s * p).sum();
        let total = scores.iter().sum();
        Ok(Self {
            gt_area: rect_union_area(&gt_boxes),
            proposals,
            scores,
            gt_boxes,
            precisions,
            weighted,
            total,
        })
    }
}

/// `Σ_m S^m / Σ_m C^m`; `None` when every predicted score is zero.
pub fn ground_p(evals: &[GroundingEval]) -> Option<f64> {
    let s: f64 = evals.iter().map(|e| e.weighted).sum();
    let c: f64 = evals.iter().map(|e| e.total).sum();
    (c > 0.0).then(|| s / c)
}
