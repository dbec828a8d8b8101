//! Exact rotated-box overlap and greedy non-maximum suppression.

use super::{ClassId, Detection, Obb};

/// Shoelace area of a simple polygon (positive for counter-clockwise order).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|k| {
            let (a, b) = (poly[k], poly[(k + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips a polygon against a convex counter-clockwise clip polygon.
fn clip(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for m in 0..input.len() {
            let (p, q) = (input[m], input[(m + 1) % input.len()]);
            let (sp, sq) = (cross(a, b, p), cross(a, b, q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection over union of two oriented boxes.
pub fn rotated_iou(a: &Obb, b: &Obb) -> f64 {
    if a == b {
        return 1.0;
    }
    let reach = (a.w.hypot(a.l) + b.w.hypot(b.l)) / 2.0;
    if a.distance(b) >= reach {
        return 0.0;
    }
    let inter = polygon_area(&clip(&a.corners(), &b.corners())).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy NMS: visit by descending score (ties keep input order) and keep a
/// box iff its IoU with every kept box is below `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for k in order {
        let d = detections[k];
        if kept.iter().all(|q| rotated_iou(&q.obb, &d.obb) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// [`nms`] applied separately to each class; output grouped by class.
pub fn nms_per_class(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    ClassId::ALL
        .iter()
        .flat_map(|&c| {
            let members: Vec<Detection> = detections.iter().filter(|d| d.class == c).copied().collect();
            nms(&members, iou_threshold)
        })
        .collect()
}
