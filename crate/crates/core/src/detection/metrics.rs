//! Center-distance AP, scale error and orientation error.

use std::f64::consts::PI;

use super::{wrap_angle, ClassId, Detection, Obb};
use crate::error::{Error, Result};

/// Matching thresholds in meters.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Matching distance for the true-positive error metrics.
pub const TP_THRESHOLD: f64 = 2.0;

/// Greedy one-to-one matching in descending score order (ties keep input
/// order): each prediction takes the nearest unmatched ground truth within
/// `d`. Returns `(prediction index, matched ground truth)` in visiting order.
pub fn match_greedy(preds: &[Detection], gts: &[Obb], d: f64) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let dist = preds[p].obb.distance(gt);
                if !taken[g] && dist <= d && best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((g, dist));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (p, best.map(|b| b.0))
        })
        .collect()
}

/// Average precision at center-distance threshold `d` with all-points interpolation.
///
/// With no ground truth the AP is 1 when there are also no predictions and 0 otherwise.
pub fn ap_at_distance(preds: &[Detection], gts: &[Obb], d: f64) -> Result<f64> {
    check_distance(d)?;
    let ranked = match_greedy(preds, gts, d)
        .into_iter()
        .map(|(p, m)| (preds[p].score, m.is_some()))
        .collect();
    Ok(pooled_ap(ranked, gts.len()))
}

fn check_distance(d: f64) -> Result<()> {
    if !(d > 0.0) {
        return Err(Error::invalid(format!("matching distance must be positive, got {d}")));
    }
    Ok(())
}

/// AP of `(score, is_tp)` pairs, ranked by descending score (stable).
fn pooled_ap(mut ranked: Vec<(f64, bool)>, gt_count: usize) -> f64 {
    if gt_count == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / gt_count as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// `1 - IoU` of the two boxes after aligning centers and yaw.
pub fn ase(pred: &Obb, gt: &Obb) -> f64 {
    let mw = pred.w.min(gt.w);
    let ml = pred.l.min(gt.l);
    let inter = mw * ml;
    1.0 - inter / (pred.area() + gt.area() - inter)
}

/// Smallest absolute angle between two headings, in `[0, pi]`.
pub fn aoe(pred_yaw: f64, gt_yaw: f64) -> f64 {
    wrap_angle(pred_yaw - gt_yaw).abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: ClassId,
    /// `(threshold, AP)` per matching threshold.
    pub ap: Vec<(f64, f64)>,
    pub map: f64,
    /// Mean over true positives at [`TP_THRESHOLD`]; 1 without any.
    pub ase: f64,
    /// Radians; pi without any true positive.
    pub aoe: f64,
    pub gt_count: usize,
    pub tp_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn class(&self, c: ClassId) -> Option<&ClassMetrics> {
        self.classes.iter().find(|m| m.class == c)
    }

    /// Rows of `metric,threshold,value`; the threshold is empty for
    /// threshold-free metrics.
    pub fn csv_rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for m in &self.classes {
            for &(t, ap) in &m.ap {
                rows.push((format!("AP/{}", m.class), format!("{t}"), ap));
            }
            rows.push((format!("mAP/{}", m.class), String::new(), m.map));
            rows.push((format!("ASE/{}", m.class), String::new(), m.ase));
            rows.push((format!("AOE_deg/{}", m.class), String::new(), m.aoe.to_degrees()));
        }
        rows
    }
}

/// Per-class AP at each threshold, mAP, ASE and AOE. Classes appear when
/// present in either predictions or ground truth.
pub fn evaluate(preds: &[Detection], gts: &[Detection], thresholds: &[f64]) -> Result<EvalReport> {
    evaluate_scenes(&[(preds.to_vec(), gts.to_vec())], thresholds)
}

/// Like [`evaluate`] over several scenes given as `(predictions, ground truth)`:
/// matching happens within each scene, ranking over all of them.
pub fn evaluate_scenes(scenes: &[(Vec<Detection>, Vec<Detection>)], thresholds: &[f64]) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("at least one matching threshold is required"));
    }
    for &t in thresholds {
        check_distance(t)?;
    }
    let mut classes = Vec::new();
    for c in ClassId::ALL {
        let per_scene: Vec<(Vec<Detection>, Vec<Obb>)> = scenes
            .iter()
            .map(|(preds, gts)| {
                (
                    preds.iter().filter(|d| d.class == c).copied().collect(),
                    gts.iter().filter(|d| d.class == c).map(|d| d.obb).collect(),
                )
            })
            .collect();
        let gt_count: usize = per_scene.iter().map(|(_, g)| g.len()).sum();
        if gt_count == 0 && per_scene.iter().all(|(p, _)| p.is_empty()) {
            continue;
        }
        let ap: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&t| {
                let ranked = per_scene
                    .iter()
                    .flat_map(|(p, g)| {
                        match_greedy(p, g, t)
                            .into_iter()
                            .map(move |(a, m)| (p[a].score, m.is_some()))
                    })
                    .collect();
                (t, pooled_ap(ranked, gt_count))
            })
            .collect();
        let map = ap.iter().map(|x| x.1).sum::<f64>() / ap.len() as f64;
        let mut scale = Vec::new();
        let mut orient = Vec::new();
        for (p, g) in &per_scene {
            for (a, b) in match_greedy(p, g, TP_THRESHOLD) {
                if let Some(b) = b {
                    scale.push(ase(&p[a].obb, &g[b]));
                    orient.push(aoe(p[a].obb.yaw, g[b].yaw));
                }
            }
        }
        let (ase_v, aoe_v) = if scale.is_empty() {
            (1.0, PI)
        } else {
            let n = scale.len() as f64;
            (scale.iter().sum::<f64>() / n, orient.iter().sum::<f64>() / n)
        };
        classes.push(ClassMetrics {
            class: c,
            ap,
            map,
            ase: ase_v,
            aoe: aoe_v,
            gt_count,
            tp_count: scale.len(),
        });
    }
    Ok(EvalReport { classes })
}
