//! Independent reference implementations used to cross-check the fast
//! paths: a naive restatement of the ATSS rule, O(n^2) NMS, brute-force
//! PR-curve integration, and a counting-based Spearman.
//!
//! These deliberately re-derive each result from the rule statements
//! with plain loops and per-prefix recomputation; they share no code
//! with the implementations they verify. The `oracle-suite` subcommand
//! and the acceptance tests compare against them on randomized inputs.

use crate::assignment::GroundTruth;
use crate::geometry::{iou, AnchorGrid, BBox};
use crate::postprocess::Detection;

/// Naive O(anchors x gts) ATSS assignment.
#[allow(clippy::needless_range_loop)]
pub fn atss_reference(anchors: &AnchorGrid, gts: &[GroundTruth], top_k: usize) -> Vec<Option<usize>> {
    struct FlatAnchor {
        bbox: BBox,
        level: usize,
        index_in_level: usize,
    }
    let mut flat = Vec::new();
    for (li, level) in anchors.levels.iter().enumerate() {
        for (ii, b) in level.anchors.iter().enumerate() {
            flat.push(FlatAnchor {
                bbox: *b,
                level: li,
                index_in_level: ii,
            });
        }
    }

    let mut wanted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); gts.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let (gx, gy) = gt.bbox.center();
        let mut cands: Vec<usize> = Vec::new();
        for li in 0..anchors.levels.len() {
            let mut level_anchor_ids: Vec<usize> =
                (0..flat.len()).filter(|&i| flat[i].level == li).collect();
            level_anchor_ids.sort_by(|&a, &b| {
                let da = {
                    let (cx, cy) = flat[a].bbox.center();
                    ((cx - gx).powi(2) + (cy - gy).powi(2), flat[a].index_in_level)
                };
                let db = {
                    let (cx, cy) = flat[b].bbox.center();
                    ((cx - gx).powi(2) + (cy - gy).powi(2), flat[b].index_in_level)
                };
                da.partial_cmp(&db).unwrap()
            });
            level_anchor_ids.truncate(top_k);
            cands.extend(level_anchor_ids);
        }
        let ious: Vec<f64> = cands.iter().map(|&i| iou(&flat[i].bbox, &gt.bbox)).collect();
        let n = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / n;
        let std = (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
            .max(0.0)
            .sqrt();
        let thr = mean + std;
        for (&ai, &v) in cands.iter().zip(&ious) {
            let (cx, cy) = flat[ai].bbox.center();
            let inside =
                cx >= gt.bbox.x1 && cx <= gt.bbox.x2 && cy >= gt.bbox.y1 && cy <= gt.bbox.y2;
            if v >= thr && inside {
                wanted[gi].push((ai, v));
            }
        }
    }

    let mut out = vec![None; flat.len()];
    for ai in 0..flat.len() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, list) in wanted.iter().enumerate() {
            for &(a, v) in list {
                if a == ai {
                    let take = match best {
                        None => true,
                        Some((_, bv)) => v > bv,
                    };
                    if take {
                        best = Some((gi, v));
                    }
                }
            }
        }
        out[ai] = best.map(|(g, _)| g);
    }
    out
}

/// Plain O(n^2) restatement of class-wise greedy NMS; returns kept
/// original indices in keep order.
pub fn nms_reference(
    dets: &[Detection],
    iou_threshold: f64,
    score_threshold: f64,
    max_per_image: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if dets[i].score < score_threshold || keep.len() >= max_per_image {
            continue;
        }
        let mut suppressed = false;
        for &k in &keep {
            if dets[k].class_id == dets[i].class_id
                && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
            {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// Brute-force AP: greedy matching recomputed from scratch for every
/// prefix of the score ordering, then a direct 101-point envelope.
pub fn ap_reference(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    thresholds: &[f64],
) -> f64 {
    let mut classes: Vec<usize> = gts
        .iter()
        .flat_map(|g| g.iter().map(|x| x.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }

    let greedy_tp =
        |subset: &[(usize, usize, f64, BBox)], class_gts: &[Vec<BBox>], t: f64| -> usize {
            let mut taken: Vec<Vec<bool>> =
                class_gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = 0;
            for &(img, _, _, ref bbox) in subset {
                let mut best_gt = None;
                let mut best_iou = -1.0;
                for (gi, gt_box) in class_gts[img].iter().enumerate() {
                    if !taken[img][gi] {
                        let v = iou(bbox, gt_box);
                        if v >= t && v > best_iou {
                            best_iou = v;
                            best_gt = Some(gi);
                        }
                    }
                }
                if let Some(gi) = best_gt {
                    taken[img][gi] = true;
                    tp += 1;
                }
            }
            tp
        };

    let mut total = 0.0;
    for &t in thresholds {
        let mut class_sum = 0.0;
        for &class in &classes {
            let mut class_dets: Vec<(usize, usize, f64, BBox)> = Vec::new();
            for (img, image_dets) in dets.iter().enumerate() {
                for (idx, d) in image_dets.iter().enumerate() {
                    if d.class_id == class {
                        class_dets.push((img, idx, d.score, d.bbox));
                    }
                }
            }
            class_dets.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            let class_gts: Vec<Vec<BBox>> = gts
                .iter()
                .map(|g| {
                    g.iter()
                        .filter(|x| x.class_id == class)
                        .map(|x| x.bbox)
                        .collect()
                })
                .collect();
            let n_gt: usize = class_gts.iter().map(|g| g.len()).sum();
            if n_gt == 0 {
                continue;
            }
            let mut pr: Vec<(f64, f64)> = Vec::new();
            for k in 1..=class_dets.len() {
                let tp = greedy_tp(&class_dets[..k], &class_gts, t);
                pr.push((tp as f64 / k as f64, tp as f64 / n_gt as f64));
            }
            let mut ap = 0.0;
            for ri in 0..=100 {
                let r = ri as f64 / 100.0;
                let mut best = 0.0f64;
                for &(p, rec) in &pr {
                    if rec >= r - 1e-12 {
                        best = best.max(p);
                    }
                }
                ap += best;
            }
            class_sum += ap / 101.0;
        }
        total += class_sum / classes.len() as f64;
    }
    total / thresholds.len() as f64
}

/// Counting-based ranks followed by an explicit Pearson on the ranks.
pub fn spearman_reference(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |vals: &[f64]| -> Vec<f64> {
        vals.iter()
            .map(|&v| {
                let less = vals.iter().filter(|&&o| o < v).count() as f64;
                let equal = vals.iter().filter(|&&o| o == v).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = rx.len() as f64;
    let sx: f64 = rx.iter().sum();
    let sy: f64 = ry.iter().sum();
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    let num = n * sxy - sx * sy;
    let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    num / den
}
