//! Inference-time selection and evaluation: score thresholding, greedy
//! class-wise NMS over the joint ranking score, COCO-style AP, and the
//! score/IoU rank-correlation diagnostic.
//!
//! Tie-breaking is by original index everywhere so results are
//! bit-reproducible and oracle comparisons can demand exact equality.

use crate::assignment::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Joint ranking score in [0, 1].
    pub score: f64,
}

/// Greedy class-wise NMS. Detections below `score_threshold` are dropped
/// first; within a class, a kept box suppresses later boxes with
/// IoU > `iou_threshold`; output is capped at `max_per_image` and sorted
/// by descending score, ties broken by lower original index.
pub fn nms(
    dets: &[Detection],
    iou_threshold: f64,
    score_threshold: f64,
    max_per_image: usize,
) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let survives = kept
            .iter()
            .filter(|&&k| dets[k].class_id == dets[i].class_id)
            .all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold);
        if survives {
            kept.push(i);
            if kept.len() == max_per_image {
                break;
            }
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Precision sampled at the 101 interpolation points for one threshold,
/// averaged over classes, plus the mean final recall.
#[derive(Debug, Clone)]
pub struct ThresholdCurve {
    pub threshold: f64,
    pub precision_101: Vec<f64>,
    pub mean_recall: f64,
}

#[derive(Debug, Clone)]
pub struct ApReport {
    /// Mean over thresholds and classes present in the ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<ThresholdCurve>,
}

/// Greedy matching for one class at one threshold: detections in global
/// score order match the highest-IoU unmatched ground truth of their
/// image with IoU >= threshold. Returns the per-detection hit flags.
fn match_class(
    dets: &[(usize, usize, f64, BBox)], // (image, original index, score, box) sorted
    gts: &[Vec<BBox>],
    threshold: f64,
) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = vec![false; dets.len()];
    for (di, &(img, _, _, ref bbox)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt_box) in gts[img].iter().enumerate() {
            if taken[img][gi] {
                continue;
            }
            let v = iou(bbox, gt_box);
            if v >= threshold {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        if let Some((gi, _)) = best {
            taken[img][gi] = true;
            hits[di] = true;
        }
    }
    hits
}

fn interpolated_ap(hits: &[bool], n_gt: usize) -> (f64, Vec<f64>, f64) {
    if n_gt == 0 {
        return (0.0, vec![0.0; 101], 0.0);
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let mut p101 = vec![0.0; 101];
    for (ri, p) in p101.iter_mut().enumerate() {
        let r = ri as f64 / 100.0;
        let mut best = 0.0f64;
        for k in 0..precision.len() {
            if recall[k] >= r - 1e-12 {
                best = best.max(precision[k]);
            }
        }
        *p = best;
    }
    let ap = p101.iter().sum::<f64>() / 101.0;
    let final_recall = recall.last().copied().unwrap_or(0.0);
    (ap, p101, final_recall)
}

/// COCO-style AP over per-image detections and ground truths.
pub fn evaluate_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    thresholds: &[f64],
) -> ApReport {
    assert_eq!(dets.len(), gts.len(), "per-image lists must align");
    let mut classes: Vec<usize> = gts
        .iter()
        .flat_map(|g| g.iter().map(|gt| gt.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_threshold = Vec::with_capacity(thresholds.len());
    let mut ap_sum = 0.0;
    let mut ap50 = 0.0;
    let mut ap75 = 0.0;

    for &t in thresholds {
        let mut class_ap_sum = 0.0;
        let mut p101_sum = vec![0.0; 101];
        let mut recall_sum = 0.0;
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
                        .filter(|gt| gt.class_id == class)
                        .map(|gt| gt.bbox)
                        .collect()
                })
                .collect();
            let n_gt: usize = class_gts.iter().map(|g| g.len()).sum();
            let hits = match_class(&class_dets, &class_gts, t);
            let (ap, p101, final_recall) = interpolated_ap(&hits, n_gt);
            class_ap_sum += ap;
            recall_sum += final_recall;
            for (a, b) in p101_sum.iter_mut().zip(&p101) {
                *a += b;
            }
        }
        let k = classes.len().max(1) as f64;
        let mean_ap = class_ap_sum / k;
        ap_sum += mean_ap;
        if (t - 0.5).abs() < 1e-9 {
            ap50 = mean_ap;
        }
        if (t - 0.75).abs() < 1e-9 {
            ap75 = mean_ap;
        }
        per_threshold.push(ThresholdCurve {
            threshold: t,
            precision_101: p101_sum.iter().map(|v| v / k).collect(),
            mean_recall: recall_sum / k,
        });
    }

    ApReport {
        ap: ap_sum / thresholds.len().max(1) as f64,
        ap50,
        ap75,
        per_threshold,
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() < 3 || xs.len() != ys.len() {
        return Err(Error::TooFewDetections {
            need: 3,
            got: xs.len().min(ys.len()),
        });
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap().then(a.cmp(&b)));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Spearman correlation between detection scores and their true IoU:
/// each detection is scored against the best same-class ground truth of
/// its image (0 when that class is absent there).
pub fn score_iou_correlation(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
) -> Result<f64> {
    let mut scores = Vec::new();
    let mut true_ious = Vec::new();
    for (image_dets, image_gts) in dets.iter().zip(gts) {
        for d in image_dets {
            let best = image_gts
                .iter()
                .filter(|g| g.class_id == d.class_id)
                .map(|g| iou(&d.bbox, &g.bbox))
                .fold(0.0f64, f64::max);
            scores.push(d.score);
            true_ious.push(best);
        }
    }
    spearman(&scores, &true_ious)
}

/// One `image_id class_id score x1 y1 x2 y2` record; ground truths use
/// the same shape with score 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DetLine {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Fixed-point 6-decimal line format used for fixtures and dumps.
pub fn write_detection_lines(lines: &[DetLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&format!(
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            l.image_id, l.class_id, l.score, l.bbox.x1, l.bbox.y1, l.bbox.x2, l.bbox.y2
        ));
    }
    out
}

pub fn parse_detection_lines(text: &str) -> Result<Vec<DetLine>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad {what}: {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("non-finite {what}"),
                });
            }
            Ok(v)
        };
        let image_id: u64 = fields[0].parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: format!("bad image id: {:?}", fields[0]),
        })?;
        let class_id: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: format!("bad class id: {:?}", fields[1]),
        })?;
        let score = parse_f(fields[2], "score")?;
        let x1 = parse_f(fields[3], "x1")?;
        let y1 = parse_f(fields[4], "y1")?;
        let x2 = parse_f(fields[5], "x2")?;
        let y2 = parse_f(fields[6], "y2")?;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| Error::Parse {
            line: ln + 1,
            msg: e.to_string(),
        })?;
        out.push(DetLine {
            image_id,
            class_id,
            score,
            bbox,
        });
    }
    Ok(out)
}
