//! ATSS-style label assignment and per-anchor training targets.
//!
//! Per ground truth the assigner shortlists the `top_k` center-nearest
//! anchors on every pyramid level, thresholds their IoUs at mean + std,
//! and keeps candidates whose centers lie inside the box. Conflicts are
//! resolved toward the ground truth with the higher anchor IoU.

use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorGrid, BBox};

/// An annotated object: box plus class id in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Anchor → ground-truth mapping for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Per-anchor index into the ground-truth list, `None` for background.
    pub assigned_gt: Vec<Option<usize>>,
    pub pos_mask: Vec<bool>,
    pub n_pos: usize,
    pub n_total: usize,
}

impl AssignmentResult {
    pub fn positive_indices(&self) -> Vec<usize> {
        self.pos_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }
}

/// Where the LQE training target's IoU is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouTargetSource {
    /// Overlap of the preset anchor box with its ground truth.
    Anchor,
    /// Overlap of the decoded predicted box with its ground truth.
    Decoded,
}

/// Whether the QE soft label is the raw IoU or its alpha power.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QeTargetMode {
    PowAlpha,
    RawIou,
}

#[derive(Debug, Clone, Copy)]
pub struct TargetOptions {
    pub alpha: f64,
    pub iou_source: IouTargetSource,
    pub qe_mode: QeTargetMode,
}

impl Default for TargetOptions {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            iou_source: IouTargetSource::Decoded,
            qe_mode: QeTargetMode::PowAlpha,
        }
    }
}

/// Per-anchor training targets.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `None` is background.
    pub class_labels: Vec<Option<usize>>,
    pub target_boxes: Vec<Option<BBox>>,
    /// IoU target for the LQE branch; 0 for background anchors.
    pub iou_targets: Vec<f64>,
    /// Soft label for the joint ranking score; 0 for background anchors.
    pub qe_targets: Vec<f64>,
}

/// ATSS assignment over all levels of `anchors`.
pub fn atss_assign(anchors: &AnchorGrid, gts: &[GroundTruth], top_k: usize) -> AssignmentResult {
    let n_total = anchors.total();
    let flat: Vec<&BBox> = anchors.iter_all().collect();
    let offsets = anchors.level_offsets();

    // best claim per anchor: (gt index, anchor-gt IoU)
    let mut claims: Vec<Option<(usize, f64)>> = vec![None; n_total];

    for (gi, gt) in gts.iter().enumerate() {
        let (gx, gy) = gt.bbox.center();

        let mut candidates: Vec<usize> = Vec::new();
        for (li, level) in anchors.levels.iter().enumerate() {
            let base = offsets[li];
            let mut order: Vec<usize> = (0..level.anchors.len()).collect();
            let dist2 = |i: usize| {
                let (ax, ay) = level.anchors[i].center();
                (ax - gx) * (ax - gx) + (ay - gy) * (ay - gy)
            };
            order.sort_by(|&a, &b| {
                dist2(a)
                    .partial_cmp(&dist2(b))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            candidates.extend(order.iter().take(top_k).map(|&i| base + i));
        }

        let ious: Vec<f64> = candidates.iter().map(|&i| iou(flat[i], &gt.bbox)).collect();
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        let var = ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ious.len() as f64;
        let threshold = mean + var.max(0.0).sqrt();

        for (&ai, &v) in candidates.iter().zip(&ious) {
            let (cx, cy) = flat[ai].center();
            if v >= threshold && gt.bbox.contains_point(cx, cy) {
                let better = match claims[ai] {
                    None => true,
                    Some((_, old)) => v > old,
                };
                if better {
                    claims[ai] = Some((gi, v));
                }
            }
        }
    }

    let assigned_gt: Vec<Option<usize>> = claims.iter().map(|c| c.map(|(g, _)| g)).collect();
    let pos_mask: Vec<bool> = assigned_gt.iter().map(|a| a.is_some()).collect();
    let n_pos = pos_mask.iter().filter(|&&p| p).count();
    AssignmentResult {
        assigned_gt,
        pos_mask,
        n_pos,
        n_total,
    }
}

/// Build per-anchor targets from an assignment. `decoded_boxes` must be
/// index-aligned with the anchors; the IoU side of the targets is a plain
/// value, never part of a gradient graph.
pub fn build_targets(
    anchors: &AnchorGrid,
    assignment: &AssignmentResult,
    gts: &[GroundTruth],
    decoded_boxes: &[BBox],
    opts: &TargetOptions,
) -> Result<Targets> {
    let n = assignment.n_total;
    if decoded_boxes.len() != n {
        return Err(Error::IndexMisalignment {
            expected: n,
            got: decoded_boxes.len(),
        });
    }
    let flat: Vec<&BBox> = anchors.iter_all().collect();
    if flat.len() != n {
        return Err(Error::IndexMisalignment {
            expected: n,
            got: flat.len(),
        });
    }

    let mut class_labels = vec![None; n];
    let mut target_boxes = vec![None; n];
    let mut iou_targets = vec![0.0; n];
    let mut qe_targets = vec![0.0; n];

    for i in 0..n {
        if let Some(gi) = assignment.assigned_gt[i] {
            let gt = &gts[gi];
            class_labels[i] = Some(gt.class_id);
            target_boxes[i] = Some(gt.bbox);
            let source = match opts.iou_source {
                IouTargetSource::Anchor => flat[i],
                IouTargetSource::Decoded => &decoded_boxes[i],
            };
            let v = iou(source, &gt.bbox);
            iou_targets[i] = v;
            qe_targets[i] = match opts.qe_mode {
                QeTargetMode::PowAlpha => v.powf(opts.alpha),
                QeTargetMode::RawIou => v,
            };
        }
    }

    Ok(Targets {
        class_labels,
        target_boxes,
        iou_targets,
        qe_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_anchors;
    use crate::rng::KeyedRng;

    use crate::oracles::atss_reference;

    fn random_scene(rng: &mut KeyedRng, image: usize, max_gts: usize) -> Vec<GroundTruth> {
        let n = rng.range_usize(0, max_gts);
        (0..n)
            .map(|_| {
                let w = rng.range_f64(6.0, image as f64 * 0.7);
                let h = rng.range_f64(6.0, image as f64 * 0.7);
                let x1 = rng.range_f64(0.0, image as f64 - w);
                let y1 = rng.range_f64(0.0, image as f64 - h);
                GroundTruth {
                    bbox: BBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
                    class_id: rng.range_usize(0, 3),
                }
            })
            .collect()
    }

    #[test]
    fn anchor_equal_to_gt_is_positive() {
        let grid = generate_anchors(32, &[8], 8.0).unwrap();
        // gt exactly equal to anchor 5; every other anchor overlaps it too
        // (64px anchors on a 32px image all intersect), but anchor 5 has
        // IoU 1 and holds the center.
        let gt_box = grid.levels[0].anchors[5];
        let gts = vec![GroundTruth { bbox: gt_box, class_id: 0 }];
        let res = atss_assign(&grid, &gts, 9);
        assert!(res.pos_mask[5], "exact-match anchor must be positive");
        assert_eq!(res.assigned_gt[5], Some(0));
    }

    #[test]
    fn empty_gts_all_background() {
        let grid = generate_anchors(32, &[8], 8.0).unwrap();
        let res = atss_assign(&grid, &[], 9);
        assert_eq!(res.n_pos, 0);
        assert!(res.pos_mask.iter().all(|&p| !p));
        assert_eq!(res.n_total, 16);
    }

    #[test]
    fn matches_brute_force_on_500_random_scenes() {
        let mut rng = KeyedRng::new(21, 0, "atss-scenes");
        for scene in 0..500 {
            let (image, strides, scale): (usize, &[usize], f64) = match scene % 3 {
                0 => (32, &[8, 16], 4.0),
                1 => (64, &[8, 16], 8.0),
                _ => (32, &[8], 2.0),
            };
            let grid = generate_anchors(image, strides, scale).unwrap();
            assert!(grid.total() <= 100);
            let gts = random_scene(&mut rng, image, 5);
            let topk = rng.range_usize(1, 9);
            let fast = atss_assign(&grid, &gts, topk);
            let naive = atss_reference(&grid, &gts, topk);
            assert_eq!(fast.assigned_gt, naive, "scene {scene} diverged");
        }
    }

    #[test]
    fn positives_hold_center_inside_property() {
        let mut rng = KeyedRng::new(22, 0, "atss-center");
        for _ in 0..100 {
            let grid = generate_anchors(64, &[8, 16], 8.0).unwrap();
            let gts = random_scene(&mut rng, 64, 5);
            let res = atss_assign(&grid, &gts, 9);
            let flat: Vec<&BBox> = grid.iter_all().collect();
            for i in 0..res.n_total {
                if let Some(gi) = res.assigned_gt[i] {
                    let (cx, cy) = flat[i].center();
                    assert!(gts[gi].bbox.contains_point(cx, cy));
                }
            }
        }
    }

    #[test]
    fn deterministic_assignment() {
        let grid = generate_anchors(64, &[8, 16], 8.0).unwrap();
        let mut rng = KeyedRng::new(23, 0, "det");
        let gts = random_scene(&mut rng, 64, 5);
        let a = atss_assign(&grid, &gts, 9);
        let b = atss_assign(&grid, &gts, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn targets_for_perfect_and_background_anchors() {
        let grid = generate_anchors(32, &[8], 2.0).unwrap();
        let gt_box = grid.levels[0].anchors[5];
        let gts = vec![GroundTruth { bbox: gt_box, class_id: 2 }];
        let res = atss_assign(&grid, &gts, 9);
        assert!(res.n_pos >= 1);

        // decoded boxes equal to gt for positives
        let decoded: Vec<BBox> = (0..res.n_total).map(|_| gt_box).collect();
        let t = build_targets(&grid, &res, &gts, &decoded, &TargetOptions::default()).unwrap();
        for i in 0..res.n_total {
            if res.pos_mask[i] {
                assert_eq!(t.class_labels[i], Some(2));
                assert!((t.iou_targets[i] - 1.0).abs() < 1e-12);
                assert!((t.qe_targets[i] - 1.0).abs() < 1e-12, "1^alpha = 1");
            } else {
                assert_eq!(t.class_labels[i], None);
                assert_eq!(t.qe_targets[i], 0.0);
            }
        }
    }

    #[test]
    fn qe_target_power_fixture() {
        // decoded IoU 0.5 at alpha 0.3
        let grid = generate_anchors(32, &[8], 2.0).unwrap();
        let gt_box = grid.levels[0].anchors[5];
        let gts = vec![GroundTruth { bbox: gt_box, class_id: 0 }];
        let res = atss_assign(&grid, &gts, 9);
        let pos = res.positive_indices();
        assert!(!pos.is_empty());

        // a decoded box with IoU exactly 0.5 against a 16x16 gt:
        // shift right by 16/3 px -> inter = (16-16/3)*16, union = 2*256-inter
        let dx = 16.0 / 3.0;
        let shifted = BBox::new(gt_box.x1 + dx, gt_box.y1, gt_box.x2 + dx, gt_box.y2).unwrap();
        assert!((iou(&shifted, &gt_box) - 0.5).abs() < 1e-12);
        let decoded: Vec<BBox> = (0..res.n_total).map(|_| shifted).collect();
        let t = build_targets(&grid, &res, &gts, &decoded, &TargetOptions::default()).unwrap();
        let expect = 0.5f64.powf(0.3);
        assert!((expect - 0.812_252_396_356_235_6).abs() < 1e-12);
        for &i in &pos {
            assert!((t.iou_targets[i] - 0.5).abs() < 1e-12);
            assert!((t.qe_targets[i] - expect).abs() < 1e-12);
        }

        // anchor-sourced targets use the preset anchor box instead
        let opts = TargetOptions {
            iou_source: IouTargetSource::Anchor,
            ..TargetOptions::default()
        };
        let t2 = build_targets(&grid, &res, &gts, &decoded, &opts).unwrap();
        assert!((t2.iou_targets[pos[0]] - iou(&grid.levels[0].anchors[pos[0]], &gt_box)).abs() < 1e-12);
    }

    #[test]
    fn qe_target_monotone_in_iou() {
        let mut rng = KeyedRng::new(24, 0, "qe-mono");
        for _ in 0..1000 {
            let a = rng.uniform();
            let b = rng.uniform();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let alpha = rng.range_f64(0.05, 3.0);
            assert!(lo.powf(alpha) <= hi.powf(alpha) + 1e-15);
        }
    }

    #[test]
    fn misaligned_decoded_boxes_rejected() {
        let grid = generate_anchors(32, &[8], 2.0).unwrap();
        let res = atss_assign(&grid, &[], 9);
        let decoded = vec![grid.levels[0].anchors[0]; 3];
        let err = build_targets(&grid, &res, &[], &decoded, &TargetOptions::default());
        assert!(err.is_err());
    }
}
