//! Training losses: BCE supervision of the LQE branch, quality focal
//! loss on the joint ranking score, GIoU regression loss, and their
//! weighted total.
//!
//! All losses are graph expressions so gradients reach every parameter;
//! the target side is always plain values, never part of the graph.

use crate::assignment::Targets;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{max_log_ratio, BBox};

/// Probabilities are clamped to this band before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub lqe: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 1.0,
            lqe: 1.0,
        }
    }
}

/// Scalar values of one step's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_lqe: f64,
    pub l_total: f64,
    pub n_pos: usize,
    pub n_total: usize,
}

/// Elementwise `-t*ln(p) - (1-t)*ln(1-p)` with `p` clamped away from the
/// log singularities; targets are constants.
fn bce_terms(p: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let t = Tensor::from_values(p.shape(), targets.to_vec())?;
    let one_minus_t = t.neg().add_scalar(1.0);
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let log_p = pc.ln();
    let log_1p = pc.neg().add_scalar(1.0).ln();
    Ok(t.mul(&log_p)?.add(&one_minus_t.mul(&log_1p)?)?.neg())
}

/// LQE branch loss: mean BCE between predicted IoU probabilities and
/// their IoU targets over positive anchors. Zero when there are none.
pub fn lqe_loss(pred_iou: &Tensor, target_iou: &[f64], n_pos: usize) -> Result<Tensor> {
    if n_pos == 0 || pred_iou.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    if pred_iou.len() != target_iou.len() {
        return Err(Error::IndexMisalignment {
            expected: pred_iou.len(),
            got: target_iou.len(),
        });
    }
    Ok(bce_terms(pred_iou, target_iou)?
        .sum_all()
        .mul_scalar(1.0 / n_pos as f64))
}

/// Quality focal loss over a ranking-score map against soft targets:
/// `|y - sigma|^beta * BCE(sigma, y)` summed over every anchor and class,
/// normalized by `max(n_pos, 1)`.
pub fn qfl(ranking: &Tensor, soft_targets: &[f64], beta: f64, n_pos: usize) -> Result<Tensor> {
    if ranking.len() != soft_targets.len() {
        return Err(Error::IndexMisalignment {
            expected: ranking.len(),
            got: soft_targets.len(),
        });
    }
    let flat = ranking.reshape(&[ranking.len()])?;
    let y = Tensor::from_values(&[flat.len()], soft_targets.to_vec())?;
    let diff = y.sub(&flat)?;
    let factor = diff.mul(&diff)?.powf(beta / 2.0);
    let terms = factor.mul(&bce_terms(&flat, soft_targets)?)?;
    Ok(terms.sum_all().mul_scalar(1.0 / n_pos.max(1) as f64))
}

/// Dense soft-target matrix for [`qfl`], laid out `[class_count x n_total]`
/// to match a flattened ranking map: the labeled class of a positive
/// anchor carries its QE target, everything else is zero.
pub fn qfl_target_matrix(class_count: usize, targets: &Targets) -> Vec<f64> {
    let n = targets.class_labels.len();
    let mut y = vec![0.0; class_count * n];
    for (i, label) in targets.class_labels.iter().enumerate() {
        if let Some(c) = label {
            y[c * n + i] = targets.qe_targets[i];
        }
    }
    y
}

/// Decoded corner coordinates as graph tensors, one entry per anchor.
pub struct BoxTensors {
    pub x1: Tensor,
    pub y1: Tensor,
    pub x2: Tensor,
    pub y2: Tensor,
}

/// Differentiable decode of a `[4 x n]` delta map against constant
/// anchors; dw/dh are clamped like [`crate::geometry::decode_box`].
pub fn decode_deltas_graph(deltas: &Tensor, anchors: &[BBox]) -> Result<BoxTensors> {
    let n = anchors.len();
    if deltas.shape() != [4, n] {
        return Err(Error::ShapeMismatch {
            op: "decode_deltas_graph",
            left: deltas.shape().to_vec(),
            right: vec![4, n],
        });
    }
    let mut acx = Vec::with_capacity(n);
    let mut acy = Vec::with_capacity(n);
    let mut aw = Vec::with_capacity(n);
    let mut ah = Vec::with_capacity(n);
    for a in anchors {
        let (cx, cy) = a.center();
        acx.push(cx);
        acy.push(cy);
        aw.push(a.width());
        ah.push(a.height());
    }
    let acx = Tensor::from_values(&[n], acx)?;
    let acy = Tensor::from_values(&[n], acy)?;
    let aw = Tensor::from_values(&[n], aw)?;
    let ah = Tensor::from_values(&[n], ah)?;

    let dx = deltas.row(0)?;
    let dy = deltas.row(1)?;
    let dw = deltas.row(2)?;
    let dh = deltas.row(3)?;

    let cx = dx.mul(&aw)?.add(&acx)?;
    let cy = dy.mul(&ah)?.add(&acy)?;
    let clamp = max_log_ratio();
    let w = dw.clamp(f64::NEG_INFINITY, clamp).exp().mul(&aw)?;
    let h = dh.clamp(f64::NEG_INFINITY, clamp).exp().mul(&ah)?;

    let half_w = w.mul_scalar(0.5);
    let half_h = h.mul_scalar(0.5);
    Ok(BoxTensors {
        x1: cx.sub(&half_w)?,
        y1: cy.sub(&half_h)?,
        x2: cx.add(&half_w)?,
        y2: cy.add(&half_h)?,
    })
}

/// Mean `1 - GIoU(pred, target)` over positives; differentiable through
/// the decoded prediction side.
pub fn giou_loss(pred: &BoxTensors, target_boxes: &[BBox], n_pos: usize) -> Result<Tensor> {
    if n_pos == 0 || target_boxes.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let n = target_boxes.len();
    if pred.x1.len() != n {
        return Err(Error::IndexMisalignment {
            expected: pred.x1.len(),
            got: n,
        });
    }
    let tx1 = Tensor::from_values(&[n], target_boxes.iter().map(|b| b.x1).collect())?;
    let ty1 = Tensor::from_values(&[n], target_boxes.iter().map(|b| b.y1).collect())?;
    let tx2 = Tensor::from_values(&[n], target_boxes.iter().map(|b| b.x2).collect())?;
    let ty2 = Tensor::from_values(&[n], target_boxes.iter().map(|b| b.y2).collect())?;

    let iw = pred.x2.minimum(&tx2)?.sub(&pred.x1.maximum(&tx1)?)?.relu();
    let ih = pred.y2.minimum(&ty2)?.sub(&pred.y1.maximum(&ty1)?)?.relu();
    let inter = iw.mul(&ih)?;

    let area_p = pred.x2.sub(&pred.x1)?.mul(&pred.y2.sub(&pred.y1)?)?;
    let area_t = tx2.sub(&tx1)?.mul(&ty2.sub(&ty1)?)?;
    let union = area_p.add(&area_t)?.sub(&inter)?;

    let ew = pred.x2.maximum(&tx2)?.sub(&pred.x1.minimum(&tx1)?)?;
    let eh = pred.y2.maximum(&ty2)?.sub(&pred.y1.minimum(&ty1)?)?;
    let enclose = ew.mul(&eh)?;

    let iou = inter.div(&union)?;
    let giou = iou.sub(&enclose.sub(&union)?.div(&enclose)?)?;
    Ok(giou
        .neg()
        .add_scalar(1.0)
        .sum_all()
        .mul_scalar(1.0 / n_pos as f64))
}

/// Weighted total; errors if any component is non-finite, naming it.
pub fn total_loss(
    cls: &Tensor,
    reg: &Tensor,
    lqe: &Tensor,
    weights: &LossWeights,
    n_pos: usize,
    n_total: usize,
) -> Result<(Tensor, LossReport)> {
    let (lc, lr, ll) = (cls.scalar_value(), reg.scalar_value(), lqe.scalar_value());
    for (name, v) in [("cls", lc), ("reg", lr), ("lqe", ll)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: match name {
                    "cls" => "cls",
                    "reg" => "reg",
                    _ => "lqe",
                },
                iteration: 0,
            });
        }
    }
    let total = cls
        .mul_scalar(weights.cls)
        .add(&reg.mul_scalar(weights.reg))?
        .add(&lqe.mul_scalar(weights.lqe))?;
    let report = LossReport {
        l_cls: weights.cls * lc,
        l_reg: weights.reg * lr,
        l_lqe: weights.lqe * ll,
        l_total: total.scalar_value(),
        n_pos,
        n_total,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::geometry::encode_box;
    use crate::rng::KeyedRng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn lqe_perfect_fit_at_endpoint() {
        let p = Tensor::from_values(&[1], vec![1.0]).unwrap();
        let l = lqe_loss(&p, &[1.0], 1).unwrap().scalar_value();
        // clamping leaves a PROB_EPS-sized residue at the exact endpoint
        assert!(l.abs() < 2e-7, "loss {l}");
    }

    #[test]
    fn lqe_soft_target_floor_value() {
        // p = t = 0.7: -(0.7 ln 0.7 + 0.3 ln 0.3) = 0.61086...
        let p = Tensor::from_values(&[1], vec![0.7]).unwrap();
        let l = lqe_loss(&p, &[0.7], 1).unwrap().scalar_value();
        assert!((l - 0.610_864_302_054_893_5).abs() < 1e-12);
        assert!((l - 0.61086).abs() < 1e-5);
    }

    #[test]
    fn lqe_empty_positives_is_zero() {
        let p = Tensor::from_values(&[0], vec![]).unwrap();
        assert_eq!(lqe_loss(&p, &[], 0).unwrap().scalar_value(), 0.0);
    }

    #[test]
    fn lqe_minimized_exactly_at_target() {
        for &t in &[0.15, 0.5, 0.85] {
            let at = |p: f64| {
                let pt = Tensor::from_values(&[1], vec![p]).unwrap();
                lqe_loss(&pt, &[t], 1).unwrap().scalar_value()
            };
            let best = at(t);
            let mut p = 0.01;
            while p < 1.0 {
                assert!(at(p) >= best - 1e-12, "p={p} t={t}");
                p += 0.01;
            }
        }
    }

    #[test]
    fn lqe_gradient_matches_finite_differences() {
        let mut rng = KeyedRng::new(31, 0, "lqe-fd");
        for _ in 0..50 {
            let n = rng.range_usize(1, 6);
            let p = Tensor::from_values(
                &[n],
                (0..n).map(|_| rng.range_f64(0.05, 0.95)).collect(),
            )
            .unwrap();
            let t: Vec<f64> = (0..n).map(|_| rng.range_f64(0.0, 1.0)).collect();
            let err = grad_check(|| lqe_loss(&p, &t, n), &[&p], 1e-4).unwrap();
            assert!(err <= 1e-4, "err {err}");
        }
    }

    #[test]
    fn qfl_zero_when_sigma_equals_target() {
        let sigma = Tensor::from_values(&[2, 3], vec![0.2, 0.8, 0.5, 0.0, 1.0, 0.3]).unwrap();
        let y = sigma.values();
        let l = qfl(&sigma, &y, 2.0, 4).unwrap().scalar_value();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn qfl_single_negative_fixture() {
        // one negative entry at sigma 0.5, beta 2: 0.25 * ln 2
        let sigma = Tensor::from_values(&[1], vec![0.5]).unwrap();
        let l = qfl(&sigma, &[0.0], 2.0, 1).unwrap().scalar_value();
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.173_286_795_139_986_3).abs() < 1e-12);
    }

    #[test]
    fn qfl_beta_zero_hard_targets_is_bce() {
        let mut rng = KeyedRng::new(32, 0, "qfl-bce");
        for _ in 0..200 {
            let s = rng.range_f64(0.05, 0.95);
            let y = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
            let sigma = Tensor::from_values(&[1], vec![s]).unwrap();
            let l = qfl(&sigma, &[y], 0.0, 1).unwrap().scalar_value();
            let bce = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            assert!((l - bce).abs() <= 1e-12, "{l} vs {bce}");
        }
    }

    #[test]
    fn qfl_zero_positives_normalized_by_one() {
        let sigma = Tensor::from_values(&[2], vec![0.5, 0.5]).unwrap();
        let l = qfl(&sigma, &[0.0, 0.0], 2.0, 0).unwrap().scalar_value();
        assert!((l - 2.0 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn qfl_gradient_matches_finite_differences() {
        let mut rng = KeyedRng::new(33, 0, "qfl-fd");
        for _ in 0..50 {
            let n = rng.range_usize(2, 8);
            let sigma = Tensor::from_values(
                &[n],
                (0..n).map(|_| rng.range_f64(0.05, 0.95)).collect(),
            )
            .unwrap();
            let y: Vec<f64> = (0..n)
                .map(|_| if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() })
                .collect();
            let err = grad_check(|| qfl(&sigma, &y, 2.0, 2), &[&sigma], 1e-4).unwrap();
            assert!(err <= 1e-4, "err {err}");
        }
    }

    fn identity_box_tensors(boxes: &[BBox]) -> BoxTensors {
        let n = boxes.len();
        BoxTensors {
            x1: Tensor::from_values(&[n], boxes.iter().map(|b| b.x1).collect()).unwrap(),
            y1: Tensor::from_values(&[n], boxes.iter().map(|b| b.y1).collect()).unwrap(),
            x2: Tensor::from_values(&[n], boxes.iter().map(|b| b.x2).collect()).unwrap(),
            y2: Tensor::from_values(&[n], boxes.iter().map(|b| b.y2).collect()).unwrap(),
        }
    }

    #[test]
    fn giou_loss_zero_on_exact_match() {
        let boxes = [bb(0.0, 0.0, 4.0, 4.0), bb(1.0, 2.0, 6.0, 3.0)];
        let pred = identity_box_tensors(&boxes);
        let l = giou_loss(&pred, &boxes, 2).unwrap().scalar_value();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn giou_loss_disjoint_fixture() {
        // giou = -7/9 -> single-sample loss 16/9
        let pred = identity_box_tensors(&[bb(0.0, 0.0, 1.0, 1.0)]);
        let l = giou_loss(&pred, &[bb(2.0, 2.0, 3.0, 3.0)], 1)
            .unwrap()
            .scalar_value();
        assert!((l - 16.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn giou_loss_gradient_through_decode() {
        // Targets are displaced copies of the decoded boxes, so every pair
        // overlaps with margin and no corner coordinates tie: the loss is
        // differentiable at each draw, as a finite-difference oracle needs.
        let mut rng = KeyedRng::new(34, 0, "giou-fd");
        for _ in 0..30 {
            let n = rng.range_usize(1, 4);
            let anchors: Vec<BBox> = (0..n)
                .map(|_| {
                    let x = rng.range_f64(0.0, 30.0);
                    let y = rng.range_f64(0.0, 30.0);
                    let w = rng.range_f64(10.0, 24.0);
                    let h = rng.range_f64(10.0, 24.0);
                    bb(x, y, x + w, y + h)
                })
                .collect();
            let dvals: Vec<f64> = (0..4 * n).map(|_| rng.range_f64(-0.3, 0.3)).collect();
            let deltas = Tensor::from_values(&[4, n], dvals.clone()).unwrap();
            let decoded = decode_deltas_graph(&deltas, &anchors).unwrap();
            let targets: Vec<BBox> = (0..n)
                .map(|i| {
                    let sign = |r: &mut KeyedRng| if r.uniform() < 0.5 { -1.0 } else { 1.0 };
                    let sx = sign(&mut rng) * rng.range_f64(1.0, 2.5);
                    let sy = sign(&mut rng) * rng.range_f64(1.0, 2.5);
                    let grow = rng.range_f64(0.6, 1.4);
                    bb(
                        decoded.x1.values()[i] + sx,
                        decoded.y1.values()[i] + sy,
                        decoded.x2.values()[i] + sx + grow,
                        decoded.y2.values()[i] + sy + grow,
                    )
                })
                .collect();
            let err = grad_check(
                || giou_loss(&decode_deltas_graph(&deltas, &anchors)?, &targets, n),
                &[&deltas],
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-4, "err {err}");
        }
    }

    #[test]
    fn decode_graph_matches_plain_decode() {
        let mut rng = KeyedRng::new(35, 0, "decode-agree");
        let anchors: Vec<BBox> = (0..6)
            .map(|_| {
                let x = rng.range_f64(0.0, 30.0);
                let y = rng.range_f64(0.0, 30.0);
                bb(x, y, x + rng.range_f64(4.0, 20.0), y + rng.range_f64(4.0, 20.0))
            })
            .collect();
        let dvals: Vec<f64> = (0..24).map(|_| rng.range_f64(-0.8, 0.8)).collect();
        let deltas = Tensor::from_values(&[4, 6], dvals.clone()).unwrap();
        let decoded = decode_deltas_graph(&deltas, &anchors).unwrap();
        for i in 0..6 {
            let d = crate::geometry::BoxDeltas {
                dx: dvals[i],
                dy: dvals[6 + i],
                dw: dvals[12 + i],
                dh: dvals[18 + i],
            };
            let plain = crate::geometry::decode_box(&anchors[i], &d).unwrap();
            assert!((decoded.x1.values()[i] - plain.x1).abs() < 1e-12);
            assert!((decoded.y1.values()[i] - plain.y1).abs() < 1e-12);
            assert!((decoded.x2.values()[i] - plain.x2).abs() < 1e-12);
            assert!((decoded.y2.values()[i] - plain.y2).abs() < 1e-12);
        }
        // encode(anchor, anchor) decodes back to the anchor through the graph
        let zero = Tensor::zeros(&[4, 6]);
        let identity = decode_deltas_graph(&zero, &anchors).unwrap();
        for i in 0..6 {
            let d = encode_box(&anchors[i], &anchors[i]).unwrap();
            assert_eq!(d.dx, 0.0);
            assert!((identity.x1.values()[i] - anchors[i].x1).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic_fixtures() {
        let w = LossWeights::default();
        let report = |c: f64, r: f64, l: f64, w: &LossWeights| {
            total_loss(
                &Tensor::scalar(c),
                &Tensor::scalar(r),
                &Tensor::scalar(l),
                w,
                4,
                80,
            )
            .unwrap()
            .1
        };
        assert!((report(0.5, 0.3, 0.2, &w).l_total - 1.0).abs() < 1e-12);
        assert!((report(0.0, 0.3, 0.0, &w).l_total - 0.3).abs() < 1e-12);
        let w2 = LossWeights { cls: 1.0, reg: 2.0, lqe: 0.25 };
        assert!((report(1.0, 1.0, 1.0, &w2).l_total - 3.25).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sum_identity_within_fp() {
        let mut rng = KeyedRng::new(36, 0, "total");
        for _ in 0..100 {
            let (c, r, l) = (rng.uniform() * 3.0, rng.uniform() * 3.0, rng.uniform());
            let (_, rep) = total_loss(
                &Tensor::scalar(c),
                &Tensor::scalar(r),
                &Tensor::scalar(l),
                &LossWeights::default(),
                1,
                10,
            )
            .unwrap();
            let direct = rep.l_cls + rep.l_reg + rep.l_lqe;
            assert!(((rep.l_total - direct) / direct.max(1e-12)).abs() <= 1e-12);
        }
    }

    #[test]
    fn total_loss_rejects_non_finite_component() {
        let err = total_loss(
            &Tensor::scalar(f64::NAN),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            &LossWeights::default(),
            1,
            10,
        )
        .unwrap_err();
        assert!(err.to_string().contains("cls"), "{err}");
        let err = total_loss(
            &Tensor::scalar(0.0),
            &Tensor::scalar(f64::INFINITY),
            &Tensor::scalar(0.0),
            &LossWeights::default(),
            1,
            10,
        )
        .unwrap_err();
        assert!(err.to_string().contains("reg"), "{err}");
    }

    #[test]
    fn losses_nonnegative_randomized() {
        let mut rng = KeyedRng::new(37, 0, "nonneg");
        for _ in 0..200 {
            let n = rng.range_usize(1, 5);
            let p = Tensor::from_values(&[n], (0..n).map(|_| rng.uniform()).collect()).unwrap();
            let t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            assert!(lqe_loss(&p, &t, n).unwrap().scalar_value() >= 0.0);
            assert!(qfl(&p, &t, 2.0, n).unwrap().scalar_value() >= 0.0);
        }
    }

    #[test]
    fn qfl_target_matrix_layout() {
        let targets = Targets {
            class_labels: vec![None, Some(1), Some(0)],
            target_boxes: vec![None, Some(bb(0.0, 0.0, 1.0, 1.0)), Some(bb(0.0, 0.0, 1.0, 1.0))],
            iou_targets: vec![0.0, 0.8, 0.6],
            qe_targets: vec![0.0, 0.9, 0.7],
        };
        let y = qfl_target_matrix(2, &targets);
        assert_eq!(y.len(), 6);
        assert_eq!(y, vec![0.0, 0.0, 0.7, 0.0, 0.9, 0.0]);
    }
}
