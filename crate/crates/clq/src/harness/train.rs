//! Training loop: sample scenes, forward trunk + head, assign targets,
//! assemble the batch loss, backpropagate, step SGD, log one loss row
//! per iteration. In deterministic mode the whole loss trace is a pure
//! function of (config, seed).

use std::path::{Path, PathBuf};

use crate::assignment::{atss_assign, build_targets, AssignmentResult, GroundTruth, TargetOptions, Targets};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{decode_box, BBox, BoxDeltas};
use crate::losses::{self, LossReport};
use crate::synthdata::{generate_scene, scene_to_tensor};

use super::checkpoint::{write_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::Model;

/// Graph handles and plain values produced by one image's forward pass.
pub struct ImagePieces {
    /// `[class_count x n_total]` fused ranking scores.
    pub ranking: Tensor,
    /// `[4 x n_total]` regression deltas.
    pub deltas_flat: Tensor,
    /// `[n_total]` IoU logits when the LQE branch is enabled.
    pub iou_flat: Option<Tensor>,
    /// Decoded predicted boxes as plain values (no gradients).
    pub decoded_boxes: Vec<BBox>,
    pub n_total: usize,
}

/// Forward one image through trunk and head, flattening all levels.
pub fn forward_image(model: &Model, cfg: &RunConfig, image: &Tensor) -> Result<ImagePieces> {
    let features = model.trunk.forward(image)?;
    let preds = model.head.forward(&features, &model.anchors)?;
    let rankings = model.head.ranking_scores(&preds)?;

    let m = cfg.head.class_count;
    let mut ranking_parts = Vec::with_capacity(preds.levels.len());
    let mut delta_parts = Vec::with_capacity(preds.levels.len());
    let mut iou_parts = Vec::with_capacity(preds.levels.len());
    for (level, ranking) in preds.levels.iter().zip(&rankings) {
        let hw = level.deltas.shape()[1] * level.deltas.shape()[2];
        ranking_parts.push(ranking.reshape(&[m, hw])?);
        delta_parts.push(level.deltas.reshape(&[4, hw])?);
        if let Some(il) = &level.iou_logits {
            iou_parts.push(il.reshape(&[1, hw])?.row(0)?);
        }
    }
    let ranking = Tensor::concat_last(&ranking_parts)?;
    let deltas_flat = Tensor::concat_last(&delta_parts)?;
    let iou_flat = if iou_parts.is_empty() {
        None
    } else {
        Some(Tensor::concat_last(&iou_parts)?)
    };

    let n_total = model.anchors.total();
    let dv = deltas_flat.values();
    let mut decoded_boxes = Vec::with_capacity(n_total);
    for (i, anchor) in model.anchors.iter_all().enumerate() {
        let deltas = BoxDeltas {
            dx: dv[i],
            dy: dv[n_total + i],
            dw: dv[2 * n_total + i],
            dh: dv[3 * n_total + i],
        };
        decoded_boxes.push(decode_box(anchor, &deltas)?);
    }

    Ok(ImagePieces {
        ranking,
        deltas_flat,
        iou_flat,
        decoded_boxes,
        n_total,
    })
}

/// Assignment plus targets for one image.
pub fn assign_image(
    model: &Model,
    cfg: &RunConfig,
    gts: &[GroundTruth],
    decoded_boxes: &[BBox],
) -> Result<(AssignmentResult, Targets)> {
    let assignment = atss_assign(&model.anchors, gts, cfg.top_k);
    let targets = build_targets(
        &model.anchors,
        &assignment,
        gts,
        decoded_boxes,
        &TargetOptions {
            alpha: cfg.head.alpha,
            iou_source: cfg.iou_target_source,
            qe_mode: cfg.qe_target_mode,
        },
    )?;
    Ok((assignment, targets))
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
    pub reports: Vec<LossReport>,
}

pub const LOSS_CSV_HEADER: &str = "iter,L_cls,L_reg,L_lqe,L_total,N_pos";

/// Learning rate schedule: linear warmup from 10% over the leading
/// iterations, then multiplied by the decay factor once for every decay
/// step the iteration has passed.
pub fn lr_at(cfg: &RunConfig, iteration: usize) -> f64 {
    let warmup = cfg.optim.warmup_iters;
    let base = if warmup > 0 && iteration <= warmup {
        let t = iteration as f64 / warmup as f64;
        cfg.optim.lr * (0.1 + 0.9 * t)
    } else {
        cfg.optim.lr
    };
    let decays = cfg
        .optim
        .lr_decay_steps
        .iter()
        .filter(|&&s| iteration > s)
        .count();
    base * cfg.optim.lr_decay_factor.powi(decays as i32)
}

pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut model = super::build_model(cfg)?;
    let scene_cfg = cfg.seeded_scene();

    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut reports = Vec::with_capacity(cfg.optim.iterations);

    for iter in 1..=cfg.optim.iterations {
        let mut pieces = Vec::with_capacity(cfg.optim.batch_size);
        let mut assigned = Vec::with_capacity(cfg.optim.batch_size);
        for j in 0..cfg.optim.batch_size {
            let idx = ((iter - 1) * cfg.optim.batch_size + j) % cfg.train_scenes;
            let scene = generate_scene(&scene_cfg, idx as u64);
            let image = scene_to_tensor(&scene);
            let piece = forward_image(&model, cfg, &image)?;
            let pair = assign_image(&model, cfg, &scene.gts, &piece.decoded_boxes)?;
            pieces.push(piece);
            assigned.push(pair);
        }

        let (total, report) = losses_from_pieces(&model, &pieces, &assigned, cfg)
            .map_err(|e| match e {
                Error::NonFiniteLoss { component, .. } => Error::NonFiniteLoss {
                    component,
                    iteration: iter,
                },
                other => other,
            })?;
        total.backward()?;
        model
            .params
            .sgd_step(lr_at(cfg, iter), cfg.optim.momentum, cfg.optim.weight_decay);

        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            iter, report.l_cls, report.l_reg, report.l_lqe, report.l_total, report.n_pos
        ));
        reports.push(report);

        if cfg.optim.checkpoint_every > 0 && iter % cfg.optim.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_{iter:06}.clq"));
            write_checkpoint(
                &path,
                &Checkpoint {
                    iteration: iter as u64,
                    config_text: cfg.serialize(),
                    tensors: model.params.snapshot(),
                },
            )?;
        }
    }

    let loss_csv_path = out_dir.join("loss.csv");
    std::fs::write(&loss_csv_path, &csv)?;
    let checkpoint_path = out_dir.join("checkpoint.clq");
    write_checkpoint(
        &checkpoint_path,
        &Checkpoint {
            iteration: cfg.optim.iterations as u64,
            config_text: cfg.serialize(),
            tensors: model.params.snapshot(),
        },
    )?;

    Ok(TrainOutcome {
        checkpoint_path,
        loss_csv_path,
        reports,
    })
}

/// Batch loss over a set of images: QFL over every anchor of every
/// image, GIoU and LQE BCE over the pooled positives, all normalized by
/// the batch positive count.
pub fn losses_from_pieces(
    model: &Model,
    pieces: &[ImagePieces],
    assigned: &[(AssignmentResult, Targets)],
    cfg: &RunConfig,
) -> Result<(Tensor, LossReport)> {
    let flat: Vec<&BBox> = model.anchors.iter_all().collect();
    let m = cfg.head.class_count;

    let n_pos: usize = assigned.iter().map(|(a, _)| a.n_pos).sum();
    let n_total: usize = pieces.iter().map(|p| p.n_total).sum();

    let ranking_parts: Vec<Tensor> = pieces.iter().map(|p| p.ranking.clone()).collect();
    let ranking_all = Tensor::concat_last(&ranking_parts)?;
    let mut y_all = vec![0.0; m * n_total];
    let widths: Vec<usize> = pieces.iter().map(|p| p.n_total).collect();
    for class in 0..m {
        let mut off = 0;
        for ((_, targets), &w) in assigned.iter().zip(&widths) {
            let y = losses::qfl_target_matrix(m, targets);
            y_all[class * n_total + off..class * n_total + off + w]
                .copy_from_slice(&y[class * w..(class + 1) * w]);
            off += w;
        }
    }
    let cls = losses::qfl(&ranking_all, &y_all, cfg.beta, n_pos)?;

    let mut pos_delta_parts: Vec<Tensor> = Vec::new();
    let mut pos_iou_parts: Vec<Tensor> = Vec::new();
    let mut pos_anchors: Vec<BBox> = Vec::new();
    let mut pos_boxes: Vec<BBox> = Vec::new();
    let mut pos_iou_targets: Vec<f64> = Vec::new();
    for (piece, (assignment, targets)) in pieces.iter().zip(assigned) {
        let pos = assignment.positive_indices();
        if pos.is_empty() {
            continue;
        }
        pos_delta_parts.push(piece.deltas_flat.gather_cols(&pos)?);
        if let Some(iou_flat) = &piece.iou_flat {
            pos_iou_parts.push(iou_flat.gather_cols(&pos)?);
        }
        for &i in &pos {
            pos_anchors.push(*flat[i]);
            pos_boxes.push(targets.target_boxes[i].expect("positive anchor has a target box"));
            pos_iou_targets.push(targets.iou_targets[i]);
        }
    }

    let reg = if pos_delta_parts.is_empty() {
        Tensor::scalar(0.0)
    } else {
        let deltas = Tensor::concat_last(&pos_delta_parts)?;
        let decoded = losses::decode_deltas_graph(&deltas, &pos_anchors)?;
        losses::giou_loss(&decoded, &pos_boxes, n_pos)?
    };

    let lqe = if pos_iou_parts.is_empty() {
        Tensor::scalar(0.0)
    } else {
        let probs = Tensor::concat_last(&pos_iou_parts)?.sigmoid();
        losses::lqe_loss(&probs, &pos_iou_targets, n_pos)?
    };

    losses::total_loss(&cls, &reg, &lqe, &cfg.loss_weights, n_pos, n_total)
}
