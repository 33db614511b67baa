//! Operational surface: run configuration, training loop, evaluation,
//! ablation sweeps, checkpoints, plots, and the self-check suites the
//! CLI exposes.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod plot;
pub mod train;

pub use ablation::{run_ablation, AblationAxis, AblationOutcome};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use evaluate::{evaluate_checkpoint_file, evaluate_model, EvalOutcome, FusionOverride, ResultRow};
pub use train::{train, TrainOutcome};

use crate::autodiff::{grad_check, ParamSet, Tensor};
use crate::error::Result;
use crate::geometry::{generate_anchors, AnchorGrid};
use crate::head::DetectionHead;
use crate::rng::KeyedRng;
use crate::synthdata::{FeatureTrunk, TRUNK_STRIDES};

/// Trunk + head + anchors with their shared parameter registry.
pub struct Model {
    pub trunk: FeatureTrunk,
    pub head: DetectionHead,
    pub anchors: AnchorGrid,
    pub params: ParamSet,
}

/// Deterministically initialize a model from the run config; the trunk
/// draws its weights before the head so head-flag changes never disturb
/// shared initialization.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut rng = KeyedRng::new(cfg.seed, 0, "model-init");
    let trunk = FeatureTrunk::new(cfg.head.channel_width, &mut params, &mut rng)?;
    let head = DetectionHead::new(&cfg.head, &mut params, &mut rng)?;
    let anchors = generate_anchors(cfg.scene.image_size, &TRUNK_STRIDES, cfg.anchor_scale)?;
    Ok(Model {
        trunk,
        head,
        anchors,
        params,
    })
}

/// Worker count: `CLQ_THREADS` when set, else available parallelism.
pub fn worker_count(jobs: usize) -> usize {
    let configured = std::env::var("CLQ_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    configured.unwrap_or(default).min(jobs.max(1))
}

/// Finite-difference check of the composite training loss (QFL + GIoU +
/// LQE through the aligned head and trunk) against every parameter.
///
/// Weights are redrawn into a positive-activation regime so no relu
/// pre-activation sits inside the finite-difference window; box targets
/// are displaced decoded boxes so no GIoU min/max ties occur.
pub fn composite_gradcheck(draws: usize, seed: u64) -> Result<f64> {
    use crate::assignment::{atss_assign, build_targets, GroundTruth, TargetOptions};
    use crate::geometry::BBox;

    let mut worst = 0.0f64;
    for draw in 0..draws {
        let mut cfg = RunConfig::default();
        cfg.scene.image_size = 16;
        cfg.scene.class_count = 2;
        cfg.scene.size_min = 8.0;
        cfg.scene.size_max = 12.0;
        cfg.head.class_count = 2;
        cfg.head.channel_width = 2;
        cfg.head.trunk_depth = 1;
        cfg.head.align_enabled = true;
        cfg.head.lqe_enabled = true;
        // exact differentiability for the finite-difference oracle
        cfg.head.align_coord_gradient = true;
        cfg.anchor_scale = 3.0;
        cfg.seed = seed.wrapping_add(draw as u64);

        let model = build_model(&cfg)?;
        let mut rng = KeyedRng::new(cfg.seed, 1, "composite-fd");
        for p in model.params.iter() {
            let vals: Vec<f64> = p
                .tensor
                .values()
                .iter()
                .map(|v| v.abs().max(0.01) + rng.range_f64(0.02, 0.3))
                .collect();
            p.tensor.set_values(&vals);
        }
        let image = Tensor::from_values(
            &[3, 16, 16],
            (0..3 * 256).map(|_| rng.range_f64(0.05, 1.0)).collect(),
        )?;
        let gt = {
            let x1 = rng.range_f64(0.5, 4.0);
            let y1 = rng.range_f64(0.5, 4.0);
            GroundTruth {
                bbox: BBox::new(x1, y1, x1 + rng.range_f64(8.0, 11.0), y1 + rng.range_f64(8.0, 11.0))?,
                class_id: rng.range_usize(0, 1),
            }
        };
        let gts = vec![gt];
        let assignment = atss_assign(&model.anchors, &gts, cfg.top_k);
        // freeze targets at the base point; they are constants w.r.t. the
        // parameters being checked
        let pieces_probe = train::forward_image(&model, &cfg, &image)?;
        let decoded = pieces_probe.decoded_boxes.clone();
        let targets = build_targets(
            &model.anchors,
            &assignment,
            &gts,
            &decoded,
            &TargetOptions {
                alpha: cfg.head.alpha,
                iou_source: cfg.iou_target_source,
                qe_mode: cfg.qe_target_mode,
            },
        )?;

        let tensors: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let err = grad_check(
            || {
                let pieces = train::forward_image(&model, &cfg, &image)?;
                let (total, _) = train::losses_from_pieces(
                    &model,
                    &[pieces],
                    &[(assignment.clone(), targets.clone())],
                    &cfg,
                )?;
                Ok(total)
            },
            &refs,
            1e-4,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// One oracle-equivalence check: name, pass flag, detail line.
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Randomized equivalence of the fast paths against the independent
/// reference implementations.
pub fn oracle_suite(seed: u64) -> Vec<OracleCheck> {
    use crate::assignment::{atss_assign, GroundTruth};
    use crate::geometry::BBox;
    use crate::oracles;
    use crate::postprocess::{self, Detection};

    let mut out = Vec::new();

    // NMS vs O(n^2) reference: exact keep-set match on 200 random sets
    {
        let mut rng = KeyedRng::new(seed, 0, "suite-nms");
        let mut mismatches = 0;
        for _ in 0..200 {
            let n = rng.range_usize(0, 50);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x = rng.range_f64(0.0, 40.0);
                    let y = rng.range_f64(0.0, 40.0);
                    Detection {
                        bbox: BBox::new(x, y, x + rng.range_f64(2.0, 20.0), y + rng.range_f64(2.0, 20.0))
                            .unwrap(),
                        class_id: rng.range_usize(0, 3),
                        score: rng.uniform(),
                    }
                })
                .collect();
            let thr = rng.range_f64(0.2, 0.8);
            let kept = postprocess::nms(&dets, thr, 0.05, 60);
            let reference: Vec<Detection> = oracles::nms_reference(&dets, thr, 0.05, 60)
                .into_iter()
                .map(|i| dets[i].clone())
                .collect();
            if kept != reference {
                mismatches += 1;
            }
        }
        out.push(OracleCheck {
            name: "nms vs O(n^2) reference (200 sets)",
            passed: mismatches == 0,
            detail: format!("{mismatches} mismatching keep-sets"),
        });
    }

    // AP evaluator vs brute-force PR integration on 200 micro-scenes
    {
        let mut rng = KeyedRng::new(seed, 1, "suite-ap");
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let n_img = rng.range_usize(1, 2);
            let gts: Vec<Vec<GroundTruth>> = (0..n_img)
                .map(|_| {
                    (0..rng.range_usize(0, 4))
                        .map(|_| {
                            let x = rng.range_f64(0.0, 30.0);
                            let y = rng.range_f64(0.0, 30.0);
                            GroundTruth {
                                bbox: BBox::new(
                                    x,
                                    y,
                                    x + rng.range_f64(4.0, 15.0),
                                    y + rng.range_f64(4.0, 15.0),
                                )
                                .unwrap(),
                                class_id: rng.range_usize(0, 2),
                            }
                        })
                        .collect()
                })
                .collect();
            let dets: Vec<Vec<Detection>> = gts
                .iter()
                .map(|image_gts| {
                    let mut d: Vec<Detection> = (0..rng.range_usize(0, 5))
                        .map(|_| {
                            let x = rng.range_f64(0.0, 30.0);
                            let y = rng.range_f64(0.0, 30.0);
                            Detection {
                                bbox: BBox::new(
                                    x,
                                    y,
                                    x + rng.range_f64(3.0, 14.0),
                                    y + rng.range_f64(3.0, 14.0),
                                )
                                .unwrap(),
                                class_id: rng.range_usize(0, 2),
                                score: rng.uniform(),
                            }
                        })
                        .collect();
                    for g in image_gts.iter().take(rng.range_usize(0, 3)) {
                        let dx = rng.range_f64(-2.0, 2.0);
                        let dy = rng.range_f64(-2.0, 2.0);
                        d.push(Detection {
                            bbox: BBox::new(
                                g.bbox.x1 + dx,
                                g.bbox.y1 + dy,
                                g.bbox.x2 + dx,
                                g.bbox.y2 + dy,
                            )
                            .unwrap(),
                            class_id: g.class_id,
                            score: rng.uniform(),
                        });
                    }
                    d.truncate(8);
                    d
                })
                .collect();
            let thresholds = postprocess::coco_thresholds();
            let fast = postprocess::evaluate_ap(&dets, &gts, &thresholds).ap;
            let brute = oracles::ap_reference(&dets, &gts, &thresholds);
            worst = worst.max((fast - brute).abs());
        }
        out.push(OracleCheck {
            name: "AP vs brute-force PR integration (200 scenes)",
            passed: worst <= 1e-9,
            detail: format!("max |difference| = {worst:.3e}"),
        });
    }

    // ATSS vs naive re-implementation on 500 random scenes
    {
        let mut rng = KeyedRng::new(seed, 2, "suite-atss");
        let mut mismatches = 0;
        for scene in 0..500 {
            let (image, strides, scale): (usize, &[usize], f64) = match scene % 3 {
                0 => (32, &[8, 16], 4.0),
                1 => (64, &[8, 16], 8.0),
                _ => (32, &[8], 2.0),
            };
            let grid = generate_anchors(image, strides, scale).unwrap();
            let n = rng.range_usize(0, 5);
            let gts: Vec<GroundTruth> = (0..n)
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
                .collect();
            let topk = rng.range_usize(1, 9);
            let fast = atss_assign(&grid, &gts, topk);
            let naive = oracles::atss_reference(&grid, &gts, topk);
            if fast.assigned_gt != naive {
                mismatches += 1;
            }
        }
        out.push(OracleCheck {
            name: "ATSS vs naive re-implementation (500 scenes)",
            passed: mismatches == 0,
            detail: format!("{mismatches} diverging scenes"),
        });
    }

    // Spearman vs direct rank-then-Pearson reference
    {
        let mut rng = KeyedRng::new(seed, 3, "suite-spearman");
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let n = rng.range_usize(3, 25);
            let xs: Vec<f64> = (0..n).map(|_| rng.range_usize(0, 8) as f64 / 8.0).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.range_usize(0, 8) as f64 / 8.0).collect();
            let reference = crate::oracles::spearman_reference(&xs, &ys);
            if !reference.is_finite() {
                continue;
            }
            let mine = postprocess::spearman(&xs, &ys).unwrap();
            worst = worst.max((mine - reference).abs());
        }
        out.push(OracleCheck {
            name: "Spearman vs rank-then-Pearson reference (200 draws)",
            passed: worst <= 1e-12,
            detail: format!("max |difference| = {worst:.3e}"),
        });
    }

    out
}
