//! The detection head: separate classification and regression conv
//! stacks shared across pyramid levels, a one-projection LQE branch off
//! the regression features, fusion of classification and QE scores into
//! the joint ranking score, and optional box-guided feature alignment
//! feeding the classification stack.

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::geometry::AnchorGrid;
use crate::losses::{decode_deltas_graph, BoxTensors};
use crate::rng::KeyedRng;

/// How gradients treat the QE factor of the fused ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionGradientMode {
    /// Gradients reach both the classification and the LQE branch.
    ThroughBoth,
    /// The QE factor is a constant for backpropagation.
    DetachLqe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub class_count: usize,
    pub trunk_depth: usize,
    pub channel_width: usize,
    /// Exponent of the QE score.
    pub alpha: f64,
    pub align_enabled: bool,
    pub lqe_enabled: bool,
    pub fusion_gradient_mode: FusionGradientMode,
    /// Let gradients flow from the aligned branches into the regression
    /// deltas through the sample coordinates. Off by default: the
    /// classification loss steering regression through tap positions is
    /// the feedback loop alignment is wired to avoid.
    pub align_coord_gradient: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            class_count: 4,
            trunk_depth: 2,
            channel_width: 16,
            alpha: 0.3,
            align_enabled: false,
            lqe_enabled: true,
            fusion_gradient_mode: FusionGradientMode::ThroughBoth,
            align_coord_gradient: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.trunk_depth == 0 || self.channel_width == 0 {
            return Err(Error::Config(
                "class_count, trunk_depth and channel_width must be positive".into(),
            ));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Dense per-level outputs of the head.
pub struct LevelPredictions {
    /// `[class_count x h x w]`
    pub cls_logits: Tensor,
    /// `[4 x h x w]`
    pub deltas: Tensor,
    /// `[1 x h x w]`, present when the LQE branch is enabled.
    pub iou_logits: Option<Tensor>,
}

pub struct DensePredictions {
    pub levels: Vec<LevelPredictions>,
}

/// Classification prior probability for the final-layer bias.
const CLS_PRIOR: f64 = 0.01;

#[allow(clippy::too_many_arguments)]
fn conv_init(
    params: &mut ParamSet,
    rng: &mut KeyedRng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    weight_std: f64,
    bias_value: f64,
) -> Result<(Tensor, Tensor)> {
    let w: Vec<f64> = (0..cout * cin * k * k)
        .map(|_| rng.normal() * weight_std)
        .collect();
    let weight = params.register(
        &format!("{name}.weight"),
        Tensor::from_values(&[cout, cin, k, k], w)?,
    )?;
    let bias = params.register(
        &format!("{name}.bias"),
        Tensor::full(&[cout], bias_value),
    )?;
    Ok((weight, bias))
}

pub struct DetectionHead {
    cfg: HeadConfig,
    cls_convs: Vec<(Tensor, Tensor)>,
    reg_convs: Vec<(Tensor, Tensor)>,
    cls_out: (Tensor, Tensor),
    reg_out: (Tensor, Tensor),
    /// `[c x 9c]` tap-major projection blocks plus bias, when aligned.
    align: Option<(Tensor, Tensor)>,
    /// 1x1 projection of the regression branch's last hidden features.
    lqe: Option<(Tensor, Tensor)>,
}

impl DetectionHead {
    /// Register all head parameters. Parameters shared between
    /// configurations are drawn first so that toggling the LQE branch
    /// leaves them bit-identical for a given rng state.
    pub fn new(cfg: &HeadConfig, params: &mut ParamSet, rng: &mut KeyedRng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channel_width;
        let he = (2.0 / (c * 9) as f64).sqrt();

        let mut cls_convs = Vec::with_capacity(cfg.trunk_depth);
        let mut reg_convs = Vec::with_capacity(cfg.trunk_depth);
        for d in 0..cfg.trunk_depth {
            cls_convs.push(conv_init(params, rng, &format!("head.cls.{d}"), c, c, 3, he, 0.0)?);
        }
        for d in 0..cfg.trunk_depth {
            reg_convs.push(conv_init(params, rng, &format!("head.reg.{d}"), c, c, 3, he, 0.0)?);
        }
        let prior_bias = (CLS_PRIOR / (1.0 - CLS_PRIOR)).ln();
        let cls_out = conv_init(
            params,
            rng,
            "head.cls_out",
            cfg.class_count,
            c,
            3,
            0.01,
            prior_bias,
        )?;
        let reg_out = conv_init(params, rng, "head.reg_out", 4, c, 3, 0.01, 0.0)?;

        // Alignment starts as the identity on the center tap: aligned
        // features equal the trunk features for centered boxes at init.
        let align = if cfg.align_enabled {
            let mut w = vec![0.0; c * 9 * c];
            for o in 0..c {
                w[o * 9 * c + 4 * c + o] = 1.0;
            }
            let weight = params.register("head.align.weight", Tensor::from_values(&[c, 9 * c], w)?)?;
            let bias = params.register("head.align.bias", Tensor::zeros(&[c]))?;
            Some((weight, bias))
        } else {
            None
        };

        let lqe = if cfg.lqe_enabled {
            Some(conv_init(params, rng, "head.lqe", 1, c, 1, 0.01, 0.0)?)
        } else {
            None
        };

        Ok(Self {
            cfg: cfg.clone(),
            cls_convs,
            reg_convs,
            cls_out,
            reg_out,
            align,
            lqe,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// Number of scalar parameters the LQE branch adds: one 1x1
    /// projection (channels) plus its bias.
    pub fn lqe_parameter_count(cfg: &HeadConfig) -> usize {
        cfg.channel_width + 1
    }

    fn stack(&self, input: &Tensor, convs: &[(Tensor, Tensor)]) -> Result<Tensor> {
        let mut x = input.clone();
        for (w, b) in convs {
            x = x.conv2d(w, b, 1, 1)?.relu();
        }
        Ok(x)
    }

    /// Forward over all pyramid levels; weights are shared across levels.
    pub fn forward(&self, features: &[Tensor], anchors: &AnchorGrid) -> Result<DensePredictions> {
        if features.len() != anchors.levels.len() {
            return Err(Error::IndexMisalignment {
                expected: anchors.levels.len(),
                got: features.len(),
            });
        }
        let c = self.cfg.channel_width;
        let mut levels = Vec::with_capacity(features.len());
        for (x, level) in features.iter().zip(&anchors.levels) {
            if x.shape().len() != 3 || x.shape()[0] != c {
                return Err(Error::ShapeMismatch {
                    op: "head forward",
                    left: x.shape().to_vec(),
                    right: vec![c, level.height, level.width],
                });
            }
            if x.shape()[1] != level.height || x.shape()[2] != level.width {
                return Err(Error::ShapeMismatch {
                    op: "head forward vs anchor grid",
                    left: x.shape().to_vec(),
                    right: vec![c, level.height, level.width],
                });
            }

            let reg_hidden = self.stack(x, &self.reg_convs)?;
            let deltas = reg_hidden.conv2d(&self.reg_out.0, &self.reg_out.1, 1, 1)?;

            let cls_in = match &self.align {
                Some((aw, ab)) => {
                    let n = level.height * level.width;
                    let flat = deltas.reshape(&[4, n])?;
                    let source = if self.cfg.align_coord_gradient {
                        flat
                    } else {
                        // default: frozen boxes, so the classification
                        // loss cannot steer regression through the taps
                        flat.detach()
                    };
                    let decoded = decode_deltas_graph(&source, &level.anchors)?;
                    align_features(x, &decoded, level.stride as f64, aw, ab)?
                }
                None => x.clone(),
            };
            let cls_hidden = self.stack(&cls_in, &self.cls_convs)?;
            let cls_logits = cls_hidden.conv2d(&self.cls_out.0, &self.cls_out.1, 1, 1)?;

            // the LQE projection reads the regression hidden features;
            // with alignment on it reads the box-aligned features
            // instead, whose taps cover the decoded box it must score
            let iou_logits = match &self.lqe {
                Some((w, b)) => {
                    let iou_in = if self.align.is_some() { &cls_in } else { &reg_hidden };
                    Some(iou_in.conv2d(w, b, 1, 0)?)
                }
                None => None,
            };

            levels.push(LevelPredictions {
                cls_logits,
                deltas,
                iou_logits,
            });
        }
        Ok(DensePredictions { levels })
    }

    /// Fused ranking score per level, `[class_count x h x w]` each.
    pub fn ranking_scores(&self, preds: &DensePredictions) -> Result<Vec<Tensor>> {
        preds
            .levels
            .iter()
            .map(|lvl| {
                fuse_ranking_scores(
                    &lvl.cls_logits,
                    lvl.iou_logits.as_ref(),
                    self.cfg.alpha,
                    self.cfg.fusion_gradient_mode,
                )
            })
            .collect()
    }
}

/// QE score: elementwise `iou^alpha` of a unit-interval map.
pub fn qe_score(predicted_iou: &Tensor, alpha: f64) -> Tensor {
    predicted_iou.powf(alpha)
}

/// Joint ranking score `sigmoid(cls) * sigmoid(iou)^alpha`, broadcast
/// over classes. Without LQE logits the ranking is the classification
/// score alone.
pub fn fuse_ranking_scores(
    cls_logits: &Tensor,
    iou_logits: Option<&Tensor>,
    alpha: f64,
    mode: FusionGradientMode,
) -> Result<Tensor> {
    let shape = cls_logits.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "fuse_ranking_scores",
            left: shape,
            right: vec![],
        });
    }
    let (m, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let cls = cls_logits.reshape(&[m, n])?.sigmoid();
    let Some(il) = iou_logits else {
        return cls.reshape(&[m, h, w]);
    };
    if il.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "fuse_ranking_scores",
            left: il.shape().to_vec(),
            right: vec![1, h, w],
        });
    }
    let mut qe = qe_score(&il.reshape(&[1, n])?.row(0)?.sigmoid(), alpha);
    if mode == FusionGradientMode::DetachLqe {
        qe = qe.detach();
    }
    cls.mul(&qe.repeat_row(m)?)?.reshape(&[m, h, w])
}

/// Sample trunk features on a 3x3 grid spanning each decoded box
/// (corners, edge midpoints, center) and mix the taps with a learned
/// `[c x 9c]` projection plus bias. Out-of-bounds samples read zero,
/// matching a zero-padded convolution.
pub fn align_features(
    features: &Tensor,
    boxes: &BoxTensors,
    stride: f64,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let shape = features.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    if boxes.x1.len() != n {
        return Err(Error::IndexMisalignment {
            expected: n,
            got: boxes.x1.len(),
        });
    }

    let to_feat = |t: &Tensor| t.mul_scalar(1.0 / stride).add_scalar(-0.5);
    let span_x = boxes.x2.sub(&boxes.x1)?;
    let span_y = boxes.y2.sub(&boxes.y1)?;

    let mut acc: Option<Tensor> = None;
    for ty in 0..3 {
        let fy = ty as f64 * 0.5;
        let py = to_feat(&boxes.y1.add(&span_y.mul_scalar(fy))?);
        for tx in 0..3 {
            let fx = tx as f64 * 0.5;
            let px = to_feat(&boxes.x1.add(&span_x.mul_scalar(fx))?);
            let sampled = features.bilinear_sample(&px, &py)?;
            let tap = ty * 3 + tx;
            let cols: Vec<usize> = (tap * c..(tap + 1) * c).collect();
            let contrib = weight.gather_cols(&cols)?.matmul(&sampled)?;
            acc = Some(match acc {
                Some(a) => a.add(&contrib)?,
                None => contrib,
            });
        }
    }
    let out = acc.unwrap().add(&bias.repeat_col(n)?)?;
    out.reshape(&[c, h, w])
}
