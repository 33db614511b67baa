//! The canonical run configuration and its key-sorted text document.
//!
//! One `key = value` line per field, keys sorted, values typed by
//! syntax: bools, integers, floats, quoted strings and `[a, b]` integer
//! lists. Unknown and duplicate keys are rejected; missing keys take
//! their defaults. `parse(serialize(cfg))` reproduces `cfg` exactly.

use std::collections::HashSet;

use crate::assignment::{IouTargetSource, QeTargetMode};
use crate::error::{Error, Result};
use crate::head::{FusionGradientMode, HeadConfig};
use crate::losses::LossWeights;
use crate::synthdata::{SceneConfig, TRUNK_STRIDES};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Linear ramp from 10% of lr over this many leading iterations.
    pub warmup_iters: usize,
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 3000,
            batch_size: 8,
            lr_decay_steps: vec![2400],
            lr_decay_factor: 0.1,
            warmup_iters: 300,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmsConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub pre_nms_top: usize,
    pub max_per_image: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            iou_threshold: 0.6,
            pre_nms_top: 1000,
            max_per_image: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: String,
    pub seed: u64,
    pub deterministic: bool,
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub head: HeadConfig,
    pub anchor_scale: f64,
    pub top_k: usize,
    pub loss_weights: LossWeights,
    pub beta: f64,
    pub iou_target_source: IouTargetSource,
    pub qe_target_mode: QeTargetMode,
    pub optim: OptimConfig,
    pub nms: NmsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            out_dir: "runs/default".into(),
            seed: 7,
            deterministic: true,
            scene: SceneConfig::default(),
            train_scenes: 2000,
            val_scenes: 500,
            head: HeadConfig::default(),
            anchor_scale: 4.0,
            top_k: 9,
            loss_weights: LossWeights::default(),
            beta: 2.0,
            iou_target_source: IouTargetSource::Decoded,
            qe_target_mode: QeTargetMode::PowAlpha,
            optim: OptimConfig::default(),
            nms: NmsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut scene = self.scene.clone();
        scene.seed = self.seed;
        scene.validate()?;
        self.head.validate()?;
        if self.head.class_count != self.scene.class_count {
            return Err(Error::Config(format!(
                "head class count {} differs from data class count {}",
                self.head.class_count, self.scene.class_count
            )));
        }
        for stride in TRUNK_STRIDES {
            if !self.scene.image_size.is_multiple_of(stride) {
                return Err(Error::StrideMismatch {
                    stride,
                    image_size: self.scene.image_size,
                });
            }
        }
        if self.anchor_scale <= 0.0 {
            return Err(Error::Config("anchor scale must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("assigner top_k must be at least 1".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config("train/val scene counts must be positive".into()));
        }
        if self.optim.iterations == 0 || self.optim.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be positive".into()));
        }
        if !(0.0 < self.nms.iou_threshold && self.nms.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "nms iou threshold {} must be in (0, 1)",
                self.nms.iou_threshold
            )));
        }
        if self.nms.pre_nms_top == 0 || self.nms.max_per_image == 0 {
            return Err(Error::Config("nms caps must be positive".into()));
        }
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
        {
            return Err(Error::Config(format!(
                "run name {:?} must be nonempty [A-Za-z0-9._-]",
                self.name
            )));
        }
        Ok(())
    }

    /// Scene config with the run seed applied.
    pub fn seeded_scene(&self) -> SceneConfig {
        let mut scene = self.scene.clone();
        scene.seed = self.seed;
        scene
    }

    pub fn serialize(&self) -> String {
        let fusion = match self.head.fusion_gradient_mode {
            FusionGradientMode::ThroughBoth => "through_both",
            FusionGradientMode::DetachLqe => "detach_lqe",
        };
        let iou_source = match self.iou_target_source {
            IouTargetSource::Anchor => "anchor",
            IouTargetSource::Decoded => "decoded",
        };
        let qe_mode = match self.qe_target_mode {
            QeTargetMode::PowAlpha => "pow_alpha",
            QeTargetMode::RawIou => "raw_iou",
        };
        let steps: Vec<String> = self
            .optim
            .lr_decay_steps
            .iter()
            .map(|s| s.to_string())
            .collect();
        // keys stay sorted; append new ones in order
        format!(
            "anchor.scale_factor = {:?}\n\
             assigner.top_k = {}\n\
             data.class_count = {}\n\
             data.image_size = {}\n\
             data.noise_sigma = {:?}\n\
             data.objects_max = {}\n\
             data.objects_min = {}\n\
             data.occlusion = {}\n\
             data.size_max = {:?}\n\
             data.size_min = {:?}\n\
             data.train_scenes = {}\n\
             data.val_scenes = {}\n\
             head.align = {}\n\
             head.align_coord_grad = {}\n\
             head.alpha = {:?}\n\
             head.channel_width = {}\n\
             head.fusion_gradient_mode = \"{}\"\n\
             head.lqe = {}\n\
             head.trunk_depth = {}\n\
             loss.beta = {:?}\n\
             loss.w_cls = {:?}\n\
             loss.w_lqe = {:?}\n\
             loss.w_reg = {:?}\n\
             nms.iou_threshold = {:?}\n\
             nms.max_per_image = {}\n\
             nms.pre_nms_top = {}\n\
             nms.score_threshold = {:?}\n\
             optim.batch_size = {}\n\
             optim.checkpoint_every = {}\n\
             optim.iterations = {}\n\
             optim.lr = {:?}\n\
             optim.lr_decay_factor = {:?}\n\
             optim.lr_decay_steps = [{}]\n\
             optim.momentum = {:?}\n\
             optim.warmup_iters = {}\n\
             optim.weight_decay = {:?}\n\
             run.deterministic = {}\n\
             run.name = \"{}\"\n\
             run.out_dir = \"{}\"\n\
             run.seed = {}\n\
             targets.iou_source = \"{}\"\n\
             targets.qe_mode = \"{}\"\n",
            self.anchor_scale,
            self.top_k,
            self.scene.class_count,
            self.scene.image_size,
            self.scene.noise_sigma,
            self.scene.objects_max,
            self.scene.objects_min,
            self.scene.occlusion,
            self.scene.size_max,
            self.scene.size_min,
            self.train_scenes,
            self.val_scenes,
            self.head.align_enabled,
            self.head.align_coord_gradient,
            self.head.alpha,
            self.head.channel_width,
            fusion,
            self.head.lqe_enabled,
            self.head.trunk_depth,
            self.beta,
            self.loss_weights.cls,
            self.loss_weights.lqe,
            self.loss_weights.reg,
            self.nms.iou_threshold,
            self.nms.max_per_image,
            self.nms.pre_nms_top,
            self.nms.score_threshold,
            self.optim.batch_size,
            self.optim.checkpoint_every,
            self.optim.iterations,
            self.optim.lr,
            self.optim.lr_decay_factor,
            steps.join(", "),
            self.optim.momentum,
            self.optim.warmup_iters,
            self.optim.weight_decay,
            self.deterministic,
            self.name,
            self.out_dir,
            self.seed,
            iou_source,
            qe_mode,
        )
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();

        for (ln0, raw) in text.lines().enumerate() {
            let ln = ln0 + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    line: ln,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigParse {
                    line: ln,
                    msg: format!("duplicate key {key:?}"),
                });
            }

            let bad = |msg: String| Error::ConfigParse { line: ln, msg };
            let p_f64 = |v: &str| -> Result<f64> {
                let x: f64 = v.parse().map_err(|_| bad(format!("bad float {v:?}")))?;
                if !x.is_finite() {
                    return Err(bad(format!("non-finite float {v:?}")));
                }
                Ok(x)
            };
            let p_usize =
                |v: &str| -> Result<usize> { v.parse().map_err(|_| bad(format!("bad integer {v:?}"))) };
            let p_u64 =
                |v: &str| -> Result<u64> { v.parse().map_err(|_| bad(format!("bad integer {v:?}"))) };
            let p_bool = |v: &str| -> Result<bool> {
                match v {
                    "true" => Ok(true),
                    "false" => Ok(false),
                    _ => Err(bad(format!("bad bool {v:?}"))),
                }
            };
            let p_string = |v: &str| -> Result<String> {
                let inner = v
                    .strip_prefix('"')
                    .and_then(|s| s.strip_suffix('"'))
                    .ok_or_else(|| bad(format!("expected quoted string, got {v:?}")))?;
                if inner.contains('"') || inner.contains('\n') {
                    return Err(bad("string may not contain quotes or newlines".into()));
                }
                Ok(inner.to_string())
            };
            let p_usize_list = |v: &str| -> Result<Vec<usize>> {
                let inner = v
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| bad(format!("expected [list], got {v:?}")))?;
                let inner = inner.trim();
                if inner.is_empty() {
                    return Ok(Vec::new());
                }
                inner
                    .split(',')
                    .map(|part| {
                        part.trim()
                            .parse()
                            .map_err(|_| bad(format!("bad list entry {part:?}")))
                    })
                    .collect()
            };

            match key {
                "anchor.scale_factor" => cfg.anchor_scale = p_f64(value)?,
                "assigner.top_k" => cfg.top_k = p_usize(value)?,
                "data.class_count" => {
                    cfg.scene.class_count = p_usize(value)?;
                    cfg.head.class_count = cfg.scene.class_count;
                }
                "data.image_size" => cfg.scene.image_size = p_usize(value)?,
                "data.noise_sigma" => cfg.scene.noise_sigma = p_f64(value)?,
                "data.objects_max" => cfg.scene.objects_max = p_usize(value)?,
                "data.objects_min" => cfg.scene.objects_min = p_usize(value)?,
                "data.occlusion" => cfg.scene.occlusion = p_bool(value)?,
                "data.size_max" => cfg.scene.size_max = p_f64(value)?,
                "data.size_min" => cfg.scene.size_min = p_f64(value)?,
                "data.train_scenes" => cfg.train_scenes = p_usize(value)?,
                "data.val_scenes" => cfg.val_scenes = p_usize(value)?,
                "head.align" => cfg.head.align_enabled = p_bool(value)?,
                "head.align_coord_grad" => cfg.head.align_coord_gradient = p_bool(value)?,
                "head.alpha" => cfg.head.alpha = p_f64(value)?,
                "head.channel_width" => cfg.head.channel_width = p_usize(value)?,
                "head.fusion_gradient_mode" => {
                    cfg.head.fusion_gradient_mode = match p_string(value)?.as_str() {
                        "through_both" => FusionGradientMode::ThroughBoth,
                        "detach_lqe" => FusionGradientMode::DetachLqe,
                        other => return Err(bad(format!("unknown fusion mode {other:?}"))),
                    }
                }
                "head.lqe" => cfg.head.lqe_enabled = p_bool(value)?,
                "head.trunk_depth" => cfg.head.trunk_depth = p_usize(value)?,
                "loss.beta" => cfg.beta = p_f64(value)?,
                "loss.w_cls" => cfg.loss_weights.cls = p_f64(value)?,
                "loss.w_lqe" => cfg.loss_weights.lqe = p_f64(value)?,
                "loss.w_reg" => cfg.loss_weights.reg = p_f64(value)?,
                "nms.iou_threshold" => cfg.nms.iou_threshold = p_f64(value)?,
                "nms.max_per_image" => cfg.nms.max_per_image = p_usize(value)?,
                "nms.pre_nms_top" => cfg.nms.pre_nms_top = p_usize(value)?,
                "nms.score_threshold" => cfg.nms.score_threshold = p_f64(value)?,
                "optim.batch_size" => cfg.optim.batch_size = p_usize(value)?,
                "optim.checkpoint_every" => cfg.optim.checkpoint_every = p_usize(value)?,
                "optim.iterations" => cfg.optim.iterations = p_usize(value)?,
                "optim.lr" => cfg.optim.lr = p_f64(value)?,
                "optim.lr_decay_factor" => cfg.optim.lr_decay_factor = p_f64(value)?,
                "optim.lr_decay_steps" => cfg.optim.lr_decay_steps = p_usize_list(value)?,
                "optim.momentum" => cfg.optim.momentum = p_f64(value)?,
                "optim.warmup_iters" => cfg.optim.warmup_iters = p_usize(value)?,
                "optim.weight_decay" => cfg.optim.weight_decay = p_f64(value)?,
                "run.deterministic" => cfg.deterministic = p_bool(value)?,
                "run.name" => cfg.name = p_string(value)?,
                "run.out_dir" => cfg.out_dir = p_string(value)?,
                "run.seed" => cfg.seed = p_u64(value)?,
                "targets.iou_source" => {
                    cfg.iou_target_source = match p_string(value)?.as_str() {
                        "anchor" => IouTargetSource::Anchor,
                        "decoded" => IouTargetSource::Decoded,
                        other => return Err(bad(format!("unknown iou source {other:?}"))),
                    }
                }
                "targets.qe_mode" => {
                    cfg.qe_target_mode = match p_string(value)?.as_str() {
                        "pow_alpha" => QeTargetMode::PowAlpha,
                        "raw_iou" => QeTargetMode::RawIou,
                        other => return Err(bad(format!("unknown qe mode {other:?}"))),
                    }
                }
                _ => {
                    return Err(Error::ConfigParse {
                        line: ln,
                        msg: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.scene.seed = cfg.seed;
        Ok(cfg)
    }
}
