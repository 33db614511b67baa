//! Deterministic synthetic detection benchmark: small multi-object
//! scenes with class-distinctive striped textures over a noisy
//! background, plus the miniature strided trunk that stands in for a
//! backbone + FPN.
//!
//! Scene `i` is a pure function of `(seed, i)`; generation order never
//! matters, so scenes can be produced in parallel or on demand.

use crate::assignment::GroundTruth;
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::KeyedRng;

/// Pyramid strides produced by [`FeatureTrunk`].
pub const TRUNK_STRIDES: [usize; 2] = [8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Square image side in pixels; must be divisible by 16.
    pub image_size: usize,
    pub class_count: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    /// Std of the Gaussian pixel noise added to object textures.
    pub noise_sigma: f64,
    pub occlusion: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            class_count: 4,
            objects_min: 1,
            objects_max: 4,
            size_min: 12.0,
            size_max: 40.0,
            noise_sigma: 0.1,
            occlusion: true,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 16",
                self.image_size
            )));
        }
        if self.class_count == 0 || self.class_count > 8 {
            return Err(Error::Config(format!(
                "class_count {} must be in 1..=8",
                self.class_count
            )));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config("objects range must satisfy 1 <= min <= max".into()));
        }
        let min_stride = TRUNK_STRIDES[0] as f64;
        if self.size_min < min_stride {
            return Err(Error::Config(format!(
                "size_min {} below the smallest stride {min_stride}; objects would be unassignable",
                self.size_min
            )));
        }
        if self.size_min > self.size_max || self.size_max > self.image_size as f64 {
            return Err(Error::Config("size range must fit inside the image".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One rendered scene: channel-major RGB image in [0, 1] and its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Vec<f64>,
    pub size: usize,
    pub gts: Vec<GroundTruth>,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.15, 0.85, 0.25],
    [0.20, 0.35, 0.95],
    [0.92, 0.85, 0.15],
    [0.80, 0.20, 0.90],
    [0.15, 0.90, 0.85],
    [0.95, 0.55, 0.15],
    [0.75, 0.75, 0.75],
];

/// Deterministic class texture at object-local pixel coordinates: a base
/// color modulated by stripes whose frequency and orientation carry the
/// class identity.
pub fn class_pattern(class: usize, lx: usize, ly: usize) -> [f64; 3] {
    let base = PALETTE[class % PALETTE.len()];
    let freq = std::f64::consts::TAU / (3.0 + class as f64);
    let coord = match class % 3 {
        0 => lx as f64,
        1 => ly as f64,
        _ => lx as f64 + ly as f64,
    };
    let stripe = 0.22 * (freq * coord).sin();
    [
        (base[0] + stripe).clamp(0.0, 1.0),
        (base[1] + stripe).clamp(0.0, 1.0),
        (base[2] + stripe).clamp(0.0, 1.0),
    ]
}

fn try_place(
    rng: &mut KeyedRng,
    cfg: &SceneConfig,
    existing: &[BBox],
) -> Option<BBox> {
    let s = cfg.image_size as f64;
    for _ in 0..40 {
        let w = rng.range_f64(cfg.size_min, cfg.size_max);
        let h = rng.range_f64(cfg.size_min, cfg.size_max);
        let x1 = rng.range_f64(0.0, s - w);
        let y1 = rng.range_f64(0.0, s - h);
        let candidate = BBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        let ok = existing.iter().all(|b| {
            if cfg.occlusion {
                crate::geometry::iou(b, &candidate) <= 0.7
            } else {
                let ix = (b.x2.min(candidate.x2) - b.x1.max(candidate.x1)).max(0.0);
                let iy = (b.y2.min(candidate.y2) - b.y1.max(candidate.y1)).max(0.0);
                ix * iy == 0.0
            }
        });
        if ok {
            return Some(candidate);
        }
    }
    None
}

/// Render scene `index`. Placement that cannot be satisfied retries the
/// whole scene with one object fewer, down to a single object, so
/// generation never fails.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Scene {
    debug_assert!(cfg.validate().is_ok());
    let s = cfg.image_size;
    let mut count_rng = KeyedRng::new(cfg.seed, index, "object-count");
    let want = count_rng.range_usize(cfg.objects_min, cfg.objects_max);

    let mut placed: Vec<(BBox, usize)> = Vec::new();
    for attempt in 0..want {
        let target = want - attempt;
        let mut rng = KeyedRng::new(cfg.seed, index, &format!("objects-try{attempt}"));
        let mut boxes: Vec<BBox> = Vec::new();
        let mut classes: Vec<usize> = Vec::new();
        let mut complete = true;
        for _ in 0..target {
            match try_place(&mut rng, cfg, &boxes) {
                Some(b) => {
                    boxes.push(b);
                    classes.push(rng.range_usize(0, cfg.class_count - 1));
                }
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            placed = boxes.into_iter().zip(classes).collect();
            break;
        }
    }
    if placed.is_empty() {
        // a single object always fits
        let mut rng = KeyedRng::new(cfg.seed, index, "objects-last");
        let b = try_place(&mut rng, cfg, &[]).expect("single object placement");
        placed.push((b, rng.range_usize(0, cfg.class_count - 1)));
    }

    // background: mid gray with low-amplitude uniform noise
    let mut bg_rng = KeyedRng::new(cfg.seed, index, "background");
    let mut image = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let v = 0.5 + bg_rng.range_f64(-0.06, 0.06);
            for ch in 0..3 {
                image[(ch * s + y) * s + x] = v;
            }
        }
    }

    // objects painted in order; later objects occlude earlier ones
    let mut noise_rng = KeyedRng::new(cfg.seed, index, "texture-noise");
    for (bbox, class) in &placed {
        let px1 = bbox.x1.floor().max(0.0) as usize;
        let py1 = bbox.y1.floor().max(0.0) as usize;
        let px2 = (bbox.x2.ceil() as usize).min(s);
        let py2 = (bbox.y2.ceil() as usize).min(s);
        for y in py1..py2 {
            for x in px1..px2 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if !bbox.contains_point(cx, cy) {
                    continue;
                }
                let pattern = class_pattern(*class, x - px1, y - py1);
                for (ch, base) in pattern.iter().enumerate() {
                    let noise = if cfg.noise_sigma > 0.0 {
                        cfg.noise_sigma * noise_rng.normal()
                    } else {
                        0.0
                    };
                    image[(ch * s + y) * s + x] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
    }

    let gts = placed
        .into_iter()
        .map(|(bbox, class_id)| GroundTruth { bbox, class_id })
        .collect();
    Scene {
        image,
        size: s,
        gts,
    }
}

pub fn scene_to_tensor(scene: &Scene) -> Tensor {
    Tensor::from_values(&[3, scene.size, scene.size], scene.image.clone())
        .expect("scene image shape")
}

/// Disjoint, reproducible train/val scene indices.
pub fn split_indices(n_train: usize, n_val: usize) -> (Vec<u64>, Vec<u64>) {
    let train = (0..n_train as u64).collect();
    let val = (n_train as u64..(n_train + n_val) as u64).collect();
    (train, val)
}

/// Four stride-2 convolutions producing feature levels at strides 8 and
/// 16; the miniature stand-in for a backbone and feature pyramid.
pub struct FeatureTrunk {
    convs: Vec<(Tensor, Tensor)>,
}

impl FeatureTrunk {
    pub fn new(channel_width: usize, params: &mut ParamSet, rng: &mut KeyedRng) -> Result<Self> {
        let c = channel_width;
        let mut convs = Vec::with_capacity(4);
        for (i, cin) in [3, c, c, c].into_iter().enumerate() {
            let he = (2.0 / (cin * 9) as f64).sqrt();
            let w: Vec<f64> = (0..c * cin * 9).map(|_| rng.normal() * he).collect();
            let weight = params.register(
                &format!("trunk.{i}.weight"),
                Tensor::from_values(&[c, cin, 3, 3], w)?,
            )?;
            let bias = params.register(&format!("trunk.{i}.bias"), Tensor::zeros(&[c]))?;
            convs.push((weight, bias));
        }
        Ok(Self { convs })
    }

    /// Image `[3 x s x s]` (s divisible by 16) to feature maps at
    /// strides 8 and 16.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] || !shape[1].is_multiple_of(16) {
            return Err(Error::ShapeMismatch {
                op: "feature_trunk",
                left: shape.to_vec(),
                right: vec![3, 0, 0],
            });
        }
        let mut x = image.clone();
        let mut outputs = Vec::with_capacity(2);
        for (i, (w, b)) in self.convs.iter().enumerate() {
            x = x.conv2d(w, b, 2, 1)?.relu();
            if i >= 2 {
                outputs.push(x.clone());
            }
        }
        Ok(outputs)
    }
}

/// Debug dump: header `S M n_objects seed index`, one `class x1 y1 x2 y2`
/// line per object, then the raw image floats.
pub fn write_scene_dump(scene: &Scene, cfg: &SceneConfig, index: u64) -> String {
    let mut out = format!(
        "{} {} {} {} {}\n",
        scene.size,
        cfg.class_count,
        scene.gts.len(),
        cfg.seed,
        index
    );
    for gt in &scene.gts {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            gt.class_id, gt.bbox.x1, gt.bbox.y1, gt.bbox.x2, gt.bbox.y2
        ));
    }
    for row in scene.image.chunks(scene.size) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parse a scene dump. Sizes are bounded so corrupt headers cannot ask
/// for absurd allocations.
pub fn parse_scene_dump(text: &str) -> Result<(Scene, u64, u64)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty dump".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header needs 5 fields, got {}", fields.len()),
        });
    }
    let p_usize = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("bad {what}: {s:?}"),
        })
    };
    let size = p_usize(fields[0], "image size")?;
    let class_count = p_usize(fields[1], "class count")?;
    let n_objects = p_usize(fields[2], "object count")?;
    let seed: u64 = fields[3].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: "bad seed".into(),
    })?;
    let index: u64 = fields[4].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: "bad index".into(),
    })?;
    if size == 0 || size > 1024 || class_count == 0 || class_count > 8 || n_objects > 4096 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("implausible header {size} {class_count} {n_objects}"),
        });
    }

    let mut gts = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let (ln, line) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: "truncated object list".into(),
        })?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("object line needs 5 fields, got {}", f.len()),
            });
        }
        let class_id: usize = f[0].parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: "bad class".into(),
        })?;
        if class_id >= class_count {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("class {class_id} out of range"),
            });
        }
        let mut coords = [0.0; 4];
        for (slot, s) in coords.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad coordinate {s:?}"),
            })?;
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| {
            Error::Parse {
                line: ln + 1,
                msg: e.to_string(),
            }
        })?;
        gts.push(GroundTruth { bbox, class_id });
    }
    if gts.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "scene must contain at least one object".into(),
        });
    }

    let mut image = Vec::with_capacity(3 * size * size);
    for (ln, line) in lines {
        for s in line.split_whitespace() {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad pixel {s:?}"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("pixel {v} outside [0, 1]"),
                });
            }
            image.push(v);
            if image.len() > 3 * size * size {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: "too many pixels".into(),
                });
            }
        }
    }
    if image.len() != 3 * size * size {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected {} pixels, got {}", 3 * size * size, image.len()),
        });
    }
    Ok((Scene { image, size, gts }, seed, index))
}
