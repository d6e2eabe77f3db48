use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{boxes_from_instances, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{Annotation, Image, LabelMap, Sample};

const PLACEMENT_RETRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Rect,
    Disc,
    Triangle,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(ShapeKind::Rect),
            "disc" => Ok(ShapeKind::Disc),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(Error::config(format!("unknown shape kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeKind::Rect => "rect",
            ShapeKind::Disc => "disc",
            ShapeKind::Triangle => "triangle",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_fg_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Shape extent range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Per-pixel uniform noise amplitude on every channel.
    pub noise: f64,
    /// Minimum color distance between any object pixel and the mean
    /// background color of its image.
    pub contrast: f64,
    /// Per-image multiplicative jitter of the class colors.
    pub illumination: f64,
    /// Per-instance hue offset, as a fraction of half the hue spacing
    /// between neighbouring classes (1 lets neighbouring ranges touch).
    pub hue_jitter: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_images: 100,
            height: 48,
            width: 48,
            num_fg_classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            shape_kinds: vec![ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Triangle],
            min_size: 12,
            max_size: 24,
            noise: 0.1,
            contrast: 0.15,
            illumination: 0.2,
            hue_jitter: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("image size must be non-zero"));
        }
        if self.num_fg_classes == 0 || self.num_fg_classes + 1 > crate::tensor::MAX_LABELS {
            return Err(Error::config(format!(
                "num_fg_classes = {} out of range",
                self.num_fg_classes
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if self.max_shapes > 0 {
            if self.shape_kinds.is_empty() {
                return Err(Error::config("no shape kinds configured"));
            }
            if self.min_size == 0 || self.min_size > self.max_size {
                return Err(Error::config("shape size range is empty"));
            }
        }
        for (name, v) in [
            ("noise", self.noise),
            ("contrast", self.contrast),
            ("illumination", self.illumination),
            ("hue_jitter", self.hue_jitter),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.num_fg_classes + 1
    }
}

/// Which instance owns each visible pixel, and the class of each instance in
/// painting order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    pub width: usize,
    pub classes: Vec<u8>,
    pub owner: Vec<Option<u16>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub instances: Vec<InstanceMap>,
}

impl GeneratedDataset {
    /// Same images annotated with tight boxes of the visible instances.
    pub fn to_boxes(&self) -> Dataset {
        let samples = self
            .dataset
            .samples
            .iter()
            .zip(&self.instances)
            .map(|(s, inst)| Sample {
                annotation: Annotation::Boxes(boxes_from_instances(inst)),
                ..s.clone()
            })
            .collect();
        Dataset {
            num_labels: self.dataset.num_labels,
            samples,
        }
    }
}

/// Color at hue `turns` (fraction of the circle) with fixed saturation and
/// value. Class `c` of `n` sits at `(c - 1) / n`.
fn hue_color(turns: f64) -> [f64; 3] {
    let h = turns.rem_euclid(1.0) * 6.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn shape_mask(kind: ShapeKind, w: usize, h: usize, flip: bool) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let inside = match kind {
                ShapeKind::Rect => true,
                ShapeKind::Disc => {
                    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
                    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
                    let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                    dx * dx + dy * dy <= 1.0
                }
                ShapeKind::Triangle => {
                    // apex at the top (or bottom when flipped), base on the opposite side
                    let row = if flip { h - 1 - y } else { y };
                    let frac = (row as f64 + 0.5) / h as f64;
                    let half = frac * w as f64 / 2.0;
                    let cx = w as f64 / 2.0;
                    (x as f64 + 0.5 - cx).abs() <= half
                }
            };
            mask[y * w + x] = inside;
        }
    }
    mask
}

struct Rendered {
    image: Image,
    labels: LabelMap,
    instances: InstanceMap,
}

fn render(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Rendered> {
    let (h, w) = (cfg.height, cfg.width);
    let n_shapes = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut classes = Vec::with_capacity(n_shapes);
    let mut owner: Vec<Option<u16>> = vec![None; h * w];
    for i in 0..n_shapes {
        let kind = *cfg.shape_kinds.choose(rng).expect("validated non-empty");
        let sw = rng.gen_range(cfg.min_size..=cfg.max_size);
        let sh = match kind {
            ShapeKind::Rect => rng.gen_range(cfg.min_size..=cfg.max_size),
            _ => sw,
        };
        if sw > w || sh > h {
            return Err(Error::Generation(format!(
                "shape {sw}x{sh} does not fit a {h}x{w} image"
            )));
        }
        let flip = rng.gen_bool(0.5);
        let x0 = rng.gen_range(0..=w - sw);
        let y0 = rng.gen_range(0..=h - sh);
        let class = rng.gen_range(1..=cfg.num_fg_classes) as u8;
        let mask = shape_mask(kind, sw, sh, flip);
        for y in 0..sh {
            for x in 0..sw {
                if mask[y * sw + x] {
                    owner[(y0 + y) * w + x0 + x] = Some(i as u16);
                }
            }
        }
        classes.push(class);
    }

    let gain = 1.0 + rng.gen_range(-cfg.illumination..=cfg.illumination);
    let spacing = 1.0 / cfg.num_fg_classes as f64;
    let colors: Vec<[f64; 3]> = classes
        .iter()
        .map(|&c| {
            let mut turns = (c as usize - 1) as f64 * spacing;
            if cfg.hue_jitter > 0.0 {
                turns += rng.gen_range(-cfg.hue_jitter..=cfg.hue_jitter) * spacing / 2.0;
            }
            hue_color(turns).map(|v| (v * gain).clamp(0.0, 1.0))
        })
        .collect();

    // background base color, far enough from the colors actually drawn
    let margin = cfg.contrast + cfg.noise * 3f64.sqrt() + 4.0 / 255.0;
    let mut base = None;
    for _ in 0..PLACEMENT_RETRIES {
        let g = rng.gen_range(0.15..0.85);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
        let cand = [g + tint[0], g + tint[1], g + tint[2]].map(|v: f64| v.clamp(0.1, 0.9));
        if colors.iter().all(|c| distance(&cand, c) >= margin) {
            base = Some(cand);
            break;
        }
    }
    let base = base.ok_or_else(|| {
        Error::Generation("no background color satisfies the contrast constraint".into())
    })?;

    let mut data = vec![0.0; h * w * 3];
    let mut labels = vec![0u8; h * w];
    for m in 0..h * w {
        let (color, label) = match owner[m] {
            Some(i) => (colors[i as usize], classes[i as usize]),
            None => (base, 0),
        };
        for ch in 0..3 {
            let u = if cfg.noise > 0.0 {
                rng.gen_range(-cfg.noise..=cfg.noise)
            } else {
                0.0
            };
            data[m * 3 + ch] = quantize(color[ch] + u);
        }
        labels[m] = label;
    }

    let image = Image::new(h, w, 3, data)?;
    let labels = LabelMap::new(h, w, labels)?;
    check_contrast(&image, &labels, cfg.contrast)?;
    Ok(Rendered {
        image,
        labels,
        instances: InstanceMap {
            width: w,
            classes,
            owner,
        },
    })
}

/// Mean color of the background pixels, if any.
pub(crate) fn background_mean(image: &Image, labels: &LabelMap) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (m, &l) in labels.labels().iter().enumerate() {
        if l == 0 {
            for (s, v) in sum.iter_mut().zip(image.pixel(m)) {
                *s += v;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

fn check_contrast(image: &Image, labels: &LabelMap, contrast: f64) -> Result<()> {
    let Some(mean) = background_mean(image, labels) else {
        return Ok(());
    };
    for (m, &l) in labels.labels().iter().enumerate() {
        if l != 0 && distance(image.pixel(m), &mean) < contrast {
            return Err(Error::Generation(format!(
                "object pixel {m} within {contrast} of the background mean"
            )));
        }
    }
    Ok(())
}

/// Generates `cfg.num_images` strongly annotated samples. Image `i` draws
/// from its own random stream derived from `(seed, i)`.
pub fn generate(cfg: &GenConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.num_images);
    let mut instances = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let mut last_err = None;
        let mut rendered = None;
        for _ in 0..PLACEMENT_RETRIES {
            match render(cfg, &mut rng) {
                Ok(r) => {
                    rendered = Some(r);
                    break;
                }
                Err(e @ Error::Generation(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        let r = rendered.ok_or_else(|| {
            last_err.unwrap_or_else(|| Error::Generation(format!("image {i} failed")))
        })?;
        samples.push(Sample::new(
            format!("img{i:05}"),
            r.image,
            Annotation::Strong(r.labels),
        )?);
        instances.push(r.instances);
    }
    Ok(GeneratedDataset {
        dataset: Dataset {
            num_labels: cfg.num_labels(),
            samples,
        },
        instances,
    })
}
