//! Offline estimators that turn box annotations into dense training labels.

use crate::densecrf::{mean_field, CrfParams};
use crate::error::{Error, Result};
use crate::tensor::{BoxAnnotation, Image, LabelMap, Rect, ScoreMap, BACKGROUND};

/// Unary magnitude used to pin a pixel to one label.
pub const B_HARD: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BboxSegConfig {
    /// Fraction of each box, taken around its center, fixed to foreground.
    pub alpha: f64,
    pub crf: CrfParams,
    /// Unary given to background and to every covering class for in-box
    /// pixels outside the center region.
    pub neutral_unary: f64,
}

impl Default for BboxSegConfig {
    fn default() -> Self {
        BboxSegConfig {
            alpha: 0.2,
            crf: CrfParams::default(),
            neutral_unary: 0.0,
        }
    }
}

impl BboxSegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if !self.neutral_unary.is_finite() {
            return Err(Error::invalid("neutral_unary must be finite"));
        }
        self.crf.validate()
    }
}

/// For every pixel, the index of the box that claims it among those whose
/// `region` contains the pixel: smallest box area first, then list order.
fn claim_map(
    boxes: &BoxAnnotation,
    height: usize,
    width: usize,
    region: impl Fn(&Rect) -> Rect,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..boxes.boxes.len()).collect();
    order.sort_by_key(|&i| (boxes.boxes[i].rect.area(), i));
    let mut claims = vec![None; height * width];
    // paint the weakest claim first so the strongest is written last
    for &i in order.iter().rev() {
        let r = region(&boxes.boxes[i].rect);
        for y in r.y0..=r.y1 {
            for x in r.x0..=r.x1 {
                claims[y * width + x] = Some(i);
            }
        }
    }
    claims
}

/// Fills every box with its class. Pixels in several boxes take the class of
/// the smallest box (earliest in the list on equal areas); pixels in no box
/// are background.
pub fn bbox_rect(boxes: &BoxAnnotation, height: usize, width: usize) -> Result<LabelMap> {
    boxes.validate(height, width, crate::tensor::MAX_LABELS)?;
    let labels = claim_map(boxes, height, width, |r| *r)
        .into_iter()
        .map(|c| c.map_or(BACKGROUND, |i| boxes.boxes[i].class))
        .collect();
    LabelMap::new(height, width, labels)
}

fn scaled_side(side: usize, scale: f64) -> usize {
    let exact = side as f64 * scale;
    ((exact - exact * 1e-12).ceil() as usize).clamp(1, side)
}

/// Concentric sub-rectangle with each side scaled by `sqrt(alpha)` and
/// rounded up, so its area is at least `alpha` of the box wherever integer
/// sides allow.
pub fn center_region(rect: &Rect, alpha: f64) -> Rect {
    let scale = alpha.clamp(0.0, 1.0).sqrt();
    let (w, h) = (rect.width(), rect.height());
    let (cw, ch) = (scaled_side(w, scale), scaled_side(h, scale));
    let x0 = rect.x0 + (w - cw) / 2;
    let y0 = rect.y0 + (h - ch) / 2;
    Rect::new(x0, y0, x0 + cw - 1, y0 + ch - 1)
}

/// Per-pixel hard constraint implied by the boxes: `Some(label)` outside
/// every box (background) and inside center regions, `None` in between.
pub fn hard_constraints(
    boxes: &BoxAnnotation,
    height: usize,
    width: usize,
    alpha: f64,
) -> Vec<Option<u8>> {
    let centers = claim_map(boxes, height, width, |r| center_region(r, alpha));
    let mut out = vec![Some(BACKGROUND); height * width];
    for b in &boxes.boxes {
        for y in b.rect.y0..=b.rect.y1 {
            for x in b.rect.x0..=b.rect.x1 {
                out[y * width + x] = None;
            }
        }
    }
    for (o, c) in out.iter_mut().zip(centers) {
        if let Some(i) = c {
            *o = Some(boxes.boxes[i].class);
        }
    }
    out
}

/// Unary scores for box-driven foreground/background segmentation.
pub fn bbox_seg_unary(
    boxes: &BoxAnnotation,
    height: usize,
    width: usize,
    num_labels: usize,
    cfg: &BboxSegConfig,
) -> Result<ScoreMap> {
    boxes.validate(height, width, num_labels)?;
    let hard = hard_constraints(boxes, height, width, cfg.alpha);
    let mut unary = ScoreMap::new(
        height,
        width,
        num_labels,
        vec![-B_HARD; height * width * num_labels],
    )?;
    for (m, h) in hard.iter().enumerate() {
        if let Some(l) = h {
            unary.pixel_mut(m)[*l as usize] = B_HARD;
        } else {
            unary.pixel_mut(m)[BACKGROUND as usize] = cfg.neutral_unary;
        }
    }
    for b in &boxes.boxes {
        for y in b.rect.y0..=b.rect.y1 {
            for x in b.rect.x0..=b.rect.x1 {
                let m = y * width + x;
                if hard[m].is_none() {
                    unary.pixel_mut(m)[b.class as usize] = cfg.neutral_unary;
                }
            }
        }
    }
    Ok(unary)
}

/// Box-constrained CRF segmentation: outside all boxes is background, each
/// box's center region is its class, and the band in between is inferred by
/// mean field over the image.
pub fn bbox_seg(image: &Image, boxes: &BoxAnnotation, cfg: &BboxSegConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    let num_labels = boxes.boxes.iter().map(|b| b.class as usize + 1).max().unwrap_or(1);
    if boxes.is_empty() {
        return Ok(LabelMap::filled(h, w, BACKGROUND));
    }
    let unary = bbox_seg_unary(boxes, h, w, num_labels, cfg)?;
    let mut labels = mean_field(&unary, image, &cfg.crf)?.argmax();
    for (out, c) in labels
        .labels_mut()
        .iter_mut()
        .zip(hard_constraints(boxes, h, w, cfg.alpha))
    {
        if let Some(l) = c {
            *out = l;
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LabeledBox;

    fn lb(class: u8, x0: usize, y0: usize, x1: usize, y1: usize) -> LabeledBox {
        LabeledBox {
            class,
            rect: Rect::new(x0, y0, x1, y1),
        }
    }

    #[test]
    fn no_boxes_is_background() {
        let m = bbox_rect(&BoxAnnotation::default(), 4, 5).unwrap();
        assert_eq!(m.count(0), 20);
        let img = Image::filled(4, 5, 3, 0.2);
        let s = bbox_seg(&img, &BoxAnnotation::default(), &BboxSegConfig::default()).unwrap();
        assert_eq!(s.count(0), 20);
    }

    #[test]
    fn overlap_goes_to_smaller_box() {
        let boxes = BoxAnnotation::new(vec![lb(1, 0, 0, 3, 3), lb(2, 2, 2, 4, 4)]);
        let m = bbox_rect(&boxes, 6, 6).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let expected = if (2..=4).contains(&y) && (2..=4).contains(&x) {
                    2
                } else if y <= 3 && x <= 3 {
                    1
                } else {
                    0
                };
                assert_eq!(m.get(y, x), expected, "pixel ({y}, {x})");
            }
        }
        assert_eq!(m.count(2), 9);
        assert_eq!(m.count(1), 12);
    }

    #[test]
    fn equal_areas_go_to_earlier_box() {
        let boxes = BoxAnnotation::new(vec![lb(1, 1, 1, 2, 2), lb(2, 1, 1, 2, 2)]);
        let m = bbox_rect(&boxes, 4, 4).unwrap();
        assert_eq!(m.count(1), 4);
        assert_eq!(m.count(2), 0);
    }

    #[test]
    fn center_region_examples() {
        let r = Rect::new(0, 0, 9, 9);
        let c = center_region(&r, 0.2);
        assert_eq!((c.width(), c.height()), (5, 5));
        assert_eq!(c, Rect::new(2, 2, 6, 6));
        assert_eq!(center_region(&r, 1.0), r);
        let one = Rect::new(3, 4, 3, 4);
        assert_eq!(center_region(&one, 0.01), one);
    }

    #[test]
    fn center_region_covers_alpha() {
        for w in 1..20 {
            for h in 1..20 {
                let r = Rect::new(2, 3, 2 + w - 1, 3 + h - 1);
                for alpha in [0.05, 0.2, 0.25, 0.5, 0.8, 1.0] {
                    let c = center_region(&r, alpha);
                    assert!(c.area() as f64 >= alpha * r.area() as f64 - 1e-9);
                    assert!(c.x0 >= r.x0 && c.x1 <= r.x1 && c.y0 >= r.y0 && c.y1 <= r.y1);
                }
            }
        }
    }

    #[test]
    fn full_alpha_without_pairwise_equals_rect() {
        let boxes = BoxAnnotation::new(vec![lb(1, 0, 0, 4, 3), lb(2, 3, 2, 6, 6), lb(1, 5, 0, 7, 1)]);
        let img = Image::filled(8, 8, 3, 0.4);
        let cfg = BboxSegConfig {
            alpha: 1.0,
            crf: CrfParams::unary_only(),
            neutral_unary: 0.0,
        };
        assert_eq!(bbox_seg(&img, &boxes, &cfg).unwrap(), bbox_rect(&boxes, 8, 8).unwrap());
    }

    #[test]
    fn unary_layout() {
        let boxes = BoxAnnotation::new(vec![lb(2, 0, 0, 9, 9)]);
        let cfg = BboxSegConfig::default();
        let u = bbox_seg_unary(&boxes, 12, 12, 3, &cfg).unwrap();
        // outside
        assert_eq!(u.pixel(11 * 12 + 11), &[B_HARD, -B_HARD, -B_HARD]);
        // center
        assert_eq!(u.pixel(4 * 12 + 4), &[-B_HARD, -B_HARD, B_HARD]);
        // band
        assert_eq!(u.pixel(0), &[0.0, -B_HARD, 0.0]);
    }

    #[test]
    fn hard_constraints_hold_with_strong_pairwise() {
        let boxes = BoxAnnotation::new(vec![lb(1, 2, 2, 9, 9), lb(3, 6, 6, 11, 11)]);
        let img = Image::filled(14, 14, 3, 0.5);
        let cfg = BboxSegConfig {
            crf: CrfParams {
                w_spatial: 50.0,
                w_bilateral: 50.0,
                ..CrfParams::default()
            },
            ..BboxSegConfig::default()
        };
        let out = bbox_seg(&img, &boxes, &cfg).unwrap();
        for (l, c) in out.labels().iter().zip(hard_constraints(&boxes, 14, 14, cfg.alpha)) {
            if let Some(c) = c {
                assert_eq!(*l, c);
            }
            assert!([0, 1, 3].contains(l));
        }
    }
}
