//! Shared value types: images, per-pixel score and probability maps, label
//! maps and the weak annotation variants.
//!
//! Every map stores pixels in row-major order, and score/probability maps keep
//! one pixel's label vector contiguous (`data[m * num_labels + l]`).

use crate::error::{Error, Result};

/// Largest label count representable by an 8-bit label map.
pub const MAX_LABELS: usize = 256;

/// Background label index.
pub const BACKGROUND: u8 = 0;

/// An `H x W x C` image with channels interleaved per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, m: usize) -> &[f64] {
        &self.data[m * self.channels..(m + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.data[m * self.channels..(m + 1) * self.channels]
    }
}

macro_rules! label_vector_map {
    ($name:ident) => {
        impl $name {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn num_labels(&self) -> usize {
                self.num_labels
            }

            pub fn num_pixels(&self) -> usize {
                self.height * self.width
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            /// The label vector of pixel `m`.
            pub fn pixel(&self, m: usize) -> &[f64] {
                &self.data[m * self.num_labels..(m + 1) * self.num_labels]
            }

            pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
                self.data.chunks_exact(self.num_labels)
            }
        }
    };
}

/// Per-pixel, per-label real scores produced by the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    num_labels: usize,
    data: Vec<f64>,
}

label_vector_map!(ScoreMap);

impl ScoreMap {
    pub fn new(height: usize, width: usize, num_labels: usize, data: Vec<f64>) -> Result<Self> {
        check_map_shape(height, width, num_labels, data.len())?;
        Ok(ScoreMap {
            height,
            width,
            num_labels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, num_labels: usize) -> Self {
        ScoreMap {
            height,
            width,
            num_labels,
            data: vec![0.0; height * width * num_labels],
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.data[m * self.num_labels..(m + 1) * self.num_labels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel categorical distributions over labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_labels: usize,
    data: Vec<f64>,
}

label_vector_map!(ProbMap);

impl ProbMap {
    /// Wraps already-normalized distributions. Validation is the caller's job;
    /// [`ProbMap::max_normalization_error`] reports the worst pixel.
    pub(crate) fn from_raw(height: usize, width: usize, num_labels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * num_labels);
        ProbMap {
            height,
            width,
            num_labels,
            data,
        }
    }

    /// Largest `|sum_l Q_m(l) - 1|` over all pixels.
    pub fn max_normalization_error(&self) -> f64 {
        self.pixels()
            .map(|p| (p.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per-pixel argmax, lowest label on ties.
    pub fn argmax(&self) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            labels: self.pixels().map(argmax_lowest).collect(),
        }
    }
}

fn check_map_shape(height: usize, width: usize, num_labels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("map dimensions must be non-zero"));
    }
    if num_labels == 0 || num_labels > MAX_LABELS {
        return Err(Error::invalid(format!(
            "label count {num_labels} outside 1..={MAX_LABELS}"
        )));
    }
    if len != height * width * num_labels {
        return Err(Error::invalid(format!(
            "map data length {len} does not match {height}x{width}x{num_labels}"
        )));
    }
    Ok(())
}

/// Per-pixel hard labels, used for both ground truth and E-step estimates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("label map dimensions must be non-zero"));
        }
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "label map length {} does not match {height}x{width}",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Largest label value in the map.
    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(BACKGROUND)
    }

    /// Number of pixels carrying `label`.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn check_labels(&self, num_labels: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_labels) {
            Some(l) => Err(Error::invalid(format!(
                "label {l} out of range for {num_labels} labels"
            ))),
            None => Ok(()),
        }
    }
}

/// Image-level presence set `z` over labels. Background is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WeakLabels {
    num_labels: usize,
    bits: [u64; 4],
}

impl WeakLabels {
    /// Presence set with only the background bit set.
    pub fn background_only(num_labels: usize) -> Result<Self> {
        if num_labels == 0 || num_labels > MAX_LABELS {
            return Err(Error::invalid(format!(
                "label count {num_labels} outside 1..={MAX_LABELS}"
            )));
        }
        let mut z = WeakLabels {
            num_labels,
            bits: [0; 4],
        };
        z.bits[0] = 1;
        Ok(z)
    }

    /// Presence set from a list of labels; background is added implicitly.
    pub fn from_labels(num_labels: usize, labels: impl IntoIterator<Item = u8>) -> Result<Self> {
        let mut z = Self::background_only(num_labels)?;
        for l in labels {
            z.insert(l)?;
        }
        Ok(z)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn insert(&mut self, label: u8) -> Result<()> {
        if label as usize >= self.num_labels {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} labels",
                self.num_labels
            )));
        }
        self.bits[label as usize / 64] |= 1 << (label % 64);
        Ok(())
    }

    /// Clears a foreground label. Background cannot be removed.
    pub fn remove(&mut self, label: u8) {
        if label != BACKGROUND && (label as usize) < self.num_labels {
            self.bits[label as usize / 64] &= !(1 << (label % 64));
        }
    }

    pub fn contains(&self, label: usize) -> bool {
        label < self.num_labels && self.bits[label / 64] & (1 << (label % 64)) != 0
    }

    /// Present labels in increasing order, background first.
    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..self.num_labels)
            .filter(|&l| self.contains(l))
            .map(|l| l as u8)
    }

    /// Present foreground labels in increasing order.
    pub fn foreground(&self) -> impl Iterator<Item = u8> + '_ {
        self.iter().filter(|&l| l != BACKGROUND)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Same presence bits over a different label count.
    pub fn with_num_labels(&self, num_labels: usize) -> Result<Self> {
        Self::from_labels(num_labels, self.iter())
    }
}

/// Inclusive pixel rectangle `(x0, y0)-(x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 + 1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 + 1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    pub fn is_valid_in(&self, height: usize, width: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 < width && self.y1 < height
    }
}

/// One annotated object instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabeledBox {
    pub class: u8,
    pub rect: Rect,
}

/// Ordered list of `(class, rect)` instances for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BoxAnnotation {
    pub boxes: Vec<LabeledBox>,
}

impl BoxAnnotation {
    pub fn new(boxes: Vec<LabeledBox>) -> Self {
        BoxAnnotation { boxes }
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, height: usize, width: usize, num_labels: usize) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            if b.class == BACKGROUND {
                return Err(Error::invalid(format!("box {i} annotates background")));
            }
            if b.class as usize >= num_labels {
                return Err(Error::invalid(format!(
                    "box {i} class {} out of range for {num_labels} labels",
                    b.class
                )));
            }
            if !b.rect.is_valid_in(height, width) {
                return Err(Error::invalid(format!(
                    "box {i} {:?} outside {height}x{width} image",
                    b.rect
                )));
            }
        }
        Ok(())
    }

    /// Presence set implied by the boxes.
    pub fn weak_labels(&self, num_labels: usize) -> Result<WeakLabels> {
        WeakLabels::from_labels(num_labels, self.boxes.iter().map(|b| b.class))
    }
}

/// The one annotation a training sample carries.
#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Strong(LabelMap),
    ImageLevel(WeakLabels),
    Boxes(BoxAnnotation),
}

impl Annotation {
    pub fn kind(&self) -> AnnotationKind {
        match self {
            Annotation::Strong(_) => AnnotationKind::Strong,
            Annotation::ImageLevel(_) => AnnotationKind::ImageLevel,
            Annotation::Boxes(_) => AnnotationKind::Boxes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnnotationKind {
    Strong,
    ImageLevel,
    Boxes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub annotation: Annotation,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, annotation: Annotation) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        match &annotation {
            Annotation::Strong(map) if map.height() != h || map.width() != w => {
                return Err(Error::invalid(format!(
                    "label map {}x{} does not match image {h}x{w}",
                    map.height(),
                    map.width()
                )));
            }
            Annotation::Boxes(boxes) => boxes.validate(h, w, MAX_LABELS)?,
            _ => {}
        }
        Ok(Sample {
            id: id.into(),
            image,
            annotation,
        })
    }

    pub fn is_strong(&self) -> bool {
        matches!(self.annotation, Annotation::Strong(_))
    }
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax_lowest(values: &[f64]) -> u8 {
    let mut best = 0;
    for (l, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = l;
        }
    }
    best as u8
}

/// Per-pixel softmax `P(y_m = l) ∝ exp(f_m(l))`, stabilized by subtracting
/// each pixel's maximum score.
pub fn pixel_distribution(scores: &ScoreMap) -> Result<ProbMap> {
    if !scores.is_finite() {
        return Err(Error::invalid("score map contains non-finite values"));
    }
    let mut data = scores.data.clone();
    for px in data.chunks_exact_mut(scores.num_labels) {
        softmax_in_place(px);
    }
    Ok(ProbMap::from_raw(
        scores.height,
        scores.width,
        scores.num_labels,
        data,
    ))
}

/// Softmax of one label vector in place. Entries may be `-inf` as long as at
/// least one is finite.
pub(crate) fn softmax_in_place(px: &mut [f64]) {
    let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in px.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in px.iter_mut() {
        *v /= sum;
    }
}

/// Per-pixel argmax of the scores; lowest label wins ties.
pub fn argmax_labels(scores: &ScoreMap) -> LabelMap {
    LabelMap {
        height: scores.height,
        width: scores.width,
        labels: scores.pixels().map(argmax_lowest).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_pixel(scores: &[f64]) -> ScoreMap {
        ScoreMap::new(1, 1, scores.len(), scores.to_vec()).unwrap()
    }

    #[test]
    fn uniform_scores_give_uniform_distribution() {
        let p = pixel_distribution(&one_pixel(&[0.0, 0.0, 0.0])).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let p = pixel_distribution(&one_pixel(&[1000.0, 1000.0, 999.0])).unwrap();
        // by hand: exp(0), exp(0), exp(-1) normalized by 2 + e^-1
        let denom = 2.0 + (-1.0f64).exp();
        let expected = [1.0 / denom, 1.0 / denom, (-1.0f64).exp() / denom];
        for (v, e) in p.data().iter().zip(expected) {
            assert!(v.is_finite());
            assert!((v - e).abs() < 1e-12);
        }
        assert!((p.data()[0] - 0.4223).abs() < 1e-4);
        assert!((p.data()[2] - 0.1554).abs() < 1e-4);
    }

    #[test]
    fn ln3_splits_one_to_three() {
        let p = pixel_distribution(&one_pixel(&[0.0, 3.0f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let s = one_pixel(&[0.0, f64::NAN]);
        assert!(matches!(pixel_distribution(&s), Err(Error::InvalidInput(_))));
        let s = one_pixel(&[f64::INFINITY, 0.0]);
        assert!(pixel_distribution(&s).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_label() {
        assert_eq!(argmax_labels(&one_pixel(&[2.0, 5.0, 5.0])).labels(), &[1]);
        assert_eq!(argmax_labels(&one_pixel(&[7.0, 1.0, 1.0])).labels(), &[0]);
    }

    #[test]
    fn argmax_matches_brute_force_scan() {
        let data = vec![
            0.1, 0.9, 0.3, //
            2.0, -1.0, 0.0, //
            -3.0, -2.0, -1.0, //
            0.5, 0.7, 0.6,
        ];
        let s = ScoreMap::new(2, 2, 3, data.clone()).unwrap();
        let expected: Vec<u8> = data
            .chunks(3)
            .map(|px| {
                let mut best = 0;
                for l in 0..3 {
                    if px[l] > px[best] {
                        best = l;
                    }
                }
                best as u8
            })
            .collect();
        assert_eq!(expected, vec![1, 0, 2, 1]);
        assert_eq!(argmax_labels(&s).labels(), expected.as_slice());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(ScoreMap::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(LabelMap::new(2, 3, vec![0; 5]).is_err());
    }

    #[test]
    fn weak_labels_always_hold_background() {
        let mut z = WeakLabels::from_labels(4, [1, 3]).unwrap();
        assert_eq!(z.iter().collect::<Vec<_>>(), vec![0, 1, 3]);
        z.remove(0);
        assert!(z.contains(0));
        z.remove(3);
        assert_eq!(z.foreground().collect::<Vec<_>>(), vec![1]);
        assert!(z.insert(4).is_err());
    }

    #[test]
    fn wide_weak_label_sets() {
        let z = WeakLabels::from_labels(256, [63, 64, 200, 255]).unwrap();
        assert_eq!(z.iter().collect::<Vec<_>>(), vec![0, 63, 64, 200, 255]);
        assert_eq!(z.count(), 5);
    }

    #[test]
    fn box_validation() {
        let ok = BoxAnnotation::new(vec![LabeledBox {
            class: 1,
            rect: Rect::new(0, 0, 3, 3),
        }]);
        assert!(ok.validate(4, 4, 2).is_ok());
        assert!(ok.validate(3, 4, 2).is_err());
        let bg = BoxAnnotation::new(vec![LabeledBox {
            class: 0,
            rect: Rect::new(0, 0, 1, 1),
        }]);
        assert!(bg.validate(4, 4, 2).is_err());
    }

    fn score_vector(labels: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, labels)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rows_sum_to_one(
            rows in (1usize..12).prop_flat_map(|l| prop::collection::vec(score_vector(l), 1..6))
        ) {
            let labels = rows[0].len();
            let s = ScoreMap::new(1, rows.len(), labels, rows.concat()).unwrap();
            let p = pixel_distribution(&s).unwrap();
            prop_assert!(p.max_normalization_error() <= 1e-9);
            prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn softmax_is_shift_invariant(row in score_vector(5), c in -100.0f64..100.0) {
            let a = pixel_distribution(&one_pixel(&row)).unwrap();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let b = pixel_distribution(&one_pixel(&shifted)).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn argmax_is_shift_invariant(row in prop::collection::vec(-8i32..8, 4), c in -6i32..6) {
            // integer-valued scores keep ties exact under the shift
            let row: Vec<f64> = row.into_iter().map(f64::from).collect();
            let shifted: Vec<f64> = row.iter().map(|v| v + f64::from(c)).collect();
            prop_assert_eq!(
                argmax_labels(&one_pixel(&row)),
                argmax_labels(&one_pixel(&shifted))
            );
        }
    }
}
