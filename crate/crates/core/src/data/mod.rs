//! Datasets: synthetic generation with exact masks, weak annotations derived
//! from those masks, label-space remapping, and the on-disk format.

mod generate;
mod io;

pub use generate::{generate, GenConfig, GeneratedDataset, InstanceMap, ShapeKind};
pub use io::{read_dataset, read_pgm, read_ppm, write_dataset, write_pgm, write_ppm};

use crate::error::{Error, Result};
use crate::tensor::{Annotation, BoxAnnotation, LabelMap, LabeledBox, Rect, Sample, WeakLabels};

/// Samples sharing one label space (`num_labels` includes background).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_labels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Replaces every strong annotation by its image-level label set.
    pub fn to_image_level(&self) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let annotation = match &s.annotation {
                    Annotation::Strong(gt) => {
                        Annotation::ImageLevel(weak_labels_from_mask(gt, self.num_labels)?)
                    }
                    other => other.clone(),
                };
                Ok(Sample {
                    annotation,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            num_labels: self.num_labels,
            samples,
        })
    }

    /// Ground-truth maps of the strong samples, in order.
    pub fn ground_truth(&self) -> Vec<&LabelMap> {
        self.samples
            .iter()
            .filter_map(|s| match &s.annotation {
                Annotation::Strong(gt) => Some(gt),
                _ => None,
            })
            .collect()
    }
}

/// Presence set of a label map, background always included.
pub fn weak_labels_from_mask(gt: &LabelMap, num_labels: usize) -> Result<WeakLabels> {
    let mut seen = [false; crate::tensor::MAX_LABELS];
    for &l in gt.labels() {
        seen[l as usize] = true;
    }
    WeakLabels::from_labels(
        num_labels,
        (0..crate::tensor::MAX_LABELS)
            .filter(|&l| seen[l])
            .map(|l| l as u8),
    )
}

/// Tight boxes around the visible pixels of each instance; instances with no
/// visible pixel are dropped.
pub fn boxes_from_instances(instances: &InstanceMap) -> BoxAnnotation {
    let n = instances.classes.len();
    let mut rects: Vec<Option<Rect>> = vec![None; n];
    for (m, owner) in instances.owner.iter().enumerate() {
        let Some(i) = *owner else { continue };
        let (y, x) = (m / instances.width, m % instances.width);
        let r = rects[i as usize].get_or_insert(Rect::new(x, y, x, y));
        r.x0 = r.x0.min(x);
        r.x1 = r.x1.max(x);
        r.y0 = r.y0.min(y);
        r.y1 = r.y1.max(y);
    }
    BoxAnnotation::new(
        rects
            .into_iter()
            .zip(&instances.classes)
            .filter_map(|(r, &class)| r.map(|rect| LabeledBox { class, rect }))
            .collect(),
    )
}

/// Source label to target label (or dropped).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRemap {
    mapping: Vec<Option<u8>>,
    target_labels: usize,
}

impl LabelRemap {
    pub fn new(mapping: Vec<Option<u8>>, target_labels: usize) -> Result<Self> {
        if mapping.first() != Some(&Some(0)) {
            return Err(Error::config("label remap must send background to background"));
        }
        if target_labels == 0 || target_labels > crate::tensor::MAX_LABELS {
            return Err(Error::config(format!("target label count {target_labels} out of range")));
        }
        if let Some(bad) = mapping.iter().flatten().find(|&&t| t as usize >= target_labels) {
            return Err(Error::config(format!(
                "remap target {bad} outside {target_labels} labels"
            )));
        }
        Ok(LabelRemap {
            mapping,
            target_labels,
        })
    }

    pub fn identity(num_labels: usize) -> Self {
        LabelRemap {
            mapping: (0..num_labels).map(|l| Some(l as u8)).collect(),
            target_labels: num_labels,
        }
    }

    pub fn target_labels(&self) -> usize {
        self.target_labels
    }

    /// Target of `label`; `Ok(None)` means dropped.
    pub fn map(&self, label: u8) -> Result<Option<u8>> {
        self.mapping
            .get(label as usize)
            .copied()
            .ok_or_else(|| Error::data(format!("label {label} has no remap entry")))
    }
}

/// Rewrites every annotation into the target label space. Dropped classes
/// become background in masks, vanish from presence sets and lose their boxes.
pub fn remap(dataset: &Dataset, map: &LabelRemap) -> Result<Dataset> {
    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            let annotation = match &s.annotation {
                Annotation::Strong(gt) => {
                    let mut out = gt.clone();
                    for l in out.labels_mut() {
                        *l = map.map(*l)?.unwrap_or(0);
                    }
                    Annotation::Strong(out)
                }
                Annotation::ImageLevel(z) => {
                    let mut labels = Vec::new();
                    for l in z.iter() {
                        if let Some(t) = map.map(l)? {
                            labels.push(t);
                        }
                    }
                    Annotation::ImageLevel(WeakLabels::from_labels(map.target_labels, labels)?)
                }
                Annotation::Boxes(b) => {
                    let mut boxes = Vec::new();
                    for lb in &b.boxes {
                        if let Some(class) = map.map(lb.class)? {
                            if class != 0 {
                                boxes.push(LabeledBox { class, ..*lb });
                            }
                        }
                    }
                    Annotation::Boxes(BoxAnnotation::new(boxes))
                }
            };
            Ok(Sample {
                annotation,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        num_labels: map.target_labels,
        samples,
    })
}

/// Concatenates datasets that already share a label space, prefixing ids with
/// the source index so they stay unique.
pub fn union(datasets: &[Dataset]) -> Result<Dataset> {
    let num_labels = datasets
        .first()
        .map(|d| d.num_labels)
        .ok_or_else(|| Error::data("union of no datasets"))?;
    let mut samples = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        if d.num_labels != num_labels {
            return Err(Error::data("union of datasets with different label spaces"));
        }
        samples.extend(d.samples.iter().map(|s| Sample {
            id: format!("d{i}-{}", s.id),
            ..s.clone()
        }));
    }
    Ok(Dataset {
        num_labels,
        samples,
    })
}
