//! Weakly- and semi-supervised semantic segmentation with hard-EM label
//! estimation.
//!
//! A small convolutional per-pixel classifier is trained from strong masks,
//! image-level label sets or bounding boxes. Weak annotations are turned into
//! per-pixel training targets by E-steps ([`estep`]) or box-driven
//! pre-processing ([`bboxlabels`]), and predictions can be refined with a
//! fully-connected CRF ([`densecrf`]).

pub mod bboxlabels;
pub mod cli;
pub mod config;
pub mod data;
pub mod densecrf;
pub mod error;
pub mod estep;
pub mod eval;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{
    argmax_labels, pixel_distribution, Annotation, AnnotationKind, BoxAnnotation, Image, LabelMap,
    LabeledBox, ProbMap, Rect, Sample, ScoreMap, WeakLabels,
};
