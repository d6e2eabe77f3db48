//! Hard-EM training: mini-batches mixing strong and weak samples, a per-visit
//! E-step for every weak sample, and momentum SGD on the estimated targets.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bboxlabels::{bbox_rect, bbox_seg, BboxSegConfig};
use crate::data::Dataset;
use crate::densecrf::{crf_refine, CrfParams};
use crate::error::{Error, Result};
use crate::estep::{self, AdaptParams};
use crate::eval::{ConfusionMatrix, IouReport};
use crate::net::{sgd_step, NetConfig, NetParams, SgdConfig};
use crate::tensor::{argmax_labels, Annotation, LabelMap, Sample, ScoreMap};

/// E-step used for image-level samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeakMode {
    EmFixed,
    EmAdapt,
}

/// How box samples are turned into targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxMode {
    /// Filled rectangles, computed once before training.
    Rect,
    /// CRF segmentation inside the boxes, computed once before training.
    Seg,
    /// Box-gated fixed-bias E-step, recomputed at every visit.
    EmFixed,
}

impl std::str::FromStr for WeakMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em-fixed" => Ok(WeakMode::EmFixed),
            "em-adapt" => Ok(WeakMode::EmAdapt),
            other => Err(Error::config(format!("unknown weak mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for WeakMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeakMode::EmFixed => "em-fixed",
            WeakMode::EmAdapt => "em-adapt",
        })
    }
}

impl std::str::FromStr for BoxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbox-rect" => Ok(BoxMode::Rect),
            "bbox-seg" => Ok(BoxMode::Seg),
            "bbox-em-fixed" => Ok(BoxMode::EmFixed),
            other => Err(Error::config(format!("unknown box mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for BoxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoxMode::Rect => "bbox-rect",
            BoxMode::Seg => "bbox-seg",
            BoxMode::EmFixed => "bbox-em-fixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Strong samples drawn into every batch; 0 draws from one mixed pool.
    pub strong_per_batch: usize,
    pub steps: usize,
    pub weak_mode: WeakMode,
    pub box_mode: BoxMode,
    pub b_fg: f64,
    pub b_bg: f64,
    pub rho_fg: f64,
    pub rho_bg: f64,
    pub bbox_seg: BboxSegConfig,
    pub net: NetConfig,
    pub sgd: SgdConfig,
    /// Validation mIOU every this many steps (and after the last); 0 disables.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(net: NetConfig) -> Self {
        TrainConfig {
            batch_size: 20,
            strong_per_batch: 0,
            steps: 1000,
            weak_mode: WeakMode::EmAdapt,
            box_mode: BoxMode::Seg,
            b_fg: estep::DEFAULT_B_FG,
            b_bg: estep::DEFAULT_B_BG,
            rho_fg: estep::DEFAULT_RHO_FG,
            rho_bg: estep::DEFAULT_RHO_BG,
            bbox_seg: BboxSegConfig::default(),
            net,
            sgd: SgdConfig::default(),
            eval_every: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.strong_per_batch > self.batch_size {
            return Err(Error::config(format!(
                "strong_per_batch {} exceeds batch_size {}",
                self.strong_per_batch, self.batch_size
            )));
        }
        AdaptParams::new(self.rho_fg, self.rho_bg, 0).map_err(|e| Error::config(e.to_string()))?;
        self.bbox_seg
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.net.validate()?;
        self.sgd.validate()
    }

    fn adapt(&self, seed: u64) -> AdaptParams {
        AdaptParams {
            rho_fg: self.rho_fg,
            rho_bg: self.rho_bg,
            seed,
        }
    }
}

/// A sample plus its pre-computed target for the offline box modes.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: Sample,
    pub offline_target: Option<LabelMap>,
}

/// Computes offline targets (Bbox-Rect / Bbox-Seg) once, before training.
pub fn prepare(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<PreparedSample>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let offline_target = match (&s.annotation, cfg.box_mode) {
                (Annotation::Boxes(b), BoxMode::Rect) => {
                    Some(bbox_rect(b, s.image.height(), s.image.width())?)
                }
                (Annotation::Boxes(b), BoxMode::Seg) => Some(bbox_seg(&s.image, b, &cfg.bbox_seg)?),
                _ => None,
            };
            Ok(PreparedSample {
                sample: s.clone(),
                offline_target,
            })
        })
        .collect()
}

/// Training target for one sample given the current scores. Returns the
/// label map and an optional per-pixel ignore mask.
pub fn estep_dispatch(
    scores: &ScoreMap,
    sample: &PreparedSample,
    cfg: &TrainConfig,
    adapt_seed: u64,
) -> Result<(LabelMap, Option<Vec<bool>>)> {
    let target = match (&sample.sample.annotation, cfg.box_mode) {
        (Annotation::Strong(gt), _) => gt.clone(),
        (Annotation::ImageLevel(z), _) => match cfg.weak_mode {
            WeakMode::EmFixed => estep::em_fixed_estep(scores, z, cfg.b_fg, cfg.b_bg)?,
            WeakMode::EmAdapt => estep::em_adapt_estep(scores, z, &cfg.adapt(adapt_seed))?,
        },
        (Annotation::Boxes(b), BoxMode::EmFixed) => {
            estep::bbox_em_fixed_estep(scores, b, cfg.b_fg, cfg.b_bg)?
        }
        (Annotation::Boxes(_), mode) => sample.offline_target.clone().ok_or_else(|| {
            Error::config(format!(
                "sample {} has no pre-computed {mode} target",
                sample.sample.id
            ))
        })?,
    };
    Ok((target, None))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// 1-based step index.
    pub step: usize,
    pub loss: f64,
    pub miou: Option<f64>,
    pub lr: f64,
}

/// One E-step target produced during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetTrace {
    pub step: usize,
    pub sample_index: usize,
    pub target: LabelMap,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<&'a Dataset>,
    /// Keep every target the E-step produced (memory heavy; for inspection).
    pub trace_targets: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: NetParams,
    pub log: Vec<LogRecord>,
    /// Sample ids of every batch, in draw order.
    pub batches: Vec<Vec<String>>,
    pub traces: Vec<TargetTrace>,
}

impl TrainOutput {
    /// `step,loss,miou,lr` with an empty miou field where none was computed.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,loss,miou,lr\n");
        for r in &self.log {
            let miou = r.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
            writeln!(s, "{},{:.9},{},{}", r.step, r.loss, miou, r.lr).unwrap();
        }
        s
    }
}

/// Endless reshuffled index stream over one pool.
struct Pool {
    indices: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn new(indices: Vec<usize>) -> Self {
        let cursor = indices.len();
        Pool { indices, cursor }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.indices.len() {
            self.indices.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.indices[self.cursor - 1]
    }
}

struct SampleResult {
    loss: f64,
    grad: Vec<f64>,
    target: Option<LabelMap>,
}

pub fn run_training(dataset: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if dataset.num_labels != cfg.net.num_labels {
        return Err(Error::config(format!(
            "dataset has {} labels, network has {}",
            dataset.num_labels, cfg.net.num_labels
        )));
    }
    let prepared = prepare(dataset, cfg)?;

    let (strong, weak): (Vec<usize>, Vec<usize>) =
        (0..prepared.len()).partition(|&i| prepared[i].sample.is_strong());
    let (mut strong_pool, mut other_pool) = if cfg.strong_per_batch == 0 {
        (None, Pool::new((0..prepared.len()).collect()))
    } else {
        if strong.is_empty() {
            return Err(Error::config("strong_per_batch > 0 but the dataset has no strong samples"));
        }
        if weak.is_empty() && cfg.strong_per_batch < cfg.batch_size {
            return Err(Error::config(
                "batches need weak samples but the dataset has none",
            ));
        }
        (Some(Pool::new(strong)), Pool::new(weak))
    };

    let mut params = NetParams::init(&cfg.net)?;
    let mut velocity = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut batches = Vec::with_capacity(cfg.steps);
    let mut traces = Vec::new();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let idx = match strong_pool.as_mut() {
                Some(pool) if slot < cfg.strong_per_batch => pool.draw(&mut rng),
                _ => other_pool.draw(&mut rng),
            };
            batch.push((idx, rng.gen::<u64>()));
        }

        let results: Vec<SampleResult> = batch
            .par_iter()
            .map(|&(idx, adapt_seed)| {
                let ps = &prepared[idx];
                let acts = params.forward_cached(&ps.sample.image)?;
                let (target, ignore) = estep_dispatch(&acts.scores(), ps, cfg, adapt_seed)?;
                let (loss, grad) = params.backward(&acts, &target, ignore.as_deref())?;
                Ok(SampleResult {
                    loss,
                    grad,
                    target: opts.trace_targets.then_some(target),
                })
            })
            .collect::<Result<_>>()?;

        let inv = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (r, &(idx, _)) in results.into_iter().zip(&batch) {
            loss += r.loss * inv;
            for (g, v) in grad.iter_mut().zip(&r.grad) {
                *g += v * inv;
            }
            if let Some(target) = r.target {
                traces.push(TargetTrace {
                    step: step + 1,
                    sample_index: idx,
                    target,
                });
            }
        }
        if !loss.is_finite() {
            return Err(Error::data(format!("training diverged at step {}", step + 1)));
        }

        let lr = cfg.sgd.lr_at(step);
        sgd_step(&mut params, &mut velocity, &grad, &cfg.sgd, step)?;

        let is_eval_step =
            cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        let miou = match opts.validation {
            Some(val) if is_eval_step => Some(evaluate_model(&params, val, None)?.mean),
            _ => None,
        };
        log.push(LogRecord {
            step: step + 1,
            loss,
            miou,
            lr,
        });
        batches.push(
            batch
                .iter()
                .map(|&(i, _)| prepared[i].sample.id.clone())
                .collect(),
        );
    }

    Ok(TrainOutput {
        params,
        log,
        batches,
        traces,
    })
}

/// Predicted label maps: raw argmax, or CRF-refined when `crf` is given.
pub fn predict(params: &NetParams, dataset: &Dataset, crf: Option<&CrfParams>) -> Result<Vec<LabelMap>> {
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let scores = params.forward(&s.image)?;
            match crf {
                Some(p) => crf_refine(&scores, &s.image, p),
                None => Ok(argmax_labels(&scores)),
            }
        })
        .collect()
}

/// Dataset-level mean IOU of the model on the strong samples of `dataset`.
pub fn evaluate_model(params: &NetParams, dataset: &Dataset, crf: Option<&CrfParams>) -> Result<IouReport> {
    let strong = Dataset {
        num_labels: dataset.num_labels,
        samples: dataset.samples.iter().filter(|s| s.is_strong()).cloned().collect(),
    };
    if strong.is_empty() {
        return Err(Error::data("evaluation set has no pixel-level ground truth"));
    }
    let preds = predict(params, &strong, crf)?;
    let mut cm = ConfusionMatrix::new(dataset.num_labels);
    for (gt, pred) in strong.ground_truth().into_iter().zip(&preds) {
        cm.accumulate(gt, pred, None)?;
    }
    cm.mean_iou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use crate::net::HiddenLayer;
    use crate::tensor::WeakLabels;

    fn tiny_data(n: usize, seed: u64) -> crate::data::GeneratedDataset {
        generate(&GenConfig {
            num_images: n,
            height: 12,
            width: 12,
            num_fg_classes: 2,
            min_size: 4,
            max_size: 7,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(NetConfig {
            in_channels: 3,
            hidden: vec![HiddenLayer {
                channels: 4,
                kernel: 3,
            }],
            num_labels: 3,
            seed: 1,
        });
        cfg.batch_size = 4;
        cfg.steps = 6;
        cfg
    }

    #[test]
    fn strong_targets_are_ground_truth() {
        let g = tiny_data(1, 0);
        let cfg = tiny_cfg();
        let ps = &prepare(&g.dataset, &cfg).unwrap()[0];
        let Annotation::Strong(gt) = &ps.sample.annotation else { unreachable!() };
        let (t, mask) = estep_dispatch(&ScoreMap::zeros(12, 12, 3), ps, &cfg, 0).unwrap();
        assert_eq!(&t, gt);
        assert!(mask.is_none());
    }

    #[test]
    fn image_level_dispatch_delegates() {
        let g = tiny_data(1, 0);
        let weak = g.dataset.to_image_level().unwrap();
        let mut cfg = tiny_cfg();
        cfg.weak_mode = WeakMode::EmFixed;
        let ps = &prepare(&weak, &cfg).unwrap()[0];
        let Annotation::ImageLevel(z) = &ps.sample.annotation else { unreachable!() };
        let params = NetParams::init(&cfg.net).unwrap();
        let scores = params.forward(&ps.sample.image).unwrap();
        let (t, _) = estep_dispatch(&scores, ps, &cfg, 0).unwrap();
        assert_eq!(t, estep::em_fixed_estep(&scores, z, 5.0, 3.0).unwrap());
    }

    #[test]
    fn batches_bundle_a_fixed_strong_share() {
        let g = tiny_data(8, 1);
        let weak = g.dataset.to_image_level().unwrap();
        let mut samples = g.dataset.samples[..2].to_vec();
        samples.extend(weak.samples[2..].iter().cloned());
        let ds = Dataset {
            num_labels: 3,
            samples,
        };
        let mut cfg = tiny_cfg();
        cfg.strong_per_batch = 1;
        let out = run_training(&ds, &cfg, &TrainOptions::default()).unwrap();
        let strong_ids: Vec<&str> = ds.samples[..2].iter().map(|s| s.id.as_str()).collect();
        for b in &out.batches {
            assert_eq!(b.len(), 4);
            assert_eq!(b.iter().filter(|id| strong_ids.contains(&id.as_str())).count(), 1);
        }
    }

    #[test]
    fn missing_pools_are_config_errors() {
        let g = tiny_data(3, 2);
        let weak = g.dataset.to_image_level().unwrap();
        let mut cfg = tiny_cfg();
        cfg.strong_per_batch = 1;
        assert!(matches!(
            run_training(&weak, &cfg, &TrainOptions::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_training(&g.dataset, &cfg, &TrainOptions::default()),
            Err(Error::Config(_))
        ));
        cfg.strong_per_batch = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn em_adapt_targets_only_use_present_labels() {
        let g = tiny_data(6, 3);
        let weak = g.dataset.to_image_level().unwrap();
        let cfg = tiny_cfg();
        let out = run_training(
            &weak,
            &cfg,
            &TrainOptions {
                trace_targets: true,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.traces.len(), cfg.steps * cfg.batch_size);
        for t in &out.traces {
            let Annotation::ImageLevel(z) = &weak.samples[t.sample_index].annotation else {
                unreachable!()
            };
            assert!(t.target.labels().iter().all(|&l| z.contains(l as usize)));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let g = tiny_data(5, 4);
        let cfg = tiny_cfg();
        let a = run_training(&g.dataset, &cfg, &TrainOptions::default()).unwrap();
        let b = run_training(&g.dataset, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics_csv(), b.metrics_csv());
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let g = tiny_data(2, 5);
        let mut cfg = tiny_cfg();
        cfg.net.num_labels = 4;
        assert!(run_training(&g.dataset, &cfg, &TrainOptions::default()).is_err());
    }

    #[test]
    fn weak_labels_with_wrong_width_fail_in_estep() {
        let g = tiny_data(1, 6);
        let cfg = tiny_cfg();
        let mut ps = prepare(&g.dataset, &cfg).unwrap().remove(0);
        ps.sample.annotation = Annotation::ImageLevel(WeakLabels::from_labels(5, [4]).unwrap());
        assert!(estep_dispatch(&ScoreMap::zeros(12, 12, 3), &ps, &cfg, 0).is_err());
    }
}
