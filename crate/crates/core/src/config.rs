//! Run configuration: a flat `key = value` file with dotted section keys.
//!
//! ```text
//! # comment
//! seed = 3
//! estep.b_fg = 5
//! net.hidden = 16x3,16x3
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{GenConfig, ShapeKind};
use crate::densecrf::CrfParams;
use crate::error::{Error, Result};
use crate::net::{HiddenLayer, NetConfig};
use crate::train::{BoxMode, TrainConfig, WeakMode};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub gen: GenConfig,
    pub hidden: Vec<HiddenLayer>,
    pub train: TrainConfig,
    /// CRF used by `infer --crf`.
    pub crf: CrfParams,
    pub void_label: Option<u8>,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hidden = vec![
            HiddenLayer {
                channels: 16,
                kernel: 3,
            },
            HiddenLayer {
                channels: 16,
                kernel: 3,
            },
        ];
        let mut train = TrainConfig::new(NetConfig {
            in_channels: 3,
            hidden: hidden.clone(),
            num_labels: 6,
            seed: 0,
        });
        train.sgd.lr = 0.01;
        train.batch_size = 10;
        RunConfig {
            seed: 0,
            threads: 1,
            gen: GenConfig::default(),
            hidden,
            train,
            crf: CrfParams::default(),
            void_label: None,
            paths: Paths::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_hidden(key: &str, value: &str) -> Result<Vec<HiddenLayer>> {
    if value.is_empty() || value == "-" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|tok| {
            let (c, k) = tok
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::config(format!("{key}: expected CHANNELSxKERNEL, got {tok:?}")))?;
            Ok(HiddenLayer {
                channels: parse(key, c)?,
                kernel: parse(key, k)?,
            })
        })
        .collect()
}

fn render_hidden(hidden: &[HiddenLayer]) -> String {
    if hidden.is_empty() {
        return "-".into();
    }
    hidden
        .iter()
        .map(|l| format!("{}x{}", l.channels, l.kernel))
        .collect::<Vec<_>>()
        .join(",")
}

fn set_crf(p: &mut CrfParams, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "w_spatial" => p.w_spatial = parse(key, value)?,
        "theta_gamma" => p.theta_gamma = parse(key, value)?,
        "w_bilateral" => p.w_bilateral = parse(key, value)?,
        "theta_alpha" => p.theta_alpha = parse(key, value)?,
        "theta_beta" => p.theta_beta = parse(key, value)?,
        "iterations" => p.iterations = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn render_crf(out: &mut String, prefix: &str, p: &CrfParams) {
    writeln!(out, "{prefix}.w_spatial = {}", p.w_spatial).unwrap();
    writeln!(out, "{prefix}.theta_gamma = {}", p.theta_gamma).unwrap();
    writeln!(out, "{prefix}.w_bilateral = {}", p.w_bilateral).unwrap();
    writeln!(out, "{prefix}.theta_alpha = {}", p.theta_alpha).unwrap();
    writeln!(out, "{prefix}.theta_beta = {}", p.theta_beta).unwrap();
    writeln!(out, "{prefix}.iterations = {}", p.iterations).unwrap();
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn render_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one assignment. Unknown keys are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let g = &mut self.gen;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "gen.num_images" => g.num_images = parse(key, value)?,
            "gen.height" => g.height = parse(key, value)?,
            "gen.width" => g.width = parse(key, value)?,
            "gen.num_fg_classes" => g.num_fg_classes = parse(key, value)?,
            "gen.min_shapes" => g.min_shapes = parse(key, value)?,
            "gen.max_shapes" => g.max_shapes = parse(key, value)?,
            "gen.shapes" => {
                g.shape_kinds = value
                    .split(',')
                    .map(|s| s.trim().parse::<ShapeKind>().map_err(|e| Error::config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "gen.min_size" => g.min_size = parse(key, value)?,
            "gen.max_size" => g.max_size = parse(key, value)?,
            "gen.noise" => g.noise = parse(key, value)?,
            "gen.contrast" => g.contrast = parse(key, value)?,
            "gen.illumination" => g.illumination = parse(key, value)?,
            "gen.hue_jitter" => g.hue_jitter = parse(key, value)?,
            "net.hidden" => self.hidden = parse_hidden(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.strong_per_batch" => t.strong_per_batch = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.weak_mode" => t.weak_mode = value.parse::<WeakMode>()?,
            "train.box_mode" => t.box_mode = value.parse::<BoxMode>()?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "estep.b_fg" => t.b_fg = parse(key, value)?,
            "estep.b_bg" => t.b_bg = parse(key, value)?,
            "estep.rho_fg" => t.rho_fg = parse(key, value)?,
            "estep.rho_bg" => t.rho_bg = parse(key, value)?,
            "sgd.lr" => t.sgd.lr = parse(key, value)?,
            "sgd.classifier_lr_mult" => t.sgd.classifier_lr_mult = parse(key, value)?,
            "sgd.momentum" => t.sgd.momentum = parse(key, value)?,
            "sgd.weight_decay" => t.sgd.weight_decay = parse(key, value)?,
            "sgd.lr_step" => t.sgd.lr_step = parse(key, value)?,
            "sgd.lr_gamma" => t.sgd.lr_gamma = parse(key, value)?,
            "bbox_seg.alpha" => t.bbox_seg.alpha = parse(key, value)?,
            "bbox_seg.neutral_unary" => t.bbox_seg.neutral_unary = parse(key, value)?,
            "eval.void_label" => {
                self.void_label = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "paths.data" => self.paths.data = opt_path(value),
            "paths.val" => self.paths.val = opt_path(value),
            "paths.out" => self.paths.out = opt_path(value),
            "paths.checkpoint" => self.paths.checkpoint = opt_path(value),
            _ => {
                let known = if let Some(f) = key.strip_prefix("bbox_seg.crf.") {
                    set_crf(&mut t.bbox_seg.crf, f, key, value)?
                } else if let Some(f) = key.strip_prefix("crf.") {
                    set_crf(&mut self.crf, f, key, value)?
                } else {
                    false
                };
                if !known {
                    return Err(Error::config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order. Parsing the
    /// output yields the same configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let g = &self.gen;
        let t = &self.train;
        let shapes: Vec<String> = g.shape_kinds.iter().map(|k| k.to_string()).collect();
        let void = self.void_label.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("gen.num_images", g.num_images.to_string()),
            ("gen.height", g.height.to_string()),
            ("gen.width", g.width.to_string()),
            ("gen.num_fg_classes", g.num_fg_classes.to_string()),
            ("gen.min_shapes", g.min_shapes.to_string()),
            ("gen.max_shapes", g.max_shapes.to_string()),
            ("gen.shapes", shapes.join(",")),
            ("gen.min_size", g.min_size.to_string()),
            ("gen.max_size", g.max_size.to_string()),
            ("gen.noise", g.noise.to_string()),
            ("gen.contrast", g.contrast.to_string()),
            ("gen.illumination", g.illumination.to_string()),
            ("gen.hue_jitter", g.hue_jitter.to_string()),
            ("net.hidden", render_hidden(&self.hidden)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.strong_per_batch", t.strong_per_batch.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.weak_mode", t.weak_mode.to_string()),
            ("train.box_mode", t.box_mode.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("estep.b_fg", t.b_fg.to_string()),
            ("estep.b_bg", t.b_bg.to_string()),
            ("estep.rho_fg", t.rho_fg.to_string()),
            ("estep.rho_bg", t.rho_bg.to_string()),
            ("sgd.lr", t.sgd.lr.to_string()),
            ("sgd.classifier_lr_mult", t.sgd.classifier_lr_mult.to_string()),
            ("sgd.momentum", t.sgd.momentum.to_string()),
            ("sgd.weight_decay", t.sgd.weight_decay.to_string()),
            ("sgd.lr_step", t.sgd.lr_step.to_string()),
            ("sgd.lr_gamma", t.sgd.lr_gamma.to_string()),
            ("bbox_seg.alpha", t.bbox_seg.alpha.to_string()),
            ("bbox_seg.neutral_unary", t.bbox_seg.neutral_unary.to_string()),
        ];
        for (k, v) in lines {
            writeln!(s, "{k} = {v}").unwrap();
        }
        render_crf(&mut s, "bbox_seg.crf", &t.bbox_seg.crf);
        render_crf(&mut s, "crf", &self.crf);
        writeln!(s, "eval.void_label = {void}").unwrap();
        writeln!(s, "paths.data = {}", render_path(&self.paths.data)).unwrap();
        writeln!(s, "paths.val = {}", render_path(&self.paths.val)).unwrap();
        writeln!(s, "paths.out = {}", render_path(&self.paths.out)).unwrap();
        writeln!(s, "paths.checkpoint = {}", render_path(&self.paths.checkpoint)).unwrap();
        s
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            ..self.gen.clone()
        }
    }

    /// Training configuration for a dataset with `num_labels` labels.
    pub fn train_config(&self, num_labels: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.net = NetConfig {
            in_channels: 3,
            hidden: self.hidden.clone(),
            num_labels,
            seed: self.seed,
        };
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be positive"));
        }
        self.gen_config()
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.train_config(self.gen.num_fg_classes + 1)
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.crf.validate().map_err(|e| Error::config(e.to_string()))
    }
}
