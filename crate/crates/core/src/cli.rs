//! Command-line front end. Tables go to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::bboxlabels::{bbox_rect, bbox_seg};
use crate::config::RunConfig;
use crate::data::{generate, read_dataset, read_pgm, write_dataset, write_pgm, Dataset};
use crate::densecrf::crf_refine;
use crate::error::{Error, Result};
use crate::estep::{self, AdaptOutcome};
use crate::eval::evaluate;
use crate::net::{read_checkpoint, write_checkpoint, NetParams};
use crate::tensor::{argmax_labels, Annotation, Sample};
use crate::train::{run_training, TrainOptions};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "wseg", version, about = "Weakly- and semi-supervised segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnnotationArg {
    Strong,
    ImageLevel,
    Boxes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelMethod {
    BboxRect,
    BboxSeg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DebugMode {
    EmFixed,
    EmAdapt,
    BboxEmFixed,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "strong")]
        annotation: AnnotationArg,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        num_fg_classes: Option<usize>,
    },
    /// Derive dense label maps from a boxes dataset.
    GenLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: LabelMethod,
    },
    /// Train a model; writes a checkpoint and a metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Strongly annotated validation set for periodic mIOU.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        weak_mode: Option<String>,
        #[arg(long)]
        box_mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        strong_per_batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Predict label maps for every image of a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Refine predictions with the dense CRF.
        #[arg(long)]
        crf: bool,
    },
    /// Score predicted label maps against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Ground-truth dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of `<id>.pgm` predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump scores, biases and the E-step target for one sample.
    EstepDebug {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        id: String,
        #[arg(long, value_enum)]
        mode: DebugMode,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::GenLabels { common, .. }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::EstepDebug { common, .. } => common,
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = Some(o.clone());
    }
    let opt = |cfg: &mut RunConfig, key: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(key, &v));
    let path = |cfg: &mut RunConfig, key: &str, v: &Option<PathBuf>| {
        v.as_ref()
            .map_or(Ok(()), |p| cfg.set(key, &p.display().to_string()))
    };
    match cmd {
        Command::GenData {
            num_images,
            height,
            width,
            num_fg_classes,
            ..
        } => {
            opt(&mut cfg, "gen.num_images", num_images.map(|v| v.to_string()))?;
            opt(&mut cfg, "gen.height", height.map(|v| v.to_string()))?;
            opt(&mut cfg, "gen.width", width.map(|v| v.to_string()))?;
            opt(&mut cfg, "gen.num_fg_classes", num_fg_classes.map(|v| v.to_string()))?;
        }
        Command::Train {
            data,
            val,
            weak_mode,
            box_mode,
            steps,
            batch_size,
            strong_per_batch,
            lr,
            eval_every,
            ..
        } => {
            path(&mut cfg, "paths.data", data)?;
            path(&mut cfg, "paths.val", val)?;
            opt(&mut cfg, "train.weak_mode", weak_mode.clone())?;
            opt(&mut cfg, "train.box_mode", box_mode.clone())?;
            opt(&mut cfg, "train.steps", steps.map(|v| v.to_string()))?;
            opt(&mut cfg, "train.batch_size", batch_size.map(|v| v.to_string()))?;
            opt(&mut cfg, "train.strong_per_batch", strong_per_batch.map(|v| v.to_string()))?;
            opt(&mut cfg, "sgd.lr", lr.map(|v| v.to_string()))?;
            opt(&mut cfg, "train.eval_every", eval_every.map(|v| v.to_string()))?;
        }
        Command::GenLabels { data, .. } | Command::Eval { data, .. } => {
            path(&mut cfg, "paths.data", data)?;
        }
        Command::Infer { data, checkpoint, .. } | Command::EstepDebug { data, checkpoint, .. } => {
            path(&mut cfg, "paths.data", data)?;
            path(&mut cfg, "paths.checkpoint", checkpoint)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(format!("missing --{what} (or paths.{what})")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<NetParams> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.command)?;
    eprint!("{}", cfg.render());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::GenData { annotation, .. } => cmd_gen_data(cfg, *annotation),
        Command::GenLabels { method, .. } => cmd_gen_labels(cfg, *method),
        Command::Train { .. } => cmd_train(cfg),
        Command::Infer { crf, .. } => cmd_infer(cfg, *crf),
        Command::Eval { pred, csv, .. } => cmd_eval(cfg, pred, csv.as_deref()),
        Command::EstepDebug { id, mode, .. } => cmd_estep_debug(cfg, id, *mode),
    }
}

fn cmd_gen_data(cfg: &RunConfig, annotation: AnnotationArg) -> Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    let g = generate(&cfg.gen_config())?;
    let ds = match annotation {
        AnnotationArg::Strong => g.dataset,
        AnnotationArg::ImageLevel => g.dataset.to_image_level()?,
        AnnotationArg::Boxes => g.to_boxes(),
    };
    write_dataset(&ds, out)?;
    info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_gen_labels(cfg: &RunConfig, method: LabelMethod) -> Result<()> {
    let data = read_dataset(required(&cfg.paths.data, "data")?)?;
    let out = required(&cfg.paths.out, "out")?;
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let Annotation::Boxes(b) = &s.annotation else {
                return Err(Error::data(format!("sample {} has no box annotation", s.id)));
            };
            let map = match method {
                LabelMethod::BboxRect => bbox_rect(b, s.image.height(), s.image.width())?,
                LabelMethod::BboxSeg => bbox_seg(&s.image, b, &cfg.train.bbox_seg)?,
            };
            Sample::new(s.id.clone(), s.image.clone(), Annotation::Strong(map))
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(
        &Dataset {
            num_labels: data.num_labels,
            samples,
        },
        out,
    )
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = read_dataset(required(&cfg.paths.data, "data")?)?;
    let out = required(&cfg.paths.out, "out")?;
    let val = cfg.paths.val.as_deref().map(read_dataset).transpose()?;
    let tcfg = cfg.train_config(data.num_labels);
    let result = run_training(
        &data,
        &tcfg,
        &TrainOptions {
            validation: val.as_ref(),
            trace_targets: false,
        },
    )?;
    create_dir(out)?;
    let mut ckpt = Vec::new();
    write_checkpoint(&result.params, &mut ckpt).map_err(|e| Error::io(out.join(CHECKPOINT_FILE), e))?;
    write_file(&out.join(CHECKPOINT_FILE), ckpt)?;
    write_file(&out.join(METRICS_FILE), result.metrics_csv())?;
    write_file(&out.join(CONFIG_FILE), cfg.render())?;
    if let Some(last) = result.log.last() {
        info!("final loss {:.6}", last.loss);
    }
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, crf: bool) -> Result<()> {
    use rayon::prelude::*;
    let params = load_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let data = read_dataset(required(&cfg.paths.data, "data")?)?;
    let out = required(&cfg.paths.out, "out")?;
    create_dir(out)?;
    data.samples.par_iter().try_for_each(|s| {
        let scores = params.forward(&s.image)?;
        let pred = if crf {
            crf_refine(&scores, &s.image, &cfg.crf)?
        } else {
            argmax_labels(&scores)
        };
        write_file(&out.join(format!("{}.pgm", s.id)), write_pgm(&pred))
    })
}

fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, csv: Option<&Path>) -> Result<()> {
    let data = read_dataset(required(&cfg.paths.data, "data")?)?;
    let mut pairs = Vec::with_capacity(data.len());
    for s in &data.samples {
        let Annotation::Strong(gt) = &s.annotation else {
            return Err(Error::data(format!("sample {} has no ground-truth mask", s.id)));
        };
        let path = pred_dir.join(format!("{}.pgm", s.id));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        pairs.push((gt, read_pgm(&bytes)?));
    }
    let report = evaluate(
        data.num_labels,
        pairs.iter().map(|(g, p)| (*g, p)),
        cfg.void_label,
    )?;
    print!("{}", report.table());
    if let Some(path) = csv {
        write_file(path, report.csv())?;
    }
    Ok(())
}

fn cmd_estep_debug(cfg: &RunConfig, id: &str, mode: DebugMode) -> Result<()> {
    let params = load_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let data = read_dataset(required(&cfg.paths.data, "data")?)?;
    let sample = data
        .samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::data(format!("no sample with id {id:?}")))?;
    let scores = params.forward(&sample.image)?;
    let t = &cfg.train;
    let l = scores.num_labels();
    let (biases, target) = match (mode, &sample.annotation) {
        (DebugMode::EmFixed, Annotation::ImageLevel(z)) => {
            let b = (0..l)
                .map(|k| match (z.contains(k), k) {
                    (false, _) => 0.0,
                    (true, 0) => t.b_bg,
                    (true, _) => t.b_fg,
                })
                .collect();
            let target = estep::em_fixed_estep(&scores, z, t.b_fg, t.b_bg)?;
            (Some(b), target)
        }
        (DebugMode::EmAdapt, Annotation::ImageLevel(z)) => {
            let params = estep::AdaptParams::new(t.rho_fg, t.rho_bg, cfg.seed)?;
            let AdaptOutcome { biases, visit_order } = estep::em_adapt_biases_traced(&scores, z, &params)?;
            eprintln!("visit order: {visit_order:?}");
            let target = biases.apply(&scores)?;
            (Some(biases.as_slice().to_vec()), target)
        }
        (DebugMode::BboxEmFixed, Annotation::Boxes(b)) => {
            (None, estep::bbox_em_fixed_estep(&scores, b, t.b_fg, t.b_bg)?)
        }
        (m, a) => {
            return Err(Error::config(format!(
                "mode {m:?} does not apply to a {:?} sample",
                a.kind()
            )))
        }
    };

    let mut table = String::from("label\tbias\n");
    for k in 0..l {
        match &biases {
            Some(b) => writeln!(table, "{k}\t{}", b[k]).unwrap(),
            None => writeln!(table, "{k}\t-").unwrap(),
        }
    }
    print!("{table}");
    if let Some(out) = &cfg.paths.out {
        create_dir(out)?;
        let mut csv = String::from("pixel");
        for k in 0..l {
            write!(csv, ",s{k}").unwrap();
        }
        csv.push('\n');
        for (m, px) in scores.pixels().enumerate() {
            write!(csv, "{m}").unwrap();
            for v in px {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
        write_file(&out.join("scores.csv"), csv)?;
        write_file(&out.join("biases.tsv"), table)?;
        write_file(&out.join("target.pgm"), write_pgm(&target))?;
    }
    Ok(())
}
