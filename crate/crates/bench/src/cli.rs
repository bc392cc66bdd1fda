//! Argument parsing and the subcommand implementations behind `lffn`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lffn_core::container::TensorArchive;
use lffn_core::eval::{ApMethod, EvalConfig};
use lffn_core::formats::{parse_predictions, PredRecord};
use lffn_core::modelspec::{
    count_cost, resnet50_spec_with, se_resnext50_spec_with, toy_backbone_spec, GraphSpec, StridePlacement,
};
use lffn_core::nms::{nms_per_class, NmsConfig, NmsMode};
use lffn_core::{Error, Result, Shape};

use crate::ablate::ablate;
use crate::checkpoint::Checkpoint;
use crate::config::{AblationMode, RunConfig};
use crate::dataset::{gen_synthetic, Split, SyntheticDataset};
use crate::detect::{detect_images, image_seed, predictions_text};
use crate::io::{read_bytes, read_text, resolve_out_dir, write_atomic};
use crate::report::{evaluate_texts, write_report};
use crate::suite::run_suite;
use crate::train::{loss_csv, smoothed_endpoints, train_until, TrainingSet};

#[derive(Parser, Debug)]
#[command(name = "lffn", version, about = "Toy-scale LFFN detector: data, training, detection, evaluation and cost")]
pub struct Cli {
    /// Output directory; falls back to $LFFN_OUT_DIR, then ./out.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train/test splits as image archives plus ground truth.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "both")]
        split: SplitArg,
    },
    /// Train the detector with SGD, writing a loss log and checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a trained checkpoint over an image archive.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image archive written by `gen`; defaults to the checkpoint's test split.
        #[arg(long)]
        images: Option<PathBuf>,
        #[command(flatten)]
        nms: NmsArgs,
        #[arg(long)]
        score_threshold: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Apply per-image, per-class NMS to a prediction file.
    Nms {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        nms: NmsArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "continuous")]
        method: MethodArg,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Evaluate classes 0..N, counting classes without ground truth as AP 0.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value = "report")]
        stem: String,
    },
    /// Count multiply-accumulates and parameters of a network description.
    Cost {
        #[arg(long, value_enum, conflicts_with = "spec")]
        model: Option<ModelArg>,
        /// TOML graph description.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value = "first")]
        stride_on: StrideArg,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks of every differentiable layer.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train and evaluate every ablation mode on one dataset and budget.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Run config; the built-in defaults match configs/default.cfg.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<AblationMode>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub train_images: Option<usize>,
    #[arg(long)]
    pub test_images: Option<usize>,
}

#[derive(Args, Debug)]
pub struct NmsArgs {
    #[arg(long, value_enum)]
    pub nms_mode: Option<NmsModeArg>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    #[arg(long)]
    pub nms_seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Test,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum NmsModeArg {
    Traditional,
    Stochastic,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum MethodArg {
    Elevenpoint,
    Continuous,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ModelArg {
    Resnet50,
    SeResnext50,
    Toy,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum StrideArg {
    First,
    Middle,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            cfg.optimizer.momentum = v;
        }
        if let Some(v) = self.iterations {
            cfg.train.iterations = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.train.checkpoint_every = v;
        }
        if let Some(v) = self.train_images {
            cfg.dataset.train_images = v;
        }
        if let Some(v) = self.test_images {
            cfg.dataset.test_images = v;
        }
    }

    fn overrides_model(&self) -> bool {
        self.config.is_some() || self.seed.is_some() || self.mode.is_some() || self.train_images.is_some()
    }
}

impl NmsArgs {
    fn apply(&self, mut cfg: NmsConfig) -> Result<NmsConfig> {
        if let Some(m) = self.nms_mode {
            cfg.mode = match m {
                NmsModeArg::Traditional => NmsMode::Traditional,
                NmsModeArg::Stochastic => NmsMode::Stochastic,
            };
        }
        if let Some(t) = self.nms_threshold {
            cfg.threshold = t;
        }
        if let Some(s) = self.nms_seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::Loss(_) => 4,
        _ => 3,
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Config(_) => "config",
        Error::Domain(_) => "domain",
        Error::Index(_) => "index",
        Error::Sampling(_) => "sampling",
        Error::Loss(_) => "loss",
        Error::Parse { .. } => "parse",
        Error::Version { .. } => "version",
        Error::Numeric(_) => "numeric",
        Error::Io(_) => "io",
    }
}

/// The one-line form printed on stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error code={} kind={}: {msg}", exit_code(e), error_kind(e))
}

pub fn run(cli: Cli) -> Result<()> {
    let out = resolve_out_dir(cli.out_dir);
    match cli.command {
        Command::Gen { run, split } => gen(&run.resolve()?, split, &out),
        Command::Train { run, resume } => train(&run, resume.as_deref(), &out),
        Command::Detect { checkpoint, images, nms, score_threshold, output } => {
            detect(&checkpoint, images.as_deref(), &nms, score_threshold, &output.unwrap_or(out.join("predictions.txt")))
        }
        Command::Nms { input, nms, output } => nms_file(&input, &nms, &output.unwrap_or(out.join("nms.txt"))),
        Command::Eval { pred, gt, method, iou, classes, stem } => {
            let method = match method {
                MethodArg::Elevenpoint => ApMethod::ElevenPoint,
                MethodArg::Continuous => ApMethod::Continuous,
            };
            eval(&pred, &gt, &EvalConfig { iou_threshold: iou, method }, classes, &out, &stem)
        }
        Command::Cost { model, spec, input, batch, stride_on, json } => cost(model, spec.as_deref(), input, batch, stride_on, json),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Ablate { run } => ablate_cmd(&run.resolve()?, &out),
    }
}

fn write_split(ds: &SyntheticDataset, out: &Path) -> Result<()> {
    let name = ds.split.name();
    write_atomic(&out.join(format!("{name}_images.lfft")), &ds.image_archive().to_bytes())?;
    write_atomic(&out.join(format!("{name}_gt.txt")), ds.gt_text().as_bytes())?;
    println!("{name}: {} images, {} boxes -> {}", ds.len(), ds.gt_records().len(), out.display());
    Ok(())
}

fn gen(cfg: &RunConfig, split: SplitArg, out: &Path) -> Result<()> {
    let splits: &[Split] = match split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::Both => &[Split::Train, Split::Test],
    };
    for &s in splits {
        write_split(&gen_synthetic(&cfg.dataset, cfg.seed, s)?, out)?;
    }
    write_atomic(&out.join("config.cfg"), cfg.to_toml().as_bytes())
}

fn train(args: &RunArgs, resume: Option<&Path>, out: &Path) -> Result<()> {
    let mut state = match resume {
        Some(path) => {
            if args.overrides_model() {
                return Err(Error::Config(
                    "--resume uses the checkpoint's config; only --iterations, --lr, --momentum and --checkpoint-every may be given".into(),
                ));
            }
            let mut s = Checkpoint::load(path)?;
            args.apply(&mut s.config);
            s.config.validate()?;
            s
        }
        None => Checkpoint::fresh(&args.resolve()?)?,
    };
    let cfg = state.config.clone();
    let data = gen_synthetic(&cfg.dataset, cfg.seed, Split::Train)?;
    let set = TrainingSet::new(&cfg, &data)?;
    let start = state.iteration;
    let rows = train_until(&mut state, &set, cfg.train.iterations, Some(out))?;
    write_atomic(&out.join("loss.csv"), loss_csv(&rows).as_bytes())?;
    state.save(&out.join("final.lffc"))?;
    match smoothed_endpoints(&rows, cfg.train.smoothing_window) {
        Some((a, b)) => println!(
            "trained {} ({} -> {} iterations): smoothed loss {a:.6} -> {b:.6}",
            cfg.mode, start, state.iteration
        ),
        None => println!("nothing to do: checkpoint is already at iteration {}", state.iteration),
    }
    Ok(())
}

fn detect(ckpt: &Path, images: Option<&Path>, nms: &NmsArgs, score: Option<f64>, output: &Path) -> Result<()> {
    let state = Checkpoint::load(ckpt)?;
    let cfg = &state.config;
    let mut dc = cfg.detect.clone();
    dc.nms = nms.apply(dc.nms)?;
    if let Some(s) = score {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Config(format!("score threshold {s} outside [0, 1]")));
        }
        dc.score_threshold = s;
    }
    let imgs = match images {
        Some(p) => SyntheticDataset::images_from_archive(&TensorArchive::from_bytes(&read_bytes(p)?)?)?,
        None => {
            let ds = gen_synthetic(&cfg.dataset, cfg.seed, Split::Test)?;
            ds.ids.into_iter().zip(ds.images).collect()
        }
    };
    let preds = detect_images(&state.detector, cfg, &dc, &imgs)?;
    write_atomic(output, predictions_text(&preds).as_bytes())?;
    println!("{} detections on {} images -> {}", preds.len(), imgs.len(), output.display());
    Ok(())
}

/// Records grouped by image, in order of first appearance.
fn by_image(records: Vec<PredRecord>) -> Vec<(String, Vec<PredRecord>)> {
    let mut groups: Vec<(String, Vec<PredRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(id, _)| *id == r.image_id) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.image_id.clone(), vec![r])),
        }
    }
    groups
}

fn nms_file(input: &Path, nms: &NmsArgs, output: &Path) -> Result<()> {
    let cfg = nms.apply(NmsConfig::default())?;
    let records = parse_predictions(&read_text(input)?)?;
    let n_in = records.len();
    let mut kept = Vec::new();
    for (i, (id, group)) in by_image(records).into_iter().enumerate() {
        let dets: Vec<_> = group.iter().map(PredRecord::detection).collect();
        let c = NmsConfig { seed: image_seed(cfg.seed, i), ..cfg };
        kept.extend(nms_per_class(&dets, &c)?.iter().map(|d| PredRecord::from_detection(&id, d)));
    }
    write_atomic(output, predictions_text(&kept).as_bytes())?;
    println!("kept {} of {n_in} detections -> {}", kept.len(), output.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, cfg: &EvalConfig, classes: Option<usize>, out: &Path, stem: &str) -> Result<()> {
    let ids: Option<Vec<usize>> = classes.map(|n| (0..n).collect());
    let report = evaluate_texts(&read_text(pred)?, &read_text(gt)?, ids.as_deref(), cfg)?;
    let (json, csv) = write_report(&report, out, stem)?;
    for c in &report.classes {
        println!("class {} AP {:.6} ({} gts, {} detections)", c.class_id, c.ap, c.num_gts, c.num_detections);
    }
    println!("mAP {:.6} -> {}, {}", report.map, json.display(), csv.display());
    Ok(())
}

fn cost(model: Option<ModelArg>, spec: Option<&Path>, input: usize, batch: usize, stride: StrideArg, json: bool) -> Result<()> {
    let stride_on = match stride {
        StrideArg::First => StridePlacement::First,
        StrideArg::Middle => StridePlacement::Middle,
    };
    let graph = match (model, spec) {
        (_, Some(p)) => GraphSpec::from_toml(&read_text(p)?)?,
        (Some(ModelArg::Resnet50), None) => resnet50_spec_with(stride_on),
        (Some(ModelArg::SeResnext50), None) => se_resnext50_spec_with(stride_on),
        (Some(ModelArg::Toy), None) => toy_backbone_spec(&RunConfig::default().backbone)?,
        (None, None) => return Err(Error::Config("cost needs --model or --spec".into())),
    };
    let report = count_cost(&graph, Shape::new(batch, graph.input_channels, input, input))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("cost report serialises"));
    } else {
        println!("{report}");
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let reports = run_suite(seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{r}");
        if !r.pass {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn ablate_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = ablate(cfg, Some(out))?;
    let names: Vec<String> = cfg.dataset.classes.iter().map(|c| c.name.clone()).collect();
    let csv = report.csv(&names);
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    write_atomic(&out.join("ablation_timing.csv"), report.timing_csv().as_bytes())?;
    print!("{csv}");
    match report.single_map_small_ap_le_lffn() {
        Some(true) => println!("small-object AP: single-map <= lffn"),
        Some(false) => println!("small-object AP: single-map > lffn"),
        None => println!("small-object AP: comparison unavailable"),
    }
    Ok(())
}
