//! Batch command-line surface: `synth`, `train`, `eval`, `infer`,
//! `gradcheck` and `summary`.
//!
//! Every command resolves its settings from an optional flat `key=value`
//! file (`--config`) overlaid by explicit flags, then defaults. Commands that
//! produce a run directory write the resolved settings to `config.txt` there;
//! passing that file back through `--config` repeats the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context as _};
use clap::{Args, Parser, Subcommand};

use crate::data::{
    class_census, generate_synthetic, read_image, read_mask, write_dataset, write_mask, write_mask_overlay,
    DatasetManifest, OverlaySource, SynthConfig,
};
use crate::gradcheck::{run_suite, Suite, SuiteOptions};
use crate::metrics::{iou_dice, ConfusionCounts};
use crate::network::{checkpoint_bytes, load_checkpoint, Network, NetworkConfig, Variant};
use crate::train::{evaluate, train, AugmentationSpec, Optimizer, TrainConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.dpyr";
pub const LOSS_FILE: &str = "loss.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";

/// Published full-scale parameter count the `summary` command compares
/// against.
pub const REFERENCE_PARAMS: f64 = 33.57e6;

#[derive(Debug, Parser)]
#[command(name = "deeppyramid", version, about = "DeepPyramid+ segmentation on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train on every fold except --fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or stored predictions) on fold --fold.
    Eval(EvalArgs),
    /// Predict one image: writes mask.png and overlay.png.
    Infer(InferArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Per-module parameter counts.
    Summary(SummaryArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Held-out fold; training uses all other folds.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Augmentation strength in [0, 1]; 0 disables augmentation.
    #[arg(long)]
    pub augment: Option<f64>,
    /// SGD momentum; 0 selects plain SGD.
    #[arg(long)]
    pub momentum: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of predicted label PNGs named like the manifest masks,
    /// evaluated instead of a checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Optional run directory for metrics.tsv and config.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// all | tensor | deform | pvf | dpr | loss
    #[arg(long)]
    pub module: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Negative control: corrupts every analytic gradient.
    #[arg(long, hide = true)]
    pub sabotage: bool,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

/// Resolved `key=value` settings of one command.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// keys outside `allowed` and repeated keys are errors.
    pub fn parse(text: &str, allowed: &[&str]) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key=value, got {raw:?}", n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !allowed.contains(&k) {
                bail!(
                    "config line {}: unknown key {k:?} (allowed: {})",
                    n + 1,
                    allowed.join(", ")
                );
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                bail!("config line {}: duplicate key {k:?}", n + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path, allowed: &[&str]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, allowed).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .get_str(key)
            .ok_or_else(|| anyhow!("missing required setting --{key}"))?;
        raw.parse().map_err(|e| anyhow!("invalid value {raw:?} for {key}: {e}"))
    }

    /// Sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.values.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }
}

/// (key, default) pairs; `None` marks a required key.
type Schema = &'static [(&'static str, Option<&'static str>)];

const SYNTH_KEYS: Schema = &[
    ("seed", Some("0")),
    ("n", Some("200")),
    ("size", Some("64")),
    ("classes", Some("3")),
    ("out", None),
];
const TRAIN_KEYS: Schema = &[
    ("manifest", None),
    ("fold", Some("0")),
    ("variant", Some("deeppyramid_plus")),
    ("iters", Some("200")),
    ("lr", Some("0.003")),
    ("alpha", Some("0.5")),
    ("seed", Some("0")),
    ("out", None),
    ("batch_size", Some("4")),
    ("width", Some("8")),
    ("augment", Some("0")),
    ("momentum", Some("0.9")),
];
const EVAL_KEYS: Schema = &[
    ("manifest", None),
    ("fold", Some("0")),
    ("checkpoint", Some("")),
    ("predictions", Some("")),
    ("out", Some("")),
];
const INFER_KEYS: Schema = &[("checkpoint", None), ("image", None), ("out", None)];
const GRADCHECK_KEYS: Schema = &[("module", Some("all")), ("seed", Some("0"))];
const SUMMARY_KEYS: Schema = &[
    ("variant", Some("deeppyramid_plus")),
    ("width", Some("8")),
    ("size", Some("64")),
    ("classes", Some("3")),
];

fn resolve(schema: Schema, file: Option<&Path>, flags: Vec<(&str, Option<String>)>) -> anyhow::Result<RunConfig> {
    let keys: Vec<&str> = schema.iter().map(|(k, _)| *k).collect();
    let mut cfg = match file {
        Some(p) => RunConfig::load(p, &keys)?,
        None => RunConfig::default(),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v);
        }
    }
    for (k, default) in schema {
        if cfg.get_str(k).is_none() {
            match default {
                Some(d) => cfg.set(k, d),
                None => bail!("missing required setting --{k}"),
            }
        }
    }
    Ok(cfg)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn str_flag<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn optional_path(cfg: &RunConfig, key: &str) -> Option<PathBuf> {
    cfg.get_str(key).filter(|s| !s.is_empty()).map(PathBuf::from)
}

fn create_run_dir(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.render()).with_context(|| format!("writing {}", path.display()))
}

/// Runs one command, writing results to `out`. Returns `false` when the
/// command completed but reported a failure (a failing gradient check).
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out).map(|_| true),
        Command::Train(a) => cmd_train(&a, out).map(|_| true),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| true),
        Command::Infer(a) => cmd_infer(&a, out).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Summary(a) => cmd_summary(&a, out).map(|_| true),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, S>(args: I, out: &mut dyn Write) -> anyhow::Result<bool>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?, out)
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = resolve(
        SYNTH_KEYS,
        a.config.as_deref(),
        vec![
            ("seed", str_flag(&a.seed)),
            ("n", str_flag(&a.n)),
            ("size", str_flag(&a.size)),
            ("classes", str_flag(&a.classes)),
            ("out", path_flag(&a.out)),
        ],
    )?;
    let synth = SynthConfig::new(cfg.get("seed")?, cfg.get("n")?, cfg.get("size")?, cfg.get("classes")?);
    let dir: PathBuf = cfg.get("out")?;
    let samples = generate_synthetic(&synth)?;
    create_run_dir(&dir, &cfg)?;
    let names = synth.class_names();
    write_dataset(&dir, &samples, &names)?;
    writeln!(out, "wrote {} samples to {}", samples.len(), dir.display())?;
    writeln!(out, "class\tname\tsamples_present")?;
    for (c, count) in class_census(&samples, synth.num_classes).iter().enumerate() {
        writeln!(out, "{c}\t{}\t{count}", names[c])?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = resolve(
        TRAIN_KEYS,
        a.config.as_deref(),
        vec![
            ("manifest", path_flag(&a.manifest)),
            ("fold", str_flag(&a.fold)),
            ("variant", a.variant.clone()),
            ("iters", str_flag(&a.iters)),
            ("lr", str_flag(&a.lr)),
            ("alpha", str_flag(&a.alpha)),
            ("seed", str_flag(&a.seed)),
            ("out", path_flag(&a.out)),
            ("batch_size", str_flag(&a.batch_size)),
            ("width", str_flag(&a.width)),
            ("augment", str_flag(&a.augment)),
            ("momentum", str_flag(&a.momentum)),
        ],
    )?;
    let manifest = DatasetManifest::load(&cfg.get::<PathBuf>("manifest")?)?;
    let fold: usize = cfg.get("fold")?;
    let (train_idx, _) = manifest.split(fold);
    let data = manifest.read_rows(&train_idx)?;
    let first = data
        .first()
        .ok_or_else(|| anyhow!("no training rows outside fold {fold}"))?;
    let size = first.height();
    if data.iter().any(|s| s.height() != size || s.width() != size) {
        bail!("training images must all be square and of equal size");
    }

    let net_cfg = NetworkConfig {
        num_classes: manifest.num_classes(),
        input_size: size,
        base_width: cfg.get("width")?,
        variant: cfg.get::<String>("variant")?.parse()?,
    };
    let seed: u64 = cfg.get("seed")?;
    let momentum: f64 = cfg.get("momentum")?;
    let augment: f64 = cfg.get("augment")?;
    if !(0.0..=1.0).contains(&augment) {
        bail!("augment must lie in [0, 1], got {augment}");
    }
    let train_cfg = TrainConfig {
        batch_size: cfg.get("batch_size")?,
        lr_init: cfg.get("lr")?,
        total_iters: cfg.get("iters")?,
        loss_alpha: cfg.get("alpha")?,
        seed,
        optimizer: if momentum > 0.0 {
            Optimizer::Momentum(momentum)
        } else {
            Optimizer::Sgd
        },
        augmentation: (augment > 0.0).then(|| AugmentationSpec::scaled(augment)),
        eval_every: 0,
    };

    let dir: PathBuf = cfg.get("out")?;
    create_run_dir(&dir, &cfg)?;
    let mut net = Network::<f32>::new(net_cfg, seed)?;
    let report = train(&mut net, &data, &train_cfg, None)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    fs::write(&ckpt, checkpoint_bytes(&net)?).with_context(|| format!("writing {}", ckpt.display()))?;
    let curve = dir.join(LOSS_FILE);
    fs::write(&curve, report.loss_curve()).with_context(|| format!("writing {}", curve.display()))?;

    writeln!(
        out,
        "variant={} params={} train_samples={}",
        net_cfg.variant,
        net.param_count(),
        data.len()
    )?;
    if let Some((head, tail)) = report.head_tail_means(20) {
        writeln!(
            out,
            "iters={} loss_first20={head:.4} loss_last20={tail:.4}",
            train_cfg.total_iters
        )?;
    }
    writeln!(out, "checkpoint={}", ckpt.display())?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = resolve(
        EVAL_KEYS,
        a.config.as_deref(),
        vec![
            ("manifest", path_flag(&a.manifest)),
            ("fold", str_flag(&a.fold)),
            ("checkpoint", path_flag(&a.checkpoint)),
            ("predictions", path_flag(&a.predictions)),
            ("out", path_flag(&a.out)),
        ],
    )?;
    let manifest = DatasetManifest::load(&cfg.get::<PathBuf>("manifest")?)?;
    let fold: usize = cfg.get("fold")?;
    let (_, test_idx) = manifest.split(fold);
    if test_idx.is_empty() {
        bail!("fold {fold} has no rows");
    }
    let samples = manifest.read_rows(&test_idx)?;
    let k = manifest.num_classes();

    let report = match (optional_path(&cfg, "checkpoint"), optional_path(&cfg, "predictions")) {
        (Some(ckpt), None) => {
            let net = load_checkpoint(&ckpt)?;
            if net.cfg.num_classes != k {
                bail!(
                    "class-count mismatch: checkpoint has {} classes, manifest has {k}",
                    net.cfg.num_classes
                );
            }
            evaluate(&net, &samples)?
        }
        (None, Some(dir)) => {
            let mut counts = ConfusionCounts::new(k);
            for (&i, s) in test_idx.iter().zip(&samples) {
                let name = manifest.rows[i]
                    .mask
                    .file_name()
                    .ok_or_else(|| anyhow!("row {} has no mask file name", i + 1))?;
                let pred = read_mask(&dir.join(name))?;
                counts.accumulate(&pred, &s.mask)?;
            }
            iou_dice(&counts)
        }
        _ => bail!("give exactly one of --checkpoint and --predictions"),
    };
    let report = report.with_names(&manifest.class_names);
    write!(out, "{}", report.table())?;
    writeln!(out)?;
    write!(out, "{}", report.key_values())?;
    if let Some(dir) = optional_path(&cfg, "out") {
        create_run_dir(&dir, &cfg)?;
        let path = dir.join(METRICS_FILE);
        fs::write(&path, report.tsv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = resolve(
        INFER_KEYS,
        a.config.as_deref(),
        vec![
            ("checkpoint", path_flag(&a.checkpoint)),
            ("image", path_flag(&a.image)),
            ("out", path_flag(&a.out)),
        ],
    )?;
    let net = load_checkpoint(&cfg.get::<PathBuf>("checkpoint")?)?;
    let image = read_image(&cfg.get::<PathBuf>("image")?)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let batch = image.clone().reshape(&[1, 3, h, w])?;
    let logits = net.predict_logits(&batch)?;
    let dir: PathBuf = cfg.get("out")?;
    create_run_dir(&dir, &cfg)?;
    let mask = write_mask_overlay(&image, OverlaySource::Logits(&logits), &dir.join("overlay.png"))?;
    write_mask(&dir.join("mask.png"), &mask)?;
    let k = net.cfg.num_classes;
    let mut pixels = vec![0usize; k];
    for &v in mask.data() {
        pixels[v as usize] += 1;
    }
    writeln!(out, "class\tpixels")?;
    for (c, n) in pixels.iter().enumerate() {
        writeln!(out, "{c}\t{n}")?;
    }
    writeln!(
        out,
        "wrote {} and {}",
        dir.join("mask.png").display(),
        dir.join("overlay.png").display()
    )?;
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> anyhow::Result<bool> {
    let cfg = resolve(
        GRADCHECK_KEYS,
        a.config.as_deref(),
        vec![("module", a.module.clone()), ("seed", str_flag(&a.seed))],
    )?;
    let suite: Suite = cfg.get::<String>("module")?.parse()?;
    let opts = SuiteOptions {
        seed: cfg.get("seed")?,
        sabotage: a.sabotage,
    };
    let reports = run_suite(suite, &opts)?;
    for (s, r) in &reports {
        writeln!(out, "[{s}] {r}")?;
    }
    let failed = reports.iter().filter(|(_, r)| !r.passed()).count();
    writeln!(
        out,
        "{} checks, {} passed, {failed} failed",
        reports.len(),
        reports.len() - failed
    )?;
    Ok(failed == 0)
}

pub fn cmd_summary(a: &SummaryArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = resolve(
        SUMMARY_KEYS,
        a.config.as_deref(),
        vec![
            ("variant", a.variant.clone()),
            ("width", str_flag(&a.width)),
            ("size", str_flag(&a.size)),
            ("classes", str_flag(&a.classes)),
        ],
    )?;
    let net_cfg = NetworkConfig {
        num_classes: cfg.get("classes")?,
        input_size: cfg.get("size")?,
        base_width: cfg.get("width")?,
        variant: cfg.get::<String>("variant")?.parse::<Variant>()?,
    };
    let net = Network::<f32>::new(net_cfg, 0)?;
    let rows = net.param_breakdown();
    let width = rows.iter().map(|r| r.module.len()).max().unwrap_or(6).max(6);
    writeln!(out, "{:<width$}  {:>12}", "module", "params")?;
    for r in &rows {
        writeln!(out, "{:<width$}  {:>12}", r.module, r.params)?;
    }
    let total = net.param_count();
    writeln!(out, "{:<width$}  {:>12}", "total", total)?;
    writeln!(out, "total_params={total}")?;
    writeln!(out, "total_millions={:.2}", total as f64 / 1e6)?;
    if net_cfg.base_width == 64 && net_cfg.variant == Variant::DeepPyramidPlus {
        writeln!(out, "reference_millions={:.2}", REFERENCE_PARAMS / 1e6)?;
        writeln!(
            out,
            "reference_gap_percent={:+.2}",
            100.0 * (total as f64 / REFERENCE_PARAMS - 1.0)
        )?;
    }
    Ok(())
}
