//! The `grapy` command line.
//!
//! Settings are resolved in order: built-in defaults, `GRAPY_SEED`, the
//! `--config` file, `--set KEY=VALUE` pairs, then dedicated flags.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 usage, 3 numerical failure
//! (non-finite loss, failed gradient check), 4 artifact mismatch
//! (checkpoint/taxonomy disagreement, failed sharing audit).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, ReportFormat, RunConfig};
use crate::data::{load_split_auto, make_benchmark, resolve_taxonomy, Dataset, DatasetSpec, Manifest, Split, MANIFEST_FILE};
use crate::error::Error;
use crate::labels::{argmax_channel, LabelMap};
use crate::metrics::evaluate;
use crate::model::{parse_manifest, pretrain_then_train, LogRecord, ParserModel};
use crate::mutual::{audit_sharing, train_mutual, MlModel, MlTrainConfig};
use crate::netpbm;
use crate::taxonomy::Taxonomy;
use crate::{gradcheck, Result as LibResult};

#[derive(Debug, Parser)]
#[command(name = "grapy", version, about = "Graph pyramid hierarchical parsing on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` settings file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Extra setting (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Random seed [default: $GRAPY_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub main_epochs: Option<usize>,
    /// Weight of the pyramid-branch loss
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Build pyramid masks from ground truth instead of predictions
    #[arg(long)]
    pub gt_masks: bool,
    /// Train the plain backbone baseline
    #[arg(long)]
    pub no_gpm: bool,
    /// Enabled pyramid levels, e.g. `3` or `1,2,3`
    #[arg(long)]
    pub levels: Option<String>,
    /// `average`, `max` or `both`
    #[arg(long)]
    pub pooling: Option<String>,
    /// Separate attention weights per reasoning round
    #[arg(long)]
    pub gcr_fresh_weights: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark datasets
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-dataset sizes, e.g. `A=200/50,B=600/100,C=400/100`
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a single-dataset model
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Dataset directory or manifest
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train on the first N training images only
        #[arg(long, value_name = "N")]
        overfit: Option<usize>,
    },
    /// Mutual learning across datasets
    TrainMl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Directory holding one subdirectory per dataset
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset names, e.g. `A,B,C`
        #[arg(long)]
        datasets: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fine-tune the joint model on this dataset afterwards
        #[arg(long)]
        finetune: Option<String>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        /// Sum one batch per dataset before each update
        #[arg(long)]
        accumulate: bool,
        /// Keep a separate backbone per dataset
        #[arg(long)]
        no_share_backbone: bool,
        /// Verify parameter sharing and gradient locality after training
        #[arg(long)]
        audit_sharing: bool,
    },
    /// Report mIoU and mean accuracy at every level for both branches
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or manifest
        #[arg(long)]
        data: Option<PathBuf>,
        /// `train` or `test`
        #[arg(long)]
        split: Option<String>,
        #[arg(long, value_name = "N")]
        eval_workers: Option<usize>,
        /// `table` or `kv`
        #[arg(long)]
        format: Option<String>,
        /// Leave background out of mean accuracy
        #[arg(long)]
        exclude_background: bool,
    },
    /// Write colour-coded predictions as PPM images
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run every finite-difference gradient suite
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] Error),
    #[error("{0}")]
    GradientCheck(String),
    #[error("{0}")]
    Audit(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::GradientCheck(_) => 3,
            CliError::Audit(_) => 4,
            CliError::Run(e) if e.is_numerical() => 3,
            CliError::Run(Error::Mismatch(_) | Error::Checkpoint(_)) => 4,
            CliError::Run(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// RGB colour of `label`: the PASCAL VOC colour map, background black.
pub fn palette(label: usize) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = label;
    for shift in (0..8).rev() {
        for (ch, value) in rgb.iter_mut().enumerate() {
            *value |= (((c >> ch) & 1) as u8) << shift;
        }
        c >>= 3;
        if c == 0 {
            break;
        }
    }
    rgb
}

/// Colour-coded rendering of a label map as P6 bytes.
pub fn colorize(labels: &LabelMap) -> Vec<u8> {
    let rgb: Vec<u8> = labels.values().iter().flat_map(|&l| palette(l)).collect();
    netpbm::encode_ppm_rgb(labels.height(), labels.width(), &rgb)
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var("GRAPY_SEED") {
        cfg.set("seed", &seed)?;
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    let pairs: [(&str, Option<String>); 7] = [
        ("lr", f.lr.map(|v| v.to_string())),
        ("momentum", f.momentum.map(|v| v.to_string())),
        ("batch_size", f.batch_size.map(|v| v.to_string())),
        ("pretrain_epochs", f.pretrain_epochs.map(|v| v.to_string())),
        ("main_epochs", f.main_epochs.map(|v| v.to_string())),
        ("lambda", f.lambda.map(|v| v.to_string())),
        ("levels", f.levels.clone()),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if let Some(p) = &f.pooling {
        cfg.set("pooling", p)?;
    }
    if f.gt_masks {
        cfg.gt_masks = true;
    }
    if f.no_gpm {
        cfg.gpm = false;
    }
    if f.gcr_fresh_weights {
        cfg.gcr_fresh_weights = true;
    }
    Ok(())
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn split_of(cfg: &RunConfig) -> Split {
    if cfg.split == "train" {
        Split::Train
    } else {
        Split::Test
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::GenData {
            common,
            out: dir,
            sizes,
            image_size,
        } => {
            let mut cfg = base_config(&common)?;
            override_path(&mut cfg.out, &dir);
            if let Some(s) = sizes {
                cfg.set("sizes", &s)?;
            }
            if let Some(s) = image_size {
                cfg.set("image_size", &s.to_string())?;
            }
            cmd_gen_data(&cfg, out)
        }
        Command::Train {
            common,
            flags,
            data,
            out: dir,
            overfit,
        } => {
            let mut cfg = base_config(&common)?;
            apply_train_flags(&mut cfg, &flags)?;
            override_path(&mut cfg.data, &data);
            override_path(&mut cfg.out, &dir);
            if let Some(n) = overfit {
                cfg.set("overfit", &n.to_string())?;
            }
            cmd_train(&cfg, out)
        }
        Command::TrainMl {
            common,
            flags,
            data,
            datasets,
            out: dir,
            finetune,
            finetune_epochs,
            accumulate,
            no_share_backbone,
            audit_sharing,
        } => {
            let mut cfg = base_config(&common)?;
            apply_train_flags(&mut cfg, &flags)?;
            override_path(&mut cfg.data, &data);
            override_path(&mut cfg.out, &dir);
            if let Some(d) = datasets {
                cfg.set("datasets", &d)?;
            }
            if let Some(f) = finetune {
                cfg.set("finetune", &f)?;
            }
            if let Some(e) = finetune_epochs {
                cfg.set("finetune_epochs", &e.to_string())?;
            }
            cfg.accumulate |= accumulate;
            cfg.audit_sharing |= audit_sharing;
            if no_share_backbone {
                cfg.share_backbone = false;
            }
            cmd_train_ml(&cfg, out)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            eval_workers,
            format,
            exclude_background,
        } => {
            let mut cfg = base_config(&common)?;
            override_path(&mut cfg.checkpoint, &checkpoint);
            override_path(&mut cfg.data, &data);
            if let Some(s) = split {
                cfg.set("split", &s)?;
            }
            if let Some(w) = eval_workers {
                cfg.set("eval_workers", &w.to_string())?;
            }
            if let Some(f) = format {
                cfg.set("format", &f)?;
            }
            cfg.exclude_background |= exclude_background;
            cmd_eval(&cfg, out)
        }
        Command::Predict {
            common,
            checkpoint,
            data,
            out: dir,
            split,
            limit,
        } => {
            let mut cfg = base_config(&common)?;
            override_path(&mut cfg.checkpoint, &checkpoint);
            override_path(&mut cfg.data, &data);
            override_path(&mut cfg.out, &dir);
            if let Some(s) = split {
                cfg.set("split", &s)?;
            }
            if let Some(l) = limit {
                cfg.set("limit", &l.to_string())?;
            }
            cmd_predict(&cfg, out)
        }
        Command::Gradcheck { common } => {
            let cfg = base_config(&common)?;
            cmd_gradcheck(&cfg, out)
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let dir = require(&cfg.out, "out")?;
    let specs = cfg
        .sizes
        .iter()
        .map(|(name, train, test)| {
            let taxonomy = Taxonomy::builtin(name)
                .map_err(|_| CliError::Usage(format!("`{name}` is not a built-in taxonomy (A, B or C)")))?;
            Ok(DatasetSpec {
                taxonomy,
                train: *train,
                test: *test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = cfg.scene_spec();
    scene.validate()?;
    fs::create_dir_all(dir)?;
    for path in make_benchmark(dir, &specs, &scene)? {
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

/// Writes log records as they arrive, keeping the first write error.
struct LogSink {
    file: BufWriter<fs::File>,
    error: Option<std::io::Error>,
}

impl LogSink {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: BufWriter::new(fs::File::create(path)?),
            error: None,
        })
    }

    fn record(&mut self, r: &LogRecord) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{}", r.to_line()) {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.file.flush()?;
        Ok(())
    }
}

fn report_training_failure(e: Error, out: &mut impl Write) -> CliError {
    if let Error::NonFiniteLoss { epoch, step, detail } = &e {
        let _ = writeln!(out, "diagnostics: non-finite loss at epoch {epoch} step {step} ({detail})");
        let _ = writeln!(out, "diagnostics: try a smaller --lr or --lambda");
    }
    CliError::Run(e)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let data = manifest_path(require(&cfg.data, "data")?);
    let dir = require(&cfg.out, "out")?;
    let mut train = load_split_auto(&data, Split::Train)?;
    if let Some(expected) = &cfg.taxonomy {
        if expected != train.taxonomy.name() {
            return Err(Error::Mismatch(format!(
                "config asks for taxonomy `{expected}`, data uses `{}`",
                train.taxonomy.name()
            ))
            .into());
        }
    }
    if let Some(n) = cfg.overfit {
        train = train.head(n);
    }
    if train.is_empty() {
        return Err(Error::Dataset("no training samples".into()).into());
    }
    fs::create_dir_all(dir)?;
    let mut model = ParserModel::new(cfg.model_config(), train.taxonomy.clone(), cfg.seed)?;
    let mut log = LogSink::create(&dir.join("train.log"))?;
    let result = pretrain_then_train(&mut model, &train.samples, &cfg.train_config(), |r| log.record(r));
    log.finish()?;
    result.map_err(|e| report_training_failure(e, out))?;

    let ck_path = dir.join("checkpoint.grpy");
    model.to_checkpoint().save(&ck_path).map_err(Error::from)?;
    writeln!(out, "checkpoint={}", ck_path.display())?;
    let eval = evaluate(&train, cfg.eval_workers, |img| model.predict(img))?;
    for line in eval.kv_lines().lines() {
        writeln!(out, "train.{line}")?;
    }
    Ok(())
}

fn dataset_manifest(root: &Path, name: &str) -> PathBuf {
    root.join(name).join(MANIFEST_FILE)
}

pub fn cmd_train_ml(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    if cfg.datasets.len() < 2 {
        return Err(CliError::Usage(
            "mutual learning needs at least two datasets (--datasets A,B,C)".into(),
        ));
    }
    let root = require(&cfg.data, "data")?;
    let dir = require(&cfg.out, "out")?;
    let finetune = match &cfg.finetune {
        None => None,
        Some(name) => Some(
            cfg.datasets
                .iter()
                .position(|d| d == name)
                .map(|i| i + 1)
                .ok_or_else(|| CliError::Usage(format!("--finetune {name} is not among --datasets")))?,
        ),
    };
    let datasets: Vec<Dataset> = cfg
        .datasets
        .iter()
        .map(|name| load_split_auto(dataset_manifest(root, name), Split::Train))
        .collect::<LibResult<_>>()?;
    let taxonomies = datasets.iter().map(|d| d.taxonomy.clone()).collect();
    let model = MlModel::new(cfg.model_config(), taxonomies, cfg.share_backbone, cfg.seed)?;
    let ml = MlTrainConfig {
        base: cfg.train_config(),
        steps_per_epoch: cfg.steps_per_epoch,
        accumulate: cfg.accumulate,
        finetune,
        finetune_epochs: cfg.finetune_epochs,
    };
    fs::create_dir_all(dir)?;
    let mut log = LogSink::create(&dir.join("train.log"))?;
    let result = train_mutual(model, &datasets, &ml, |r| log.record(r));
    log.finish()?;
    let outcome = result.map_err(|e| report_training_failure(e, out))?;

    let joint_path = dir.join("joint.grpy");
    outcome.joint.to_checkpoint().save(&joint_path).map_err(Error::from)?;
    writeln!(out, "checkpoint={}", joint_path.display())?;
    if let (Some(tuned), Some(name)) = (&outcome.finetuned, &cfg.finetune) {
        let path = dir.join(format!("finetuned-{name}.grpy"));
        tuned.to_checkpoint().save(&path).map_err(Error::from)?;
        writeln!(out, "checkpoint={}", path.display())?;
    }
    if cfg.audit_sharing {
        let checks = audit_sharing(&outcome.joint, &datasets, cfg.lr.max(1e-3))?;
        let mut failed = 0;
        for c in &checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(out, "audit\t{status}\t{}\t{}", c.name, c.detail)?;
            failed += usize::from(!c.passed);
        }
        if failed > 0 {
            return Err(CliError::Audit(format!("{failed} sharing audit check(s) failed")));
        }
    }
    Ok(())
}

/// Loads a checkpoint of either kind as a single-dataset model for
/// `taxonomy`.
pub fn load_model_for(ck_path: &Path, taxonomy: &Taxonomy, data_dir: Option<&Path>) -> LibResult<ParserModel> {
    let ck = Checkpoint::load(ck_path)?;
    let kind = parse_manifest(&ck.manifest).get("kind").cloned().unwrap_or_default();
    match kind.as_str() {
        "single" => ParserModel::from_checkpoint(&ck, taxonomy.clone()),
        "mutual" => {
            let names = MlModel::manifest_taxonomies(&ck)?;
            let d = names.iter().position(|n| n == taxonomy.name()).ok_or_else(|| {
                Error::Mismatch(format!(
                    "checkpoint branches are {names:?}; none is bound to `{}`",
                    taxonomy.name()
                ))
            })?;
            let taxonomies = names
                .iter()
                .map(|n| {
                    if n == taxonomy.name() {
                        return Ok(taxonomy.clone());
                    }
                    let sibling = data_dir.and_then(Path::parent).map(|p| p.join(n));
                    resolve_taxonomy(n, data_dir).or_else(|e| match &sibling {
                        Some(dir) => resolve_taxonomy(n, Some(dir)),
                        None => Err(e),
                    })
                })
                .collect::<LibResult<Vec<_>>>()?;
            MlModel::from_checkpoint(&ck, taxonomies)?.branch_model(d + 1)
        }
        other => Err(Error::Mismatch(format!("unknown checkpoint kind `{other}`"))),
    }
}

fn load_eval_inputs(cfg: &RunConfig) -> Result<(ParserModel, Dataset)> {
    let ck = require(&cfg.checkpoint, "checkpoint")?;
    let data = manifest_path(require(&cfg.data, "data")?);
    let manifest = Manifest::load(&data)?;
    let tax = resolve_taxonomy(&manifest.taxonomy, data.parent())?;
    let model = load_model_for(ck, &tax, data.parent())?;
    let ds = load_split_auto(&data, split_of(cfg))?;
    Ok((model, ds))
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let (model, ds) = load_eval_inputs(cfg)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!("the {} split is empty", cfg.split)).into());
    }
    let mut eval = evaluate(&ds, cfg.eval_workers, |img| model.predict(img))?;
    eval.exclude_background = cfg.exclude_background;
    match cfg.format {
        ReportFormat::Kv => write!(out, "{}", eval.kv_lines())?,
        ReportFormat::Table => {
            write!(out, "{}", eval.report(&ds.taxonomy))?;
            write!(out, "{}", eval.kv_lines())?;
        }
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let dir = require(&cfg.out, "out")?;
    let (model, ds) = load_eval_inputs(cfg)?;
    fs::create_dir_all(dir)?;
    let n = cfg.limit.unwrap_or(usize::MAX).min(ds.len());
    for (i, sample) in ds.samples.iter().take(n).enumerate() {
        let pred = model.predict(&sample.image)?;
        let labels = argmax_channel(pred.best());
        let path = dir.join(format!("{i:05}.ppm"));
        netpbm::write_file(&path, &colorize(&labels)).map_err(Error::from)?;
    }
    writeln!(out, "wrote {n} predictions to {}", dir.display())?;
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let mut failed = Vec::new();
    for (name, suite) in gradcheck::suites() {
        let r = suite(cfg.seed)?;
        let status = if r.passed() { "pass" } else { "FAIL" };
        writeln!(out, "{name:<20} max_rel_error={:.3e}  {status}", r.max_rel_error)?;
        if !r.passed() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradientCheck(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_fixed() {
        assert_eq!(palette(0), [0, 0, 0]);
        assert_eq!(palette(1), [128, 0, 0]);
        assert_eq!(palette(2), [0, 128, 0]);
        assert_eq!(palette(7), [128, 128, 128]);
        assert_eq!(palette(8), [64, 0, 0]);
        let mut seen: Vec<[u8; 3]> = (0..64).map(palette).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::Run(Error::Mismatch(String::new())).exit_code(), 4);
        let nan = Error::NonFiniteLoss {
            epoch: 0,
            step: 0,
            detail: String::new(),
        };
        assert_eq!(CliError::Run(nan).exit_code(), 3);
    }
}
