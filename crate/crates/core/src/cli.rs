//! Command-line orchestration: one run directory per experiment, one
//! subcommand per pipeline stage.
//!
//! Layout of a run directory:
//!
//! ```text
//! <run>/data/                      dataset manifest + payload
//! <run>/models/{std,adv}/          checkpoints, training and evaluation reports
//! <run>/adversarial/               adversarial set (manifest + payload)
//! <run>/{profile,ratios,detect,trace}/{std,adv}/
//! <run>/report/                    aggregated summary, CSV tables
//! <run>/<stage>/config.json        config echo and input hashes of that stage
//! <run>/hashes.txt                 sha256 of every artifact
//! <run>/run.log                    timestamps and wall clock (not reproducible)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{self, ProfileConfig, ProfileSet, RatioRecord, RocPoint};
use crate::attack::{self, AdversarialRecord, AdversarialSet, AttackConfig};
use crate::error::{Error, Result};
use crate::synthdata::{self, Dataset, DatasetConfig, LabeledImage};
use crate::taxonomy::CorrelationMatrix;
use crate::tensor::{OptimizerKind, Tensor};
use crate::tracing::{self, ImageRef, Removal, TraceConfig};
use crate::training::{self, TrainConfig};
use crate::util;
use crate::zoo::{Arch, Model};

/// Version of the CSV column layouts written by the stages and `report`.
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const WORKERS_ENV: &str = "ADVLENS_WORKERS";
pub const CONFIG_ECHO: &str = "config.json";
pub const HASHES_FILE: &str = "hashes.txt";
pub const LOG_FILE: &str = "run.log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Validation images attacked per class; `None` attacks all of them.
    pub per_class: Option<usize>,
    pub n_targets: usize,
    pub params: AttackConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            per_class: None,
            n_targets: 1,
            params: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub fgs_eps: Vec<f64>,
    pub top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fgs_eps: vec![1.0, 5.0],
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub floor: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self { floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    /// Clean validation images traced per class (adversarial records are
    /// taken from the same source images).
    pub per_class: usize,
    /// Replace removed channels by their mean training activation instead of zero.
    pub mean_removal: bool,
    pub params: TraceConfig,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            per_class: 4,
            mean_removal: false,
            params: TraceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub ratio_bin: f64,
    pub ratio_max: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            ratio_bin: 0.05,
            ratio_max: 2.5,
        }
    }
}

/// Every knob of a run. Section seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub archs: Vec<Arch>,
    /// Bandwidth of the class-correlation kernel.
    pub sigma: f64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub train_adv: TrainConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub profile: ProfileConfig,
    pub detect: DetectSection,
    pub trace: TraceSection,
    pub report: ReportSection,
}

/// Fine-tuning defaults for `train-adv`. The inner FGS step is half a grey
/// level because the foreground of the shape images differs from the
/// background by only a few levels.
pub fn default_adversarial_training() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        eps: 0.5,
        optimizer: OptimizerKind::sgd(0.002, 0.9, 5e-5),
        schedule: None,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            archs: Arch::ALL.to_vec(),
            sigma: 1.0,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            train_adv: default_adversarial_training(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            profile: ProfileConfig::default(),
            detect: DetectSection::default(),
            trace: TraceSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl RunConfig {
    /// Tiny end-to-end configuration: 4 classes, 8 images per class, 2 epochs.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.num_classes = 4;
        cfg.dataset.train_per_class = 8;
        cfg.dataset.val_per_class = 4;
        cfg.train.epochs = 2;
        cfg.train.schedule = None;
        cfg.train.batch_size = 8;
        cfg.train_adv.epochs = 2;
        cfg.train_adv.batch_size = 8;
        cfg.train_adv.steps = 2;
        cfg.attack.params.lambda = 0.01;
        cfg.trace.per_class = 1;
        cfg.trace.params.stride = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(Error::InvalidConfig("archs must name at least one architecture".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.train_adv.validate()?;
        self.attack.params.validate()?;
        if self.attack.n_targets == 0 || self.attack.n_targets >= self.dataset.num_classes {
            return Err(Error::InvalidConfig(format!(
                "attack.n_targets must be in 1..{}, got {}",
                self.dataset.num_classes, self.attack.n_targets
            )));
        }
        if self.attack.per_class == Some(0) {
            return Err(Error::InvalidConfig("attack.per_class must be >= 1".into()));
        }
        if self.eval.fgs_eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidConfig("eval.fgs_eps must be finite and >= 0".into()));
        }
        if self.eval.top_k == 0 {
            return Err(Error::InvalidConfig("eval.top_k must be >= 1".into()));
        }
        if !(self.profile.fraction > 0.0 && self.profile.fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("profile.fraction must be in (0, 1], got {}", self.profile.fraction)));
        }
        if !(self.profile.bin_width > 0.0) {
            return Err(Error::InvalidConfig("profile.bin_width must be positive".into()));
        }
        if !(self.detect.floor > 0.0) {
            return Err(Error::InvalidConfig("detect.floor must be positive".into()));
        }
        if self.trace.per_class == 0 {
            return Err(Error::InvalidConfig("trace.per_class must be >= 1".into()));
        }
        if self.trace.params.patch == 0 || self.trace.params.stride == 0 {
            return Err(Error::InvalidConfig("trace.params.patch and stride must be >= 1".into()));
        }
        if self.trace.params.patch > self.dataset.image_size {
            return Err(Error::InvalidConfig("trace.params.patch exceeds the image size".into()));
        }
        if !(self.report.ratio_bin > 0.0 && self.report.ratio_max > self.report.ratio_bin) {
            return Err(Error::InvalidConfig("report.ratio_bin must be positive and below ratio_max".into()));
        }
        Ok(())
    }

    /// Push the master seed into every section that consumes randomness.
    fn derive_seeds(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = util::derive_seed(self.seed, &[0x10]);
        self.train_adv.seed = util::derive_seed(self.seed, &[0x11]);
    }
}

/// Parse `key = value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Set a dotted key inside the JSON form of the config. The value is read as
/// JSON when it parses, as a bare string otherwise.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() > 1 && parts.last() == Some(&"seed") {
        return Err(Error::InvalidConfig(format!(
            "`{key}` is derived from the master seed; set `seed` instead"
        )));
    }
    let mut node = root;
    for (depth, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "`{}` is not a section; give its whole value as JSON",
                parts[..depth].join(".")
            ))
        })?;
        if !obj.contains_key(*part) {
            let known: Vec<&str> = obj.keys().map(String::as_str).collect();
            return Err(Error::InvalidConfig(format!("unknown key `{key}` (known here: {})", known.join(", "))));
        }
        node = obj.get_mut(*part).expect("checked");
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Merge defaults, config-file pairs and flag pairs (later wins), then validate.
pub fn resolve_config(pairs: &[(String, String)]) -> Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    for (k, v) in pairs {
        apply_override(&mut root, k, v)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.derive_seeds();
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Standard-trained checkpoints.
    Std,
    /// Adversarially fine-tuned checkpoints.
    Adv,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Std => "std",
            Variant::Adv => "adv",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "advlens", version, about = "Adversarial-example analysis pipeline on synthetic shapes")]
pub struct Cli {
    /// Run directory; every output of every stage lives inside it.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    /// Key-value config file (`dataset.num_classes = 4`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the attack stage.
    #[arg(long, global = true, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        val_per_class: Option<usize>,
    },
    /// Train every architecture from scratch.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune the standard checkpoints with the adversarial objective.
    TrainAdv {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the adversarial set against the standard ensemble.
    Attack {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        n_targets: Option<usize>,
    },
    /// Neuron profiles (LC, CS1, CS2).
    Profile {
        #[arg(long, value_enum, default_value = "std")]
        variant: Variant,
    },
    /// Representation ratios r1/r2 over the adversarial set.
    Ratios {
        #[arg(long, value_enum, default_value = "std")]
        variant: Variant,
    },
    /// Fit the Gaussian detector and score clean vs adversarial images.
    Detect {
        #[arg(long, value_enum, default_value = "std")]
        variant: Variant,
    },
    /// Trace predictions back to influential channels.
    Trace {
        #[arg(long, value_enum, default_value = "std")]
        variant: Variant,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Aggregate every stage output into one summary.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::TrainAdv { .. } => "train-adv",
            Command::Attack { .. } => "attack",
            Command::Profile { .. } => "profile",
            Command::Ratios { .. } => "ratios",
            Command::Detect { .. } => "detect",
            Command::Trace { .. } => "trace",
            Command::Report => "report",
        }
    }

    /// Subcommand flags as config pairs.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<usize>| {
            if let Some(v) = v {
                out.push((k.to_string(), v.to_string()));
            }
        };
        match self {
            Command::GenData { classes, train_per_class, val_per_class } => {
                push("dataset.num_classes", *classes);
                push("dataset.train_per_class", *train_per_class);
                push("dataset.val_per_class", *val_per_class);
            }
            Command::Train { epochs } => push("train.epochs", *epochs),
            Command::TrainAdv { epochs } => push("train_adv.epochs", *epochs),
            Command::Attack { per_class, n_targets } => {
                push("attack.per_class", *per_class);
                push("attack.n_targets", *n_targets);
            }
            Command::Trace { per_class, .. } => push("trace.per_class", *per_class),
            _ => {}
        }
        out
    }
}

/// Resolved settings of one invocation.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub workers: usize,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, cfg: RunConfig, workers: usize) -> Self {
        Self {
            dir: dir.into(),
            cfg,
            workers: workers.max(1),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    fn model_path(&self, variant: Variant, arch: Arch) -> PathBuf {
        self.path(&format!("models/{}/{arch}.ckpt", variant.as_str()))
    }

    fn adv_dir(&self) -> PathBuf {
        self.path("adversarial")
    }

    fn load_dataset(&self) -> Result<Dataset> {
        Dataset::load(&self.data_dir()).map_err(|e| hint(e, "gen-data"))
    }

    fn load_models(&self, variant: Variant) -> Result<Vec<Model>> {
        let stage = match variant {
            Variant::Std => "train",
            Variant::Adv => "train-adv",
        };
        self.cfg
            .archs
            .iter()
            .map(|a| Ok(Model::load_checkpoint(&self.model_path(variant, *a)).map_err(|e| hint(e, stage))?.0))
            .collect()
    }

    fn load_adversarial(&self, dataset: &Dataset) -> Result<AdversarialSet> {
        let set = AdversarialSet::load(&self.adv_dir()).map_err(|e| hint(e, "attack"))?;
        if set.manifest.dataset_hash != dataset.content_hash() {
            return Err(Error::InvalidConfig(format!(
                "adversarial set in {} was built on a different dataset; rerun `advlens attack`",
                self.adv_dir().display()
            )));
        }
        Ok(set)
    }

    fn correlation(&self, dataset: &Dataset) -> Result<CorrelationMatrix> {
        CorrelationMatrix::build(&dataset.taxonomy, self.cfg.sigma)
    }

    /// Write the stage's config echo with the hashes of the files it read.
    fn echo(&self, stage_dir: &str, stage: &str, inputs: &[PathBuf]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            let rel = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            hashes.insert(rel, util::sha256_hex(&[&util::read_file(p)?]));
        }
        let echo = serde_json::json!({
            "stage": stage,
            "csv_schema_version": CSV_SCHEMA_VERSION,
            "config": self.cfg,
            "inputs": hashes,
        });
        util::write_json(&self.path(&format!("{stage_dir}/{CONFIG_ECHO}")), &echo)
    }
}

fn hint(e: Error, stage: &str) -> Error {
    match e {
        Error::MissingArtifact(what) => Error::MissingArtifact(format!("{what} (run `advlens {stage}` first)")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgsAccuracy {
    pub eps: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: Arch,
    pub variant: Variant,
    pub fingerprint: String,
    pub clean: training::Accuracy,
    pub fgs: Vec<FgsAccuracy>,
}

fn evaluate_model(run: &Run, model: &Model, variant: Variant, val: &[&LabeledImage]) -> Result<EvalReport> {
    let k = run.cfg.eval.top_k.min(model.num_classes());
    let fgs = run
        .cfg
        .eval
        .fgs_eps
        .iter()
        .map(|&eps| Ok(FgsAccuracy { eps, top1: training::evaluate_fgs(model, val, eps)? }))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        arch: model.arch(),
        variant,
        fingerprint: model.fingerprint(),
        clean: training::evaluate(model, val, k)?,
        fgs,
    })
}

pub fn gen_data(run: &Run) -> Result<()> {
    let dataset = synthdata::generate(&run.cfg.dataset)?;
    dataset.save(&run.data_dir())?;
    run.echo("data", "gen-data", &[])
}

fn train_variant(run: &Run, variant: Variant) -> Result<()> {
    let dataset = run.load_dataset()?;
    let val: Vec<&LabeledImage> = dataset.validation.iter().collect();
    let mut inputs = vec![run.data_dir().join(synthdata::MANIFEST_FILE)];
    for (i, arch) in run.cfg.archs.iter().enumerate() {
        let (model, report, init_from) = match variant {
            Variant::Std => {
                let cfg = TrainConfig {
                    seed: util::derive_seed(run.cfg.train.seed, &[i as u64]),
                    ..run.cfg.train.clone()
                };
                let shape = dataset.config.image_shape();
                let mut model = Model::build_for(*arch, shape, dataset.num_classes(), cfg.seed)?;
                let report = training::train_standard(&mut model, &dataset, &cfg)?;
                (model, report, None)
            }
            Variant::Adv => {
                let src = run.model_path(Variant::Std, *arch);
                let (mut model, _) = Model::load_checkpoint(&src).map_err(|e| hint(e, "train"))?;
                inputs.push(src);
                let init = model.fingerprint();
                let cfg = TrainConfig {
                    seed: util::derive_seed(run.cfg.train_adv.seed, &[i as u64]),
                    ..run.cfg.train_adv.clone()
                };
                let report = training::train_adversarial(&mut model, &dataset, &cfg)?;
                (model, report, Some(init))
            }
        };
        let mut meta = report.meta();
        meta.init_from = init_from;
        let ckpt = run.model_path(variant, *arch);
        model.save_checkpoint(&ckpt, &meta)?;
        util::write_json(&ckpt.with_extension("train.json"), &report)?;
        util::write_json(&ckpt.with_extension("eval.json"), &evaluate_model(run, &model, variant, &val)?)?;
        log_line(run, &format!("trained {} {arch} in {:.1}s", variant.as_str(), report.wall_clock_secs));
    }
    run.echo(&format!("models/{}", variant.as_str()), if variant == Variant::Std { "train" } else { "train-adv" }, &inputs)
}

pub fn train(run: &Run) -> Result<()> {
    train_variant(run, Variant::Std)
}

pub fn train_adv(run: &Run) -> Result<()> {
    train_variant(run, Variant::Adv)
}

fn attacked_items<'a>(dataset: &'a Dataset, per_class: Option<usize>) -> Vec<&'a LabeledImage> {
    dataset
        .validation
        .iter()
        .filter(|r| per_class.map_or(true, |n| r.sample_id < n))
        .collect()
}

pub fn attack_stage(run: &Run) -> Result<()> {
    let dataset = run.load_dataset()?;
    let models = run.load_models(Variant::Std)?;
    let refs: Vec<&Model> = models.iter().collect();
    let items = attacked_items(&dataset, run.cfg.attack.per_class);
    let set = attack::build_adversarial_set_with(
        &dataset,
        &items,
        &refs,
        run.cfg.attack.n_targets,
        &run.cfg.attack.params,
        run.workers,
    )?;
    set.save(&run.adv_dir())?;
    let mut inputs = vec![run.data_dir().join(synthdata::MANIFEST_FILE)];
    inputs.extend(run.cfg.archs.iter().map(|a| run.model_path(Variant::Std, *a)));
    run.echo("adversarial", "attack", &inputs)
}

/// Inputs shared by the analysis stages.
struct AnalysisInputs {
    dataset: Dataset,
    models: Vec<Model>,
    set: AdversarialSet,
    c: CorrelationMatrix,
    paths: Vec<PathBuf>,
}

fn analysis_inputs(run: &Run, variant: Variant) -> Result<AnalysisInputs> {
    let dataset = run.load_dataset()?;
    let set = run.load_adversarial(&dataset)?;
    let models = run.load_models(variant)?;
    let c = run.correlation(&dataset)?;
    let mut paths = vec![
        run.data_dir().join(synthdata::MANIFEST_FILE),
        run.adv_dir().join("manifest.json"),
    ];
    paths.extend(run.cfg.archs.iter().map(|a| run.model_path(variant, *a)));
    Ok(AnalysisInputs { dataset, models, set, c, paths })
}

#[derive(Debug, Clone, Serialize)]
struct NeuronRow<'a> {
    channel: usize,
    lc: f64,
    cs1: f64,
    cs2: f64,
    entropy_p: f64,
    top_class: usize,
    model: &'a str,
}

pub fn profile_stage(run: &Run, variant: Variant) -> Result<()> {
    let inp = analysis_inputs(run, variant)?;
    let val: Vec<&LabeledImage> = inp.dataset.validation.iter().collect();
    let adv: Vec<&AdversarialRecord> = inp.set.successful().collect();
    if adv.is_empty() {
        return Err(Error::Empty("no successful adversarial records to profile".into()));
    }
    let dir = format!("profile/{}", variant.as_str());
    for model in &inp.models {
        let ps = analysis::profile_neurons(model, &val, &adv, &run.cfg.profile, &inp.c)?;
        let arch = model.arch();
        util::write_json(&run.path(&format!("{dir}/{arch}.json")), &ps)?;
        let name = arch.as_str();
        util::write_csv(
            &run.path(&format!("{dir}/{arch}.neurons.csv")),
            ps.profiles.iter().map(|p| NeuronRow {
                channel: p.channel,
                lc: p.lc,
                cs1: p.cs1,
                cs2: p.cs2,
                entropy_p: p.entropy_p,
                top_class: attack::argmax(p.p.probs()),
                model: name,
            }),
        )?;
    }
    run.echo(&dir, "profile", &inp.paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub arch: Arch,
    pub variant: Variant,
    pub records: usize,
    pub errors: usize,
    pub mean_r1: f64,
    pub mean_r2: f64,
    /// Accuracy (true label) on the successful adversarial records.
    pub adversarial_top1: f64,
}

pub fn ratios_stage(run: &Run, variant: Variant) -> Result<()> {
    let inp = analysis_inputs(run, variant)?;
    let val: Vec<&LabeledImage> = inp.dataset.validation.iter().collect();
    let adv: Vec<&AdversarialRecord> = inp.set.successful().collect();
    if adv.is_empty() {
        return Err(Error::Empty("no successful adversarial records".into()));
    }
    let dir = format!("ratios/{}", variant.as_str());
    for model in &inp.models {
        let table = analysis::ratio_table(model, &adv, &val)?;
        let arch = model.arch();
        util::write_csv(&run.path(&format!("{dir}/{arch}.csv")), table.records.iter())?;
        let summary = RatioSummary {
            arch,
            variant,
            records: table.records.len(),
            errors: table.errors.len(),
            mean_r1: table.mean_r1,
            mean_r2: table.mean_r2,
            adversarial_top1: training::evaluate_records(model, &adv, 1)?.top1,
        };
        util::write_json(&run.path(&format!("{dir}/{arch}.summary.json")), &summary)?;
    }
    run.echo(&dir, "ratios", &inp.paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub arch: Arch,
    pub variant: Variant,
    pub clean: usize,
    pub adversarial: usize,
    pub mean_clean_score: f64,
    pub mean_adversarial_score: f64,
    pub auc: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn detect_stage(run: &Run, variant: Variant) -> Result<()> {
    let inp = analysis_inputs(run, variant)?;
    let train: Vec<&LabeledImage> = inp.dataset.train.iter().collect();
    let clean: Vec<&Tensor> = inp.dataset.validation.iter().map(|r| &r.image).collect();
    let adv: Vec<&Tensor> = inp.set.successful().map(|r| &r.image).collect();
    let dir = format!("detect/{}", variant.as_str());
    for model in &inp.models {
        let det = analysis::fit_detector(model, &train, run.cfg.detect.floor)?;
        let arch = model.arch();
        det.save(&run.path(&format!("{dir}/{arch}.detector")))?;
        let cs = analysis::detector_scores(&det, model, &clean)?;
        let advs = analysis::detector_scores(&det, model, &adv)?;
        let roc = analysis::roc_auc(&cs, &advs)?;
        util::write_csv(&run.path(&format!("{dir}/{arch}.roc.csv")), roc.points.iter())?;
        let summary = DetectSummary {
            arch,
            variant,
            clean: cs.len(),
            adversarial: advs.len(),
            mean_clean_score: mean(&cs),
            mean_adversarial_score: mean(&advs),
            auc: roc.auc,
        };
        util::write_json(&run.path(&format!("{dir}/{arch}.summary.json")), &summary)?;
    }
    run.echo(&dir, "detect", &inp.paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub arch: Arch,
    pub variant: Variant,
    pub tau_sim: f64,
    pub clean: usize,
    pub adversarial: usize,
    pub clean_flagged: usize,
    pub adversarial_flagged: usize,
    pub clean_flag_rate: f64,
    pub adversarial_flag_rate: f64,
}

pub fn trace_stage(run: &Run, variant: Variant) -> Result<()> {
    let inp = analysis_inputs(run, variant)?;
    let dir = format!("trace/{}", variant.as_str());
    let profile_dir = format!("profile/{}", variant.as_str());
    let fill = inp.dataset.mean_pixel();
    let clean: Vec<&LabeledImage> = inp
        .dataset
        .validation
        .iter()
        .filter(|r| r.sample_id < run.cfg.trace.per_class)
        .collect();
    let adv: Vec<&AdversarialRecord> = inp
        .set
        .successful()
        .filter(|r| r.sample_id < run.cfg.trace.per_class)
        .collect();
    let train_imgs: Vec<&Tensor> = inp.dataset.train.iter().map(|r| &r.image).collect();
    let mut paths = inp.paths.clone();
    for model in &inp.models {
        let arch = model.arch();
        let ppath = run.path(&format!("{profile_dir}/{arch}.json"));
        let profiles: ProfileSet = util::read_json(&ppath).map_err(|e| hint(e, &format!("profile --variant {}", variant.as_str())))?;
        paths.push(ppath);
        let mut tcfg = run.cfg.trace.params.clone();
        if run.cfg.trace.mean_removal {
            tcfg.removal = Removal::Constant(tracing::channel_means(model, &train_imgs)?);
        }
        let mut flagged = [0usize; 2];
        let jobs = clean
            .iter()
            .map(|r| (&r.image, ImageRef { split: r.split, class: r.label, sample_id: r.sample_id, target: None }))
            .chain(adv.iter().map(|r| {
                (&r.image, ImageRef { split: r.split, class: r.class, sample_id: r.sample_id, target: Some(r.target) })
            }));
        for (x, image) in jobs {
            let side = usize::from(image.target.is_some());
            let stem = match image.target {
                None => format!("clean-c{}-s{}", image.class, image.sample_id),
                Some(t) => format!("adv-c{}-s{}-t{t}", image.class, image.sample_id),
            };
            let report = tracing::trace(model, x, image, &profiles.profiles, &inp.c, fill, &tcfg)?;
            flagged[side] += usize::from(!report.consistency.consistent);
            for s in &report.selected {
                if let Some(map) = &s.map {
                    util::write_file(&run.path(&format!("{dir}/{arch}/{stem}-ch{}.pgm", s.channel)), &map.to_pgm(4))?;
                }
            }
            util::write_json(&run.path(&format!("{dir}/{arch}/{stem}.json")), &report)?;
        }
        let rate = |f: usize, n: usize| if n == 0 { 0.0 } else { f as f64 / n as f64 };
        let summary = TraceSummary {
            arch,
            variant,
            tau_sim: tcfg.tau_sim,
            clean: clean.len(),
            adversarial: adv.len(),
            clean_flagged: flagged[0],
            adversarial_flagged: flagged[1],
            clean_flag_rate: rate(flagged[0], clean.len()),
            adversarial_flag_rate: rate(flagged[1], adv.len()),
        };
        util::write_json(&run.path(&format!("{dir}/{arch}.summary.json")), &summary)?;
    }
    run.echo(&dir, "trace", &paths)
}

#[derive(Debug, Clone, Serialize)]
struct BinRow {
    variant: Variant,
    arch: Arch,
    lc_lo: f64,
    lc_hi: f64,
    count: usize,
    mean_cs1: f64,
    mean_cs2: f64,
}

#[derive(Debug, Clone, Serialize)]
struct HistRow {
    variant: Variant,
    arch: Arch,
    ratio: &'static str,
    lo: f64,
    hi: f64,
    count: usize,
}

#[derive(Debug, Clone, Serialize)]
struct RocRow {
    variant: Variant,
    arch: Arch,
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelSummary {
    pub clean_top1: Option<f64>,
    pub fgs: Vec<FgsAccuracy>,
    pub mean_lc: Option<f64>,
    pub mean_cs1: Option<f64>,
    pub mean_cs2: Option<f64>,
    pub corr_lc_cs1: Option<f64>,
    pub corr_lc_cs2: Option<f64>,
    pub mean_r1: Option<f64>,
    pub mean_r2: Option<f64>,
    pub adversarial_top1: Option<f64>,
    pub auc: Option<f64>,
    pub clean_flag_rate: Option<f64>,
    pub adversarial_flag_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub csv_schema_version: u32,
    pub seed: u64,
    pub dataset_hash: Option<String>,
    pub attack: Option<AttackTotals>,
    /// `variant -> arch -> summary`.
    pub models: BTreeMap<String, BTreeMap<String, ModelSummary>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackTotals {
    pub attempted: usize,
    pub success_rate: f64,
    pub mean_l2_ratio: f64,
    pub mean_iterations: f64,
}

fn read_opt<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        util::read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn histogram(values: impl Iterator<Item = f64>, bin: f64, max: f64) -> Vec<(f64, f64, usize)> {
    let n = (max / bin).ceil() as usize;
    let mut counts = vec![0usize; n + 1];
    for v in values {
        let i = if v >= max { n } else { ((v / bin).floor().max(0.0) as usize).min(n - 1) };
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i == n {
                (max, f64::MAX, c)
            } else {
                (i as f64 * bin, (i + 1) as f64 * bin, c)
            }
        })
        .collect()
}

/// Aggregate whatever stage outputs exist into `report/`.
pub fn report_stage(run: &Run) -> Result<RunSummary> {
    let dataset_hash = read_opt::<synthdata::DatasetManifest>(&run.data_dir().join(synthdata::MANIFEST_FILE))?
        .map(|m| m.content_hash);
    let attack = read_opt::<attack::AdversarialManifest>(&run.adv_dir().join("manifest.json"))?.map(|m| AttackTotals {
        attempted: m.attempted,
        success_rate: m.success_rate,
        mean_l2_ratio: if m.mean_clean_norm > 0.0 { m.mean_l2 / m.mean_clean_norm } else { 0.0 },
        mean_iterations: m.mean_iterations,
    });
    let mut models = BTreeMap::new();
    let (mut bins, mut hist, mut roc_rows) = (Vec::new(), Vec::new(), Vec::new());
    let mut inputs = Vec::new();
    for variant in [Variant::Std, Variant::Adv] {
        let v = variant.as_str();
        let mut per_arch = BTreeMap::new();
        for &arch in &run.cfg.archs {
            let mut s = ModelSummary::default();
            let eval_path = run.model_path(variant, arch).with_extension("eval.json");
            if let Some(e) = read_opt::<EvalReport>(&eval_path)? {
                s.clean_top1 = Some(e.clean.top1);
                s.fgs = e.fgs;
                inputs.push(eval_path);
            }
            let ppath = run.path(&format!("profile/{v}/{arch}.json"));
            if let Some(p) = read_opt::<ProfileSet>(&ppath)? {
                let sm = &p.summary;
                s.mean_lc = Some(sm.mean_lc);
                s.mean_cs1 = Some(sm.mean_cs1);
                s.mean_cs2 = Some(sm.mean_cs2);
                s.corr_lc_cs1 = sm.corr_lc_cs1;
                s.corr_lc_cs2 = sm.corr_lc_cs2;
                bins.extend(sm.bins.iter().map(|b| BinRow {
                    variant,
                    arch,
                    lc_lo: b.lo,
                    lc_hi: b.hi,
                    count: b.count,
                    mean_cs1: b.mean_cs1,
                    mean_cs2: b.mean_cs2,
                }));
                inputs.push(ppath);
            }
            let rpath = run.path(&format!("ratios/{v}/{arch}.summary.json"));
            if let Some(r) = read_opt::<RatioSummary>(&rpath)? {
                s.mean_r1 = Some(r.mean_r1);
                s.mean_r2 = Some(r.mean_r2);
                s.adversarial_top1 = Some(r.adversarial_top1);
                let csv_path = run.path(&format!("ratios/{v}/{arch}.csv"));
                let mut reader = csv::Reader::from_path(&csv_path)?;
                let rows: Vec<RatioRecord> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
                for (name, vals) in [("r1", rows.iter().map(|r| r.r1).collect::<Vec<_>>()), ("r2", rows.iter().map(|r| r.r2).collect())] {
                    for (lo, hi, count) in histogram(vals.into_iter(), run.cfg.report.ratio_bin, run.cfg.report.ratio_max) {
                        hist.push(HistRow { variant, arch, ratio: name, lo, hi, count });
                    }
                }
                inputs.extend([rpath, csv_path]);
            }
            let dpath = run.path(&format!("detect/{v}/{arch}.summary.json"));
            if let Some(d) = read_opt::<DetectSummary>(&dpath)? {
                s.auc = Some(d.auc);
                let csv_path = run.path(&format!("detect/{v}/{arch}.roc.csv"));
                let mut reader = csv::Reader::from_path(&csv_path)?;
                for p in reader.deserialize::<RocPoint>() {
                    let p = p?;
                    roc_rows.push(RocRow { variant, arch, threshold: p.threshold, fpr: p.fpr, tpr: p.tpr });
                }
                inputs.extend([dpath, csv_path]);
            }
            let tpath = run.path(&format!("trace/{v}/{arch}.summary.json"));
            if let Some(t) = read_opt::<TraceSummary>(&tpath)? {
                s.clean_flag_rate = Some(t.clean_flag_rate);
                s.adversarial_flag_rate = Some(t.adversarial_flag_rate);
                inputs.push(tpath);
            }
            per_arch.insert(arch.to_string(), s);
        }
        models.insert(v.to_string(), per_arch);
    }
    let summary = RunSummary {
        csv_schema_version: CSV_SCHEMA_VERSION,
        seed: run.cfg.seed,
        dataset_hash,
        attack,
        models,
    };
    util::write_json(&run.path("report/summary.json"), &summary)?;
    util::write_csv(&run.path("report/lc_bins.csv"), bins)?;
    util::write_csv(&run.path("report/ratio_hist.csv"), hist)?;
    util::write_csv(&run.path("report/roc.csv"), roc_rows)?;
    util::write_file(&run.path("report/summary.md"), render_markdown(&summary).as_bytes())?;
    run.echo("report", "report", &inputs)?;
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn render_markdown(s: &RunSummary) -> String {
    let mut out = String::from("# Run summary\n\n");
    out.push_str(&format!("seed: {}\n\n", s.seed));
    if let Some(a) = &s.attack {
        out.push_str(&format!(
            "attack: {} attempts, success {:.3}, mean L2 / clean norm {:.4}, mean iterations {:.2}\n\n",
            a.attempted, a.success_rate, a.mean_l2_ratio, a.mean_iterations
        ));
    }
    out.push_str("| variant | arch | clean | fgs | LC | CS1 | CS2 | corr(LC,CS1) | corr(LC,CS2) | r1 | r2 | adv top1 | AUC | flag clean | flag adv |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for (variant, archs) in &s.models {
        for (arch, m) in archs {
            let fgs: Vec<String> = m.fgs.iter().map(|f| format!("{}:{:.3}", f.eps, f.top1)).collect();
            out.push_str(&format!(
                "| {variant} | {arch} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                fmt_opt(m.clean_top1),
                if fgs.is_empty() { "-".into() } else { fgs.join(" ") },
                fmt_opt(m.mean_lc),
                fmt_opt(m.mean_cs1),
                fmt_opt(m.mean_cs2),
                fmt_opt(m.corr_lc_cs1),
                fmt_opt(m.corr_lc_cs2),
                fmt_opt(m.mean_r1),
                fmt_opt(m.mean_r2),
                fmt_opt(m.adversarial_top1),
                fmt_opt(m.auc),
                fmt_opt(m.clean_flag_rate),
                fmt_opt(m.adversarial_flag_rate),
            ));
        }
    }
    out
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every artifact under the run directory, relative path to sha256,
/// excluding the log sidecar and the hash list itself.
pub fn artifact_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        if rel == LOG_FILE || rel == HASHES_FILE {
            continue;
        }
        out.insert(rel, util::sha256_hex(&[&util::read_file(&f)?]));
    }
    Ok(out)
}

fn write_hashes(dir: &Path) -> Result<()> {
    let text: String = artifact_hashes(dir)?.iter().map(|(k, v)| format!("{v}  {k}\n")).collect();
    util::write_file(&dir.join(HASHES_FILE), text.as_bytes())
}

fn log_line(run: &Run, msg: &str) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let path = run.path(LOG_FILE);
    if fs::create_dir_all(&run.dir).is_ok() {
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(&path) {
            let _ = writeln!(f, "{ts} {msg}");
        }
    }
}

/// Run one stage, then refresh `hashes.txt` and append to `run.log`.
pub fn execute(run: &Run, command: &Command) -> Result<()> {
    let started = Instant::now();
    log_line(run, &format!("start {} workers={}", command.name(), run.workers));
    let result = match command {
        Command::GenData { .. } => gen_data(run),
        Command::Train { .. } => train(run),
        Command::TrainAdv { .. } => train_adv(run),
        Command::Attack { .. } => attack_stage(run),
        Command::Profile { variant } => profile_stage(run, *variant),
        Command::Ratios { variant } => ratios_stage(run, *variant),
        Command::Detect { variant } => detect_stage(run, *variant),
        Command::Trace { variant, .. } => trace_stage(run, *variant),
        Command::Report => report_stage(run).map(|_| ()),
    };
    let secs = started.elapsed().as_secs_f64();
    match &result {
        Ok(()) => {
            write_hashes(&run.dir)?;
            log_line(run, &format!("done {} in {secs:.2}s", command.name()));
        }
        Err(e) => log_line(run, &format!("failed {} after {secs:.2}s: {e}", command.name())),
    }
    result
}

/// Every stage in order, for both checkpoint variants.
pub fn run_pipeline(run: &Run) -> Result<RunSummary> {
    let mut commands = vec![
        Command::GenData { classes: None, train_per_class: None, val_per_class: None },
        Command::Train { epochs: None },
        Command::TrainAdv { epochs: None },
        Command::Attack { per_class: None, n_targets: None },
    ];
    for variant in [Variant::Std, Variant::Adv] {
        commands.extend([
            Command::Profile { variant },
            Command::Ratios { variant },
            Command::Detect { variant },
            Command::Trace { variant, per_class: None },
        ]);
    }
    for c in &commands {
        execute(run, c)?;
    }
    execute(run, &Command::Report)?;
    util::read_json(&run.path("report/summary.json"))
}

fn config_pairs(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if let Some(path) = &cli.config {
        let text = String::from_utf8(util::read_file(path)?).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        pairs.extend(parse_config_text(&text)?);
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    pairs.extend(cli.command.overrides());
    Ok(pairs)
}

pub fn run_cli(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&config_pairs(&cli)?)?;
    let run = Run::new(cli.run_dir.clone(), cfg, cli.workers.unwrap_or(1));
    execute(&run, &cli.command)
}

/// Entry point of the `advlens` binary.
pub fn main_from_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
