//! Command-line front end.
//!
//! Every training and synthesis setting can come from a `key=value` config
//! file (`--config`) or a flag; flags win over the file and the file wins
//! over the profile defaults. Keys use the flag names with `-` or `_`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::concepts::{ConceptSpace, ConceptStatus, Target};
use crate::dataset::{read_dataset, write_dataset, Dataset, SynthConfig, SynthWorld, META_FILE};
use crate::error::{Error, Result};
use crate::evaluator::{affordance_map, random_matrix, rank_cells, recall_at_k, AffordanceTarget, MetricReport};
use crate::scorer::{read_checkpoint, write_checkpoint};
use crate::tracker::{offline_affordance_matrix, ConfidenceTracker};
use crate::trainer::{train, Profile, TrainConfig};

pub const THREADS_ENV: &str = "CONCEPT_FORGE_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const RUN_LOG_FILE: &str = "run.log";

#[derive(Debug, Parser)]
#[command(name = "concept-forge", version, about = "Verb-object concept discovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: train and heldout splits plus concepts.csv.
    Synth(SynthArgs),
    /// Train a scorer and write checkpoint, matrix and history files.
    Train(TrainArgs),
    /// List the top-K non-Known cells of a matrix.
    Discover(DiscoverArgs),
    /// Unknown/Known AP and recall of a matrix.
    Eval(EvalArgs),
    /// Object affordance mAP of a checkpoint on a heldout split.
    Affordance(AffordanceArgs),
    /// Write a baseline matrix.
    Baseline(BaselineArgs),
    /// Synthesize, train with and without self-training, and compare.
    Repro(ReproArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_verbs: Option<usize>,
    #[arg(long)]
    pub n_objects: Option<usize>,
    #[arg(long)]
    pub n_groups: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_o: Option<usize>,
    #[arg(long)]
    pub instances_per_concept: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub known_fraction: Option<f64>,
    #[arg(long)]
    pub object_offset_scale: Option<f64>,
    /// Heldout instances per object.
    #[arg(long)]
    pub heldout_per_object: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: SynthFlags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Hyper-parameter profile: hico or vcoco.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Train without the self-training loss.
    #[arg(long)]
    pub no_self_training: bool,
    /// Take pseudo labels from this matrix file.
    #[arg(long)]
    pub frozen_matrix: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Use raw confidences as pseudo labels.
    #[arg(long)]
    pub no_pseudo_normalization: bool,
    #[arg(long)]
    pub verb_aux_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory, or a synth output directory holding `train/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    All,
    Known,
    Unknown,
}

impl From<TargetArg> for AffordanceTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::All => AffordanceTarget::All,
            TargetArg::Known => AffordanceTarget::Known,
            TargetArg::Unknown => AffordanceTarget::Unknown,
        }
    }
}

#[derive(Debug, Args)]
pub struct AffordanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub heldout: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub target: TargetArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Random,
    OfflineAffordance,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    /// Dataset directory; fixes the grid and, for offline-affordance, the
    /// instances.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds 0..n are run.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

/// Merged `key=value` settings with canonical (underscore) keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, format!("expected key=value, got {line:?}")))?;
            map.insert(canonical(k), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(canonical(key), value.to_string());
    }

    fn set_opt<T: ToString>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.set(key, v.to_string());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn overlay_synth(&mut self, f: &SynthFlags) {
        self.set_opt("seed", &f.seed);
        self.set_opt("n_verbs", &f.n_verbs);
        self.set_opt("n_objects", &f.n_objects);
        self.set_opt("n_groups", &f.n_groups);
        self.set_opt("d_v", &f.d_v);
        self.set_opt("d_o", &f.d_o);
        self.set_opt("instances_per_concept", &f.instances_per_concept);
        self.set_opt("noise_sigma", &f.noise_sigma);
        self.set_opt("known_fraction", &f.known_fraction);
        self.set_opt("object_offset_scale", &f.object_offset_scale);
        self.set_opt("heldout_per_object", &f.heldout_per_object);
    }

    fn overlay_train(&mut self, f: &TrainFlags) {
        self.set_opt("profile", &f.profile);
        self.set_opt("iterations", &f.iterations);
        self.set_opt("seed", &f.seed);
        self.set_opt("batch_size", &f.batch_size);
        self.set_opt("lambda1", &f.lambda1);
        self.set_opt("lambda2", &f.lambda2);
        self.set_opt("lambda3", &f.lambda3);
        self.set_opt("temperature", &f.temperature);
        if f.no_self_training {
            self.set("self_training", false);
        }
        self.set_opt("frozen_matrix", &f.frozen_matrix.as_ref().map(|p| p.display().to_string()));
        self.set_opt("eval_every", &f.eval_every);
        self.set_opt("hidden", &f.hidden);
        self.set_opt("learning_rate", &f.learning_rate);
        self.set_opt("momentum", &f.momentum);
        if f.no_pseudo_normalization {
            self.set("pseudo_normalization", false);
        }
        self.set_opt("verb_aux_weight", &f.verb_aux_weight);
    }
}

fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::InvalidConfig(format!("invalid value {raw:?} for {key}")))
}

const SYNTH_KEYS: &[&str] = &[
    "seed",
    "n_verbs",
    "n_objects",
    "n_groups",
    "d_v",
    "d_o",
    "instances_per_concept",
    "noise_sigma",
    "known_fraction",
    "object_offset_scale",
    "heldout_per_object",
];

const TRAIN_KEYS: &[&str] = &[
    "profile",
    "seed",
    "iterations",
    "batch_size",
    "lambda1",
    "lambda2",
    "lambda3",
    "temperature",
    "self_training",
    "frozen_matrix",
    "eval_every",
    "hidden",
    "learning_rate",
    "momentum",
    "pseudo_normalization",
    "verb_aux_weight",
];

pub const DEFAULT_HELDOUT_PER_OBJECT: usize = 10;

fn reject_unknown(settings: &Settings, allowed: &[&[&str]]) -> Result<()> {
    for key in settings.0.keys() {
        if !allowed.iter().any(|set| set.contains(&key.as_str())) {
            return Err(Error::InvalidConfig(format!("unknown setting {key:?}")));
        }
    }
    Ok(())
}

/// Synthesis settings plus the heldout size.
pub fn synth_config(settings: &Settings) -> Result<(SynthConfig, usize)> {
    let mut c = SynthConfig::default();
    let mut heldout = DEFAULT_HELDOUT_PER_OBJECT;
    for (k, v) in &settings.0 {
        match k.as_str() {
            "seed" => c.seed = value(k, v)?,
            "n_verbs" => c.n_verbs = value(k, v)?,
            "n_objects" => c.n_objects = value(k, v)?,
            "n_groups" => c.n_groups = value(k, v)?,
            "d_v" => c.d_v = value(k, v)?,
            "d_o" => c.d_o = value(k, v)?,
            "instances_per_concept" => c.instances_per_known_concept = value(k, v)?,
            "noise_sigma" => c.noise_sigma = value(k, v)?,
            "known_fraction" => c.known_fraction = value(k, v)?,
            "object_offset_scale" => c.object_offset_scale = value(k, v)?,
            "heldout_per_object" => heldout = value(k, v)?,
            _ => {}
        }
    }
    c.validate()?;
    Ok((c, heldout))
}

/// Training settings on top of the selected profile.
pub fn train_config(settings: &Settings) -> Result<(Profile, TrainConfig)> {
    let profile_name = settings.get("profile").unwrap_or("hico");
    let profile = Profile::parse(profile_name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown profile {profile_name:?} (expected hico or vcoco)")))?;
    let mut c = TrainConfig::profile(profile);
    for (k, v) in &settings.0 {
        match k.as_str() {
            "seed" => c.seed = value(k, v)?,
            "iterations" => c.iterations = value(k, v)?,
            "batch_size" => c.batch_size = value(k, v)?,
            "lambda1" => c.lambda1 = value(k, v)?,
            "lambda2" => c.lambda2 = value(k, v)?,
            "lambda3" => c.lambda3 = value(k, v)?,
            "temperature" => c.temperature = value(k, v)?,
            "self_training" => c.self_training = value(k, v)?,
            "frozen_matrix" => c.frozen_matrix = (v != "none").then(|| PathBuf::from(v)),
            "eval_every" => c.eval_every = value(k, v)?,
            "hidden" => c.hidden = value(k, v)?,
            "learning_rate" => c.learning_rate = value(k, v)?,
            "momentum" => c.momentum = value(k, v)?,
            "pseudo_normalization" => c.pseudo_normalization = value(k, v)?,
            "verb_aux_weight" => c.verb_aux_weight = value(k, v)?,
            _ => {}
        }
    }
    c.validate()?;
    Ok((profile, c))
}

/// Effective configuration as `key=value` lines in a fixed order.
pub fn echo_train_config(profile: Profile, c: &TrainConfig) -> String {
    let mut out = String::new();
    let frozen = c
        .frozen_matrix
        .as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string());
    let _ = writeln!(out, "profile={}", profile.as_str());
    let _ = writeln!(out, "lambda1={}", c.lambda1);
    let _ = writeln!(out, "lambda2={}", c.lambda2);
    let _ = writeln!(out, "lambda3={}", c.lambda3);
    let _ = writeln!(out, "temperature={}", c.temperature);
    let _ = writeln!(out, "batch_size={}", c.batch_size);
    let _ = writeln!(out, "iterations={}", c.iterations);
    let _ = writeln!(out, "seed={}", c.seed);
    let _ = writeln!(out, "self_training={}", c.self_training);
    let _ = writeln!(out, "frozen_matrix={frozen}");
    let _ = writeln!(out, "eval_every={}", c.eval_every);
    let _ = writeln!(out, "hidden={}", c.hidden);
    let _ = writeln!(out, "learning_rate={}", c.learning_rate);
    let _ = writeln!(out, "momentum={}", c.momentum);
    let _ = writeln!(out, "pseudo_normalization={}", c.pseudo_normalization);
    let _ = writeln!(out, "verb_aux_weight={}", c.verb_aux_weight);
    out
}

pub fn echo_synth_config(c: &SynthConfig, heldout: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed={}", c.seed);
    let _ = writeln!(out, "n_verbs={}", c.n_verbs);
    let _ = writeln!(out, "n_objects={}", c.n_objects);
    let _ = writeln!(out, "n_groups={}", c.n_groups);
    let _ = writeln!(out, "d_v={}", c.d_v);
    let _ = writeln!(out, "d_o={}", c.d_o);
    let _ = writeln!(out, "instances_per_concept={}", c.instances_per_known_concept);
    let _ = writeln!(out, "noise_sigma={}", c.noise_sigma);
    let _ = writeln!(out, "known_fraction={}", c.known_fraction);
    let _ = writeln!(out, "object_offset_scale={}", c.object_offset_scale);
    let _ = writeln!(out, "heldout_per_object={heldout}");
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A dataset directory, or the `train/` split of a synth output directory.
pub fn resolve_train_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("train");
    if !dir.join(META_FILE).exists() && nested.join(META_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn synthesize(config: &SynthConfig, heldout: usize, out: &Path) -> Result<()> {
    let mut world = SynthWorld::new(config.clone())?;
    let train_set = world.training_set()?;
    let heldout_set = world.heldout_set(heldout)?;
    create_dir(out)?;
    write_dataset(&train_set, &out.join("train"))?;
    write_dataset(&heldout_set, &out.join("heldout"))?;
    world.space().save(&out.join("concepts.csv"))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let mut settings = Settings::load(args.config.as_deref())?;
    settings.overlay_synth(&args.flags);
    reject_unknown(&settings, &[SYNTH_KEYS])?;
    let (config, heldout) = synth_config(&settings)?;
    synthesize(&config, heldout, &args.out)?;
    let echo = format!("command=synth\n{}", echo_synth_config(&config, heldout));
    write_text(&args.out.join(RUN_LOG_FILE), &echo)?;
    Ok(format!("wrote {}\n", args.out.display()))
}

/// Output of one training run written to `out`.
pub struct TrainSummary {
    pub unknown_ap: Option<f64>,
    pub known_ap: Option<f64>,
}

fn run_training(data: &Path, out: &Path, profile: Profile, config: TrainConfig) -> Result<TrainSummary> {
    let dataset = read_dataset(&resolve_train_dir(data))?;
    let space = dataset.space().clone();
    create_dir(out)?;
    let mut log = format!("command=train\ndata={}\n{}", data.display(), echo_train_config(profile, &config));
    write_text(&out.join(RUN_LOG_FILE), &log)?;
    let outcome = match train(&dataset, &space, config) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(log, "error={e}");
            write_text(&out.join(RUN_LOG_FILE), &log)?;
            return Err(e);
        }
    };
    write_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.params, &outcome.opt)?;
    outcome.tracker.save(&out.join(MATRIX_FILE))?;
    outcome.history.save(&out.join(HISTORY_FILE))?;
    let last = outcome.history.last();
    let summary = TrainSummary {
        unknown_ap: last.and_then(|r| r.unknown_ap),
        known_ap: last.and_then(|r| r.known_ap),
    };
    let fmt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    let _ = writeln!(log, "final_unknown_ap={}", fmt(summary.unknown_ap));
    let _ = writeln!(log, "final_known_ap={}", fmt(summary.known_ap));
    write_text(&out.join(RUN_LOG_FILE), &log)?;
    Ok(summary)
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let mut settings = Settings::load(args.config.as_deref())?;
    settings.overlay_train(&args.flags);
    reject_unknown(&settings, &[TRAIN_KEYS])?;
    let (profile, config) = train_config(&settings)?;
    let echo = echo_train_config(profile, &config);
    let s = run_training(&args.data, &args.out, profile, config)?;
    let fmt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    Ok(format!(
        "{echo}unknown_ap={}\nknown_ap={}\n",
        fmt(s.unknown_ap),
        fmt(s.known_ap)
    ))
}

fn load_matrix_and_space(matrix: &Path, concepts: &Path) -> Result<(ConfidenceTracker, ConceptSpace)> {
    let tracker = ConfidenceTracker::load(matrix)?;
    let space = ConceptSpace::load(concepts, tracker.n_verbs(), tracker.n_objects())?;
    Ok((tracker, space))
}

pub fn cmd_discover(args: &DiscoverArgs) -> Result<String> {
    let (tracker, space) = load_matrix_and_space(&args.matrix, &args.concepts)?;
    let scores = tracker.confidences();
    let ranked = rank_cells(scores, &space, Some(ConceptStatus::Known))?;
    let mut out = String::from("rank,verb_id,object_id,score\n");
    for (r, c) in ranked.iter().take(args.k).enumerate() {
        let _ = writeln!(out, "{},{},{},{:.16e}", r + 1, c.verb, c.object, c.score);
    }
    if space.count(ConceptStatus::Unknown) > 0 {
        let _ = writeln!(out, "recall_at_k,{},{:.16e}", args.k, recall_at_k(scores, &space, args.k)?);
    }
    if let Some(path) = &args.out {
        write_text(path, &out)?;
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let (tracker, space) = load_matrix_and_space(&args.matrix, &args.concepts)?;
    let report = MetricReport::for_matrix(tracker.confidences(), &space)?;
    if let Some(path) = &args.out {
        report.save(path)?;
    }
    Ok(report.to_text())
}

pub fn cmd_affordance(args: &AffordanceArgs) -> Result<String> {
    let (params, _) = read_checkpoint(&args.checkpoint)?;
    let train_set = read_dataset(&resolve_train_dir(&args.train))?;
    let heldout = read_dataset(&args.heldout)?;
    let target = AffordanceTarget::from(args.target);
    let m = affordance_map(&params, &train_set, &heldout, train_set.space(), target)?;
    let report = MetricReport {
        affordance_map: Some((target, m)),
        ..MetricReport::default()
    };
    if let Some(path) = &args.out {
        report.save(path)?;
    }
    Ok(report.to_text())
}

pub fn cmd_baseline(args: &BaselineArgs) -> Result<String> {
    let dataset: Dataset = read_dataset(&resolve_train_dir(&args.data))?;
    let space = dataset.space();
    let tracker = match args.kind {
        BaselineKind::Random => {
            let m = random_matrix(space, args.seed);
            ConfidenceTracker::load_snapshot(space.n_verbs(), space.n_objects(), m, vec![1.0; space.n_cells()])?
        }
        BaselineKind::OfflineAffordance => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("offline-affordance needs --checkpoint".into()))?;
            let (params, _) = read_checkpoint(path)?;
            offline_affordance_matrix(&dataset, &params)?
        }
    };
    tracker.save(&args.out)?;
    Ok(format!("wrote {}\n", args.out.display()))
}

pub fn cmd_repro(args: &ReproArgs) -> Result<String> {
    let mut settings = Settings::load(args.config.as_deref())?;
    settings.set_opt("profile", &args.profile);
    settings.set_opt("iterations", &args.iterations);
    reject_unknown(&settings, &[SYNTH_KEYS, TRAIN_KEYS])?;
    create_dir(&args.out)?;
    let mut table = String::from("seed,prevalence,scl_unknown_ap,scl_minus_unknown_ap,difference\n");
    let mut sums = [0.0; 4];
    for seed in 0..args.seeds {
        let mut s = settings.clone();
        s.set("seed", seed);
        let (synth, heldout) = synth_config(&s)?;
        let (profile, scl) = train_config(&s)?;
        let base = args.out.join(format!("seed-{seed}"));
        let data = base.join("data");
        synthesize(&synth, heldout, &data)?;
        let space = read_dataset(&data.join("train"))?.space().clone();
        let prevalence = space.prevalence(Target::Unknown)?;
        let minus = TrainConfig {
            self_training: false,
            ..scl.clone()
        };
        let a = run_training(&data, &base.join("scl"), profile, scl)?;
        let b = run_training(&data, &base.join("scl-minus"), profile, minus)?;
        let (a, b) = (
            a.unknown_ap.ok_or(Error::UndefinedAp)?,
            b.unknown_ap.ok_or(Error::UndefinedAp)?,
        );
        let row = [prevalence, a, b, a - b];
        let _ = writeln!(table, "{seed},{:.6},{:.6},{:.6},{:.6}", row[0], row[1], row[2], row[3]);
        for (acc, x) in sums.iter_mut().zip(row) {
            *acc += x;
        }
    }
    if args.seeds > 0 {
        let n = args.seeds as f64;
        let _ = writeln!(
            table,
            "mean,{:.6},{:.6},{:.6},{:.6}",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        );
    }
    write_text(&args.out.join("summary.csv"), &table)?;
    Ok(table)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool that already exists (repeated calls in one process) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<String> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Discover(a) => cmd_discover(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Affordance(a) => cmd_affordance(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Repro(a) => cmd_repro(a),
    }
}

/// Parses `args`, runs the command, prints its output and returns the
/// process exit code: 0 success, 1 usage, 2 data, 3 numerical abort.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
