//! The `m25d` command-line driver.
//!
//! Every subcommand reads a flat `key = value` configuration built from
//! three layers: the subcommand's defaults, an optional `--config` file and
//! repeatable `--set key=value` overrides. `--seed N` sets every `*.seed`
//! key before the overrides are applied. Unknown keys are rejected.
//!
//! Outputs go to `--out DIR`, which must be empty or absent. The run is
//! staged in a sibling directory and moved into place only on success, so a
//! failed run leaves nothing behind. Every run directory holds
//! `resolved_config.txt` (the full configuration, usable as `--config`)
//! and `run_manifest.txt` (every output file with its size).
//!
//! Exit codes: 0 success, 1 failed check or run, 2 usage or config error,
//! 3 I/O error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

use crate::analysis::{
    assignment_histogram, default_rf_width, depthaware_profile, dump_kernel_features, export_rf_curves,
    hard25d_profile, mean_rf_width, write_kernel_dump, AnalysisError,
};
use crate::convops::{estimate_flops, LayerDescriptor, LayerKind};
use crate::geometry::GeometryError;
use crate::kvfile::{KvError, KvFile};
use crate::oracle::gradcheck::{self, Fault, GradcheckConfig, GradcheckError};
use crate::rfield::RFieldParams;
use crate::synth::{export_dataset, scene_config_from_kv, write_scene_config, Dataset, SceneConfig, Split, SynthError};
use crate::train::{
    evaluate, fit_from, load_checkpoint, save_checkpoint, write_log_csv, FreezeSet, NetConfig, OptimState, ToyNet,
    TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const RUN_MANIFEST: &str = "run_manifest.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Failed(_) => EXIT_CHECK,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        match e {
            KvError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Kv(k) => k.into(),
            SynthError::Config(_) | SynthError::Geometry(_) => CliError::Usage(e.to_string()),
            SynthError::Io { .. } | SynthError::Manifest { .. } | SynthError::Tensor { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Kv(k) => k.into(),
            TrainError::Synth(s) => s.into(),
            TrainError::Config(_) | TrainError::Shape(_) => CliError::Usage(e.to_string()),
            TrainError::Io { .. } | TrainError::Checkpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Train(t) => t.into(),
            AnalysisError::Io { .. } => CliError::Io(e.to_string()),
            AnalysisError::Conv(_) => CliError::Failed(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<GradcheckError> for CliError {
    fn from(e: GradcheckError) -> Self {
        match e {
            GradcheckError::NoTrials | GradcheckError::Kernels => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Sets every `*.seed` key.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; must be empty or absent.
    #[arg(long, value_name = "DIR", default_value = "m25d-out")]
    pub out: PathBuf,
    /// Overrides one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corrupts an analytical gradient on purpose (`flip-a`).
    #[arg(long, hide = true, value_name = "FAULT")]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Finite-difference check of every operator gradient.
    Gradcheck(GradcheckArgs),
    /// Writes a synthetic RGB-D segmentation dataset.
    Synth(Common),
    /// Trains the toy network and writes a checkpoint, log and evaluation.
    Train(Common),
    /// Trains once per freeze set of receptive-field parameters.
    Ablate(Common),
    /// Exports receptive-field curves and baseline profiles.
    ExportRf(Common),
    /// Per-kernel assignment histogram of a trained malleable block.
    AssignHist(Common),
    /// Per-kernel feature maps of a malleable block for one sample.
    DumpFeatures(Common),
    /// Parameter and operation counts per layer kind.
    Budget(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck(_) => "gradcheck",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Ablate(_) => "ablate",
            Command::ExportRf(_) => "export-rf",
            Command::AssignHist(_) => "assign-hist",
            Command::DumpFeatures(_) => "dump-features",
            Command::Budget(_) => "budget",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Gradcheck(g) => &g.common,
            Command::Synth(c)
            | Command::Train(c)
            | Command::Ablate(c)
            | Command::ExportRf(c)
            | Command::AssignHist(c)
            | Command::DumpFeatures(c)
            | Command::Budget(c) => c,
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "m25d", version, about = "Malleable 2.5D convolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

pub const SUBCOMMANDS: [&str; 8] = [
    "gradcheck",
    "synth",
    "train",
    "ablate",
    "export-rf",
    "assign-hist",
    "dump-features",
    "budget",
];

fn data_keys(kv: &mut KvFile) {
    kv.set("data.manifest", "");
    write_scene_config(&SceneConfig::default(), kv, "scene.");
}

fn train_keys(kv: &mut KvFile) {
    data_keys(kv);
    let mut net = KvFile::new();
    NetConfig::default().write_kv(&mut net, "net.");
    for (k, v) in net.entries() {
        // taken from the dataset
        if k != "net.classes" && k != "net.in_channels" {
            kv.set(k, v);
        }
    }
    TrainConfig::default().write_kv(kv, "train.");
}

/// Every key `name` accepts, with its default.
pub fn schema(name: &str) -> Option<KvFile> {
    let mut kv = KvFile::new();
    match name {
        "gradcheck" => {
            let d = GradcheckConfig::default();
            kv.set("gradcheck.trials", d.trials);
            kv.set("gradcheck.seed", d.seed);
            kv.set("gradcheck.max_batch", d.max_batch);
            kv.set("gradcheck.max_channels", d.max_channels);
            kv.set("gradcheck.max_spatial", d.max_spatial);
            kv.set_list("gradcheck.kernels", &d.kernels);
            kv.set("gradcheck.step", d.step);
            kv.set("gradcheck.tolerance", d.tolerance);
            kv.set("gradcheck.floor", d.floor);
            kv.set("gradcheck.alpha", d.alpha);
        }
        "synth" => write_scene_config(&SceneConfig::default(), &mut kv, "scene."),
        "train" => train_keys(&mut kv),
        "ablate" => {
            train_keys(&mut kv);
            kv.set("ablate.sets", "none a,t,b");
        }
        "export-rf" => {
            kv.set("rf.checkpoint", "");
            kv.set("rf.kernels", 3);
            kv.set("rf.lo", -4.0);
            kv.set("rf.hi", 4.0);
            kv.set("rf.steps", 801);
            kv.set("rf.alpha", NetConfig::default().alpha);
            kv.set_list("rf.depths", &[1.0, 20.0]);
            kv.set("rf.focal", SceneConfig::default().focal);
            kv.set("rf.spacing", 1.0);
        }
        "assign-hist" => {
            kv.set("hist.checkpoint", "");
            kv.set("hist.block", "last");
            kv.set("hist.split", Split::Test);
            data_keys(&mut kv);
        }
        "dump-features" => {
            kv.set("dump.checkpoint", "");
            kv.set("dump.block", "last");
            kv.set("dump.sample", 0);
            data_keys(&mut kv);
        }
        "budget" => {
            kv.set("budget.kind", LayerKind::Malleable);
            kv.set("budget.compare", LayerKind::Hard25D);
            kv.set("budget.kernels", 3);
            kv.set("budget.max_kernels", 8);
            kv.set("budget.c_in", 256);
            kv.set("budget.c_out", 256);
            kv.set("budget.kh", 3);
            kv.set("budget.kw", 3);
            kv.set("budget.out_h", 96);
            kv.set("budget.out_w", 96);
            kv.set("budget.bias", false);
        }
        _ => return None,
    }
    Some(kv)
}

fn keys_help(name: &str) -> String {
    let kv = schema(name).expect("known subcommand");
    let width = kv.keys().map(str::len).max().unwrap_or(0);
    let mut s = String::from("Keys (set with --set KEY=VALUE or a --config file), with defaults:\n");
    for (k, v) in kv.entries() {
        let v = if v.is_empty() { "(empty)" } else { v.as_str() };
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    if kv.get("data.manifest").is_some() {
        s.push_str("\nWith data.manifest empty the dataset is generated from the scene.* keys.\n");
    }
    s
}

/// The clap command with per-subcommand key listings attached.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in SUBCOMMANDS {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys_help(name)));
    }
    cmd
}

/// Merges defaults, the config file, `--seed` and `--set` overrides.
pub fn resolve(name: &str, common: &Common) -> Result<KvFile, CliError> {
    let mut kv = schema(name).ok_or_else(|| CliError::Usage(format!("unknown subcommand `{name}`")))?;
    let unknown = |k: &str| CliError::Usage(format!("unknown key `{k}` for `{name}` (see `m25d {name} --help`)"));
    if let Some(path) = &common.config {
        let file = KvFile::read(path)?;
        for (k, v) in file.entries() {
            if kv.get(k).is_none() {
                return Err(unknown(k));
            }
            kv.set(k, v);
        }
    }
    if let Some(seed) = common.seed {
        let seeds: Vec<String> = kv.keys().filter(|k| k.ends_with(".seed")).map(String::from).collect();
        for k in seeds {
            kv.set(&k, seed);
        }
    }
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        let k = k.trim();
        if kv.get(k).is_none() {
            return Err(unknown(k));
        }
        kv.set(k, v.trim());
    }
    Ok(kv)
}

/// Output directory under construction; see the module docs.
struct Stage {
    out: PathBuf,
    dir: PathBuf,
}

impl Stage {
    fn begin(out: &Path) -> Result<Self, CliError> {
        if out.exists() {
            let mut entries = fs::read_dir(out).map_err(|e| io_err(out, e))?;
            if entries.next().is_some() {
                return Err(CliError::Usage(format!("output directory {} is not empty", out.display())));
            }
        }
        let name = out
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("bad output directory {}", out.display())))?;
        let mut staged = OsString::from(".");
        staged.push(name);
        staged.push(".partial");
        let dir = out.with_file_name(staged);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { out: out.to_path_buf(), dir })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn subdir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.dir.join(rel);
        fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        Ok(p)
    }

    fn write(&self, rel: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(rel);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    fn finish(self) -> Result<PathBuf, CliError> {
        let mut files = Vec::new();
        collect_files(&self.dir, &self.dir, &mut files)?;
        files.sort();
        let mut manifest = String::new();
        for (rel, size) in &files {
            manifest.push_str(&format!("{rel} {size}\n"));
        }
        self.write(RUN_MANIFEST, &manifest)?;
        if self.out.exists() {
            fs::remove_dir(&self.out).map_err(|e| io_err(&self.out, e))?;
        }
        fs::rename(&self.dir, &self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(self.out.clone())
    }

    fn abandon(self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let p = entry.path();
        let meta = entry.metadata().map_err(|e| io_err(&p, e))?;
        if meta.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.push((rel, meta.len()));
        }
    }
    Ok(())
}

/// How a completed run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ok,
    /// The run finished and its outputs were kept, but a check failed.
    CheckFailed(String),
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let name = cli.command.name();
    let common = cli.command.common();
    let kv = resolve(name, common)?;
    let fault = match &cli.command {
        Command::Gradcheck(g) => match g.inject_fault.as_deref() {
            None => None,
            Some("flip-a") => Some(Fault::FlipRFieldA),
            Some(other) => return Err(CliError::Usage(format!("unknown fault `{other}`"))),
        },
        _ => None,
    };
    let stage = Stage::begin(&common.out)?;
    let result = stage
        .write(RESOLVED_CONFIG, &kv.to_string())
        .and_then(|_| match name {
            "gradcheck" => cmd_gradcheck(&kv, fault, &stage),
            "synth" => cmd_synth(&kv, &stage),
            "train" => cmd_train(&kv, &stage),
            "ablate" => cmd_ablate(&kv, &stage),
            "export-rf" => cmd_export_rf(&kv, &stage),
            "assign-hist" => cmd_assign_hist(&kv, &stage),
            "dump-features" => cmd_dump_features(&kv, &stage),
            "budget" => cmd_budget(&kv, &stage),
            _ => unreachable!("subcommand names are fixed"),
        });
    match result {
        Ok(outcome) => {
            let out = stage.finish()?;
            println!("outputs in {}", out.display());
            Ok(outcome)
        }
        Err(e) => {
            stage.abandon();
            Err(e)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match execute(&cli) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_gradcheck(kv: &KvFile, fault: Option<Fault>, stage: &Stage) -> Result<Outcome, CliError> {
    let cfg = GradcheckConfig {
        trials: kv.parse_value("gradcheck.trials")?,
        seed: kv.parse_value("gradcheck.seed")?,
        max_batch: kv.parse_value("gradcheck.max_batch")?,
        max_channels: kv.parse_value("gradcheck.max_channels")?,
        max_spatial: kv.parse_value("gradcheck.max_spatial")?,
        kernels: kv.parse_list("gradcheck.kernels")?,
        step: kv.parse_value("gradcheck.step")?,
        tolerance: kv.parse_value("gradcheck.tolerance")?,
        floor: kv.parse_value("gradcheck.floor")?,
        alpha: kv.parse_value("gradcheck.alpha")?,
        fault,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    println!("{report}");
    stage.write("gradcheck.txt", &format!("{report}\n"))?;
    if report.passed() {
        return Ok(Outcome::Ok);
    }
    let failed: Vec<String> = report
        .failures()
        .map(|g| format!("{} d{} (trial {}, index {}): {:.3e}", g.op, g.param, g.worst_trial, g.worst_index, g.worst))
        .collect();
    Ok(Outcome::CheckFailed(failed.join("; ")))
}

fn cmd_synth(kv: &KvFile, stage: &Stage) -> Result<Outcome, CliError> {
    let cfg = scene_config_from_kv(kv, "scene.", &SceneConfig::default())?;
    let (manifest, _) = export_dataset(&cfg, &stage.dir)?;
    println!(
        "{} scenes ({} test), {}x{}, {} regime",
        manifest.entries.len(),
        cfg.test_count(),
        cfg.height,
        cfg.width,
        cfg.regime
    );
    Ok(Outcome::Ok)
}

fn load_data(kv: &KvFile) -> Result<Dataset, CliError> {
    match kv.get("data.manifest").unwrap_or_default() {
        "" => Ok(Dataset::from_config(&scene_config_from_kv(kv, "scene.", &SceneConfig::default())?)?),
        path => Ok(Dataset::load(path)?),
    }
}

fn net_config(kv: &KvFile, data: &Dataset) -> Result<NetConfig, CliError> {
    let mut cfg = NetConfig::read_kv(kv, "net.")?;
    cfg.classes = data.classes;
    if let Some((_, s)) = data.samples.first() {
        cfg.in_channels = s.features.c();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Summary of one training run.
#[derive(Debug, Clone)]
struct TrainSummary {
    pixel_acc: f64,
    mean_iou: f64,
    rf_width: f64,
}

fn train_into(dir: &Path, kv: &KvFile, data: &Dataset, freeze: Option<FreezeSet>) -> Result<TrainSummary, CliError> {
    let net_cfg = net_config(kv, data)?;
    let mut cfg = TrainConfig::read_kv(kv, "train.")?;
    if let Some(f) = freeze {
        cfg.freeze = f;
    }
    let net = ToyNet::build(&net_cfg)?;
    let res = fit_from(net, OptimState::new(&cfg), data, &cfg, |row| {
        println!("iter {:6}  lr {:.6}  loss {:.5}  acc {:.4}", row.iter, row.lr, row.loss, row.pixel_acc);
    })?;
    save_checkpoint(dir.join("checkpoint"), &res.net, &res.optim)?;
    let blocks: Vec<(usize, RFieldParams)> = res.net.malleable_blocks().into_iter().map(|(i, r)| (i, r.clone())).collect();
    write_log_csv(dir.join("log.csv"), &res.log, &blocks)?;

    let mut eval = KvFile::new();
    eval.set("freeze", cfg.freeze);
    let summary = if data.split(Split::Test).is_empty() {
        TrainSummary {
            pixel_acc: f64::NAN,
            mean_iou: f64::NAN,
            rf_width: mean_rf_width(&res.net),
        }
    } else {
        let r = evaluate(&res.net, data, Split::Test, 16)?;
        eval.set_list("test.class_iou", &r.class_iou);
        TrainSummary {
            pixel_acc: r.pixel_acc,
            mean_iou: r.mean_iou,
            rf_width: mean_rf_width(&res.net),
        }
    };
    eval.set("test.pixel_acc", summary.pixel_acc);
    eval.set("test.mean_iou", summary.mean_iou);
    for (i, r) in &blocks {
        eval.set(&format!("block{i}.rf_width"), default_rf_width(r));
    }
    if !blocks.is_empty() {
        eval.set("mean_rf_width", summary.rf_width);
    }
    let path = dir.join("eval.txt");
    eval.write(&path)?;
    println!(
        "test pixel accuracy {:.4}, mean IoU {:.4} (freeze {})",
        summary.pixel_acc, summary.mean_iou, cfg.freeze
    );
    Ok(summary)
}

fn cmd_train(kv: &KvFile, stage: &Stage) -> Result<Outcome, CliError> {
    let data = load_data(kv)?;
    train_into(&stage.dir, kv, &data, None)?;
    Ok(Outcome::Ok)
}

fn freeze_dir(f: FreezeSet) -> String {
    format!("freeze-{}", f.to_string().replace(',', "-"))
}

fn cmd_ablate(kv: &KvFile, stage: &Stage) -> Result<Outcome, CliError> {
    let raw = kv.get("ablate.sets").unwrap_or_default();
    let sets = raw
        .split_whitespace()
        .map(|s| s.parse::<FreezeSet>().map_err(|e| CliError::Usage(format!("key `ablate.sets`: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if sets.is_empty() {
        return Err(CliError::Usage("key `ablate.sets` is empty".into()));
    }
    let data = load_data(kv)?;
    let mut table = String::from("freeze,test_pixel_acc,test_mean_iou,mean_rf_width\n");
    for f in sets {
        println!("== freeze {f}");
        let dir = stage.subdir(&freeze_dir(f))?;
        let s = train_into(&dir, kv, &data, Some(f))?;
        table.push_str(&format!("{},{},{},{}\n", freeze_dir(f), s.pixel_acc, s.mean_iou, s.rf_width));
    }
    stage.write("ablation.csv", &table)?;
    print!("{table}");
    Ok(Outcome::Ok)
}

fn cmd_export_rf(kv: &KvFile, stage: &Stage) -> Result<Outcome, CliError> {
    let lo: f64 = kv.parse_value("rf.lo")?;
    let hi: f64 = kv.parse_value("rf.hi")?;
    let steps: usize = kv.parse_value("rf.steps")?;
    let kernels: usize = kv.parse_value("rf.kernels")?;
    let fields: Vec<(String, RFieldParams)> = match kv.get("rf.checkpoint").unwrap_or_default() {
        "" => vec![(
            "init".into(),
            RFieldParams::init(kernels).map_err(|e| CliError::Usage(format!("key `rf.kernels`: {e}")))?,
        )],
        path => {
            let ck = load_checkpoint(path)?;
            let blocks: Vec<(String, RFieldParams)> = ck
                .net
                .malleable_blocks()
                .into_iter()
                .map(|(i, r)| (format!("block{i}"), r.clone()))
                .collect();
            if blocks.is_empty() {
                return Err(CliError::Usage(format!("checkpoint {path} has no malleable blocks")));
            }
            blocks
        }
    };
    let mut widths = String::from("field,rf_width\n");
    for (tag, params) in &fields {
        export_rf_curves(params, lo, hi, steps)?.write_csv(stage.path(&format!("curves_{tag}.csv")))?;
        widths.push_str(&format!("{tag},{}\n", default_rf_width(params)));
    }
    stage.write("rf_widths.csv", &widths)?;
    hard25d_profile(kernels, lo, hi, steps)?.write_csv(stage.path("hard25d_profile.csv"))?;
    let depths: Vec<f64> = kv.parse_list("rf.depths")?;
    depthaware_profile(
        kv.parse_value("rf.alpha")?,
        &depths,
        kv.parse_value("rf.focal")?,
        kv.parse_value("rf.spacing")?,
        lo,
        hi,
        steps,
    )?
    .write_csv(stage.path("depthaware_profile.csv"))?;
    print!("{widths}");
    Ok(Outcome::Ok)
}

fn checkpoint_path<'a>(kv: &'a KvFile, key: &str) -> Result<&'a str, CliError> {
    match kv.get(key).unwrap_or_default() {
        "" => Err(CliError::Usage(format!("key `{key}` is required"))),
        p => Ok(p),
    }
}

fn pick_block(kv: &KvFile, key: &str, net: &ToyNet) -> Result<usize, CliError> {
    match kv.get(key).unwrap_or_default() {
        "last" => net
            .malleable_blocks()
            .last()
            .map(|(i, _)| *i)
            .ok_or_else(|| CliError::Usage("network has no malleable blocks".into())),
        _ => Ok(kv.parse_value(key)?),
    }
}

fn cmd_assign_hist(kv: &KvFile, stage: &Stage) -> Result<Outcome, CliError> {
    let ck = load_checkpoint(checkpoint_path(kv, "hist.checkpoint")?)?;
    let block = pick_block(kv, "hist.block", &ck.net)?;
    let split: Split = kv.parse_value("hist.split")?;
    let data = load_data(kv)?;
    let hist = assignment_histogram(&ck.net, &data, split, block)?;
    hist.table().write_csv(stage.path("assign_hist.csv"))?;
    let mut summary = KvFile::new();
    summary.set("block", block);
    summary.set("split", split);
    summary.set("taps", hist.taps);
    summary.set("raw_entropy", hist.raw_entropy());
    summary.set("rebalanced_entropy", hist.rebalanced_entropy());
    summary.write(stage.path("assign_summary.txt"))?;
    print!("{summary}");
    Ok(Outcome::Ok)
}

fn cmd_dump_features(kv: &KvFile, stage: &Stage) -> Result<Outcome, CliError> {
    let ck = load_checkpoint(checkpoint_path(kv, "dump.checkpoint")?)?;
    let block = pick_block(kv, "dump.block", &ck.net)?;
    let index: usize = kv.parse_value("dump.sample")?;
    let data = load_data(kv)?;
    let (_, sample) = data
        .samples
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("key `dump.sample`: {index} out of range ({} samples)", data.samples.len())))?;
    let dump = dump_kernel_features(&ck.net, sample, &data.camera, block)?;
    write_kernel_dump(&dump, &stage.dir)?;
    let err = dump.recombined().max_abs_diff(&dump.output).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("block {block}, sample {index}: {} kernel maps, recombination error {err:.3e}", dump.kernels.len());
    Ok(Outcome::Ok)
}

fn layer_kind(kv: &KvFile, key: &str) -> Result<LayerKind, CliError> {
    let v = kv.get(key).unwrap_or_default();
    v.parse().map_err(|e| CliError::Usage(format!("key `{key}`: {e}")))
}

fn cmd_budget(kv: &KvFile, stage: &Stage) -> Result<Outcome, CliError> {
    let kind = layer_kind(kv, "budget.kind")?;
    let compare = layer_kind(kv, "budget.compare")?;
    let kernels: usize = kv.parse_value("budget.kernels")?;
    let max_kernels: usize = kv.parse_value("budget.max_kernels")?;
    if kernels == 0 || max_kernels == 0 {
        return Err(CliError::Usage("kernel counts must be at least 1".into()));
    }
    let desc = |kind, kernels| -> Result<LayerDescriptor, CliError> {
        Ok(LayerDescriptor {
            kind,
            kernels,
            c_in: kv.parse_value("budget.c_in")?,
            c_out: kv.parse_value("budget.c_out")?,
            kh: kv.parse_value("budget.kh")?,
            kw: kv.parse_value("budget.kw")?,
            out_h: kv.parse_value("budget.out_h")?,
            out_w: kv.parse_value("budget.out_w")?,
            bias: kv.parse_value("budget.bias")?,
        })
    };

    let mut text = String::from(
        "kind,kernels,weight_params,bias_params,introduced_params,params,conv_macs,depth_ops,assignment_ops,modulation_ops,total_ops\n",
    );
    for k in [kind, compare] {
        let b = estimate_flops(&desc(k, kernels)?);
        let cells = [
            b.weight_params,
            b.bias_params,
            b.introduced_params,
            b.params(),
            b.conv_macs,
            b.depth_ops,
            b.assignment_ops,
            b.modulation_ops,
            b.total_ops(),
        ];
        text.push_str(&format!(
            "{k},{kernels},{}\n",
            cells.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        ));
    }
    stage.write("budget.csv", &text)?;

    let mut sweep = format!("kernels,params_{kind},params_{compare},param_overhead,ops_{kind},ops_{compare},ops_rel_overhead\n");
    for k in 1..=max_kernels {
        let a = estimate_flops(&desc(kind, k)?);
        let b = estimate_flops(&desc(compare, k)?);
        let rel = (a.total_ops() as f64 - b.total_ops() as f64) / b.total_ops() as f64;
        sweep.push_str(&format!(
            "{k},{},{},{},{},{},{rel}\n",
            a.params(),
            b.params(),
            a.params() as i64 - b.params() as i64,
            a.total_ops(),
            b.total_ops()
        ));
    }
    stage.write("budget_sweep.csv", &sweep)?;

    let a = estimate_flops(&desc(kind, kernels)?);
    let b = estimate_flops(&desc(compare, kernels)?);
    let rel = (a.total_ops() as f64 - b.total_ops() as f64) / b.total_ops() as f64;
    println!(
        "{kind} K={kernels}: {:+} params vs {compare}, {:+.4}% operations",
        a.params() as i64 - b.params() as i64,
        100.0 * rel
    );
    Ok(Outcome::Ok)
}
