//! Command-line front end: `synth`, `train`, `eval` and `infer`.
//!
//! Exit codes are 0 on success, 1 on runtime failure and 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::write_series_csv;
use crate::dataio::TimeSeries;
use crate::dataset::{self, Partition, SessionMeta, SplitMode, SplitPlan};
use crate::model::{Modality, ModelConfig, ModelParams};
use crate::sigproc::{self, SpectralBand};
use crate::synth::{self, CohortSpec};
use crate::timeline::{make_windows, WindowBatch};
use crate::train::{self, Bands, TaskMask, TrainConfig, TrainReport};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TABLE_FILE: &str = "table.txt";

/// A configuration problem; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(field: &str, msg: impl fmt::Display) -> anyhow::Error {
    ConfigError(format!("config field `{field}`: {msg}")).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub train_days: usize,
    pub val_days: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::SubjectWise,
            train_subjects: 8,
            val_subjects: 2,
            train_days: 6,
            val_days: 2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn apply(&self, sessions: &[SessionMeta]) -> Result<SplitPlan> {
        Ok(match self.mode {
            SplitMode::SubjectWise => {
                dataset::split_subject_wise(sessions, self.train_subjects, self.val_subjects, self.seed)?
            }
            SplitMode::DayWise => dataset::split_day_wise(sessions, self.train_days, self.val_days)?,
        })
    }
}

/// Spectral bands in Hz, `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandConfig {
    pub hr_hz: [f64; 2],
    pub rr_hz: [f64; 2],
}

impl Default for BandConfig {
    fn default() -> Self {
        let b = Bands::default();
        Self {
            hr_hz: [b.hr.low_hz(), b.hr.high_hz()],
            rr_hz: [b.rr.low_hz(), b.rr.high_hz()],
        }
    }
}

impl BandConfig {
    pub fn bands(&self) -> Result<Bands> {
        let hr = SpectralBand::new(self.hr_hz[0], self.hr_hz[1]).map_err(|e| config_err("bands.hr_hz", e))?;
        let rr = SpectralBand::new(self.rr_hz[0], self.rr_hz[1]).map_err(|e| config_err("bands.rr_hz", e))?;
        Ok(Bands { hr, rr })
    }
}

/// Everything a run needs besides paths. Flags override file values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub bands: BandConfig,
    /// Window stride in frames; `0` means one window length.
    pub stride: usize,
    pub synth: CohortSpec,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text, path)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| config_err("model", e))?;
        self.train.validate().map_err(|e| config_err("train", e))?;
        self.synth.validate().map_err(|e| config_err("synth", e))?;
        self.bands.bands()?;
        if self.split.train_subjects == 0 || self.split.val_subjects == 0 {
            return Err(config_err("split", "subject counts must be positive"));
        }
        if self.split.train_days == 0 || self.split.val_days == 0 {
            return Err(config_err("split", "day counts must be positive"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        if self.stride == 0 {
            self.model.window_len
        } else {
            self.stride
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[derive(Debug, Parser)]
#[command(name = "fusionvitals", version, about = "Vital signs from paired RGB and IR face video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset tree.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint with its report.
    Train(TrainArgs),
    /// Score a checkpoint on one partition of a dataset.
    Eval(EvalArgs),
    /// Predict waveforms and rates for one session directory.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub days: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `subject` or `day`.
    #[arg(long)]
    pub split: Option<SplitMode>,
    /// `rgb`, `ir` or `both`.
    #[arg(long)]
    pub modality: Option<Modality>,
    /// Comma list over `hr`, `spo2`, `rr`.
    #[arg(long)]
    pub tasks: Option<TaskMask>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Restrict to one subject, e.g. for per-subject day-wise runs.
    #[arg(long)]
    pub subject: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the configuration stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<SplitMode>,
    #[arg(long, default_value = "test")]
    pub partition: Partition,
    #[arg(long)]
    pub subject: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e:#}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if a.subjects == 0 || a.days == 0 {
        return Err(ConfigError("--subjects and --days must be positive".into()).into());
    }
    let n = synth::batch_dataset(&cfg.synth, a.subjects, a.days, a.seed, &a.out)?;
    println!("{n} sessions");
    Ok(())
}

/// Loads, aligns and windows sessions in parallel, keeping input order.
pub fn load_windows(sessions: &[SessionMeta], window_len: usize, stride: usize) -> Result<WindowBatch> {
    let parts: Vec<WindowBatch> = sessions
        .par_iter()
        .map(|m| -> Result<WindowBatch> {
            let a = m
                .load()
                .map_err(anyhow::Error::from)
                .and_then(|r| Ok(r.align()?))
                .with_context(|| format!("session {}", m.path.display()))?;
            make_windows(&a, window_len, stride, &m.key()).with_context(|| format!("session {}", m.path.display()))
        })
        .collect::<Result<_>>()?;
    let mut out = WindowBatch::new(window_len);
    for p in parts {
        out.extend(p)?;
    }
    Ok(out)
}

fn scan(root: &Path, subject: Option<&str>) -> Result<Vec<SessionMeta>> {
    let report = dataset::scan_dataset(root)?;
    for s in &report.skipped {
        eprintln!("{s}");
    }
    let sessions = match subject {
        Some(id) => dataset::filter_subject(&report.sessions, id),
        None => report.sessions,
    };
    if sessions.is_empty() {
        bail!("no complete sessions under {}", root.display());
    }
    Ok(sessions)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(m) = a.split {
        cfg.split.mode = m;
    }
    if let Some(m) = a.modality {
        cfg.train.modality = m;
    }
    if let Some(t) = a.tasks {
        cfg.train.task_mask = t;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let bands = cfg.bands.bands()?;
    let plan = cfg.split.apply(&scan(&a.data, a.subject.as_deref())?)?;
    let l = cfg.model.window_len;
    let train_set = load_windows(&plan.train, l, cfg.stride())?;
    let val_set = load_windows(&plan.val, l, cfg.stride())?;
    eprintln!(
        "{}: {} train windows, {} val windows",
        train::run_label(cfg.train.modality, cfg.train.task_mask),
        train_set.len(),
        val_set.len()
    );
    let (params, report) = train::train(&cfg.model, &cfg.train, &train_set, &val_set, bands)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    params.save(&a.out, cfg.train.modality)?;
    write_file(&a.out.join(REPORT_FILE), &report.to_json())?;
    write_file(&a.out.join(CONFIG_FILE), &cfg.to_json())?;
    let val = &report.metrics["val"];
    println!(
        "selected epoch {} of {}; val HR MAE {:.3} RR MAE {:.3} SpO2 MAE {:.3}",
        report.selected_epoch,
        report.epochs.len(),
        val.hr.mae,
        val.rr.mae,
        val.spo2.mae
    );
    Ok(())
}

fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    match explicit {
        Some(p) => RunConfig::load(p),
        None => {
            let p = checkpoint.join(CONFIG_FILE);
            if p.exists() {
                RunConfig::load(&p)
            } else {
                Ok(RunConfig::default())
            }
        }
    }
}

fn load_checkpoint(dir: &Path) -> Result<(ModelParams, Modality)> {
    ModelParams::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn run_label_of(checkpoint: &Path, modality: Modality) -> String {
    fs::read_to_string(checkpoint.join(REPORT_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<TrainReport>(&t).ok())
        .map_or_else(|| train::run_label(modality, TaskMask::ALL), |r| r.run)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (params, modality) = load_checkpoint(&a.checkpoint)?;
    let mut cfg = checkpoint_config(&a.checkpoint, a.config.as_deref())?;
    if let Some(m) = a.split {
        cfg.split.mode = m;
    }
    let bands = cfg.bands.bands()?;
    let plan = cfg.split.apply(&scan(&a.data, a.subject.as_deref())?)?;
    let sessions = plan.partition(a.partition);
    if sessions.is_empty() {
        bail!("partition {:?} is empty", a.partition);
    }
    let windows = load_windows(sessions, params.config().window_len, cfg.stride())?;
    let (table, _) = train::evaluate(&params, modality, &windows, bands)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join(METRICS_FILE), &table.to_csv())?;
    let text = table.to_table(&run_label_of(&a.checkpoint, modality));
    write_file(&a.out.join(TABLE_FILE), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let (params, modality) = load_checkpoint(&a.checkpoint)?;
    let cfg = checkpoint_config(&a.checkpoint, a.config.as_deref())?;
    let bands = cfg.bands.bands()?;
    let l = params.config().window_len;
    let aligned = dataset::load_recording(&a.session)
        .map_err(anyhow::Error::from)
        .and_then(|r| Ok(r.align()?))
        .with_context(|| format!("session {}", a.session.display()))?;
    let windows = make_windows(&aligned, l, l, "infer")?;
    let preds = train::predict(&params, modality, &windows)?;

    let covered = windows.len() * l;
    let clock = aligned.frame_clock_ms[..covered].to_vec();
    let bvp: Vec<f64> = preds.iter().flat_map(|p| p.bvp.iter().copied()).collect();
    let rr: Vec<f64> = preds.iter().flat_map(|p| p.rr.iter().copied()).collect();
    let spo2_clock: Vec<i64> = windows.windows.iter().map(|w| w.start_ms).collect();
    let spo2: Vec<f64> = preds.iter().map(|p| p.spo2).collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let series = |ts: Vec<i64>, vs: Vec<f64>| TimeSeries::new(ts, vs).map_err(|e| anyhow!(e));
    write_series_csv(a.out.join("bvp.csv"), &series(clock.clone(), bvp)?)?;
    write_series_csv(a.out.join("rr.csv"), &series(clock, rr)?)?;
    crate::dataio::write_csv_raw(a.out.join("spo2.csv"), &spo2_clock, &spo2)?;

    let fs_hz = aligned.frame_rate_hz();
    let mut hr = 0.0;
    let mut resp = 0.0;
    for p in &preds {
        hr += sigproc::dominant_rate_bpm(&p.bvp, fs_hz, bands.hr)?;
        resp += sigproc::dominant_rate_bpm(&p.rr, fs_hz, bands.rr)?;
    }
    let n = preds.len() as f64;
    let spo2_mean = preds.iter().map(|p| p.spo2).sum::<f64>() / n;
    println!("HR={:.1} BPM RR={:.1} BPM SpO2={:.1}%", hr / n, resp / n, spo2_mean);
    Ok(())
}
