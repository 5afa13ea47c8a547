//! Command-line surface: synthetic data generation, shift analysis and the
//! method-comparison experiment.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::synth::{generate_synthetic, SynthSpec};
use crate::data::{load_csv, read_text, write_atomic, write_csv, FeatureTable, ModalityMap};
use crate::error::{Error, Result};
use crate::evaluation::{run_experiment, ExperimentReport, ExperimentSettings, Method, SplitSpec};
use crate::models::{ArchitectureChoice, Preset, TaskKind};
use crate::numeric::AdamConfig;
use crate::shift::analyze_shift;
use crate::training::{AnnealSchedule, EarlyStopPolicy, TrainSettings};

pub const SEED_ENV: &str = "M3BAT_SEED";

#[derive(Debug, Parser)]
#[command(name = "m3bat", version, about = "Multi-branch domain-adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target pair, its modality map and the resolved spec.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-feature and per-modality Cohen's-d between two CSV tables.
    AnalyzeShift {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every configured method over all splits.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

/// Input data for an experiment: CSV files or a synthetic spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Files {
        source: PathBuf,
        targets: Vec<PathBuf>,
        modalities: PathBuf,
    },
    Synthetic(SynthSpec),
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_alpha() -> usize {
    1
}
fn default_mmd_weight() -> f64 {
    1.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub architecture: ArchitectureChoice,
    pub task: TaskKind,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    #[serde(default = "default_mmd_weight")]
    pub mmd_weight: f64,
    #[serde(default)]
    pub anneal: AnnealSchedule,
    #[serde(default)]
    pub early_stop: EarlyStopPolicy,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.settings(0)?.validate()?;
        if let DataConfig::Synthetic(spec) = &cfg.data {
            spec.validate()?;
            if spec.task != cfg.task {
                return Err(Error::Validation("synthetic spec task differs from run task".into()));
            }
        }
        if let DataConfig::Files { targets, .. } = &cfg.data {
            if targets.is_empty() {
                return Err(Error::Validation("no target files".into()));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    /// A full synthetic benchmark run with the given preset.
    pub fn synthetic(task: TaskKind, preset: Preset, seed: u64) -> Self {
        RunConfig {
            data: DataConfig::Synthetic(SynthSpec::three_group_benchmark(task, seed)),
            architecture: ArchitectureChoice::Preset(preset),
            task,
            methods: default_methods(),
            alpha: default_alpha(),
            mmd_weight: default_mmd_weight(),
            anneal: AnnealSchedule::default(),
            early_stop: EarlyStopPolicy::default(),
            adam: AdamConfig::default(),
            split: SplitSpec::default(),
            seed,
            output_dir: default_output_dir(),
        }
    }

    pub fn settings(&self, jobs: usize) -> Result<ExperimentSettings> {
        let mut methods = Vec::new();
        for m in &self.methods {
            if methods.contains(m) {
                return Err(Error::Validation(format!("method `{m}` listed twice")));
            }
            methods.push(*m);
        }
        Ok(ExperimentSettings {
            train: TrainSettings {
                architecture: self.architecture.resolve(),
                task: self.task,
                adam: self.adam,
                early_stop: self.early_stop,
                anneal: self.anneal,
            },
            methods,
            alpha: self.alpha,
            mmd_weight: self.mmd_weight,
            split: self.split,
            seed: self.seed,
            jobs,
        })
    }

    /// Source table, target tables and modality map.
    pub fn load_data(&self) -> Result<(FeatureTable, Vec<FeatureTable>, ModalityMap)> {
        match &self.data {
            DataConfig::Synthetic(spec) => {
                let d = generate_synthetic(spec)?;
                Ok((d.source, vec![d.target], d.modalities))
            }
            DataConfig::Files {
                source,
                targets,
                modalities,
            } => {
                let s = load_csv(source, modalities)?;
                let ts = targets
                    .iter()
                    .map(|t| load_csv(t, modalities).map(|l| l.table))
                    .collect::<Result<Vec<_>>>()?;
                Ok((s.table, ts, s.modalities))
            }
        }
    }
}

/// Apply the seed override from the environment, if set.
pub fn apply_seed_override(cfg: &mut RunConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        let seed: u64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        cfg.seed = seed;
    }
    Ok(())
}

pub fn cmd_gen_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SynthSpec =
        serde_json::from_str(&read_text(spec_path)?).map_err(|e| Error::Schema(e.to_string()))?;
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&data.source, &out.join("source.csv"))?;
    write_csv(&data.target, &out.join("target.csv"))?;
    let map = data.modalities.to_text(data.source.feature_names())?;
    write_atomic(&out.join("modalities.map"), map.as_bytes())?;
    let resolved = serde_json::to_string_pretty(&spec)?;
    write_atomic(&out.join("synth_spec.json"), resolved.as_bytes())?;
    Ok(())
}

pub fn cmd_analyze_shift(source: &Path, target: &Path, map: &Path, out: &Path) -> Result<()> {
    let s = load_csv(source, map)?;
    let t = load_csv(target, map)?;
    let report = analyze_shift(&s.table, &t.table, &s.modalities)?;
    write_atomic(out, report.to_json()?.as_bytes())
}

/// Run the configured experiment and write `summary.csv`, `report.json` and
/// one trace CSV per (method, target, repeat) under the output directory.
pub fn run_config(cfg: &RunConfig, jobs: usize) -> Result<ExperimentReport> {
    let settings = cfg.settings(jobs)?;
    let (source, targets, modalities) = cfg.load_data()?;
    let report = run_experiment(&source, &targets, &modalities, &settings)?;
    let dir = &cfg.output_dir;
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    write_atomic(&dir.join("summary.csv"), report.summary_csv()?.as_bytes())?;
    let detail = serde_json::json!({ "config": cfg, "report": &report });
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&detail)?.as_bytes())?;
    for cell in &report.cells {
        for (method, trace) in &cell.traces {
            let name = format!("{method}_{}_r{}.csv", sanitize(&cell.target), cell.repeat);
            write_atomic(&traces.join(name), trace.to_csv()?.as_bytes())?;
        }
    }
    Ok(report)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn cmd_experiment(config: &Path, jobs: usize) -> Result<ExperimentReport> {
    let mut cfg = RunConfig::load(config)?;
    apply_seed_override(&mut cfg, std::env::var(SEED_ENV).ok().as_deref())?;
    let report = run_config(&cfg, jobs)?;
    print!("{}", report.summary_table());
    let failures = report.failures();
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(Error::Experiment(failures))
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenSynth { spec, out } => cmd_gen_synth(spec, out),
        Command::AnalyzeShift {
            source,
            target,
            map,
            out,
        } => cmd_analyze_shift(source, target, map, out),
        Command::Experiment { config, jobs } => cmd_experiment(config, *jobs).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
