//! The end-to-end harness: one config in, one directory of artifacts out.
//!
//! An experiment runs four pipelines over the same split: the plain CE
//! baseline, the adversarial (unbiased) teacher, the clean teacher, and
//! the distilled student. Every pipeline leaves a checkpoint, a per-epoch
//! metrics CSV and a test-set report; the run ends with a comparison
//! table in Markdown and CSV.
//!
//! One master seed drives everything: the synthetic corpus, the split,
//! and each pipeline (at a fixed per-pipeline offset, so pipelines do not
//! share batch order). Rerunning a config reproduces every artifact byte
//! for byte; wall-clock timestamps go only to `run.log`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{generate, load_jsonl, save_jsonl, split, Dataset, SyntheticSpec};
use crate::ioutil::write_atomic;
use crate::losses::DistillConfig;
use crate::metrics::MetricsReport;
use crate::models::{save_checkpoint, EncoderConfig};
use crate::report::{render_csv, render_markdown, NamedReport};
use crate::schedule::DaaConfig;
use crate::training::{
    evaluate, train_student, train_supervised, train_unbiased_teacher, EpochRow, TrainConfig,
    TrainMode, TrainOutcome,
};
use crate::{Error, Result};

/// Where the corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    /// Generate from a synthetic spec (the spec's own seed is replaced by
    /// the experiment's master seed).
    Synthetic { spec: SyntheticSpec },
    /// Load an existing JSONL corpus.
    File { path: PathBuf },
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_baseline() -> TrainConfig {
    TrainConfig { mode: TrainMode::CeBaseline, ..TrainConfig::default() }
}

fn default_unbiased() -> TrainConfig {
    TrainConfig { mode: TrainMode::DatIe, ..TrainConfig::default() }
}

fn default_student() -> TrainConfig {
    TrainConfig { mode: TrainMode::Dtdbd, ..TrainConfig::default() }
}

/// Everything an experiment needs, loadable from TOML. Train configs'
/// seeds are overwritten from the master seed; set `seed` to move the
/// whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
    /// Encoder for the student and the unbiased teacher (they must match).
    #[serde(default = "EncoderConfig::student_conv")]
    pub encoder: EncoderConfig,
    /// Encoder for the clean teacher; defaults to `encoder` plus a 16-dim
    /// domain embedding.
    #[serde(default)]
    pub clean_encoder: Option<EncoderConfig>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_baseline")]
    pub baseline: TrainConfig,
    #[serde(default = "default_unbiased")]
    pub unbiased: TrainConfig,
    #[serde(default = "default_baseline")]
    pub clean: TrainConfig,
    #[serde(default = "default_student")]
    pub student: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub daa: DaaConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if let Some(enc) = &self.clean_encoder {
            enc.validate()?;
        }
        self.distill.validate()?;
        self.daa.validate()?;
        self.baseline.validate()?;
        self.unbiased.validate()?;
        self.clean.validate()?;
        self.student.validate()?;
        if self.baseline.mode != TrainMode::CeBaseline {
            return Err(Error::Config("baseline.mode must be ce_baseline".into()));
        }
        if !matches!(self.unbiased.mode, TrainMode::Dat | TrainMode::DatIe) {
            return Err(Error::Config("unbiased.mode must be dat or dat_ie".into()));
        }
        if self.clean.mode != TrainMode::CeBaseline {
            return Err(Error::Config("clean.mode must be ce_baseline".into()));
        }
        if matches!(self.student.mode, TrainMode::Dat | TrainMode::DatIe) {
            return Err(Error::Config(
                "student.mode must be one of the student modes, not a teacher mode".into(),
            ));
        }
        Ok(())
    }

    /// The clean teacher's encoder: explicit, or the student encoder with
    /// a 16-dim domain embedding added.
    pub fn clean_encoder(&self) -> EncoderConfig {
        self.clean_encoder.clone().unwrap_or_else(|| EncoderConfig {
            domain_embed_dim: 16,
            ..self.encoder.clone()
        })
    }
}

/// What a finished experiment left on disk, plus the in-memory reports
/// for immediate rendering.
#[derive(Debug, Clone)]
pub struct ExperimentOutputs {
    pub dir: PathBuf,
    pub dataset_path: Option<PathBuf>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub reports: Vec<NamedReport>,
    pub summary_md: PathBuf,
    pub summary_csv: PathBuf,
}

/// Seed offsets per pipeline, so no two loops draw the same batch order.
const SEED_BASELINE: u64 = 1;
const SEED_UNBIASED: u64 = 2;
const SEED_CLEAN: u64 = 3;
const SEED_STUDENT: u64 = 4;

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// The per-epoch metrics CSV: two rows per epoch, one for the training
/// losses and one for the validation metrics, sharing a header. Values
/// are printed with Rust's shortest-roundtrip float formatting, so the
/// file is byte-stable across reruns.
pub(crate) fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(
        "epoch,split,f1,fned,fped,total,omega_add,omega_dkd,omega_s,\
         loss_total,loss_ce,loss_add,loss_dkd,loss_domain_ce,loss_entropy\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},train,,,,,{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.omega_add,
            r.omega_dkd,
            r.omega_s,
            r.loss_total,
            opt(r.loss_ce),
            opt(r.loss_add),
            opt(r.loss_dkd),
            opt(r.loss_domain_ce),
            opt(r.loss_entropy),
        );
        let _ = writeln!(
            out,
            "{},val,{},{},{},{},{},{},{},,,,,,",
            r.epoch, r.val_f1, r.val_fned, r.val_fped, r.val_total, r.omega_add, r.omega_dkd, r.omega_s,
        );
    }
    out
}

/// The student's weight trajectory: what the schedule actually did.
pub(crate) fn weights_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,omega_add,omega_dkd,val_f1,val_total\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.omega_add, r.omega_dkd, r.val_f1, r.val_total
        );
    }
    out
}

struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn new() -> Self {
        Self { lines: Vec::new() }
    }

    fn note(&mut self, msg: impl AsRef<str>) {
        self.lines.push(format!("[unix {}] {}", timestamp(), msg.as_ref()));
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = self.lines.join("\n") + "\n";
        write_atomic(&dir.join("run.log"), text.as_bytes())
    }
}

fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass force to overwrite",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn load_dataset(
    config: &ExperimentConfig,
    dir: &Path,
    log: &mut RunLog,
) -> Result<(Dataset, Option<PathBuf>)> {
    match &config.dataset {
        DatasetSource::Synthetic { spec } => {
            let spec = SyntheticSpec { seed: config.seed, ..spec.clone() };
            let data = generate(&spec)?;
            let path = dir.join("dataset.jsonl");
            save_jsonl(&data, &path)?;
            log.note(format!(
                "generated synthetic corpus: {} samples, {} domains -> {}",
                data.len(),
                data.num_domains,
                path.display()
            ));
            Ok((data, Some(path)))
        }
        DatasetSource::File { path } => {
            let data = load_jsonl(path)?;
            log.note(format!(
                "loaded corpus from {}: {} samples, {} domains",
                path.display(),
                data.len(),
                data.num_domains
            ));
            Ok((data, None))
        }
    }
}

/// One pipeline's bookkeeping: checkpoint, per-epoch CSV, test report.
#[allow(clippy::too_many_arguments)]
fn record_pipeline(
    name: &str,
    outcome: &TrainOutcome,
    test: &Dataset,
    dir: &Path,
    checkpoints: &mut BTreeMap<String, PathBuf>,
    reports: &mut Vec<NamedReport>,
    log: &mut RunLog,
    extra_weights_csv: bool,
) -> Result<MetricsReport> {
    let ckpt = dir.join(format!("checkpoint_{name}.json"));
    save_checkpoint(&outcome.params, &ckpt)?;
    write_atomic(&dir.join(format!("metrics_{name}.csv")), metrics_csv(&outcome.rows).as_bytes())?;
    if extra_weights_csv {
        write_atomic(&dir.join(format!("weights_{name}.csv")), weights_csv(&outcome.rows).as_bytes())?;
    }
    let report = evaluate(&outcome.params, test)?;
    let report_json = serde_json::to_string_pretty(&report)? + "\n";
    write_atomic(&dir.join(format!("report_{name}.json")), report_json.as_bytes())?;
    log.note(format!(
        "{name}: best epoch {} of {}{}; test f1 {:.4}, total {:.4}",
        outcome.best_epoch,
        outcome.rows.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        report.f1,
        report.total
    ));
    checkpoints.insert(name.to_string(), ckpt);
    reports.push(NamedReport::new(name, report.clone()));
    Ok(report)
}

/// Runs the full experiment. With `force`, an existing non-empty output
/// directory is reused (files are overwritten in place).
pub fn run_experiment(config: &ExperimentConfig, force: bool) -> Result<ExperimentOutputs> {
    config.validate()?;
    let dir = config.output_dir.clone();
    prepare_output_dir(&dir, force)?;
    let mut log = RunLog::new();
    log.note(format!("experiment started, master seed {}", config.seed));

    let (data, dataset_path) = load_dataset(config, &dir, &mut log)?;
    let parts = split(&data, config.split, config.seed)?;
    log.note(format!(
        "split {}/{}/{} (train/val/test)",
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    ));

    let mut checkpoints = BTreeMap::new();
    let mut reports = Vec::new();

    let baseline_cfg = TrainConfig { seed: config.seed + SEED_BASELINE, ..config.baseline.clone() };
    let baseline = train_supervised(&parts.train, &parts.val, &config.encoder, &baseline_cfg)?;
    record_pipeline(
        "ce_baseline",
        &baseline,
        &parts.test,
        &dir,
        &mut checkpoints,
        &mut reports,
        &mut log,
        false,
    )?;

    let unbiased_cfg = TrainConfig { seed: config.seed + SEED_UNBIASED, ..config.unbiased.clone() };
    let unbiased = train_unbiased_teacher(
        &parts.train,
        &parts.val,
        &config.encoder,
        &unbiased_cfg,
        &config.distill,
    )?;
    record_pipeline(
        "teacher_unbiased",
        &unbiased,
        &parts.test,
        &dir,
        &mut checkpoints,
        &mut reports,
        &mut log,
        false,
    )?;

    let clean_cfg = TrainConfig { seed: config.seed + SEED_CLEAN, ..config.clean.clone() };
    let clean_encoder = config.clean_encoder();
    let clean = train_supervised(&parts.train, &parts.val, &clean_encoder, &clean_cfg)?;
    record_pipeline(
        "teacher_clean",
        &clean,
        &parts.test,
        &dir,
        &mut checkpoints,
        &mut reports,
        &mut log,
        false,
    )?;

    let student_cfg = TrainConfig { seed: config.seed + SEED_STUDENT, ..config.student.clone() };
    let student = train_student(
        &parts.train,
        &parts.val,
        Some(&unbiased.params),
        Some(&clean.params),
        &config.encoder,
        &student_cfg,
        &config.distill,
        &config.daa,
    )?;
    record_pipeline(
        "student",
        &student,
        &parts.test,
        &dir,
        &mut checkpoints,
        &mut reports,
        &mut log,
        true,
    )?;

    let summary_md = dir.join("summary.md");
    let summary_csv = dir.join("summary.csv");
    write_atomic(&summary_md, render_markdown(&reports)?.as_bytes())?;
    write_atomic(&summary_csv, render_csv(&reports)?.as_bytes())?;
    log.note("summary written");
    log.write(&dir)?;

    Ok(ExperimentOutputs { dir, dataset_path, checkpoints, reports, summary_md, summary_csv })
}
