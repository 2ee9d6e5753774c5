//! Command-line front end. Each pipeline phase is a subcommand, and
//! `experiment` chains them all from one TOML config:
//!
//! ```text
//! dtdbd gen-data --spec table1 --n 9000 --seed 7 --out data.jsonl
//! dtdbd train-teacher-unbiased --train tr.jsonl --val va.jsonl --out t_unbiased.json
//! dtdbd train-teacher-clean    --train tr.jsonl --val va.jsonl --out t_clean.json
//! dtdbd train-student --train tr.jsonl --val va.jsonl \
//!     --teacher-unbiased t_unbiased.json --teacher-clean t_clean.json --out student.json
//! dtdbd evaluate --model student.json --data te.jsonl --out report.json
//! dtdbd experiment --config exp.toml
//! dtdbd report report_a.json report_b.json --out-md summary.md
//! ```
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed run), 2 usage
//! error. Seeds resolve as: `--seed` flag, else the `DTDBD_SEED`
//! environment variable, else the config file's value, else 0.
//!
//! Standalone commands accept `--config` with any subset of the
//! experiment TOML's sections (`[encoder]`, `[unbiased]`, `[distill]`,
//! ...); common values also have direct flags, and flags win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::data::{generate, load_jsonl, save_jsonl, split, SyntheticSpec};
use crate::experiment::{run_experiment, ExperimentConfig};
use crate::ioutil::{read_to_string, write_atomic};
use crate::losses::DistillConfig;
use crate::metrics::MetricsReport;
use crate::models::{load_checkpoint, save_checkpoint, EncoderConfig};
use crate::report::{render_csv, render_markdown, NamedReport};
use crate::schedule::DaaConfig;
use crate::training::{
    evaluate, train_student, train_supervised, train_unbiased_teacher, OptimizerKind,
    TrainConfig, TrainMode, TrainOutcome,
};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dtdbd",
    version,
    about = "Dual-teacher de-biasing distillation: data, training, evaluation, reports"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-domain corpus as JSONL.
    GenData(GenDataArgs),
    /// Train the domain-adversarial (unbiased) teacher.
    TrainTeacherUnbiased(TrainArgs),
    /// Train the accuracy-oriented (clean) teacher.
    TrainTeacherClean(TrainArgs),
    /// Train a student, optionally distilling from saved teachers.
    TrainStudent(TrainStudentArgs),
    /// Evaluate a checkpoint on a dataset and write the metrics report.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline from a TOML config into one directory.
    Experiment(ExperimentArgs),
    /// Render saved metrics reports into a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Named corpus preset.
    #[arg(long, value_parser = ["table1", "nine-domains", "nine_domains"], conflicts_with = "spec_file")]
    spec: Option<String>,
    /// Full synthetic spec as TOML (overrides --spec).
    #[arg(long)]
    spec_file: Option<PathBuf>,
    /// Total sample count.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Remove the planted domain shortcut from the feature block.
    #[arg(long)]
    shortcut_free: bool,
    /// Also write stratified splits as three ratios, e.g. 0.8,0.1,0.1;
    /// they land next to --out with .train/.val/.test inserted.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// TOML settings file (experiment-config sections, all optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV destination.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct TrainStudentArgs {
    #[command(flatten)]
    base: TrainArgs,
    #[arg(long)]
    teacher_unbiased: Option<PathBuf>,
    #[arg(long)]
    teacher_clean: Option<PathBuf>,
    /// Weight-trajectory CSV destination.
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long)]
    initial_omega_add: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Allow a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics report JSON files, one table row each.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out_md: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

/// Optional sections of the experiment TOML, for standalone commands.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SettingsFile {
    encoder: Option<EncoderConfig>,
    clean_encoder: Option<EncoderConfig>,
    baseline: Option<TrainConfig>,
    unbiased: Option<TrainConfig>,
    clean: Option<TrainConfig>,
    student: Option<TrainConfig>,
    distill: Option<DistillConfig>,
    daa: Option<DaaConfig>,
    seed: Option<u64>,
    /// Accepted so a full experiment config can be reused as-is.
    dataset: Option<toml::Value>,
    output_dir: Option<PathBuf>,
    split: Option<[f64; 3]>,
}

impl SettingsFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Ok(toml::from_str(&read_to_string(p)?)?),
        }
    }
}

/// Seed precedence: explicit flag, then DTDBD_SEED, then the file value,
/// then zero. The environment read is isolated here for testability.
fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(text) = env {
        return text.trim().parse::<u64>().map_err(|_| {
            Error::Config(format!("DTDBD_SEED must be an unsigned integer, got `{text}`"))
        });
    }
    Ok(file.unwrap_or(0))
}

fn env_seed() -> Option<String> {
    std::env::var("DTDBD_SEED").ok()
}

fn parse_mode(text: &str) -> Result<TrainMode> {
    Ok(match text {
        "ce_baseline" => TrainMode::CeBaseline,
        "dat" => TrainMode::Dat,
        "dat_ie" => TrainMode::DatIe,
        "dnd_only" => TrainMode::DndOnly,
        "add_only" => TrainMode::AddOnly,
        "dtdbd" => TrainMode::Dtdbd,
        "dtdbd_no_daa" => TrainMode::DtdbdNoDaa,
        other => {
            return Err(Error::Config(format!(
                "unknown mode `{other}` (expected ce_baseline, dat, dat_ie, dnd_only, add_only, dtdbd or dtdbd_no_daa)"
            )))
        }
    })
}

fn parse_optimizer(text: &str) -> Result<OptimizerKind> {
    match text {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(Error::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
    }
}

/// Overlays the direct flags onto a TrainConfig from the settings file.
fn resolve_train_config(args: &TrainArgs, from_file: Option<TrainConfig>, default_mode: TrainMode) -> Result<TrainConfig> {
    let mut cfg = from_file.unwrap_or_else(|| TrainConfig { mode: default_mode, ..TrainConfig::default() });
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = Some(lr);
    }
    if let Some(bs) = args.batch_size {
        cfg.batch_size = bs;
    }
    if let Some(opt) = &args.optimizer {
        cfg.optimizer = parse_optimizer(opt)?;
    }
    if let Some(p) = args.patience {
        cfg.patience = p;
    }
    Ok(cfg)
}

fn resolve_distill(args: &TrainArgs, from_file: Option<DistillConfig>) -> DistillConfig {
    let mut cfg = from_file.unwrap_or_default();
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if let Some(beta) = args.beta {
        cfg.beta = Some(beta);
    }
    cfg
}

fn write_train_artifacts(
    outcome: &TrainOutcome,
    out: &Path,
    metrics_out: Option<&Path>,
) -> Result<()> {
    save_checkpoint(&outcome.params, out)?;
    if let Some(path) = metrics_out {
        write_atomic(path, crate::experiment::metrics_csv(&outcome.rows).as_bytes())?;
    }
    Ok(())
}

fn summarize(outcome: &TrainOutcome, label: &str, out: &Path) {
    let best = &outcome.rows[outcome.best_epoch];
    println!(
        "{label}: {} epochs, best epoch {} (val f1 {:.4}, total {:.4}) -> {}",
        outcome.rows.len(),
        outcome.best_epoch,
        best.val_f1,
        best.val_total,
        out.display()
    );
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    // Every accepted --spec name is an alias for the nine-domain corpus;
    // anything else needs a full spec file.
    let mut spec = match (&args.spec_file, args.spec.as_deref()) {
        (Some(path), _) => toml::from_str::<SyntheticSpec>(&read_to_string(path)?)?,
        (None, _) => SyntheticSpec::nine_domains(9000, 0),
    };
    if let Some(n) = args.n {
        spec.total_n = n;
    }
    spec.seed = resolve_seed(args.seed, env_seed().as_deref(), Some(spec.seed))?;
    if args.shortcut_free {
        spec = spec.without_domain_signal();
    }
    let data = generate(&spec)?;
    save_jsonl(&data, &args.out)?;
    println!(
        "wrote {} samples across {} domains to {}",
        data.len(),
        data.num_domains,
        args.out.display()
    );
    if let Some(ratios_text) = &args.split {
        let ratios = parse_ratios(ratios_text)?;
        let parts = split(&data, ratios, spec.seed)?;
        for (name, part) in
            [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)]
        {
            let path = with_split_suffix(&args.out, name);
            save_jsonl(part, &path)?;
            println!("  {name}: {} samples -> {}", part.len(), path.display());
        }
    }
    Ok(())
}

fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--split wants three numbers, got `{text}`")))?;
    let [a, b, c] = parts[..] else {
        return Err(Error::Config(format!("--split wants three ratios, got `{text}`")));
    };
    Ok([a, b, c])
}

/// data.jsonl -> data.train.jsonl (and so on).
fn with_split_suffix(out: &Path, name: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    out.with_file_name(format!("{stem}.{name}.{ext}"))
}

fn cmd_train_teacher_unbiased(args: &TrainArgs) -> Result<()> {
    let file = SettingsFile::load(args.config.as_deref())?;
    let mut cfg = resolve_train_config(args, file.unbiased, TrainMode::DatIe)?;
    cfg.seed = resolve_seed(args.seed, env_seed().as_deref(), file.seed.or(Some(cfg.seed)))?;
    let distill = resolve_distill(args, file.distill);
    let encoder = file.encoder.unwrap_or_else(EncoderConfig::student_conv);
    let train = load_jsonl(&args.train)?;
    let val = load_jsonl(&args.val)?;
    let outcome = train_unbiased_teacher(&train, &val, &encoder, &cfg, &distill)?;
    write_train_artifacts(&outcome, &args.out, args.metrics_out.as_deref())?;
    summarize(&outcome, "unbiased teacher", &args.out);
    Ok(())
}

fn cmd_train_teacher_clean(args: &TrainArgs) -> Result<()> {
    let file = SettingsFile::load(args.config.as_deref())?;
    let mut cfg = resolve_train_config(args, file.clean, TrainMode::CeBaseline)?;
    cfg.seed = resolve_seed(args.seed, env_seed().as_deref(), file.seed.or(Some(cfg.seed)))?;
    let encoder = match file.clean_encoder {
        Some(enc) => enc,
        None => {
            let base = file.encoder.unwrap_or_else(EncoderConfig::student_conv);
            EncoderConfig { domain_embed_dim: 16, ..base }
        }
    };
    let train = load_jsonl(&args.train)?;
    let val = load_jsonl(&args.val)?;
    let outcome = train_supervised(&train, &val, &encoder, &cfg)?;
    write_train_artifacts(&outcome, &args.out, args.metrics_out.as_deref())?;
    summarize(&outcome, "clean teacher", &args.out);
    Ok(())
}

fn cmd_train_student(args: &TrainStudentArgs) -> Result<()> {
    let file = SettingsFile::load(args.base.config.as_deref())?;
    let mut cfg = resolve_train_config(&args.base, file.student, TrainMode::Dtdbd)?;
    cfg.seed = resolve_seed(args.base.seed, env_seed().as_deref(), file.seed.or(Some(cfg.seed)))?;
    let distill = resolve_distill(&args.base, file.distill);
    let mut daa = file.daa.unwrap_or_default();
    if let Some(omega) = args.initial_omega_add {
        daa.initial_omega_add = omega;
    }
    let encoder = file.encoder.unwrap_or_else(EncoderConfig::student_conv);
    let train = load_jsonl(&args.base.train)?;
    let val = load_jsonl(&args.base.val)?;
    let unbiased = args.teacher_unbiased.as_deref().map(load_checkpoint).transpose()?;
    let clean = args.teacher_clean.as_deref().map(load_checkpoint).transpose()?;
    let outcome = train_student(
        &train,
        &val,
        unbiased.as_ref(),
        clean.as_ref(),
        &encoder,
        &cfg,
        &distill,
        &daa,
    )?;
    write_train_artifacts(&outcome, &args.base.out, args.base.metrics_out.as_deref())?;
    if let Some(path) = &args.weights_out {
        write_atomic(path, crate::experiment::weights_csv(&outcome.rows).as_bytes())?;
    }
    summarize(&outcome, "student", &args.base.out);
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let params = load_checkpoint(&args.model)?;
    let data = load_jsonl(&args.data)?;
    let report = evaluate(&params, &data)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_atomic(&args.out, json.as_bytes())?;
    println!(
        "f1 {:.4}  fned {:.4}  fped {:.4}  total {:.4} -> {}",
        report.f1,
        report.fned,
        report.fped,
        report.total,
        args.out.display()
    );
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_toml_str(&read_to_string(&args.config)?)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.seed = resolve_seed(args.seed, env_seed().as_deref(), Some(config.seed))?;
    let outputs = run_experiment(&config, args.force)?;
    let md = std::fs::read_to_string(&outputs.summary_md)
        .map_err(|e| Error::io(&outputs.summary_md, e))?;
    println!("{md}");
    println!("artifacts in {}", outputs.dir.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut named = Vec::new();
    for path in &args.reports {
        let report: MetricsReport = serde_json::from_str(&read_to_string(path)?)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| path.display().to_string());
        named.push(NamedReport::new(name, report));
    }
    let md = render_markdown(&named)?;
    if let Some(path) = &args.out_md {
        write_atomic(path, md.as_bytes())?;
    }
    if let Some(path) = &args.out_csv {
        write_atomic(path, render_csv(&named)?.as_bytes())?;
    }
    if args.out_md.is_none() && args.out_csv.is_none() {
        print!("{md}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::TrainTeacherUnbiased(args) => cmd_train_teacher_unbiased(args),
        Cmd::TrainTeacherClean(args) => cmd_train_teacher_clean(args),
        Cmd::TrainStudent(args) => cmd_train_student(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Experiment(args) => cmd_experiment(args),
        Cmd::Report(args) => cmd_report(args),
    }
}

/// Parses and runs one invocation; returns the process exit code. Usage
/// problems print to stderr and return 2 (or 0 for --help/--version);
/// domain errors print and return 1.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
        Ok(cli) => match dispatch(cli) {
            Ok(()) => 0,
            Err(err) => {
                eprintln!("error: {err}");
                1
            }
        },
    }
}

/// Convenience for integration tests and examples: split a flat command
/// line on spaces (no quoting) and run it.
pub fn run_line(line: &str) -> i32 {
    run(line.split_whitespace())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_resolution_prefers_flag_then_env_then_file() {
        assert_eq!(resolve_seed(Some(5), Some("9"), Some(3)).unwrap(), 5);
        assert_eq!(resolve_seed(None, Some("9"), Some(3)).unwrap(), 9);
        assert_eq!(resolve_seed(None, None, Some(3)).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(resolve_seed(None, Some("not-a-number"), None).is_err());
    }

    #[test]
    fn mode_and_optimizer_strings_parse() {
        assert_eq!(parse_mode("dtdbd_no_daa").unwrap(), TrainMode::DtdbdNoDaa);
        assert_eq!(parse_mode("dat").unwrap(), TrainMode::Dat);
        assert!(parse_mode("dtd").is_err());
        assert_eq!(parse_optimizer("sgd").unwrap(), OptimizerKind::Sgd);
        assert!(parse_optimizer("adamw").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run_line("dtdbd definitely-not-a-subcommand"), 2);
        assert_eq!(run_line("dtdbd gen-data --no-such-flag x --out y"), 2);
        assert_eq!(run_line("dtdbd"), 2);
        assert_eq!(run_line("dtdbd report"), 2);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run_line("dtdbd --help"), 0);
        assert_eq!(run_line("dtdbd gen-data --help"), 0);
    }

    #[test]
    fn domain_errors_exit_with_one() {
        assert_eq!(run_line("dtdbd evaluate --model missing.json --data missing.jsonl --out /tmp/r.json"), 1);
    }
}
