//! Command-line front end. Every subcommand writes its JSON outputs plus a
//! `<subcommand>.manifest.json` describing the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::{attribute_user, render_table};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, DEFAULT_VOTE_SAMPLES};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig};
use crate::sampling::TauOrigin;
use crate::store::{corpus_stats, gap_histogram, read_corpus, select_split, write_corpus, CorpusManifest, Split, UserTimeline};
use crate::synth::{generate, SignalMode, SynthConfig};
use crate::temporal::PositionalMode;
use crate::training::{append_log, kfold, train_corpus, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// File name of a subcommand's run manifest.
pub fn manifest_file(subcommand: &str) -> String {
    format!("{subcommand}.manifest.json")
}
pub const SWEEP_WINDOWS: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Parser, Debug)]
#[command(name = "temt", version, about = "Train and inspect time-enriched multimodal timeline classifiers")]
pub struct Cli {
    /// Worker cap; computation is currently single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train a classifier on a corpus's train split.
    Train(TrainArgs),
    /// Majority-vote evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation.
    Kfold(KfoldArgs),
    /// Integrated Gradients post attributions.
    Attribute(AttributeArgs),
    /// Corpus statistics and inter-post gap histogram.
    Inspect(InspectArgs),
    /// Grid over window sizes and positional modes.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic-corpus config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<SignalMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub users_per_class: Option<usize>,
    #[arg(long)]
    pub min_posts: Option<usize>,
    #[arg(long)]
    pub max_posts: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub image_dim: Option<usize>,
    #[arg(long)]
    pub image_probability: Option<f64>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub informative_fraction: Option<f64>,
    #[arg(long)]
    pub positive_gap_hours: Option<f64>,
    #[arg(long)]
    pub control_gap_hours: Option<f64>,
    #[arg(long)]
    pub gap_sigma: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

/// Model and training overrides shared by train, kfold and sweep.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// JSON file `{"model": {...}, "train": {...}}`; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub positional: Option<PositionalMode>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub max_window: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub cross_layers: Option<usize>,
    #[arg(long)]
    pub cross_heads: Option<usize>,
    #[arg(long)]
    pub self_layers: Option<usize>,
    #[arg(long)]
    pub self_heads: Option<usize>,
    #[arg(long)]
    pub ffn_multiplier: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub time_epsilon: Option<f64>,
    /// first_post or previous_post.
    #[arg(long, value_parser = parse_tau_origin)]
    pub tau_origin: Option<TauOrigin>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub cycle_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    /// Non-positive disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_VOTE_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct KfoldArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_VOTE_SAMPLES)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated user ids; defaults to the chosen split.
    #[arg(long, value_delimiter = ',')]
    pub users: Vec<String>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Also emit a histogram of per-user mean gaps with this many bins.
    #[arg(long)]
    pub histogram_bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_WINDOWS)]
    pub windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = PositionalMode::ALL)]
    pub modes: Vec<PositionalMode>,
    #[arg(long, default_value_t = DEFAULT_VOTE_SAMPLES)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn parse_tau_origin(s: &str) -> std::result::Result<TauOrigin, String> {
    match s {
        "first_post" => Ok(TauOrigin::FirstPost),
        "previous_post" => Ok(TauOrigin::PreviousPost),
        _ => Err(format!("expected first_post or previous_post, got {s}")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected train, val or test, got {s}")),
    }
}

impl std::fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub tool_version: String,
    pub threads: usize,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

struct Run {
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(subcommand: &str, threads: usize, seed: u64, config: Value) -> Self {
        Self {
            manifest: RunManifest {
                subcommand: subcommand.into(),
                config,
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                threads,
                started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                wall_clock_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    fn input(mut self, name: &str, p: &Path) -> Self {
        self.manifest.inputs.insert(name.into(), p.to_path_buf());
        self
    }

    fn output(&mut self, name: &str, p: &Path) {
        self.manifest.outputs.insert(name.into(), p.to_path_buf());
    }

    fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        fs::create_dir_all(dir)?;
        write_json(&dir.join(manifest_file(&self.manifest.subcommand)), &self.manifest)?;
        Ok(self.manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Directory holding a report file, for its run manifest.
fn dir_of(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn synth_config(args: &GenDataArgs) -> Result<SynthConfig> {
    let mut c: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { c.$f = v; })* };
    }
    set!(mode, seed, users_per_class, min_posts, max_posts, text_dim, image_dim, image_probability, strength, informative_fraction, train_fraction, val_fraction);
    if let Some(v) = args.positive_gap_hours {
        c.positive_gap.mean_hours = v;
    }
    if let Some(v) = args.control_gap_hours {
        c.control_gap.mean_hours = v;
    }
    if let Some(v) = args.gap_sigma {
        c.positive_gap.sigma = v;
        c.control_gap.sigma = v;
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Resolves file config plus flags, with the corpus fixing embedding dims.
pub fn run_config(args: &ConfigArgs, manifest: &CorpusManifest) -> Result<RunConfig> {
    let mut c: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let m = &mut c.model;
    macro_rules! set {
        ($dst:expr; $($f:ident),*) => { $(if let Some(v) = args.$f { $dst.$f = v; })* };
    }
    set!(m; positional, window, max_window, d_model, cross_layers, cross_heads, self_layers, self_heads, ffn_multiplier, dropout, time_epsilon, tau_origin);
    m.text_dim = manifest.text_dim;
    m.image_dim = manifest.image_dim;
    let t = &mut c.train;
    set!(t; base_lr, max_lr, cycle_epochs, batch_size, epochs, seed, eval_every, val_samples);
    if let Some(v) = args.patience {
        t.patience = Some(v);
    }
    if let Some(v) = args.clip_norm {
        t.clip_norm = (v > 0.0).then_some(v);
    }
    t.strict |= args.strict;
    c.model.validate()?;
    c.train.validate()?;
    Ok(c)
}

fn cmd_gen_data(args: &GenDataArgs, threads: usize) -> Result<RunManifest> {
    let c = synth_config(args)?;
    let (timelines, manifest) = generate(&c)?;
    write_corpus(&timelines, &manifest, &args.out)?;
    let mut run = Run::new("gen-data", threads, c.seed, serde_json::to_value(&c)?);
    run.output("corpus", &args.out);
    run.finish(&args.out)
}

fn cmd_train(args: &TrainArgs, threads: usize) -> Result<RunManifest> {
    let (timelines, manifest) = read_corpus(&args.corpus)?;
    let c = run_config(&args.cfg, &manifest)?;
    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut log_err = None;
    let outcome = train_corpus(&timelines, &manifest, &c.model, &c.train, |rec| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  lr {:.3e}  val_f1 {}",
            rec.epoch,
            rec.mean_loss,
            rec.lr_last,
            rec.val_f1.map_or("-".into(), |f| format!("{f:.4}"))
        );
        if let Err(e) = append_log(&log_path, rec) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let best = args.out.join("best.ckpt");
    let last = args.out.join("last.ckpt");
    save_checkpoint(&outcome.best, &best)?;
    save_checkpoint(&outcome.last, &last)?;
    let mut run = Run::new("train", threads, c.train.seed, serde_json::to_value(&c)?).input("corpus", &args.corpus);
    run.output("best_checkpoint", &best);
    run.output("last_checkpoint", &last);
    run.output("log", &log_path);
    run.manifest.config["best_epoch"] = json!(outcome.best_epoch);
    run.finish(&args.out)
}

fn cmd_eval(args: &EvalArgs, threads: usize) -> Result<(RunManifest, Value)> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (timelines, manifest) = read_corpus(&args.corpus)?;
    let set = select_split(&timelines, &manifest, args.split);
    let ev = evaluate(&model, &set, args.samples, args.seed)?;
    let report = json!({
        "checkpoint": args.checkpoint,
        "corpus": args.corpus,
        "split": args.split,
        "seed": args.seed,
        "samples": args.samples,
        "config": model.config,
        "metrics": ev.metrics,
        "votes": ev.votes,
    });
    let mut run = Run::new(
        "eval",
        threads,
        args.seed,
        json!({"split": args.split, "samples": args.samples, "model": model.config}),
    )
    .input("checkpoint", &args.checkpoint)
    .input("corpus", &args.corpus);
    let dir = match &args.out {
        Some(p) => {
            write_json(p, &report)?;
            run.output("report", p);
            dir_of(p)
        }
        None => dir_of(&args.checkpoint),
    };
    Ok((run.finish(&dir)?, report))
}

fn cmd_kfold(args: &KfoldArgs, threads: usize) -> Result<RunManifest> {
    let (timelines, manifest) = read_corpus(&args.corpus)?;
    let c = run_config(&args.cfg, &manifest)?;
    let report = kfold(&timelines, args.k, &c.model, &c.train, args.samples)?;
    let path = args.out.join("kfold_report.json");
    write_json(&path, &json!({"config": c, "k": args.k, "report": report}))?;
    let mut run = Run::new("kfold", threads, c.train.seed, serde_json::to_value(&c)?).input("corpus", &args.corpus);
    run.output("report", &path);
    run.finish(&args.out)
}

fn cmd_attribute(args: &AttributeArgs, threads: usize) -> Result<(RunManifest, String)> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (timelines, manifest) = read_corpus(&args.corpus)?;
    let mut chosen: Vec<&UserTimeline> = if args.users.is_empty() {
        select_split(&timelines, &manifest, args.split)
    } else {
        args.users
            .iter()
            .map(|u| {
                timelines
                    .iter()
                    .find(|t| &t.user_id == u)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown user {u}")))
            })
            .collect::<Result<_>>()?
    };
    if let Some(l) = args.limit {
        chosen.truncate(l);
    }
    let reports = chosen
        .iter()
        .map(|t| attribute_user(&model, t, args.steps, args.seed))
        .collect::<Result<Vec<_>>>()?;
    let text: String = reports.iter().map(render_table).collect::<Vec<_>>().join("\n");
    let json_path = args.out.join("attributions.json");
    let txt_path = args.out.join("attributions.txt");
    write_json(&json_path, &reports)?;
    fs::write(&txt_path, &text)?;
    let mut run = Run::new("attribute", threads, args.seed, json!({"steps": args.steps, "model": model.config}))
        .input("checkpoint", &args.checkpoint)
        .input("corpus", &args.corpus);
    run.output("json", &json_path);
    run.output("table", &txt_path);
    Ok((run.finish(&args.out)?, text))
}

fn cmd_inspect(args: &InspectArgs, threads: usize) -> Result<(RunManifest, Value)> {
    let (timelines, manifest) = read_corpus(&args.corpus)?;
    let stats = corpus_stats(&timelines)?;
    let mut report = json!({"stats": stats, "splits": manifest.counts(), "text_dim": manifest.text_dim, "image_dim": manifest.image_dim});
    if let Some(b) = args.histogram_bins {
        report["gap_histogram"] = serde_json::to_value(gap_histogram(&timelines, b))?;
    }
    let mut run = Run::new("inspect", threads, 0, json!({"histogram_bins": args.histogram_bins})).input("corpus", &args.corpus);
    let dir = match &args.out {
        Some(p) => {
            write_json(p, &report)?;
            run.output("report", p);
            dir_of(p)
        }
        None => args.corpus.clone(),
    };
    Ok((run.finish(&dir)?, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub positional: PositionalMode,
    pub best_epoch: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub seconds: f64,
}

fn cmd_sweep(args: &SweepArgs, threads: usize) -> Result<(RunManifest, Vec<SweepRow>)> {
    let (timelines, manifest) = read_corpus(&args.corpus)?;
    let base = run_config(&args.cfg, &manifest)?;
    let test = select_split(&timelines, &manifest, Split::Test);
    let mut rows = Vec::new();
    for &window in &args.windows {
        for &positional in &args.modes {
            let started = Instant::now();
            let mut model = base.model.clone();
            model.window = window;
            model.positional = positional;
            model.max_window = model.max_window.max(window);
            model.validate()?;
            let outcome = train_corpus(&timelines, &manifest, &model, &base.train, |_| {})?;
            let ev = evaluate(&outcome.best, &test, args.samples, base.train.seed)?;
            let m = ev.metrics;
            let row = SweepRow {
                window,
                positional,
                best_epoch: outcome.best_epoch,
                f1: m.f1,
                precision: m.precision,
                recall: m.recall,
                accuracy: m.accuracy,
                auc: m.auc,
                seconds: started.elapsed().as_secs_f64(),
            };
            eprintln!("K={window:<4} {positional:<9} f1 {:.4}", row.f1);
            rows.push(row);
        }
    }
    let path = args.out.join("sweep.json");
    write_json(&path, &rows)?;
    let mut run = Run::new(
        "sweep",
        threads,
        base.train.seed,
        json!({"base": base, "windows": args.windows, "modes": args.modes}),
    )
    .input("corpus", &args.corpus);
    run.output("rows", &path);
    Ok((run.finish(&args.out)?, rows))
}

/// Writes to stdout, ignoring a closed pipe (e.g. output piped into `head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

/// Runs a parsed command, printing its main output to stdout.
pub fn execute(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    let t = cli.threads;
    let show = |m: &RunManifest| -> Result<()> {
        emit(&format!("{}\n", serde_json::to_string_pretty(&m.outputs)?));
        Ok(())
    };
    match &cli.command {
        Command::GenData(a) => show(&cmd_gen_data(a, t)?),
        Command::Train(a) => show(&cmd_train(a, t)?),
        Command::Eval(a) => {
            let (_, r) = cmd_eval(a, t)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&r["metrics"])?));
            Ok(())
        }
        Command::Kfold(a) => show(&cmd_kfold(a, t)?),
        Command::Attribute(a) => {
            emit(&cmd_attribute(a, t)?.1);
            Ok(())
        }
        Command::Inspect(a) => {
            emit(&format!("{}\n", serde_json::to_string_pretty(&cmd_inspect(a, t)?.1)?));
            Ok(())
        }
        Command::Sweep(a) => show(&cmd_sweep(a, t)?.0),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["temt", "gen-data", "--out", "x", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["temt", "--help"]), EXIT_OK);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::BadMagic), EXIT_DATA);
        assert_eq!(exit_code(&Error::NonFinite { op: "x" }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_USAGE);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"model": {"d_model": 16, "window": 12}, "train": {"epochs": 3}}"#).unwrap();
        let args = ConfigArgs {
            config: Some(p),
            window: Some(7),
            ..ConfigArgs::default()
        };
        let m = CorpusManifest::new(5, 2, BTreeMap::new());
        let c = run_config(&args, &m).unwrap();
        assert_eq!((c.model.d_model, c.model.window, c.train.epochs), (16, 7, 3));
        assert_eq!((c.model.text_dim, c.model.image_dim), (5, 2));
    }

    #[test]
    fn learned_mode_beyond_table_is_rejected() {
        let args = ConfigArgs {
            positional: Some(PositionalMode::Learned),
            window: Some(600),
            ..ConfigArgs::default()
        };
        let e = run_config(&args, &CorpusManifest::new(4, 4, BTreeMap::new())).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_USAGE);
    }
}
