//! Command-line runner: corpus synthesis, training runs, evaluation suites,
//! ablation grids, gradient verification, and artifact inspection.
//!
//! Every subcommand reads an optional JSON config file whose keys individual
//! flags override. Artifacts land under `--out-dir`, falling back to the
//! `ECL_OUT_DIR` environment variable and then `./runs`.

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecl_core::{
    ablate, ablation_csv, generate, read_manifest, run_gradcheck, run_suite, suite_plans, train,
    write_corpus, Corpus, GeneratorSpec, LossMode, SuiteMode, TrainConfig, FD_TOLERANCE,
};
use std::fs;
use std::path::{Path, PathBuf};

// Training graphs allocate and free large tensors every batch; the system
// allocator's mmap churn for those sizes roughly doubles wall-clock time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const OUT_DIR_ENV: &str = "ECL_OUT_DIR";
const OUT_DIR_FALLBACK: &str = "runs";

#[derive(Parser)]
#[command(
    name = "ecl",
    version,
    about = "Ensemble curriculum learning on multichannel time series: corpora, training, suites"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a trial corpus plus its JSON manifest.
    Generate(GenerateArgs),
    /// Train one ensemble on a single train/val/test split.
    Train(TrainArgs),
    /// Run every fold (cv) or every held-out subject (loso) and aggregate.
    Suite(SuiteArgs),
    /// Sweep loss modes against ensemble sizes; one suite per grid cell.
    Ablate(AblateArgs),
    /// Verify every gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the manifest of a corpus file, run directory, or suite directory.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Corpus file to write; the manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings (missing keys take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    /// Trials per class per session.
    #[arg(long)]
    trials_per_class: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Sampling rate in Hz.
    #[arg(long)]
    fs: Option<f64>,
    /// Trial duration in seconds.
    #[arg(long)]
    trial_secs: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    /// Strength of the per-subject mixing perturbation.
    #[arg(long)]
    sigma_mix: Option<f64>,
    #[arg(long)]
    noise_level: Option<f64>,
    /// Strength of the per-session mixing perturbation.
    #[arg(long)]
    session_shift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Training settings shared by `train`, `suite`, and `ablate`: an optional
/// JSON config file with per-key flag overrides, plus output routing.
#[derive(Args)]
struct HyperArgs {
    /// Corpus file produced by `generate`.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with training settings (missing keys take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base directory for artifacts; defaults to $ECL_OUT_DIR, then ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate for the first half of training.
    #[arg(long)]
    lr_phase1: Option<f64>,
    /// Learning rate for the second half.
    #[arg(long)]
    lr_phase2: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Ensemble size K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda_distill: Option<f64>,
    /// Objective: ce, subj, or total.
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_loss_mode(s: &str) -> ecl_core::Result<LossMode> {
    s.parse()
}

impl HyperArgs {
    fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr_phase1 {
            cfg.lr_phase1 = v;
        }
        if let Some(v) = self.lr_phase2 {
            cfg.lr_phase2 = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.lambda_distill {
            cfg.lambda_distill = v;
        }
        if let Some(v) = self.loss_mode {
            cfg.loss_mode = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }

    fn corpus(&self) -> anyhow::Result<Corpus> {
        ecl_core::read_corpus(&self.corpus)
            .with_context(|| format!("reading corpus {}", self.corpus.display()))
    }

    fn out_dir(&self, name: &str) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(OUT_DIR_FALLBACK))
            .join(name)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Directory name for this run's artifacts under the base directory.
    #[arg(long, default_value = "run")]
    name: String,
    /// Number of cross-validation folds the split is drawn from.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Test fold index.
    #[arg(long, default_value_t = 0, conflicts_with = "loso_subject")]
    fold: usize,
    /// Hold out this subject instead of using a fold.
    #[arg(long)]
    loso_subject: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteKind {
    Cv,
    Loso,
}

/// Evaluation-protocol selection shared by `suite` and `ablate`.
#[derive(Args)]
struct ProtocolArgs {
    /// Evaluation protocol.
    #[arg(long, value_enum, default_value_t = SuiteKind::Cv)]
    mode: SuiteKind,
    /// Number of folds in cv mode.
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

impl ProtocolArgs {
    fn suite_mode(&self) -> SuiteMode {
        match self.mode {
            SuiteKind::Cv => SuiteMode::Cv { n_folds: self.folds },
            SuiteKind::Loso => SuiteMode::Loso,
        }
    }
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Directory name for the suite's artifacts under the base directory.
    #[arg(long, default_value = "suite")]
    name: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Directory name for the grid's artifacts under the base directory.
    #[arg(long, default_value = "ablation")]
    name: String,
    /// Ensemble sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    ks: Vec<usize>,
    /// Loss modes to sweep.
    #[arg(long, value_delimiter = ',', value_parser = parse_loss_mode,
          default_value = "ce,subj,total")]
    modes: Vec<LossMode>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random seeds (shape draws) per operation.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Corpus file, manifest file, or run/suite directory.
    path: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let raw =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

/// Prints to stdout, treating a broken pipe (e.g. `ecl inspect | head`) as a
/// clean exit instead of a panic.
fn out(text: std::fmt::Arguments<'_>) {
    use std::io::Write as _;
    let mut stdout = std::io::stdout().lock();
    if let Err(err) = stdout.write_fmt(text) {
        if err.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing to stdout: {err}");
        std::process::exit(1);
    }
}

macro_rules! outln {
    ($($arg:tt)*) => { out(format_args!("{}\n", format_args!($($arg)*))) };
}

macro_rules! outraw {
    ($($arg:tt)*) => { out(format_args!($($arg)*)) };
}

fn run_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let mut spec: GeneratorSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => GeneratorSpec::default(),
    };
    if let Some(v) = args.subjects {
        spec.n_subjects = v;
    }
    if let Some(v) = args.sessions {
        spec.n_sessions = v;
    }
    if let Some(v) = args.trials_per_class {
        spec.trials_per_class = v;
    }
    if let Some(v) = args.channels {
        spec.channels = v;
    }
    if let Some(v) = args.fs {
        spec.fs = v;
    }
    if let Some(v) = args.trial_secs {
        spec.trial_secs = v;
    }
    if let Some(v) = args.classes {
        spec.n_classes = v;
    }
    if let Some(v) = args.sigma_mix {
        spec.sigma_mix = v;
    }
    if let Some(v) = args.noise_level {
        spec.noise_level = v;
    }
    if let Some(v) = args.session_shift {
        spec.session_shift = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }

    let trials = generate(&spec)?;
    let corpus = Corpus { trials, fs: spec.fs };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let manifest = write_corpus(&args.out, &corpus, Some(spec))?;
    outln!(
        "wrote {} trials ({} subjects, {} channels x {} samples) to {}",
        manifest.n_trials,
        manifest.subjects.len(),
        manifest.channels,
        manifest.samples,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.hyper.train_config()?;
    let corpus = args.hyper.corpus()?;
    let out_dir = args.hyper.out_dir(&args.name);
    fs::create_dir_all(&out_dir)?;

    // Draw the split exactly as the suites would, so `train --fold 2` is
    // fold_2 of `suite --mode cv` under the same seed.
    let (mode, wanted) = match args.loso_subject {
        Some(s) => (SuiteMode::Loso, format!("subject_{s}")),
        None => (SuiteMode::Cv { n_folds: args.folds }, format!("fold_{}", args.fold)),
    };
    let plan = suite_plans(mode, &corpus, cfg.seed)?
        .into_iter()
        .find(|(name, _)| *name == wanted)
        .map(|(_, plan)| plan)
        .ok_or_else(|| anyhow::anyhow!("no split named {wanted}"))?;

    let manifest = train(&cfg, &corpus, &plan, &out_dir)?;
    outln!(
        "best val acc {:.4} at epoch {}; test acc {:.4}; artifacts in {}",
        manifest.best_val_accuracy,
        manifest.best_epoch,
        manifest.test.accuracy,
        out_dir.display()
    );
    Ok(())
}

fn run_suite_cmd(args: &SuiteArgs) -> anyhow::Result<()> {
    let cfg = args.hyper.train_config()?;
    let corpus = args.hyper.corpus()?;
    let out_dir = args.hyper.out_dir(&args.name);

    let report = run_suite(args.protocol.suite_mode(), &cfg, &corpus, &out_dir)?;
    for row in &report.rows {
        outln!("{}: test acc {:.4}", row.run, row.test_accuracy);
    }
    outln!(
        "mean test acc {:.4} over {} runs; report in {}",
        report.mean_test_accuracy,
        report.rows.len(),
        out_dir.display()
    );
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let cfg = args.hyper.train_config()?;
    let corpus = args.hyper.corpus()?;
    let out_dir = args.hyper.out_dir(&args.name);

    let table = ablate(args.protocol.suite_mode(), &cfg, &corpus, &args.ks, &args.modes, &out_dir)?;
    outraw!("{}", ablation_csv(&table));
    outln!("grid written to {}", out_dir.display());
    Ok(())
}

fn run_gradcheck_cmd(args: &GradcheckArgs) -> anyhow::Result<()> {
    let reports = run_gradcheck(args.seeds)?;
    outln!("{:<26} {:>12} {:>8}", "op", "max_rel_err", "checks");
    let mut failures = 0;
    for r in &reports {
        outln!(
            "{:<26} {:>12.3e} {:>8}  {}",
            r.name,
            r.max_rel_err,
            r.checks,
            if r.passed() { "ok" } else { "FAIL" }
        );
        failures += usize::from(!r.passed());
    }
    if failures > 0 {
        bail!("{failures} operations exceeded max relative error {FD_TOLERANCE:.0e}");
    }
    outln!("all {} operations within {FD_TOLERANCE:.0e}", reports.len());
    Ok(())
}

fn run_inspect(args: &InspectArgs) -> anyhow::Result<()> {
    let path = &args.path;
    if path.is_dir() {
        let run_manifest = path.join("manifest.json");
        if run_manifest.is_file() {
            let value: serde_json::Value = read_json(&run_manifest)?;
            outln!("{}", serde_json::to_string_pretty(&value)?);
            return Ok(());
        }
        for report in ["report.csv", "ablation.csv"] {
            let file = path.join(report);
            if file.is_file() {
                outraw!("{}", fs::read_to_string(&file)?);
                return Ok(());
            }
        }
        bail!(
            "{} holds neither manifest.json nor a report CSV",
            path.display()
        );
    }
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value = read_json(path)?;
        outln!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    // Anything else is treated as a corpus with a sibling manifest.
    let manifest =
        read_manifest(path).with_context(|| format!("reading manifest of {}", path.display()))?;
    outln!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Generate(args) => run_generate(args),
        Cmd::Train(args) => run_train(args),
        Cmd::Suite(args) => run_suite_cmd(args),
        Cmd::Ablate(args) => run_ablate(args),
        Cmd::Gradcheck(args) => run_gradcheck_cmd(args),
        Cmd::Inspect(args) => run_inspect(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
