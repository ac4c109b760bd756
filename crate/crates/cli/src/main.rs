use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lora_lab::analysis::{self, AnalysisOptions};
use lora_lab::config::ExperimentConfig;
use lora_lab::gamma::{self, DEFAULT_T_MAX};
use lora_lab::records::{self, SweepSummary, TrialSummary};
use lora_lab::runner::{self, SweepGrid, TaskData};
use lora_lab::{svg, Error, Exponent, InitScheme};

#[derive(Parser)]
#[command(name = "lora-lab", version, about = "Width-scaling laboratory for LoRA finetuning")]
struct Cli {
    /// Worker threads (falls back to LORA_LAB_THREADS, then the config)
    #[arg(long, global = true, env = "LORA_LAB_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exponent trajectory and regime verdicts for a learning-rate exponent
    Predict {
        #[arg(long, value_enum, default_value = "both")]
        scheme: SchemeArg,
        /// Exponent of the learning rate in n: -1/2, -1, 0.25, -inf, ...
        #[arg(long, allow_hyphen_values = true)]
        lr_exp: Exponent,
        #[arg(long, default_value_t = DEFAULT_T_MAX)]
        t_max: usize,
    },
    /// Run one trial and write its curves
    Train(RunArgs),
    /// Run a width x lr x scheme x seed sweep
    Sweep(RunArgs),
    /// Fit scaling exponents to sweep records and compare with theory
    Analyze {
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 1 if a mandatory verdict fails
        #[arg(long)]
        strict: bool,
        /// Smallest width included in asymptotic fits
        #[arg(long, default_value_t = analysis::ASYMPTOTIC_MIN_WIDTH)]
        min_width: usize,
    },
    /// Render SVG charts from sweep records
    Plot {
        records: PathBuf,
        #[arg(long, value_enum)]
        kind: ChartKind,
        #[arg(long)]
        out: PathBuf,
        /// Widths for per-width panels (default: smallest and largest)
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "both")]
    Both,
}

impl SchemeArg {
    fn schemes(self) -> Vec<InitScheme> {
        match self {
            SchemeArg::A => vec![InitScheme::InitA],
            SchemeArg::B => vec![InitScheme::InitB],
            SchemeArg::Both => InitScheme::BOTH.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ChartKind {
    EtaStarVsWidth,
    FeatureNormsVsStep,
    LossVsStep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Predict { scheme, lr_exp, t_max } => {
            let reports = scheme
                .schemes()
                .into_iter()
                .map(|s| gamma::predict(s, lr_exp, t_max))
                .collect::<Result<Vec<_>, _>>()?;
            let json = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(&reports)?
            };
            println!("{json}");
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            with_pool(cli.threads, cfg.threads, || train(&cfg, &args))??;
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            with_pool(cli.threads, cfg.threads, || sweep(&cfg))??;
        }
        Command::Analyze { records, out, strict, min_width } => {
            let result = records::load_sweep(&records)?;
            let options = AnalysisOptions { min_width, ..AnalysisOptions::default() };
            let report = analysis::analyze(&result, options);
            let json = records::to_json(&report)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("analysis.json"), &json)?;
            }
            print!("{json}");
            if strict && !report.mandatory_pass {
                eprintln!("mandatory verdict failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { records, kind, out, widths } => {
            let result = records::load_sweep(&records)?;
            let widths = widths.unwrap_or_else(|| {
                let mut w: Vec<usize> = result.records.iter().map(|r| r.width).collect();
                w.sort_unstable();
                w.dedup();
                match (w.first(), w.last()) {
                    (Some(&a), Some(&b)) if a != b => vec![a, b],
                    (Some(&a), _) => vec![a],
                    _ => vec![],
                }
            });
            let (name, doc) = match kind {
                ChartKind::EtaStarVsWidth => ("eta_star_vs_width.svg", svg::eta_star_chart(&result)?),
                ChartKind::FeatureNormsVsStep => ("feature_norms_vs_step.svg", svg::feature_norms_chart(&result, &widths)?),
                ChartKind::LossVsStep => ("loss_vs_step.svg", svg::loss_chart(&result, &widths)?),
            };
            create_dir(&out)?;
            let path = out.join(name);
            write(&path, &doc)?;
            println!("{}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_config(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(widths) = &args.widths {
        cfg.sweep.widths = widths.clone();
        cfg.train.width = widths[0];
    }
    if let Some(lrs) = &args.lrs {
        cfg.sweep.lrs = lora_lab::config::LrAxis::List(lrs.clone());
        cfg.train.lr = lrs[0];
    }
    if let Some(scheme) = args.scheme {
        cfg.sweep.schemes = scheme.schemes();
        cfg.train.scheme = cfg.sweep.schemes[0];
    }
    Ok(cfg)
}

fn with_pool<T>(flag: Option<usize>, from_config: usize, f: impl FnOnce() -> T + Send) -> Result<T, Error>
where
    T: Send,
{
    let threads = flag.unwrap_or(from_config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

fn train(cfg: &ExperimentConfig, args: &RunArgs) -> Result<(), Error> {
    if args.widths.as_ref().is_some_and(|w| w.len() > 1) || args.lrs.as_ref().is_some_and(|l| l.len() > 1) {
        return Err(Error::Invalid("train takes a single width and a single lr".into()));
    }
    if args.scheme == Some(SchemeArg::Both) {
        return Err(Error::Invalid("train takes a single scheme (A or B)".into()));
    }
    let t = &cfg.train;
    let trial = cfg.trial_config(t.width, t.scheme, t.lr, runner::trial_seed(cfg.seed, t.width, 0))?;
    let task = TaskData::generate(cfg.seed)?;
    let prepared = runner::PreparedBackbone::new(&trial.model, trial.seed, &task)?;
    let record = runner::run_trial_prepared(&trial, &task, &prepared, 0)?;

    create_dir(&cfg.out)?;
    let stem = format!("train_n{}_{}", t.width, t.scheme.label());
    records::save_csv(std::slice::from_ref(&record), &cfg.out.join(format!("{stem}.csv")))?;
    records::save_json(&TrialSummary::from(&record), &cfg.out.join(format!("{stem}.json")))?;
    println!(
        "n={} init={} lr={} loss {} -> {}{}",
        record.width,
        record.scheme.label(),
        record.lr,
        record.train_loss[0],
        record.final_train_loss,
        if record.diverged { " (diverged)" } else { "" }
    );
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<(), Error> {
    let grid: SweepGrid = cfg.sweep_grid()?;
    let task = TaskData::generate(cfg.seed)?;
    let largest = (cfg.sweep.largest_width_batch != cfg.trial.batch).then_some(cfg.sweep.largest_width_batch);
    let result = runner::run_sweep_with_batch(&grid, &cfg.sweep_base()?, &task, largest)?;

    create_dir(&cfg.out)?;
    records::save_csv(&result.records, &cfg.out.join("sweep.csv"))?;
    records::save_json(&SweepSummary::new(&grid, cfg.seed, &result), &cfg.out.join("sweep.json"))?;
    fs::write(cfg.out.join("experiment.toml"), cfg.to_toml()).map_err(|e| Error::io(cfg.out.join("experiment.toml"), e))?;
    for o in &result.optima {
        match o.lr_star {
            Some(lr) => println!("n={} init={} lr*={lr}", o.width, o.scheme.label()),
            None => println!("n={} init={} no stable lr", o.width, o.scheme.label()),
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
