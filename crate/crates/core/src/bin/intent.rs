//! `intent` command-line front-end.
//!
//! Settings resolve as: built-in defaults, then `--config <file.toml>`, then
//! `INTENT_OUTPUT_DIR` (output directory only), then command-line flags.
//! Failures print one line `error: kind=<kind> msg="<message>"` to stderr
//! and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use intent_core::composer::PoolMode;
use intent_core::experiment::{cmd_generate, cmd_report, cmd_train_with, results_csv, ExperimentSpec, Variant};
use intent_core::gradcheck::{run_gradcheck, GradcheckConfig};
use intent_core::intervention::{apply_intervention, make_counterfactual, InterventionOp, MixParams};
use intent_core::objectives::CacoMetric;
use intent_core::train::OptimizerKind;
use intent_core::{Image, IntentError};

#[derive(Parser)]
#[command(name = "intent", version, about = "Noise-robust composed image retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic dataset per (noise ratio, seed).
    Generate(SpecArgs),
    /// Train every (noise ratio, variant, seed) cell on generated data.
    Train(SpecArgs),
    /// Aggregate finished runs into results.csv.
    Report(ReportArgs),
    /// Finite-difference check of every loss through the composer.
    Gradcheck(GradcheckArgs),
    /// Apply an intervention to a PPM image.
    DemoIntervene(DemoArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "INTENT_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Comma-separated noise ratios.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated variants (full, wo_vic, wo_both_reward, ...).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    /// Training triplets per dataset.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_validation: Option<usize>,
    #[arg(long)]
    clutter: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    intervention: Option<InterventionOp>,
    #[arg(long)]
    caco_metric: Option<CacoMetric>,
    #[arg(long, value_parser = parse_pool)]
    pool: Option<PoolMode>,
    /// Only evaluate after the last epoch.
    #[arg(long)]
    final_eval_only: bool,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (sgd, adam)")),
    }
}

fn parse_pool(s: &str) -> Result<PoolMode, String> {
    match s {
        "mean" => Ok(PoolMode::Mean),
        "max_query" => Ok(PoolMode::MaxQuery),
        _ => Err(format!("unknown pooling {s:?} (mean, max_query)")),
    }
}

impl SpecArgs {
    fn resolve(&self) -> Result<ExperimentSpec, IntentError> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        macro_rules! set {
            ($flag:expr => $($field:tt)+) => {
                if let Some(v) = $flag.clone() {
                    spec.$($field)+ = v;
                }
            };
        }
        set!(self.output_dir => output_dir);
        set!(self.sigmas => noise_sweep);
        set!(self.seeds => seeds);
        set!(self.variants => variants);
        set!(self.n => dataset.n_triplets);
        set!(self.clutter => dataset.clutter_level);
        set!(self.image_size => dataset.image_size);
        set!(self.epochs => train.epochs);
        set!(self.batch_size => train.batch_size);
        set!(self.lr => train.learning_rate);
        set!(self.optimizer => train.optimizer);
        set!(self.mu => train.objective.weights.mu);
        set!(self.alpha => train.objective.weights.alpha);
        set!(self.intervention => train.intervention);
        set!(self.caco_metric => train.objective.toggles.caco_metric);
        set!(self.pool => train.composer.pool);
        if let Some(n) = self.n_validation {
            spec.dataset.n_validation = Some(n);
        }
        if let Some(t) = self.tau {
            spec.train.objective.tau = t;
            spec.train.objective.similarity_tau = t;
        }
        if self.final_eval_only {
            spec.train.evaluate_each_epoch = false;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "INTENT_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "fft_mix")]
    op: InterventionOp,
    /// Amplitude donor for fft_mix.
    #[arg(long)]
    distractor: Option<PathBuf>,
    /// Fixed mix ratio for fft_mix; drawn from the seed when absent.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    crop_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Lib(IntentError),
    Gradcheck(usize),
}

impl From<IntentError> for Failure {
    fn from(e: IntentError) -> Self {
        Failure::Lib(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(args) => {
            let spec = args.resolve()?;
            for dir in cmd_generate(&spec)? {
                println!("wrote {}", dir.display());
            }
        }
        Command::Train(args) => {
            let spec = args.resolve()?;
            cmd_train_with(&spec, |s| {
                println!(
                    "sigma={} variant={} seed={} r1={:.4} r5={:.4} subset_r1={:.4}",
                    s.sigma, s.variant, s.seed, s.metrics.r1, s.metrics.r5, s.metrics.subset_r1
                );
            })?;
        }
        Command::Report(args) => {
            let output_dir = match (&args.output_dir, &args.config) {
                (Some(dir), _) => dir.clone(),
                (None, Some(path)) => ExperimentSpec::load(path)?.output_dir,
                (None, None) => ExperimentSpec::default().output_dir,
            };
            let report = cmd_report(&output_dir)?;
            for dir in &report.incomplete {
                eprintln!("incomplete run: {}", dir.display());
            }
            print!("{}", results_csv(&report));
        }
        Command::Gradcheck(args) => {
            let mut config = GradcheckConfig { batch_sizes: args.batch_sizes, seed: args.seed, ..Default::default() };
            config.objective.tau = args.tau;
            config.objective.similarity_tau = args.tau;
            let results = run_gradcheck(&config)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} term={} B={} params={} max_abs={:.3e} max_rel={:.3e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.term.name(),
                    r.batch_size,
                    r.parameters,
                    r.max_abs_error,
                    r.max_rel_error
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Failure::Gradcheck(failed));
            }
        }
        Command::DemoIntervene(args) => {
            let input = Image::read_pnm(&args.input)?;
            let distractor = match &args.distractor {
                Some(p) => Image::read_pnm(p)?,
                None if args.op == InterventionOp::FftMix => {
                    return Err(IntentError::InvalidArgument("fft_mix needs --distractor".into()).into())
                }
                None => input.clone(),
            };
            let out = match (args.op, args.lambda) {
                (InterventionOp::FftMix, Some(lambda)) => make_counterfactual(
                    &input,
                    &distractor,
                    &MixParams { lambda, crop_ratio: args.crop_ratio, rng_seed: args.seed },
                )?,
                (op, _) => {
                    let settings = intent_core::intervention::InterventionSettings {
                        crop_ratio: args.crop_ratio,
                        ..Default::default()
                    };
                    apply_intervention(op, &settings, &input, &distractor, args.seed)?
                }
            };
            write_output(&out, &args.output)?;
            println!("wrote {}", args.output.display());
        }
    }
    Ok(())
}

fn write_output(image: &Image, path: &Path) -> Result<(), IntentError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| IntentError::Io { path: parent.to_path_buf(), source: e })?;
    }
    image.write_pnm(path)
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    eprintln!("error: kind={kind} msg={msg:?}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => fail(e.kind(), &e.to_string()),
        Err(Failure::Gradcheck(n)) => fail("gradcheck_failed", &format!("{n} gradient checks failed")),
    }
}
