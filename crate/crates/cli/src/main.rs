use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfnet_core::checkpoint;
use rfnet_core::dataset::{read_taxonomy, SynthConfig};
use rfnet_core::pipeline::{
    self, cmd_ablate, cmd_eval, cmd_generate, cmd_train, dump_features, grad_check, load_examples, param_count_csv,
    write_feature_dumps, EvalSettings, RunConfig,
};
use rfnet_core::config::parse_list;
use rfnet_core::{Error, KeyValues, ModelConfig, NetworkGraph, Result, Variant};

/// RGB-D road-scene segmentation: data generation, training, evaluation and
/// diagnostics.
#[derive(Parser)]
#[command(name = "rfnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB-D dataset.
    Generate(GenerateArgs),
    /// Train one model; writes train_log.csv and checkpoint.rfc.
    Train(RunArgs),
    /// Evaluate a checkpoint; writes eval_classes.csv, eval_bins.csv and predictions/.
    Eval(EvalArgs),
    /// Train and evaluate every variant; writes ablation.csv.
    Ablate(RunArgs),
    /// Gradient check, feature dumps or parameter counts.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Share of samples drawn from the obstacle-annotated dataset.
    #[arg(long, default_value_t = 0.5)]
    lostfound_fraction: f64,
    /// Obstacles per obstacle-annotated scene.
    #[arg(long)]
    obstacles: Option<usize>,
    /// Flat markings per obstacle-annotated scene.
    #[arg(long)]
    markings: Option<usize>,
    /// Obstacle and marking side lengths, `min,max` pixels.
    #[arg(long)]
    obstacle_size: Option<String>,
    /// Disparity an obstacle stands out from the road just below it.
    #[arg(long)]
    obstacle_margin: Option<f64>,
    /// Fraction of pixels with no stereo match.
    #[arg(long)]
    unmatched: Option<f64>,
}

/// Flags layered over the optional `key = value` config file.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated depth bin edges.
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Overrides {
    fn key_values(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::parse(&fs::read_to_string(p).map_err(rfnet_core::error::io_err(p))?)?,
            None => KeyValues::default(),
        };
        let path = |p: &Path| p.display().to_string();
        let pairs = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("variant", self.variant.clone()),
            ("bins", self.bins.clone()),
            ("out", self.out.as_deref().map(path)),
            ("data", self.data.as_deref().map(path)),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
        Ok(kv)
    }

    fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_kv(&self.key_values()?)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    o: Overrides,
    /// Print per-epoch progress to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[command(flatten)]
    o: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Diagnostic {
    GradCheck,
    DumpFeatures,
    ParamCount,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(value_enum)]
    what: Diagnostic,
    /// Use this trained model instead of the configured architecture.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Architecture preset when no checkpoint is given.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Parameters sampled by grad-check.
    #[arg(long, default_value_t = 50)]
    probes: usize,
    /// Samples dumped by dump-features.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value = "val")]
    split: String,
    #[command(flatten)]
    o: Overrides,
}

fn eval_summary(outcome: &pipeline::EvalOutcome) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".into(), |x| format!("{x:.4}"));
    format!(
        "mIoU {}  {} IoU {}",
        f(outcome.miou()),
        outcome.class_names[outcome.focus],
        f(outcome.focus_iou())
    )
}

fn model_for_diagnosis(args: &DiagnoseArgs) -> Result<ModelConfig> {
    if let Some(cp) = &args.checkpoint {
        return Ok(checkpoint::load(cp)?.0.config().clone());
    }
    let kv = args.o.key_values()?;
    match args.preset {
        Preset::Toy => ModelConfig::from_kv(&kv),
        Preset::Full => {
            let v: Variant = kv.get("variant").unwrap_or("rfnet").parse()?;
            let mut cfg = ModelConfig::full(v);
            cfg.num_classes = kv.parse_or("num_classes", 20)?;
            Ok(cfg)
        }
    }
}

fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    match args.what {
        Diagnostic::ParamCount => print!("{}", param_count_csv(&model_for_diagnosis(args)?)?),
        Diagnostic::GradCheck => {
            let cfg = model_for_diagnosis(args)?;
            let seed = args.o.seed.unwrap_or(0);
            let report = grad_check(&cfg, seed, args.probes)?;
            println!("probes,{}", report.probes.len());
            println!("max_relative_error,{:e}", report.max_rel_error());
            if let Some(w) = report.worst() {
                let names = NetworkGraph::build(&cfg, 0)?;
                println!(
                    "worst,{}[{}],analytic {:e},numeric {:e}",
                    names.params()[w.input].name,
                    w.element,
                    w.analytic,
                    w.numeric
                );
            }
            if report.max_rel_error() > 1e-4 {
                return Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {:e}",
                    report.max_rel_error()
                )));
            }
        }
        Diagnostic::DumpFeatures => {
            let run = args.o.run_config()?;
            let graph = match &args.checkpoint {
                Some(cp) => checkpoint::load(cp)?.0,
                None => NetworkGraph::build(&run.model, run.seed)?,
            };
            let taxonomy = read_taxonomy(&run.data)?;
            let mut examples = load_examples(&run.data, &args.split, &taxonomy, &run.prep)?;
            examples.truncate(args.samples);
            let dumps = dump_features(&graph, &examples)?;
            write_feature_dumps(&dumps, &run.out)?;
            println!("wrote {} feature sets to {}", dumps.len(), run.out.join(pipeline::FEATURES).display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut cfg = SynthConfig::new(a.seed, a.train, a.val, a.height, a.width);
            cfg.lostfound_fraction = a.lostfound_fraction;
            if let Some(n) = a.obstacles {
                cfg.scene.obstacles = n;
            }
            if let Some(n) = a.markings {
                cfg.scene.markings = n;
            }
            if let Some(m) = a.obstacle_margin {
                cfg.scene.obstacle_margin = m;
            }
            if let Some(u) = a.unmatched {
                cfg.scene.unmatched_fraction = u;
            }
            if let Some(s) = &a.obstacle_size {
                match parse_list(s)?[..] {
                    [lo, hi] => cfg.scene.obstacle_size = (lo, hi),
                    _ => return Err(Error::Config("obstacle size needs `min,max`".into())),
                }
            }
            cmd_generate(&a.out, &cfg)?;
            println!("wrote {} train / {} val samples to {}", a.train, a.val, a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = a.o.run_config()?;
            cfg.verbose |= a.verbose;
            let outcome = cmd_train(&cfg)?;
            if let Some(last) = outcome.records.last() {
                println!("epoch {} loss {:.5}", last.epoch, last.loss);
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval(a) => {
            let cfg = a.o.run_config()?;
            let (graph, _) = checkpoint::load(&a.checkpoint)?;
            let outcome = cmd_eval(&graph, &cfg.data, &a.split, &EvalSettings::from_run(&cfg), &cfg.out)?;
            println!("{}", eval_summary(&outcome));
        }
        Command::Ablate(a) => {
            let mut cfg = a.o.run_config()?;
            cfg.verbose |= a.verbose;
            let rows = cmd_ablate(&cfg)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
        Command::Diagnose(a) => diagnose(&a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
