mod config;
mod failure;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use node_adapter::dataset::{read_naeb, synth_generate, write_naeb, EmbeddingSet};
use node_adapter::eval::{ablation_reports, evaluate, run_episodes, EpisodeSpec, Variant};
use node_adapter::gradcheck::{self, GradcheckSpec};
use node_adapter::napm::{read_napm, write_napm};
use node_adapter::ode::{solver_bench, solver_bench_csv, SolverMethod};
use node_adapter::train::{train_with, write_metrics};

use config::{FileConfig, SynthFlags, TrainFlags};
use failure::Failure;

const THREADS_VAR: &str = "NODE_ADAPTER_THREADS";

/// Few-shot prototype refinement with neural ODEs over precomputed
/// embeddings.
#[derive(Parser, Debug)]
#[command(name = "node-adapter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic biased-support benchmark as NAEB files.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: SynthFlags,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the field and fusion vector on a support set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Metrics file; defaults to the model path with a `.metrics.jsonl`
        /// extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Classify a query set with a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// TP, VP, TP+VP or TP+VP+NODE.
        #[arg(long, default_value = "TP+VP+NODE", conflicts_with = "ablation")]
        variant: Variant,
        /// Evaluate all four variants.
        #[arg(long)]
        ablation: bool,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the confusion matrix of each report as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
    /// Global error of each solver on dp/dt = -p over [0, 1], as CSV.
    SolverBench {
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128")]
        steps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Episodic N-way K-shot evaluation over sampled episodes.
    Episode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        visual: PathBuf,
        #[arg(long)]
        textual: PathBuf,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 1)]
        shot: usize,
        /// Query rows per class.
        #[arg(long, default_value_t = 15)]
        queries: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    All,
    Tensor,
    Field,
    Adjoint,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { config, flags, out } => synth(config.as_deref(), flags, &out),
        Command::Train {
            config,
            flags,
            support,
            prompts,
            out,
            metrics,
        } => train(config.as_deref(), flags, &support, &prompts, &out, metrics),
        Command::Eval {
            model,
            query,
            variant,
            ablation,
            report,
            confusion,
        } => eval(&model, &query, (!ablation).then_some(variant), report.as_deref(), confusion.as_deref()),
        Command::Gradcheck { threshold, seed, suite } => gradcheck(threshold, seed, suite),
        Command::SolverBench { steps, out } => bench(&steps, out.as_deref()),
        Command::Episode {
            config,
            flags,
            visual,
            textual,
            way,
            shot,
            queries,
            episodes,
            report,
        } => {
            let spec = EpisodeSpec {
                way,
                shot,
                queries,
                episodes,
                seed: 0,
            };
            episode(config.as_deref(), flags, &visual, &textual, spec, report.as_deref())
        }
    }
}

fn emit(text: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{}", text.trim_end()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::io(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
    }
}

fn describe(role: &str, path: &Path, set: &EmbeddingSet) -> serde_json::Value {
    json!({
        "role": role,
        "path": path.display().to_string(),
        "modality": set.modality(),
        "rows": set.len(),
        "dim": set.dim(),
        "classes": set.num_classes(),
    })
}

fn synth(config: Option<&Path>, flags: SynthFlags, out: &Path) -> Result<(), Failure> {
    let spec = flags.resolve(&FileConfig::load(config)?)?;
    let split = synth_generate(&spec)?;
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    let mut files = Vec::new();
    for (role, set) in [("support", &split.support), ("query", &split.query), ("prompts", &split.prompts)] {
        let path = out.join(format!("{role}.naeb"));
        write_naeb(set, &path)?;
        files.push(describe(role, &path, set));
    }
    let manifest = json!({ "command": "synth", "spec": spec, "files": files });
    emit(&serde_json::to_string_pretty(&manifest).expect("manifest serializes"), None)
}

fn train(
    config: Option<&Path>,
    flags: TrainFlags,
    support: &Path,
    prompts: &Path,
    out: &Path,
    metrics: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = flags.resolve(&FileConfig::load(config)?)?;
    let support_set = read_naeb(support)?;
    let prompt_set = read_naeb(prompts)?;
    let metrics = metrics.unwrap_or_else(|| out.with_extension("metrics.jsonl"));
    let model = train_with(&support_set, &prompt_set, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  support acc {:.4}",
            r.epoch, r.lr, r.loss, r.support_acc
        );
    })?;
    write_napm(&model, out)?;
    write_metrics(&metrics, &model.history)?;
    let summary = json!({
        "command": "train",
        "model": out.display().to_string(),
        "metrics": metrics.display().to_string(),
        "epochs": model.history.len(),
        "final_loss": model.history.last().map(|r| r.loss),
        "classes": model.num_classes(),
        "dim": model.dim(),
        "parameter_count": model.parameter_count(),
        "config": cfg,
    });
    emit(&serde_json::to_string_pretty(&summary).expect("summary serializes"), None)
}

fn eval(
    model: &Path,
    query: &Path,
    variant: Option<Variant>,
    report: Option<&Path>,
    confusion: Option<&Path>,
) -> Result<(), Failure> {
    let model = read_napm(model)?;
    let query = read_naeb(query)?;
    let reports = match variant {
        Some(v) => vec![evaluate(&model, &query, v)?],
        None => ablation_reports(&model, &query)?,
    };
    for r in &reports {
        eprintln!("{:<11} accuracy {:.4} on {} queries", r.variant.tag(), r.accuracy, r.n_queries);
    }
    if let Some(path) = confusion {
        let csv: String = reports
            .iter()
            .map(|r| format!("# {}\n{}", r.variant.tag(), r.confusion_csv()))
            .collect();
        fs::write(path, csv).map_err(|e| Failure::io(path, e))?;
    }
    let text = match variant {
        Some(_) => reports[0].to_json(),
        None => serde_json::to_string_pretty(&reports).expect("reports serialize"),
    };
    emit(&text, report)
}

fn gradcheck(threshold: f64, seed: u64, suite: Suite) -> Result<(), Failure> {
    let spec = GradcheckSpec {
        seed,
        ..GradcheckSpec::default()
    };
    let outcomes = match suite {
        Suite::All => gradcheck::run_all(&spec)?,
        Suite::Tensor => gradcheck::tensor_suite(seed)?,
        Suite::Field => gradcheck::field_suite(&spec)?,
        Suite::Adjoint => gradcheck::adjoint_suite(&spec)?,
    };
    let checks: Vec<_> = outcomes
        .iter()
        .map(|c| {
            json!({
                "suite": c.suite,
                "name": c.name,
                "relative_error": c.relative_error,
                "pass": c.relative_error < threshold,
            })
        })
        .collect();
    let worst = gradcheck::worst(&outcomes);
    let failed = outcomes.iter().filter(|c| !(c.relative_error < threshold)).count();
    let report = json!({
        "threshold": threshold,
        "spec": spec,
        "max_relative_error": worst.map(|c| c.relative_error),
        "failed": failed,
        "checks": checks,
    });
    emit(&serde_json::to_string_pretty(&report).expect("report serializes"), None)?;
    match worst {
        Some(w) if failed > 0 => Err(Failure::Check(format!("{failed} checks at or above {threshold:e}; worst {w}"))),
        _ => {
            eprintln!("all {} checks below {threshold:e}", outcomes.len());
            Ok(())
        }
    }
}

fn bench(steps: &[usize], out: Option<&Path>) -> Result<(), Failure> {
    if steps.contains(&0) {
        return Err(Failure::Usage("--steps values must be at least 1".into()));
    }
    let rows = solver_bench(&SolverMethod::ALL, steps)?;
    emit(&solver_bench_csv(&rows), out)
}

fn worker_threads() -> Result<usize, Failure> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
    }
}

fn episode(
    config: Option<&Path>,
    flags: TrainFlags,
    visual: &Path,
    textual: &Path,
    mut spec: EpisodeSpec,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = flags.resolve(&FileConfig::load(config)?)?;
    spec.seed = cfg.seed;
    let threads = worker_threads()?;
    let visual = read_naeb(visual)?;
    let textual = read_naeb(textual)?;
    let summary = run_episodes(&visual, &textual, &spec, &cfg, threads)?;
    for (v, acc) in &summary.mean_accuracy {
        eprintln!("{:<11} mean accuracy {acc:.4}", v.tag());
    }
    emit(&serde_json::to_string_pretty(&summary).expect("summary serializes"), report)
}
