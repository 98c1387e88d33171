use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use glcon_core::config::{Recipe, RunConfig};
use glcon_core::data::{load_dataset, LabelVector, ReportRecord};
use glcon_core::evaluation::{evaluate_predictions, EvaluationReport, LabelTable};
use glcon_core::inference::{predict_records, FusionMode, PredictionMatrix};
use glcon_core::model::Model;
use glcon_core::prompt::{PromptGrammar, PromptScheme, ReportSynthesizer};
use glcon_core::synthetic::{generate_splits, write_split};
use glcon_core::train::{configure_threads, train, LogRow, CONFIG_FILE};
use glcon_core::verify::run_suite;

const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Parser)]
#[command(name = "glcon", version, about = "Report-guided contrastive pretraining and prompt-based multi-label inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set optim.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_toml_with("", &self.overrides),
        };
        cfg.context("invalid configuration")
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory.
    #[arg(long, env = "GLCON_OUTPUT_DIR", default_value = DEFAULT_OUTPUT_DIR)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `data.train`, checkpointing every epoch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Train one run per recipe entry, each in its own subdirectory.
        #[arg(long)]
        recipe: Option<PathBuf>,
    },
    /// Score a dataset with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Prompt grammar; the checkpoint's configured grammar otherwise.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        prompt_scheme: Option<PromptScheme>,
        #[arg(long)]
        fusion: Option<FusionMode>,
        /// Prediction CSV path.
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
        /// Also evaluate against the dataset labels.
        #[arg(long)]
        eval: bool,
    },
    /// Per-class AUROC of a prediction CSV.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Labels CSV (`id,<class...>`) or a dataset file (`.jsonl`).
        #[arg(long)]
        labels: PathBuf,
        /// Per-class report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the prompt queries of every class.
    Promptgen {
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long, default_value = "detailed")]
        scheme: PromptScheme,
        /// Restrict to one class.
        #[arg(long)]
        class: Option<String>,
    },
    /// Print a report synthesized from a label vector.
    Synthesize {
        /// Comma-separated label values in class order, e.g. `1,0,-2,0,0,1`.
        #[arg(long, allow_hyphen_values = true)]
        labels: String,
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic train and eval splits.
    GenerateSynthetic {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the gradient and oracle verification suite.
    Gradcheck {
        /// Random batches and seeds per check.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn load_grammar(path: Option<&Path>, config: Option<&RunConfig>) -> Result<PromptGrammar> {
    let grammar = match (path, config) {
        (Some(p), _) => PromptGrammar::load(p),
        (None, Some(c)) => c.load_grammar(),
        (None, None) => Ok(PromptGrammar::default_grammar()),
    };
    grammar.context("cannot load prompt grammar")
}

fn load_records(path: &Path, config: &RunConfig, grammar: &PromptGrammar) -> Result<Vec<ReportRecord>> {
    let synth = ReportSynthesizer::new(grammar.clone(), config.synthesis)?;
    let records = load_dataset(path, &config.dataset_config(), Some(&synth), config.seed)
        .with_context(|| format!("cannot load dataset {}", path.display()))?;
    let k = grammar.class_names().len();
    if let Some(r) = records.iter().find(|r| r.labels.as_ref().is_some_and(|l| l.len() != k)) {
        bail!("record `{}` has a label vector of the wrong length (expected {k})", r.id);
    }
    Ok(records)
}

fn print_report(report: &EvaluationReport) {
    for c in &report.classes {
        match c.auroc {
            Some(a) => println!("{:<24} {a:.4}  (pos {}, neg {})", c.name, c.n_pos, c.n_neg),
            None => println!("{:<24} undefined  (pos {}, neg {})", c.name, c.n_pos, c.n_neg),
        }
    }
    println!("{}", report.summary());
}

fn log_progress(steps_per_epoch: usize) -> impl FnMut(&LogRow) {
    move |row| {
        if (row.step + 1) % steps_per_epoch == 0 {
            let l = &row.losses;
            eprintln!(
                "epoch {:>3} step {:>6}  total {:.4}  L {:.4}  G {:.4}  S {:.4}  M {:.4}  tau {:.4}/{:.4}",
                row.epoch, row.step, l.total, l.local, l.global, l.simsiam, l.mirrored, row.tau_local, row.tau_global
            );
        }
    }
}

fn train_one(config: &RunConfig, records: &[ReportRecord], eval: Option<&[ReportRecord]>, out: &Path) -> Result<Option<f64>> {
    let steps = records.len().div_ceil(config.train.batch_size.min(records.len()).max(1));
    let outcome = train(config, records, out, log_progress(steps))?;
    eprintln!("wrote {} checkpoints under {}", outcome.checkpoints.len(), out.display());
    let Some(eval) = eval else {
        return Ok(None);
    };
    let grammar = config.load_grammar()?;
    let inf = &config.inference;
    let preds = predict_records(&outcome.model, eval, &grammar, inf.prompt_scheme, inf.fusion)?;
    let labels = LabelTable::from_records(eval, &preds.classes)?;
    let report = evaluate_predictions(&preds, &labels)?;
    preds.write_csv(&out.join("predictions.csv"))?;
    report.write_csv(&out.join("evaluation.csv"))?;
    print_report(&report);
    Ok(Some(report.mean_auroc))
}

fn cmd_train(config: &ConfigArgs, out: &Path, recipe: Option<&Path>) -> Result<()> {
    let base = config.load()?;
    configure_threads(base.train.threads)?;
    let grammar = base.load_grammar()?;
    base.class_names(&grammar)?;
    let train_path = base
        .data
        .train
        .as_deref()
        .context("no training data: set `data.train`")?;
    let records = load_records(train_path, &base, &grammar)?;
    let eval = match &base.data.eval {
        Some(p) => Some(load_records(p, &base, &grammar)?),
        None => None,
    };
    eprintln!("{} training records", records.len());
    let Some(recipe) = recipe else {
        train_one(&base, &records, eval.as_deref(), out)?;
        return Ok(());
    };
    let recipe = Recipe::load(recipe)?;
    let mut summary = String::from("run,local,global,simsiam,mirrored,mean_auroc\n");
    for run in &recipe.runs {
        eprintln!("== run {}", run.name);
        let cfg = run.apply(&base)?;
        let mean = train_one(&cfg, &records, eval.as_deref(), &out.join(&run.name))?;
        let [a, b, c, d] = run.weights;
        let mean = mean.map(|m| m.to_string()).unwrap_or_default();
        summary.push_str(&format!("{},{a},{b},{c},{d},{mean}\n", run.name));
    }
    fs::create_dir_all(out)?;
    let path = out.join("recipe_summary.csv");
    fs::write(&path, summary).with_context(|| format!("cannot write {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn checkpoint_config(checkpoint: &Path) -> Result<RunConfig> {
    let path = checkpoint.join(CONFIG_FILE);
    if path.exists() {
        RunConfig::load(&path, &[]).with_context(|| format!("cannot read {}", path.display()))
    } else {
        Ok(RunConfig::default())
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    checkpoint: &Path,
    dataset: &Path,
    grammar: Option<&Path>,
    scheme: Option<PromptScheme>,
    fusion: Option<FusionMode>,
    out: &Path,
    eval: bool,
) -> Result<()> {
    let config = checkpoint_config(checkpoint)?;
    let model = Model::load(checkpoint).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let grammar = load_grammar(grammar, Some(&config))?;
    let records = load_records(dataset, &config, &grammar)?;
    let scheme = scheme.unwrap_or(config.inference.prompt_scheme);
    let fusion = fusion.unwrap_or(config.inference.fusion);
    let preds = predict_records(&model, &records, &grammar, scheme, fusion)?;
    preds.write_csv(out)?;
    eprintln!("wrote {} predictions to {}", preds.ids.len(), out.display());
    if eval {
        let labels = LabelTable::from_records(&records, &preds.classes)?;
        print_report(&evaluate_predictions(&preds, &labels)?);
    }
    Ok(())
}

fn cmd_eval(predictions: &Path, labels: &Path, out: Option<&Path>) -> Result<()> {
    let preds = PredictionMatrix::read_csv(predictions)?;
    let truth = if labels.extension().is_some_and(|e| e == "csv") {
        LabelTable::read_csv(labels)?
    } else {
        let config = RunConfig::default();
        let grammar = PromptGrammar::default_grammar();
        let records = load_records(labels, &config, &grammar)?;
        LabelTable::from_records(&records, &preds.classes)?
    };
    let report = evaluate_predictions(&preds, &truth)?;
    if let Some(out) = out {
        report.write_csv(out)?;
    }
    print_report(&report);
    Ok(())
}

fn cmd_promptgen(grammar: Option<&Path>, scheme: PromptScheme, class: Option<&str>) -> Result<()> {
    let grammar = load_grammar(grammar, None)?;
    let names = grammar.class_names();
    if let Some(c) = class {
        if !names.iter().any(|n| n == c) {
            bail!("unknown class `{c}`; known: {}", names.join(", "));
        }
    }
    for (name, q) in names.iter().zip(grammar.expand(scheme)?) {
        if class.is_some_and(|c| c != name) {
            continue;
        }
        for p in &q.positive {
            println!("{name}\tpositive\t{p}");
        }
        for n in &q.negative {
            println!("{name}\tnegative\t{n}");
        }
    }
    Ok(())
}

fn cmd_synthesize(labels: &str, grammar: Option<&Path>, seed: u64) -> Result<()> {
    let grammar = load_grammar(grammar, None)?;
    let values = labels
        .split(',')
        .map(|v| v.trim().parse::<i8>().with_context(|| format!("bad label value `{v}`")))
        .collect::<Result<Vec<_>>>()?;
    let k = grammar.class_names().len();
    if values.len() != k {
        bail!("expected {k} label values, got {}", values.len());
    }
    let synth = ReportSynthesizer::new(grammar, RunConfig::default().synthesis)?;
    for s in synth.synthesize(&LabelVector::new(values)?, seed)? {
        println!("{s}");
    }
    Ok(())
}

fn cmd_generate(config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = config.load()?;
    configure_threads(cfg.train.threads)?;
    let grammar = cfg.load_grammar()?;
    let classes = cfg.class_names(&grammar)?;
    let (train, eval) = generate_splits(&cfg, &grammar)?;
    write_split(out, "train", &train, &classes)?;
    write_split(out, "eval", &eval, &classes)?;
    eprintln!(
        "wrote {} train and {} eval records to {}",
        train.len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(trials: usize) -> Result<bool> {
    let report = run_suite(trials)?;
    for c in &report.checks {
        println!("{}", c.line());
    }
    let failed = report.failures().len();
    println!("{} checks, {failed} failed", report.checks.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, output, recipe } => cmd_train(&config, &output.out, recipe.as_deref())?,
        Command::Infer {
            checkpoint,
            dataset,
            grammar,
            prompt_scheme,
            fusion,
            out,
            eval,
        } => cmd_infer(&checkpoint, &dataset, grammar.as_deref(), prompt_scheme, fusion, &out, eval)?,
        Command::Eval { predictions, labels, out } => cmd_eval(&predictions, &labels, out.as_deref())?,
        Command::Promptgen { grammar, scheme, class } => cmd_promptgen(grammar.as_deref(), scheme, class.as_deref())?,
        Command::Synthesize { labels, grammar, seed } => cmd_synthesize(&labels, grammar.as_deref(), seed)?,
        Command::GenerateSynthetic { config, output } => cmd_generate(&config, &output.out)?,
        Command::Gradcheck { trials } => return cmd_gradcheck(trials),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
