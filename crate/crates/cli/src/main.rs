//! `aart`: batch workflows over annotated corpora.
//!
//! Exit codes: 0 success, 1 acceptance or gradient check failed, 2 config
//! error, 3 data error, 4 numerical error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aart_core::analysis::{coordinates_tsv, embeddings_tsv, export_embeddings, pca_project};
use aart_core::corpus::{
    generate_planted_corpus, inject_synthetic_annotators, load_corpus, stratified_split, Corpus, DataSplit,
    PlantedCorpusSpec, DEFAULT_SPLIT,
};
use aart_core::encoder::load_fixed_vectors;
use aart_core::metrics::{evaluate, write_annotator_csv, EvalReport};
use aart_core::model::AggregationSet;
use aart_core::repro::{run_acceptance_with, run_gradcheck, SuiteOptions, GRADCHECK_TOLERANCE};
use aart_core::trainer::{grid_search, train_with, Checkpoint, EpochReport, GridCell, TrainConfig, TrainOptions};
use aart_core::{Classify, ErrorClass, TOOL_VERSION};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "aart", version, about = "Annotator-aware text classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted corpus from a JSON spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stratified 50/25/25 split with the unseen-annotator transfer.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append 8 always-majority and 8 always-anti-majority annotators.
    Inject {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_set: usize,
    },
    /// Train one model, or the α×λ grid with --grid.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// JSON object with TrainConfig fields; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoint.json and epochs.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// TSV of `item_id<TAB>v1..vd` replacing the bag encoder.
        #[arg(long)]
        fixed_vectors: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model_kind: Option<String>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-annotator F1 as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Aggregation::Item)]
        aggregation: Aggregation,
    },
    /// Export annotator embeddings and their 2D PCA projection.
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Embedding TSV followed by coordinate TSV.
        #[arg(long, num_args = 2, value_names = ["EMBEDDINGS", "COORDS"])]
        out: Vec<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a random case.
    Gradcheck {
        #[arg(long)]
        seed: u64,
    },
    /// Run a verification suite.
    Repro {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregation {
    /// Only the annotators who labelled the item.
    Item,
    /// Every known annotator.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Acceptance,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            code: class.exit_code(),
            message: message.into(),
        }
    }
}

impl<E: Classify + std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::new(e.class(), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(ErrorClass::Data, format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_split(corpus: &Corpus, path: &Path) -> Result<DataSplit, Failure> {
    Ok(DataSplit::from_json(corpus, &read(path)?)?)
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoint.json")
    } else {
        path.to_path_buf()
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let path = checkpoint_path(path);
    Checkpoint::from_json(&read(&path)?).map_err(|e| Failure::new(ErrorClass::Data, format!("{}: {e}", path.display())))
}

fn merged_config(file: Option<&Path>, overrides: Map<String, Value>) -> Result<TrainConfig, Failure> {
    let mut value = match file {
        Some(p) => serde_json::from_str::<Value>(&read(p)?)
            .map_err(|e| Failure::new(ErrorClass::Config, format!("{}: {e}", p.display())))?,
        None => Value::Object(Map::new()),
    };
    let Value::Object(fields) = &mut value else {
        return Err(Failure::new(ErrorClass::Config, "config must be a JSON object"));
    };
    fields.extend(overrides);
    let config: TrainConfig =
        serde_json::from_value(value).map_err(|e| Failure::new(ErrorClass::Config, format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct EpochLine<'a> {
    tool_version: &'a str,
    #[serde(flatten)]
    report: &'a EpochReport,
}

#[derive(Serialize)]
struct GridFile<'a> {
    tool_version: &'a str,
    alpha_grid: &'a [f64],
    lambda_grid: &'a [f64],
    cells: &'a [GridCell],
    best: &'a GridCell,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    tool_version: &'a str,
    config: &'a TrainConfig,
    model_kind: String,
    checkpoint_epoch: usize,
    dev_annotator_f1: f64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate { spec, out, seed } => {
            let mut spec: PlantedCorpusSpec = serde_json::from_str(&read(&spec)?)
                .map_err(|e| Failure::new(ErrorClass::Config, format!("{}: {e}", spec.display())))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let planted = generate_planted_corpus(&spec)?;
            write(&out, &planted.corpus.to_jsonl_string())?;
            println!(
                "wrote {} items, {} annotators, {} annotations to {}",
                planted.corpus.num_items(),
                planted.corpus.num_annotators(),
                planted.corpus.records().len(),
                out.display()
            );
        }
        Command::Split { corpus, seed, out } => {
            let corpus = load_corpus(&corpus)?;
            let split = stratified_split(&corpus, DEFAULT_SPLIT, seed)?;
            write(&out, &split.to_json(&corpus))?;
            println!(
                "train {} / dev {} / test {} items",
                split.train.len(),
                split.dev.len(),
                split.test.len()
            );
        }
        Command::Inject {
            corpus,
            seed,
            out,
            per_set,
        } => {
            let corpus = load_corpus(&corpus)?;
            let injected = inject_synthetic_annotators(&corpus, per_set, seed)?;
            write(&out, &injected.to_jsonl_string())?;
            println!(
                "added {} synthetic annotators",
                injected.num_annotators() - corpus.num_annotators()
            );
        }
        Command::Train {
            corpus,
            split,
            config,
            out,
            grid,
            jobs,
            resume,
            fixed_vectors,
            seed,
            model_kind,
            max_epochs,
            learning_rate,
            batch_size,
            alpha,
            lambda,
        } => {
            let mut overrides = Map::new();
            let mut set = |k: &str, v: Option<Value>| {
                if let Some(v) = v {
                    overrides.insert(k.to_string(), v);
                }
            };
            set("seed", seed.map(Value::from));
            set("model_kind", model_kind.map(Value::from));
            set("max_epochs", max_epochs.map(Value::from));
            set("learning_rate", learning_rate.map(Value::from));
            set("batch_size", batch_size.map(Value::from));
            set("alpha", alpha.map(Value::from));
            set("lambda", lambda.map(Value::from));
            let config = merged_config(config.as_deref(), overrides)?;
            let corpus_data = load_corpus(&corpus)?;
            let split = load_split(&corpus_data, &split)?;
            let options = TrainOptions {
                fixed_vectors: fixed_vectors
                    .map(|p| load_fixed_vectors(&p, &corpus_data))
                    .transpose()?,
                resume: resume.map(|p| load_checkpoint(&p)).transpose()?,
            };
            fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let outcome = if grid {
                let g = grid_search(&corpus_data, &split, &config, &options, jobs)?;
                let file = GridFile {
                    tool_version: TOOL_VERSION,
                    alpha_grid: &config.alpha_grid,
                    lambda_grid: &config.lambda_grid,
                    cells: &g.cells,
                    best: &g.cells[g.best],
                };
                write(&out.join("grid.json"), &pretty(&file))?;
                for c in &g.cells {
                    println!(
                        "alpha {} lambda {}: dev annotator F1 {:.4}",
                        c.alpha, c.lambda, c.dev_annotator_f1
                    );
                }
                g.outcome
            } else {
                train_with(&corpus_data, &split, &config, options)?
            };
            let mut log = String::new();
            for r in &outcome.reports {
                log.push_str(
                    &serde_json::to_string(&EpochLine {
                        tool_version: TOOL_VERSION,
                        report: r,
                    })
                    .expect("serializable"),
                );
                log.push('\n');
            }
            write(&out.join("epochs.jsonl"), &log)?;
            write(&out.join("checkpoint.json"), &outcome.checkpoint.to_json())?;
            println!(
                "best epoch {} with dev annotator F1 {:.4}; checkpoint in {}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.dev_annotator_f1,
                out.display()
            );
        }
        Command::Evaluate {
            ckpt,
            corpus,
            split,
            out,
            csv,
            aggregation,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let corpus = load_corpus(&corpus)?;
            let split = load_split(&corpus, &split)?;
            ckpt.check_corpus(&corpus)?;
            let tokens = ckpt.tokenize(&corpus);
            let set = match aggregation {
                Aggregation::Item => AggregationSet::ItemAnnotators,
                Aggregation::All => AggregationSet::AllAnnotators,
            };
            let report = evaluate(&ckpt.model, &corpus, &split, &tokens, set)?;
            let file = ReportFile {
                tool_version: TOOL_VERSION,
                config: &ckpt.config,
                model_kind: ckpt.model.kind().to_string(),
                checkpoint_epoch: ckpt.epoch,
                dev_annotator_f1: ckpt.dev_annotator_f1,
                report: &report,
            };
            write(&out, &pretty(&file))?;
            if let Some(path) = csv {
                let mut buf = format!("# tool_version={TOOL_VERSION}\n").into_bytes();
                write_annotator_csv(&report, &mut buf)?;
                fs::write(&path, buf).map_err(|e| io_error(&path, e))?;
            }
            let pearson = report
                .disagreement_pearson
                .map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}"));
            println!(
                "annotator-level F1 {:.4}, global-level F1 {:.4}, disagreement r {pearson}",
                report.annotator_level_f1, report.global_level_f1
            );
        }
        Command::Project { ckpt, corpus, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let corpus = load_corpus(&corpus)?;
            ckpt.check_corpus(&corpus)?;
            let rows = export_embeddings(&ckpt.model, &corpus)?;
            let f = aart_core::analysis::annotator_embeddings(&ckpt.model)?;
            let coords = pca_project(f.view())?;
            let stamp = format!("# tool_version={TOOL_VERSION}\n");
            write(&out[0], &(stamp.clone() + &embeddings_tsv(&rows)))?;
            write(&out[1], &(stamp + &coordinates_tsv(&rows, &coords)))?;
            println!("projected {} annotators", rows.len());
        }
        Command::Gradcheck { seed } => {
            let check = run_gradcheck(seed)?;
            println!(
                "seed {seed}: max relative error {:.3e} over {} scalars (tolerance {GRADCHECK_TOLERANCE:e})",
                check.max_relative_error, check.scalars_checked
            );
            if check.max_relative_error > GRADCHECK_TOLERANCE {
                return Err(Failure {
                    code: 1,
                    message: "gradient check exceeded tolerance".into(),
                });
            }
        }
        Command::Repro {
            suite: Suite::Acceptance,
            out,
        } => {
            let results = run_acceptance_with(&SuiteOptions::default(), |r| println!("{r}"));
            if let Some(path) = out {
                #[derive(Serialize)]
                struct Results<'a> {
                    tool_version: &'a str,
                    results: &'a [aart_core::repro::CriterionResult],
                }
                write(
                    &path,
                    &pretty(&Results {
                        tool_version: TOOL_VERSION,
                        results: &results,
                    }),
                )?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure {
                    code: 1,
                    message: format!("{failed} acceptance criteria failed"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
