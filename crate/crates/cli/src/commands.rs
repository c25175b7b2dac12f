use std::path::{Path, PathBuf};
use std::sync::Arc;

use textclust_core::aggregation::AggregationOutcome;
use textclust_core::pipeline::{
    evaluate_stage3, sample_std, RepeatSummary, AGGREGATION_FILE, CONFIG_FILE, HISTOGRAM_FILE, REPORT_FILE,
    STAGE1_FILE, STAGE3_FILE, SUMMARY_FILE,
};
use textclust_core::{
    load_corpus, split_by_class_halves, AggregationError, ArtifactDir, Backend, Corpus, CorpusFormat,
    EvaluationReport, Gateway, MetaInformation, MockBackend, MockScript, Mode, OpenAiBackend,
    PredictionHistogram, ResponseCache, RunConfig, Runner, Stage3Record, Templates,
};

use crate::config::{BackendKind, CliConfig};
use crate::error::CliError;
use crate::{Cli, Command, GlobalArgs, RunArgs};

const AUDIT_LOG: &str = "logs/completions.jsonl";

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let env = Env {
        global: cli.global,
        file,
    };
    match cli.command {
        Command::Ingest {
            corpus,
            output,
            name,
            task_type,
            split_drop,
        } => ingest(&corpus, &output, name, task_type, split_drop),
        Command::Infer { run, top } => env.infer(&run, top),
        Command::Aggregate { run } => env.aggregate(&run),
        Command::Predict { run } => env.predict(&run),
        Command::Evaluate { run } => env.evaluate(&run),
        Command::Run { run } => env.run(&run),
        Command::Report { dirs } => report(&dirs),
    }
}

fn ingest(
    path: &Path,
    output: &Path,
    name: Option<String>,
    task_type: Option<textclust_core::TaskType>,
    split_drop: Option<usize>,
) -> Result<(), CliError> {
    let mut corpus = load_corpus(path, CorpusFormat::from_path(path))?;
    if let Some(name) = name {
        corpus.name = name;
    }
    if let Some(task) = task_type {
        corpus.task_type = task;
    }
    corpus.write_jsonl(output)?;
    println!(
        "{}: {} instances, {} classes -> {}",
        corpus.name,
        corpus.len(),
        corpus.num_classes,
        output.display()
    );
    if let Some(drop) = split_drop {
        let (front, back) = split_by_class_halves(&corpus, drop)?;
        for (part, suffix) in [(&front, "front"), (&back, "back")] {
            let target = output.with_extension(format!("{suffix}.jsonl"));
            part.write_jsonl(&target)?;
            println!(
                "{}: {} instances, classes {:?} -> {}",
                part.name,
                part.len(),
                part.class_titles.as_deref().unwrap_or_default(),
                target.display()
            );
        }
    }
    Ok(())
}

struct Env {
    global: GlobalArgs,
    file: CliConfig,
}

/// Resolved inputs of one stage command.
struct Stage {
    dir: ArtifactDir,
    config: RunConfig,
    corpus: Corpus,
}

impl Env {
    fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.global
            .out_dir
            .clone()
            .or_else(|| self.file.paths.out_dir.clone())
            .ok_or_else(|| CliError::Usage("no output directory: pass --out-dir or set paths.out_dir".into()))
    }

    fn kind(&self) -> BackendKind {
        self.global.backend.unwrap_or(self.file.backend.kind)
    }

    fn model(&self) -> Option<String> {
        self.global.model.clone().or_else(|| self.file.backend.model.clone())
    }

    /// Run settings from the config file overlaid with flags.
    fn run_config(&self, args: &RunArgs) -> RunConfig {
        let mut c = self.file.run.clone();
        if let Some(model) = self.model() {
            c.model = model;
        }
        if let Some(p) = args.corpus.as_ref().or(self.file.paths.corpus.as_ref()) {
            c.corpus = Some(p.display().to_string());
        }
        c.task_type = args.task_type.or(c.task_type);
        c.k = args.k.or(c.k);
        c.order = args.order.unwrap_or(c.order);
        c.mode = args.mode.unwrap_or(c.mode);
        c.fraction = args.fraction.or(c.fraction);
        c.runs = args.runs.unwrap_or(c.runs);
        c.seed = args.seed.unwrap_or(c.seed);
        c.max_subsets = args.max_subsets.or(c.max_subsets);
        c
    }

    fn load_corpus(&self, config: &RunConfig) -> Result<Corpus, CliError> {
        let path = config
            .corpus
            .as_ref()
            .ok_or_else(|| CliError::Usage("no corpus: pass --corpus or set paths.corpus".into()))?;
        let path = Path::new(path);
        Ok(load_corpus(path, CorpusFormat::from_path(path))?)
    }

    /// Starting a run resolves settings from flags. Later stages reuse the
    /// run's `config.json` when it exists; `--corpus` still wins.
    fn stage(&self, args: &RunArgs, starts_run: bool) -> Result<Stage, CliError> {
        let dir = ArtifactDir::create(self.out_dir()?)?;
        let mut config = if !starts_run && dir.exists(CONFIG_FILE) {
            dir.read_json::<RunConfig>(CONFIG_FILE)?
        } else {
            self.run_config(args)
        };
        if let Some(p) = &args.corpus {
            config.corpus = Some(p.display().to_string());
        }
        let corpus = self.load_corpus(&config)?;
        let config = config.resolve(&corpus)?;
        Ok(Stage { dir, config, corpus })
    }

    fn templates(&self) -> Result<Templates, CliError> {
        match self.global.templates.as_ref().or(self.file.paths.templates.as_ref()) {
            Some(path) => Templates::from_toml_file(path).map_err(|e| CliError::Usage(e.to_string())),
            None => Ok(Templates::default()),
        }
    }

    fn gateway(&self, out_dir: &Path, model: &str) -> Result<Gateway, CliError> {
        let backend: Arc<dyn Backend> = match self.kind() {
            BackendKind::Mock => {
                let path = self
                    .global
                    .mock_script
                    .as_ref()
                    .or(self.file.backend.mock_script.as_ref())
                    .ok_or_else(|| CliError::Usage("mock backend needs --mock-script".into()))?;
                Arc::new(MockBackend::new(MockScript::from_path(path)?))
            }
            BackendKind::Http => {
                if model.trim().is_empty() || model == RunConfig::default().model {
                    return Err(CliError::Usage("http backend needs a model: --model or backend.model".into()));
                }
                let mut http = self.file.backend.http.clone();
                if let Some(url) = &self.global.base_url {
                    http.base_url = url.clone();
                }
                if let Some(var) = &self.global.api_key_env {
                    http.api_key_env = var.clone();
                }
                Arc::new(OpenAiBackend::from_config(&http)?)
            }
        };
        let cache_dir = self
            .global
            .cache_dir
            .clone()
            .or_else(|| self.file.paths.cache_dir.clone())
            .unwrap_or_else(|| out_dir.join("cache"));
        let parallel = self.global.max_parallel.unwrap_or(self.file.backend.http.max_parallel);
        Gateway::new(backend, ResponseCache::on_disk(cache_dir)?, parallel)
            .with_audit_log(&out_dir.join(AUDIT_LOG))
            .map_err(|e| CliError::Usage(format!("audit log: {e}")))
    }

    fn infer(&self, args: &RunArgs, top: usize) -> Result<(), CliError> {
        let s = self.stage(args, true)?;
        if s.config.mode == Mode::Gold {
            return Err(CliError::Usage("gold mode has no inference stage; run `predict`".into()));
        }
        let gateway = self.gateway(s.dir.root(), &s.config.model)?;
        let templates = self.templates()?;
        s.dir.write_json(CONFIG_FILE, &s.config)?;
        let (records, histogram) = Runner::new(&gateway, &templates).stage1(&s.corpus, &s.config)?;
        s.dir.write_jsonl(STAGE1_FILE, &records)?;
        s.dir.write_json(HISTOGRAM_FILE, &histogram)?;
        println!("{} predictions, {} labels seen at least twice", records.len(), histogram.len());
        for e in histogram.entries.iter().take(top) {
            println!("{:>7}  {}", e.count, e.display);
        }
        Ok(())
    }

    fn aggregate(&self, args: &RunArgs) -> Result<(), CliError> {
        let s = self.stage(args, false)?;
        if s.config.mode == Mode::Gold {
            return Err(CliError::Usage("gold mode has no aggregation stage".into()));
        }
        let histogram: PredictionHistogram = require(&s.dir, HISTOGRAM_FILE, "infer")?;
        let gateway = self.gateway(s.dir.root(), &s.config.model)?;
        let templates = self.templates()?;
        let outcome = match Runner::new(&gateway, &templates).aggregate(&histogram, &s.corpus, &s.config) {
            Ok(outcome) => outcome,
            Err(AggregationError::SelectionFailed { k, outcome }) => {
                s.dir.write_json(AGGREGATION_FILE, &outcome)?;
                return Err(AggregationError::SelectionFailed { k, outcome }.into());
            }
            Err(e) => return Err(e.into()),
        };
        s.dir.write_json(AGGREGATION_FILE, &outcome)?;
        let meta = outcome.selected.as_ref().expect("selection present");
        println!(
            "selected {} classes ({} of {} outputs agree)",
            meta.len(),
            meta.source_votes,
            outcome.raw_outputs.len()
        );
        print!("{}", textclust_core::prompts::class_block(meta));
        println!();
        Ok(())
    }

    fn meta(&self, s: &Stage) -> Result<MetaInformation, CliError> {
        match s.config.mode {
            Mode::Gold => Ok(MetaInformation::from_titles(
                s.corpus.class_titles.as_ref().expect("resolved gold config"),
            )),
            Mode::Zerodl => {
                let outcome: AggregationOutcome = require(&s.dir, AGGREGATION_FILE, "aggregate")?;
                outcome.selected.ok_or_else(|| {
                    CliError::Selection(format!("{AGGREGATION_FILE} holds no selected class set"))
                })
            }
        }
    }

    fn predict(&self, args: &RunArgs) -> Result<(), CliError> {
        let s = self.stage(args, false)?;
        let meta = self.meta(&s)?;
        if !s.dir.exists(CONFIG_FILE) {
            s.dir.write_json(CONFIG_FILE, &s.config)?;
        }
        let gateway = self.gateway(s.dir.root(), &s.config.model)?;
        let templates = self.templates()?;
        let records = Runner::new(&gateway, &templates).stage3(&s.corpus, &meta, &s.config)?;
        s.dir.write_jsonl(STAGE3_FILE, &records)?;
        let parsed = records.iter().filter(|r| r.predicted.is_some()).count();
        let failed = records.iter().filter(|r| r.error.is_some()).count();
        println!("{} predictions, {parsed} parsed, {failed} failed", records.len());
        Ok(())
    }

    fn evaluate(&self, args: &RunArgs) -> Result<(), CliError> {
        let s = self.stage(args, false)?;
        let meta = self.meta(&s)?;
        let stage3: Vec<Stage3Record> = require_jsonl(&s.dir, STAGE3_FILE, "predict")?;
        let report = evaluate_stage3(&s.corpus, &meta, &stage3, s.config.mapping_method)?
            .ok_or_else(|| CliError::Usage("the corpus has no gold labels to evaluate against".into()))?;
        s.dir.write_report(&report)?;
        print_header();
        print_row(&s.corpus.name, &s.config, report.accuracy, 0.0);
        println!("mapping: {:?} via {:?}", report.assignment, report.method);
        Ok(())
    }

    fn run(&self, args: &RunArgs) -> Result<(), CliError> {
        let s = self.stage(args, true)?;
        let gateway = self.gateway(s.dir.root(), &s.config.model)?;
        let templates = self.templates()?;
        let summary = Runner::new(&gateway, &templates).repeat_runs(&s.corpus, &s.config, Some(&s.dir))?;
        for run in summary.runs.iter().filter(|r| r.error.is_some()) {
            eprintln!("run {} (seed {}) failed: {}", run.run_index, run.seed, run.error.as_deref().unwrap_or(""));
        }
        match (summary.mean, summary.std) {
            (Some(mean), Some(std)) => {
                print_header();
                print_row(&s.corpus.name, &s.config, mean, std);
            }
            _ => println!("{} runs completed; the corpus has no gold labels", summary.completed),
        }
        Ok(())
    }
}

fn require<T: serde::de::DeserializeOwned>(dir: &ArtifactDir, name: &str, producer: &str) -> Result<T, CliError> {
    if !dir.exists(name) {
        return Err(missing(dir, name, producer));
    }
    Ok(dir.read_json(name)?)
}

fn require_jsonl<T: serde::de::DeserializeOwned>(
    dir: &ArtifactDir,
    name: &str,
    producer: &str,
) -> Result<Vec<T>, CliError> {
    if !dir.exists(name) {
        return Err(missing(dir, name, producer));
    }
    Ok(dir.read_jsonl(name)?)
}

fn missing(dir: &ArtifactDir, name: &str, producer: &str) -> CliError {
    CliError::Usage(format!(
        "missing artifact {}; run `{producer}` first",
        dir.path(name).display()
    ))
}

fn print_header() {
    println!("{:<24} {:<5} {:<7} {:>8} {:>8}", "dataset", "order", "mode", "accuracy", "std");
}

fn print_row(dataset: &str, config: &RunConfig, accuracy: f64, std: f64) {
    println!(
        "{:<24} {:<5} {:<7} {:>8.4} {:>8.4}",
        dataset,
        config.order.short(),
        config.mode,
        accuracy,
        std
    );
}

struct ReportRow {
    dataset: String,
    config: RunConfig,
    accuracy: f64,
    std: f64,
    size: u64,
}

fn dataset_name(dir: &Path, config: &RunConfig) -> String {
    config
        .corpus
        .as_ref()
        .and_then(|p| {
            let p = Path::new(p);
            load_corpus(p, CorpusFormat::from_path(p)).ok()
        })
        .map(|c| c.name)
        .unwrap_or_else(|| dir.file_name().unwrap_or_default().to_string_lossy().into_owned())
}

/// Reads a single-run directory, or a multi-run one through its summary.
fn report_row(path: &Path) -> Result<ReportRow, CliError> {
    let dir = ArtifactDir::open(path);
    if dir.exists(SUMMARY_FILE) && !dir.exists(REPORT_FILE) {
        let summary: RepeatSummary = dir.read_json(SUMMARY_FILE)?;
        let first = summary
            .runs
            .iter()
            .find(|r| r.accuracy.is_some())
            .ok_or_else(|| CliError::Usage(format!("{}: no completed run", path.display())))?;
        let run_dir = ArtifactDir::open(path.join(format!("run_{}", first.run_index)));
        let config: RunConfig = require(&run_dir, CONFIG_FILE, "run")?;
        let report: EvaluationReport = require(&run_dir, REPORT_FILE, "evaluate")?;
        let accs: Vec<f64> = summary.runs.iter().filter_map(|r| r.accuracy).collect();
        return Ok(ReportRow {
            dataset: dataset_name(path, &config),
            accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            std: sample_std(&accs),
            size: report.total,
            config,
        });
    }
    let config: RunConfig = require(&dir, CONFIG_FILE, "run")?;
    let report: EvaluationReport = require(&dir, REPORT_FILE, "evaluate")?;
    Ok(ReportRow {
        dataset: dataset_name(path, &config),
        accuracy: report.accuracy,
        std: 0.0,
        size: report.total,
        config,
    })
}

fn report(dirs: &[PathBuf]) -> Result<(), CliError> {
    let rows = dirs.iter().map(|d| report_row(d)).collect::<Result<Vec<_>, _>>()?;
    print_header();
    for r in &rows {
        print_row(&r.dataset, &r.config, r.accuracy, r.std);
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let sizes: Vec<u64> = rows.iter().map(|r| r.size).collect();
    let (macro_avg, micro_avg) =
        textclust_core::evaluation::summarize_accuracies(&accs, &sizes).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{:<24} {:>22.4}", "macro", macro_avg);
    println!("{:<24} {:>22.4}", "micro", micro_avg);
    Ok(())
}
