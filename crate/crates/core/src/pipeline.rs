//! End-to-end orchestration: open inference, aggregation, final prediction
//! and evaluation, with run artifacts written to a directory as each stage
//! completes.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::aggregation::{
    self, AggregateOptions, AggregationError, AggregationOutcome, MetaInformation, PredictionHistogram,
};
use crate::corpus::{self, Corpus, CorpusError, SamplingSpec, TaskType};
use crate::evaluation::{self, ConfusionMatrix, EvalError, EvaluationReport, MappingMethod};
use crate::gateway::{Gateway, GatewayError, StageParams, StageTag};
use crate::prompts::{PromptError, PromptOrder, Templates};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("stage 1 aborted: {failed} of {total} completions failed (first error: {first_error})")]
    Stage1Aborted {
        failed: usize,
        total: usize,
        first_error: GatewayError,
    },
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Generate the class labels from the data.
    #[default]
    Zerodl,
    /// Use the corpus' gold class titles as labels.
    Gold,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Zerodl => "zerodl",
            Mode::Gold => "gold",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zerodl" => Ok(Mode::Zerodl),
            "gold" => Ok(Mode::Gold),
            other => Err(format!("unknown mode '{other}' (expected zerodl or gold)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Where the corpus was loaded from; informational.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    /// Overrides the corpus task type.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    /// Number of classes to cluster into; defaults to the corpus class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub order: PromptOrder,
    pub mode: Mode,
    /// Fraction of the corpus used for label generation. Final prediction
    /// always covers the whole corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub runs: usize,
    /// Seed of the first run; run `i` uses `seed + i`.
    pub seed: u64,
    pub model: String,
    pub open_inference: StageSettings,
    pub aggregation: StageSettings,
    pub final_prediction: StageSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_subsets: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapping_method: Option<MappingMethod>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            task_type: None,
            k: None,
            order: PromptOrder::default(),
            mode: Mode::default(),
            fraction: None,
            runs: 1,
            seed: 0,
            model: "default".into(),
            open_inference: StageSettings {
                temperature: 0.0,
                max_tokens: 64,
            },
            aggregation: StageSettings {
                temperature: 0.0,
                max_tokens: 1024,
            },
            final_prediction: StageSettings {
                temperature: 0.0,
                max_tokens: 64,
            },
            max_subsets: None,
            mapping_method: None,
        }
    }
}

impl RunConfig {
    /// Fills corpus-derived defaults and checks the combination.
    pub fn resolve(&self, corpus: &Corpus) -> Result<RunConfig, PipelineError> {
        if self.runs == 0 {
            return Err(PipelineError::Config("runs must be at least 1".into()));
        }
        if let Some(f) = self.fraction {
            SamplingSpec::new(f, self.seed)?;
        }
        let mut resolved = self.clone();
        resolved.task_type = Some(self.task_type.unwrap_or(corpus.task_type));
        let k = self.k.unwrap_or(corpus.num_classes);
        if k < 2 {
            return Err(PipelineError::Config(format!("k must be at least 2, got {k}")));
        }
        if self.mode == Mode::Gold {
            let titles = corpus
                .class_titles
                .as_ref()
                .ok_or_else(|| PipelineError::Config("gold mode needs corpus class titles".into()))?;
            if k != titles.len() {
                return Err(PipelineError::Config(format!(
                    "gold mode uses the {} gold classes but k = {k}",
                    titles.len()
                )));
            }
        }
        resolved.k = Some(k);
        Ok(resolved)
    }

    fn params(&self, stage: StageSettings) -> StageParams {
        StageParams::new(self.model.clone(), stage.temperature, stage.max_tokens)
    }

    fn with_seed(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage3Record {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: RunConfig,
    pub stage1: Vec<Stage1Record>,
    pub histogram: Option<PredictionHistogram>,
    pub aggregation: Option<AggregationOutcome>,
    pub meta: MetaInformation,
    pub stage3: Vec<Stage3Record>,
    pub report: Option<EvaluationReport>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const STAGE1_FILE: &str = "stage1.jsonl";
pub const HISTOGRAM_FILE: &str = "histogram.json";
pub const AGGREGATION_FILE: &str = "aggregation.json";
pub const STAGE3_FILE: &str = "stage3.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// A run directory holding the per-stage artifact files.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| artifact_err(&root, e))?;
        Ok(ArtifactDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        ArtifactDir { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        let path = self.path(name);
        let mut body = serde_json::to_string_pretty(value).map_err(|e| artifact_err(&path, e))?;
        body.push('\n');
        std::fs::write(&path, body).map_err(|e| artifact_err(&path, e))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, PipelineError> {
        let path = self.path(name);
        let raw = std::fs::read_to_string(&path).map_err(|e| artifact_err(&path, e))?;
        serde_json::from_str(&raw).map_err(|e| artifact_err(&path, e))
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), PipelineError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| artifact_err(&path, e))?;
        let mut w = BufWriter::new(file);
        for row in rows {
            serde_json::to_writer(&mut w, row).map_err(|e| artifact_err(&path, e))?;
            w.write_all(b"\n").map_err(|e| artifact_err(&path, e))?;
        }
        w.flush().map_err(|e| artifact_err(&path, e))
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        let path = self.path(name);
        let file = File::open(&path).map_err(|e| artifact_err(&path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| artifact_err(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| PipelineError::Artifact {
                path: path.clone(),
                message: format!("line {}: {e}", i + 1),
            })?);
        }
        Ok(rows)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    /// Writes the report and its confusion CSV; the report points at the CSV.
    pub fn write_report(&self, report: &EvaluationReport) -> Result<(), PipelineError> {
        let csv_path = self.path(CONFUSION_FILE);
        report
            .confusion
            .write_csv(&csv_path)
            .map_err(|e| artifact_err(&csv_path, e))?;
        let mut report = report.clone();
        report.confusion_csv_path = Some(CONFUSION_FILE.into());
        self.write_json(REPORT_FILE, &report)
    }
}

fn artifact_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Artifact {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

/// Mean and sample standard deviation over the completed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: Vec<RunOutcome>,
    pub completed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_index: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Runs the stages against one gateway and template set.
pub struct Runner<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a Templates,
}

impl<'a> Runner<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a Templates) -> Self {
        Runner { gateway, templates }
    }

    /// Open inference over the (optionally sampled) corpus. More than half
    /// of the completions failing aborts the run.
    pub fn stage1(
        &self,
        corpus: &Corpus,
        config: &RunConfig,
    ) -> Result<(Vec<Stage1Record>, PredictionHistogram), PipelineError> {
        let sampled;
        let input = match config.fraction {
            Some(fraction) if fraction < 1.0 => {
                sampled = corpus::sample(corpus, &SamplingSpec::new(fraction, config.seed)?)?;
                &sampled
            }
            _ => corpus,
        };
        let task = config.task_type.unwrap_or(corpus.task_type);
        let params = config.params(config.open_inference);
        let requests = input
            .instances
            .iter()
            .map(|inst| {
                let prompt = self.templates.render_open_inference(&inst.text, task)?;
                Ok(params.request(prompt, StageTag::OpenInference))
            })
            .collect::<Result<Vec<_>, PromptError>>()?;
        info!(instances = requests.len(), "stage 1: open inference");
        let results = self.gateway.complete_batch(&requests, false);

        let mut records = Vec::with_capacity(results.len());
        let mut predictions = Vec::new();
        let mut first_error = None;
        for (inst, result) in input.instances.iter().zip(results) {
            match result {
                Ok(r) => {
                    predictions.push(r.text.clone());
                    records.push(Stage1Record {
                        id: inst.id.clone(),
                        raw: Some(r.text),
                        error: None,
                    });
                }
                Err(e) => {
                    records.push(Stage1Record {
                        id: inst.id.clone(),
                        raw: None,
                        error: Some(e.to_string()),
                    });
                    first_error.get_or_insert(e);
                }
            }
        }
        let failed = records.len() - predictions.len();
        if let Some(first_error) = first_error {
            if failed * 2 > records.len() {
                return Err(PipelineError::Stage1Aborted {
                    failed,
                    total: records.len(),
                    first_error,
                });
            }
            warn!(failed, total = records.len(), "stage 1 completions failed");
        }
        let histogram = aggregation::build_histogram(&predictions)?;
        Ok((records, histogram))
    }

    pub fn aggregate(
        &self,
        histogram: &PredictionHistogram,
        corpus: &Corpus,
        config: &RunConfig,
    ) -> Result<AggregationOutcome, AggregationError> {
        let options = AggregateOptions {
            params: config.params(config.aggregation),
            templates: self.templates,
            max_subsets: config.max_subsets,
        };
        let k = config.k.unwrap_or(corpus.num_classes);
        info!(subsets = histogram.len(), k, "stage 2: aggregation");
        aggregation::aggregate(
            histogram,
            k,
            self.gateway,
            config.task_type.unwrap_or(corpus.task_type),
            &options,
        )
    }

    /// Final prediction over every corpus instance.
    pub fn stage3(
        &self,
        corpus: &Corpus,
        meta: &MetaInformation,
        config: &RunConfig,
    ) -> Result<Vec<Stage3Record>, PipelineError> {
        let task = config.task_type.unwrap_or(corpus.task_type);
        let params = config.params(config.final_prediction);
        let requests = corpus
            .instances
            .iter()
            .map(|inst| {
                let prompt = self.templates.render_final(&inst.text, meta, task, config.order)?;
                Ok(params.request(prompt, StageTag::FinalPrediction))
            })
            .collect::<Result<Vec<_>, PromptError>>()?;
        info!(instances = requests.len(), order = %config.order, "stage 3: final prediction");
        let results = self.gateway.complete_batch(&requests, false);
        let k = meta.len();
        Ok(corpus
            .instances
            .iter()
            .zip(results)
            .map(|(inst, result)| match result {
                Ok(r) => Stage3Record {
                    id: inst.id.clone(),
                    predicted: evaluation::parse_prediction(&r.text, k),
                    raw: Some(r.text),
                    error: None,
                },
                Err(e) => Stage3Record {
                    id: inst.id.clone(),
                    raw: None,
                    predicted: None,
                    error: Some(e.to_string()),
                },
            })
            .collect())
    }

    /// Zero-DL run: stage 1, aggregation, stage 3, evaluation. Gold mode
    /// skips the first two stages. Artifacts are written to `out` as each
    /// stage finishes.
    pub fn run_full(
        &self,
        corpus: &Corpus,
        config: &RunConfig,
        out: Option<&ArtifactDir>,
    ) -> Result<RunArtifact, PipelineError> {
        let config = config.resolve(corpus)?;
        if let Some(dir) = out {
            dir.write_json(CONFIG_FILE, &config)?;
        }

        let (stage1, histogram, outcome, meta) = match config.mode {
            Mode::Gold => {
                let titles = corpus.class_titles.as_ref().expect("resolved gold config");
                (Vec::new(), None, None, MetaInformation::from_titles(titles))
            }
            Mode::Zerodl => {
                let (records, histogram) = self.stage1(corpus, &config)?;
                if let Some(dir) = out {
                    dir.write_jsonl(STAGE1_FILE, &records)?;
                    dir.write_json(HISTOGRAM_FILE, &histogram)?;
                }
                let outcome = match self.aggregate(&histogram, corpus, &config) {
                    Ok(outcome) => outcome,
                    Err(AggregationError::SelectionFailed { k, outcome }) => {
                        if let Some(dir) = out {
                            dir.write_json(AGGREGATION_FILE, &outcome)?;
                        }
                        return Err(AggregationError::SelectionFailed { k, outcome }.into());
                    }
                    Err(e) => return Err(e.into()),
                };
                if let Some(dir) = out {
                    dir.write_json(AGGREGATION_FILE, &outcome)?;
                }
                let meta = outcome.selected.clone().expect("aggregate returns a selection");
                (records, Some(histogram), Some(outcome), meta)
            }
        };

        let stage3 = self.stage3(corpus, &meta, &config)?;
        if let Some(dir) = out {
            dir.write_jsonl(STAGE3_FILE, &stage3)?;
        }
        let report = evaluate_stage3(corpus, &meta, &stage3, config.mapping_method)?;
        if let (Some(dir), Some(report)) = (out, &report) {
            dir.write_report(report)?;
        }
        Ok(RunArtifact {
            config,
            stage1,
            histogram,
            aggregation: outcome,
            meta,
            stage3,
            report,
        })
    }

    /// `config.runs` independent runs with seeds `seed, seed + 1, ..`. A single
    /// run writes straight into `out`; several runs use `run_<i>` subfolders.
    /// Fails with the first run's error only when no run completes.
    pub fn repeat_runs(
        &self,
        corpus: &Corpus,
        config: &RunConfig,
        out: Option<&ArtifactDir>,
    ) -> Result<RepeatSummary, PipelineError> {
        let n = config.runs;
        config.resolve(corpus)?;
        let mut runs = Vec::with_capacity(n);
        let mut first_error = None;
        for i in 0..n {
            let seed = config.seed + i as u64;
            let run_config = config.with_seed(seed);
            let dir = match out {
                Some(d) if n > 1 => Some(ArtifactDir::create(d.path(&format!("run_{i}")))?),
                Some(d) => Some(d.clone()),
                None => None,
            };
            match self.run_full(corpus, &run_config, dir.as_ref()) {
                Ok(artifact) => runs.push(RunOutcome {
                    run_index: i,
                    seed,
                    accuracy: artifact.report.map(|r| r.accuracy),
                    error: None,
                }),
                Err(e @ PipelineError::Config(_)) => return Err(e),
                Err(e) => {
                    warn!(run = i, error = %e, "run aborted");
                    runs.push(RunOutcome {
                        run_index: i,
                        seed,
                        accuracy: None,
                        error: Some(e.to_string()),
                    });
                    first_error.get_or_insert(e);
                }
            }
        }
        let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
        let completed = runs.iter().filter(|r| r.error.is_none()).count();
        if completed < n {
            warn!(completed, requested = n, "summary covers completed runs only");
        }
        let summary = RepeatSummary {
            completed,
            mean: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
            std: (!accs.is_empty()).then(|| sample_std(&accs)),
            runs,
        };
        if let Some(dir) = out {
            dir.write_json(SUMMARY_FILE, &summary)?;
        }
        match first_error {
            Some(e) if summary.completed == 0 => Err(e),
            _ => Ok(summary),
        }
    }
}

/// Builds the confusion matrix from stage-3 records and scores it. Returns
/// `None` when the corpus has no gold labels. Failed completions count as
/// unparsed.
pub fn evaluate_stage3(
    corpus: &Corpus,
    meta: &MetaInformation,
    stage3: &[Stage3Record],
    method: Option<MappingMethod>,
) -> Result<Option<EvaluationReport>, PipelineError> {
    let Some(gold_titles) = corpus.class_titles.as_ref() else {
        return Ok(None);
    };
    let predictions: std::collections::HashMap<&str, Option<usize>> =
        stage3.iter().map(|r| (r.id.as_str(), r.predicted)).collect();
    let mut confusion = ConfusionMatrix::new(
        meta.classes
            .iter()
            .map(|c| format!("Class {}: {}", c.index, c.title))
            .collect(),
        gold_titles.clone(),
    );
    let mut any = false;
    for inst in &corpus.instances {
        let Some(gold) = corpus.gold_index(inst) else {
            continue;
        };
        let predicted = predictions.get(inst.id.as_str()).copied().flatten();
        confusion.record(predicted.filter(|&p| p < meta.len()), gold);
        any = true;
    }
    if !any {
        return Ok(None);
    }
    Ok(Some(evaluation::evaluate(&confusion, method)?))
}

pub fn run_stage1(
    corpus: &Corpus,
    config: &RunConfig,
    gateway: &Gateway,
) -> Result<(Vec<Stage1Record>, PredictionHistogram), PipelineError> {
    let templates = Templates::default();
    Runner::new(gateway, &templates).stage1(corpus, &config.resolve(corpus)?)
}

pub fn run_full(
    corpus: &Corpus,
    config: &RunConfig,
    gateway: &Gateway,
    out: Option<&ArtifactDir>,
) -> Result<RunArtifact, PipelineError> {
    let templates = Templates::default();
    Runner::new(gateway, &templates).run_full(corpus, config, out)
}

pub fn repeat_runs(
    corpus: &Corpus,
    config: &RunConfig,
    gateway: &Gateway,
    out: Option<&ArtifactDir>,
) -> Result<RepeatSummary, PipelineError> {
    let templates = Templates::default();
    Runner::new(gateway, &templates).repeat_runs(corpus, config, out)
}
