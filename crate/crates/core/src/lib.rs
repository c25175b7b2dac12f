//! Zero-shot text clustering driven by LLM-generated class labels.
//!
//! The pipeline runs in three stages:
//!
//! 1. open-ended inference over every input text, with no label set given;
//! 2. aggregation of the frequency-sorted predictions into a fixed number of
//!    class labels (the meta-information);
//! 3. final classification of each text conditioned on those labels.
//!
//! Evaluation scores the final predictions as clusters, taking the best
//! one-to-one mapping between predicted classes and gold classes.

pub mod aggregation;
pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod prompts;

pub use aggregation::{
    aggregate, build_histogram, build_subsets, normalize_label, parse_aggregation_output,
    AggregationError, AggregationOutcome, ClassEntry, MetaInformation, PredictionHistogram,
    SubsetFamily,
};
pub use corpus::{
    load_corpus, load_corpus_with, sample, split_by_class_halves, split_with_classes, Corpus, CorpusError, CorpusFormat, Manifest,
    SamplingSpec, TaskType, TextInstance,
};
pub use evaluation::{
    best_mapping_assignment, best_mapping_bruteforce, evaluate, parse_prediction, summarize,
    summarize_accuracies,
    ConfusionMatrix, EvalError, EvaluationReport, MappingMethod, MappingResult,
};
pub use gateway::{
    Backend, BackendConfig, CompletionRequest, CompletionResult, Gateway, GatewayError,
    MockBackend, MockRule, MockScript, OpenAiBackend, ResponseCache, StageParams, StageTag,
};
pub use pipeline::{
    evaluate_stage3, repeat_runs, run_full, run_stage1, sample_std, ArtifactDir, Mode, PipelineError, RepeatSummary, RunArtifact,
    RunConfig, Runner, Stage1Record, Stage3Record,
};
pub use prompts::{PromptError, PromptOrder, Templates};
