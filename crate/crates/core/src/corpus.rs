//! Labeled text datasets: loading, validation, class splitting and sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid corpus: {0}")]
    Validation(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

type Result<T> = std::result::Result<T, CorpusError>;

/// The view the prompts ask the model to take on each text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Sentiment,
    #[default]
    Topic,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Sentiment => "sentiment",
            TaskType::Topic => "topic",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sentiment" => Ok(TaskType::Sentiment),
            "topic" => Ok(TaskType::Topic),
            other => Err(format!("unknown task type '{other}' (expected sentiment or topic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess from the file extension; anything that is not `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(format!("unknown corpus format '{other}'")),
        }
    }
}

/// Sidecar metadata for a dataset file, stored as `<file>.manifest.json`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_titles: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Manifest {
    pub fn sidecar_path(data_path: &Path) -> PathBuf {
        let mut name = data_path.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| CorpusError::Parse {
            line: e.line(),
            message: format!("manifest {}: {e}", path.display()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub task_type: TaskType,
    pub instances: Vec<TextInstance>,
    pub class_titles: Option<Vec<String>>,
    pub num_classes: usize,
}

impl Corpus {
    /// Builds a corpus and checks every invariant.
    ///
    /// When `class_titles` is absent but instances carry gold labels, the
    /// titles are derived in order of first appearance.
    pub fn new(
        name: impl Into<String>,
        task_type: TaskType,
        instances: Vec<TextInstance>,
        class_titles: Option<Vec<String>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(CorpusError::Validation("corpus has no instances".into()));
        }
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if inst.text.trim().is_empty() {
                return Err(CorpusError::Validation(format!("instance '{}' has empty text", inst.id)));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(CorpusError::Validation(format!("duplicate id '{}'", inst.id)));
            }
        }

        let class_titles = match class_titles {
            Some(titles) => {
                let distinct: HashSet<&str> = titles.iter().map(String::as_str).collect();
                if distinct.len() != titles.len() {
                    return Err(CorpusError::Validation("class titles are not distinct".into()));
                }
                for inst in &instances {
                    if let Some(label) = &inst.gold_label {
                        if !distinct.contains(label.as_str()) {
                            return Err(CorpusError::Validation(format!(
                                "instance '{}' has gold label '{label}' outside the class titles",
                                inst.id
                            )));
                        }
                    }
                }
                Some(titles)
            }
            None => {
                let mut titles: Vec<String> = Vec::new();
                for label in instances.iter().filter_map(|i| i.gold_label.as_ref()) {
                    if !titles.contains(label) {
                        titles.push(label.clone());
                    }
                }
                (!titles.is_empty()).then_some(titles)
            }
        };

        let num_classes = match (&class_titles, num_classes) {
            (Some(titles), Some(n)) if n != titles.len() => {
                return Err(CorpusError::Validation(format!(
                    "num_classes {n} disagrees with {} class titles",
                    titles.len()
                )))
            }
            (Some(titles), _) => titles.len(),
            (None, Some(n)) => n,
            (None, None) => {
                return Err(CorpusError::Validation(
                    "unlabeled corpus needs num_classes from a manifest".into(),
                ))
            }
        };
        if num_classes < 2 {
            return Err(CorpusError::Validation(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }

        Ok(Corpus {
            name: name.into(),
            task_type,
            instances,
            class_titles,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            name: Some(self.name.clone()),
            task_type: Some(self.task_type),
            class_titles: self.class_titles.clone(),
            num_classes: Some(self.num_classes),
        }
    }

    /// Index of an instance's gold label within `class_titles`.
    pub fn gold_index(&self, instance: &TextInstance) -> Option<usize> {
        let titles = self.class_titles.as_ref()?;
        let label = instance.gold_label.as_ref()?;
        titles.iter().position(|t| t == label)
    }

    /// Writes the instances as JSONL plus the sidecar manifest.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io_err = |source| CorpusError::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for inst in &self.instances {
            let line = serde_json::to_string(inst).expect("instance serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        let manifest_path = Manifest::sidecar_path(path);
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&manifest_path, manifest).map_err(|source| CorpusError::Io {
            path: manifest_path,
            source,
        })
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: Option<String>,
    #[serde(default, alias = "label")]
    gold_label: Option<serde_json::Value>,
}

fn value_to_string(v: serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s),
        other => Some(other.to_string()),
    }
}

/// Loads a dataset file, picking up `<path>.manifest.json` when it exists.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let sidecar = Manifest::sidecar_path(path);
    let manifest = if sidecar.exists() {
        Manifest::read(&sidecar)?
    } else {
        Manifest::default()
    };
    load_corpus_with(path, format, manifest)
}

/// Loads a dataset file with an explicit manifest.
pub fn load_corpus_with(path: &Path, format: CorpusFormat, manifest: Manifest) -> Result<Corpus> {
    let instances = match format {
        CorpusFormat::Jsonl => read_jsonl(path)?,
        CorpusFormat::Csv => read_csv(path)?,
    };
    if instances.is_empty() {
        return Err(CorpusError::Validation(format!("{} contains no records", path.display())));
    }
    let name = manifest.name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into())
    });
    Corpus::new(
        name,
        manifest.task_type.unwrap_or_default(),
        instances,
        manifest.class_titles,
        manifest.num_classes,
    )
}

fn check_record(line: usize, index: usize, raw: RawRecord) -> Result<TextInstance> {
    let text = raw.text.unwrap_or_default();
    if text.trim().is_empty() {
        return Err(CorpusError::Parse {
            line,
            message: "missing or empty text".into(),
        });
    }
    let id = raw
        .id
        .and_then(value_to_string)
        .unwrap_or_else(|| index.to_string());
    let gold_label = raw
        .gold_label
        .and_then(value_to_string)
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty());
    Ok(TextInstance { id, text, gold_label })
}

fn read_jsonl(path: &Path) -> Result<Vec<TextInstance>> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut instances = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let index = instances.len();
        instances.push(check_record(line_no, index, raw)?);
    }
    Ok(instances)
}

fn read_csv(path: &Path) -> Result<Vec<TextInstance>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CorpusError::Io {
            path: path.to_owned(),
            source,
        },
        other => CorpusError::Parse {
            line: 1,
            message: format!("{other:?}"),
        },
    })?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let id_col = col(&["id"]);
    let text_col = col(&["text"]).ok_or(CorpusError::Parse {
        line: 1,
        message: "csv header has no 'text' column".into(),
    })?;
    let label_col = col(&["gold_label", "label"]);

    let mut instances = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line_no = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: Option<usize>| {
            c.and_then(|c| record.get(c))
                .map(|s| serde_json::Value::String(s.to_owned()))
        };
        let raw = RawRecord {
            id: field(id_col).filter(|v| v.as_str().is_some_and(|s| !s.is_empty())),
            text: record.get(text_col).map(str::to_owned),
            gold_label: field(label_col),
        };
        let index = instances.len();
        instances.push(check_record(line_no, index, raw)?);
    }
    Ok(instances)
}

/// Drops the `drop_smallest` least populated classes, then splits the
/// remaining classes (in their original order) into a Front half holding the
/// first ⌈k/2⌉ classes and a Back half with the rest.
///
/// Class size ties are broken by title, lexicographically.
pub fn split_by_class_halves(corpus: &Corpus, drop_smallest: usize) -> Result<(Corpus, Corpus)> {
    let titles = corpus
        .class_titles
        .as_ref()
        .ok_or_else(|| CorpusError::Precondition("split needs class titles".into()))?;
    if titles.len() < drop_smallest + 4 {
        return Err(CorpusError::Precondition(format!(
            "cannot drop {drop_smallest} of {} classes and keep two per half",
            titles.len()
        )));
    }
    let mut sizes: HashMap<&str, usize> = titles.iter().map(|t| (t.as_str(), 0)).collect();
    for inst in &corpus.instances {
        let label = inst.gold_label.as_deref().ok_or_else(|| {
            CorpusError::Precondition(format!("instance '{}' has no gold label", inst.id))
        })?;
        *sizes.get_mut(label).expect("validated label") += 1;
    }
    let mut by_size: Vec<&str> = titles.iter().map(String::as_str).collect();
    by_size.sort_by(|a, b| sizes[a].cmp(&sizes[b]).then_with(|| a.cmp(b)));
    let dropped: HashSet<&str> = by_size.into_iter().take(drop_smallest).collect();

    let kept: Vec<String> = titles
        .iter()
        .filter(|t| !dropped.contains(t.as_str()))
        .cloned()
        .collect();
    let front_len = kept.len().div_ceil(2);
    let (front, back) = kept.split_at(front_len);
    split_with_classes(corpus, front, back)
}

/// Splits a labeled corpus into two corpora with explicit class lists.
/// Instances whose class appears in neither list are dropped.
pub fn split_with_classes(corpus: &Corpus, front: &[String], back: &[String]) -> Result<(Corpus, Corpus)> {
    let titles = corpus
        .class_titles
        .as_ref()
        .ok_or_else(|| CorpusError::Precondition("split needs class titles".into()))?;
    for t in front.iter().chain(back) {
        if !titles.contains(t) {
            return Err(CorpusError::Precondition(format!("unknown class '{t}'")));
        }
        if front.contains(t) && back.contains(t) {
            return Err(CorpusError::Precondition(format!("class '{t}' is in both halves")));
        }
    }
    let part = |classes: &[String], suffix: &str| {
        let instances = corpus
            .instances
            .iter()
            .filter(|i| i.gold_label.as_ref().is_some_and(|l| classes.contains(l)))
            .cloned()
            .collect();
        Corpus::new(
            format!("{}({suffix})", corpus.name),
            corpus.task_type,
            instances,
            Some(classes.to_vec()),
            None,
        )
    };
    Ok((part(front, "F")?, part(back, "B")?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CorpusError::Precondition(format!(
                "sampling fraction must be in (0, 1], got {fraction}"
            )));
        }
        Ok(SamplingSpec { fraction, seed })
    }

    pub fn sample_size(&self, n: usize) -> usize {
        ((self.fraction * n as f64).round() as usize).clamp(1, n)
    }
}

/// Uniform sample without replacement of `max(1, round(fraction * N))`
/// instances. Selected instances keep their corpus order.
pub fn sample(corpus: &Corpus, spec: &SamplingSpec) -> Result<Corpus> {
    SamplingSpec::new(spec.fraction, spec.seed)?;
    let n = corpus.len();
    let m = spec.sample_size(n);
    if m == n {
        return Ok(corpus.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(Corpus {
        instances: picked.into_iter().map(|i| corpus.instances[i].clone()).collect(),
        ..corpus.clone()
    })
}
