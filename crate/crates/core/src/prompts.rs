//! Prompt templates for the three stages.
//!
//! Templates use bracketed placeholders: `[text]`, `[type_of_task]`,
//! `[NUM_CLUSTER_CLASS]`, `[subset_blocks]` and `[class_block]`. Substitution
//! is single-pass, so placeholder-like text inside an input is never expanded.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::MetaInformation;
use crate::corpus::TaskType;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("input text is empty")]
    EmptyText,
    #[error("aggregation needs at least one non-empty subset")]
    EmptySubsets,
    #[error("class count must be at least 2, got {0}")]
    TooFewClasses(usize),
    #[error("template '{template}' is missing placeholder [{placeholder}]")]
    MissingPlaceholder {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error("template '{template}' uses unknown placeholder [{placeholder}]")]
    UnknownPlaceholder { template: &'static str, placeholder: String },
    #[error("cannot load templates: {0}")]
    Load(String),
}

/// Position of the class description block relative to the input text in the
/// final prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    ClassThenText,
    #[default]
    TextThenClass,
}

impl PromptOrder {
    pub fn short(self) -> &'static str {
        match self {
            PromptOrder::ClassThenText => "C-T",
            PromptOrder::TextThenClass => "T-C",
        }
    }
}

impl fmt::Display for PromptOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for PromptOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ct" | "c-t" | "class_then_text" => Ok(PromptOrder::ClassThenText),
            "tc" | "t-c" | "text_then_class" => Ok(PromptOrder::TextThenClass),
            other => Err(format!("unknown prompt order '{other}' (expected ct or tc)")),
        }
    }
}

pub const OPEN_INFERENCE: &str = "Text: [text]\n\nClassify the text to the best [type_of_task] class.";

pub const AGGREGATION: &str =
    "[type_of_task] List:\n[subset_blocks]Aggregate the [type_of_task] List into [NUM_CLUSTER_CLASS] classes.";

pub const FINAL_TEXT_THEN_CLASS: &str = "Text: [text]\n\nClass description:\n[class_block]\n\n\
Based on the class description, classify the text to the best [type_of_task] class.";

pub const FINAL_CLASS_THEN_TEXT: &str = "Class description:\n[class_block]\n\nText: [text]\n\n\
Based on the class description, classify the text to the best [type_of_task] class.";

const KNOWN: [&str; 5] = [
    "text",
    "type_of_task",
    "NUM_CLUSTER_CLASS",
    "subset_blocks",
    "class_block",
];

/// The full template set. Any field may be overridden from a TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Templates {
    pub open_inference: String,
    pub aggregation: String,
    pub final_class_then_text: String,
    pub final_text_then_class: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            open_inference: OPEN_INFERENCE.into(),
            aggregation: AGGREGATION.into(),
            final_class_then_text: FINAL_CLASS_THEN_TEXT.into(),
            final_text_then_class: FINAL_TEXT_THEN_CLASS.into(),
        }
    }
}

impl Templates {
    /// Reads overrides from a TOML file; keys that are absent keep their
    /// default body.
    pub fn from_toml_file(path: &Path) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Load(format!("{}: {e}", path.display())))?;
        let templates: Templates =
            toml::from_str(&raw).map_err(|e| PromptError::Load(format!("{}: {e}", path.display())))?;
        templates.validate()?;
        Ok(templates)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        check(
            "open_inference",
            &self.open_inference,
            &["text", "type_of_task"],
            &[],
        )?;
        check(
            "aggregation",
            &self.aggregation,
            &["subset_blocks", "NUM_CLUSTER_CLASS"],
            &["type_of_task"],
        )?;
        for (name, body) in [
            ("final_class_then_text", &self.final_class_then_text),
            ("final_text_then_class", &self.final_text_then_class),
        ] {
            check(name, body, &["text", "class_block"], &["type_of_task"])?;
        }
        Ok(())
    }

    pub fn render_open_inference(&self, text: &str, task: TaskType) -> Result<String, PromptError> {
        if text.trim().is_empty() {
            return Err(PromptError::EmptyText);
        }
        Ok(substitute(&self.open_inference, |name| match name {
            "text" => Some(text.to_owned()),
            "type_of_task" => Some(task.as_str().to_owned()),
            _ => None,
        }))
    }

    /// Renders one aggregation prompt holding every given subset as a
    /// labeled block (`S_j:` followed by one prediction per line).
    pub fn render_aggregation<S: AsRef<str>>(
        &self,
        subsets: &[Vec<S>],
        task: TaskType,
        k: usize,
    ) -> Result<String, PromptError> {
        if k < 2 {
            return Err(PromptError::TooFewClasses(k));
        }
        if subsets.is_empty() || subsets.iter().any(Vec::is_empty) {
            return Err(PromptError::EmptySubsets);
        }
        let mut blocks = String::new();
        for subset in subsets {
            blocks.push_str(&format!("S_{}:\n", subset.len()));
            for label in subset {
                blocks.push_str(label.as_ref());
                blocks.push('\n');
            }
            blocks.push('\n');
        }
        Ok(substitute(&self.aggregation, |name| match name {
            "type_of_task" => Some(task.as_str().to_owned()),
            "subset_blocks" => Some(blocks.clone()),
            "NUM_CLUSTER_CLASS" => Some(k.to_string()),
            _ => None,
        }))
    }

    pub fn render_final(
        &self,
        text: &str,
        meta: &MetaInformation,
        task: TaskType,
        order: PromptOrder,
    ) -> Result<String, PromptError> {
        if meta.classes.len() < 2 {
            return Err(PromptError::TooFewClasses(meta.classes.len()));
        }
        if text.trim().is_empty() {
            return Err(PromptError::EmptyText);
        }
        let block = class_block(meta);
        let body = match order {
            PromptOrder::ClassThenText => &self.final_class_then_text,
            PromptOrder::TextThenClass => &self.final_text_then_class,
        };
        Ok(substitute(body, |name| match name {
            "text" => Some(text.to_owned()),
            "class_block" => Some(block.clone()),
            "type_of_task" => Some(task.as_str().to_owned()),
            _ => None,
        }))
    }
}

/// `- Class {i}: {title}[: {description}]`, one line per class.
pub fn class_block(meta: &MetaInformation) -> String {
    meta.classes
        .iter()
        .map(|c| match &c.description {
            Some(d) => format!("- Class {}: {}: {}", c.index, c.title, d),
            None => format!("- Class {}: {}", c.index, c.title),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_open_inference(text: &str, task: TaskType) -> Result<String, PromptError> {
    Templates::default().render_open_inference(text, task)
}

pub fn render_aggregation<S: AsRef<str>>(
    subsets: &[Vec<S>],
    task: TaskType,
    k: usize,
) -> Result<String, PromptError> {
    Templates::default().render_aggregation(subsets, task, k)
}

pub fn render_final(
    text: &str,
    meta: &MetaInformation,
    task: TaskType,
    order: PromptOrder,
) -> Result<String, PromptError> {
    Templates::default().render_final(text, meta, task, order)
}

/// Yields `(start, end, name)` for every `[identifier]` token in `body`.
fn placeholders(body: &str) -> impl Iterator<Item = (usize, usize, &str)> {
    let bytes = body.as_bytes();
    let mut pos = 0;
    std::iter::from_fn(move || {
        while pos < bytes.len() {
            if bytes[pos] == b'[' {
                let start = pos;
                let mut end = pos + 1;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                    end += 1;
                }
                if end < bytes.len() && bytes[end] == b']' && end > start + 1 {
                    pos = end + 1;
                    return Some((start, end + 1, &body[start + 1..end]));
                }
            }
            pos += 1;
        }
        None
    })
}

fn check(
    template: &'static str,
    body: &str,
    required: &[&'static str],
    optional: &[&'static str],
) -> Result<(), PromptError> {
    for placeholder in required {
        if !placeholders(body).any(|(_, _, name)| name == *placeholder) {
            return Err(PromptError::MissingPlaceholder { template, placeholder });
        }
    }
    for (_, _, name) in placeholders(body) {
        let allowed = required.contains(&name) || optional.contains(&name);
        // Upper-case tokens are reserved for placeholders even when unknown.
        let reserved = KNOWN.contains(&name) || name.chars().all(|c| c.is_ascii_uppercase() || c == '_');
        if reserved && !allowed {
            return Err(PromptError::UnknownPlaceholder {
                template,
                placeholder: name.to_owned(),
            });
        }
    }
    Ok(())
}

fn substitute(body: &str, bind: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(body.len() + 64);
    let mut last = 0;
    for (start, end, name) in placeholders(body) {
        if let Some(value) = bind(name) {
            out.push_str(&body[last..start]);
            out.push_str(&value);
            last = end;
        }
    }
    out.push_str(&body[last..]);
    out
}
