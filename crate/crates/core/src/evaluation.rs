//! Cluster accuracy under the best mapping between predicted classes and
//! gold classes, plus confusion matrices and macro/micro summaries.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest class count the exhaustive search accepts.
pub const BRUTE_FORCE_MAX_K: usize = 9;

/// Class counts up to this use the exhaustive search when the method is
/// chosen automatically.
pub const AUTO_BRUTE_FORCE_K: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("exhaustive mapping supports at most {BRUTE_FORCE_MAX_K} classes, got {0}; use the assignment solver")]
    TooManyClasses(usize),
    #[error("confusion matrix is {rows}x{cols}; a square matrix is required")]
    NotSquare { rows: usize, cols: usize },
    #[error("{0}")]
    Invalid(String),
}

static ANCHOR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bclass\s*(\d+)\b").unwrap());

/// Index of the first `Class n` anchor with `n < k`, if any.
pub fn parse_prediction(text: &str, k: usize) -> Option<usize> {
    ANCHOR
        .captures_iter(text)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .find(|&i| i < k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[predicted][gold]`.
    pub counts: Vec<Vec<u64>>,
    pub pred_labels: Vec<String>,
    pub gold_labels: Vec<String>,
    pub unparsed: u64,
    /// Unparsed outputs broken down by gold class.
    pub unparsed_by_gold: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(pred_labels: Vec<String>, gold_labels: Vec<String>) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; gold_labels.len()]; pred_labels.len()],
            unparsed_by_gold: vec![0; gold_labels.len()],
            pred_labels,
            gold_labels,
            unparsed: 0,
        }
    }

    /// Square matrix with generic labels, mostly for tests and benches.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let rows = counts.len();
        let cols = counts.first().map_or(0, Vec::len);
        ConfusionMatrix {
            counts,
            pred_labels: (0..rows).map(|i| format!("Class {i}")).collect(),
            gold_labels: (0..cols).map(|j| format!("Gold {j}")).collect(),
            unparsed: 0,
            unparsed_by_gold: vec![0; cols],
        }
    }

    pub fn record(&mut self, predicted: Option<usize>, gold: usize) {
        match predicted {
            Some(p) => self.counts[p][gold] += 1,
            None => {
                self.unparsed += 1;
                self.unparsed_by_gold[gold] += 1;
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn cols(&self) -> usize {
        self.gold_labels.len()
    }

    /// Parsed plus unparsed instances.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparsed
    }

    fn require_square(&self) -> Result<usize, EvalError> {
        let k = self.rows();
        if self.counts.iter().any(|r| r.len() != k) {
            return Err(EvalError::NotSquare {
                rows: k,
                cols: self.counts.first().map_or(0, Vec::len),
            });
        }
        Ok(k)
    }

    fn accuracy_of(&self, assignment: &[usize]) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let matched: u64 = assignment.iter().enumerate().map(|(p, &g)| self.counts[p][g]).sum();
        matched as f64 / total as f64
    }

    /// Zero-padded square copy; extra rows or columns never score.
    pub fn padded(&self) -> ConfusionMatrix {
        let n = self.rows().max(self.cols());
        let mut counts = vec![vec![0; n]; n];
        for (p, row) in self.counts.iter().enumerate() {
            counts[p][..row.len()].copy_from_slice(row);
        }
        ConfusionMatrix {
            counts,
            pred_labels: self.pred_labels.clone(),
            gold_labels: self.gold_labels.clone(),
            unparsed: self.unparsed,
            unparsed_by_gold: self.unparsed_by_gold.clone(),
        }
    }

    /// CSV with gold labels as columns and predicted classes as rows, plus a
    /// trailing `unparsed` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["predicted".to_owned()];
        header.extend(self.gold_labels.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (label, row) in self.pred_labels.iter().zip(&self.counts) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        let mut rec = vec!["unparsed".to_owned()];
        rec.extend(self.unparsed_by_gold.iter().map(u64::to_string));
        w.write_record(&rec).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingMethod {
    BruteForce,
    AssignmentAlgorithm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingResult {
    /// `assignment[predicted] = gold`.
    pub assignment: Vec<usize>,
    pub accuracy: f64,
    pub method: MappingMethod,
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Scores every bijection and keeps the best; ties resolve to the
/// lexicographically smallest assignment.
pub fn best_mapping_bruteforce(confusion: &ConfusionMatrix) -> Result<MappingResult, EvalError> {
    let k = confusion.require_square()?;
    if k > BRUTE_FORCE_MAX_K {
        return Err(EvalError::TooManyClasses(k));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_score = None;
    loop {
        let score: u64 = perm.iter().enumerate().map(|(p, &g)| confusion.counts[p][g]).sum();
        if best_score.is_none_or(|b| score > b) {
            best_score = Some(score);
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(MappingResult {
        accuracy: confusion.accuracy_of(&best),
        assignment: best,
        method: MappingMethod::BruteForce,
    })
}

/// Maximum-weight perfect matching on the counts (Hungarian method with
/// potentials, O(k^3)).
pub fn best_mapping_assignment(confusion: &ConfusionMatrix) -> Result<MappingResult, EvalError> {
    let n = confusion.require_square()?;
    if n == 0 {
        return Ok(MappingResult {
            assignment: Vec::new(),
            accuracy: 0.0,
            method: MappingMethod::AssignmentAlgorithm,
        });
    }
    let max = confusion.counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    // Minimize max - count. Rows and columns are 1-based; index 0 is the
    // virtual start column.
    let cost = |i: usize, j: usize| max - confusion.counts[i - 1][j - 1] as i64;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    Ok(MappingResult {
        accuracy: confusion.accuracy_of(&assignment),
        assignment,
        method: MappingMethod::AssignmentAlgorithm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub gold_label: String,
    /// Predicted class mapped onto this gold class, if any.
    pub predicted: Option<usize>,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub method: MappingMethod,
    /// `assignment[predicted] = gold`; `None` when a predicted class has no
    /// gold partner (more predicted than gold classes).
    pub assignment: Vec<Option<usize>>,
    pub unparsed: u64,
    pub total: u64,
    pub per_class: Vec<ClassScore>,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion_csv_path: Option<String>,
}

/// Scores a confusion matrix. Without an explicit method the exhaustive
/// search is used for square matrices up to [`AUTO_BRUTE_FORCE_K`] classes and
/// the assignment solver otherwise. Non-square matrices are zero-padded.
pub fn evaluate(confusion: &ConfusionMatrix, method: Option<MappingMethod>) -> Result<EvaluationReport, EvalError> {
    let square = confusion.rows() == confusion.cols();
    let padded = if square { confusion.clone() } else { confusion.padded() };
    let method = method.unwrap_or(if square && confusion.rows() <= AUTO_BRUTE_FORCE_K {
        MappingMethod::BruteForce
    } else {
        MappingMethod::AssignmentAlgorithm
    });
    let mapping = match method {
        MappingMethod::BruteForce => best_mapping_bruteforce(&padded)?,
        MappingMethod::AssignmentAlgorithm => best_mapping_assignment(&padded)?,
    };
    let assignment: Vec<Option<usize>> = mapping
        .assignment
        .iter()
        .take(confusion.rows())
        .map(|&g| (g < confusion.cols()).then_some(g))
        .collect();

    let per_class = (0..confusion.cols())
        .map(|g| {
            let predicted = assignment.iter().position(|a| *a == Some(g));
            let tp = predicted.map_or(0, |p| confusion.counts[p][g]) as f64;
            let row_total = predicted.map_or(0, |p| confusion.counts[p].iter().sum::<u64>()) as f64;
            let gold_total = (confusion.counts.iter().map(|r| r[g]).sum::<u64>() + confusion.unparsed_by_gold[g]) as f64;
            ClassScore {
                gold_label: confusion.gold_labels[g].clone(),
                predicted,
                precision: if row_total > 0.0 { tp / row_total } else { 0.0 },
                recall: if gold_total > 0.0 { tp / gold_total } else { 0.0 },
            }
        })
        .collect();

    Ok(EvaluationReport {
        accuracy: mapping.accuracy,
        method,
        assignment,
        unparsed: confusion.unparsed,
        total: confusion.total(),
        per_class,
        confusion: confusion.clone(),
        confusion_csv_path: None,
    })
}

/// Unweighted and size-weighted means of per-dataset accuracies.
pub fn summarize_accuracies(accuracies: &[f64], sizes: &[u64]) -> Result<(f64, f64), EvalError> {
    if accuracies.is_empty() {
        return Err(EvalError::Invalid("nothing to summarize".into()));
    }
    if accuracies.len() != sizes.len() {
        return Err(EvalError::Invalid(format!(
            "{} accuracies but {} sizes",
            accuracies.len(),
            sizes.len()
        )));
    }
    let total: u64 = sizes.iter().sum();
    if total == 0 {
        return Err(EvalError::Invalid("sizes sum to zero".into()));
    }
    let macro_avg = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let micro_avg = accuracies
        .iter()
        .zip(sizes)
        .map(|(a, &n)| a * n as f64)
        .sum::<f64>()
        / total as f64;
    Ok((macro_avg, micro_avg))
}

/// `(macro, micro)` over reports, with `sizes` giving each dataset's weight.
pub fn summarize(reports: &[EvaluationReport], sizes: &[u64]) -> Result<(f64, f64), EvalError> {
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    summarize_accuracies(&accs, sizes)
}
