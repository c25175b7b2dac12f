//! Turning open-ended predictions into a fixed-size class label set.
//!
//! Predictions are normalized and counted, singletons are discarded, and the
//! survivors are sorted by frequency into `m_1 .. m_U`. Each nested prefix
//! `S_j = [m_1 .. m_j]` is sent to the model with a request to merge it into
//! `k` classes, so frequent predictions are seen in more requests. Outputs
//! with exactly `k` classes vote, grouped by their normalized titles, and the
//! largest group wins.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskType;
use crate::gateway::{Gateway, GatewayError, StageParams, StageTag};
use crate::prompts::{PromptError, Templates};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no predictions to aggregate")]
    EmptyInput,
    #[error("every prediction occurred only once; nothing left to aggregate")]
    EmptyHistogram,
    #[error("class count must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("no aggregation output had exactly {k} classes ({} outputs inspected)", .outcome.raw_outputs.len())]
    SelectionFailed { k: usize, outcome: Box<AggregationOutcome> },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?'];
const WRAPPERS: &[char] = &['"', '\'', '`', '*'];

/// Canonical form used to compare labels: whitespace collapsed, case folded,
/// wrapping quotes or emphasis and trailing punctuation removed.
pub fn normalize_label(raw: &str) -> String {
    let mut s = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    loop {
        let next = s
            .trim_end_matches(TRAILING_PUNCT)
            .trim_matches(WRAPPERS)
            .trim()
            .to_owned();
        if next == s {
            return s;
        }
        s = next;
    }
}

fn display_form(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut s = collapsed.as_str();
    loop {
        let next = s.trim_end_matches(TRAILING_PUNCT).trim_matches(WRAPPERS).trim();
        if next == s {
            return s.to_owned();
        }
        s = next;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramEntry {
    /// Normalized label, the identity of the entry.
    pub label: String,
    /// Most frequent original spelling, used when prompting.
    pub display: String,
    pub count: usize,
}

/// Frequency-sorted predictions: count descending, then label ascending.
/// Labels seen only once are not kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionHistogram {
    pub entries: Vec<HistogramEntry>,
}

impl PredictionHistogram {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only the `n` most frequent entries.
    pub fn truncated(&self, n: usize) -> PredictionHistogram {
        PredictionHistogram {
            entries: self.entries.iter().take(n).cloned().collect(),
        }
    }
}

pub fn build_histogram<S: AsRef<str>>(raw_predictions: &[S]) -> Result<PredictionHistogram, AggregationError> {
    if raw_predictions.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    // label -> (count, spelling -> count)
    let mut counts: HashMap<String, (usize, BTreeMap<String, usize>)> = HashMap::new();
    for raw in raw_predictions {
        let label = normalize_label(raw.as_ref());
        if label.is_empty() {
            continue;
        }
        let slot = counts.entry(label).or_default();
        slot.0 += 1;
        *slot.1.entry(display_form(raw.as_ref())).or_default() += 1;
    }
    let mut entries: Vec<HistogramEntry> = counts
        .into_iter()
        .filter(|(_, (count, _))| *count > 1)
        .map(|(label, (count, spellings))| {
            // BTreeMap iteration is lexicographic, so the first maximum wins ties.
            let mut best: Option<(&String, usize)> = None;
            for (spelling, n) in &spellings {
                if best.is_none_or(|(_, b)| *n > b) {
                    best = Some((spelling, *n));
                }
            }
            HistogramEntry {
                display: best.map(|(s, _)| s.clone()).unwrap_or_else(|| label.clone()),
                label,
                count,
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(AggregationError::EmptyHistogram);
    }
    entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    Ok(PredictionHistogram { entries })
}

/// Nested prefixes of the histogram, largest first: `S_U, S_{U-1}, .., S_1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetFamily {
    pub subsets: Vec<Vec<String>>,
}

impl SubsetFamily {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }
}

pub fn build_subsets(hist: &PredictionHistogram) -> SubsetFamily {
    let labels: Vec<String> = hist.entries.iter().map(|e| e.display.clone()).collect();
    SubsetFamily {
        subsets: (1..=labels.len()).rev().map(|j| labels[..j].to_vec()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedClass {
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

static CLASS_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:[-*•]\s*)?(?:\*\*)?\s*class\s*(\d+)\s*(?:\*\*)?\s*[:.)\-–]\s*(?:\*\*)?\s*(.+)$").unwrap()
});
static NUMBERED_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+)\s*[.)]\s+(.+)$").unwrap());
static BULLET_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[-*•]\s+(.+)$").unwrap());
static BOLD_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\*\*([^*]+)\*\*\s*(.*)$").unwrap());

/// Splits `Title: description`, `**Title**: description` or `**Title:** description`.
fn split_title(rest: &str) -> Option<ParsedClass> {
    let rest = rest.trim();
    let (title, description) = if let Some(caps) = BOLD_LINE.captures(rest) {
        (caps[1].to_string(), caps[2].to_string())
    } else {
        let rest = rest.trim_start_matches("**");
        match rest.split_once(':') {
            Some((t, d)) => (t.to_string(), d.to_string()),
            None => (rest.to_string(), String::new()),
        }
    };
    let title = title.trim().trim_end_matches(':').trim_matches(WRAPPERS).trim().to_owned();
    let description = description
        .trim()
        .trim_start_matches([':', '-', '–'])
        .trim_matches('*')
        .trim()
        .to_owned();
    if title.is_empty() {
        return None;
    }
    Some(ParsedClass {
        title,
        description: (!description.is_empty()).then_some(description),
    })
}

/// Lenient reader for aggregation outputs.
///
/// Recognized layouts, strongest first: `Class i: Title[: description]`,
/// `i. Title`, `- Title` or `**Title**: description`, and a single line of
/// comma-separated titles. Only the strongest layout present is used.
/// Duplicate titles (after normalization) keep their first occurrence.
pub fn parse_aggregation_output(text: &str) -> Vec<ParsedClass> {
    let lines: Vec<&str> = text
        .lines()
        .map(|l| l.trim().trim_start_matches('#').trim())
        .filter(|l| !l.is_empty())
        .collect();

    let class_lines: Vec<&str> = lines
        .iter()
        .filter_map(|l| CLASS_LINE.captures(l).map(|c| c.get(2).unwrap().as_str()))
        .collect();
    let numbered: Vec<&str> = lines
        .iter()
        .filter_map(|l| NUMBERED_LINE.captures(l).map(|c| c.get(2).unwrap().as_str()))
        .collect();
    let bulleted: Vec<&str> = lines
        .iter()
        .filter_map(|l| {
            BULLET_LINE
                .captures(l)
                .map(|c| c.get(1).unwrap().as_str())
                .or_else(|| BOLD_LINE.is_match(l).then_some(*l))
        })
        .collect();

    let candidates: Vec<ParsedClass> = if !class_lines.is_empty() {
        class_lines.into_iter().filter_map(split_title).collect()
    } else if !numbered.is_empty() {
        numbered.into_iter().filter_map(split_title).collect()
    } else if !bulleted.is_empty() {
        bulleted.into_iter().filter_map(split_title).collect()
    } else if lines.len() == 1 && lines[0].contains(',') {
        lines[0]
            .split(',')
            .map(|t| t.trim().trim_end_matches('.').trim_matches(WRAPPERS).trim())
            .filter(|t| !t.is_empty())
            .map(|t| ParsedClass {
                title: t.to_owned(),
                description: None,
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut seen = Vec::new();
    candidates
        .into_iter()
        .filter(|c| {
            let key = normalize_label(&c.title);
            if key.is_empty() || seen.contains(&key) {
                false
            } else {
                seen.push(key);
                true
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub index: usize,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// The selected class set injected into the final prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaInformation {
    pub classes: Vec<ClassEntry>,
    /// How many aggregation outputs voted for this class set.
    pub source_votes: usize,
}

impl MetaInformation {
    /// Title-only classes, e.g. from gold labels.
    pub fn from_titles<S: AsRef<str>>(titles: &[S]) -> Self {
        MetaInformation {
            classes: titles
                .iter()
                .enumerate()
                .map(|(index, t)| ClassEntry {
                    index,
                    title: t.as_ref().to_owned(),
                    description: None,
                })
                .collect(),
            source_votes: 1,
        }
    }

    fn from_parsed(parsed: &[ParsedClass], source_votes: usize) -> Self {
        MetaInformation {
            classes: parsed
                .iter()
                .enumerate()
                .map(|(index, c)| ClassEntry {
                    index,
                    title: c.title.clone(),
                    description: c.description.clone(),
                })
                .collect(),
            source_votes,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn titles(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.title.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    /// `j` of the subset `S_j` that produced this output.
    pub subset_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub subset_index: usize,
    pub classes: Vec<ParsedClass>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteGroup {
    /// Sorted normalized titles shared by every member.
    pub key: Vec<String>,
    pub votes: usize,
    /// Subset indices of the members, largest first.
    pub subset_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationOutcome {
    pub k: usize,
    pub raw_outputs: Vec<RawOutput>,
    pub parsed: Vec<ParsedOutput>,
    /// Subset indices whose parsed output has exactly `k` classes.
    pub accepted: Vec<usize>,
    pub groups: Vec<VoteGroup>,
    pub selected: Option<MetaInformation>,
}

/// Settings for [`aggregate`].
#[derive(Debug, Clone)]
pub struct AggregateOptions<'a> {
    pub params: StageParams,
    pub templates: &'a Templates,
    /// Use only the `n` most frequent predictions, i.e. subsets `S_n .. S_1`.
    pub max_subsets: Option<usize>,
}

/// Picks the winning class set from parsed outputs.
///
/// Groups accepted outputs by normalized title set; the group with most
/// votes wins, ties going to the group holding the largest subset and then to
/// the lexicographically smaller key. The member from the largest subset
/// supplies titles and descriptions.
pub fn select(k: usize, raw_outputs: Vec<RawOutput>, parsed: Vec<ParsedOutput>) -> AggregationOutcome {
    let accepted: Vec<&ParsedOutput> = parsed.iter().filter(|p| p.classes.len() == k).collect();
    let mut groups: BTreeMap<Vec<String>, Vec<&ParsedOutput>> = BTreeMap::new();
    for p in &accepted {
        let mut key: Vec<String> = p.classes.iter().map(|c| normalize_label(&c.title)).collect();
        key.sort();
        groups.entry(key).or_default().push(p);
    }
    let mut groups: Vec<(Vec<String>, Vec<&ParsedOutput>)> = groups
        .into_iter()
        .map(|(key, mut members)| {
            members.sort_by_key(|m| std::cmp::Reverse(m.subset_index));
            (key, members)
        })
        .collect();
    groups.sort_by(|(ka, a), (kb, b)| {
        b.len()
            .cmp(&a.len())
            .then_with(|| b[0].subset_index.cmp(&a[0].subset_index))
            .then_with(|| ka.cmp(kb))
    });
    let selected = groups
        .first()
        .map(|(_, members)| MetaInformation::from_parsed(&members[0].classes, members.len()));
    let vote_groups = groups
        .iter()
        .map(|(key, members)| VoteGroup {
            key: key.clone(),
            votes: members.len(),
            subset_indices: members.iter().map(|m| m.subset_index).collect(),
        })
        .collect();
    let accepted = accepted.iter().map(|p| p.subset_index).collect();
    AggregationOutcome {
        k,
        raw_outputs,
        parsed,
        accepted,
        groups: vote_groups,
        selected,
    }
}

/// Issues one aggregation request per subset, filters by class count and
/// selects the meta-information.
pub fn aggregate(
    hist: &PredictionHistogram,
    k: usize,
    gateway: &Gateway,
    task: TaskType,
    options: &AggregateOptions<'_>,
) -> Result<AggregationOutcome, AggregationError> {
    if k < 2 {
        return Err(AggregationError::InvalidK(k));
    }
    if hist.is_empty() {
        return Err(AggregationError::EmptyHistogram);
    }
    let hist = match options.max_subsets {
        Some(n) if n < hist.len() => hist.truncated(n.max(1)),
        _ => hist.clone(),
    };
    let family = build_subsets(&hist);
    let requests = family
        .subsets
        .iter()
        .map(|s| {
            let prompt = options.templates.render_aggregation(std::slice::from_ref(s), task, k)?;
            Ok(options.params.request(prompt, StageTag::Aggregation))
        })
        .collect::<Result<Vec<_>, PromptError>>()?;

    let results = gateway.complete_batch(&requests, false);
    if let Some(Err(first)) = results.iter().find(|r| r.is_err()) {
        if results.iter().all(|r| r.is_err()) {
            return Err(first.clone().into());
        }
    }

    let mut raw_outputs = Vec::with_capacity(results.len());
    let mut parsed = Vec::new();
    for (subset, result) in family.subsets.iter().zip(results) {
        let subset_index = subset.len();
        match result {
            Ok(r) => {
                parsed.push(ParsedOutput {
                    subset_index,
                    classes: parse_aggregation_output(&r.text),
                });
                raw_outputs.push(RawOutput {
                    subset_index,
                    text: Some(r.text),
                    error: None,
                });
            }
            Err(e) => raw_outputs.push(RawOutput {
                subset_index,
                text: None,
                error: Some(e.to_string()),
            }),
        }
    }

    let outcome = select(k, raw_outputs, parsed);
    if outcome.selected.is_none() {
        return Err(AggregationError::SelectionFailed {
            k,
            outcome: Box::new(outcome),
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockRule, MockScript};

    fn entries(h: &PredictionHistogram) -> Vec<(&str, usize)> {
        h.entries.iter().map(|e| (e.label.as_str(), e.count)).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_label("  Positive  Sentiment. "), "positive sentiment");
        assert_eq!(normalize_label("\"Negative\"!"), "negative");
        assert_eq!(normalize_label("**Sports**"), "sports");
        assert_eq!(normalize_label("Sci/Tech"), "sci/tech");
        assert_eq!(normalize_label("..."), "");
    }

    #[test]
    fn histogram_drops_singletons_and_breaks_ties_by_label() {
        let h = build_histogram(&["Positive", "positive", "Negative", "Negative", "Neutral"]).unwrap();
        assert_eq!(entries(&h), vec![("negative", 2), ("positive", 2)]);
        assert_eq!(h.entries[0].display, "Negative");
    }

    #[test]
    fn histogram_counts() {
        let mut raw = vec![" joy"; 5];
        raw.extend([" anger"; 3]);
        raw.push(" meh");
        let h = build_histogram(&raw).unwrap();
        assert_eq!(entries(&h), vec![("joy", 5), ("anger", 3)]);
    }

    #[test]
    fn histogram_errors() {
        assert!(matches!(build_histogram(&["a"]), Err(AggregationError::EmptyHistogram)));
        assert!(matches!(build_histogram::<&str>(&[]), Err(AggregationError::EmptyInput)));
    }

    #[test]
    fn display_keeps_most_frequent_spelling() {
        let h = build_histogram(&["positive", "Positive", "Positive."]).unwrap();
        assert_eq!(h.entries[0].display, "Positive");
        assert_eq!(h.entries[0].count, 3);
    }

    #[test]
    fn subsets_by_definition() {
        let h = PredictionHistogram {
            entries: [("a", 5), ("b", 3), ("c", 2)]
                .iter()
                .map(|(l, c)| HistogramEntry {
                    label: l.to_string(),
                    display: l.to_string(),
                    count: *c,
                })
                .collect(),
        };
        let f = build_subsets(&h);
        assert_eq!(f.subsets, vec![vec!["a", "b", "c"], vec!["a", "b"], vec!["a"]]);
        assert_eq!(build_subsets(&h.truncated(1)).subsets, vec![vec!["a"]]);
    }

    #[test]
    fn first_label_repeats_across_ten_subsets() {
        let raw: Vec<String> = (0..10)
            .flat_map(|i| std::iter::repeat_n(format!("label{i:02}"), 20 - i))
            .collect();
        let f = build_subsets(&build_histogram(&raw).unwrap());
        let count = |l: &str| f.subsets.iter().flatten().filter(|x| *x == l).count();
        assert_eq!(count("label00"), 10);
        assert_eq!(count("label09"), 1);
    }

    #[test]
    fn parses_class_lines_with_descriptions() {
        let p = parse_aggregation_output(
            "Class 0: Positive Sentiment: expresses positive emotion\nClass 1: Negative Sentiment",
        );
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].title, "Positive Sentiment");
        assert_eq!(p[0].description.as_deref(), Some("expresses positive emotion"));
        assert_eq!(p[1].description, None);
    }

    #[test]
    fn parses_comma_list() {
        let p = parse_aggregation_output("Positive, Negative, Neutral");
        let titles: Vec<&str> = p.iter().map(|c| c.title.as_str()).collect();
        assert_eq!(titles, vec!["Positive", "Negative", "Neutral"]);
        assert!(p.iter().all(|c| c.description.is_none()));
    }

    #[test]
    fn parses_bold_markdown_lines() {
        let text = "Here are the aggregated classes:\n\n\
            **Neutral Sentiment**: This class includes all the sentiment labels that express a neutral sentiment.\n\
            **Negative Sentiment**: This class includes labels that express a negative or sad emotion.\n\
            **Ambiguous Sentiment**: Labels that do not clearly express a positive or negative emotion.\n\
            **Mixed Sentiment**: Labels that express a mixed sentiment.\n\
            **Positive Sentiment**: Labels that express a positive emotion.";
        let p = parse_aggregation_output(text);
        assert_eq!(p.len(), 5);
        assert_eq!(p[0].title, "Neutral Sentiment");
        assert!(p.iter().all(|c| c.description.is_some()));
    }

    #[test]
    fn parses_numbered_and_bulleted_and_dedups() {
        let p = parse_aggregation_output("1. World\n2) Sports\n3. Business: money\n4. world");
        let titles: Vec<&str> = p.iter().map(|c| c.title.as_str()).collect();
        assert_eq!(titles, vec!["World", "Sports", "Business"]);
        let b = parse_aggregation_output("- **Class 0**: Sports\n- **Class 1**: Politics");
        assert_eq!(b.iter().map(|c| c.title.as_str()).collect::<Vec<_>>(), vec!["Sports", "Politics"]);
        let c = parse_aggregation_output("Classes:\n- Alpha\n* Beta: second\n");
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].description.as_deref(), Some("second"));
        assert!(parse_aggregation_output("I cannot do that.").is_empty());
        assert!(parse_aggregation_output("").is_empty());
    }

    #[test]
    fn class_lines_take_priority_over_bullets() {
        let text = "- positive\n- negative\n- meh\nClass 0: Positive\nClass 1: Negative";
        assert_eq!(parse_aggregation_output(text).len(), 2);
    }

    fn hist(labels: &[(&str, usize)]) -> PredictionHistogram {
        let raw: Vec<String> = labels
            .iter()
            .flat_map(|(l, c)| std::iter::repeat_n(l.to_string(), *c))
            .collect();
        build_histogram(&raw).unwrap()
    }

    fn options(t: &Templates) -> AggregateOptions<'_> {
        AggregateOptions {
            params: StageParams::new("mock", 0.0, 1024),
            templates: t,
            max_subsets: None,
        }
    }

    #[test]
    fn unanimous_outputs_get_every_vote() {
        let h = hist(&[("good", 6), ("bad", 4), ("fine", 3), ("meh", 2)]);
        let gw = Gateway::mock(MockScript::with_default("Class 0: Good\nClass 1: Bad"));
        let t = Templates::default();
        let out = aggregate(&h, 2, &gw, TaskType::Sentiment, &options(&t)).unwrap();
        let meta = out.selected.unwrap();
        assert_eq!(meta.source_votes, 4);
        assert_eq!(meta.titles(), vec!["Good", "Bad"]);
        assert_eq!(gw.stats().backend_calls, 4); 
    }

    #[test]
    fn majority_class_set_wins() {
        // Subsets S_5..S_1; S_5 and S_4 give set A, S_3 gives set B, S_2 and
        // S_1 give the wrong class count.
        let h = hist(&[("l1", 9), ("l2", 8), ("l3", 7), ("l4", 6), ("l5", 5)]);
        let script = MockScript::with_default("Class 0: Only")
            .rule(MockRule::new(None, &["\nl5\n"], "Class 0: Up\nClass 1: Down"))
            .rule(MockRule::new(None, &["\nl4\n"], "Class 0: down\nClass 1: UP"))
            .rule(MockRule::new(None, &["\nl3\n"], "Class 0: Left\nClass 1: Right"));
        let gw = Gateway::mock(script);
        let t = Templates::default();
        let out = aggregate(&h, 2, &gw, TaskType::Topic, &options(&t)).unwrap();
        assert_eq!(out.accepted, vec![5, 4, 3]);
        assert_eq!(out.groups[0].votes, 2);
        assert_eq!(out.groups[1].votes, 1);
        let meta = out.selected.unwrap();
        assert_eq!(meta.source_votes, 2);
        // Representative comes from the largest subset, S_5.
        assert_eq!(meta.titles(), vec!["Up", "Down"]);
    }

    #[test]
    fn vote_ties_go_to_the_largest_subset() {
        let h = hist(&[("x1", 3), ("x2", 2)]);
        let script = MockScript::with_default("Class 0: A\nClass 1: B")
            .rule(MockRule::new(None, &["\nx2\n"], "Class 0: C\nClass 1: D"));
        let gw = Gateway::mock(script);
        let t = Templates::default();
        let out = aggregate(&h, 2, &gw, TaskType::Topic, &options(&t)).unwrap();
        assert_eq!(out.selected.unwrap().titles(), vec!["C", "D"]);
    }

    #[test]
    fn never_matching_k_fails_selection() {
        let h = hist(&[("a", 2), ("b", 2)]);
        let gw = Gateway::mock(MockScript::with_default("Class 0: A\nClass 1: B\nClass 2: C"));
        let t = Templates::default();
        match aggregate(&h, 2, &gw, TaskType::Topic, &options(&t)) {
            Err(AggregationError::SelectionFailed { k, outcome }) => {
                assert_eq!(k, 2);
                assert_eq!(outcome.raw_outputs.len(), 2);
                assert!(outcome.accepted.is_empty());
            }
            other => panic!("expected selection failure, got {other:?}"),
        }
        assert!(matches!(
            aggregate(&h, 1, &gw, TaskType::Topic, &options(&t)),
            Err(AggregationError::InvalidK(1))
        ));
    }

    #[test]
    fn max_subsets_limits_calls() {
        let h = hist(&[("a", 5), ("b", 4), ("c", 3), ("d", 2)]);
        let gw = Gateway::mock(MockScript::with_default("Class 0: A\nClass 1: B"));
        let t = Templates::default();
        let mut o = options(&t);
        o.max_subsets = Some(2);
        let out = aggregate(&h, 2, &gw, TaskType::Topic, &o).unwrap();
        assert_eq!(out.raw_outputs.iter().map(|r| r.subset_index).collect::<Vec<_>>(), vec![2, 1]);
    }
}
