#![allow(dead_code)]

use textclust_core::{Corpus, MockRule, MockScript, StageTag, TaskType, TextInstance};

pub fn labeled(name: &str, task: TaskType, rows: &[(String, &str)]) -> Corpus {
    let instances = rows
        .iter()
        .enumerate()
        .map(|(i, (text, label))| TextInstance {
            id: format!("r{i:03}"),
            text: text.clone(),
            gold_label: Some(label.to_string()),
        })
        .collect();
    Corpus::new(name, task, instances, None, None).unwrap()
}

/// 20 positive and 20 negative reviews. Texts tagged `[c0]` are answered
/// with Class 0 in the final stage, `[c1]` with Class 1: 17 + 3 per class.
pub fn reviews_corpus() -> Corpus {
    let mut rows = Vec::new();
    for i in 0..20 {
        let tag = if i < 17 { "[c0]" } else { "[c1]" };
        rows.push((format!("[P] review {i} {tag}: a lovely, warm film."), "Positive"));
    }
    for i in 0..20 {
        let tag = if i < 17 { "[c1]" } else { "[c0]" };
        rows.push((format!("[N] review {i} {tag}: dull and far too long."), "Negative"));
    }
    labeled("reviews", TaskType::Sentiment, &rows)
}

pub fn reviews_script() -> MockScript {
    MockScript::with_default("I am not sure.")
        .rule(MockRule::new(Some(StageTag::OpenInference), &["[P]"], "Positive"))
        .rule(MockRule::new(Some(StageTag::OpenInference), &["[N]"], "negative."))
        .rule(MockRule::new(
            Some(StageTag::Aggregation),
            &[],
            "Class 0: Positive: favourable opinion\nClass 1: Negative: unfavourable opinion",
        ))
        .rule(MockRule::new(Some(StageTag::FinalPrediction), &["[c0]"], "The answer is Class 0."))
        .rule(MockRule::new(Some(StageTag::FinalPrediction), &["[c1]"], "Class 1"))
}

/// Sorted `(file name, bytes)` of every file under `dir`.
pub fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
