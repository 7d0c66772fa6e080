//! MRQA-format dataset loading and original-context distillation.
//!
//! Each raw document is reduced to a length-bounded window that still
//! contains the answer: one candidate window per alias occurrence, scored by
//! the relevance scorer against "question + answer", highest score wins.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::clients::RelevanceScorer;
use crate::error::{Error, Result};
use crate::eval::normalize::{contains_normalized, normalize_answer, token_overlap_f1};

pub const DEFAULT_WINDOW_WORDS: usize = 100;
/// SQuAD documents are clipped to their first 800 tokens before windowing.
pub const SQUAD_MAX_DOC_TOKENS: usize = 800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    NQ,
    TriviaQA,
    HotpotQA,
    #[serde(rename = "SQuAD")]
    SQuAD,
    BioASQ,
    TextbookQA,
    RE,
    #[serde(rename = "custom")]
    Custom,
}

impl DatasetId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nq" | "naturalquestions" => Ok(DatasetId::NQ),
            "triviaqa" => Ok(DatasetId::TriviaQA),
            "hotpotqa" => Ok(DatasetId::HotpotQA),
            "squad" => Ok(DatasetId::SQuAD),
            "bioasq" => Ok(DatasetId::BioASQ),
            "textbookqa" => Ok(DatasetId::TextbookQA),
            "re" | "relationextraction" => Ok(DatasetId::RE),
            "custom" => Ok(DatasetId::Custom),
            other => Err(Error::Validation(format!("unknown dataset id {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::NQ => "NQ",
            DatasetId::TriviaQA => "TriviaQA",
            DatasetId::HotpotQA => "HotpotQA",
            DatasetId::SQuAD => "SQuAD",
            DatasetId::BioASQ => "BioASQ",
            DatasetId::TextbookQA => "TextbookQA",
            DatasetId::RE => "RE",
            DatasetId::Custom => "custom",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" | "dev" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One question with its answer aliases and source document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAExample {
    pub qid: String,
    pub question: String,
    /// Non-empty; every alias is non-empty after normalization and at least
    /// one occurs in `raw_context` as a normalized substring.
    pub answer_aliases: Vec<String>,
    pub raw_context: String,
    pub dataset_id: DatasetId,
    pub split: Split,
}

impl QAExample {
    pub fn primary_alias(&self) -> &str {
        &self.answer_aliases[0]
    }
}

/// One candidate context window anchored on an alias occurrence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextWindow {
    pub text: String,
    pub span_alias: String,
    pub relevance_score: f64,
    pub word_count: usize,
    /// Token offset of the window in the source document, for tie-breaking.
    pub start_token: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped: usize,
    /// Skip reasons -> counts.
    pub reasons: BTreeMap<String, usize>,
}

impl LoadStats {
    fn skip(&mut self, reason: &str) {
        self.skipped += 1;
        *self.reasons.entry(reason.to_string()).or_insert(0) += 1;
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub examples: Vec<QAExample>,
    pub stats: LoadStats,
}

#[derive(Deserialize)]
struct MrqaDetectedAnswer {
    text: String,
}

#[derive(Deserialize)]
struct MrqaQa {
    qid: String,
    question: String,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    detected_answers: Vec<MrqaDetectedAnswer>,
}

#[derive(Deserialize)]
struct MrqaRecord {
    context: String,
    qas: Vec<MrqaQa>,
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|ext| ext == "gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= max_tokens {
        text.to_string()
    } else {
        tokens[..max_tokens].join(" ")
    }
}

/// Load an MRQA JSON-lines file (gzip transparently supported).
///
/// The first line must be a JSON header object; malformed records and
/// answer-absent documents are skipped with counters, never fatal.
/// `max_doc_tokens` clips documents before the answer-presence check; SQuAD
/// defaults to its 800-token rule when no explicit limit is given.
pub fn load_dataset(
    path: &Path,
    dataset_id: DatasetId,
    split: Split,
    max_doc_tokens: Option<usize>,
) -> Result<LoadedDataset> {
    let reader = open_maybe_gzip(path)?;
    let mut lines = reader.lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file, missing header line", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header_value: serde_json::Value = serde_json::from_str(&header)
        .map_err(|e| Error::Format(format!("{}: malformed header line: {e}", path.display())))?;
    if !header_value.is_object() {
        return Err(Error::Format(format!(
            "{}: header line is not a JSON object",
            path.display()
        )));
    }

    let clip = max_doc_tokens.or(match dataset_id {
        DatasetId::SQuAD => Some(SQUAD_MAX_DOC_TOKENS),
        _ => None,
    });

    let mut stats = LoadStats::default();
    let mut examples = Vec::new();
    let mut seen_qids: HashSet<String> = HashSet::new();

    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MrqaRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                stats.skip("malformed_record");
                continue;
            }
        };
        let context = match clip {
            Some(max) => truncate_tokens(&record.context, max),
            None => record.context.clone(),
        };
        for qa in record.qas {
            let mut aliases: Vec<String> = Vec::new();
            let candidates = qa
                .answers
                .iter()
                .cloned()
                .chain(qa.detected_answers.iter().map(|d| d.text.clone()));
            for alias in candidates {
                if normalize_answer(&alias).is_empty() {
                    continue;
                }
                if !aliases.iter().any(|a| normalize_answer(a) == normalize_answer(&alias)) {
                    aliases.push(alias);
                }
            }
            if aliases.is_empty() {
                stats.skip("no_usable_alias");
                continue;
            }
            if !aliases.iter().any(|a| contains_normalized(&context, a)) {
                stats.skip("answer_not_in_context");
                continue;
            }
            if !seen_qids.insert(qa.qid.clone()) {
                stats.skip("duplicate_qid");
                continue;
            }
            examples.push(QAExample {
                qid: qa.qid,
                question: qa.question,
                answer_aliases: aliases,
                raw_context: context.clone(),
                dataset_id,
                split,
            });
        }
    }
    stats.loaded = examples.len();
    Ok(LoadedDataset { examples, stats })
}

// ---------------------------------------------------------------------------
// Window construction
// ---------------------------------------------------------------------------

/// Token spans `[start, end)` where `alias` occurs in `tokens`, matching on
/// normalized forms. Single tokens that merely contain the alias (hyphenated
/// compounds and the like) also count.
pub fn alias_token_spans(tokens: &[&str], alias: &str) -> Vec<(usize, usize)> {
    let alias_norm = normalize_answer(alias);
    if alias_norm.is_empty() {
        return Vec::new();
    }
    let norm: Vec<String> = tokens.iter().map(|t| normalize_answer(t)).collect();
    let alias_token_count = alias_norm.split_whitespace().count().max(1);
    let max_span = alias_token_count + 2;
    let mut spans = Vec::new();
    for start in 0..tokens.len() {
        if norm[start].is_empty() {
            continue;
        }
        let mut joined = String::new();
        for end in start + 1..=tokens.len().min(start + max_span) {
            let piece = &norm[end - 1];
            if piece.is_empty() {
                break;
            }
            if !joined.is_empty() {
                joined.push(' ');
            }
            joined.push_str(piece);
            if joined == alias_norm {
                spans.push((start, end));
                break;
            }
            if joined.len() > alias_norm.len() {
                break;
            }
        }
        if norm[start] != alias_norm && norm[start].contains(alias_norm.as_str()) {
            spans.push((start, start + 1));
        }
    }
    spans.sort_unstable();
    spans.dedup();
    spans
}

/// One candidate window per alias occurrence, centered on the occurrence and
/// clipped at document edges. Returns an empty list (with a diagnostic on
/// stderr) when no occurrence is anchorable, which load-time filtering makes
/// rare.
pub fn make_context_windows(example: &QAExample, window_words: usize) -> Vec<ContextWindow> {
    assert!(window_words >= 1, "window_words must be >= 1");
    let tokens: Vec<&str> = example.raw_context.split_whitespace().collect();
    let total = tokens.len();
    if total == 0 {
        eprintln!("[uniknow] {}: empty document, no windows", example.qid);
        return Vec::new();
    }

    let mut occurrences: Vec<(usize, usize, &str)> = Vec::new();
    for alias in &example.answer_aliases {
        for (start, end) in alias_token_spans(&tokens, alias) {
            occurrences.push((start, end, alias.as_str()));
        }
    }
    occurrences.sort_by_key(|(s, e, _)| (*s, *e));
    occurrences.dedup_by_key(|(s, e, _)| (*s, *e));

    if occurrences.is_empty() {
        eprintln!(
            "[uniknow] {}: no anchorable alias occurrence despite load-time filtering",
            example.qid
        );
        return Vec::new();
    }

    occurrences
        .into_iter()
        .map(|(span_start, span_end, alias)| {
            let (start, end) = if total <= window_words {
                (0, total)
            } else {
                let span_len = span_end - span_start;
                if span_len >= window_words {
                    (span_start, span_start + window_words)
                } else {
                    let left = (window_words - span_len) / 2;
                    let start = span_start.saturating_sub(left);
                    let end = start + window_words;
                    if end > total {
                        (total - window_words, total)
                    } else {
                        (start, end)
                    }
                }
            };
            ContextWindow {
                text: tokens[start..end].join(" "),
                span_alias: alias.to_string(),
                relevance_score: 0.0,
                word_count: end - start,
                start_token: start,
            }
        })
        .collect()
}

/// The chosen original context plus whether lexical fallback scoring was used.
#[derive(Debug, Clone)]
pub struct SelectedContext {
    pub window: ContextWindow,
    pub fallback_scored: bool,
}

/// Pick the candidate maximizing `scorer(premise = candidate, hypothesis =
/// question + " " + answer)`. Ties break toward the earliest document
/// position. If the scorer fails on every candidate the deterministic
/// token-overlap fallback is used and the result is tagged.
pub fn select_original_context(
    candidates: &[ContextWindow],
    scorer: &dyn RelevanceScorer,
    question: &str,
    answer: &str,
) -> Result<SelectedContext> {
    if candidates.is_empty() {
        return Err(Error::Validation(
            "select_original_context requires at least one candidate".into(),
        ));
    }
    let hypothesis = format!("{question} {answer}");

    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (i, cand) in candidates.iter().enumerate() {
        if let Ok(score) = scorer.score(&cand.text, &hypothesis) {
            scored.push((i, score));
        }
    }
    let fallback = scored.is_empty();
    if fallback {
        scored = candidates
            .iter()
            .enumerate()
            .map(|(i, cand)| (i, token_overlap_f1(&cand.text, &hypothesis)))
            .collect();
    }

    // candidates arrive in document order; strict comparison keeps the
    // earliest window on ties
    let mut best = scored[0];
    for &(i, score) in &scored[1..] {
        let earlier = candidates[i].start_token < candidates[best.0].start_token;
        if score > best.1 || (score == best.1 && earlier) {
            best = (i, score);
        }
    }
    let mut window = candidates[best.0].clone();
    window.relevance_score = best.1;
    Ok(SelectedContext {
        window,
        fallback_scored: fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::LexicalScorer;
    use std::io::Write;

    fn write_mrqa(dir: &Path, name: &str, records: &[serde_json::Value]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut lines = vec![serde_json::json!({"header": {"dataset": "fixture"}}).to_string()];
        lines.extend(records.iter().map(|r| r.to_string()));
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn record(qid: &str, question: &str, answers: &[&str], context: &str) -> serde_json::Value {
        serde_json::json!({
            "context": context,
            "qas": [{
                "qid": qid,
                "question": question,
                "answers": answers,
                "detected_answers": [{"text": answers[0], "char_spans": [[0, 1]]}]
            }]
        })
    }

    fn example(context: &str, aliases: &[&str]) -> QAExample {
        QAExample {
            qid: "q0".into(),
            question: "what is it".into(),
            answer_aliases: aliases.iter().map(|s| s.to_string()).collect(),
            raw_context: context.into(),
            dataset_id: DatasetId::Custom,
            split: Split::Test,
        }
    }

    #[test]
    fn load_counts_answer_absent_records() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<serde_json::Value> = (0..5)
            .map(|i| {
                let context = if i == 2 {
                    "this document never mentions it".to_string()
                } else {
                    format!("the answer here is thing{i} indeed")
                };
                record(
                    &format!("q{i}"),
                    &format!("what is thing {i}"),
                    &[&format!("thing{i}")],
                    &context,
                )
            })
            .collect();
        let path = write_mrqa(dir.path(), "f.jsonl", &records);
        let loaded = load_dataset(&path, DatasetId::Custom, Split::Test, None).unwrap();
        assert_eq!(loaded.examples.len(), 4);
        assert_eq!(loaded.stats.skipped, 1);
        assert_eq!(loaded.stats.reasons["answer_not_in_context"], 1);
    }

    #[test]
    fn empty_after_header_is_empty_no_skips() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_mrqa(dir.path(), "empty.jsonl", &[]);
        let loaded = load_dataset(&path, DatasetId::NQ, Split::Test, None).unwrap();
        assert!(loaded.examples.is_empty());
        assert_eq!(loaded.stats.skipped, 0);
    }

    #[test]
    fn malformed_header_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            load_dataset(&path, DatasetId::NQ, Split::Test, None),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn malformed_record_is_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        let good = record("q1", "what is x", &["x1"], "the value x1 appears");
        std::fs::write(&path, format!("{{}}\n{{broken\n{good}\n")).unwrap();
        let loaded = load_dataset(&path, DatasetId::NQ, Split::Test, None).unwrap();
        assert_eq!(loaded.examples.len(), 1);
        assert_eq!(loaded.stats.reasons["malformed_record"], 1);
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl.gz");
        let rec = record("q1", "what is x", &["x1"], "the value x1 appears");
        let mut encoder =
            flate2::write::GzEncoder::new(std::fs::File::create(&path).unwrap(), Default::default());
        write!(encoder, "{}\n{rec}\n", serde_json::json!({"header": {}})).unwrap();
        encoder.finish().unwrap();
        let loaded = load_dataset(&path, DatasetId::NQ, Split::Test, None).unwrap();
        assert_eq!(loaded.examples.len(), 1);
    }

    #[test]
    fn load_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<serde_json::Value> = (0..10)
            .map(|i| record(&format!("q{i}"), "q", &[&format!("a{i}")], &format!("text a{i} text")))
            .collect();
        let path = write_mrqa(dir.path(), "f.jsonl", &records);
        let a = load_dataset(&path, DatasetId::NQ, Split::Test, None).unwrap();
        let b = load_dataset(&path, DatasetId::NQ, Split::Test, None).unwrap();
        let qids = |l: &LoadedDataset| l.examples.iter().map(|e| e.qid.clone()).collect::<Vec<_>>();
        assert_eq!(qids(&a), qids(&b));
    }

    #[test]
    fn duplicate_qids_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record("q1", "what is x", &["x1"], "the value x1 appears");
        let path = write_mrqa(dir.path(), "dup.jsonl", &[rec.clone(), rec]);
        let loaded = load_dataset(&path, DatasetId::NQ, Split::Test, None).unwrap();
        assert_eq!(loaded.examples.len(), 1);
        assert_eq!(loaded.stats.reasons["duplicate_qid"], 1);
    }

    #[test]
    fn squad_clips_to_800_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let mut words: Vec<String> = (0..900).map(|i| format!("w{i}")).collect();
        words[850] = "needle".into();
        let rec = record("q1", "where is the needle", &["needle"], &words.join(" "));
        let path = write_mrqa(dir.path(), "squad.jsonl", &[rec]);
        let loaded = load_dataset(&path, DatasetId::SQuAD, Split::Test, None).unwrap();
        // answer sits beyond token 800, so the clipped document loses it
        assert_eq!(loaded.examples.len(), 0);
        assert_eq!(loaded.stats.reasons["answer_not_in_context"], 1);
        // other datasets keep the full document
        let loaded = load_dataset(&path, DatasetId::NQ, Split::Test, None).unwrap();
        assert_eq!(loaded.examples.len(), 1);
    }

    #[test]
    fn whole_document_window_when_short() {
        let words: Vec<String> = (0..49).map(|i| format!("w{i}")).collect();
        let context = format!("{} target", words.join(" "));
        let ex = example(&context, &["target"]);
        let windows = make_context_windows(&ex, 100);
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].word_count, 50);
        assert_eq!(windows[0].text, context);
    }

    #[test]
    fn centered_window_of_exactly_100_words() {
        let mut words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        words[150] = "needle".into();
        let ex = example(&words.join(" "), &["needle"]);
        let windows = make_context_windows(&ex, 100);
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].word_count, 100);
        assert!(windows[0].text.split_whitespace().any(|w| w == "needle"));
        assert!(contains_normalized(&windows[0].text, "needle"));
        // centered: the span index 150 sits inside [101, 201)
        assert_eq!(windows[0].start_token, 101);
    }

    #[test]
    fn three_occurrences_three_windows() {
        let mut words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        for idx in [10, 150, 290] {
            words[idx] = "needle".into();
        }
        let ex = example(&words.join(" "), &["needle"]);
        let windows = make_context_windows(&ex, 100);
        assert_eq!(windows.len(), 3);
        for w in &windows {
            assert!(contains_normalized(&w.text, "needle"));
            assert!(w.word_count <= 100);
        }
    }

    #[test]
    fn edge_occurrence_shifts_inward() {
        let mut words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        words[0] = "needle".into();
        let ex = example(&words.join(" "), &["needle"]);
        let windows = make_context_windows(&ex, 100);
        assert_eq!(windows[0].start_token, 0);
        assert_eq!(windows[0].word_count, 100);
    }

    #[test]
    fn multiword_alias_anchors() {
        let context = "history notes that Eiffel Tower, was built in paris long ago";
        let ex = example(context, &["Eiffel Tower"]);
        let windows = make_context_windows(&ex, 5);
        assert_eq!(windows.len(), 1);
        assert!(contains_normalized(&windows[0].text, "Eiffel Tower"));
    }

    #[test]
    fn singleton_candidate_wins_regardless_of_score() {
        let ex = example("only window mentioning target here", &["target"]);
        let windows = make_context_windows(&ex, 100);
        let selected =
            select_original_context(&windows, &LexicalScorer, "unrelated words entirely", "nothing")
                .unwrap();
        assert_eq!(selected.window.text, windows[0].text);
        assert!(!selected.fallback_scored);
    }

    struct FixedScorer(Vec<f64>);
    impl RelevanceScorer for FixedScorer {
        fn id(&self) -> &str {
            "fixed"
        }
        fn score(&self, premise: &str, _hypothesis: &str) -> Result<f64> {
            // keyed by a marker token planted in each candidate
            for (i, score) in self.0.iter().enumerate() {
                if premise.contains(&format!("marker{i}")) {
                    return Ok(*score);
                }
            }
            Ok(0.0)
        }
    }

    struct FailingScorer;
    impl RelevanceScorer for FailingScorer {
        fn id(&self) -> &str {
            "failing"
        }
        fn score(&self, _premise: &str, _hypothesis: &str) -> Result<f64> {
            Err(Error::Scorer("offline".into()))
        }
    }

    fn two_candidates() -> Vec<ContextWindow> {
        vec![
            ContextWindow {
                text: "marker0 needle in early text".into(),
                span_alias: "needle".into(),
                relevance_score: 0.0,
                word_count: 5,
                start_token: 0,
            },
            ContextWindow {
                text: "marker1 needle in later text".into(),
                span_alias: "needle".into(),
                relevance_score: 0.0,
                word_count: 5,
                start_token: 40,
            },
        ]
    }

    #[test]
    fn argmax_picks_higher_score() {
        let selected = select_original_context(
            &two_candidates(),
            &FixedScorer(vec![0.3, 0.9]),
            "q",
            "needle",
        )
        .unwrap();
        assert_eq!(selected.window.start_token, 40);
        assert_eq!(selected.window.relevance_score, 0.9);
    }

    #[test]
    fn ties_break_to_earliest_position_deterministically() {
        for _ in 0..10 {
            let selected = select_original_context(
                &two_candidates(),
                &FixedScorer(vec![0.5, 0.5]),
                "q",
                "needle",
            )
            .unwrap();
            assert_eq!(selected.window.start_token, 0);
        }
    }

    #[test]
    fn scorer_failure_falls_back_to_lexical() {
        let selected =
            select_original_context(&two_candidates(), &FailingScorer, "needle early", "text")
                .unwrap();
        assert!(selected.fallback_scored);
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(select_original_context(&[], &LexicalScorer, "q", "a").is_err());
    }
}
