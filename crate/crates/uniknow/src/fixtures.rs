//! Synthetic desk-scale fixtures: MRQA-format datasets, a retrieval corpus,
//! and a mock knowledge store, generated so that every construction step can
//! succeed (answers are unique and absent from all other documents, and every
//! question has an on-topic answer-free corpus chunk).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{DatasetId, Split};
use crate::jsonl::write_atomic;

#[derive(Debug, Clone)]
pub struct FixtureDatasetSpec {
    pub id: DatasetId,
    pub split: Split,
    pub known: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub datasets: Vec<FixtureDatasetSpec>,
}

impl FixtureSpec {
    pub fn small() -> Self {
        FixtureSpec {
            datasets: vec![FixtureDatasetSpec {
                id: DatasetId::Custom,
                split: Split::Test,
                known: 10,
                unknown: 10,
            }],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixturePaths {
    pub root: PathBuf,
    pub datasets: Vec<(String, String, PathBuf)>,
    pub corpus: PathBuf,
    pub knowledge: PathBuf,
}

/// Fixed-length alphabetic code; same-length codes are never substrings of
/// one another, which keeps normalized-containment checks surgical.
fn code(mut i: usize) -> String {
    let mut out = ['a'; 5];
    for slot in out.iter_mut().rev() {
        *slot = (b'a' + (i % 26) as u8) as char;
        i /= 26;
    }
    out.iter().collect()
}

struct FixtureQuestion {
    qid: String,
    question: String,
    answer: String,
    context: String,
    corpus_doc: String,
    known: bool,
}

fn build_question(dataset: DatasetId, ordinal: usize, global: usize, known: bool) -> FixtureQuestion {
    let tag = code(global);
    let topic = format!("veldra{tag}");
    let answer = format!("answord{tag}");
    let qid = format!("{}-{tag}", dataset.as_str());
    let question = format!("what does the codeword {topic} stand for");
    let context = format!(
        "the codeword {topic} stands for {answer} according to archive shelf {ordinal}. \
         curators filed the {topic} ledger beside older records, noting that {answer} \
         was confirmed during a routine audit of the collection."
    );
    let corpus_doc = format!(
        "the codeword {topic} appears across several catalog discussions. researchers \
         cross-reference the {topic} entry with shelf indexes and reading-room notes, \
         but the catalog volume itself lists only locations and dates."
    );
    FixtureQuestion {
        qid,
        question,
        answer,
        context,
        corpus_doc,
        known,
    }
}

/// Generate fixture files under `root`. Returns the written paths; the
/// knowledge store maps every `known` question to its answer.
pub fn generate(root: &Path, spec: &FixtureSpec) -> Result<FixturePaths> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut corpus_lines = Vec::new();
    let mut knowledge: BTreeMap<String, String> = BTreeMap::new();
    let mut datasets = Vec::new();
    let mut global = 0usize;

    for ds in &spec.datasets {
        let mut lines = vec![serde_json::json!({
            "header": {"dataset": ds.id.as_str(), "split": format!("{:?}", ds.split)}
        })
        .to_string()];
        for ordinal in 0..(ds.known + ds.unknown) {
            let known = ordinal < ds.known;
            let q = build_question(ds.id, ordinal, global, known);
            global += 1;
            lines.push(
                serde_json::json!({
                    "context": q.context,
                    "qas": [{
                        "qid": q.qid,
                        "question": q.question,
                        "answers": [q.answer],
                        "detected_answers": [{"text": q.answer, "char_spans": [[0, 0]]}]
                    }]
                })
                .to_string(),
            );
            corpus_lines.push(q.corpus_doc.clone());
            if q.known {
                knowledge.insert(q.question.clone(), q.answer.clone());
            }
        }
        let file = root.join(format!(
            "{}_{:?}.jsonl",
            ds.id.as_str().to_ascii_lowercase(),
            ds.split
        ));
        write_atomic(&file, (lines.join("\n") + "\n").as_bytes())?;
        datasets.push((
            ds.id.as_str().to_string(),
            format!("{:?}", ds.split).to_ascii_lowercase(),
            file,
        ));
    }

    let corpus = root.join("corpus.txt");
    write_atomic(&corpus, (corpus_lines.join("\n") + "\n").as_bytes())?;

    let knowledge_path = root.join("knowledge.json");
    write_atomic(
        &knowledge_path,
        serde_json::to_string_pretty(&knowledge).unwrap().as_bytes(),
    )?;

    Ok(FixturePaths {
        root: root.to_path_buf(),
        datasets,
        corpus,
        knowledge: knowledge_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::normalize::contains_normalized;
    use crate::ingest::load_dataset;

    #[test]
    fn fixture_loads_cleanly_and_answers_stay_private() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            datasets: vec![FixtureDatasetSpec {
                id: DatasetId::NQ,
                split: Split::Test,
                known: 5,
                unknown: 5,
            }],
        };
        let paths = generate(dir.path(), &spec).unwrap();
        let loaded = load_dataset(&paths.datasets[0].2, DatasetId::NQ, Split::Test, None).unwrap();
        assert_eq!(loaded.examples.len(), 10);
        assert_eq!(loaded.stats.skipped, 0);

        let corpus = std::fs::read_to_string(&paths.corpus).unwrap();
        for example in &loaded.examples {
            // answers never leak into the corpus or other contexts
            assert!(!contains_normalized(&corpus, example.primary_alias()));
            for other in &loaded.examples {
                if other.qid != example.qid {
                    assert!(!contains_normalized(&other.raw_context, example.primary_alias()));
                }
            }
        }
    }

    #[test]
    fn codes_are_equal_length_and_distinct() {
        let a = code(0);
        let b = code(1);
        let c = code(26 * 26);
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        assert_eq!(c.len(), 5);
        assert_ne!(a, b);
        assert_ne!(b, c);
    }
}
