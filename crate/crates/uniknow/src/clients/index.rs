//! Local inverted index over fixed-size passage chunks with BM25 scoring.
//!
//! Documents are split into chunks of at most `chunk_words` whitespace tokens;
//! chunk ids encode (document ordinal, chunk ordinal). Scoring constants are
//! fixed so index builds and searches are reproducible: k1 = 1.2, b = 0.75,
//! idf = ln((N - df + 0.5) / (df + 0.5) + 1).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normalize::overlap_tokens;

use super::{RetrievalBackend, RetrievalHit};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub doc_ordinal: usize,
    pub chunk_ordinal: usize,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalIndex {
    chunk_words: usize,
    chunks: Vec<ChunkRecord>,
    /// term -> [(chunk index, term frequency)], chunk indices ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    avg_chunk_len: f64,
}

impl LocalIndex {
    /// Build from a corpus file: one document per line, either plain text or
    /// a JSON object with a `text` field. Blank lines are skipped.
    pub fn build(corpus_path: &Path, chunk_words: usize) -> Result<Self> {
        let file = fs::File::open(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
        let reader = BufReader::new(file);
        let mut docs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(corpus_path, e))?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let text = if trimmed.starts_with('{') {
                let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| {
                    Error::Format(format!(
                        "corpus line {} is neither plain text nor JSON: {e}",
                        lineno + 1
                    ))
                })?;
                value
                    .get("text")
                    .and_then(|t| t.as_str())
                    .ok_or_else(|| {
                        Error::Format(format!(
                            "corpus line {} JSON object lacks a string 'text' field",
                            lineno + 1
                        ))
                    })?
                    .to_string()
            } else {
                trimmed.to_string()
            };
            docs.push(text);
        }
        Self::from_documents(docs, chunk_words)
    }

    pub fn from_documents(docs: Vec<String>, chunk_words: usize) -> Result<Self> {
        if chunk_words == 0 {
            return Err(Error::Validation("chunk_words must be >= 1".into()));
        }
        let mut chunks = Vec::new();
        for (doc_ordinal, doc) in docs.iter().enumerate() {
            let words: Vec<&str> = doc.split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            for (chunk_ordinal, piece) in words.chunks(chunk_words).enumerate() {
                chunks.push(ChunkRecord {
                    chunk_id: format!("d{doc_ordinal}.c{chunk_ordinal}"),
                    doc_ordinal,
                    chunk_ordinal,
                    text: piece.join(" "),
                    token_count: piece.len(),
                });
            }
        }
        if chunks.is_empty() {
            return Err(Error::Validation(
                "corpus contains no documents; refusing to build an empty index".into(),
            ));
        }

        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut total_len = 0usize;
        for (idx, chunk) in chunks.iter().enumerate() {
            total_len += chunk.token_count;
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for tok in overlap_tokens(&chunk.text) {
                *tf.entry(tok).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((idx as u32, count));
            }
        }
        let avg_chunk_len = total_len as f64 / chunks.len() as f64;
        Ok(LocalIndex {
            chunk_words,
            chunks,
            postings,
            avg_chunk_len,
        })
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_words(&self) -> usize {
        self.chunk_words
    }

    pub fn chunks(&self) -> &[ChunkRecord] {
        &self.chunks
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let body = serde_json::to_string(self).expect("index serializes");
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body)
            .map_err(|e| Error::Format(format!("corrupt index file {}: {e}", path.display())))
    }

    /// Top-k chunks by BM25 score. Ties break toward the earlier chunk so
    /// results are stable across runs.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit>> {
        if k == 0 {
            return Err(Error::Validation("retrieval k must be >= 1".into()));
        }
        let terms = overlap_tokens(query);
        let n = self.chunks.len() as f64;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term.as_str()) else {
                continue;
            };
            let df = postings.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(chunk_idx, tf) in postings {
                let dl = self.chunks[chunk_idx as usize].token_count as f64;
                let tf = tf as f64;
                let norm =
                    (tf * (BM25_K1 + 1.0)) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_chunk_len));
                *scores.entry(chunk_idx).or_insert(0.0) += idf * norm;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked
            .into_iter()
            .enumerate()
            .map(|(i, (chunk_idx, score))| {
                let chunk = &self.chunks[chunk_idx as usize];
                RetrievalHit {
                    chunk_id: chunk.chunk_id.clone(),
                    text: chunk.text.clone(),
                    score,
                    rank: i + 1,
                }
            })
            .collect())
    }
}

impl RetrievalBackend for LocalIndex {
    fn id(&self) -> &str {
        "local-bm25"
    }

    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit>> {
        self.search(query, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_chunk_index() -> LocalIndex {
        LocalIndex::from_documents(
            vec![
                "the migration of arctic terns spans two hemispheres".into(),
                "volcanic basalt columns form hexagonal patterns near the coast".into(),
                "fermentation of barley produces traditional malt beverages".into(),
            ],
            100,
        )
        .unwrap()
    }

    #[test]
    fn query_words_of_chunk_two_rank_it_first() {
        let index = three_chunk_index();
        let hits = index
            .search("hexagonal basalt columns near the coast", 3)
            .unwrap();
        assert_eq!(hits[0].chunk_id, "d1.c0");
        assert_eq!(hits[0].rank, 1);
    }

    #[test]
    fn chunk_sizes_100_100_50() {
        let words: Vec<String> = (0..250).map(|i| format!("w{i}")).collect();
        let index = LocalIndex::from_documents(vec![words.join(" ")], 100).unwrap();
        let sizes: Vec<usize> = index.chunks().iter().map(|c| c.token_count).collect();
        assert_eq!(sizes, vec![100, 100, 50]);
        assert_eq!(index.chunks()[2].chunk_id, "d0.c2");
    }

    #[test]
    fn k_zero_is_precondition_violation() {
        let index = three_chunk_index();
        assert!(matches!(index.search("x", 0), Err(Error::Validation(_))));
    }

    #[test]
    fn k_larger_than_corpus_returns_all() {
        let index = three_chunk_index();
        let hits = index.search("the of", 50).unwrap();
        assert!(hits.len() <= 3);
        for (i, h) in hits.iter().enumerate() {
            assert_eq!(h.rank, i + 1);
            if i > 0 {
                assert!(hits[i - 1].score >= h.score);
            }
        }
    }

    #[test]
    fn empty_corpus_is_error_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("empty.txt");
        std::fs::write(&corpus, "\n\n").unwrap();
        assert!(LocalIndex::build(&corpus, 100).is_err());
    }

    #[test]
    fn rebuild_is_byte_identical() {
        use sha2::{Digest, Sha256};
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        std::fs::write(&corpus, "alpha beta gamma\ndelta epsilon zeta\n").unwrap();
        let mut digests = Vec::new();
        for name in ["a.json", "b.json"] {
            let index = LocalIndex::build(&corpus, 2).unwrap();
            let path = dir.path().join(name);
            index.save(&path).unwrap();
            digests.push(hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
        }
        assert_eq!(digests[0], digests[1]);
        let loaded = LocalIndex::load(&dir.path().join("a.json")).unwrap();
        assert_eq!(loaded.chunk_count(), 4);
    }

    #[test]
    fn identical_queries_identical_hits() {
        let index = three_chunk_index();
        let a = index.search("arctic migration", 3).unwrap();
        let b = index.search("arctic migration", 3).unwrap();
        assert_eq!(a, b);
    }
}
