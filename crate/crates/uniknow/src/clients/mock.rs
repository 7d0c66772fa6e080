//! Deterministic mock completion backend for desk-scale testing.
//!
//! Parametric knowledge is a seeded key-value store (normalized question ->
//! answer) with a configurable wrong-answer rate for closed-book sampling and
//! a configurable context-following policy for open-book prompts. Every
//! response is a pure function of (request, seed, configuration).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::normalize::{contains_normalized, normalize_answer};

use super::{CompletionBackend, CompletionRequest};

/// Entity-flavored vocabulary for generated conflicting answers. Hash-indexed
/// so candidates are deterministic per keyword.
const CANDIDATE_WORDS: [&str; 24] = [
    "Zephyrine", "Kestrelgate", "Morvania", "Quillondale", "Tarrowick", "Velmont",
    "Ostrovia", "Brindlemere", "Caldrith", "Fennwick", "Galdova", "Harrowfell",
    "Ilmarion", "Jorvald", "Lorvenna", "Maskelyne", "Nortrand", "Pellagrin",
    "Rostavel", "Sandrovar", "Thornquist", "Umberleigh", "Wrenfield", "Yarrowby",
];

/// Fixed non-abstaining fallback answer for the never-abstain policy.
const NEVER_ABSTAIN_GUESS: &str = "flibbertigibbet";

fn stable_hash(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic conflicting-answer candidate for a keyword; `attempt` walks
/// the vocabulary so retries see fresh candidates.
pub fn conflict_candidate(keyword: &str, attempt: usize) -> String {
    let base = stable_hash(&["conflict", &normalize_answer(keyword)]) as usize;
    CANDIDATE_WORDS[(base + attempt) % CANDIDATE_WORDS.len()].to_string()
}

/// What the mock knows parametrically: normalized question -> answer.
#[derive(Debug, Clone, Default)]
pub struct MockKnowledge {
    map: BTreeMap<String, String>,
}

impl MockKnowledge {
    pub fn from_pairs<I, Q, A>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (Q, A)>,
        Q: AsRef<str>,
        A: Into<String>,
    {
        MockKnowledge {
            map: pairs
                .into_iter()
                .map(|(q, a)| (normalize_answer(q.as_ref()), a.into()))
                .collect(),
        }
    }

    /// Load a JSON object file mapping question -> answer.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&body)
            .map_err(|e| Error::Format(format!("mock knowledge file {}: {e}", path.display())))?;
        Ok(Self::from_pairs(map))
    }

    pub fn lookup(&self, question: &str) -> Option<&str> {
        self.map.get(&normalize_answer(question)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Open-book behavior of the mock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MockPolicy {
    /// Answer from the context when it matches something the mock can verify,
    /// fall back to parametric knowledge, abstain when nothing is known.
    #[default]
    FollowContext,
    /// Always answer parametrically when the question is known, ignoring the
    /// context; abstain otherwise.
    Stubborn,
    /// Like FollowContext but never abstains: unknown questions get a fixed
    /// wrong guess.
    NeverAbstain,
}

impl MockPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "follow" | "follow_context" => Ok(MockPolicy::FollowContext),
            "stubborn" => Ok(MockPolicy::Stubborn),
            "never_abstain" | "never-abstain" => Ok(MockPolicy::NeverAbstain),
            other => Err(Error::Validation(format!("unknown mock policy {other:?}"))),
        }
    }
}

pub struct MockLm {
    id: String,
    knowledge: MockKnowledge,
    /// Probability that a closed-book sample of a known question is wrong.
    wrong_rate: f64,
    policy: MockPolicy,
    seed: u64,
    calls: AtomicU64,
}

impl MockLm {
    pub fn new(id: impl Into<String>, knowledge: MockKnowledge, wrong_rate: f64, seed: u64) -> Self {
        MockLm {
            id: id.into(),
            knowledge,
            wrong_rate: wrong_rate.clamp(0.0, 1.0),
            policy: MockPolicy::FollowContext,
            seed,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_policy(mut self, policy: MockPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn knowledge(&self) -> &MockKnowledge {
        &self.knowledge
    }

    fn wrong_answer(&self, question: &str, sample: usize) -> String {
        let h = stable_hash(&[
            "wrong",
            &self.seed.to_string(),
            &normalize_answer(question),
            &sample.to_string(),
        ]);
        // hex-only payload: cannot collide with any abstention phrase
        format!("wrong {:08x}", (h & 0xffff_ffff) as u32)
    }

    fn closed_book(&self, question: &str, req: &CompletionRequest) -> Vec<String> {
        let known = self.knowledge.lookup(question);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
            "closed",
            &self.seed.to_string(),
            &req.seed.map(|s| s.to_string()).unwrap_or_default(),
            &req.prompt,
        ]));
        (0..req.n_samples as usize)
            .map(|i| match known {
                Some(answer) if req.temperature == 0.0 || rng.gen::<f64>() >= self.wrong_rate => {
                    answer.to_string()
                }
                _ => self.wrong_answer(question, i),
            })
            .collect()
    }

    fn open_book(&self, question: &str, context: &str) -> String {
        let known = self.knowledge.lookup(question);
        match self.policy {
            MockPolicy::Stubborn => match known {
                Some(answer) => answer.to_string(),
                None => "unknown".to_string(),
            },
            MockPolicy::FollowContext | MockPolicy::NeverAbstain => {
                if let Some(answer) = known {
                    if contains_normalized(context, answer) {
                        return answer.to_string();
                    }
                    // conflicting contexts carry a generated alternative
                    for attempt in 0..CANDIDATE_WORDS.len() {
                        let candidate = conflict_candidate(answer, attempt);
                        if contains_normalized(context, &candidate) {
                            return candidate;
                        }
                    }
                    return answer.to_string();
                }
                if self.policy == MockPolicy::NeverAbstain {
                    NEVER_ABSTAIN_GUESS.to_string()
                } else {
                    "unknown".to_string()
                }
            }
        }
    }

    fn last_field<'a>(prompt: &'a str, marker: &str) -> Option<&'a str> {
        let start = prompt.rfind(marker)? + marker.len();
        let rest = &prompt[start..];
        let end = rest.find('\n').unwrap_or(rest.len());
        Some(rest[..end].trim())
    }
}

impl CompletionBackend for MockLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<Vec<String>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let prompt = req.prompt.as_str();

        if let Some(keyword) = Self::last_field(prompt, "\nKeyword: ") {
            // conflicting-answer generation prompt
            return Ok((0..req.n_samples as usize)
                .map(|i| conflict_candidate(keyword, i))
                .collect());
        }

        let question = Self::last_field(prompt, "\nQuestion: ").ok_or_else(|| {
            Error::Protocol("mock backend could not find a question in the prompt".into())
        })?;

        match Self::last_field(prompt, "\nContext: ") {
            Some(context) => {
                let answer = self.open_book(question, context);
                Ok(vec![answer; req.n_samples as usize])
            }
            None => Ok(self.closed_book(question, req)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::detect_abstention;

    fn mock(wrong_rate: f64) -> MockLm {
        MockLm::new(
            "mock",
            MockKnowledge::from_pairs([("What is the capital of France?", "Paris")]),
            wrong_rate,
            7,
        )
    }

    fn req(prompt: &str, n: u32) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            n_samples: n,
            temperature: if n > 1 { 0.7 } else { 0.0 },
            max_new_tokens: 16,
            stop_sequences: vec![],
            seed: Some(7),
        }
    }

    #[test]
    fn known_question_answers_deterministically() {
        let m = mock(0.0);
        let r = req(
            "Answer the following questions:\nQuestion: What is the capital of France?\nAnswer:",
            3,
        );
        assert_eq!(m.complete_raw(&r).unwrap(), vec!["Paris", "Paris", "Paris"]);
    }

    #[test]
    fn seeded_wrong_rate_is_reproducible() {
        let r = req("Answer the following questions:\nQuestion: What is the capital of France?\nAnswer:", 10);
        let a = mock(0.3).complete_raw(&r).unwrap();
        let b = mock(0.3).complete_raw(&r).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|t| t == "Paris"));
    }

    #[test]
    fn unknown_question_is_always_wrong_and_never_abstains() {
        let m = mock(0.0);
        let r = req("Answer the following questions:\nQuestion: who invented the zorklestick?\nAnswer:", 10);
        for text in m.complete_raw(&r).unwrap() {
            assert_ne!(text, "Paris");
            assert!(!detect_abstention(&text), "wrong answer {text:?} reads as abstention");
        }
    }

    #[test]
    fn conflict_prompt_walks_candidates() {
        let m = mock(0.0);
        let r = req(
            "Answer an entity of the same type as the given keyword.\nKeyword: Paris\nContext: The capital is Paris.\nAnswer:",
            3,
        );
        let texts = m.complete_raw(&r).unwrap();
        assert_eq!(texts.len(), 3);
        assert_eq!(texts[0], conflict_candidate("Paris", 0));
        assert_ne!(texts[0], texts[1]);
    }

    #[test]
    fn follow_context_reads_conflicting_answer() {
        let m = mock(0.0);
        let candidate = conflict_candidate("Paris", 0);
        let prompt = format!(
            "Answer the following questions:\nContext: The capital of France is {candidate}.\nQuestion: What is the capital of France?\nAnswer:"
        );
        assert_eq!(m.complete_raw(&req(&prompt, 1)).unwrap(), vec![candidate]);
    }

    #[test]
    fn stubborn_ignores_context() {
        let m = mock(0.0).with_policy(MockPolicy::Stubborn);
        let prompt = "Answer the following questions:\nContext: The capital of France is Lyonne.\nQuestion: What is the capital of France?\nAnswer:";
        assert_eq!(m.complete_raw(&req(prompt, 1)).unwrap(), vec!["Paris"]);
    }

    #[test]
    fn never_abstain_guesses_on_unknown() {
        let m = mock(0.0).with_policy(MockPolicy::NeverAbstain);
        let prompt = "Answer the following questions:\nContext: Something unrelated.\nQuestion: who invented the zorklestick?\nAnswer:";
        let texts = m.complete_raw(&req(prompt, 1)).unwrap();
        assert!(!detect_abstention(&texts[0]));
    }

    #[test]
    fn candidate_vocabulary_avoids_abstention_phrases() {
        for word in CANDIDATE_WORDS {
            assert!(!detect_abstention(word));
        }
        assert!(!detect_abstention(NEVER_ABSTAIN_GUESS));
    }
}
