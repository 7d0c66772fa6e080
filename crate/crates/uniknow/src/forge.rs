//! Construction of the non-original context variants: conflicting contexts
//! with the answer span rewritten, randomly sampled irrelevant contexts, and
//! incorrectly retrieved contexts that look plausible but lack the answer.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::{CompletionClient, CompletionRequest, RetrievalBackend};
use crate::error::{Error, Result};
use crate::eval::normalize::{contains_normalized, normalize_answer, normalized_tokens};
use crate::ingest::{alias_token_spans, ContextWindow, QAExample};
use crate::templates::{render_prompt, PromptSlots, TemplateId};

pub const DEFAULT_CONFLICT_RETRIES: u32 = 3;
pub const DEFAULT_RETRIEVAL_K: usize = 20;
/// Jaccard threshold above which a donor context counts as topically related
/// to the question and is rejected.
pub const DONOR_OVERLAP_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Original,
    Conflicting,
    RandomIrrelevant,
    RetrievedIrrelevant,
}

impl ContextKind {
    pub fn is_relevant(&self) -> bool {
        matches!(self, ContextKind::Original | ContextKind::Conflicting)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ContextKind::Original => "original",
            ContextKind::Conflicting => "conflicting",
            ContextKind::RandomIrrelevant => "random_irrelevant",
            ContextKind::RetrievedIrrelevant => "retrieved_irrelevant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original" => Ok(ContextKind::Original),
            "conflicting" | "conflict" => Ok(ContextKind::Conflicting),
            "random_irrelevant" | "random" => Ok(ContextKind::RandomIrrelevant),
            "retrieved_irrelevant" | "retrieved" => Ok(ContextKind::RetrievedIrrelevant),
            other => Err(Error::Validation(format!("unknown context kind {other:?}"))),
        }
    }
}

/// One context variant for one question, with its context-grounded gold
/// answer when the kind is relevant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgedContext {
    pub qid: String,
    pub kind: ContextKind,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_answer: Option<String>,
    /// Source note: donor qid, retrieval rank, generation attempt.
    pub provenance: String,
}

/// Wrap a selected original window as a ForgedContext. The context answer is
/// the alias that anchored the window.
pub fn original_context(example: &QAExample, window: &ContextWindow) -> ForgedContext {
    ForgedContext {
        qid: example.qid.clone(),
        kind: ContextKind::Original,
        text: window.text.clone(),
        context_answer: Some(window.span_alias.clone()),
        provenance: format!("window start_token={}", window.start_token),
    }
}

// ---------------------------------------------------------------------------
// Conflicting contexts
// ---------------------------------------------------------------------------

fn mutual_substring(a: &str, b: &str) -> bool {
    let a = normalize_answer(a);
    let b = normalize_answer(b);
    !a.is_empty() && !b.is_empty() && (a.contains(b.as_str()) || b.contains(a.as_str()))
}

/// A candidate replacement answer is valid when it is non-empty, not
/// EM-equal to any alias, and shares no mutual substring with any alias
/// (synonym spellings and contained aliases are rejected).
pub fn candidate_is_valid(candidate: &str, aliases: &[String]) -> bool {
    let norm = normalize_answer(candidate);
    if norm.is_empty() {
        return false;
    }
    !aliases.iter().any(|alias| mutual_substring(candidate, alias))
}

/// Replace every alias occurrence in `text` with `replacement`, preserving
/// punctuation attached to span edges. Token spans are matched with the same
/// normalized finder used for windowing.
pub fn replace_alias_occurrences(text: &str, aliases: &[String], replacement: &str) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for alias in aliases {
        spans.extend(alias_token_spans(&tokens, alias));
    }
    // prefer longer spans so multi-word aliases win over contained aliases
    spans.sort_by_key(|(s, e)| (*s, std::cmp::Reverse(*e)));
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut cursor = 0usize;
    for (s, e) in spans {
        if s >= cursor {
            chosen.push((s, e));
            cursor = e;
        }
    }

    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut idx = 0usize;
    let mut span_iter = chosen.into_iter().peekable();
    while idx < tokens.len() {
        match span_iter.peek() {
            Some(&(s, e)) if s == idx => {
                let prefix: String = tokens[s]
                    .chars()
                    .take_while(|c| !c.is_alphanumeric())
                    .collect();
                let suffix: String = tokens[e - 1]
                    .chars()
                    .rev()
                    .take_while(|c| !c.is_alphanumeric())
                    .collect::<String>()
                    .chars()
                    .rev()
                    .collect();
                out.push(format!("{prefix}{replacement}{suffix}"));
                idx = e;
                span_iter.next();
            }
            _ => {
                out.push(tokens[idx].to_string());
                idx += 1;
            }
        }
    }
    out.join(" ")
}

/// Request a same-type alternative entity and rewrite the original window so
/// it supports the alternative instead of the dataset answer.
///
/// One completion request is issued with `n_samples = max_retries`; the
/// returned candidates are walked in order until one validates and the
/// rewritten text passes the answer-absence check.
pub fn forge_conflicting(
    example: &QAExample,
    original: &ContextWindow,
    client: &CompletionClient,
    max_retries: u32,
    seed: u64,
) -> Result<ForgedContext> {
    if !example
        .answer_aliases
        .iter()
        .any(|a| contains_normalized(&original.text, a))
    {
        return Err(Error::Validation(format!(
            "{}: original window contains no alias occurrence",
            example.qid
        )));
    }
    let prompt = render_prompt(
        TemplateId::ConflictGen,
        &PromptSlots {
            keyword: Some(example.primary_alias()),
            context: Some(&original.text),
            unknown_token: crate::templates::DEFAULT_UNKNOWN_TOKEN,
            ..Default::default()
        },
    )?;
    let retries = max_retries.max(1);
    let request = CompletionRequest {
        prompt,
        n_samples: retries,
        temperature: if retries == 1 { 0.0 } else { 0.7 },
        max_new_tokens: 16,
        stop_sequences: vec!["\n".into()],
        seed: Some(seed),
    };
    let candidates = client.complete(&request)?;

    for (attempt, raw) in candidates.iter().enumerate() {
        let candidate = raw.trim();
        if !candidate_is_valid(candidate, &example.answer_aliases) {
            continue;
        }
        let rewritten = replace_alias_occurrences(&original.text, &example.answer_aliases, candidate);
        let any_alias_left = example
            .answer_aliases
            .iter()
            .any(|a| contains_normalized(&rewritten, a));
        if any_alias_left || !contains_normalized(&rewritten, candidate) {
            continue;
        }
        return Ok(ForgedContext {
            qid: example.qid.clone(),
            kind: ContextKind::Conflicting,
            text: rewritten,
            context_answer: Some(candidate.to_string()),
            provenance: format!("conflict_gen attempt={attempt}"),
        });
    }
    Err(Error::Validation(format!(
        "{}: no valid conflicting candidate in {} attempt(s)",
        example.qid, retries
    )))
}

// ---------------------------------------------------------------------------
// Random irrelevant contexts
// ---------------------------------------------------------------------------

/// An original context offered as a donor for random-irrelevant sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DonorContext {
    pub qid: String,
    pub text: String,
}

const STOPWORDS: &[&str] = &[
    "of", "in", "on", "at", "to", "for", "and", "or", "is", "are", "was", "were", "be", "been",
    "by", "with", "from", "as", "that", "this", "these", "those", "it", "its", "what", "who",
    "whom", "whose", "when", "where", "which", "why", "how", "did", "does", "do", "not", "no",
    "but", "if", "then", "than", "so", "such", "there", "their", "they", "he", "she", "his",
    "her", "you", "your", "we", "our", "i", "me", "my",
];

fn content_words(text: &str) -> BTreeSet<String> {
    normalized_tokens(text)
        .into_iter()
        .filter(|tok| !STOPWORDS.contains(&tok.as_str()))
        .collect()
}

/// Jaccard overlap between the question's content words and the donor's.
pub fn question_overlap(question: &str, donor_text: &str) -> f64 {
    let q = content_words(question);
    let d = content_words(donor_text);
    if q.is_empty() || d.is_empty() {
        return 0.0;
    }
    let intersection = q.intersection(&d).count();
    let union = q.union(&d).count();
    intersection as f64 / union as f64
}

fn seed_for(seed: u64, tag: &str, qid: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(qid.as_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

/// Seeded uniform draw from the donor pool, excluding the example's own
/// context, donors containing any alias, and donors topically overlapping the
/// question. Redraws walk a seeded permutation, so exhaustion is detected
/// after each donor has been considered once.
pub fn sample_random_irrelevant(
    example: &QAExample,
    donor_pool: &[DonorContext],
    seed: u64,
) -> Result<ForgedContext> {
    if donor_pool.len() < 2 {
        return Err(Error::Validation(format!(
            "{}: donor pool needs at least 2 entries, got {}",
            example.qid,
            donor_pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..donor_pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, "random_irrelevant", &example.qid));
    order.shuffle(&mut rng);

    for idx in order {
        let donor = &donor_pool[idx];
        if donor.qid == example.qid {
            continue;
        }
        if example
            .answer_aliases
            .iter()
            .any(|a| contains_normalized(&donor.text, a))
        {
            continue;
        }
        if question_overlap(&example.question, &donor.text) > DONOR_OVERLAP_LIMIT {
            continue;
        }
        return Ok(ForgedContext {
            qid: example.qid.clone(),
            kind: ContextKind::RandomIrrelevant,
            text: donor.text.clone(),
            context_answer: None,
            provenance: format!("donor qid={}", donor.qid),
        });
    }
    Err(Error::Validation(format!(
        "{}: donor pool exhausted without a valid irrelevant context",
        example.qid
    )))
}

// ---------------------------------------------------------------------------
// Retrieved irrelevant contexts
// ---------------------------------------------------------------------------

/// Query with the question text and keep the highest-ranked hit that does not
/// contain any answer alias. With `escalate` the search deepens to 2k once
/// before declaring exhaustion.
pub fn pick_retrieved_irrelevant(
    example: &QAExample,
    retriever: &dyn RetrievalBackend,
    k: usize,
    escalate: bool,
) -> Result<ForgedContext> {
    if k == 0 {
        return Err(Error::Validation("retrieval k must be >= 1".into()));
    }
    let depths: Vec<usize> = if escalate { vec![k, k * 2] } else { vec![k] };
    for depth in depths {
        let hits = retriever.retrieve(&example.question, depth)?;
        for hit in hits {
            let contains_answer = example
                .answer_aliases
                .iter()
                .any(|a| contains_normalized(&hit.text, a));
            if !contains_answer {
                return Ok(ForgedContext {
                    qid: example.qid.clone(),
                    kind: ContextKind::RetrievedIrrelevant,
                    text: hit.text,
                    context_answer: None,
                    provenance: format!("retrieved rank={} chunk={}", hit.rank, hit.chunk_id),
                });
            }
        }
    }
    Err(Error::Validation(format!(
        "{}: every retrieved hit contains the answer",
        example.qid
    )))
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

/// Machine check over a forged-context set: irrelevant contexts must not
/// contain any alias; conflicting contexts must contain their replacement and
/// no alias. Returns human-readable violations (empty means clean).
pub fn audit_answer_absence<'a, I>(
    contexts: I,
    aliases_by_qid: &std::collections::BTreeMap<String, Vec<String>>,
) -> Vec<String>
where
    I: IntoIterator<Item = &'a ForgedContext>,
{
    let mut violations = Vec::new();
    for ctx in contexts {
        let Some(aliases) = aliases_by_qid.get(&ctx.qid) else {
            violations.push(format!("{}: no aliases known for qid", ctx.qid));
            continue;
        };
        match ctx.kind {
            ContextKind::RandomIrrelevant | ContextKind::RetrievedIrrelevant => {
                for alias in aliases {
                    if contains_normalized(&ctx.text, alias) {
                        violations.push(format!(
                            "{}: {} context contains alias {alias:?}",
                            ctx.qid,
                            ctx.kind.as_str()
                        ));
                    }
                }
            }
            ContextKind::Conflicting => {
                match &ctx.context_answer {
                    Some(ans) if contains_normalized(&ctx.text, ans) => {}
                    _ => violations.push(format!(
                        "{}: conflicting context lacks its replacement answer",
                        ctx.qid
                    )),
                }
                for alias in aliases {
                    if contains_normalized(&ctx.text, alias) {
                        violations.push(format!(
                            "{}: conflicting context still contains alias {alias:?}",
                            ctx.qid
                        ));
                    }
                }
            }
            ContextKind::Original => {
                match &ctx.context_answer {
                    Some(ans) if contains_normalized(&ctx.text, ans) => {}
                    _ => violations.push(format!(
                        "{}: original context lacks its context answer",
                        ctx.qid
                    )),
                }
            }
        }
    }
    violations
}
