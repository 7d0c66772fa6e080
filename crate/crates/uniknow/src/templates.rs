//! Prompt templates, shipped as data files and instantiated byte-exactly.
//!
//! Every rendered prompt comes from one of five stored templates; run headers
//! record the sha256 of each template so outputs are auditable.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_UNKNOWN_TOKEN: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ClosedBook,
    OpenBookNaive,
    OpenBookAbstain,
    ClosedBookAbstain,
    ConflictGen,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::ClosedBook,
        TemplateId::OpenBookNaive,
        TemplateId::OpenBookAbstain,
        TemplateId::ClosedBookAbstain,
        TemplateId::ConflictGen,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateId::ClosedBook => "closed_book",
            TemplateId::OpenBookNaive => "open_book_naive",
            TemplateId::OpenBookAbstain => "open_book_abstain",
            TemplateId::ClosedBookAbstain => "closed_book_abstain",
            TemplateId::ConflictGen => "conflict_gen",
        }
    }

    pub fn source(&self) -> &'static str {
        match self {
            TemplateId::ClosedBook => include_str!("../templates/closed_book.txt"),
            TemplateId::OpenBookNaive => include_str!("../templates/open_book_naive.txt"),
            TemplateId::OpenBookAbstain => include_str!("../templates/open_book_abstain.txt"),
            TemplateId::ClosedBookAbstain => include_str!("../templates/closed_book_abstain.txt"),
            TemplateId::ConflictGen => include_str!("../templates/conflict_gen.txt"),
        }
    }

    /// sha256 of the template file bytes, hex-encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.source().as_bytes()))
    }

    pub fn needs_context(&self) -> bool {
        matches!(
            self,
            TemplateId::OpenBookNaive | TemplateId::OpenBookAbstain | TemplateId::ConflictGen
        )
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Map of template id to content hash for run headers.
pub fn template_hashes() -> &'static BTreeMap<String, String> {
    static HASHES: OnceLock<BTreeMap<String, String>> = OnceLock::new();
    HASHES.get_or_init(|| {
        TemplateId::ALL
            .iter()
            .map(|t| (t.as_str().to_string(), t.content_hash()))
            .collect()
    })
}

/// One few-shot demonstration. `context` is rendered only by open-book
/// templates and only when present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

/// Fixed demonstration pool, keyed by dataset id, shipped as a data file.
pub const DEMONSTRATIONS_RAW: &str = include_str!("../data/demonstrations.json");

pub fn demonstration_pool() -> &'static BTreeMap<String, Vec<Demonstration>> {
    static POOL: OnceLock<BTreeMap<String, Vec<Demonstration>>> = OnceLock::new();
    POOL.get_or_init(|| {
        serde_json::from_str(DEMONSTRATIONS_RAW).expect("bundled demonstration pool is valid JSON")
    })
}

/// The first `count` demonstrations for a dataset, falling back to the
/// `custom` pool for unknown ids.
pub fn demonstrations_for(dataset_id: &str, count: usize) -> Vec<Demonstration> {
    let pool = demonstration_pool();
    let demos = pool
        .get(dataset_id)
        .or_else(|| pool.get("custom"))
        .map(Vec::as_slice)
        .unwrap_or(&[]);
    demos.iter().take(count).cloned().collect()
}

/// Slot values for prompt rendering.
#[derive(Debug, Clone, Default)]
pub struct PromptSlots<'a> {
    pub question: Option<&'a str>,
    pub context: Option<&'a str>,
    /// Original answer for the conflicting-answer generation template.
    pub keyword: Option<&'a str>,
    pub fewshots: &'a [Demonstration],
    pub unknown_token: &'a str,
}

impl<'a> PromptSlots<'a> {
    pub fn question(question: &'a str) -> Self {
        PromptSlots {
            question: Some(question),
            unknown_token: DEFAULT_UNKNOWN_TOKEN,
            ..Default::default()
        }
    }

    pub fn with_context(mut self, context: &'a str) -> Self {
        self.context = Some(context);
        self
    }

    pub fn with_fewshots(mut self, fewshots: &'a [Demonstration]) -> Self {
        self.fewshots = fewshots;
        self
    }
}

fn render_fewshots(template_id: TemplateId, demos: &[Demonstration]) -> String {
    demos
        .iter()
        .map(|d| match (&d.context, template_id.needs_context()) {
            (Some(ctx), true) => format!(
                "Context: {}\nQuestion: {}\nAnswer: {}",
                ctx, d.question, d.answer
            ),
            _ => format!("Question: {}\nAnswer: {}", d.question, d.answer),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Instantiate a stored template. Missing slot values are typed errors; the
/// few-shot line vanishes entirely when no demonstrations are supplied.
pub fn render_prompt(template_id: TemplateId, slots: &PromptSlots) -> Result<String> {
    let mut text = template_id.source().to_string();

    if text.contains("<few-shots>") {
        if slots.fewshots.is_empty() {
            text = text.replace("<few-shots>\n", "");
        } else {
            text = text.replace("<few-shots>", &render_fewshots(template_id, slots.fewshots));
        }
    }

    let missing = |slot: &str| {
        Error::Validation(format!(
            "template {template_id} requires slot <{slot}> but no value was provided"
        ))
    };
    if text.contains("<question>") {
        let q = slots.question.ok_or_else(|| missing("question"))?;
        text = text.replace("<question>", q);
    }
    if text.contains("<context>") {
        let c = slots.context.ok_or_else(|| missing("context"))?;
        text = text.replace("<context>", c);
    }
    if text.contains("<original-answer>") {
        let k = slots.keyword.ok_or_else(|| missing("original-answer"))?;
        text = text.replace("<original-answer>", k);
    }
    if text.contains("<UNKNOWN>") {
        let u = if slots.unknown_token.is_empty() {
            DEFAULT_UNKNOWN_TOKEN
        } else {
            slots.unknown_token
        };
        text = text.replace("<UNKNOWN>", u);
    }
    Ok(text)
}
