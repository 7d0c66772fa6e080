//! Parametric-knowledge estimation: closed-book sampling plus a thresholded
//! correct-response rate decides, per question and per model, whether
//! relevant parametric knowledge exists.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::clients::{CompletionClient, CompletionRequest};
use crate::error::{Error, Result};
use crate::eval::normalize::em_match;
use crate::ingest::QAExample;
use crate::templates::{render_prompt, Demonstration, PromptSlots, TemplateId};

pub const DEFAULT_N: u32 = 10;
pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PkLabel {
    /// Relevant parametric knowledge exists (correct rate >= tau).
    Exists,
    /// No response was correct.
    Absent,
    /// Strictly between zero and tau; excluded from scenario construction.
    Undefined,
}

impl PkLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PkLabel::Exists => "exists",
            PkLabel::Absent => "absent",
            PkLabel::Undefined => "undefined",
        }
    }
}

/// Verdict for one (model, question) pair together with the sampled evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PkEstimate {
    pub qid: String,
    pub model_id: String,
    /// The n raw closed-book answers.
    pub samples: Vec<String>,
    pub correct_rate: f64,
    pub label: PkLabel,
    /// Present iff label is Exists; then equals the dataset's primary alias.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parametric_answer: Option<String>,
}

impl PkEstimate {
    /// Recompute the label from the stored samples; estimates are
    /// self-auditing.
    pub fn recompute_label(&self, aliases: &[String], tau: f64) -> (f64, PkLabel) {
        let correct = self
            .samples
            .iter()
            .filter(|s| em_match(s, aliases.iter().map(String::as_str)).is_some())
            .count();
        let rate = correct as f64 / self.samples.len() as f64;
        (rate, label_for_rate(rate, tau))
    }
}

/// Thresholding rule: Exists iff rate >= tau, Absent iff rate == 0, otherwise
/// Undefined.
pub fn label_for_rate(correct_rate: f64, tau: f64) -> PkLabel {
    if correct_rate >= tau {
        PkLabel::Exists
    } else if correct_rate == 0.0 {
        PkLabel::Absent
    } else {
        PkLabel::Undefined
    }
}

#[derive(Debug, Clone)]
pub struct ProbeParams {
    pub model_id: String,
    pub n: u32,
    pub tau: f64,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub seed: u64,
    pub fewshots: Vec<Demonstration>,
    pub parallelism: usize,
}

impl ProbeParams {
    pub fn new(model_id: impl Into<String>) -> Self {
        ProbeParams {
            model_id: model_id.into(),
            n: DEFAULT_N,
            tau: DEFAULT_TAU,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: 32,
            seed: 0,
            fewshots: Vec::new(),
            parallelism: crate::clients::DEFAULT_PARALLELISM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Validation("probe n must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Validation("tau must satisfy 0 < tau <= 1".into()));
        }
        Ok(())
    }
}

/// Probe one example: a single closed-book completion request with
/// `n_samples = n`, scored by exact match against all aliases.
pub fn estimate_pk(
    example: &QAExample,
    client: &CompletionClient,
    params: &ProbeParams,
) -> Result<PkEstimate> {
    params.validate()?;
    let prompt = render_prompt(
        TemplateId::ClosedBook,
        &PromptSlots::question(&example.question).with_fewshots(&params.fewshots),
    )?;
    let request = CompletionRequest {
        prompt,
        n_samples: params.n,
        temperature: if params.n == 1 { 0.0 } else { params.temperature },
        max_new_tokens: params.max_new_tokens,
        stop_sequences: vec!["\n".into()],
        seed: Some(params.seed),
    };
    let samples = client.complete(&request)?;
    let correct = samples
        .iter()
        .filter(|s| em_match(s, example.answer_aliases.iter().map(String::as_str)).is_some())
        .count();
    let correct_rate = correct as f64 / samples.len() as f64;
    let label = label_for_rate(correct_rate, params.tau);
    Ok(PkEstimate {
        qid: example.qid.clone(),
        model_id: params.model_id.clone(),
        samples,
        correct_rate,
        label,
        parametric_answer: match label {
            PkLabel::Exists => Some(example.primary_alias().to_string()),
            _ => None,
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub exists: usize,
    pub absent: usize,
    pub undefined: usize,
    /// Probes whose completion failed; excluded from scenario building.
    pub unavailable: usize,
}

/// Probe a whole example list, fanning out under `params.parallelism` while
/// preserving input order. Per-example completion failures become
/// `unavailable` counts, never batch aborts.
pub fn probe_dataset(
    examples: &[QAExample],
    client: &CompletionClient,
    params: &ProbeParams,
) -> Result<(Vec<PkEstimate>, ProbeSummary)> {
    if examples.is_empty() {
        return Err(Error::Validation("probe_dataset requires a non-empty example list".into()));
    }
    params.validate()?;

    let slots: Mutex<Vec<Option<PkEstimate>>> = Mutex::new(vec![None; examples.len()]);
    let next = AtomicUsize::new(0);
    let workers = params.parallelism.clamp(1, examples.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= examples.len() {
                    break;
                }
                let estimate = estimate_pk(&examples[idx], client, params).ok();
                slots.lock().unwrap()[idx] = estimate;
            });
        }
    });

    let mut summary = ProbeSummary::default();
    let mut estimates = Vec::with_capacity(examples.len());
    for slot in slots.into_inner().unwrap() {
        match slot {
            Some(est) => {
                match est.label {
                    PkLabel::Exists => summary.exists += 1,
                    PkLabel::Absent => summary.absent += 1,
                    PkLabel::Undefined => summary.undefined += 1,
                }
                estimates.push(est);
            }
            None => summary.unavailable += 1,
        }
    }
    Ok((estimates, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{MockKnowledge, MockLm, ResponseCache};
    use crate::ingest::{DatasetId, Split};
    use proptest::prelude::*;

    fn example(i: usize, answer: &str) -> QAExample {
        QAExample {
            qid: format!("q{i}"),
            question: format!("what is the codeword of slot {i}"),
            answer_aliases: vec![answer.to_string()],
            raw_context: format!("the codeword of slot {i} is {answer}"),
            dataset_id: DatasetId::Custom,
            split: Split::Test,
        }
    }

    fn client(mock: MockLm, dir: &std::path::Path) -> CompletionClient {
        CompletionClient::new(Box::new(mock), ResponseCache::new(dir), 4)
    }

    #[test]
    fn thresholding_is_exhaustive_over_counts() {
        // n = 10, tau = 0.7: counts 7..=10 -> Exists, 0 -> Absent, 1..=6 -> Undefined
        for correct in 0..=10usize {
            let rate = correct as f64 / 10.0;
            let expected = match correct {
                0 => PkLabel::Absent,
                1..=6 => PkLabel::Undefined,
                _ => PkLabel::Exists,
            };
            assert_eq!(label_for_rate(rate, 0.7), expected, "count {correct}");
        }
    }

    #[test]
    fn known_questions_probe_exists() {
        let dir = tempfile::tempdir().unwrap();
        let examples: Vec<QAExample> = (0..6).map(|i| example(i, &format!("code{i}"))).collect();
        let knowledge = MockKnowledge::from_pairs(
            examples[..3]
                .iter()
                .map(|e| (e.question.clone(), e.answer_aliases[0].clone())),
        );
        let mock = MockLm::new("mock", knowledge, 0.0, 7);
        let client = client(mock, dir.path());
        let params = ProbeParams::new("mock");
        let (estimates, summary) = probe_dataset(&examples, &client, &params).unwrap();
        assert_eq!(estimates.len(), 6);
        assert_eq!(summary, ProbeSummary { exists: 3, absent: 3, undefined: 0, unavailable: 0 });
        // input order preserved
        for (i, est) in estimates.iter().enumerate() {
            assert_eq!(est.qid, format!("q{i}"));
        }
        // parametric answer only when Exists, and then the primary alias
        for est in &estimates {
            match est.label {
                PkLabel::Exists => assert!(est.parametric_answer.is_some()),
                _ => assert!(est.parametric_answer.is_none()),
            }
        }
    }

    #[test]
    fn rerun_with_warm_cache_issues_no_new_calls() {
        let dir = tempfile::tempdir().unwrap();
        let examples: Vec<QAExample> = (0..4).map(|i| example(i, &format!("code{i}"))).collect();
        let make_client = || {
            let knowledge = MockKnowledge::from_pairs(
                examples.iter().map(|e| (e.question.clone(), e.answer_aliases[0].clone())),
            );
            client(MockLm::new("mock", knowledge, 0.3, 7), dir.path())
        };
        let params = ProbeParams::new("mock");

        let c1 = make_client();
        let (first, _) = probe_dataset(&examples, &c1, &params).unwrap();
        assert_eq!(c1.backend_calls(), 4);

        let c2 = make_client();
        let (second, _) = probe_dataset(&examples, &c2, &params).unwrap();
        assert_eq!(c2.backend_calls(), 0, "warm cache should serve every probe");
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.samples, b.samples);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn empty_example_list_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let client = client(MockLm::new("mock", MockKnowledge::default(), 0.0, 7), dir.path());
        assert!(probe_dataset(&[], &client, &ProbeParams::new("mock")).is_err());
    }

    #[test]
    fn estimates_are_self_auditing() {
        let dir = tempfile::tempdir().unwrap();
        let ex = example(0, "code0");
        let knowledge = MockKnowledge::from_pairs([(ex.question.clone(), "code0".to_string())]);
        let client = client(MockLm::new("mock", knowledge, 0.4, 11), dir.path());
        let est = estimate_pk(&ex, &client, &ProbeParams::new("mock")).unwrap();
        let (rate, label) = est.recompute_label(&ex.answer_aliases, 0.7);
        assert_eq!(rate, est.correct_rate);
        assert_eq!(label, est.label);
    }

    proptest! {
        #[test]
        fn exists_at_tau_implies_exists_at_lower_tau(
            correct in 0usize..=10,
            tau_hi in 0.05f64..=1.0,
            delta in 0.0f64..0.9,
        ) {
            let tau_lo = (tau_hi - delta).max(0.01);
            let rate = correct as f64 / 10.0;
            if label_for_rate(rate, tau_hi) == PkLabel::Exists {
                prop_assert_eq!(label_for_rate(rate, tau_lo), PkLabel::Exists);
            }
        }

        #[test]
        fn correct_rate_is_permutation_invariant(perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let aliases = vec!["right".to_string()];
            let mut samples = vec![
                "right".to_string(), "wrong1".to_string(), "right".to_string(),
                "wrong2".to_string(), "right".to_string(),
            ];
            let est = PkEstimate {
                qid: "q".into(), model_id: "m".into(), samples: samples.clone(),
                correct_rate: 0.0, label: PkLabel::Undefined, parametric_answer: None,
            };
            let (rate_before, _) = est.recompute_label(&aliases, 0.7);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            samples.shuffle(&mut rng);
            let est2 = PkEstimate { samples, ..est };
            let (rate_after, _) = est2.recompute_label(&aliases, 0.7);
            prop_assert_eq!(rate_before, rate_after);
        }
    }
}
