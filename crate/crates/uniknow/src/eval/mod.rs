//! Prediction scoring: exact match, abstention detection, per-scenario EM,
//! the Acc/Truth/Ans/Rely reliability metrics, and the four-way error
//! taxonomy.

pub mod normalize;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{Expected, Scenario, ScenarioItem};

pub use normalize::{
    contains_normalized, em_match, normalize_answer, token_overlap_f1, NORMALIZATION_VERSION,
};

/// Predefined abstention phrases, shipped verbatim as a data file.
pub const ABSTAIN_PHRASES_RAW: &str = include_str!("../../data/abstain_phrases.txt");

fn abstain_phrases() -> &'static Vec<String> {
    static PHRASES: OnceLock<Vec<String>> = OnceLock::new();
    PHRASES.get_or_init(|| {
        ABSTAIN_PHRASES_RAW
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(normalize_answer)
            .collect()
    })
}

/// True iff the normalized text contains any phrase from the abstention list.
pub fn detect_abstention(text: &str) -> bool {
    let norm = normalize_answer(text);
    abstain_phrases().iter().any(|p| norm.contains(p.as_str()))
}

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------

/// Error taxonomy for incorrect responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Wrong answer grounded in the provided context.
    Contextual,
    /// The model reproduced its parametric answer instead of the context's.
    Parametric,
    /// Abstained although at least one knowledge source was relevant.
    FalseAbstention,
    /// Residual class.
    Other,
}

impl ErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::Contextual => "contextual",
            ErrorKind::Parametric => "parametric",
            ErrorKind::FalseAbstention => "false_abstention",
            ErrorKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Outcome {
    Correct,
    Incorrect { error_kind: ErrorKind },
    Abstained,
}

/// Judgement of a single prediction against its scenario item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub qid: String,
    pub scenario: Option<Scenario>,
    #[serde(flatten)]
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_alias: Option<String>,
}

impl Verdict {
    /// Scenario-expected correctness: a plain correct answer, or an abstention
    /// in the Unknown scenario.
    pub fn correct_for_scenario(&self) -> bool {
        match self.outcome {
            Outcome::Correct => true,
            Outcome::Abstained => self.scenario == Some(Scenario::U),
            Outcome::Incorrect { .. } => false,
        }
    }

    /// Error category, if any: incorrect answers carry their classified kind,
    /// and abstaining outside the Unknown scenario is a false abstention.
    pub fn error_kind(&self) -> Option<ErrorKind> {
        match self.outcome {
            Outcome::Incorrect { error_kind } => Some(error_kind),
            Outcome::Abstained if self.scenario.is_some() && self.scenario != Some(Scenario::U) => {
                Some(ErrorKind::FalseAbstention)
            }
            _ => None,
        }
    }
}

/// Classify an incorrect, non-abstaining prediction.
pub fn classify_error(item: &ScenarioItem, prediction: &str) -> ErrorKind {
    if item.scenario == Some(Scenario::C) {
        if let Some(a_pk) = &item.a_pk {
            if em_match(prediction, [a_pk.as_str()]).is_some() {
                return ErrorKind::Parametric;
            }
        }
    }
    if contains_normalized(&item.context_text, prediction) {
        return ErrorKind::Contextual;
    }
    ErrorKind::Other
}

/// Judge one prediction against its scenario item.
///
/// Abstentions are judged first; otherwise the prediction is exact-matched
/// against the item's expected gold aliases.
pub fn judge(item: &ScenarioItem, qid: &str, prediction: &str) -> Result<Verdict> {
    if item.qid != qid {
        return Err(Error::Validation(format!(
            "prediction qid {qid:?} does not match item qid {:?}",
            item.qid
        )));
    }
    let outcome = if detect_abstention(prediction) {
        Outcome::Abstained
    } else {
        match &item.expected {
            Expected::Abstain => Outcome::Incorrect {
                error_kind: classify_error(item, prediction),
            },
            Expected::Answer { aliases, .. } => {
                match em_match(prediction, aliases.iter().map(String::as_str)) {
                    Some(alias) => {
                        return Ok(Verdict {
                            qid: item.qid.clone(),
                            scenario: item.scenario,
                            outcome: Outcome::Correct,
                            matched_alias: Some(alias.to_string()),
                        })
                    }
                    None => Outcome::Incorrect {
                        error_kind: classify_error(item, prediction),
                    },
                }
            }
        }
    };
    Ok(Verdict {
        qid: item.qid.clone(),
        scenario: item.scenario,
        outcome,
        matched_alias: None,
    })
}

// ---------------------------------------------------------------------------
// Reliability
// ---------------------------------------------------------------------------

/// How verdicts map onto the N_c / N_i / N_a counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accounting {
    /// Scenario-expected behavior counts as correct: an abstention in the
    /// Unknown scenario lands in N_c. Used for scenario-mode reports.
    ScenarioExpected,
    /// Raw observation: every abstention lands in N_a regardless of scenario.
    /// Used for full-sample reports.
    Observed,
}

/// Counts plus the derived Acc / Truth / Ans / Rely metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub n: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub n_abstained: usize,
    pub acc: f64,
    pub truth: f64,
    pub ans: f64,
    pub rely: f64,
}

/// Derive the reliability metrics from raw counts.
///
/// acc = N_c/N, truth = (N_c+N_a)/N, ans = (N_c+N_i)/N and
/// rely = ans*truth + (1-ans)*acc.
pub fn reliability_from_counts(
    n_correct: usize,
    n_incorrect: usize,
    n_abstained: usize,
) -> Result<ReliabilityReport> {
    let n = n_correct + n_incorrect + n_abstained;
    if n == 0 {
        return Err(Error::Validation(
            "reliability requires at least one verdict".into(),
        ));
    }
    let nf = n as f64;
    let acc = n_correct as f64 / nf;
    let truth = (n_correct + n_abstained) as f64 / nf;
    let ans = (n_correct + n_incorrect) as f64 / nf;
    let rely = ans * truth + (1.0 - ans) * acc;
    Ok(ReliabilityReport {
        n,
        n_correct,
        n_incorrect,
        n_abstained,
        acc,
        truth,
        ans,
        rely,
    })
}

/// Count a verdict slice under the chosen accounting and derive the metrics.
pub fn compute_reliability(verdicts: &[Verdict], accounting: Accounting) -> Result<ReliabilityReport> {
    let mut c = 0usize;
    let mut i = 0usize;
    let mut a = 0usize;
    for v in verdicts {
        match (&v.outcome, accounting) {
            (Outcome::Correct, _) => c += 1,
            (Outcome::Incorrect { .. }, _) => i += 1,
            (Outcome::Abstained, Accounting::Observed) => a += 1,
            (Outcome::Abstained, Accounting::ScenarioExpected) => {
                if v.scenario == Some(Scenario::U) {
                    c += 1;
                } else {
                    a += 1;
                }
            }
        }
    }
    reliability_from_counts(c, i, a)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Scored summary of one (model, method, dataset) prediction file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEntry {
    pub model: String,
    pub method: String,
    pub dataset: String,
    pub mode: String,
    /// Per-scenario EM over scenario-assigned items.
    pub scenario_em: BTreeMap<Scenario, ScenarioScore>,
    /// Unweighted mean of the per-scenario EMs.
    pub all_em_unweighted: f64,
    /// Item-weighted mean across scenarios.
    pub all_em_weighted: f64,
    pub reliability: ReliabilityReport,
    /// Error counts per scenario.
    pub error_dist: BTreeMap<Scenario, BTreeMap<ErrorKind, usize>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub em: f64,
    pub n: usize,
    pub n_correct: usize,
}

/// Score a verdict set into an [`EvalEntry`].
///
/// `accounting` selects the reliability counting mode; scenario EM is always
/// computed over scenario-assigned verdicts with scenario-expected semantics.
pub fn summarize_verdicts(
    model: &str,
    method: &str,
    dataset: &str,
    mode: &str,
    verdicts: &[Verdict],
    accounting: Accounting,
) -> Result<EvalEntry> {
    if verdicts.is_empty() {
        return Err(Error::Validation("no verdicts to summarize".into()));
    }
    let mut scenario_em: BTreeMap<Scenario, ScenarioScore> = BTreeMap::new();
    let mut error_dist: BTreeMap<Scenario, BTreeMap<ErrorKind, usize>> = BTreeMap::new();
    for v in verdicts {
        if let Some(sc) = v.scenario {
            let entry = scenario_em.entry(sc).or_insert(ScenarioScore {
                em: 0.0,
                n: 0,
                n_correct: 0,
            });
            entry.n += 1;
            if v.correct_for_scenario() {
                entry.n_correct += 1;
            }
            if let Some(kind) = v.error_kind() {
                *error_dist.entry(sc).or_default().entry(kind).or_insert(0) += 1;
            }
        }
    }
    let mut weighted_correct = 0usize;
    let mut weighted_n = 0usize;
    for score in scenario_em.values_mut() {
        score.em = score.n_correct as f64 / score.n as f64;
        weighted_correct += score.n_correct;
        weighted_n += score.n;
    }
    let all_em_unweighted = if scenario_em.is_empty() {
        0.0
    } else {
        scenario_em.values().map(|s| s.em).sum::<f64>() / scenario_em.len() as f64
    };
    let all_em_weighted = if weighted_n == 0 {
        0.0
    } else {
        weighted_correct as f64 / weighted_n as f64
    };
    Ok(EvalEntry {
        model: model.to_string(),
        method: method.to_string(),
        dataset: dataset.to_string(),
        mode: mode.to_string(),
        scenario_em,
        all_em_unweighted,
        all_em_weighted,
        reliability: compute_reliability(verdicts, accounting)?,
        error_dist,
    })
}

/// Merged report tables over entries keyed by dataset x scenario x method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTables {
    pub entries: Vec<EvalEntry>,
}

/// Merge evaluation entries, rejecting duplicate (model, method, dataset,
/// mode) keys.
pub fn aggregate(entries: Vec<EvalEntry>) -> Result<ReportTables> {
    if entries.is_empty() {
        return Err(Error::Validation("no evaluation entries to aggregate".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut offenders = Vec::new();
    for e in &entries {
        let key = (
            e.model.clone(),
            e.method.clone(),
            e.dataset.clone(),
            e.mode.clone(),
        );
        if !seen.insert(key) {
            offenders.push(format!("{}/{}/{}/{}", e.model, e.method, e.dataset, e.mode));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Validation(format!(
            "duplicate evaluation keys: {}",
            offenders.join(", ")
        )));
    }
    let mut entries = entries;
    entries.sort_by(|a, b| {
        (&a.model, &a.method, &a.dataset, &a.mode).cmp(&(&b.model, &b.method, &b.dataset, &b.mode))
    });
    Ok(ReportTables { entries })
}

impl ReportTables {
    /// Long-format rows: (model, method, dataset, scenario, metric, value).
    pub fn scenario_em_rows(&self) -> Vec<(String, String, String, String, String, f64)> {
        let mut rows = Vec::new();
        for e in &self.entries {
            for (sc, score) in &e.scenario_em {
                rows.push((
                    e.model.clone(),
                    e.method.clone(),
                    e.dataset.clone(),
                    sc.as_str().to_string(),
                    "em".to_string(),
                    score.em,
                ));
            }
            rows.push((
                e.model.clone(),
                e.method.clone(),
                e.dataset.clone(),
                "All".to_string(),
                "em".to_string(),
                e.all_em_unweighted,
            ));
            rows.push((
                e.model.clone(),
                e.method.clone(),
                e.dataset.clone(),
                "All".to_string(),
                "em_weighted".to_string(),
                e.all_em_weighted,
            ));
        }
        rows
    }

    pub fn reliability_rows(&self) -> Vec<(String, String, String, String, f64)> {
        let mut rows = Vec::new();
        for e in &self.entries {
            let r = &e.reliability;
            for (metric, value) in [
                ("acc", r.acc),
                ("truth", r.truth),
                ("ans", r.ans),
                ("rely", r.rely),
            ] {
                rows.push((
                    e.model.clone(),
                    e.method.clone(),
                    e.dataset.clone(),
                    metric.to_string(),
                    value,
                ));
            }
        }
        rows
    }

    pub fn error_rows(&self) -> Vec<(String, String, String, String, String, usize)> {
        let mut rows = Vec::new();
        for e in &self.entries {
            for (sc, kinds) in &e.error_dist {
                for (kind, count) in kinds {
                    rows.push((
                        e.model.clone(),
                        e.method.clone(),
                        e.dataset.clone(),
                        sc.as_str().to_string(),
                        kind.as_str().to_string(),
                        *count,
                    ));
                }
            }
        }
        rows
    }

    /// Plain-text table of per-scenario EM, one line per entry.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:<16} {:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "model", "method", "dataset", "C", "E-Only", "P-Only", "U", "All", "Rely"
        ));
        for e in &self.entries {
            let em = |sc: Scenario| {
                e.scenario_em
                    .get(&sc)
                    .map(|s| format!("{:.4}", s.em))
                    .unwrap_or_else(|| "-".into())
            };
            out.push_str(&format!(
                "{:<16} {:<16} {:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
                e.model,
                e.method,
                e.dataset,
                em(Scenario::C),
                em(Scenario::EOnly),
                em(Scenario::POnly),
                em(Scenario::U),
                format!("{:.4}", e.all_em_unweighted),
                format!("{:.4}", e.reliability.rely),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::ContextKind;

    fn item(scenario: Scenario, expected: Expected) -> ScenarioItem {
        ScenarioItem {
            qid: "q1".into(),
            scenario: Some(scenario),
            kind: match scenario {
                Scenario::C => ContextKind::Conflicting,
                Scenario::EOnly => ContextKind::Original,
                _ => ContextKind::RandomIrrelevant,
            },
            context_text: "the capital of france is lyon".into(),
            question: "what is the capital of france".into(),
            expected,
            a_pk: Some("Paris".into()),
            a_ek: Some("Lyon".into()),
            original_aliases: vec!["Paris".into()],
        }
    }

    fn answer(gold: &str) -> Expected {
        Expected::Answer {
            gold: gold.into(),
            aliases: vec![gold.into()],
        }
    }

    #[test]
    fn abstention_phrases_hit() {
        assert!(detect_abstention("unknown"));
        assert!(detect_abstention("It is impossible to answer this."));
        assert!(!detect_abstention("Paris"));
    }

    #[test]
    fn judge_u_abstention_is_scenario_correct() {
        let it = item(Scenario::U, Expected::Abstain);
        let v = judge(&it, "q1", "unknown").unwrap();
        assert_eq!(v.outcome, Outcome::Abstained);
        assert!(v.correct_for_scenario());
        assert_eq!(v.error_kind(), None);
    }

    #[test]
    fn judge_conflict_parametric_error() {
        let it = item(Scenario::C, answer("Lyon"));
        let v = judge(&it, "q1", "Paris").unwrap();
        assert_eq!(
            v.outcome,
            Outcome::Incorrect {
                error_kind: ErrorKind::Parametric
            }
        );
    }

    #[test]
    fn judge_false_abstention_in_ponly() {
        let it = item(Scenario::POnly, answer("Paris"));
        let v = judge(&it, "q1", "unknown").unwrap();
        assert_eq!(v.outcome, Outcome::Abstained);
        assert!(!v.correct_for_scenario());
        assert_eq!(v.error_kind(), Some(ErrorKind::FalseAbstention));
    }

    #[test]
    fn judge_qid_mismatch_is_error() {
        let it = item(Scenario::C, answer("Lyon"));
        assert!(matches!(judge(&it, "q2", "Lyon"), Err(Error::Validation(_))));
    }

    #[test]
    fn classify_contextual_from_span() {
        let it = item(Scenario::U, Expected::Abstain);
        // span copied out of the (irrelevant) context
        assert_eq!(classify_error(&it, "capital of france"), ErrorKind::Contextual);
        assert_eq!(classify_error(&it, "zanzibar"), ErrorKind::Other);
    }

    #[test]
    fn rely_matches_reported_rows() {
        // counts chosen so acc and truth land exactly on the reported values
        let r = reliability_from_counts(6915, 1238, 1847).unwrap();
        assert!((r.acc - 0.6915).abs() < 1e-12);
        assert!((r.truth - 0.8762).abs() < 1e-12);
        assert!((r.rely - 0.8421).abs() < 5e-5);

        let r = reliability_from_counts(5396, 1839, 2765).unwrap();
        assert!((r.acc - 0.5396).abs() < 1e-12);
        assert!((r.truth - 0.8161).abs() < 1e-12);
        assert!((r.rely - 0.7396).abs() < 5e-5);
    }

    #[test]
    fn rely_perfect_and_all_abstained() {
        let r = reliability_from_counts(5, 0, 0).unwrap();
        assert_eq!((r.acc, r.truth, r.ans, r.rely), (1.0, 1.0, 1.0, 1.0));
        let r = reliability_from_counts(0, 0, 5).unwrap();
        assert_eq!((r.acc, r.truth, r.ans, r.rely), (0.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_verdicts_rejected() {
        assert!(compute_reliability(&[], Accounting::Observed).is_err());
    }

    #[test]
    fn all_average_is_unweighted_scenario_mean() {
        let mut verdicts = Vec::new();
        // C: 4 items, 0.8 -> 4 correct of 5; build exact fractions per scenario
        let spec = [
            (Scenario::C, 8, 10),
            (Scenario::EOnly, 6, 10),
            (Scenario::POnly, 4, 10),
            (Scenario::U, 2, 10),
        ];
        for (sc, correct, n) in spec {
            for i in 0..n {
                verdicts.push(Verdict {
                    qid: format!("q{i}"),
                    scenario: Some(sc),
                    outcome: if i < correct {
                        Outcome::Correct
                    } else {
                        Outcome::Incorrect {
                            error_kind: ErrorKind::Other,
                        }
                    },
                    matched_alias: None,
                });
            }
        }
        let entry =
            summarize_verdicts("m", "naive", "nq", "scenario", &verdicts, Accounting::ScenarioExpected)
                .unwrap();
        assert!((entry.all_em_unweighted - 0.5).abs() < 1e-12);
        assert!((entry.all_em_weighted - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_duplicate_keys() {
        let verdicts = vec![Verdict {
            qid: "q".into(),
            scenario: Some(Scenario::C),
            outcome: Outcome::Correct,
            matched_alias: None,
        }];
        let e = summarize_verdicts("m", "x", "d", "scenario", &verdicts, Accounting::Observed)
            .unwrap();
        let err = aggregate(vec![e.clone(), e]).unwrap_err();
        assert!(err.to_string().contains("m/x/d/scenario"));
    }
}
