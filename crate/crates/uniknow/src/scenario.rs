//! Scenario assembly and training-set emission.
//!
//! Questions labeled by the PK probe are combined with forged contexts into
//! the four knowledge scenarios, and the same inputs drive the three
//! training-data recipes (scenario-aware, KAFT-style, RetRobust-style).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::normalize::normalize_answer;
use crate::forge::{ContextKind, ForgedContext};
use crate::ingest::QAExample;
use crate::pk::{PkEstimate, PkLabel};
use crate::templates::{render_prompt, PromptSlots, TemplateId, DEFAULT_UNKNOWN_TOKEN};

/// Fallback guess used by the never-abstain responder; deliberately silly and
/// free of abstention phrasing.
pub const NEVER_ABSTAIN_GUESS: &str = "flibbertigibbet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    C,
    #[serde(rename = "E-Only")]
    EOnly,
    #[serde(rename = "P-Only")]
    POnly,
    U,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::C, Scenario::EOnly, Scenario::POnly, Scenario::U];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::C => "C",
            Scenario::EOnly => "E-Only",
            Scenario::POnly => "P-Only",
            Scenario::U => "U",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Expected behavior for a scenario item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    Answer { gold: String, aliases: Vec<String> },
    Abstain,
}

/// A (question, context, expected behavior) triple. `scenario` is `None` for
/// undefined-PK items, which are scorable only in full-sample mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioItem {
    pub qid: String,
    pub scenario: Option<Scenario>,
    pub kind: ContextKind,
    pub context_text: String,
    pub question: String,
    pub expected: Expected,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_pk: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_ek: Option<String>,
    /// The dataset's aliases, kept for full-sample golds and error analysis.
    pub original_aliases: Vec<String>,
}

impl ScenarioItem {
    /// Gold for full-sample scoring: the context answer under a relevant
    /// context, the original aliases under an irrelevant one.
    pub fn full_mode_expected(&self) -> Expected {
        if self.kind.is_relevant() {
            match &self.a_ek {
                Some(ans) => Expected::Answer {
                    gold: ans.clone(),
                    aliases: vec![ans.clone()],
                },
                None => Expected::Answer {
                    gold: self.original_aliases[0].clone(),
                    aliases: self.original_aliases.clone(),
                },
            }
        } else {
            Expected::Answer {
                gold: self.original_aliases[0].clone(),
                aliases: self.original_aliases.clone(),
            }
        }
    }
}

/// Scenario of a (PK label, context kind) pair, per the assignment table.
/// `None` for the combinations that never form scenario items.
pub fn assign_scenario(label: PkLabel, kind: ContextKind) -> Option<Scenario> {
    match (label, kind) {
        (PkLabel::Exists, ContextKind::Conflicting) => Some(Scenario::C),
        (PkLabel::Exists, ContextKind::RandomIrrelevant)
        | (PkLabel::Exists, ContextKind::RetrievedIrrelevant) => Some(Scenario::POnly),
        (PkLabel::Absent, ContextKind::Original) | (PkLabel::Absent, ContextKind::Conflicting) => {
            Some(Scenario::EOnly)
        }
        (PkLabel::Absent, ContextKind::RandomIrrelevant)
        | (PkLabel::Absent, ContextKind::RetrievedIrrelevant) => Some(Scenario::U),
        _ => None,
    }
}

/// Training quarter of a (label, kind) pair. Unlike [`assign_scenario`] this
/// also places (Exists, Original) pairs, which train alongside the conflict
/// quarter while staying out of the C analysis.
pub fn training_quarter(label: PkLabel, kind: ContextKind) -> Option<Scenario> {
    match (label, kind) {
        (PkLabel::Exists, ContextKind::Original) => Some(Scenario::C),
        _ => assign_scenario(label, kind),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BuildOutcome {
    pub items: Vec<ScenarioItem>,
    pub counts: BTreeMap<Scenario, usize>,
    /// Rows left out of scenarios, keyed by reason.
    pub excluded: BTreeMap<String, usize>,
}

/// Assemble scenario items from PK estimates and forged contexts.
///
/// Every context's qid must carry an estimate. Exists questions paired with
/// original contexts are retained only for training; undefined-PK questions
/// are emitted with no scenario when `include_undefined` is set.
pub fn build_scenarios(
    estimates: &[PkEstimate],
    contexts: &[ForgedContext],
    examples: &[QAExample],
    include_undefined: bool,
) -> Result<BuildOutcome> {
    let mut by_qid: BTreeMap<&str, &PkEstimate> = BTreeMap::new();
    for est in estimates {
        if by_qid.insert(&est.qid, est).is_some() {
            return Err(Error::Validation(format!("duplicate estimate for qid {}", est.qid)));
        }
    }
    let examples_by_qid: BTreeMap<&str, &QAExample> =
        examples.iter().map(|e| (e.qid.as_str(), e)).collect();

    let mut outcome = BuildOutcome::default();
    let mut seen: BTreeSet<(String, ContextKind)> = BTreeSet::new();

    for ctx in contexts {
        let est = by_qid.get(ctx.qid.as_str()).ok_or_else(|| {
            Error::Validation(format!("context qid {} has no PK estimate", ctx.qid))
        })?;
        let example = examples_by_qid.get(ctx.qid.as_str()).ok_or_else(|| {
            Error::Validation(format!("context qid {} has no loaded example", ctx.qid))
        })?;
        if !seen.insert((ctx.qid.clone(), ctx.kind)) {
            return Err(Error::Validation(format!(
                "duplicate (qid, context kind) pair: {} / {}",
                ctx.qid,
                ctx.kind.as_str()
            )));
        }

        let exclude = |outcome: &mut BuildOutcome, reason: &str| {
            *outcome.excluded.entry(reason.to_string()).or_insert(0) += 1;
        };

        match est.label {
            PkLabel::Undefined => {
                if include_undefined {
                    let item = ScenarioItem {
                        qid: ctx.qid.clone(),
                        scenario: None,
                        kind: ctx.kind,
                        context_text: ctx.text.clone(),
                        question: example.question.clone(),
                        expected: Expected::Answer {
                            gold: String::new(),
                            aliases: Vec::new(),
                        },
                        a_pk: None,
                        a_ek: ctx.context_answer.clone(),
                        original_aliases: example.answer_aliases.clone(),
                    };
                    let expected = item.full_mode_expected();
                    outcome.items.push(ScenarioItem { expected, ..item });
                } else {
                    exclude(&mut outcome, "undefined_excluded");
                }
            }
            label => match assign_scenario(label, ctx.kind) {
                None => exclude(&mut outcome, "exists_original_training_only"),
                Some(scenario) => {
                    let a_pk = est.parametric_answer.clone();
                    let a_ek = ctx.context_answer.clone();
                    if scenario == Scenario::C {
                        let (Some(pk), Some(ek)) = (&a_pk, &a_ek) else {
                            exclude(&mut outcome, "conflict_missing_answers");
                            continue;
                        };
                        if normalize_answer(pk) == normalize_answer(ek) {
                            exclude(&mut outcome, "conflict_equals_parametric");
                            continue;
                        }
                    }
                    let expected = match scenario {
                        Scenario::U => Expected::Abstain,
                        Scenario::POnly => Expected::Answer {
                            gold: example.primary_alias().to_string(),
                            aliases: example.answer_aliases.clone(),
                        },
                        // C and E-Only are graded against the context answer
                        _ => {
                            let Some(ek) = &a_ek else {
                                exclude(&mut outcome, "relevant_context_missing_answer");
                                continue;
                            };
                            Expected::Answer {
                                gold: ek.clone(),
                                aliases: vec![ek.clone()],
                            }
                        }
                    };
                    *outcome.counts.entry(scenario).or_insert(0) += 1;
                    outcome.items.push(ScenarioItem {
                        qid: ctx.qid.clone(),
                        scenario: Some(scenario),
                        kind: ctx.kind,
                        context_text: ctx.text.clone(),
                        question: example.question.clone(),
                        expected,
                        a_pk,
                        a_ek,
                        original_aliases: example.answer_aliases.clone(),
                    });
                }
            },
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Training emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    UniKnow,
    Kaft,
    RetRobust,
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniknow" => Ok(Recipe::UniKnow),
            "kaft" => Ok(Recipe::Kaft),
            "retrobust" => Ok(Recipe::RetRobust),
            other => Err(Error::Validation(format!("unknown recipe {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Recipe::UniKnow => "uniknow",
            Recipe::Kaft => "kaft",
            Recipe::RetRobust => "retrobust",
        }
    }
}

/// One training row before prompt rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainExample {
    pub qid: String,
    pub question: String,
    pub context: String,
    pub kind: ContextKind,
    pub template_id: TemplateId,
    pub target: String,
    pub recipe: Recipe,
    pub scenario: Scenario,
}

impl TrainExample {
    pub fn rendered_prompt(&self) -> Result<String> {
        render_prompt(
            self.template_id,
            &PromptSlots::question(&self.question).with_context(&self.context),
        )
    }

    /// File row: {prompt, target, recipe, scenario, qid}.
    pub fn to_row(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "prompt": self.rendered_prompt()?,
            "target": self.target,
            "recipe": self.recipe.as_str(),
            "scenario": self.scenario.as_str(),
            "qid": self.qid,
        }))
    }
}

#[derive(Debug, Clone)]
pub struct TrainParams {
    /// Questions sampled per dataset per PK label.
    pub per_label_count: usize,
    /// Share of rows carrying the abstention target; the other three
    /// quarters are resized equally to keep the total fixed.
    pub abstain_fraction: f64,
    /// Context kinds to exclude: conflicting rows fall back to the original
    /// context, retrieved-irrelevant rows fall back to random-irrelevant.
    pub exclusions: BTreeSet<ContextKind>,
    pub seed: u64,
    pub template_id: TemplateId,
    pub unknown_token: String,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            per_label_count: 250,
            abstain_fraction: 0.25,
            exclusions: BTreeSet::new(),
            seed: 0,
            template_id: TemplateId::OpenBookNaive,
            unknown_token: DEFAULT_UNKNOWN_TOKEN.to_string(),
        }
    }
}

impl TrainParams {
    fn validate(&self) -> Result<()> {
        if self.per_label_count == 0 {
            return Err(Error::Validation("per_label_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.abstain_fraction) {
            return Err(Error::Validation("abstain_fraction must lie in [0, 1]".into()));
        }
        for kind in &self.exclusions {
            if matches!(kind, ContextKind::Original | ContextKind::RandomIrrelevant) {
                return Err(Error::Validation(format!(
                    "cannot exclude {} contexts: they are the substitution targets",
                    kind.as_str()
                )));
            }
        }
        Ok(())
    }
}

struct TrainPool<'a> {
    examples: BTreeMap<&'a str, &'a QAExample>,
    labels: BTreeMap<&'a str, PkLabel>,
    contexts: BTreeMap<(&'a str, ContextKind), &'a ForgedContext>,
}

impl<'a> TrainPool<'a> {
    fn new(
        estimates: &'a [PkEstimate],
        contexts: &'a [ForgedContext],
        examples: &'a [QAExample],
    ) -> Self {
        TrainPool {
            examples: examples.iter().map(|e| (e.qid.as_str(), e)).collect(),
            labels: estimates
                .iter()
                .filter(|e| e.label != PkLabel::Undefined)
                .map(|e| (e.qid.as_str(), e.label))
                .collect(),
            contexts: contexts.iter().map(|c| ((c.qid.as_str(), c.kind), c)).collect(),
        }
    }

    fn has_kinds(&self, qid: &str, kinds: &[ContextKind]) -> bool {
        kinds.iter().all(|k| self.contexts.contains_key(&(qid, *k)))
    }

    /// Eligible qids grouped by (dataset, label), sorted for determinism.
    fn grouped(&self, required: &[ContextKind]) -> BTreeMap<(String, PkLabel), Vec<&'a str>> {
        let mut groups: BTreeMap<(String, PkLabel), Vec<&'a str>> = BTreeMap::new();
        for (qid, label) in &self.labels {
            let Some(example) = self.examples.get(qid) else { continue };
            if !self.has_kinds(qid, required) {
                continue;
            }
            groups
                .entry((example.dataset_id.as_str().to_string(), *label))
                .or_default()
                .push(qid);
        }
        groups
    }

    fn context(&self, qid: &str, kind: ContextKind) -> &'a ForgedContext {
        self.contexts[&(qid, kind)]
    }

    fn example(&self, qid: &str) -> &'a QAExample {
        self.examples[qid]
    }
}

fn subseed(seed: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

fn sample_qids<'a>(
    pool: &[&'a str],
    count: usize,
    seed: u64,
    tag: &str,
) -> Vec<&'a str> {
    let mut order: Vec<&str> = pool.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &["sample", tag]));
    order.shuffle(&mut rng);
    order.truncate(count);
    order
}

fn target_for(
    recipe: Recipe,
    label: PkLabel,
    kind: ContextKind,
    example: &QAExample,
    context: &ForgedContext,
    unknown_token: &str,
) -> String {
    let original = example.primary_alias().to_string();
    let context_answer = || {
        context
            .context_answer
            .clone()
            .unwrap_or_else(|| original.clone())
    };
    match recipe {
        Recipe::RetRobust => original,
        Recipe::UniKnow | Recipe::Kaft => match (label, kind) {
            (PkLabel::Exists, ContextKind::Original) => original,
            (_, ContextKind::Conflicting) | (PkLabel::Absent, ContextKind::Original) => {
                context_answer()
            }
            (PkLabel::Exists, _) => original,
            (PkLabel::Absent, _) => match recipe {
                Recipe::Kaft => original,
                _ => unknown_token.to_string(),
            },
            (PkLabel::Undefined, _) => original,
        },
    }
}

const QUARTER_KINDS: [(Scenario, PkLabel, [ContextKind; 2]); 4] = [
    (Scenario::C, PkLabel::Exists, [ContextKind::Original, ContextKind::Conflicting]),
    (Scenario::EOnly, PkLabel::Absent, [ContextKind::Original, ContextKind::Conflicting]),
    (
        Scenario::POnly,
        PkLabel::Exists,
        [ContextKind::RandomIrrelevant, ContextKind::RetrievedIrrelevant],
    ),
    (
        Scenario::U,
        PkLabel::Absent,
        [ContextKind::RandomIrrelevant, ContextKind::RetrievedIrrelevant],
    ),
];

/// Emit a training set in one of the three recipes.
///
/// The scenario-aware and KAFT recipes sample `per_label_count` questions per
/// dataset per label and pair each with its four context kinds; the abstain
/// fraction then resizes the Unknown quarter with the other three adjusted
/// equally at fixed total. The RetRobust recipe drops conflicting contexts
/// and instead pairs an equal number of additionally sampled questions with
/// their original contexts (the abstain fraction does not apply; no row
/// targets the abstention token).
pub fn emit_training_set(
    recipe: Recipe,
    estimates: &[PkEstimate],
    contexts: &[ForgedContext],
    examples: &[QAExample],
    params: &TrainParams,
) -> Result<Vec<TrainExample>> {
    params.validate()?;
    let pool = TrainPool::new(estimates, contexts, examples);
    match recipe {
        Recipe::UniKnow | Recipe::Kaft => emit_quartered(recipe, &pool, params),
        Recipe::RetRobust => emit_retrobust(&pool, params),
    }
}

fn emit_quartered(
    recipe: Recipe,
    pool: &TrainPool,
    params: &TrainParams,
) -> Result<Vec<TrainExample>> {
    let required = [
        ContextKind::Original,
        ContextKind::Conflicting,
        ContextKind::RandomIrrelevant,
        ContextKind::RetrievedIrrelevant,
    ];
    let groups = pool.grouped(&required);
    if groups.is_empty() {
        return Err(Error::Validation(
            "no labeled questions with all four context kinds are available".into(),
        ));
    }

    let mut sampled: BTreeMap<PkLabel, Vec<&str>> = BTreeMap::new();
    let mut surplus: BTreeMap<PkLabel, Vec<&str>> = BTreeMap::new();
    for ((dataset, label), qids) in &groups {
        if qids.len() < params.per_label_count {
            return Err(Error::InsufficientPool {
                what: format!("dataset {dataset} label {}", label.as_str()),
                needed: params.per_label_count,
                available: qids.len(),
            });
        }
        let tag = format!("{dataset}/{}", label.as_str());
        let chosen = sample_qids(qids, params.per_label_count, params.seed, &tag);
        let chosen_set: BTreeSet<&str> = chosen.iter().copied().collect();
        surplus
            .entry(*label)
            .or_default()
            .extend(qids.iter().filter(|q| !chosen_set.contains(*q)));
        sampled.entry(*label).or_default().extend(chosen);
    }

    let total: usize = sampled.values().map(|v| v.len() * 4).sum();
    let u_target = (params.abstain_fraction * total as f64).round() as usize;
    let u_target = u_target.min(total);
    let rest = total - u_target;
    let share = rest / 3;
    let remainder = rest % 3;
    let mut quarter_targets: BTreeMap<Scenario, usize> = BTreeMap::new();
    for (i, sc) in [Scenario::C, Scenario::EOnly, Scenario::POnly].iter().enumerate() {
        quarter_targets.insert(*sc, share + usize::from(i < remainder));
    }
    quarter_targets.insert(Scenario::U, u_target);

    let mut rows: Vec<(&str, ContextKind, PkLabel, Scenario)> = Vec::new();
    for (quarter, label, kinds) in QUARTER_KINDS {
        let target = quarter_targets[&quarter];
        let mut base: Vec<(&str, ContextKind)> = Vec::new();
        for qid in sampled.get(&label).map(Vec::as_slice).unwrap_or(&[]) {
            for kind in kinds {
                base.push((qid, kind));
            }
        }
        base.sort_unstable();
        let quarter_rows: Vec<(&str, ContextKind)> = if target == base.len() {
            base
        } else if target < base.len() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(subseed(params.seed, &["shrink", quarter.as_str()]));
            base.shuffle(&mut rng);
            base.truncate(target);
            base.sort_unstable();
            base
        } else {
            let mut extra_pool: Vec<(&str, ContextKind)> = Vec::new();
            for qid in surplus.get(&label).map(Vec::as_slice).unwrap_or(&[]) {
                for kind in kinds {
                    extra_pool.push((qid, kind));
                }
            }
            extra_pool.sort_unstable();
            let needed = target - base.len();
            if extra_pool.len() < needed {
                return Err(Error::InsufficientPool {
                    what: format!("training quarter {quarter}"),
                    needed,
                    available: extra_pool.len(),
                });
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(subseed(params.seed, &["grow", quarter.as_str()]));
            extra_pool.shuffle(&mut rng);
            extra_pool.truncate(needed);
            base.extend(extra_pool);
            base.sort_unstable();
            base
        };
        rows.extend(
            quarter_rows
                .into_iter()
                .map(|(qid, kind)| (qid, kind, label, quarter)),
        );
    }

    rows.sort_unstable_by_key(|(qid, kind, _, _)| (*qid, *kind));
    rows.into_iter()
        .map(|(qid, kind, label, quarter)| {
            build_train_example(recipe, pool, params, qid, kind, label, quarter)
        })
        .collect()
}

fn emit_retrobust(pool: &TrainPool, params: &TrainParams) -> Result<Vec<TrainExample>> {
    let required = [
        ContextKind::Original,
        ContextKind::RandomIrrelevant,
        ContextKind::RetrievedIrrelevant,
    ];
    let groups = pool.grouped(&required);
    if groups.is_empty() {
        return Err(Error::Validation(
            "no labeled questions with the required context kinds are available".into(),
        ));
    }

    let mut rows: Vec<(&str, ContextKind, PkLabel, Scenario)> = Vec::new();
    for ((dataset, label), qids) in &groups {
        // base sample plus an equal extra sample paired with originals only
        let needed = params.per_label_count * 2;
        if qids.len() < needed {
            return Err(Error::InsufficientPool {
                what: format!("dataset {dataset} label {} (retrobust extras)", label.as_str()),
                needed,
                available: qids.len(),
            });
        }
        let tag = format!("{dataset}/{}", label.as_str());
        let chosen = sample_qids(qids, needed, params.seed, &tag);
        let (base, extra) = chosen.split_at(params.per_label_count);
        for qid in base {
            for kind in required {
                let quarter = training_quarter(*label, kind).unwrap_or(Scenario::C);
                rows.push((qid, kind, *label, quarter));
            }
        }
        for qid in extra {
            let quarter = training_quarter(*label, ContextKind::Original).unwrap_or(Scenario::C);
            rows.push((qid, ContextKind::Original, *label, quarter));
        }
    }

    rows.sort_unstable_by_key(|(qid, kind, _, _)| (*qid, *kind));
    rows.into_iter()
        .map(|(qid, kind, label, quarter)| {
            build_train_example(Recipe::RetRobust, pool, params, qid, kind, label, quarter)
        })
        .collect()
}

fn build_train_example(
    recipe: Recipe,
    pool: &TrainPool,
    params: &TrainParams,
    qid: &str,
    kind: ContextKind,
    label: PkLabel,
    quarter: Scenario,
) -> Result<TrainExample> {
    // exclusions substitute the context while keeping the quarter and total
    let effective_kind = if params.exclusions.contains(&kind) {
        match kind {
            ContextKind::Conflicting => ContextKind::Original,
            ContextKind::RetrievedIrrelevant => ContextKind::RandomIrrelevant,
            other => other,
        }
    } else {
        kind
    };
    let example = pool.example(qid);
    let context = pool.context(qid, effective_kind);
    let target = target_for(recipe, label, effective_kind, example, context, &params.unknown_token);
    Ok(TrainExample {
        qid: qid.to_string(),
        question: example.question.clone(),
        context: context.text.clone(),
        kind: effective_kind,
        template_id: params.template_id,
        target,
        recipe,
        scenario: quarter,
    })
}

// ---------------------------------------------------------------------------
// Oracle responders
// ---------------------------------------------------------------------------

/// Deterministic prediction generators over scenario items, used to exercise
/// the evaluator end to end without a live model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Responder {
    /// Context answer when the context is relevant, parametric answer when it
    /// is irrelevant but known, abstention otherwise.
    Ideal,
    /// As Ideal, but guesses instead of abstaining.
    NeverAbstain,
    /// Always the parametric answer when known, ignoring the context.
    ParametricStubborn,
}

impl Responder {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ideal" => Ok(Responder::Ideal),
            "never_abstain" => Ok(Responder::NeverAbstain),
            "parametric_stubborn" | "stubborn" => Ok(Responder::ParametricStubborn),
            other => Err(Error::Validation(format!("unknown responder {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Responder::Ideal => "ideal",
            Responder::NeverAbstain => "never_abstain",
            Responder::ParametricStubborn => "parametric_stubborn",
        }
    }

    pub fn predict(&self, item: &ScenarioItem) -> String {
        let parametric = item.a_pk.as_deref();
        match self {
            Responder::Ideal => {
                if item.kind.is_relevant() {
                    item.a_ek.clone().unwrap_or_else(|| "unknown".into())
                } else {
                    parametric.map(str::to_string).unwrap_or_else(|| "unknown".into())
                }
            }
            Responder::NeverAbstain => {
                if item.kind.is_relevant() {
                    item.a_ek.clone().unwrap_or_else(|| NEVER_ABSTAIN_GUESS.into())
                } else {
                    parametric
                        .map(str::to_string)
                        .unwrap_or_else(|| NEVER_ABSTAIN_GUESS.into())
                }
            }
            Responder::ParametricStubborn => {
                parametric.map(str::to_string).unwrap_or_else(|| "unknown".into())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DatasetId, Split};

    fn example(qid: &str, dataset: DatasetId, answer: &str) -> QAExample {
        QAExample {
            qid: qid.into(),
            question: format!("question about {qid}"),
            answer_aliases: vec![answer.to_string()],
            raw_context: format!("context mentioning {answer}"),
            dataset_id: dataset,
            split: Split::Train,
        }
    }

    fn estimate(qid: &str, label: PkLabel, answer: &str) -> PkEstimate {
        PkEstimate {
            qid: qid.into(),
            model_id: "m".into(),
            samples: vec![],
            correct_rate: match label {
                PkLabel::Exists => 1.0,
                PkLabel::Absent => 0.0,
                PkLabel::Undefined => 0.3,
            },
            label,
            parametric_answer: match label {
                PkLabel::Exists => Some(answer.to_string()),
                _ => None,
            },
        }
    }

    fn context(qid: &str, kind: ContextKind, answer: &str) -> ForgedContext {
        let (text, context_answer) = match kind {
            ContextKind::Original => (format!("text supporting {answer}"), Some(answer.to_string())),
            ContextKind::Conflicting => {
                (format!("text supporting alt-{qid}"), Some(format!("alt-{qid}")))
            }
            _ => (format!("unrelated filler for {qid}"), None),
        };
        ForgedContext {
            qid: qid.into(),
            kind,
            text,
            context_answer,
            provenance: "test".into(),
        }
    }

    /// A small world: `n_exists` known + `n_absent` unknown questions per
    /// dataset, all four context kinds each.
    fn world(
        datasets: &[DatasetId],
        n_exists: usize,
        n_absent: usize,
    ) -> (Vec<PkEstimate>, Vec<ForgedContext>, Vec<QAExample>) {
        let mut examples = Vec::new();
        let mut estimates = Vec::new();
        let mut contexts = Vec::new();
        for dataset in datasets {
            for i in 0..(n_exists + n_absent) {
                let qid = format!("{}-q{i}", dataset.as_str());
                let answer = format!("ans-{qid}");
                let label = if i < n_exists { PkLabel::Exists } else { PkLabel::Absent };
                examples.push(example(&qid, *dataset, &answer));
                estimates.push(estimate(&qid, label, &answer));
                for kind in [
                    ContextKind::Original,
                    ContextKind::Conflicting,
                    ContextKind::RandomIrrelevant,
                    ContextKind::RetrievedIrrelevant,
                ] {
                    contexts.push(context(&qid, kind, &answer));
                }
            }
        }
        (estimates, contexts, examples)
    }

    #[test]
    fn assignment_table() {
        use ContextKind::*;
        use PkLabel::*;
        assert_eq!(assign_scenario(Exists, Conflicting), Some(Scenario::C));
        assert_eq!(assign_scenario(Exists, Original), None);
        assert_eq!(assign_scenario(Exists, RandomIrrelevant), Some(Scenario::POnly));
        assert_eq!(assign_scenario(Exists, RetrievedIrrelevant), Some(Scenario::POnly));
        assert_eq!(assign_scenario(Absent, Original), Some(Scenario::EOnly));
        assert_eq!(assign_scenario(Absent, Conflicting), Some(Scenario::EOnly));
        assert_eq!(assign_scenario(Absent, RandomIrrelevant), Some(Scenario::U));
        assert_eq!(assign_scenario(Undefined, Conflicting), None);
    }

    #[test]
    fn one_exists_question_yields_one_c_two_ponly() {
        let (estimates, contexts, examples) = world(&[DatasetId::NQ], 1, 0);
        let outcome = build_scenarios(&estimates, &contexts, &examples, false).unwrap();
        assert_eq!(outcome.counts.get(&Scenario::C), Some(&1));
        assert_eq!(outcome.counts.get(&Scenario::POnly), Some(&2));
        assert_eq!(outcome.counts.get(&Scenario::EOnly), None);
        assert_eq!(outcome.excluded["exists_original_training_only"], 1);
    }

    #[test]
    fn count_identities_hold_on_full_builds() {
        let (estimates, contexts, examples) = world(&[DatasetId::NQ, DatasetId::TriviaQA], 7, 11);
        let outcome = build_scenarios(&estimates, &contexts, &examples, false).unwrap();
        let c = outcome.counts[&Scenario::C];
        let ponly = outcome.counts[&Scenario::POnly];
        let eonly = outcome.counts[&Scenario::EOnly];
        let u = outcome.counts[&Scenario::U];
        assert_eq!(ponly, 2 * c);
        assert_eq!(eonly, u);
        // same relations as every reported row, e.g. 273/546 and 4,766/4,766
        assert_eq!(2 * 273, 546);
    }

    #[test]
    fn undefined_items_carry_full_mode_golds() {
        let mut world = world(&[DatasetId::NQ], 1, 1);
        world.0.push(estimate("NQ-undef", PkLabel::Undefined, "whatever"));
        world.2.push(example("NQ-undef", DatasetId::NQ, "undef-answer"));
        world.1.push(context("NQ-undef", ContextKind::Original, "undef-answer"));
        world.1.push(context("NQ-undef", ContextKind::RandomIrrelevant, "undef-answer"));
        let outcome = build_scenarios(&world.0, &world.1, &world.2, true).unwrap();
        let undefined: Vec<_> = outcome.items.iter().filter(|i| i.scenario.is_none()).collect();
        assert_eq!(undefined.len(), 2);
        for item in undefined {
            match (&item.kind, &item.expected) {
                (ContextKind::Original, Expected::Answer { gold, .. }) => {
                    assert_eq!(gold, "undef-answer")
                }
                (ContextKind::RandomIrrelevant, Expected::Answer { aliases, .. }) => {
                    assert_eq!(aliases, &vec!["undef-answer".to_string()])
                }
                other => panic!("unexpected undefined item {other:?}"),
            }
        }
        // excluded when the flag is off
        let outcome = build_scenarios(&world.0, &world.1, &world.2, false).unwrap();
        assert_eq!(outcome.excluded["undefined_excluded"], 2);
    }

    #[test]
    fn missing_estimate_is_validation_error() {
        let (estimates, mut contexts, examples) = world(&[DatasetId::NQ], 1, 0);
        contexts.push(context("ghost", ContextKind::Original, "x"));
        assert!(matches!(
            build_scenarios(&estimates, &contexts, &examples, false),
            Err(Error::Validation(_))
        ));
    }

    fn default_train_world() -> (Vec<PkEstimate>, Vec<ForgedContext>, Vec<QAExample>) {
        // 2 datasets x (350 exists + 350 absent): enough surplus for the
        // abstain-fraction sweep down to zero
        world(&[DatasetId::NQ, DatasetId::TriviaQA], 350, 350)
    }

    #[test]
    fn uniknow_defaults_hit_the_paper_arithmetic() {
        let (estimates, contexts, examples) = default_train_world();
        let params = TrainParams::default();
        let rows =
            emit_training_set(Recipe::UniKnow, &estimates, &contexts, &examples, &params).unwrap();
        assert_eq!(rows.len(), 4000);
        let questions: BTreeSet<&str> = rows.iter().map(|r| r.qid.as_str()).collect();
        assert_eq!(questions.len(), 1000);
        let unknown = rows.iter().filter(|r| r.target == "unknown").count();
        assert_eq!(unknown, 1000);
        // every sampled question appears with its four kinds
        let mut per_qid: BTreeMap<&str, BTreeSet<ContextKind>> = BTreeMap::new();
        for r in &rows {
            per_qid.entry(r.qid.as_str()).or_default().insert(r.kind);
        }
        assert!(per_qid.values().all(|kinds| kinds.len() == 4));
    }

    #[test]
    fn abstain_fraction_zero_kills_unknown_targets() {
        let (estimates, contexts, examples) = default_train_world();
        let params = TrainParams {
            abstain_fraction: 0.0,
            ..TrainParams::default()
        };
        let rows =
            emit_training_set(Recipe::UniKnow, &estimates, &contexts, &examples, &params).unwrap();
        assert_eq!(rows.len(), 4000);
        assert_eq!(rows.iter().filter(|r| r.target == "unknown").count(), 0);
        let mut per_quarter: BTreeMap<Scenario, usize> = BTreeMap::new();
        for r in &rows {
            *per_quarter.entry(r.scenario).or_insert(0) += 1;
        }
        assert_eq!(per_quarter.get(&Scenario::U), None);
        for sc in [Scenario::C, Scenario::EOnly, Scenario::POnly] {
            let share = per_quarter[&sc] as f64 / 4000.0;
            assert!((share - 1.0 / 3.0).abs() < 1e-3, "{sc}: {share}");
        }
    }

    #[test]
    fn exclusions_preserve_total_and_substitute_contexts() {
        let (estimates, contexts, examples) = default_train_world();
        let params = TrainParams {
            exclusions: [ContextKind::Conflicting, ContextKind::RetrievedIrrelevant]
                .into_iter()
                .collect(),
            ..TrainParams::default()
        };
        let rows =
            emit_training_set(Recipe::UniKnow, &estimates, &contexts, &examples, &params).unwrap();
        assert_eq!(rows.len(), 4000);
        assert!(rows.iter().all(|r| !matches!(
            r.kind,
            ContextKind::Conflicting | ContextKind::RetrievedIrrelevant
        )));
        // quarters keep their row counts even after substitution
        let c_rows = rows.iter().filter(|r| r.scenario == Scenario::C).count();
        assert_eq!(c_rows, 1000);
    }

    #[test]
    fn kaft_absent_irrelevant_targets_original_answer() {
        let (estimates, contexts, examples) = default_train_world();
        let rows = emit_training_set(
            Recipe::Kaft,
            &estimates,
            &contexts,
            &examples,
            &TrainParams::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4000);
        assert_eq!(rows.iter().filter(|r| r.target == "unknown").count(), 0);
        for r in rows.iter().filter(|r| r.scenario == Scenario::U) {
            assert_eq!(r.target, format!("ans-{}", r.qid));
        }
    }

    #[test]
    fn retrobust_arithmetic_matches_brute_force_enumeration() {
        // the extra original-context sample doubles the per-label demand
        let (estimates, contexts, examples) = world(&[DatasetId::NQ, DatasetId::TriviaQA], 500, 500);
        let params = TrainParams::default();
        let rows =
            emit_training_set(Recipe::RetRobust, &estimates, &contexts, &examples, &params).unwrap();

        // independent enumeration: base questions x 3 kinds + extras x 1
        let base_questions = params.per_label_count * 2 * 2;
        let expected_total = base_questions * 3 + base_questions;
        assert_eq!(rows.len(), expected_total);
        assert!(rows.iter().all(|r| r.kind != ContextKind::Conflicting));
        assert!(rows.iter().all(|r| r.target == format!("ans-{}", r.qid)));

        let mut kind_counts: BTreeMap<ContextKind, usize> = BTreeMap::new();
        for r in &rows {
            *kind_counts.entry(r.kind).or_insert(0) += 1;
        }
        assert_eq!(kind_counts[&ContextKind::Original], base_questions * 2);
        assert_eq!(kind_counts[&ContextKind::RandomIrrelevant], base_questions);
        assert_eq!(kind_counts[&ContextKind::RetrievedIrrelevant], base_questions);
    }

    #[test]
    fn insufficient_pool_is_named() {
        let (estimates, contexts, examples) = world(&[DatasetId::NQ], 10, 10);
        let err = emit_training_set(
            Recipe::UniKnow,
            &estimates,
            &contexts,
            &examples,
            &TrainParams::default(),
        )
        .unwrap_err();
        match err {
            Error::InsufficientPool { what, needed, available } => {
                assert!(what.contains("NQ"));
                assert_eq!(needed, 250);
                assert_eq!(available, 10);
            }
            other => panic!("expected InsufficientPool, got {other:?}"),
        }
    }

    #[test]
    fn emission_is_seed_deterministic() {
        let (estimates, contexts, examples) = default_train_world();
        let params = TrainParams::default();
        let a = emit_training_set(Recipe::UniKnow, &estimates, &contexts, &examples, &params).unwrap();
        let b = emit_training_set(Recipe::UniKnow, &estimates, &contexts, &examples, &params).unwrap();
        let key = |rows: &[TrainExample]| {
            rows.iter().map(|r| (r.qid.clone(), r.kind, r.target.clone())).collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn responders_behave_per_scenario() {
        let (estimates, contexts, examples) = world(&[DatasetId::NQ], 2, 2);
        let outcome = build_scenarios(&estimates, &contexts, &examples, false).unwrap();
        for item in &outcome.items {
            let ideal = Responder::Ideal.predict(item);
            match item.scenario.unwrap() {
                Scenario::C | Scenario::EOnly => {
                    assert_eq!(Some(ideal.as_str()), item.a_ek.as_deref())
                }
                Scenario::POnly => assert_eq!(Some(ideal.as_str()), item.a_pk.as_deref()),
                Scenario::U => assert_eq!(ideal, "unknown"),
            }
            let never = Responder::NeverAbstain.predict(item);
            assert!(!crate::eval::detect_abstention(&never));
            if item.scenario == Some(Scenario::C) {
                assert_eq!(
                    Responder::ParametricStubborn.predict(item).as_str(),
                    item.a_pk.as_deref().unwrap()
                );
            }
        }
    }
}
