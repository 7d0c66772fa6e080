//! End-to-end orchestration: configuration, stage execution in dependency
//! order, run manifests with digest chains, and plot-ready CSV emission.
//!
//! Every stage reads its inputs from files and writes headered JSON-lines
//! outputs, so runs are resumable stage by stage and reproducible byte for
//! byte given the same config, seeds, and caches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::http::{HttpCompletionBackend, HttpRetrievalBackend, HttpScoringBackend};
use crate::clients::{
    CompletionClient, LexicalScorer, LocalIndex, MockKnowledge, MockLm, MockPolicy,
    RelevanceScorer, ResponseCache, RetrievalBackend,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, judge, summarize_verdicts, Accounting, EvalEntry, ReportTables, Verdict,
    NORMALIZATION_VERSION,
};
use crate::forge::{
    audit_answer_absence, forge_conflicting, original_context, pick_retrieved_irrelevant,
    sample_random_irrelevant, ContextKind, DonorContext, ForgedContext,
};
use crate::ingest::{load_dataset, make_context_windows, select_original_context, DatasetId, Split};
use crate::jsonl::{file_digest, read_jsonl, write_atomic, write_jsonl};
use crate::pk::{probe_dataset, PkEstimate, ProbeParams};
use crate::scenario::{
    build_scenarios, emit_training_set, Recipe, Responder, Scenario, ScenarioItem, TrainParams,
};
use crate::templates::{demonstrations_for, template_hashes, TemplateId};

pub const ENV_CACHE_DIR: &str = "UNIKNOW_CACHE_DIR";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_parallelism() -> usize {
    crate::clients::DEFAULT_PARALLELISM
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "RunConfig::default_cache_root")]
    pub cache_root: PathBuf,
    #[serde(default = "RunConfig::default_output_root")]
    pub output_root: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub windows: WindowConfig,
    #[serde(default)]
    pub forge: ForgeConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallelism: default_parallelism(),
            cache_root: Self::default_cache_root(),
            output_root: Self::default_output_root(),
            model: ModelConfig::default(),
            datasets: Vec::new(),
            retrieval: RetrievalConfig::default(),
            scorer: ScorerConfig::default(),
            windows: WindowConfig::default(),
            forge: ForgeConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    fn default_cache_root() -> PathBuf {
        PathBuf::from(".uniknow-cache")
    }

    fn default_output_root() -> PathBuf {
        PathBuf::from("uniknow-out")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = toml::from_str(&body)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        config.apply_env();
        Ok(config)
    }

    /// Environment overrides for deployment-specific values.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(ENV_CACHE_DIR) {
            if !dir.is_empty() {
                self.cache_root = PathBuf::from(dir);
            }
        }
    }

    /// Hash of the canonical JSON serialization; stamped into every output
    /// header so artifacts are traceable to the config that produced them.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "mock" or "http".
    #[serde(default = "ModelConfig::default_backend")]
    pub backend: String,
    #[serde(default = "ModelConfig::default_model_id")]
    pub model_id: String,
    #[serde(default = "ModelConfig::default_n")]
    pub n: u32,
    #[serde(default = "ModelConfig::default_tau")]
    pub tau: f64,
    #[serde(default = "ModelConfig::default_temperature")]
    pub temperature: f64,
    #[serde(default = "ModelConfig::default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "ModelConfig::default_fewshot_count")]
    pub fewshot_count: usize,
    /// Mock backend: JSON file mapping question -> answer.
    #[serde(default)]
    pub mock_knowledge: Option<PathBuf>,
    #[serde(default)]
    pub mock_wrong_rate: f64,
    #[serde(default = "ModelConfig::default_mock_policy")]
    pub mock_policy: String,
}

impl ModelConfig {
    fn default_backend() -> String {
        "mock".into()
    }
    fn default_model_id() -> String {
        "mock-lm".into()
    }
    fn default_n() -> u32 {
        crate::pk::DEFAULT_N
    }
    fn default_tau() -> f64 {
        crate::pk::DEFAULT_TAU
    }
    fn default_temperature() -> f64 {
        crate::pk::DEFAULT_TEMPERATURE
    }
    fn default_max_new_tokens() -> u32 {
        32
    }
    fn default_fewshot_count() -> usize {
        2
    }
    fn default_mock_policy() -> String {
        "follow".into()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backend: Self::default_backend(),
            model_id: Self::default_model_id(),
            n: Self::default_n(),
            tau: Self::default_tau(),
            temperature: Self::default_temperature(),
            max_new_tokens: Self::default_max_new_tokens(),
            fewshot_count: Self::default_fewshot_count(),
            mock_knowledge: None,
            mock_wrong_rate: 0.0,
            mock_policy: Self::default_mock_policy(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub split: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// "local" or "http".
    #[serde(default = "RetrievalConfig::default_backend")]
    pub backend: String,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "RetrievalConfig::default_chunk_words")]
    pub chunk_words: usize,
    #[serde(default = "RetrievalConfig::default_k")]
    pub k: usize,
    #[serde(default)]
    pub escalate: bool,
    #[serde(default)]
    pub endpoint: Option<String>,
}

impl RetrievalConfig {
    fn default_backend() -> String {
        "local".into()
    }
    fn default_chunk_words() -> usize {
        100
    }
    fn default_k() -> usize {
        crate::forge::DEFAULT_RETRIEVAL_K
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            backend: Self::default_backend(),
            corpus: None,
            chunk_words: Self::default_chunk_words(),
            k: Self::default_k(),
            escalate: false,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    /// "lexical" or "http".
    #[serde(default = "ScorerConfig::default_backend")]
    pub backend: String,
    #[serde(default)]
    pub endpoint: Option<String>,
}

impl ScorerConfig {
    fn default_backend() -> String {
        "lexical".into()
    }
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            backend: Self::default_backend(),
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(default = "WindowConfig::default_window_words")]
    pub window_words: usize,
    /// Clip documents to this many tokens before windowing (0 = dataset
    /// default, which applies the SQuAD rule only for SQuAD).
    #[serde(default)]
    pub max_doc_tokens: usize,
}

impl WindowConfig {
    fn default_window_words() -> usize {
        crate::ingest::DEFAULT_WINDOW_WORDS
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_words: Self::default_window_words(),
            max_doc_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    /// Context kinds to forge.
    #[serde(default = "ForgeConfig::default_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "ForgeConfig::default_max_retries")]
    pub max_retries: u32,
}

impl ForgeConfig {
    fn default_kinds() -> Vec<String> {
        vec![
            "original".into(),
            "conflicting".into(),
            "random".into(),
            "retrieved".into(),
        ]
    }
    fn default_max_retries() -> u32 {
        crate::forge::DEFAULT_CONFLICT_RETRIES
    }
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            kinds: Self::default_kinds(),
            max_retries: Self::default_max_retries(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_recipe")]
    pub recipe: String,
    #[serde(default = "TrainConfig::default_per_label_count")]
    pub per_label_count: usize,
    #[serde(default = "TrainConfig::default_abstain_fraction")]
    pub abstain_fraction: f64,
    #[serde(default)]
    pub exclusions: Vec<String>,
}

impl TrainConfig {
    fn default_recipe() -> String {
        "uniknow".into()
    }
    fn default_per_label_count() -> usize {
        250
    }
    fn default_abstain_fraction() -> f64 {
        0.25
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            recipe: Self::default_recipe(),
            per_label_count: Self::default_per_label_count(),
            abstain_fraction: Self::default_abstain_fraction(),
            exclusions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// "scenario" or "full".
    #[serde(default = "EvalConfig::default_mode")]
    pub mode: String,
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    /// Built-in responder generating predictions from the scenario file.
    #[serde(default)]
    pub responder: Option<String>,
    #[serde(default)]
    pub method_label: Option<String>,
}

impl EvalConfig {
    fn default_mode() -> String {
        "scenario".into()
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: Self::default_mode(),
            predictions: None,
            responder: None,
            method_label: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counters: BTreeMap<String, u64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub normalization: String,
    pub template_hashes: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    EstimatePk,
    Forge,
    Build,
    EmitTrain,
    Evaluate,
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::EstimatePk,
        Stage::Forge,
        Stage::Build,
        Stage::EmitTrain,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "estimate-pk" | "estimate_pk" => Ok(Stage::EstimatePk),
            "forge" | "forge-contexts" => Ok(Stage::Forge),
            "build" | "build-scenarios" => Ok(Stage::Build),
            "emit-train" | "emit_train" => Ok(Stage::EmitTrain),
            "evaluate" => Ok(Stage::Evaluate),
            "report" => Ok(Stage::Report),
            other => Err(Error::Validation(format!("unknown stage {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::EstimatePk => "estimate-pk",
            Stage::Forge => "forge",
            Stage::Build => "build",
            Stage::EmitTrain => "emit-train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct DatasetHandle {
    id: DatasetId,
    split: Split,
    path: PathBuf,
}

pub struct Pipeline {
    config: RunConfig,
    config_hash: String,
    datasets: Vec<DatasetHandle>,
    client: CompletionClient,
    scorer: Box<dyn RelevanceScorer>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        if config.datasets.is_empty() {
            return Err(Error::Validation("config lists no datasets".into()));
        }
        let datasets = config
            .datasets
            .iter()
            .map(|d| {
                Ok(DatasetHandle {
                    id: DatasetId::parse(&d.id)?,
                    split: Split::parse(&d.split)?,
                    path: d.path.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let cache = ResponseCache::new(&config.cache_root);
        let backend: Box<dyn crate::clients::CompletionBackend> = match config.model.backend.as_str() {
            "mock" => {
                let knowledge = match &config.model.mock_knowledge {
                    Some(path) => MockKnowledge::load(path)?,
                    None => MockKnowledge::default(),
                };
                Box::new(
                    MockLm::new(
                        config.model.model_id.clone(),
                        knowledge,
                        config.model.mock_wrong_rate,
                        config.seed,
                    )
                    .with_policy(MockPolicy::parse(&config.model.mock_policy)?),
                )
            }
            "http" => Box::new(HttpCompletionBackend::from_env(config.model.model_id.clone())?),
            other => {
                return Err(Error::Validation(format!(
                    "unknown completion backend {other:?} (expected mock or http)"
                )))
            }
        };
        let client = CompletionClient::new(backend, cache, config.parallelism);

        let scorer: Box<dyn RelevanceScorer> = match config.scorer.backend.as_str() {
            "lexical" => Box::new(LexicalScorer),
            "http" => {
                let endpoint = config.scorer.endpoint.clone().ok_or_else(|| {
                    Error::Validation("scorer.backend = http requires scorer.endpoint".into())
                })?;
                Box::new(HttpScoringBackend::new("nli-http", endpoint, None))
            }
            other => {
                return Err(Error::Validation(format!(
                    "unknown scorer backend {other:?} (expected lexical or http)"
                )))
            }
        };

        let config_hash = config.content_hash();
        Ok(Pipeline {
            config,
            config_hash,
            datasets,
            client,
            scorer,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Transport calls issued so far by the completion client.
    pub fn completion_calls(&self) -> u64 {
        self.client.backend_calls()
    }

    fn dataset_dir(&self, handle: &DatasetHandle) -> PathBuf {
        self.config.output_root.join(handle.id.as_str())
    }

    fn pk_path(&self, handle: &DatasetHandle) -> PathBuf {
        self.dataset_dir(handle).join("pk.jsonl")
    }

    fn contexts_path(&self, handle: &DatasetHandle) -> PathBuf {
        self.dataset_dir(handle).join("contexts.jsonl")
    }

    fn scenarios_path(&self, handle: &DatasetHandle) -> PathBuf {
        self.dataset_dir(handle).join("scenarios.jsonl")
    }

    fn eval_path(&self, handle: &DatasetHandle) -> PathBuf {
        self.dataset_dir(handle)
            .join(format!("eval_{}.json", self.config.evaluate.mode))
    }

    fn train_path(&self) -> PathBuf {
        self.config
            .output_root
            .join(format!("train_{}.jsonl", self.config.train.recipe))
    }

    fn report_dir(&self) -> PathBuf {
        self.config.output_root.join("report")
    }

    fn max_doc_tokens(&self) -> Option<usize> {
        match self.config.windows.max_doc_tokens {
            0 => None,
            n => Some(n),
        }
    }

    fn base_header(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.config_hash,
            "normalization": NORMALIZATION_VERSION,
            "template_hashes": template_hashes(),
            "seed": self.config.seed,
            "model_id": self.config.model.model_id,
        })
    }

    fn header_with(&self, extra: serde_json::Value) -> serde_json::Value {
        let mut header = self.base_header();
        if let (Some(base), Some(more)) = (header.as_object_mut(), extra.as_object()) {
            for (k, v) in more {
                base.insert(k.clone(), v.clone());
            }
        }
        header
    }

    fn retriever(&self) -> Result<Box<dyn RetrievalBackend>> {
        match self.config.retrieval.backend.as_str() {
            "local" => {
                let corpus = self.config.retrieval.corpus.as_ref().ok_or_else(|| {
                    Error::Validation("retrieval.backend = local requires retrieval.corpus".into())
                })?;
                Ok(Box::new(LocalIndex::build(corpus, self.config.retrieval.chunk_words)?))
            }
            "http" => {
                let endpoint = self.config.retrieval.endpoint.clone().ok_or_else(|| {
                    Error::Validation("retrieval.backend = http requires retrieval.endpoint".into())
                })?;
                Ok(Box::new(HttpRetrievalBackend::new("retrieval-http", endpoint, None)))
            }
            other => Err(Error::Validation(format!(
                "unknown retrieval backend {other:?} (expected local or http)"
            ))),
        }
    }

    // -- stages ------------------------------------------------------------

    fn stage_estimate_pk(&self, record: &mut StageRecord) -> Result<()> {
        for handle in &self.datasets {
            let loaded = load_dataset(&handle.path, handle.id, handle.split, self.max_doc_tokens())?;
            if loaded.examples.is_empty() {
                return Err(Error::Validation(format!(
                    "{}: no usable examples after filtering",
                    handle.path.display()
                )));
            }
            let params = ProbeParams {
                model_id: self.config.model.model_id.clone(),
                n: self.config.model.n,
                tau: self.config.model.tau,
                temperature: self.config.model.temperature,
                max_new_tokens: self.config.model.max_new_tokens,
                seed: self.config.seed,
                fewshots: demonstrations_for(handle.id.as_str(), self.config.model.fewshot_count),
                parallelism: self.config.parallelism,
            };
            let (estimates, summary) = probe_dataset(&loaded.examples, &self.client, &params)?;
            let out = self.pk_path(handle);
            let header = self.header_with(serde_json::json!({
                "stage": "estimate-pk",
                "dataset": handle.id.as_str(),
                "split": handle.split,
                "n": params.n,
                "tau": params.tau,
                "temperature": params.temperature,
                "closed_book_template": TemplateId::ClosedBook.content_hash(),
            }));
            write_jsonl(&out, &header, &estimates)?;
            let ds = handle.id.as_str();
            record.inputs.insert(format!("{ds}:dataset"), file_digest(&handle.path)?);
            record.outputs.insert(format!("{ds}:pk"), file_digest(&out)?);
            record.counters.insert(format!("{ds}:loaded"), loaded.stats.loaded as u64);
            record.counters.insert(format!("{ds}:load_skipped"), loaded.stats.skipped as u64);
            record.counters.insert(format!("{ds}:exists"), summary.exists as u64);
            record.counters.insert(format!("{ds}:absent"), summary.absent as u64);
            record.counters.insert(format!("{ds}:undefined"), summary.undefined as u64);
            record.counters.insert(format!("{ds}:unavailable"), summary.unavailable as u64);
        }
        Ok(())
    }

    fn stage_forge(&self, record: &mut StageRecord) -> Result<()> {
        let kinds: Vec<ContextKind> = self
            .config
            .forge
            .kinds
            .iter()
            .map(|k| ContextKind::parse(k))
            .collect::<Result<_>>()?;
        let needs_retrieval = kinds.contains(&ContextKind::RetrievedIrrelevant);
        let retriever = if needs_retrieval { Some(self.retriever()?) } else { None };

        for handle in &self.datasets {
            let loaded = load_dataset(&handle.path, handle.id, handle.split, self.max_doc_tokens())?;
            let pk_path = self.pk_path(handle);
            let estimates: Vec<PkEstimate> = read_jsonl(&pk_path)?.rows;
            let estimated: BTreeMap<&str, &PkEstimate> =
                estimates.iter().map(|e| (e.qid.as_str(), e)).collect();
            let examples: Vec<_> = loaded
                .examples
                .iter()
                .filter(|e| estimated.contains_key(e.qid.as_str()))
                .collect();

            let ds = handle.id.as_str();
            let mut contexts: Vec<ForgedContext> = Vec::new();
            let mut skips: BTreeMap<String, u64> = BTreeMap::new();
            let skip = |skips: &mut BTreeMap<String, u64>, what: &str| {
                *skips.entry(what.to_string()).or_insert(0) += 1;
            };

            // pass 1: originals (also the donor pool for random sampling)
            let mut originals: BTreeMap<String, ForgedContext> = BTreeMap::new();
            for example in &examples {
                let windows = make_context_windows(example, self.config.windows.window_words);
                if windows.is_empty() {
                    skip(&mut skips, "no_window");
                    continue;
                }
                let selected = select_original_context(
                    &windows,
                    self.scorer.as_ref(),
                    &example.question,
                    example.primary_alias(),
                )?;
                let mut ctx = original_context(example, &selected.window);
                if selected.fallback_scored {
                    ctx.provenance.push_str(" fallback_scored");
                }
                originals.insert(example.qid.clone(), ctx);
            }
            let donors: Vec<DonorContext> = originals
                .values()
                .map(|c| DonorContext {
                    qid: c.qid.clone(),
                    text: c.text.clone(),
                })
                .collect();

            // pass 2: per-question variants in input order
            for example in &examples {
                let Some(original) = originals.get(&example.qid) else { continue };
                if kinds.contains(&ContextKind::Original) {
                    contexts.push(original.clone());
                }
                if kinds.contains(&ContextKind::Conflicting) {
                    let window = crate::ingest::ContextWindow {
                        text: original.text.clone(),
                        span_alias: original.context_answer.clone().unwrap_or_default(),
                        relevance_score: 0.0,
                        word_count: original.text.split_whitespace().count(),
                        start_token: 0,
                    };
                    match forge_conflicting(
                        example,
                        &window,
                        &self.client,
                        self.config.forge.max_retries,
                        self.config.seed,
                    ) {
                        Ok(ctx) => contexts.push(ctx),
                        Err(_) => skip(&mut skips, "conflicting"),
                    }
                }
                if kinds.contains(&ContextKind::RandomIrrelevant) {
                    match sample_random_irrelevant(example, &donors, self.config.seed) {
                        Ok(ctx) => contexts.push(ctx),
                        Err(_) => skip(&mut skips, "random_irrelevant"),
                    }
                }
                if kinds.contains(&ContextKind::RetrievedIrrelevant) {
                    let retriever = retriever.as_ref().expect("retriever built above");
                    match pick_retrieved_irrelevant(
                        example,
                        retriever.as_ref(),
                        self.config.retrieval.k,
                        self.config.retrieval.escalate,
                    ) {
                        Ok(ctx) => contexts.push(ctx),
                        Err(_) => skip(&mut skips, "retrieved_irrelevant"),
                    }
                }
            }

            // machine check: no leaked answers in the emitted contexts
            let aliases: BTreeMap<String, Vec<String>> = examples
                .iter()
                .map(|e| (e.qid.clone(), e.answer_aliases.clone()))
                .collect();
            let violations = audit_answer_absence(contexts.iter(), &aliases);

            let out = self.contexts_path(handle);
            let header = self.header_with(serde_json::json!({
                "stage": "forge",
                "dataset": ds,
                "retriever": self.config.retrieval.backend,
                "retrieval_k": self.config.retrieval.k,
                "chunk_words": self.config.retrieval.chunk_words,
                "window_words": self.config.windows.window_words,
                "conflict_template": TemplateId::ConflictGen.content_hash(),
                "scorer": self.scorer.id(),
            }));
            write_jsonl(&out, &header, &contexts)?;
            record.inputs.insert(format!("{ds}:pk"), file_digest(&pk_path)?);
            record.outputs.insert(format!("{ds}:contexts"), file_digest(&out)?);
            record.counters.insert(format!("{ds}:contexts"), contexts.len() as u64);
            record
                .counters
                .insert(format!("{ds}:audit_violations"), violations.len() as u64);
            for (what, count) in skips {
                record.counters.insert(format!("{ds}:skip_{what}"), count);
            }
        }
        Ok(())
    }

    fn stage_build(&self, record: &mut StageRecord) -> Result<()> {
        for handle in &self.datasets {
            let loaded = load_dataset(&handle.path, handle.id, handle.split, self.max_doc_tokens())?;
            let pk_path = self.pk_path(handle);
            let ctx_path = self.contexts_path(handle);
            let estimates: Vec<PkEstimate> = read_jsonl(&pk_path)?.rows;
            let contexts: Vec<ForgedContext> = read_jsonl(&ctx_path)?.rows;
            let outcome = build_scenarios(&estimates, &contexts, &loaded.examples, true)?;

            let ds = handle.id.as_str();
            let out = self.scenarios_path(handle);
            let header = self.header_with(serde_json::json!({
                "stage": "build-scenarios",
                "dataset": ds,
                "construction_hashes": {
                    "pk": file_digest(&pk_path)?,
                    "contexts": file_digest(&ctx_path)?,
                },
            }));
            write_jsonl(&out, &header, &outcome.items)?;
            record.inputs.insert(format!("{ds}:pk"), file_digest(&pk_path)?);
            record.inputs.insert(format!("{ds}:contexts"), file_digest(&ctx_path)?);
            record.outputs.insert(format!("{ds}:scenarios"), file_digest(&out)?);
            for (scenario, count) in &outcome.counts {
                record
                    .counters
                    .insert(format!("{ds}:scenario_{scenario}"), *count as u64);
            }
            for (reason, count) in &outcome.excluded {
                record.counters.insert(format!("{ds}:excluded_{reason}"), *count as u64);
            }
        }
        Ok(())
    }

    fn stage_emit_train(&self, record: &mut StageRecord) -> Result<()> {
        let recipe = Recipe::parse(&self.config.train.recipe)?;
        let mut estimates = Vec::new();
        let mut contexts = Vec::new();
        let mut examples = Vec::new();
        for handle in &self.datasets {
            let loaded = load_dataset(&handle.path, handle.id, handle.split, self.max_doc_tokens())?;
            examples.extend(loaded.examples);
            let pk_path = self.pk_path(handle);
            let ctx_path = self.contexts_path(handle);
            estimates.extend(read_jsonl::<PkEstimate>(&pk_path)?.rows);
            contexts.extend(read_jsonl::<ForgedContext>(&ctx_path)?.rows);
            let ds = handle.id.as_str();
            record.inputs.insert(format!("{ds}:pk"), file_digest(&pk_path)?);
            record.inputs.insert(format!("{ds}:contexts"), file_digest(&ctx_path)?);
        }
        let params = TrainParams {
            per_label_count: self.config.train.per_label_count,
            abstain_fraction: self.config.train.abstain_fraction,
            exclusions: self
                .config
                .train
                .exclusions
                .iter()
                .map(|k| ContextKind::parse(k))
                .collect::<Result<_>>()?,
            seed: self.config.seed,
            template_id: TemplateId::OpenBookNaive,
            unknown_token: crate::templates::DEFAULT_UNKNOWN_TOKEN.to_string(),
        };
        let rows = emit_training_set(recipe, &estimates, &contexts, &examples, &params)?;
        let file_rows = rows
            .iter()
            .map(|r| r.to_row())
            .collect::<Result<Vec<serde_json::Value>>>()?;
        let out = self.train_path();
        let header = self.header_with(serde_json::json!({
            "stage": "emit-train",
            "recipe": recipe.as_str(),
            "per_label_count": params.per_label_count,
            "abstain_fraction": params.abstain_fraction,
            "exclusions": self.config.train.exclusions,
            "prompt_template": TemplateId::OpenBookNaive.content_hash(),
        }));
        write_jsonl(&out, &header, &file_rows)?;
        record.outputs.insert("train".into(), file_digest(&out)?);
        record.counters.insert("rows".into(), rows.len() as u64);
        record.counters.insert(
            "unknown_targets".into(),
            rows.iter().filter(|r| r.target == params.unknown_token).count() as u64,
        );
        Ok(())
    }

    fn stage_evaluate(&self, record: &mut StageRecord) -> Result<()> {
        let mode = self.config.evaluate.mode.as_str();
        if !matches!(mode, "scenario" | "full") {
            return Err(Error::Validation(format!(
                "evaluate.mode must be scenario or full, got {mode:?}"
            )));
        }
        let responder = self
            .config
            .evaluate
            .responder
            .as_deref()
            .map(Responder::parse)
            .transpose()?;
        if responder.is_none() && self.config.evaluate.predictions.is_none() {
            return Err(Error::Validation(
                "evaluate needs either a predictions file or a responder".into(),
            ));
        }
        if responder.is_none() && self.datasets.len() > 1 {
            return Err(Error::Validation(
                "an external predictions file covers exactly one dataset; configure one dataset or use a responder".into(),
            ));
        }
        let method = self
            .config
            .evaluate
            .method_label
            .clone()
            .or_else(|| responder.map(|r| r.as_str().to_string()))
            .unwrap_or_else(|| "external".into());

        for handle in &self.datasets {
            let ds = handle.id.as_str();
            let scenarios_path = self.scenarios_path(handle);
            let items: Vec<ScenarioItem> = read_jsonl(&scenarios_path)?.rows;
            if items.is_empty() {
                return Err(Error::Validation(format!(
                    "{}: scenario file holds no items",
                    scenarios_path.display()
                )));
            }

            let predictions: Vec<PredictionRow> = match responder {
                Some(responder) => {
                    let rows: Vec<PredictionRow> = items
                        .iter()
                        .map(|item| PredictionRow {
                            qid: item.qid.clone(),
                            scenario: item.scenario,
                            prediction: responder.predict(item),
                        })
                        .collect();
                    let out = self
                        .dataset_dir(handle)
                        .join(format!("predictions_{}.jsonl", responder.as_str()));
                    let header = self.header_with(serde_json::json!({
                        "stage": "predict",
                        "dataset": ds,
                        "responder": responder.as_str(),
                    }));
                    write_jsonl(&out, &header, &rows)?;
                    record
                        .outputs
                        .insert(format!("{ds}:predictions"), file_digest(&out)?);
                    rows
                }
                None => {
                    let path = self.config.evaluate.predictions.as_ref().unwrap();
                    record.inputs.insert(format!("{ds}:predictions"), file_digest(path)?);
                    read_jsonl(path)?.rows
                }
            };

            let verdicts = judge_rows(&items, &predictions, mode)?;
            let accounting = if mode == "full" {
                Accounting::Observed
            } else {
                Accounting::ScenarioExpected
            };
            let entry = summarize_verdicts(
                &self.config.model.model_id,
                &method,
                ds,
                mode,
                &verdicts,
                accounting,
            )?;
            let out = self.eval_path(handle);
            write_atomic(
                &out,
                serde_json::to_string_pretty(&entry)
                    .map_err(|e| Error::Format(e.to_string()))?
                    .as_bytes(),
            )?;
            record.inputs.insert(format!("{ds}:scenarios"), file_digest(&scenarios_path)?);
            record.outputs.insert(format!("{ds}:eval"), file_digest(&out)?);
            record
                .counters
                .insert(format!("{ds}:verdicts"), verdicts.len() as u64);
        }
        Ok(())
    }

    fn stage_report(&self, record: &mut StageRecord) -> Result<()> {
        let mut entries = Vec::new();
        for handle in &self.datasets {
            let path = self.eval_path(handle);
            let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let entry: EvalEntry =
                serde_json::from_str(&body).map_err(|e| Error::Format(e.to_string()))?;
            record
                .inputs
                .insert(format!("{}:eval", handle.id.as_str()), file_digest(&path)?);
            entries.push(entry);
        }
        let tables = aggregate(entries)?;
        let dir = self.report_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let report_path = dir.join("report.json");
        let report = serde_json::json!({
            "header": self.base_header(),
            "entries": tables.entries,
        });
        write_atomic(
            &report_path,
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(e.to_string()))?
                .as_bytes(),
        )?;
        write_report_csvs(&tables, &dir)?;
        write_atomic(&dir.join("tables.txt"), tables.render_text().as_bytes())?;
        emit_plot_data(&dir)?;

        record.outputs.insert("report".into(), file_digest(&report_path)?);
        record
            .counters
            .insert("entries".into(), tables.entries.len() as u64);
        Ok(())
    }

    /// Validate that each requested stage can find its inputs, either on disk
    /// or produced by an earlier requested stage.
    fn validate_stage_inputs(&self, stages: &[Stage]) -> Result<()> {
        let will_run = |s: Stage| stages.contains(&s);
        let missing = |what: &str, path: &Path| {
            Error::Validation(format!("{what} missing: {}", path.display()))
        };
        for handle in &self.datasets {
            if !handle.path.exists() {
                return Err(missing("dataset file", &handle.path));
            }
        }
        for stage in stages {
            match stage {
                Stage::EstimatePk => {}
                Stage::Forge => {
                    if !will_run(Stage::EstimatePk) {
                        for handle in &self.datasets {
                            let p = self.pk_path(handle);
                            if !p.exists() {
                                return Err(missing("pk estimates file", &p));
                            }
                        }
                    }
                }
                Stage::Build | Stage::EmitTrain => {
                    if !will_run(Stage::Forge) {
                        for handle in &self.datasets {
                            let p = self.contexts_path(handle);
                            if !p.exists() {
                                return Err(missing("forged contexts file", &p));
                            }
                        }
                    }
                    if !will_run(Stage::EstimatePk) {
                        for handle in &self.datasets {
                            let p = self.pk_path(handle);
                            if !p.exists() {
                                return Err(missing("pk estimates file", &p));
                            }
                        }
                    }
                }
                Stage::Evaluate => {
                    if !will_run(Stage::Build) {
                        for handle in &self.datasets {
                            let p = self.scenarios_path(handle);
                            if !p.exists() {
                                return Err(missing("scenario file", &p));
                            }
                        }
                    }
                    if let Some(path) = &self.config.evaluate.predictions {
                        if !path.exists() {
                            return Err(missing("predictions file", path));
                        }
                    }
                }
                Stage::Report => {
                    if !will_run(Stage::Evaluate) {
                        for handle in &self.datasets {
                            let p = self.eval_path(handle);
                            if !p.exists() {
                                return Err(missing("evaluation entry", &p));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn run_stage(&self, stage: Stage, record: &mut StageRecord) -> Result<()> {
        match stage {
            Stage::EstimatePk => self.stage_estimate_pk(record),
            Stage::Forge => self.stage_forge(record),
            Stage::Build => self.stage_build(record),
            Stage::EmitTrain => self.stage_emit_train(record),
            Stage::Evaluate => self.stage_evaluate(record),
            Stage::Report => self.stage_report(record),
        }
    }

    /// Execute the requested stages in dependency order. The manifest is
    /// written even when a stage fails; later stages are then skipped.
    pub fn run(&self, requested: &[Stage]) -> Result<RunManifest> {
        let stages: Vec<Stage> = Stage::ORDER
            .iter()
            .copied()
            .filter(|s| requested.contains(s))
            .collect();
        if stages.is_empty() {
            return Err(Error::Validation("no stages requested".into()));
        }
        self.validate_stage_inputs(&stages)?;

        let mut manifest = RunManifest {
            config_hash: self.config_hash.clone(),
            normalization: NORMALIZATION_VERSION.to_string(),
            template_hashes: template_hashes().clone(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            stages: Vec::new(),
            status: "ok".into(),
            error: None,
        };

        let mut failure: Option<Error> = None;
        for stage in stages {
            if failure.is_some() {
                manifest.stages.push(StageRecord {
                    stage: stage.as_str().into(),
                    status: "skipped".into(),
                    inputs: BTreeMap::new(),
                    outputs: BTreeMap::new(),
                    counters: BTreeMap::new(),
                    wall_ms: 0,
                });
                continue;
            }
            let mut record = StageRecord {
                stage: stage.as_str().into(),
                status: "ok".into(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                counters: BTreeMap::new(),
                wall_ms: 0,
            };
            let start = Instant::now();
            let result = self.run_stage(stage, &mut record);
            record.wall_ms = start.elapsed().as_millis() as u64;
            if let Err(e) = result {
                record.status = format!("failed: {e}");
                manifest.status = format!("failed at {}", stage.as_str());
                manifest.error = Some(e.to_string());
                failure = Some(e);
            }
            manifest.stages.push(record);
        }

        let manifest_path = self.config.output_root.join("manifest.json");
        write_atomic(
            &manifest_path,
            serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Format(e.to_string()))?
                .as_bytes(),
        )?;

        match failure {
            Some(e) => Err(e),
            None => Ok(manifest),
        }
    }
}

/// Prediction file row: {qid, scenario (optional), prediction}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub qid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    pub prediction: String,
}

/// Pair scenario items with prediction rows by file order, verifying qids
/// (and scenarios when present), then judge them under the given mode.
pub fn judge_rows(
    items: &[ScenarioItem],
    predictions: &[PredictionRow],
    mode: &str,
) -> Result<Vec<Verdict>> {
    if items.len() != predictions.len() {
        return Err(Error::Validation(format!(
            "scenario file has {} items but predictions file has {} rows; \
             predictions must cover the scenario file in order",
            items.len(),
            predictions.len()
        )));
    }
    let mut verdicts = Vec::new();
    for (item, row) in items.iter().zip(predictions) {
        if let (Some(a), Some(b)) = (item.scenario, row.scenario) {
            if a != b {
                return Err(Error::Validation(format!(
                    "{}: prediction scenario {b} does not match item scenario {a}",
                    item.qid
                )));
            }
        }
        match mode {
            "scenario" => {
                if item.scenario.is_none() {
                    continue;
                }
                verdicts.push(judge(item, &row.qid, &row.prediction)?);
            }
            "full" => {
                let full_item = ScenarioItem {
                    expected: item.full_mode_expected(),
                    ..item.clone()
                };
                verdicts.push(judge(&full_item, &row.qid, &row.prediction)?);
            }
            other => {
                return Err(Error::Validation(format!(
                    "unknown evaluation mode {other:?}"
                )))
            }
        }
    }
    Ok(verdicts)
}

fn write_csv<W: std::io::Write>(
    writer: W,
    headers: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(headers).map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn write_report_csvs(tables: &ReportTables, dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(
        &mut buf,
        &["model", "method", "dataset", "scenario", "metric", "value"],
        tables
            .scenario_em_rows()
            .into_iter()
            .map(|(m, me, d, s, metric, v)| vec![m, me, d, s, metric, format!("{v:.6}")]),
    )?;
    write_atomic(&dir.join("scenario_em.csv"), &buf)?;

    let mut buf = Vec::new();
    write_csv(
        &mut buf,
        &["model", "method", "dataset", "metric", "value"],
        tables
            .reliability_rows()
            .into_iter()
            .map(|(m, me, d, metric, v)| vec![m, me, d, metric, format!("{v:.6}")]),
    )?;
    write_atomic(&dir.join("reliability.csv"), &buf)?;

    let mut buf = Vec::new();
    write_csv(
        &mut buf,
        &["model", "method", "dataset", "scenario", "error_kind", "count"],
        tables
            .error_rows()
            .into_iter()
            .map(|(m, me, d, s, k, c)| vec![m, me, d, s, k, c.to_string()]),
    )?;
    write_atomic(&dir.join("error_dist.csv"), &buf)?;
    Ok(())
}

/// Re-emit the report as long-format CSVs keyed (model, method, dataset,
/// scenario, metric, value), suitable for external plotting.
pub fn emit_plot_data(report_dir: &Path) -> Result<()> {
    let report_path = report_dir.join("report.json");
    if !report_path.exists() {
        return Err(Error::Validation(format!(
            "report.json missing in {}",
            report_dir.display()
        )));
    }
    let body = std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let report: serde_json::Value =
        serde_json::from_str(&body).map_err(|e| Error::Format(e.to_string()))?;
    let entries: Vec<EvalEntry> = serde_json::from_value(
        report
            .get("entries")
            .cloned()
            .ok_or_else(|| Error::Format("report.json lacks entries".into()))?,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    let tables = ReportTables { entries };

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (m, me, d, s, metric, v) in tables.scenario_em_rows() {
        rows.push(vec![m, me, d, s, metric, format!("{v:.6}")]);
    }
    for (m, me, d, metric, v) in tables.reliability_rows() {
        rows.push(vec![m, me, d, "all".into(), metric, format!("{v:.6}")]);
    }
    for (m, me, d, s, kind, c) in tables.error_rows() {
        rows.push(vec![m, me, d, s, format!("error_{kind}"), c.to_string()]);
    }
    let mut buf = Vec::new();
    write_csv(
        &mut buf,
        &["model", "method", "dataset", "scenario", "metric", "value"],
        rows.into_iter(),
    )?;
    write_atomic(&report_dir.join("plot_long.csv"), &buf)?;
    Ok(())
}
