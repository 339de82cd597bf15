//! Run configuration: one strict JSON file drives the whole harness.
//!
//! Unknown keys are rejected everywhere (a typo like `sg_budget` fails
//! loudly, naming the key, instead of silently running with a default).
//! The configuration also defines the run's identity: [`HarnessConfig::config_hash`]
//! digests the experiment-relevant subset — template, variant, generation
//! knobs, backend identity, dataset content — and that hash is stamped into
//! every record and checked on resume. Transport knobs that cannot change
//! model outputs (retry counts, timeouts, worker counts, cassette wiring,
//! API-key variable names) are deliberately excluded, so a replayed or
//! resumed run still scores as the run it continues.

use crate::backend::{
    Backend, BackendError, CassetteMode, HttpBackend, HttpSettings, ImageWireMode,
    RecordingBackend, ReplayBackend,
};
use crate::bench::DatasetFormat;
use crate::pipeline::PipelineCfg;
use crate::prompt::{PromptTemplateSet, SlotOrder, Variant, VariantKind};
use crate::synthworld::{FallbackPolicy, OracleBackend, OraclePolicy, World};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {detail}", path = path.display())]
    Io { path: PathBuf, detail: String },
    /// Strict parse failure; the serde message names unknown keys.
    #[error("invalid config {path}: {detail}", path = path.display())]
    Parse { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("environment variable {var} is not set (named by api_key_env)")]
    MissingEnv { var: String },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

/// Which model implementation serves requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic oracle over a synthetic scene world (offline).
    #[default]
    Oracle,
    /// OpenAI-compatible chat endpoint.
    Http,
}

/// HTTP backend settings. `api_key_env` names an environment variable; the
/// key itself never appears in config files or hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpSection {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    /// Total attempts per call, first try included.
    pub attempts: u32,
    pub timeout_s: u64,
    pub image_mode: ImageWireMode,
}

impl Default for HttpSection {
    fn default() -> Self {
        let d = HttpSettings::default();
        HttpSection {
            endpoint: d.endpoint,
            model: d.model,
            api_key_env: None,
            attempts: d.attempts,
            timeout_s: d.timeout_s,
            image_mode: d.image_mode,
        }
    }
}

/// Oracle backend settings. `scenes` points at a saved scene world
/// (`synth-gen` writes one) and is required when the backend kind is
/// `oracle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub scenes: Option<PathBuf>,
    /// Probability of dropping each ground-truth relation from a generated
    /// scene graph.
    pub sg_noise: f64,
    pub fallback: FallbackPolicy,
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        let p = OraclePolicy::default();
        OracleSection {
            scenes: None,
            sg_noise: p.sg_noise,
            fallback: p.fallback,
            seed: p.seed,
        }
    }
}

/// Cassette wiring. `record` wraps the live backend and appends every new
/// (fingerprint, response) pair to `path`; `replay` serves exclusively from
/// `path` and never constructs the live backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CassetteSection {
    pub mode: CassetteMode,
    pub path: Option<PathBuf>,
}

/// One backend stack: a model implementation plus optional cassette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub http: HttpSection,
    pub oracle: OracleSection,
    pub cassette: CassetteSection,
    /// Worker threads for the task pool; `1` runs sequentially.
    pub concurrency: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::default(),
            http: HttpSection::default(),
            oracle: OracleSection::default(),
            cassette: CassetteSection::default(),
            concurrency: 4,
        }
    }
}

/// Prompt wording and layout. Omitting `extraction_sentence` keeps the
/// default sentence; an explicit `null` drops the slot entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    pub sg_gen_instruction: String,
    pub context_sentence: String,
    pub extraction_sentence: Option<String>,
    pub zs_cot_trigger: String,
    pub slot_order_step2: SlotOrder,
    pub slot_separator: String,
}

impl Default for TemplateSection {
    fn default() -> Self {
        let t = PromptTemplateSet::default();
        TemplateSection {
            sg_gen_instruction: t.sg_gen_instruction,
            context_sentence: t.context_sentence,
            extraction_sentence: t.extraction_sentence,
            zs_cot_trigger: t.zs_cot_trigger,
            slot_order_step2: t.slot_order_step2,
            slot_separator: t.slot_separator,
        }
    }
}

impl TemplateSection {
    pub fn to_template_set(&self) -> PromptTemplateSet {
        PromptTemplateSet {
            sg_gen_instruction: self.sg_gen_instruction.clone(),
            context_sentence: self.context_sentence.clone(),
            extraction_sentence: self.extraction_sentence.clone(),
            zs_cot_trigger: self.zs_cot_trigger.clone(),
            slot_order_step2: self.slot_order_step2,
            slot_separator: self.slot_separator.clone(),
        }
    }
}

/// Variant selection and generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub variant: Variant,
    pub sg_token_budget: u32,
    pub answer_token_budget: u32,
    pub reasoning_token_budget: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = PipelineCfg::default();
        PipelineSection {
            variant: Variant::new(VariantKind::Ccot),
            sg_token_budget: d.sg_token_budget,
            answer_token_budget: d.answer_token_budget,
            reasoning_token_budget: d.reasoning_token_budget,
            temperature: d.temperature,
            seed: d.seed,
        }
    }
}

/// What to evaluate on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    /// Root for relative image paths; defaults to the dataset's directory.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::McqJsonl
}

/// Top-level harness configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub backend: BackendSection,
    /// Separate judge stack for the two-image protocol; absent, the model
    /// backend judges its own reasoning.
    pub judge: Option<BackendSection>,
    pub template: TemplateSection,
    pub pipeline: PipelineSection,
    pub dataset: Option<DatasetSection>,
    /// Directory that run directories are created under.
    pub runs_root: PathBuf,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            backend: BackendSection::default(),
            judge: None,
            template: TemplateSection::default(),
            pipeline: PipelineSection::default(),
            dataset: None,
            runs_root: PathBuf::from("runs"),
        }
    }
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<HarnessConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let cfg: HarnessConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pipeline.sg_token_budget == 0 {
            return Err(ConfigError::Invalid(
                "pipeline.sg_token_budget must be positive".to_string(),
            ));
        }
        if self.pipeline.answer_token_budget == 0 || self.pipeline.reasoning_token_budget == 0 {
            return Err(ConfigError::Invalid(
                "answer and reasoning token budgets must be positive".to_string(),
            ));
        }
        if self.backend.concurrency == 0 {
            return Err(ConfigError::Invalid(
                "backend.concurrency must be at least 1".to_string(),
            ));
        }
        for (label, section) in self.backend_sections() {
            validate_backend(label, section)?;
        }
        Ok(())
    }

    fn backend_sections(&self) -> Vec<(&'static str, &BackendSection)> {
        let mut out = vec![("backend", &self.backend)];
        if let Some(judge) = &self.judge {
            out.push(("judge", judge));
        }
        out
    }

    /// Stable identity hash over the experiment-relevant subset. Reads the
    /// dataset file (and oracle scene files) so content changes — not just
    /// path changes — alter the hash.
    pub fn config_hash(&self) -> Result<String, ConfigError> {
        let view = HashView {
            template: &self.template,
            variant: &self.pipeline.variant,
            sg_token_budget: self.pipeline.sg_token_budget,
            answer_token_budget: self.pipeline.answer_token_budget,
            reasoning_token_budget: self.pipeline.reasoning_token_budget,
            temperature: self.pipeline.temperature,
            seed: self.pipeline.seed,
            backend: BackendIdentity::of(&self.backend)?,
            judge: match &self.judge {
                Some(j) => Some(BackendIdentity::of(j)?),
                None => None,
            },
            dataset_format: self.dataset.as_ref().map(|d| d.format.as_str()),
            dataset_digest: match &self.dataset {
                Some(d) => file_digest(&d.path)?,
                None => "-".to_string(),
            },
        };
        let json = serde_json::to_string(&view)
            .expect("hash view serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        Ok(hex(&hasher.finalize()))
    }

    /// Pipeline knobs with the identity hash stamped in.
    pub fn to_pipeline_cfg(&self, config_hash: String) -> PipelineCfg {
        PipelineCfg {
            sg_token_budget: self.pipeline.sg_token_budget,
            answer_token_budget: self.pipeline.answer_token_budget,
            reasoning_token_budget: self.pipeline.reasoning_token_budget,
            temperature: self.pipeline.temperature,
            seed: self.pipeline.seed,
            workers: self.backend.concurrency,
            config_hash,
            ..PipelineCfg::default()
        }
    }

    /// Build the model backend stack (live backend plus cassette wiring).
    pub fn build_backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        build_backend_stack(&self.backend)
    }

    /// Build the judge stack, if a separate one is configured.
    pub fn build_judge(&self) -> Result<Option<Arc<dyn Backend>>, ConfigError> {
        match &self.judge {
            Some(section) => Ok(Some(build_backend_stack(section)?)),
            None => Ok(None),
        }
    }
}

fn validate_backend(label: &str, section: &BackendSection) -> Result<(), ConfigError> {
    if section.kind == BackendKind::Oracle && section.oracle.scenes.is_none() {
        return Err(ConfigError::Invalid(format!(
            "{label}.oracle.scenes is required when {label}.kind is \"oracle\""
        )));
    }
    if !(0.0..=1.0).contains(&section.oracle.sg_noise) {
        return Err(ConfigError::Invalid(format!(
            "{label}.oracle.sg_noise must be within [0, 1]"
        )));
    }
    if section.kind == BackendKind::Http && section.http.attempts == 0 {
        return Err(ConfigError::Invalid(format!(
            "{label}.http.attempts must be at least 1"
        )));
    }
    if section.cassette.mode != CassetteMode::Off && section.cassette.path.is_none() {
        return Err(ConfigError::Invalid(format!(
            "{label}.cassette.path is required when {label}.cassette.mode is not \"off\""
        )));
    }
    Ok(())
}

/// Build one backend stack: replay never touches the live backend, record
/// wraps it, off passes it through.
pub fn build_backend_stack(section: &BackendSection) -> Result<Arc<dyn Backend>, ConfigError> {
    match section.cassette.mode {
        CassetteMode::Replay => {
            let path = section.cassette.path.as_ref().ok_or_else(|| {
                ConfigError::Invalid("cassette.path is required for replay".to_string())
            })?;
            Ok(Arc::new(ReplayBackend::from_file(path)?))
        }
        CassetteMode::Record => {
            let path = section.cassette.path.as_ref().ok_or_else(|| {
                ConfigError::Invalid("cassette.path is required for recording".to_string())
            })?;
            let live = build_live_backend(section)?;
            Ok(Arc::new(RecordingBackend::create(live, path)?))
        }
        CassetteMode::Off => build_live_backend(section),
    }
}

fn build_live_backend(section: &BackendSection) -> Result<Arc<dyn Backend>, ConfigError> {
    match section.kind {
        BackendKind::Oracle => {
            let scenes = section.oracle.scenes.as_ref().ok_or_else(|| {
                ConfigError::Invalid(
                    "oracle.scenes is required when kind is \"oracle\"".to_string(),
                )
            })?;
            let world = World::load(scenes)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let policy = OraclePolicy {
                sg_noise: section.oracle.sg_noise,
                fallback: section.oracle.fallback,
                seed: section.oracle.seed,
            };
            Ok(Arc::new(OracleBackend::new(Arc::new(world), policy)))
        }
        BackendKind::Http => {
            let api_key = match &section.http.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingEnv {
                    var: var.clone(),
                })?),
                None => None,
            };
            let settings = HttpSettings {
                endpoint: section.http.endpoint.clone(),
                model: section.http.model.clone(),
                api_key,
                attempts: section.http.attempts,
                timeout_s: section.http.timeout_s,
                image_mode: section.http.image_mode,
            };
            Ok(Arc::new(HttpBackend::new(settings)?))
        }
    }
}

// ---------------------------------------------------------------------------
// Identity hashing
// ---------------------------------------------------------------------------

/// The hashed subset. Field order is fixed by declaration order, so the
/// serialized form is stable across runs and platforms.
#[derive(Serialize)]
struct HashView<'a> {
    template: &'a TemplateSection,
    variant: &'a Variant,
    sg_token_budget: u32,
    answer_token_budget: u32,
    reasoning_token_budget: u32,
    temperature: f64,
    seed: u64,
    backend: BackendIdentity,
    judge: Option<BackendIdentity>,
    dataset_format: Option<&'a str>,
    dataset_digest: String,
}

/// The output-relevant part of a backend section. Retries, timeouts,
/// concurrency, cassette wiring, and key variable names are excluded.
#[derive(Serialize)]
struct BackendIdentity {
    kind: BackendKind,
    endpoint: Option<String>,
    model: Option<String>,
    image_mode: Option<ImageWireMode>,
    scenes_digest: Option<String>,
    sg_noise: Option<f64>,
    fallback: Option<FallbackPolicy>,
    oracle_seed: Option<u64>,
}

impl BackendIdentity {
    fn of(section: &BackendSection) -> Result<BackendIdentity, ConfigError> {
        let mut id = BackendIdentity {
            kind: section.kind,
            endpoint: None,
            model: None,
            image_mode: None,
            scenes_digest: None,
            sg_noise: None,
            fallback: None,
            oracle_seed: None,
        };
        match section.kind {
            BackendKind::Http => {
                id.endpoint = Some(section.http.endpoint.clone());
                id.model = Some(section.http.model.clone());
                id.image_mode = Some(section.http.image_mode);
            }
            BackendKind::Oracle => {
                let scenes = section.oracle.scenes.as_ref().ok_or_else(|| {
                    ConfigError::Invalid(
                        "oracle.scenes is required when kind is \"oracle\"".to_string(),
                    )
                })?;
                id.scenes_digest = Some(file_digest(scenes)?);
                id.sg_noise = Some(section.oracle.sg_noise);
                id.fallback = Some(section.oracle.fallback);
                id.oracle_seed = Some(section.oracle.seed);
            }
        }
        Ok(id)
    }
}

fn file_digest(path: &Path) -> Result<String, ConfigError> {
    let bytes = std::fs::read(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::DEFAULT_EXTRACTION_SENTENCE;
    use crate::sg::Lexicons;
    use crate::synthworld::gen_world;

    #[test]
    fn defaults_are_the_documented_ones() {
        let cfg = HarnessConfig::default();
        assert_eq!(cfg.pipeline.sg_token_budget, 256);
        assert_eq!(cfg.backend.concurrency, 4);
        assert_eq!(cfg.backend.kind, BackendKind::Oracle);
        assert_eq!(cfg.pipeline.variant.kind, VariantKind::Ccot);
        assert_eq!(
            cfg.template.extraction_sentence.as_deref(),
            Some(DEFAULT_EXTRACTION_SENTENCE)
        );
        assert_eq!(cfg.runs_root, PathBuf::from("runs"));
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = serde_json::from_str::<HarnessConfig>(
            r#"{"pipeline": {"sg_budget": 128}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("sg_budget"), "{err}");

        let err =
            serde_json::from_str::<HarnessConfig>(r#"{"tempalte": {}}"#).unwrap_err();
        assert!(err.to_string().contains("tempalte"), "{err}");
    }

    #[test]
    fn absent_extraction_sentence_keeps_default_and_null_drops_it() {
        let kept: HarnessConfig = serde_json::from_str(r#"{"template": {}}"#).unwrap();
        assert_eq!(
            kept.template.extraction_sentence.as_deref(),
            Some(DEFAULT_EXTRACTION_SENTENCE)
        );
        let dropped: HarnessConfig =
            serde_json::from_str(r#"{"template": {"extraction_sentence": null}}"#).unwrap();
        assert_eq!(dropped.template.extraction_sentence, None);
    }

    fn tmp_config(dir: &Path) -> HarnessConfig {
        let world = gen_world(3, 4, 2, &Lexicons::default_english()).unwrap().0;
        let scenes = dir.join("scenes.jsonl");
        world.save(&scenes).unwrap();
        let dataset = dir.join("tasks.jsonl");
        std::fs::write(&dataset, "").unwrap();
        let mut cfg = HarnessConfig::default();
        cfg.backend.oracle.scenes = Some(scenes);
        cfg.dataset = Some(DatasetSection {
            path: dataset,
            format: DatasetFormat::McqJsonl,
            image_root: None,
        });
        cfg
    }

    #[test]
    fn hash_tracks_experiment_knobs_and_ignores_transport_knobs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tmp_config(dir.path());
        let base = cfg.config_hash().unwrap();
        assert_eq!(base, cfg.config_hash().unwrap(), "hash must be stable");

        let mut budget = cfg.clone();
        budget.pipeline.sg_token_budget = 128;
        assert_ne!(base, budget.config_hash().unwrap());

        let mut variant = cfg.clone();
        variant.pipeline.variant = Variant::new(VariantKind::BaselineDirect);
        assert_ne!(base, variant.config_hash().unwrap());

        let mut noise = cfg.clone();
        noise.backend.oracle.sg_noise = 0.3;
        assert_ne!(base, noise.config_hash().unwrap());

        let mut transport = cfg.clone();
        transport.backend.concurrency = 1;
        transport.backend.http.attempts = 9;
        transport.backend.cassette = CassetteSection {
            mode: CassetteMode::Record,
            path: Some(dir.path().join("c.jsonl")),
        };
        assert_eq!(base, transport.config_hash().unwrap());

        std::fs::write(cfg.dataset.as_ref().unwrap().path.as_path(), "changed").unwrap();
        assert_ne!(base, cfg.config_hash().unwrap(), "dataset content is hashed");
    }

    #[test]
    fn oracle_backend_builds_and_replay_requires_existing_cassette() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tmp_config(dir.path());
        let backend = cfg.build_backend().unwrap();
        assert_eq!(backend.id(), "oracle");

        let mut recording = cfg.clone();
        recording.backend.cassette = CassetteSection {
            mode: CassetteMode::Record,
            path: Some(dir.path().join("c.jsonl")),
        };
        assert_eq!(recording.build_backend().unwrap().id(), "oracle");

        let mut replay = cfg.clone();
        replay.backend.cassette = CassetteSection {
            mode: CassetteMode::Replay,
            path: Some(dir.path().join("missing.jsonl")),
        };
        assert!(replay.build_backend().is_err());
    }

    #[test]
    fn validation_names_the_offending_section() {
        let mut cfg = HarnessConfig::default();
        cfg.backend.oracle.scenes = None;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("backend.oracle.scenes"), "{err}");

        let mut judged = HarnessConfig::default();
        judged.backend.oracle.scenes = Some(PathBuf::from("x.jsonl"));
        let mut judge = BackendSection::default();
        judge.cassette.mode = CassetteMode::Replay;
        judge.oracle.scenes = Some(PathBuf::from("x.jsonl"));
        judged.judge = Some(judge);
        let err = judged.validate().unwrap_err();
        assert!(err.to_string().contains("judge.cassette.path"), "{err}");
    }

    #[test]
    fn judge_stack_is_built_separately() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tmp_config(dir.path());
        assert!(cfg.build_judge().unwrap().is_none());
        cfg.judge = Some(cfg.backend.clone());
        assert_eq!(cfg.build_judge().unwrap().unwrap().id(), "oracle");
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tmp_config(dir.path());
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: HarnessConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
