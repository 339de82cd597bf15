//! Task execution: variant dispatch, answer extraction, and run records.
//!
//! `run_task` executes one task under one variant against a backend and
//! always returns a record — backend and assembly failures become abstain
//! records with the error noted, never aborts. `run_tasks` drives a slice
//! of tasks through an optional thread pool, delivering each finished
//! record to a callback on the caller's thread.
//!
//! Records are self-contained: they carry the gold label, the extracted
//! answer, prompt fingerprints, and the parsed scene graph, so scoring and
//! audits never need the dataset file again. They deliberately contain no
//! wall-clock values — all timing comes from backend-reported latencies —
//! so a cassette replay of a run reproduces its records byte for byte.

use crate::backend::{
    fingerprint, Backend, BackendError, BackendRequest, BackendResponse, FinishReason, ImageRef,
    RequestTag,
};
use crate::bench::{answer_is_correct, TaskInstance, TaskKind};
use crate::prompt::{
    assemble_direct, assemble_step1, assemble_step2, assemble_zs_cot, make_random_sg,
    option_label, AssembledPrompt, PromptTemplateSet, Variant, VariantKind, ZsCotStage,
};
use crate::sg::{canonical_serialize, parse_scene_graph, Lexicons, ParseMode, ParseReport, SceneGraph};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use thiserror::Error;

// ---------------------------------------------------------------------------
// Answer extraction
// ---------------------------------------------------------------------------

/// Shape of an extracted answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    /// A multiple-choice option letter.
    Letter,
    /// The verbatim text of exactly one option (resolved to its letter).
    OptionText,
    /// Free-form text, taken as-is.
    Freeform,
    /// Nothing extractable.
    Abstain,
}

/// Which rule produced the extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    /// A standalone option letter appeared in the response.
    DirectLetter,
    /// Exactly one option's text appeared in the response.
    OptionMatch,
    /// A pair-protocol judge call produced the verdict.
    Judge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub kind: AnswerKind,
    pub value: String,
    pub method: Option<ExtractionMethod>,
}

impl ExtractedAnswer {
    pub fn abstain() -> Self {
        ExtractedAnswer {
            kind: AnswerKind::Abstain,
            value: String::new(),
            method: None,
        }
    }
}

/// Pull a multiple-choice answer out of a model response.
///
/// Rule 1: the first standalone option letter wins (bounded by
/// non-alphanumeric on both sides). Bare lowercase `a` and `i` are English
/// words, so they count only when marked as labels — `(` before or `)`,
/// `.`, `:` immediately after; every other letter counts bare, in either
/// case. Rule 2: if no letter, the response naming exactly one option's
/// text (case-insensitive substring) resolves to that option. Otherwise
/// the extraction abstains.
pub fn extract_choice(response: &str, options: &[String]) -> ExtractedAnswer {
    let chars: Vec<char> = response.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_alphabetic() {
            continue;
        }
        let prev = if i > 0 { Some(chars[i - 1]) } else { None };
        let next = chars.get(i + 1).copied();
        let standalone = prev.is_none_or(|p| !p.is_alphanumeric())
            && next.is_none_or(|n| !n.is_alphanumeric());
        if !standalone {
            continue;
        }
        let upper = c.to_ascii_uppercase();
        let idx = (upper as u8 - b'A') as usize;
        if idx >= options.len() {
            continue;
        }
        if c == 'a' || c == 'i' {
            let marked = prev == Some('(') || matches!(next, Some(')' | '.' | ':'));
            if !marked {
                continue;
            }
        }
        return ExtractedAnswer {
            kind: AnswerKind::Letter,
            value: upper.to_string(),
            method: Some(ExtractionMethod::DirectLetter),
        };
    }

    let lowered = response.to_lowercase();
    let mut hits = options
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.trim().is_empty() && lowered.contains(&o.to_lowercase()));
    if let (Some((idx, _)), None) = (hits.next(), hits.next()) {
        return ExtractedAnswer {
            kind: AnswerKind::Letter,
            value: option_label(idx).to_string(),
            method: Some(ExtractionMethod::OptionMatch),
        };
    }
    ExtractedAnswer::abstain()
}

/// Free-form extraction: the trimmed response, abstaining when empty.
pub fn extract_freeform(response: &str) -> ExtractedAnswer {
    let trimmed = response.trim();
    if trimmed.is_empty() {
        ExtractedAnswer::abstain()
    } else {
        ExtractedAnswer {
            kind: AnswerKind::Freeform,
            value: trimmed.to_string(),
            method: None,
        }
    }
}

/// Dispatch extraction on the task kind.
pub fn extract_answer(kind: TaskKind, response: &str, options: Option<&[String]>) -> ExtractedAnswer {
    match kind {
        TaskKind::Mcq => extract_choice(response, options.unwrap_or(&[])),
        TaskKind::VqaFreeform => extract_freeform(response),
        TaskKind::Pair => ExtractedAnswer::abstain(),
    }
}

/// First standalone digit in `1..=n_choices`, as a zero-based index.
pub fn extract_judge_digit(response: &str, n_choices: usize) -> Option<usize> {
    let chars: Vec<char> = response.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_digit() {
            continue;
        }
        let prev_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let next_ok = chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        if !prev_ok || !next_ok {
            continue;
        }
        let v = (c as u8 - b'0') as usize;
        if v >= 1 && v <= n_choices {
            return Some(v - 1);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// Pair-task cell outcomes: did the judge pick the matching caption for
/// each image, and the matching image for each caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCells {
    pub caption_given_image: [bool; 2],
    pub image_given_caption: [bool; 2],
}

/// Backend-reported latencies. Never wall-clock: replays must reproduce
/// records exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Timings {
    pub step1_ms: Option<u64>,
    pub step2_ms: Option<u64>,
    pub total_ms: u64,
}

/// Everything the harness knows about one executed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub variant: VariantKind,
    pub task_kind: TaskKind,
    pub split_tag: Option<String>,
    pub gold: Option<String>,
    /// Fingerprint of the generation-stage request, when one ran.
    pub step1_prompt_digest: Option<String>,
    pub step1_response: Option<String>,
    /// The scene graph carried into the answering prompt, when one parsed.
    pub parsed_sg: Option<SceneGraph>,
    pub sg_parse: Option<ParseReport>,
    /// True when the generation stage hit its token cap.
    pub sg_truncated: bool,
    /// Fingerprint of the answering-stage request.
    pub step2_prompt_digest: Option<String>,
    pub step2_response: String,
    pub extracted: ExtractedAnswer,
    pub correct: Option<bool>,
    pub pair_cells: Option<PairCells>,
    pub timings: Timings,
    pub backend_id: String,
    pub config_hash: String,
    pub error: Option<String>,
}

impl RunRecord {
    fn skeleton(task: &TaskInstance, variant: VariantKind, backend_id: &str, config_hash: &str) -> Self {
        RunRecord {
            task_id: task.task_id.clone(),
            variant,
            task_kind: task.kind,
            split_tag: task.split_tag.clone(),
            gold: task.gold.clone(),
            step1_prompt_digest: None,
            step1_response: None,
            parsed_sg: None,
            sg_parse: None,
            sg_truncated: false,
            step2_prompt_digest: None,
            step2_response: String::new(),
            extracted: ExtractedAnswer::abstain(),
            correct: None,
            pair_cells: None,
            timings: Timings::default(),
            backend_id: backend_id.to_string(),
            config_hash: config_hash.to_string(),
            error: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

/// Knobs shared by every task in a run.
#[derive(Debug, Clone)]
pub struct PipelineCfg {
    /// Token cap for scene-graph (and other artifact) generation calls.
    pub sg_token_budget: u32,
    /// Token cap for answering and judge calls.
    pub answer_token_budget: u32,
    /// Token cap for free-form reasoning calls.
    pub reasoning_token_budget: u32,
    pub temperature: f64,
    /// Base seed for seeded variants (random scene graphs).
    pub seed: u64,
    /// Worker threads; `<= 1` runs strictly sequentially.
    pub workers: usize,
    /// Stamped into every record; computed from the run configuration.
    pub config_hash: String,
    /// Word lists for the random-graph variant.
    pub lexicons: Lexicons,
}

impl Default for PipelineCfg {
    fn default() -> Self {
        PipelineCfg {
            sg_token_budget: 256,
            answer_token_budget: 64,
            reasoning_token_budget: 512,
            temperature: 0.0,
            seed: 0,
            workers: 1,
            config_hash: String::new(),
            lexicons: Lexicons::default_english(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{context}: {detail}")]
    Io { context: String, detail: String },
    #[error("records file line {line}: {detail}")]
    BadRecords { line: usize, detail: String },
}

// ---------------------------------------------------------------------------
// Single-task execution
// ---------------------------------------------------------------------------

struct StepOutcome {
    response: BackendResponse,
    digest: String,
}

fn call_backend(
    backend: &dyn Backend,
    prompt: &AssembledPrompt,
    image: Option<&str>,
    tag: RequestTag,
    max_new_tokens: u32,
    cfg: &PipelineCfg,
) -> Result<StepOutcome, BackendError> {
    let image_ref = if prompt.has_image {
        image.map(ImageRef::from_task_ref)
    } else {
        None
    };
    let req = BackendRequest {
        rendered_text: prompt.rendered_text.clone(),
        image_ref,
        max_new_tokens,
        temperature: cfg.temperature,
        stop: None,
        request_tag: tag,
    };
    let digest = fingerprint(&req)?;
    let response = backend.call(&req)?;
    Ok(StepOutcome { response, digest })
}

/// Per-task seed for seeded variants: stable across platforms and
/// independent of task order.
fn task_seed(base: u64, salt: &str, task_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(salt.as_bytes());
    hasher.update([0u8]);
    hasher.update(task_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is long enough"))
}

/// Execute one non-pair task under `variant`. Failures of any step become
/// an abstain record carrying the error text; this function never panics
/// on backend trouble and never aborts a run.
pub fn run_task(
    task: &TaskInstance,
    variant: &Variant,
    injected: Option<&BTreeMap<String, String>>,
    backend: &dyn Backend,
    tpl: &PromptTemplateSet,
    cfg: &PipelineCfg,
) -> RunRecord {
    let mut rec = RunRecord::skeleton(task, variant.kind, backend.id(), &cfg.config_hash);
    if let Err(e) = run_task_inner(task, variant, injected, backend, tpl, cfg, &mut rec) {
        rec.error = Some(e);
        rec.extracted = ExtractedAnswer::abstain();
    }
    rec.timings.total_ms =
        rec.timings.step1_ms.unwrap_or(0) + rec.timings.step2_ms.unwrap_or(0);
    rec.correct = answer_is_correct(task.kind, &rec.extracted, task.gold.as_deref());
    rec
}

fn run_task_inner(
    task: &TaskInstance,
    variant: &Variant,
    injected: Option<&BTreeMap<String, String>>,
    backend: &dyn Backend,
    tpl: &PromptTemplateSet,
    cfg: &PipelineCfg,
    rec: &mut RunRecord,
) -> Result<(), String> {
    let image = task.image_refs.first().map(|s| s.as_str());

    // The answering prompt's scene-graph text, for variants that have one.
    let sg_text: Option<String> = match variant.kind {
        VariantKind::BaselineDirect | VariantKind::ZsCot => None,
        VariantKind::RandomSg => {
            let seed = variant.params.seed.unwrap_or(cfg.seed);
            let g = make_random_sg(task_seed(seed, "random_sg", &task.task_id), &cfg.lexicons);
            rec.parsed_sg = Some(g.clone());
            Some(canonical_serialize(&g))
        }
        VariantKind::InjectedSg => {
            let map = injected.ok_or("injected_sg variant needs an sg_source records file")?;
            let text = map
                .get(&task.task_id)
                .ok_or_else(|| format!("no injected scene graph for task {}", task.task_id))?;
            if let Ok((g, report)) = parse_scene_graph(text, ParseMode::Strict) {
                rec.parsed_sg = Some(g);
                rec.sg_parse = Some(report);
            }
            Some(text.clone())
        }
        _ => {
            // Generation stage.
            let prompt = assemble_step1(task, tpl, variant).map_err(|e| e.to_string())?;
            let out = call_backend(backend, &prompt, image, RequestTag::Step1, cfg.sg_token_budget, cfg)
                .map_err(|e| e.to_string())?;
            rec.step1_prompt_digest = Some(out.digest);
            rec.step1_response = Some(out.response.text.clone());
            rec.timings.step1_ms = Some(out.response.latency_ms);
            rec.sg_truncated = out.response.finish_reason == FinishReason::Length;
            match parse_scene_graph(&out.response.text, ParseMode::Repair) {
                Ok((g, report)) => {
                    rec.sg_parse = Some(report);
                    rec.parsed_sg = Some(g.clone());
                    Some(canonical_serialize(&g))
                }
                // Unparseable artifacts (prose captions, bare lists,
                // mangled JSON) ride along verbatim.
                Err(_) => Some(out.response.text.clone()),
            }
        }
    };

    // Answering stage.
    let (prompt, tag, budget) = match variant.kind {
        VariantKind::BaselineDirect => {
            (assemble_direct(task, tpl), RequestTag::Step2, cfg.answer_token_budget)
        }
        VariantKind::ZsCot => {
            let reason_prompt = assemble_zs_cot(task, tpl, ZsCotStage::Reason, None)
                .map_err(|e| e.to_string())?;
            let out = call_backend(
                backend,
                &reason_prompt,
                image,
                RequestTag::ZscotReason,
                cfg.reasoning_token_budget,
                cfg,
            )
            .map_err(|e| e.to_string())?;
            rec.step1_prompt_digest = Some(out.digest);
            rec.step1_response = Some(out.response.text.clone());
            rec.timings.step1_ms = Some(out.response.latency_ms);
            let extract = assemble_zs_cot(task, tpl, ZsCotStage::Extract, Some(&out.response.text))
                .map_err(|e| e.to_string())?;
            (extract, RequestTag::ZscotExtract, cfg.answer_token_budget)
        }
        _ => {
            let text = sg_text.as_deref().expect("sg variants always produce text");
            let prompt = assemble_step2(task, text, tpl, variant).map_err(|e| e.to_string())?;
            (prompt, RequestTag::Step2, cfg.answer_token_budget)
        }
    };

    let out = call_backend(backend, &prompt, image, tag, budget, cfg).map_err(|e| e.to_string())?;
    rec.step2_prompt_digest = Some(out.digest);
    rec.step2_response = out.response.text.clone();
    rec.timings.step2_ms = Some(out.response.latency_ms);
    rec.extracted = extract_answer(task.kind, &out.response.text, task.options.as_deref());
    Ok(())
}

// ---------------------------------------------------------------------------
// Pair protocol
// ---------------------------------------------------------------------------

/// Question posed when matching captions to an image.
pub const PAIR_MATCH_QUESTION: &str = "Which caption best matches the image?";
/// Header above the reasoning excerpt in a caption-judging prompt.
pub const PAIR_REASONING_HEADER: &str = "Reasoning about the image:";
/// Closing sentence of a caption-judging prompt.
pub const PAIR_TEXT_JUDGE_SENTENCE: &str = "Answer with the number of the matching caption.";
/// Section headers of an image-judging prompt (one reasoning per image).
pub const PAIR_R1_HEADER: &str = "Reasoning 1:";
pub const PAIR_R2_HEADER: &str = "Reasoning 2:";
/// Caption line prefix of an image-judging prompt.
pub const PAIR_CAPTION_PREFIX: &str = "Caption: ";
/// Closing sentence of an image-judging prompt.
pub const PAIR_IMAGE_JUDGE_SENTENCE: &str =
    "Which image does the caption match? Answer with the number 1 or 2.";

/// Caption-judging prompt: one image's reasoning, both captions numbered,
/// pick the matching number. Text-only — the judge reads reasoning.
fn pair_text_cell_prompt(reasoning: &str, captions: &[String; 2], tpl: &PromptTemplateSet) -> String {
    [
        PAIR_REASONING_HEADER,
        reasoning,
        PAIR_MATCH_QUESTION,
        &format!("1. {}", captions[0]),
        &format!("2. {}", captions[1]),
        PAIR_TEXT_JUDGE_SENTENCE,
    ]
    .join(&tpl.slot_separator)
}

/// Image-judging prompt: both images' reasonings under numbered headers,
/// one caption, pick the matching number. The two candidate images are
/// present only through their reasonings.
fn pair_image_cell_prompt(reasonings: &[String; 2], caption: &str, tpl: &PromptTemplateSet) -> String {
    [
        PAIR_R1_HEADER,
        reasonings[0].as_str(),
        PAIR_R2_HEADER,
        reasonings[1].as_str(),
        &format!("{PAIR_CAPTION_PREFIX}{caption}"),
        PAIR_IMAGE_JUDGE_SENTENCE,
    ]
    .join(&tpl.slot_separator)
}

/// Run the image–caption pair protocol on one task.
///
/// Stage 1 runs the chosen variant once per image on a caption-matching
/// question, with the answer-extraction sentence removed so the output is
/// free-form reasoning rather than a bare letter. Stage 2 sends that
/// reasoning to the judge (the model backend unless a separate judge is
/// configured) four times: for each image, which caption matches (from
/// that image's reasoning); for each caption, which image matches (from
/// both reasonings). An unreadable judge verdict marks its cell
/// incorrect; it never aborts the task.
pub fn run_pair_protocol(
    task: &TaskInstance,
    variant: &Variant,
    injected: Option<&BTreeMap<String, String>>,
    backend: &dyn Backend,
    judge: Option<&dyn Backend>,
    tpl: &PromptTemplateSet,
    cfg: &PipelineCfg,
) -> RunRecord {
    let mut rec = RunRecord::skeleton(task, variant.kind, backend.id(), &cfg.config_hash);
    if let Err(e) = run_pair_inner(task, variant, injected, backend, judge, tpl, cfg, &mut rec) {
        rec.error = Some(e);
        rec.pair_cells = None;
    }
    rec.timings.total_ms =
        rec.timings.step1_ms.unwrap_or(0) + rec.timings.step2_ms.unwrap_or(0);
    rec
}

#[allow(clippy::too_many_arguments)]
fn run_pair_inner(
    task: &TaskInstance,
    variant: &Variant,
    injected: Option<&BTreeMap<String, String>>,
    backend: &dyn Backend,
    judge: Option<&dyn Backend>,
    tpl: &PromptTemplateSet,
    cfg: &PipelineCfg,
    rec: &mut RunRecord,
) -> Result<(), String> {
    let captions = task
        .captions
        .as_ref()
        .ok_or("pair task has no captions")?;
    if task.image_refs.len() != 2 {
        return Err(format!(
            "pair task needs exactly 2 images, got {}",
            task.image_refs.len()
        ));
    }
    let judge_backend = judge.unwrap_or(backend);

    // Reasoning prompts drop the extraction sentence: the judge needs
    // reasoning to read, not a letter.
    let mut reasoning_tpl = tpl.clone();
    reasoning_tpl.extraction_sentence = None;

    let mut reasonings: Vec<String> = Vec::with_capacity(2);
    let mut gen_digests: Vec<String> = Vec::new();
    let mut step1_ms = 0u64;
    for (k, image) in task.image_refs.iter().enumerate() {
        let pseudo = TaskInstance {
            task_id: format!("{}#img{}", task.task_id, k + 1),
            image_refs: vec![image.clone()],
            prompt: PAIR_MATCH_QUESTION.to_string(),
            options: Some(captions.to_vec()),
            gold: None,
            kind: TaskKind::Mcq,
            split_tag: None,
            captions: None,
        };
        let sub = run_task(&pseudo, variant, injected, backend, &reasoning_tpl, cfg);
        if let Some(e) = sub.error {
            return Err(format!("image {} reasoning: {e}", k + 1));
        }
        step1_ms += sub.timings.total_ms;
        rec.sg_truncated |= sub.sg_truncated;
        for d in [sub.step1_prompt_digest, sub.step2_prompt_digest].into_iter().flatten() {
            gen_digests.push(d);
        }
        reasonings.push(sub.step2_response);
    }
    rec.timings.step1_ms = Some(step1_ms);
    rec.step1_prompt_digest = Some(gen_digests.join("+"));
    rec.step1_response = Some(reasonings.join("\n---\n"));

    let reasonings: [String; 2] = [reasonings[0].clone(), reasonings[1].clone()];
    let mut judge_ms = 0u64;
    let mut judge_digests: Vec<String> = Vec::with_capacity(4);
    let mut judge_texts: Vec<String> = Vec::with_capacity(4);
    let mut judge_call = |rendered: String| -> Result<Option<usize>, String> {
        let prompt = AssembledPrompt {
            slots: Vec::new(),
            rendered_text: rendered,
            has_image: false,
        };
        let out = call_backend(judge_backend, &prompt, None, RequestTag::Judge, cfg.answer_token_budget, cfg)
            .map_err(|e| e.to_string())?;
        judge_ms += out.response.latency_ms;
        judge_digests.push(out.digest);
        let pick = extract_judge_digit(&out.response.text, 2);
        judge_texts.push(out.response.text);
        Ok(pick)
    };

    let mut cells = PairCells {
        caption_given_image: [false, false],
        image_given_caption: [false, false],
    };
    for (k, reasoning) in reasonings.iter().enumerate() {
        let rendered = pair_text_cell_prompt(reasoning, captions, tpl);
        cells.caption_given_image[k] = judge_call(rendered)? == Some(k);
    }
    for (k, caption) in captions.iter().enumerate() {
        let rendered = pair_image_cell_prompt(&reasonings, caption, tpl);
        cells.image_given_caption[k] = judge_call(rendered)? == Some(k);
    }

    rec.timings.step2_ms = Some(judge_ms);
    rec.step2_prompt_digest = Some(judge_digests.join("+"));
    rec.step2_response = judge_texts.join("\n---\n");
    rec.extracted = ExtractedAnswer {
        kind: AnswerKind::Freeform,
        value: format!(
            "text={}{} image={}{}",
            cells.caption_given_image[0] as u8,
            cells.caption_given_image[1] as u8,
            cells.image_given_caption[0] as u8,
            cells.image_given_caption[1] as u8
        ),
        method: Some(ExtractionMethod::Judge),
    };
    rec.pair_cells = Some(cells);
    Ok(())
}

// ---------------------------------------------------------------------------
// Injected scene graphs
// ---------------------------------------------------------------------------

/// Harvest the answering-stage scene-graph text of each task from a prior
/// run's records file: the canonical form when the record parsed a graph,
/// the raw generation output otherwise. Re-running with these injected
/// reproduces the source run's answering prompts byte for byte.
pub fn harvest_sg_map(records_path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let file = std::fs::File::open(records_path).map_err(|e| PipelineError::Io {
        context: format!("opening {}", records_path.display()),
        detail: e.to_string(),
    })?;
    let mut map = BTreeMap::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Io {
            context: format!("reading {}", records_path.display()),
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line).map_err(|e| PipelineError::BadRecords {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        let text = match (&rec.parsed_sg, &rec.step1_response) {
            (Some(g), _) => canonical_serialize(g),
            (None, Some(raw)) => raw.clone(),
            (None, None) => continue,
        };
        map.insert(rec.task_id, text);
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

fn run_one(
    task: &TaskInstance,
    variant: &Variant,
    injected: Option<&BTreeMap<String, String>>,
    backend: &dyn Backend,
    judge: Option<&dyn Backend>,
    tpl: &PromptTemplateSet,
    cfg: &PipelineCfg,
) -> RunRecord {
    match task.kind {
        TaskKind::Pair => run_pair_protocol(task, variant, injected, backend, judge, tpl, cfg),
        _ => run_task(task, variant, injected, backend, tpl, cfg),
    }
}

/// Run every task, invoking `on_record` on the calling thread as each
/// record lands (in completion order), and return the records in task
/// order. With `cfg.workers <= 1` execution is strictly sequential in
/// task order; otherwise a fixed pool of threads pulls tasks from a shared
/// cursor.
#[allow(clippy::too_many_arguments)]
pub fn run_tasks<F>(
    tasks: &[TaskInstance],
    variant: &Variant,
    injected: Option<&BTreeMap<String, String>>,
    backend: &dyn Backend,
    judge: Option<&dyn Backend>,
    tpl: &PromptTemplateSet,
    cfg: &PipelineCfg,
    mut on_record: F,
) -> Vec<RunRecord>
where
    F: FnMut(&RunRecord),
{
    if cfg.workers <= 1 {
        let mut out = Vec::with_capacity(tasks.len());
        for task in tasks {
            let rec = run_one(task, variant, injected, backend, judge, tpl, cfg);
            on_record(&rec);
            out.push(rec);
        }
        return out;
    }

    let cursor = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
    let mut slots: Vec<Option<RunRecord>> = (0..tasks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(tasks.len().max(1)) {
            let tx = tx.clone();
            let cursor = &cursor;
            scope.spawn(move || loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let rec = run_one(&tasks[i], variant, injected, backend, judge, tpl, cfg);
                if tx.send((i, rec)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        while let Ok((i, rec)) = rx.recv() {
            on_record(&rec);
            slots[i] = Some(rec);
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every task produces a record"))
        .collect()
}
