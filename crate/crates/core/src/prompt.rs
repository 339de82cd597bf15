//! Byte-exact prompt assembly.
//!
//! Every prompt the harness ever sends is built here, from immutable
//! inputs, with a pinned slot order and a pinned separator, so that a
//! prompt rendered today matches the golden file rendered at review time.
//! The two-step protocol is: step 1 asks for a scene graph of the image
//! conditioned on the question (`[image][task input][SG instruction]`),
//! step 2 answers the question with the scene graph in context
//! (`[image][SG][context][task input][extraction]` by default; an
//! alternative order swapping the context sentence and the task input is
//! selectable). The zero-shot chain-of-thought baseline and the ablation
//! variants (object list, no-JSON wording, caption, random SG, injected
//! SG, masked image, direct answering) are all expressed as variants over
//! the same slot machinery.

use crate::bench::TaskInstance;
use crate::sg::{Lexicons, SGObject, SGRelation, SceneGraph};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default scene-graph generation instruction (step 1).
pub const DEFAULT_SG_INSTRUCTION: &str = "For the provided image and its associated question, generate a scene graph in JSON format that includes the following: 1. Objects that are relevant to answering the question. 2. Object attributes that are relevant to answering the question. 3. Object relationships that are relevant to answering the question.";

/// Step-2 context sentence placed between the scene graph and the question.
pub const DEFAULT_CONTEXT_SENTENCE: &str =
    "Use the image and scene graph as context and answer the following question:";

/// Step-2 answer-extraction sentence for multiple-choice tasks.
pub const DEFAULT_EXTRACTION_SENTENCE: &str =
    "Answer with the option's letter from the given choices directly";

/// Trigger sentence for the zero-shot chain-of-thought baseline.
pub const DEFAULT_ZS_COT_TRIGGER: &str = "Let's think step-by-step.";

/// Step-1 instruction for the object-list ablation: objects only, no
/// attributes or relations.
pub const OBJECT_LIST_INSTRUCTION: &str = "For the provided image and its associated question, generate a JSON list of the objects that are relevant to answering the question.";

/// Step-1 instruction for the no-JSON ablation: the default instruction
/// with the JSON-format clause removed.
pub const NO_JSON_INSTRUCTION: &str = "For the provided image and its associated question, generate a scene graph that includes the following: 1. Objects that are relevant to answering the question. 2. Object attributes that are relevant to answering the question. 3. Object relationships that are relevant to answering the question.";

/// Step-1 instruction for the caption ablation: same informational content
/// as a scene graph, but prose instead of JSON.
pub const CAPTION_INSTRUCTION: &str = "For the provided image and its associated question, write a caption for the image that describes the objects that are relevant to answering the question, their attributes, and the relationships between them.";

/// Step-2 slot orders. The default places the context sentence before the
/// task input; the alternative places it after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SlotOrder {
    /// `[image][SG][context][task input][extraction]`
    #[serde(rename = "sg_c_p_e")]
    #[default]
    SgCPE,
    /// `[image][SG][task input][context][extraction]`
    #[serde(rename = "sg_p_c_e")]
    SgPCE,
}

impl SlotOrder {
    pub fn id(&self) -> &'static str {
        match self {
            SlotOrder::SgCPE => "sg_c_p_e",
            SlotOrder::SgPCE => "sg_p_c_e",
        }
    }
}

/// The configurable sentences and layout used by the assemblers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    /// Step-1 scene-graph generation instruction.
    pub sg_gen_instruction: String,
    /// Step-2 context sentence.
    pub context_sentence: String,
    /// Step-2 extraction sentence; `None` drops the slot entirely.
    pub extraction_sentence: Option<String>,
    /// Zero-shot chain-of-thought trigger.
    pub zs_cot_trigger: String,
    /// Step-2 slot order.
    pub slot_order_step2: SlotOrder,
    /// Separator between rendered slot payloads.
    pub slot_separator: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            sg_gen_instruction: DEFAULT_SG_INSTRUCTION.to_string(),
            context_sentence: DEFAULT_CONTEXT_SENTENCE.to_string(),
            extraction_sentence: Some(DEFAULT_EXTRACTION_SENTENCE.to_string()),
            zs_cot_trigger: DEFAULT_ZS_COT_TRIGGER.to_string(),
            slot_order_step2: SlotOrder::default(),
            slot_separator: "\n".to_string(),
        }
    }
}

/// Prompt slots. `I` is the image (empty text payload), `PIn` the rendered
/// task input (question plus labeled options), `SIn` the step-1
/// instruction, `Sg` the scene-graph text, `C` the context sentence, `E`
/// the extraction sentence, `CoT` the chain-of-thought trigger, and `R1`
/// first-stage reasoning carried into an extraction call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotTag {
    I,
    PIn,
    SIn,
    Sg,
    C,
    E,
    CoT,
    R1,
}

/// A fully rendered prompt: the ordered slots it was built from, the text
/// actually sent, and whether an image rides along.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub slots: Vec<(SlotTag, String)>,
    pub rendered_text: String,
    pub has_image: bool,
}

impl AssembledPrompt {
    fn from_slots(slots: Vec<(SlotTag, String)>, has_image: bool, separator: &str) -> Self {
        debug_assert!(
            {
                let mut tags: Vec<SlotTag> = slots.iter().map(|(t, _)| *t).collect();
                tags.dedup();
                tags.len() == slots.len()
            },
            "slot tags must be unique"
        );
        debug_assert_eq!(has_image, slots.iter().any(|(t, _)| *t == SlotTag::I));
        let rendered_text = slots
            .iter()
            .map(|(_, payload)| payload.as_str())
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join(separator);
        AssembledPrompt {
            slots,
            rendered_text,
            has_image,
        }
    }

    pub fn tag_sequence(&self) -> Vec<SlotTag> {
        self.slots.iter().map(|(t, _)| *t).collect()
    }
}

/// The execution variants the pipeline understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Two-step scene-graph prompting (the method under test).
    Ccot,
    /// Single direct-answer call.
    BaselineDirect,
    /// Zero-shot chain-of-thought: reason, then extract.
    ZsCot,
    /// Step 1 asks for a bare object list instead of a scene graph.
    ObjectList,
    /// Step 1 asks for a scene graph without the JSON-format clause.
    NoJson,
    /// Step 1 asks for a prose caption with scene-graph content.
    CaptionCot,
    /// Step 2 receives a seeded random scene graph, no step 1.
    RandomSg,
    /// Step 2 is sent without the image.
    NoImage,
    /// Step 2 receives scene graphs harvested from a prior run, no step 1.
    InjectedSg,
}

impl VariantKind {
    pub const ALL: [VariantKind; 9] = [
        VariantKind::Ccot,
        VariantKind::BaselineDirect,
        VariantKind::ZsCot,
        VariantKind::ObjectList,
        VariantKind::NoJson,
        VariantKind::CaptionCot,
        VariantKind::RandomSg,
        VariantKind::NoImage,
        VariantKind::InjectedSg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Ccot => "ccot",
            VariantKind::BaselineDirect => "baseline_direct",
            VariantKind::ZsCot => "zs_cot",
            VariantKind::ObjectList => "object_list",
            VariantKind::NoJson => "no_json",
            VariantKind::CaptionCot => "caption_cot",
            VariantKind::RandomSg => "random_sg",
            VariantKind::NoImage => "no_image",
            VariantKind::InjectedSg => "injected_sg",
        }
    }

    /// Whether the variant runs a scene-graph (or reasoning-artifact)
    /// generation call before the answering call.
    pub fn has_step1(&self) -> bool {
        matches!(
            self,
            VariantKind::Ccot
                | VariantKind::ObjectList
                | VariantKind::NoJson
                | VariantKind::CaptionCot
                | VariantKind::NoImage
        )
    }
}

impl std::str::FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let known = VariantKind::ALL.map(|k| k.as_str()).join(", ");
                format!("unknown variant {s:?}; expected one of: {known}")
            })
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind-specific settings. `seed` feeds the random-SG variant; `sg_source`
/// points the injected-SG variant at a prior run's records file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct VariantParams {
    pub seed: Option<u64>,
    pub sg_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub kind: VariantKind,
    #[serde(default)]
    pub params: VariantParams,
}

impl Variant {
    pub fn new(kind: VariantKind) -> Self {
        Variant {
            kind,
            params: VariantParams::default(),
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::new(VariantKind::Ccot)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("variant {0} has no such assembly stage")]
    UnsupportedVariant(VariantKind),
    #[error("scene-graph text is required but empty")]
    MissingSceneGraph,
    #[error("reasoning text is required but empty")]
    MissingReasoning,
}

/// Render the task input: the question, then one labeled option per line.
pub fn render_task_input(task: &TaskInstance) -> String {
    let mut out = task.prompt.clone();
    if let Some(options) = &task.options {
        for (i, option) in options.iter().enumerate() {
            out.push('\n');
            out.push(option_label(i));
            out.push_str(". ");
            out.push_str(option);
        }
    }
    out
}

/// Label for the i-th option: `A`, `B`, ...
pub fn option_label(index: usize) -> char {
    (b'A' + index as u8) as char
}

fn extraction_slot(task: &TaskInstance, tpl: &PromptTemplateSet) -> Option<String> {
    match (&tpl.extraction_sentence, &task.options) {
        (Some(e), Some(options)) if !options.is_empty() => Some(e.clone()),
        _ => None,
    }
}

/// Assemble the step-1 (scene-graph generation) prompt:
/// `[image][task input][instruction]`, with the instruction chosen by the
/// variant. Variants that skip step 1 are rejected.
pub fn assemble_step1(
    task: &TaskInstance,
    tpl: &PromptTemplateSet,
    variant: &Variant,
) -> Result<AssembledPrompt, PromptError> {
    let instruction = match variant.kind {
        VariantKind::Ccot | VariantKind::NoImage => tpl.sg_gen_instruction.clone(),
        VariantKind::ObjectList => OBJECT_LIST_INSTRUCTION.to_string(),
        VariantKind::NoJson => NO_JSON_INSTRUCTION.to_string(),
        VariantKind::CaptionCot => CAPTION_INSTRUCTION.to_string(),
        other => return Err(PromptError::UnsupportedVariant(other)),
    };
    let slots = vec![
        (SlotTag::I, String::new()),
        (SlotTag::PIn, render_task_input(task)),
        (SlotTag::SIn, instruction),
    ];
    Ok(AssembledPrompt::from_slots(slots, true, &tpl.slot_separator))
}

/// Assemble the step-2 (response generation) prompt around the given
/// scene-graph text. The image slot is dropped for the masked-image
/// variant; everything textual stays identical.
pub fn assemble_step2(
    task: &TaskInstance,
    sg_text: &str,
    tpl: &PromptTemplateSet,
    variant: &Variant,
) -> Result<AssembledPrompt, PromptError> {
    match variant.kind {
        VariantKind::BaselineDirect | VariantKind::ZsCot => {
            return Err(PromptError::UnsupportedVariant(variant.kind))
        }
        _ => {}
    }
    if sg_text.trim().is_empty() {
        return Err(PromptError::MissingSceneGraph);
    }
    let has_image = variant.kind != VariantKind::NoImage;
    let sg_payload = sg_text.trim_end_matches('\n').to_string();
    let mut slots: Vec<(SlotTag, String)> = Vec::with_capacity(5);
    if has_image {
        slots.push((SlotTag::I, String::new()));
    }
    slots.push((SlotTag::Sg, sg_payload));
    match tpl.slot_order_step2 {
        SlotOrder::SgCPE => {
            slots.push((SlotTag::C, tpl.context_sentence.clone()));
            slots.push((SlotTag::PIn, render_task_input(task)));
        }
        SlotOrder::SgPCE => {
            slots.push((SlotTag::PIn, render_task_input(task)));
            slots.push((SlotTag::C, tpl.context_sentence.clone()));
        }
    }
    if let Some(e) = extraction_slot(task, tpl) {
        slots.push((SlotTag::E, e));
    }
    Ok(AssembledPrompt::from_slots(slots, has_image, &tpl.slot_separator))
}

/// Assemble the single direct-answer prompt: `[image][task input][extraction]`.
pub fn assemble_direct(task: &TaskInstance, tpl: &PromptTemplateSet) -> AssembledPrompt {
    let mut slots = vec![
        (SlotTag::I, String::new()),
        (SlotTag::PIn, render_task_input(task)),
    ];
    if let Some(e) = extraction_slot(task, tpl) {
        slots.push((SlotTag::E, e));
    }
    AssembledPrompt::from_slots(slots, true, &tpl.slot_separator)
}

/// The two stages of the zero-shot chain-of-thought baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZsCotStage {
    Reason,
    Extract,
}

/// Assemble a zero-shot chain-of-thought prompt. The reasoning stage is
/// `[image][task input][trigger]`; the extraction stage replays the task
/// with the first stage's reasoning and the extraction sentence:
/// `[image][task input][reasoning][extraction]`.
pub fn assemble_zs_cot(
    task: &TaskInstance,
    tpl: &PromptTemplateSet,
    stage: ZsCotStage,
    reasoning: Option<&str>,
) -> Result<AssembledPrompt, PromptError> {
    match stage {
        ZsCotStage::Reason => {
            let slots = vec![
                (SlotTag::I, String::new()),
                (SlotTag::PIn, render_task_input(task)),
                (SlotTag::CoT, tpl.zs_cot_trigger.clone()),
            ];
            Ok(AssembledPrompt::from_slots(slots, true, &tpl.slot_separator))
        }
        ZsCotStage::Extract => {
            let reasoning = reasoning.map(str::trim).unwrap_or("");
            if reasoning.is_empty() {
                return Err(PromptError::MissingReasoning);
            }
            let mut slots = vec![
                (SlotTag::I, String::new()),
                (SlotTag::PIn, render_task_input(task)),
                (SlotTag::R1, reasoning.to_string()),
            ];
            if let Some(e) = extraction_slot(task, tpl) {
                slots.push((SlotTag::E, e));
            }
            Ok(AssembledPrompt::from_slots(slots, true, &tpl.slot_separator))
        }
    }
}

/// Generate a deterministic random scene graph from the lexicons: 3–8
/// distinct objects with 1–2 attributes each and 2–6 distinct relations
/// among them. Independent of any task content.
pub fn make_random_sg(seed: u64, lexicons: &Lexicons) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.gen_range(3..=8usize.min(lexicons.objects.len()));
    let names = sample_distinct(&mut rng, &lexicons.objects, n_objects);
    let objects: Vec<SGObject> = names
        .iter()
        .map(|name| {
            let n_attrs = rng.gen_range(1..=2usize.min(lexicons.attributes.len()));
            let attrs = sample_distinct(&mut rng, &lexicons.attributes, n_attrs);
            SGObject {
                name: (*name).clone(),
                attributes: attrs.into_iter().cloned().collect(),
            }
        })
        .collect();

    let n_relations = rng.gen_range(2..=6usize);
    let mut relations: Vec<SGRelation> = Vec::with_capacity(n_relations);
    let mut seen: std::collections::HashSet<(usize, usize, usize)> = std::collections::HashSet::new();
    let mut attempts = 0;
    while relations.len() < n_relations && attempts < 1000 {
        attempts += 1;
        let s = rng.gen_range(0..objects.len());
        let o = rng.gen_range(0..objects.len());
        if s == o {
            continue;
        }
        let p = rng.gen_range(0..lexicons.predicates.len());
        if !seen.insert((s, p, o)) {
            continue;
        }
        relations.push(SGRelation::new(
            objects[s].name.clone(),
            lexicons.predicates[p].clone(),
            objects[o].name.clone(),
        ));
    }
    SceneGraph::new(objects, relations)
}

/// Draw `n` distinct elements from `pool` by partial Fisher–Yates over
/// indices; deterministic given the RNG state.
fn sample_distinct<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], n: usize) -> Vec<&'a String> {
    debug_assert!(n <= pool.len());
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| &pool[i]).collect()
}
