//! Helpers shared by the golden-prompt and acceptance test targets.
#![allow(dead_code)]

use ccot_core::backend::{BackendRequest, BackendResponse, FnBackend, RequestTag};
use ccot_core::bench::{TaskInstance, TaskKind};
use ccot_core::pipeline::{run_task, PipelineCfg};
use ccot_core::prompt::{PromptTemplateSet, SlotOrder, Variant, VariantKind};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// The scene graph the scripted backend returns for step 1, and the text
/// injected for the SG-injection variant.
pub const FIXTURE_SG: &str = "{\n  \"objects\": [\n    {\"name\": \"cup\", \"attributes\": [\"red\"]},\n    {\"name\": \"table\", \"attributes\": []}\n  ],\n  \"relationships\": [\n    {\"subject\": \"cup\", \"predicate\": \"on\", \"object\": \"table\"}\n  ]\n}\n";

/// The one task every golden prompt is rendered from.
pub fn fixture_task() -> TaskInstance {
    TaskInstance {
        task_id: "golden-task".to_string(),
        image_refs: vec!["synth://scene-golden".to_string()],
        prompt: "Which of the following statements about the scene is correct?".to_string(),
        options: Some(vec![
            "the cup is on the table".to_string(),
            "the table is on the cup".to_string(),
        ]),
        gold: Some("A".to_string()),
        kind: TaskKind::Mcq,
        split_tag: None,
        captions: None,
    }
}

pub fn golden_dir(order: SlotOrder) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/goldens/prompts")
        .join(order.id())
}

pub fn golden_path(dir: &Path, kind: VariantKind, idx: usize, tag: RequestTag) -> PathBuf {
    dir.join(format!("{}.{idx}.{}.txt", kind.as_str(), tag.as_str()))
}

/// Run the fixture task through one variant against a scripted backend and
/// return every request in call order as (tag, rendered_text).
pub fn capture_prompts(kind: VariantKind, order: SlotOrder) -> Vec<(RequestTag, String)> {
    let captured: Mutex<Vec<(RequestTag, String)>> = Mutex::new(Vec::new());
    let recorder = FnBackend::new("golden-spy", |req: &BackendRequest| {
        captured
            .lock()
            .unwrap()
            .push((req.request_tag, req.rendered_text.clone()));
        let text = match req.request_tag {
            RequestTag::Step1 => FIXTURE_SG.to_string(),
            RequestTag::ZscotReason => {
                "The cup is on the table, so the first statement is right.".to_string()
            }
            _ => "A".to_string(),
        };
        Ok(BackendResponse::of_text(text))
    });

    let tpl = PromptTemplateSet {
        slot_order_step2: order,
        ..PromptTemplateSet::default()
    };
    let mut injected = BTreeMap::new();
    injected.insert("golden-task".to_string(), FIXTURE_SG.to_string());
    let record = run_task(
        &fixture_task(),
        &Variant::new(kind),
        Some(&injected),
        &recorder,
        &tpl,
        &PipelineCfg::default(),
    );
    assert!(
        record.error.is_none(),
        "{kind:?}/{order:?}: {:?}",
        record.error
    );
    captured.into_inner().unwrap()
}
