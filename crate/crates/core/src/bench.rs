//! Benchmark loading and metric computation.
//!
//! Three JSONL task shapes are supported: multiple-choice (`mcq-jsonl`),
//! paired image–caption matching (`pairs-jsonl`), and free-form VQA
//! (`vqa-jsonl`). Loading is strict and atomic: every schema problem,
//! duplicate id, and missing image in the file is collected and reported
//! together, and nothing is returned unless the whole file is clean.
//!
//! Scorers are pure functions over run records. Correctness is recomputed
//! from each record's extracted answer and stored gold, so a report can
//! always be re-derived from a records file alone.

use crate::pipeline::{AnswerKind, ExtractedAnswer, PairCells, RunRecord};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Task shapes accepted by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mcq,
    Pair,
    VqaFreeform,
}

/// Dataset file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    #[serde(rename = "mcq-jsonl")]
    McqJsonl,
    #[serde(rename = "pairs-jsonl")]
    PairsJsonl,
    #[serde(rename = "vqa-jsonl")]
    VqaJsonl,
}

impl DatasetFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetFormat::McqJsonl => "mcq-jsonl",
            DatasetFormat::PairsJsonl => "pairs-jsonl",
            DatasetFormat::VqaJsonl => "vqa-jsonl",
        }
    }
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcq-jsonl" => Ok(DatasetFormat::McqJsonl),
            "pairs-jsonl" => Ok(DatasetFormat::PairsJsonl),
            "vqa-jsonl" => Ok(DatasetFormat::VqaJsonl),
            other => Err(format!(
                "unknown dataset format {other:?}; expected mcq-jsonl, pairs-jsonl, or vqa-jsonl"
            )),
        }
    }
}

/// One runnable unit of work: an image (or image pair), a prompt, and the
/// grading information for its kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    /// One entry normally, two for pair tasks. Entries with a scheme
    /// prefix (`synth://...`) are opaque pseudo references; plain entries
    /// are filesystem paths resolved at load time.
    pub image_refs: Vec<String>,
    pub prompt: String,
    pub options: Option<Vec<String>>,
    /// Option letter for multiple choice, answer text for free-form VQA.
    pub gold: Option<String>,
    pub kind: TaskKind,
    pub split_tag: Option<String>,
    /// Pair tasks only: the two candidate captions.
    pub captions: Option<[String; 2]>,
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct McqLine {
    id: String,
    image: String,
    question: String,
    options: Vec<String>,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PairsLine {
    id: String,
    images: Vec<String>,
    captions: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct VqaLine {
    id: String,
    image: String,
    question: String,
    answer: String,
}

/// A single problem found while loading a dataset file.
#[derive(Debug)]
pub enum LoadIssue {
    Schema { line: usize, detail: String },
    Duplicate { line: usize, task_id: String },
    MissingImage { task_id: String, path: PathBuf },
}

impl std::fmt::Display for LoadIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadIssue::Schema { line, detail } => write!(f, "line {line}: {detail}"),
            LoadIssue::Duplicate { line, task_id } => {
                write!(f, "line {line}: duplicate task id {task_id:?}")
            }
            LoadIssue::MissingImage { task_id, path } => {
                write!(f, "task {task_id:?}: image not found: {}", path.display())
            }
        }
    }
}

fn format_issues(issues: &[LoadIssue]) -> String {
    let mut out = String::new();
    for issue in issues {
        let _ = writeln!(out, "  {issue}");
    }
    out
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} has {n} issue(s):\n{listing}", path = path.display(), n = issues.len(), listing = format_issues(issues))]
    Invalid {
        path: PathBuf,
        issues: Vec<LoadIssue>,
    },
}

/// Load and validate a dataset file. Image paths are resolved against
/// `image_root` (default: the dataset file's directory); references with a
/// scheme (`synth://`, `http://`, `data:`) pass through unresolved and
/// unchecked. Tasks come back sorted by task id.
pub fn load_tasks(
    path: &Path,
    format: DatasetFormat,
    image_root: Option<&Path>,
) -> Result<Vec<TaskInstance>, LoadError> {
    let file = std::fs::File::open(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let default_root = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    let root = image_root.unwrap_or(&default_root);

    let mut tasks: Vec<TaskInstance> = Vec::new();
    let mut issues: Vec<LoadIssue> = Vec::new();
    let mut seen_ids: std::collections::HashSet<String> = std::collections::HashSet::new();

    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| LoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let task = match format {
            DatasetFormat::McqJsonl => parse_mcq_line(&line, line_no, &mut issues),
            DatasetFormat::PairsJsonl => parse_pairs_line(&line, line_no, &mut issues),
            DatasetFormat::VqaJsonl => parse_vqa_line(&line, line_no, &mut issues),
        };
        let Some(mut task) = task else { continue };
        if !seen_ids.insert(task.task_id.clone()) {
            issues.push(LoadIssue::Duplicate {
                line: line_no,
                task_id: task.task_id.clone(),
            });
            continue;
        }
        for image in task.image_refs.iter_mut() {
            if let Some(resolved) = resolve_image(image, root) {
                if !resolved.exists() {
                    issues.push(LoadIssue::MissingImage {
                        task_id: task.task_id.clone(),
                        path: resolved.clone(),
                    });
                }
                *image = resolved.to_string_lossy().into_owned();
            }
        }
        tasks.push(task);
    }

    if !issues.is_empty() {
        return Err(LoadError::Invalid {
            path: path.to_path_buf(),
            issues,
        });
    }
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(tasks)
}

/// Resolve a filesystem image reference against the root; `None` for
/// scheme-prefixed pseudo references, which pass through untouched.
fn resolve_image(image: &str, root: &Path) -> Option<PathBuf> {
    if image.contains("://") || image.starts_with("data:") {
        return None;
    }
    let p = Path::new(image);
    if p.is_absolute() {
        Some(p.to_path_buf())
    } else {
        Some(root.join(p))
    }
}

fn parse_mcq_line(line: &str, line_no: usize, issues: &mut Vec<LoadIssue>) -> Option<TaskInstance> {
    let parsed: McqLine = match serde_json::from_str(line) {
        Ok(p) => p,
        Err(e) => {
            issues.push(LoadIssue::Schema {
                line: line_no,
                detail: e.to_string(),
            });
            return None;
        }
    };
    if parsed.options.is_empty() {
        issues.push(LoadIssue::Schema {
            line: line_no,
            detail: "\"options\" must not be empty".to_string(),
        });
        return None;
    }
    if parsed.question.trim().is_empty() {
        issues.push(LoadIssue::Schema {
            line: line_no,
            detail: "\"question\" must not be empty".to_string(),
        });
        return None;
    }
    let answer = parsed.answer.trim().to_uppercase();
    let valid_letter = answer.len() == 1
        && answer
            .chars()
            .next()
            .map(|c| {
                c.is_ascii_uppercase() && ((c as u8 - b'A') as usize) < parsed.options.len()
            })
            .unwrap_or(false);
    if !valid_letter {
        issues.push(LoadIssue::Schema {
            line: line_no,
            detail: format!(
                "\"answer\" must be a single option letter A..{}, got {:?}",
                option_label_for(parsed.options.len() - 1),
                parsed.answer
            ),
        });
        return None;
    }
    Some(TaskInstance {
        task_id: parsed.id,
        image_refs: vec![parsed.image],
        prompt: parsed.question,
        options: Some(parsed.options),
        gold: Some(answer),
        kind: TaskKind::Mcq,
        split_tag: parsed.split,
        captions: None,
    })
}

fn option_label_for(index: usize) -> char {
    (b'A' + index as u8) as char
}

fn parse_pairs_line(line: &str, line_no: usize, issues: &mut Vec<LoadIssue>) -> Option<TaskInstance> {
    let parsed: PairsLine = match serde_json::from_str(line) {
        Ok(p) => p,
        Err(e) => {
            issues.push(LoadIssue::Schema {
                line: line_no,
                detail: e.to_string(),
            });
            return None;
        }
    };
    if parsed.images.len() != 2 || parsed.captions.len() != 2 {
        issues.push(LoadIssue::Schema {
            line: line_no,
            detail: format!(
                "pair tasks need exactly 2 images and 2 captions, got {} and {}",
                parsed.images.len(),
                parsed.captions.len()
            ),
        });
        return None;
    }
    let mut captions = parsed.captions.into_iter();
    Some(TaskInstance {
        task_id: parsed.id,
        image_refs: parsed.images,
        prompt: String::new(),
        options: None,
        gold: None,
        kind: TaskKind::Pair,
        split_tag: None,
        captions: Some([captions.next().unwrap(), captions.next().unwrap()]),
    })
}

fn parse_vqa_line(line: &str, line_no: usize, issues: &mut Vec<LoadIssue>) -> Option<TaskInstance> {
    let parsed: VqaLine = match serde_json::from_str(line) {
        Ok(p) => p,
        Err(e) => {
            issues.push(LoadIssue::Schema {
                line: line_no,
                detail: e.to_string(),
            });
            return None;
        }
    };
    if parsed.question.trim().is_empty() || parsed.answer.trim().is_empty() {
        issues.push(LoadIssue::Schema {
            line: line_no,
            detail: "\"question\" and \"answer\" must not be empty".to_string(),
        });
        return None;
    }
    Some(TaskInstance {
        task_id: parsed.id,
        image_refs: vec![parsed.image],
        prompt: parsed.question,
        options: None,
        gold: Some(parsed.answer),
        kind: TaskKind::VqaFreeform,
        split_tag: None,
        captions: None,
    })
}

/// Write tasks out as mcq-jsonl (the synth-world generator's task dump).
pub fn write_mcq_tasks(path: &Path, tasks: &[TaskInstance]) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for task in tasks {
        let line = McqLine {
            id: task.task_id.clone(),
            image: task.image_refs.first().cloned().unwrap_or_default(),
            question: task.prompt.clone(),
            options: task.options.clone().unwrap_or_default(),
            answer: task.gold.clone().unwrap_or_default(),
            split: task.split_tag.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Numerator/denominator behind a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub num: usize,
    pub den: usize,
}

impl Counts {
    pub fn fraction(&self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub fraction: f64,
    pub num: usize,
    pub den: usize,
}

/// Pair-protocol metrics: caption-given-image, image-given-caption, and
/// their conjunction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub text: f64,
    pub image: f64,
    pub group: f64,
    pub text_counts: Counts,
    pub image_counts: Counts,
    pub group_counts: Counts,
}

/// The harness's metric bundle. `overall` is the size-weighted accuracy
/// (for pairs: the group score); `split_mean_unweighted` averages the
/// per-split fractions without size weighting, reported alongside because
/// aggregation weighting is a presentation choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub kind: String,
    pub overall: f64,
    pub counts: Counts,
    pub per_split: BTreeMap<String, SplitScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_mean_unweighted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PairScores>,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("records mix task kinds; expected only {expected:?}")]
    MixedKinds { expected: TaskKind },
    #[error("pair record {0:?} has no cell outcomes")]
    IncompleteMatrix(String),
}

/// Recompute a record's correctness from its extracted answer and gold.
/// Multiple choice requires an exact letter hit; free-form VQA compares
/// normalized strings; abstentions are always incorrect. `None` when the
/// task carries no gold.
pub fn answer_is_correct(kind: TaskKind, extracted: &ExtractedAnswer, gold: Option<&str>) -> Option<bool> {
    let gold = gold?;
    match kind {
        TaskKind::Mcq => Some(extracted.kind == AnswerKind::Letter && extracted.value == gold),
        TaskKind::VqaFreeform => Some(
            extracted.kind != AnswerKind::Abstain
                && normalize_answer(&extracted.value) == normalize_answer(gold),
        ),
        TaskKind::Pair => None,
    }
}

/// Free-form answer normalization: lowercase, ASCII punctuation to spaces,
/// articles dropped, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mapped: String = lowered
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    mapped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn split_scores(outcomes: &[(Option<&str>, bool)]) -> (BTreeMap<String, SplitScore>, Option<f64>) {
    let mut by_split: BTreeMap<String, Counts> = BTreeMap::new();
    for (split, correct) in outcomes {
        if let Some(tag) = split {
            let c = by_split.entry(tag.to_string()).or_insert(Counts { num: 0, den: 0 });
            c.den += 1;
            if *correct {
                c.num += 1;
            }
        }
    }
    let per_split: BTreeMap<String, SplitScore> = by_split
        .into_iter()
        .map(|(tag, c)| {
            (
                tag,
                SplitScore {
                    fraction: c.fraction(),
                    num: c.num,
                    den: c.den,
                },
            )
        })
        .collect();
    let mean = if per_split.is_empty() {
        None
    } else {
        Some(per_split.values().map(|s| s.fraction).sum::<f64>() / per_split.len() as f64)
    };
    (per_split, mean)
}

fn score_flat(records: &[RunRecord], expected: TaskKind, kind_name: &str) -> Result<ScoreReport, ScoreError> {
    if records.iter().any(|r| r.task_kind != expected) {
        return Err(ScoreError::MixedKinds { expected });
    }
    let outcomes: Vec<(Option<&str>, bool)> = records
        .iter()
        .map(|r| {
            let correct =
                answer_is_correct(r.task_kind, &r.extracted, r.gold.as_deref()).unwrap_or(false);
            (r.split_tag.as_deref(), correct)
        })
        .collect();
    let counts = Counts {
        num: outcomes.iter().filter(|(_, c)| *c).count(),
        den: outcomes.len(),
    };
    let (per_split, split_mean_unweighted) = split_scores(&outcomes);
    Ok(ScoreReport {
        kind: kind_name.to_string(),
        overall: counts.fraction(),
        counts,
        per_split,
        split_mean_unweighted,
        pairs: None,
    })
}

/// Accuracy over multiple-choice records, overall and per split.
pub fn score_mcq(records: &[RunRecord]) -> Result<ScoreReport, ScoreError> {
    score_flat(records, TaskKind::Mcq, "mcq")
}

/// Normalized exact-match accuracy over free-form VQA records.
pub fn score_vqa_exact(records: &[RunRecord]) -> Result<ScoreReport, ScoreError> {
    score_flat(records, TaskKind::VqaFreeform, "vqa")
}

/// Pair metrics from bare cell matrices: per example, text requires both
/// caption-given-image cells, image requires both image-given-caption
/// cells, and group requires both of those.
pub fn score_pairs_from_cells(cells: &[PairCells]) -> ScoreReport {
    let den = cells.len();
    let mut text_num = 0;
    let mut image_num = 0;
    let mut group_num = 0;
    for m in cells {
        let text = m.caption_given_image[0] && m.caption_given_image[1];
        let image = m.image_given_caption[0] && m.image_given_caption[1];
        if text {
            text_num += 1;
        }
        if image {
            image_num += 1;
        }
        if text && image {
            group_num += 1;
        }
    }
    let text_counts = Counts { num: text_num, den };
    let image_counts = Counts { num: image_num, den };
    let group_counts = Counts { num: group_num, den };
    ScoreReport {
        kind: "pairs".to_string(),
        overall: group_counts.fraction(),
        counts: group_counts,
        per_split: BTreeMap::new(),
        split_mean_unweighted: None,
        pairs: Some(PairScores {
            text: text_counts.fraction(),
            image: image_counts.fraction(),
            group: group_counts.fraction(),
            text_counts,
            image_counts,
            group_counts,
        }),
    }
}

/// Pair metrics recomputed from run records.
pub fn score_pairs(records: &[RunRecord]) -> Result<ScoreReport, ScoreError> {
    if records.iter().any(|r| r.task_kind != TaskKind::Pair) {
        return Err(ScoreError::MixedKinds {
            expected: TaskKind::Pair,
        });
    }
    let mut cells = Vec::with_capacity(records.len());
    for r in records {
        let m = r
            .pair_cells
            .clone()
            .ok_or_else(|| ScoreError::IncompleteMatrix(r.task_id.clone()))?;
        cells.push(m);
    }
    Ok(score_pairs_from_cells(&cells))
}

/// Score records according to their (uniform) task kind.
pub fn score_records(records: &[RunRecord]) -> Result<ScoreReport, ScoreError> {
    match records.first().map(|r| r.task_kind) {
        None | Some(TaskKind::Mcq) => score_mcq(records),
        Some(TaskKind::Pair) => score_pairs(records),
        Some(TaskKind::VqaFreeform) => score_vqa_exact(records),
    }
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

/// Pinned JSON rendering of a report (pretty, trailing newline). Run-time
/// reports and re-scored reports go through this one function so they can
/// be compared byte for byte.
pub fn render_report_json(report: &ScoreReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serialization cannot fail");
    s.push('\n');
    s
}

/// Pinned CSV rendering: one row per metric, fractions at six decimals.
pub fn render_report_csv(report: &ScoreReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "split", "fraction", "num", "den"])
        .expect("csv write");
    let frac = |f: f64| format!("{f:.6}");
    w.write_record([
        "overall",
        "",
        &frac(report.overall),
        &report.counts.num.to_string(),
        &report.counts.den.to_string(),
    ])
    .expect("csv write");
    for (tag, s) in &report.per_split {
        w.write_record([
            "split",
            tag,
            &frac(s.fraction),
            &s.num.to_string(),
            &s.den.to_string(),
        ])
        .expect("csv write");
    }
    if let Some(mean) = report.split_mean_unweighted {
        w.write_record(["split_mean_unweighted", "", &frac(mean), "", ""])
            .expect("csv write");
    }
    if let Some(p) = &report.pairs {
        for (name, f, c) in [
            ("pairs_text", p.text, p.text_counts),
            ("pairs_image", p.image, p.image_counts),
            ("pairs_group", p.group, p.group_counts),
        ] {
            w.write_record([name, "", &frac(f), &c.num.to_string(), &c.den.to_string()])
                .expect("csv write");
        }
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
}

/// Human-readable summary for stdout.
pub fn render_summary_table(report: &ScoreReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "overall                  {:>8.4}  ({}/{})",
        report.overall, report.counts.num, report.counts.den
    );
    for (tag, s) in &report.per_split {
        let _ = writeln!(out, "split {:<18} {:>8.4}  ({}/{})", tag, s.fraction, s.num, s.den);
    }
    if let Some(mean) = report.split_mean_unweighted {
        let _ = writeln!(out, "split mean (unweighted)  {mean:>8.4}");
    }
    if let Some(p) = &report.pairs {
        let _ = writeln!(out, "pairs text               {:>8.4}", p.text);
        let _ = writeln!(out, "pairs image              {:>8.4}", p.image);
        let _ = writeln!(out, "pairs group              {:>8.4}", p.group);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{ExtractionMethod, Timings};
    use crate::prompt::VariantKind;
    use std::io::Write;

    fn mcq_record(task_id: &str, split: Option<&str>, answer: &str, gold: &str) -> RunRecord {
        let extracted = if answer.is_empty() {
            ExtractedAnswer {
                kind: AnswerKind::Abstain,
                value: String::new(),
                method: None,
            }
        } else {
            ExtractedAnswer {
                kind: AnswerKind::Letter,
                value: answer.to_string(),
                method: Some(ExtractionMethod::DirectLetter),
            }
        };
        RunRecord {
            task_id: task_id.to_string(),
            variant: VariantKind::Ccot,
            task_kind: TaskKind::Mcq,
            split_tag: split.map(|s| s.to_string()),
            gold: Some(gold.to_string()),
            step1_prompt_digest: None,
            step1_response: None,
            parsed_sg: None,
            sg_parse: None,
            sg_truncated: false,
            step2_prompt_digest: None,
            step2_response: answer.to_string(),
            extracted,
            correct: None,
            pair_cells: None,
            timings: Timings::default(),
            backend_id: "test".to_string(),
            config_hash: "t".to_string(),
            error: None,
        }
    }

    #[test]
    fn mcq_accuracy_arithmetic() {
        let records = vec![
            mcq_record("t1", None, "A", "A"),
            mcq_record("t2", None, "B", "A"),
            mcq_record("t3", None, "A", "A"),
            mcq_record("t4", None, "A", "A"),
        ];
        let report = score_mcq(&records).unwrap();
        assert_eq!(report.overall, 0.75);
        assert_eq!(report.counts, Counts { num: 3, den: 4 });
    }

    #[test]
    fn all_abstain_scores_zero() {
        let records = vec![mcq_record("t1", None, "", "A"), mcq_record("t2", None, "", "B")];
        let report = score_mcq(&records).unwrap();
        assert_eq!(report.overall, 0.0);
    }

    #[test]
    fn split_aggregation_and_unweighted_mean() {
        let records = vec![
            mcq_record("t1", Some("SR"), "A", "A"),
            mcq_record("t2", Some("SR"), "B", "A"),
            mcq_record("t3", Some("VR"), "A", "A"),
            mcq_record("t4", Some("VR"), "A", "A"),
        ];
        let report = score_mcq(&records).unwrap();
        assert_eq!(report.overall, 0.75);
        assert_eq!(report.per_split["SR"].fraction, 0.5);
        assert_eq!(report.per_split["VR"].fraction, 1.0);
        assert_eq!(report.split_mean_unweighted, Some(0.75));
    }

    #[test]
    fn scoring_is_order_invariant() {
        let mut records = vec![
            mcq_record("t1", Some("SR"), "A", "A"),
            mcq_record("t2", Some("SR"), "B", "A"),
            mcq_record("t3", Some("VR"), "A", "A"),
        ];
        let before = score_mcq(&records).unwrap();
        records.reverse();
        let after = score_mcq(&records).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn mixed_kinds_is_an_error() {
        let mut records = vec![mcq_record("t1", None, "A", "A")];
        records.push(RunRecord {
            task_kind: TaskKind::Pair,
            ..mcq_record("t2", None, "A", "A")
        });
        assert!(matches!(
            score_mcq(&records),
            Err(ScoreError::MixedKinds { .. })
        ));
    }

    #[test]
    fn pair_fixture_matches_hand_computation() {
        // Hand-enumerated: (1,1,1), (1,0,0), (0,1,0), (0,0,0).
        let cells = vec![
            PairCells {
                caption_given_image: [true, true],
                image_given_caption: [true, true],
            },
            PairCells {
                caption_given_image: [true, true],
                image_given_caption: [true, false],
            },
            PairCells {
                caption_given_image: [false, true],
                image_given_caption: [true, true],
            },
            PairCells {
                caption_given_image: [false, false],
                image_given_caption: [false, true],
            },
        ];
        let report = score_pairs_from_cells(&cells);
        let p = report.pairs.unwrap();
        assert_eq!(p.text, 0.5);
        assert_eq!(p.image, 0.5);
        assert_eq!(p.group, 0.25);
        assert_eq!(report.overall, 0.25);
    }

    #[test]
    fn group_never_exceeds_text_or_image() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.gen_range(1..8);
            let cells: Vec<PairCells> = (0..n)
                .map(|_| PairCells {
                    caption_given_image: [rng.gen(), rng.gen()],
                    image_given_caption: [rng.gen(), rng.gen()],
                })
                .collect();
            let p = score_pairs_from_cells(&cells).pairs.unwrap();
            assert!(p.group <= p.text.min(p.image) + 1e-12);
        }
    }

    #[test]
    fn vqa_normalization_rules() {
        assert_eq!(normalize_answer("The Frisbee."), "frisbee");
        assert_eq!(normalize_answer("a red frisbee"), "red frisbee");
        assert_ne!(normalize_answer("a red frisbee"), normalize_answer("frisbee"));
        assert_eq!(normalize_answer("  An   owl! "), "owl");
    }

    #[test]
    fn vqa_exact_match_fractions() {
        let mut records: Vec<RunRecord> = Vec::new();
        let answers = [
            ("The Frisbee.", "frisbee", true),
            ("a red frisbee", "frisbee", false),
            ("owl", "owl", true),
            ("two", "2", false),
            ("no idea", "kite", false),
        ];
        for (i, (resp, gold, _)) in answers.iter().enumerate() {
            let mut r = mcq_record(&format!("v{i}"), None, "", gold);
            r.task_kind = TaskKind::VqaFreeform;
            r.extracted = ExtractedAnswer {
                kind: AnswerKind::Freeform,
                value: resp.to_string(),
                method: None,
            };
            records.push(r);
        }
        let report = score_vqa_exact(&records).unwrap();
        assert_eq!(report.overall, 0.4);
    }

    #[test]
    fn load_mcq_happy_path_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"id":"q2","image":"synth://s2","question":"Q2?","options":["x","y"],"answer":"B","split":"SR"}}"#).unwrap();
        writeln!(f, r#"{{"id":"q1","image":"synth://s1","question":"Q1?","options":["cat","dog"],"answer":"b"}}"#).unwrap();
        let tasks = load_tasks(&path, DatasetFormat::McqJsonl, None).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].task_id, "q1");
        assert_eq!(tasks[0].gold.as_deref(), Some("B"));
        assert_eq!(tasks[1].split_tag.as_deref(), Some("SR"));
    }

    #[test]
    fn load_is_atomic_and_collects_issues() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"id":"q1","image":"synth://s1","question":"Q?","options":["a","b"]}}"#).unwrap();
        writeln!(f, r#"{{"id":"q2","image":"synth://s1","question":"Q?","options":["a","b"],"answer":"C"}}"#).unwrap();
        writeln!(f, r#"{{"id":"q3","image":"synth://s1","question":"Q?","options":["a","b"],"answer":"A","bogus":1}}"#).unwrap();
        writeln!(f, r#"{{"id":"q3","image":"synth://s1","question":"Q?","options":["a","b"],"answer":"A"}}"#).unwrap();
        writeln!(f, r#"{{"id":"q3","image":"synth://s1","question":"Q?","options":["a","b"],"answer":"A"}}"#).unwrap();
        let err = load_tasks(&path, DatasetFormat::McqJsonl, None).unwrap_err();
        match err {
            LoadError::Invalid { issues, .. } => {
                assert_eq!(issues.len(), 4);
                assert!(issues[0].to_string().contains("answer"));
                assert!(issues[1].to_string().contains("answer"));
                assert!(issues[2].to_string().contains("bogus"));
                assert!(issues[3].to_string().contains("duplicate"));
            }
            other => panic!("expected Invalid, got {other}"),
        }
    }

    #[test]
    fn missing_image_is_reported_and_present_image_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("ok.jpg");
        std::fs::write(&img, b"jpg").unwrap();
        let path = dir.path().join("tasks.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"id":"q1","image":"ok.jpg","question":"Q?","options":["a","b"],"answer":"A"}}"#).unwrap();
        writeln!(f, r#"{{"id":"q2","image":"gone.jpg","question":"Q?","options":["a","b"],"answer":"A"}}"#).unwrap();
        let err = load_tasks(&path, DatasetFormat::McqJsonl, None).unwrap_err();
        match err {
            LoadError::Invalid { issues, .. } => {
                assert_eq!(issues.len(), 1);
                assert!(issues[0].to_string().contains("gone.jpg"));
            }
            other => panic!("expected Invalid, got {other}"),
        }
    }

    #[test]
    fn load_pairs_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"id":"p1","images":["synth://a","synth://b"],"captions":["c0","c1"]}}"#).unwrap();
        writeln!(f, r#"{{"id":"p2","images":["synth://a"],"captions":["c0","c1"]}}"#).unwrap();
        let err = load_tasks(&path, DatasetFormat::PairsJsonl, None).unwrap_err();
        assert!(err.to_string().contains("exactly 2 images"));

        let path2 = dir.path().join("pairs-ok.jsonl");
        let mut f2 = std::fs::File::create(&path2).unwrap();
        writeln!(f2, r#"{{"id":"p1","images":["synth://a","synth://b"],"captions":["c0","c1"]}}"#).unwrap();
        let tasks = load_tasks(&path2, DatasetFormat::PairsJsonl, None).unwrap();
        assert_eq!(tasks[0].kind, TaskKind::Pair);
        assert_eq!(tasks[0].captions.as_ref().unwrap()[1], "c1");
    }

    #[test]
    fn report_rendering_is_stable() {
        let records = vec![
            mcq_record("t1", Some("SR"), "A", "A"),
            mcq_record("t2", Some("VR"), "B", "A"),
        ];
        let report = score_mcq(&records).unwrap();
        assert_eq!(render_report_json(&report), render_report_json(&report));
        let csv_text = render_report_csv(&report);
        assert!(csv_text.starts_with("metric,split,fraction,num,den\n"));
        assert!(csv_text.contains("overall,,0.500000,1,2"));
        assert!(csv_text.contains("split,SR,1.000000,1,1"));
    }
}
