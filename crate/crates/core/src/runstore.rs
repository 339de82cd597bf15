//! On-disk layout of a run and crash-safe persistence.
//!
//! A run lives in `<root>/<run_id>/` as four files: `manifest.json`
//! (identity, config hash, timestamps, counts), `records.jsonl` (one
//! record per finished task, appended and flushed as it lands),
//! `report.json`, and `report.csv`. The records file is the source of
//! truth — reports and the manifest are derivable from it.
//!
//! Interrupted runs resume: reopening tolerates exactly one torn line at
//! the records tail (a cut-off write from a crash), drops it, and reports
//! which tasks already completed so the driver can run only the rest.
//! Corruption anywhere else is an error, never silently skipped. Manifest
//! writes go through a temp file and rename so a crash cannot leave a
//! half-written manifest.

use crate::bench::{render_report_csv, render_report_json, ScoreReport};
use crate::pipeline::RunRecord;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Identity and progress of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub variant: String,
    pub backend_id: String,
    /// Planned task count.
    pub n_tasks: usize,
    /// Records written so far (refreshed on finish).
    pub n_records: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn new(
        run_id: impl Into<String>,
        config_hash: impl Into<String>,
        variant: impl Into<String>,
        backend_id: impl Into<String>,
        n_tasks: usize,
    ) -> Self {
        RunManifest {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            variant: variant.into(),
            backend_id: backend_id.into(),
            n_tasks,
            n_records: 0,
            started_at: now_rfc3339(),
            finished_at: None,
        }
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{context}: {detail}")]
    Io { context: String, detail: String },
    #[error("run already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("no run at {0}")]
    NotFound(PathBuf),
    #[error("run was started with config hash {found}, current config hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("task {0:?} already has a record in this run")]
    DuplicateTask(String),
    #[error("records file line {line}: {detail}")]
    CorruptRecords { line: usize, detail: String },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> StoreError {
    let context = context.into();
    move |e| StoreError::Io {
        context,
        detail: e.to_string(),
    }
}

/// An open run directory with an append-only records writer.
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    records: std::fs::File,
    seen: HashSet<String>,
}

impl RunStore {
    /// Lay out a fresh run directory. Refuses to touch an existing run.
    pub fn create(root: &Path, manifest: RunManifest) -> Result<RunStore, StoreError> {
        let dir = root.join(&manifest.run_id);
        std::fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        if dir.join("manifest.json").exists() || dir.join("records.jsonl").exists() {
            return Err(StoreError::AlreadyExists(dir));
        }
        write_manifest(&dir, &manifest)?;
        let records_path = dir.join("records.jsonl");
        let records = std::fs::OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&records_path)
            .map_err(io_err(format!("creating {}", records_path.display())))?;
        Ok(RunStore {
            dir,
            manifest,
            records,
            seen: HashSet::new(),
        })
    }

    /// Reopen an interrupted (or finished) run for more appends. The
    /// config hash must match the one the run started with. A torn final
    /// line in the records file — the footprint of a crash mid-write — is
    /// dropped; the set of task ids that already have records comes back
    /// so the caller can skip them.
    pub fn open_or_resume(
        root: &Path,
        run_id: &str,
        expected_config_hash: &str,
    ) -> Result<RunStore, StoreError> {
        let dir = root.join(run_id);
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(StoreError::NotFound(dir));
        }
        let raw = std::fs::read_to_string(&manifest_path)
            .map_err(io_err(format!("reading {}", manifest_path.display())))?;
        let mut manifest: RunManifest = serde_json::from_str(&raw).map_err(|e| StoreError::Io {
            context: format!("parsing {}", manifest_path.display()),
            detail: e.to_string(),
        })?;
        if manifest.config_hash != expected_config_hash {
            return Err(StoreError::ConfigMismatch {
                expected: expected_config_hash.to_string(),
                found: manifest.config_hash.clone(),
            });
        }
        manifest.finished_at = None;

        let records_path = dir.join("records.jsonl");
        let (existing, keep_bytes) = if records_path.exists() {
            read_records_tolerant(&records_path)?
        } else {
            (Vec::new(), 0)
        };
        let records = std::fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&records_path)
            .map_err(io_err(format!("opening {}", records_path.display())))?;
        records
            .set_len(keep_bytes)
            .map_err(io_err("truncating torn records tail"))?;
        let mut records = records;
        use std::io::Seek;
        records
            .seek(std::io::SeekFrom::End(0))
            .map_err(io_err("seeking records end"))?;

        let seen: HashSet<String> = existing.iter().map(|r| r.task_id.clone()).collect();
        write_manifest(&dir, &manifest)?;
        Ok(RunStore {
            dir,
            manifest,
            records,
            seen,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Task ids that already have a record.
    pub fn completed(&self) -> &HashSet<String> {
        &self.seen
    }

    /// Append one record and flush it to disk before returning.
    pub fn append_record(&mut self, rec: &RunRecord) -> Result<(), StoreError> {
        if self.seen.contains(&rec.task_id) {
            return Err(StoreError::DuplicateTask(rec.task_id.clone()));
        }
        let line = serde_json::to_string(rec).map_err(|e| StoreError::Io {
            context: "serializing record".to_string(),
            detail: e.to_string(),
        })?;
        self.records
            .write_all(line.as_bytes())
            .and_then(|_| self.records.write_all(b"\n"))
            .and_then(|_| self.records.flush())
            .map_err(io_err("appending record"))?;
        self.seen.insert(rec.task_id.clone());
        Ok(())
    }

    /// Stamp the finish time and final record count into the manifest.
    pub fn finish(&mut self) -> Result<(), StoreError> {
        self.manifest.n_records = self.seen.len();
        self.manifest.finished_at = Some(now_rfc3339());
        write_manifest(&self.dir, &self.manifest)
    }

    /// Write `report.json` and `report.csv` through the shared renderers.
    pub fn write_report(&self, report: &ScoreReport) -> Result<(), StoreError> {
        let json_path = self.dir.join("report.json");
        std::fs::write(&json_path, render_report_json(report))
            .map_err(io_err(format!("writing {}", json_path.display())))?;
        let csv_path = self.dir.join("report.csv");
        std::fs::write(&csv_path, render_report_csv(report))
            .map_err(io_err(format!("writing {}", csv_path.display())))
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), StoreError> {
    let final_path = dir.join("manifest.json");
    let tmp_path = dir.join("manifest.json.tmp");
    let mut body = serde_json::to_string_pretty(manifest).map_err(|e| StoreError::Io {
        context: "serializing manifest".to_string(),
        detail: e.to_string(),
    })?;
    body.push('\n');
    std::fs::write(&tmp_path, body).map_err(io_err(format!("writing {}", tmp_path.display())))?;
    std::fs::rename(&tmp_path, &final_path)
        .map_err(io_err(format!("renaming into {}", final_path.display())))
}

/// Read a records file strictly: every line must parse, torn tails
/// included. Errors name the offending 1-based line.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, StoreError> {
    let file = std::fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line).map_err(|e| StoreError::CorruptRecords {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Read a records file tolerating one torn FINAL line (dropped), and
/// return the records plus the byte length of the clean prefix. A bad
/// line anywhere else is still an error.
pub fn read_records_tolerant(path: &Path) -> Result<(Vec<RunRecord>, u64), StoreError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    let mut clean_end = 0u64;
    let mut cursor = 0usize;
    let mut line_no = 0usize;
    while cursor < raw.len() {
        line_no += 1;
        let rest = &raw[cursor..];
        let (line, consumed, complete) = match rest.find('\n') {
            Some(nl) => (&rest[..nl], nl + 1, true),
            None => (rest, rest.len(), false),
        };
        let next_cursor = cursor + consumed;
        if line.trim().is_empty() {
            cursor = next_cursor;
            if complete {
                clean_end = cursor as u64;
            }
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(rec) => {
                if !complete {
                    // Parsed but unterminated: treat as torn, drop it.
                    break;
                }
                out.push(rec);
                cursor = next_cursor;
                clean_end = cursor as u64;
            }
            Err(e) => {
                let is_last_line = next_cursor >= raw.len();
                if is_last_line {
                    break;
                }
                return Err(StoreError::CorruptRecords {
                    line: line_no,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok((out, clean_end))
}
