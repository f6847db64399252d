//! On-disk transcript store: one JSONL file per cell plus a run manifest.
//!
//! Every file is replaced atomically (write to a temp file in the same
//! directory, then rename), so an interrupted run leaves each cell either
//! complete or absent.

use crate::orchestrator::{CellKey, ExperimentGrid, Transcript, HARNESS_VERSION};
use crate::profile::TemplateSet;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CELLS_DIR: &str = "cells";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("store at {path} belongs to a different configuration (digest {found}, expected {expected})")]
    ConfigMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("no manifest in {0}")]
    MissingManifest(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Pending,
    /// Complete, every game valid.
    Done,
    /// Complete, at least one game ended in a protocol violation.
    Invalid,
}

impl CellStatus {
    pub fn is_complete(self) -> bool {
        self != CellStatus::Pending
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub key: CellKey,
    pub file: String,
    pub status: CellStatus,
    pub games: u32,
    pub invalid_games: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub harness_version: String,
    pub template_checksum: String,
    pub games_per_cell: u32,
    pub total_games: usize,
    pub cells: Vec<ManifestCell>,
}

impl RunManifest {
    pub fn pending(&self) -> impl Iterator<Item = &ManifestCell> {
        self.cells.iter().filter(|c| !c.status.is_complete())
    }

    pub fn is_complete(&self) -> bool {
        self.pending().next().is_none()
    }
}

#[derive(Debug)]
pub struct TranscriptStore {
    root: PathBuf,
    run_id: String,
    config_digest: String,
    manifest: Mutex<Option<RunManifest>>,
}

impl TranscriptStore {
    /// Opens (creating if needed) a store for a run of the given configuration.
    pub fn open(
        root: impl Into<PathBuf>,
        run_id: impl Into<String>,
        config_digest: impl Into<String>,
    ) -> Result<Self, StoreError> {
        let root = root.into();
        let cells = root.join(CELLS_DIR);
        fs::create_dir_all(&cells).map_err(io_err(&cells))?;
        let manifest = read_manifest(&root)?;
        Ok(TranscriptStore {
            root,
            run_id: run_id.into(),
            config_digest: config_digest.into(),
            manifest: Mutex::new(manifest),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Option<RunManifest> {
        self.manifest.lock().expect("manifest lock").clone()
    }

    pub fn cell_path(&self, key: &CellKey) -> PathBuf {
        self.root.join(CELLS_DIR).join(cell_file(key))
    }

    /// Writes the manifest for `grid`, or checks an existing one matches.
    pub fn begin(
        &self,
        grid: &ExperimentGrid,
        cells: &[CellKey],
        templates: &TemplateSet,
    ) -> Result<(), StoreError> {
        let mut guard = self.manifest.lock().expect("manifest lock");
        if let Some(existing) = guard.as_ref() {
            if existing.config_digest != self.config_digest {
                return Err(StoreError::ConfigMismatch {
                    path: self.root.clone(),
                    found: existing.config_digest.clone(),
                    expected: self.config_digest.clone(),
                });
            }
            return Ok(());
        }
        let manifest = RunManifest {
            run_id: self.run_id.clone(),
            config_digest: self.config_digest.clone(),
            harness_version: HARNESS_VERSION.to_string(),
            template_checksum: templates.checksum().to_string(),
            games_per_cell: grid.games_per_cell,
            total_games: cells.len() * grid.games_per_cell as usize,
            cells: cells
                .iter()
                .map(|key| ManifestCell {
                    key: key.clone(),
                    file: format!("{CELLS_DIR}/{}", cell_file(key)),
                    status: CellStatus::Pending,
                    games: 0,
                    invalid_games: 0,
                })
                .collect(),
        };
        write_json_atomic(&self.root.join(MANIFEST_FILE), &manifest)?;
        *guard = Some(manifest);
        Ok(())
    }

    /// Returns the cell's transcripts if the manifest marks it complete and
    /// the file holds exactly `games` well-formed games.
    pub fn load_complete_cell(
        &self,
        key: &CellKey,
        games: u32,
    ) -> Result<Option<Vec<Transcript>>, StoreError> {
        let complete = self
            .manifest
            .lock()
            .expect("manifest lock")
            .as_ref()
            .and_then(|m| m.cells.iter().find(|c| &c.key == key))
            .is_some_and(|c| c.status.is_complete());
        if !complete {
            return Ok(None);
        }
        let path = self.cell_path(key);
        if !path.exists() {
            return Ok(None);
        }
        let transcripts = read_cell(&path)?;
        let indices_ok = transcripts
            .iter()
            .enumerate()
            .all(|(i, t)| t.game_index == i as u32 && &t.cell == key);
        if transcripts.len() != games as usize || !indices_ok {
            return Ok(None);
        }
        Ok(Some(transcripts))
    }

    /// Atomically writes a finished cell and marks it in the manifest.
    pub fn write_cell(&self, key: &CellKey, transcripts: &[Transcript]) -> Result<(), StoreError> {
        let mut body = String::new();
        for t in transcripts {
            body.push_str(&serde_json::to_string(t).expect("transcript serializes"));
            body.push('\n');
        }
        write_atomic(&self.cell_path(key), body.as_bytes())?;

        let invalid = transcripts.iter().filter(|t| !t.valid).count() as u32;
        let mut guard = self.manifest.lock().expect("manifest lock");
        if let Some(manifest) = guard.as_mut() {
            if let Some(cell) = manifest.cells.iter_mut().find(|c| &c.key == key) {
                cell.games = transcripts.len() as u32;
                cell.invalid_games = invalid;
                cell.status = if invalid == 0 {
                    CellStatus::Done
                } else {
                    CellStatus::Invalid
                };
            }
            write_json_atomic(&self.root.join(MANIFEST_FILE), manifest)?;
        }
        Ok(())
    }
}

/// Loads every completed cell of the run stored at `root`, in manifest order.
pub fn load_run(root: impl AsRef<Path>) -> Result<(RunManifest, Vec<Transcript>), StoreError> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?.ok_or_else(|| StoreError::MissingManifest(root.to_path_buf()))?;
    let mut transcripts = Vec::new();
    for cell in manifest.cells.iter().filter(|c| c.status.is_complete()) {
        transcripts.extend(read_cell(&root.join(&cell.file))?);
    }
    Ok((manifest, transcripts))
}

pub fn read_manifest(root: &Path) -> Result<Option<RunManifest>, StoreError> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| StoreError::Malformed {
            path,
            message: e.to_string(),
        })
}

pub fn read_cell(path: &Path) -> Result<Vec<Transcript>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| StoreError::Malformed {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(t);
    }
    Ok(out)
}

fn cell_file(key: &CellKey) -> String {
    format!("{}.jsonl", key.file_stem())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut body = serde_json::to_string_pretty(value).expect("value serializes");
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}
