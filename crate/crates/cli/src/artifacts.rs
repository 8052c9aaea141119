//! Run directories: the manifest, atomic artifact writes and digests of
//! everything read or written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cpodrift::graph::ConceptGraph;
use cpodrift::trace::{parse_records, Markers, TraceRecord, Vocabulary};
use cpodrift::PolicyParams;

use crate::args::{Command, RecordInput};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "cpodrift-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub status: RunStatus,
    pub command: Command,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::in_file(path, e))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(CliError::in_file(
                path,
                "not a cpodrift manifest of a supported version",
            ));
        }
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Internal(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut file = fs::File::create(&tmp).map_err(|e| CliError::write(&tmp, e))?;
    file.write_all(bytes)
        .map_err(|e| CliError::write(&tmp, e))?;
    file.sync_all().map_err(|e| CliError::write(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| CliError::write(path, e))
}

/// One command invocation writing into one output directory.
pub struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    /// Creates the output directory and records the command before any input
    /// is touched.
    pub fn begin(out: &Path, command: &Command) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::write(out, e))?;
        let run = Run {
            out: out.to_path_buf(),
            manifest: Manifest {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                status: RunStatus::Running,
                command: command.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        };
        run.save_manifest()?;
        Ok(run)
    }

    fn save_manifest(&self) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| CliError::Internal(format!("manifest does not serialize: {e}")))?;
        text.push('\n');
        write_atomic(&self.out.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read_input(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::read(path, e))?;
        self.manifest.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        String::from_utf8(bytes).map_err(|e| CliError::in_file(path, e))
    }

    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.out.join(name), bytes)?;
        self.manifest.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Internal(format!("{name} does not serialize: {e}")))?;
        text.push('\n');
        self.write_output(name, text.as_bytes())
    }

    pub fn write_json_lines<T: Serialize>(
        &mut self,
        name: &str,
        items: &[T],
    ) -> Result<(), CliError> {
        let mut text = String::new();
        for item in items {
            text.push_str(
                &serde_json::to_string(item)
                    .map_err(|e| CliError::Internal(format!("{name} does not serialize: {e}")))?,
            );
            text.push('\n');
        }
        self.write_output(name, text.as_bytes())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in rows {
            writer
                .serialize(row)
                .map_err(|e| CliError::Internal(format!("{name} row does not serialize: {e}")))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| CliError::Internal(format!("{name}: {e}")))?;
        self.write_output(name, &bytes)
    }

    pub fn finish(mut self) -> Result<Manifest, CliError> {
        self.manifest.status = RunStatus::Complete;
        self.save_manifest()?;
        Ok(self.manifest)
    }

    pub fn load_graph(&mut self, path: &Path) -> Result<ConceptGraph, CliError> {
        let text = self.read_input(path)?;
        let (graph, report) =
            ConceptGraph::load_and_validate(&text).map_err(|e| CliError::in_file(path, e))?;
        for warning in &report.warnings {
            log::warn!("{}: {warning}", path.display());
        }
        Ok(graph)
    }

    pub fn load_vocab(&mut self, input: &RecordInput) -> Result<Vocabulary, CliError> {
        let path = input.vocab.clone().unwrap_or_else(|| {
            input
                .records
                .parent()
                .unwrap_or(Path::new("."))
                .join("vocab.txt")
        });
        let text = self.read_input(&path)?;
        Vocabulary::parse(&text).map_err(|e| CliError::in_file(&path, e))
    }

    pub fn load_records(
        &mut self,
        path: &Path,
        markers: Markers,
    ) -> Result<Vec<TraceRecord>, CliError> {
        let text = self.read_input(path)?;
        parse_records(text.as_bytes(), markers).map_err(|e| CliError::in_file(path, e))
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<PolicyParams, CliError> {
        let text = self.read_input(path)?;
        PolicyParams::from_checkpoint_json(&text).map_err(|e| CliError::in_file(path, e))
    }
}
