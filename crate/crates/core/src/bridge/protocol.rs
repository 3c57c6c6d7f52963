//! On-disk job format shared by the bridge and every segmenter.
//!
//! A job is a directory. The bridge writes `job.json`, the segmenter is
//! invoked with the directory as its only extra argument and answers with
//! `checkpoints.json` (train), `out/<case_id>.json/.raw` bundles (predict) or
//! `handshake.json` (handshake).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SegmenterError;
use crate::io::BundlePaths;

pub const PROTOCOL_VERSION: u32 = 1;
pub const JOB_FILE: &str = "job.json";
pub const CHECKPOINTS_FILE: &str = "checkpoints.json";
pub const HANDSHAKE_FILE: &str = "handshake.json";
pub const OUT_DIR: &str = "out";
/// Id the last checkpoint of every train job must carry.
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Handshake,
    Train,
    Predict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Masks,
    #[default]
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCase {
    pub case_id: String,
    /// Bundle stem of the input image.
    pub image: PathBuf,
    /// Test-time transform already applied to `image`, informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tta: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub protocol_version: u32,
    pub command: Command,
    #[serde(default)]
    pub cases: Vec<JobCase>,
    /// Label bundle stem per training case.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, PathBuf>,
    /// Training cases whose labels are pseudo-labels.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pseudo_cases: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_fractions: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<String>,
    /// Train job directory holding `checkpoint_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit: Option<Emit>,
    /// Checkpoint to start training from; `null` trains from scratch.
    #[serde(default)]
    pub init_checkpoint: Option<String>,
}

impl Job {
    pub fn handshake() -> Job {
        Job {
            protocol_version: PROTOCOL_VERSION,
            command: Command::Handshake,
            cases: Vec::new(),
            labels: BTreeMap::new(),
            pseudo_cases: Vec::new(),
            config: serde_json::Value::Null,
            checkpoint_fractions: None,
            checkpoint_id: None,
            checkpoint_dir: None,
            emit: None,
            init_checkpoint: None,
        }
    }

    pub fn load(job_dir: &Path) -> Result<Job, SegmenterError> {
        let path = job_dir.join(JOB_FILE);
        let bytes = fs::read(&path).map_err(|e| SegmenterError::protocol(format!("{}: {e}", path.display())))?;
        let job: Job =
            serde_json::from_slice(&bytes).map_err(|e| SegmenterError::protocol(format!("{}: {e}", path.display())))?;
        job.validate()?;
        Ok(job)
    }

    /// Structural checks per command.
    pub fn validate(&self) -> Result<(), SegmenterError> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(SegmenterError::protocol(format!(
                "protocol version {} (expected {PROTOCOL_VERSION})",
                self.protocol_version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(SegmenterError::protocol(format!("duplicate case {:?} in job", c.case_id)));
            }
        }
        match self.command {
            Command::Handshake => Ok(()),
            Command::Train => {
                let fr = self
                    .checkpoint_fractions
                    .as_ref()
                    .ok_or_else(|| SegmenterError::protocol("train job without checkpoint_fractions"))?;
                crate::selection::validate_fractions(fr).map_err(|e| SegmenterError::protocol(e.to_string()))?;
                for c in &self.cases {
                    if !self.labels.contains_key(&c.case_id) {
                        return Err(SegmenterError::protocol(format!("train case {:?} has no label", c.case_id)));
                    }
                }
                for p in &self.pseudo_cases {
                    if !seen.contains(p.as_str()) {
                        return Err(SegmenterError::protocol(format!("pseudo case {p:?} is not a train case")));
                    }
                }
                Ok(())
            }
            Command::Predict => {
                if self.checkpoint_id.is_none() || self.checkpoint_dir.is_none() {
                    return Err(SegmenterError::protocol("predict job without checkpoint_id/checkpoint_dir"));
                }
                if self.emit.is_none() {
                    return Err(SegmenterError::protocol("predict job without emit"));
                }
                Ok(())
            }
        }
    }

    pub fn is_pseudo(&self, case_id: &str) -> bool {
        self.pseudo_cases.iter().any(|p| p == case_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub id: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointsFile {
    pub checkpoints: Vec<CheckpointEntry>,
}

impl CheckpointsFile {
    pub fn load(job_dir: &Path) -> Result<CheckpointsFile, SegmenterError> {
        read_reply(&job_dir.join(CHECKPOINTS_FILE))
    }

    /// Checks the reply against the fractions that were requested.
    pub fn validate(&self, requested: &[f64]) -> Result<(), SegmenterError> {
        let got: Vec<f64> = self.checkpoints.iter().map(|c| c.fraction).collect();
        if got.len() != requested.len() || got.iter().zip(requested).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(SegmenterError::protocol(format!(
                "checkpoint fractions {got:?} do not match requested {requested:?}"
            )));
        }
        match self.checkpoints.last() {
            Some(c) if c.id == FINAL_CHECKPOINT => {}
            _ => return Err(SegmenterError::protocol(format!("last checkpoint must be {FINAL_CHECKPOINT:?}"))),
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.checkpoints {
            if c.id.is_empty() || !ids.insert(c.id.as_str()) {
                return Err(SegmenterError::protocol(format!("bad or duplicate checkpoint id {:?}", c.id)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.checkpoints.iter().any(|c| c.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: u32,
    pub concurrent_predict: bool,
    /// Whether predict honours `emit: probabilities`.
    #[serde(default = "yes")]
    pub probabilities: bool,
}

fn yes() -> bool {
    true
}

impl Handshake {
    pub fn load(job_dir: &Path) -> Result<Handshake, SegmenterError> {
        let h: Handshake = read_reply(&job_dir.join(HANDSHAKE_FILE))?;
        if h.protocol_version != PROTOCOL_VERSION {
            return Err(SegmenterError::protocol(format!("segmenter speaks protocol {}", h.protocol_version)));
        }
        Ok(h)
    }
}

fn read_reply<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SegmenterError> {
    let bytes = fs::read(path).map_err(|_| SegmenterError::protocol(format!("missing reply {}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| SegmenterError::protocol(format!("{}: {e}", path.display())))
}

/// Bundle paths of a predict output.
pub fn output_paths(job_dir: &Path, case_id: &str) -> BundlePaths {
    BundlePaths::from_stem(job_dir.join(OUT_DIR).join(case_id))
}
