use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::bridge::CheckpointSet;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::MetricsReport;
use crate::preprocess::IntensityStats;
use crate::selection::{FilterReport, StabilityRecord};

pub const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Pending,
    Trained,
    Predicted,
    Selected,
    StudentTrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Outcome of dataset reconstruction and preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedDataset {
    /// Manifest of the preprocessed dataset.
    pub manifest: PathBuf,
    pub label_filter: FilterReport,
    pub blur_filter: Option<FilterReport>,
    pub stats: IntensityStats,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub checkpoints: CheckpointSet,
    pub labeled: usize,
    pub pseudo: usize,
    pub heldout: Vec<CaseMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    /// 1-based.
    pub index: usize,
    pub status: IterationStatus,
    #[serde(default)]
    pub teacher: Option<CheckpointSet>,
    /// Prediction mask stems per checkpoint id, per case.
    #[serde(default)]
    pub predictions: BTreeMap<String, BTreeMap<String, PathBuf>>,
    #[serde(default)]
    pub records: Vec<StabilityRecord>,
    #[serde(default)]
    pub selected: Vec<String>,
    #[serde(default)]
    pub pseudo_labels: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub student: Option<ModelState>,
}

impl IterationState {
    pub fn new(index: usize) -> Self {
        IterationState {
            index,
            status: IterationStatus::Pending,
            teacher: None,
            predictions: BTreeMap::new(),
            records: Vec::new(),
            selected: Vec::new(),
            pseudo_labels: BTreeMap::new(),
            student: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub version: u32,
    pub config: PipelineConfig,
    #[serde(default)]
    pub prepared: Option<PreparedDataset>,
    #[serde(default)]
    pub baseline: Option<ModelState>,
    #[serde(default)]
    pub iterations: Vec<IterationState>,
}

/// The next unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "iteration", rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Baseline,
    Teacher(usize),
    Predict(usize),
    Select(usize),
    Student(usize),
    Done,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Prepare => write!(f, "prepare"),
            Stage::Baseline => write!(f, "baseline"),
            Stage::Teacher(k) => write!(f, "iteration {k}: teacher"),
            Stage::Predict(k) => write!(f, "iteration {k}: predict"),
            Stage::Select(k) => write!(f, "iteration {k}: select"),
            Stage::Student(k) => write!(f, "iteration {k}: student"),
            Stage::Done => write!(f, "done"),
        }
    }
}

impl PipelineState {
    pub fn new(config: PipelineConfig) -> Self {
        PipelineState {
            version: STATE_VERSION,
            config,
            prepared: None,
            baseline: None,
            iterations: Vec::new(),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.config.output_root.join(STATE_FILE)
    }

    pub fn next_stage(&self) -> Stage {
        if self.prepared.is_none() {
            return Stage::Prepare;
        }
        if self.baseline.is_none() {
            return Stage::Baseline;
        }
        match self.iterations.last() {
            Some(it) if it.status != IterationStatus::StudentTrained => match it.status {
                IterationStatus::Pending => Stage::Teacher(it.index),
                IterationStatus::Trained => Stage::Predict(it.index),
                IterationStatus::Predicted => Stage::Select(it.index),
                _ => Stage::Student(it.index),
            },
            _ if self.iterations.len() < self.config.iterations => Stage::Teacher(self.iterations.len() + 1),
            _ => Stage::Done,
        }
    }

    pub fn completed_rows(&self) -> usize {
        self.baseline.iter().count() + self.iterations.iter().filter(|it| it.student.is_some()).count()
    }

    pub fn save(&self) -> Result<()> {
        io::write_json(&self.path(), self)
    }

    /// Loads and checks the invariants a resumed run relies on.
    pub fn load(path: &Path) -> Result<PipelineState> {
        let state: PipelineState = io::read_json(path).map_err(|e| Error::StateCorruption(e.to_string()))?;
        state.check()?;
        Ok(state)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::StateCorruption(m));
        if self.version != STATE_VERSION {
            return bad(format!("state version {} (expected {STATE_VERSION})", self.version));
        }
        if self.prepared.is_none() && (self.baseline.is_some() || !self.iterations.is_empty()) {
            return bad("baseline or iterations recorded before the dataset was prepared".into());
        }
        if self.baseline.is_none() && !self.iterations.is_empty() {
            return bad("iterations recorded before the baseline".into());
        }
        if self.iterations.len() > self.config.iterations {
            return bad(format!("{} iterations recorded, {} configured", self.iterations.len(), self.config.iterations));
        }
        let unlabeled: BTreeSet<&str> = self
            .prepared
            .iter()
            .flat_map(|p| p.unlabeled.iter().map(String::as_str))
            .collect();
        let n = self.iterations.len();
        for (i, it) in self.iterations.iter().enumerate() {
            if it.index != i + 1 {
                return bad(format!("iteration {} stored at position {}", it.index, i + 1));
            }
            if i + 1 < n && it.status != IterationStatus::StudentTrained {
                return bad(format!("iteration {} is incomplete but later iterations exist", it.index));
            }
            let s = it.status;
            let need = |cond: bool, what: &str| -> Result<()> {
                if cond {
                    Ok(())
                } else {
                    Err(Error::StateCorruption(format!("iteration {} is {s:?} but {what}", it.index)))
                }
            };
            need(s < IterationStatus::Trained || it.teacher.is_some(), "has no teacher")?;
            need(s < IterationStatus::Predicted || !it.predictions.is_empty() || unlabeled.is_empty(), "has no predictions")?;
            need(s >= IterationStatus::Selected || it.selected.is_empty(), "selected cases early")?;
            need(s == IterationStatus::StudentTrained || it.student.is_none(), "has a student early")?;
            need(s < IterationStatus::StudentTrained || it.student.is_some(), "has no student")?;
            for id in &it.selected {
                if !unlabeled.contains(id.as_str()) {
                    return bad(format!("iteration {} selected {id:?}, which is not unlabeled", it.index));
                }
                if !it.pseudo_labels.contains_key(id) {
                    return bad(format!("iteration {} selected {id:?} without a pseudo-label", it.index));
                }
            }
            let flagged: BTreeSet<&str> = it.records.iter().filter(|r| r.selected).map(|r| r.case_id.as_str()).collect();
            let chosen: BTreeSet<&str> = it.selected.iter().map(String::as_str).collect();
            if s >= IterationStatus::Selected && flagged != chosen {
                return bad(format!("iteration {} selection disagrees with its records", it.index));
            }
        }
        Ok(())
    }
}
