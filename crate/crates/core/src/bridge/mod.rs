//! File-based bridge to pluggable segmenters.
//!
//! Every train or predict call becomes a job directory under
//! `<workdir>/jobs/`, named by a hash of its `job.json`. A job that already
//! finished (marked by `done`) is not run again, which is what makes interrupted
//! pipelines resumable. Outputs are validated before they are handed back.

mod external;
pub mod mock;
pub mod protocol;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{ensemble, majority_vote, tta_inverse, TtaTransform};
use crate::error::{Error, Result};
use crate::io::{self, BundlePaths, DType, LabelMode};
use crate::volume::{Mask3D, ProbabilityMap};

pub use external::ExternalCommand;
pub use mock::{NoisyOracleConfig, NoisyOracleMock, ThresholdConfig, ThresholdMock};
pub use protocol::{CheckpointEntry, Emit, Handshake, Job, JobCase};

#[derive(Debug, Error)]
pub enum SegmenterError {
    #[error("could not launch segmenter {program:?}: {reason}")]
    LaunchFailure { program: PathBuf, reason: String },
    #[error("segmenter exited with {} in {}", code.map_or("a signal".to_string(), |c| format!("code {c}")), job.display())]
    TrainerFailure { code: Option<i32>, job: PathBuf },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("unknown checkpoint {0:?}")]
    UnknownCheckpoint(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no ground truth for case {0:?}")]
    MissingGroundTruth(String),
    #[error("case {case_id:?}: output geometry does not match input ({reason})")]
    GeometryMismatch { case_id: String, reason: String },
    #[error("segmenter config: {0}")]
    InvalidConfig(String),
    #[error("segmenter data: {0}")]
    Data(String),
}

impl SegmenterError {
    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        SegmenterError::ProtocolViolation(msg.into())
    }

    pub(crate) fn data(e: impl std::fmt::Display) -> Self {
        SegmenterError::Data(e.to_string())
    }
}

/// Something that executes one job directory.
pub trait JobRunner: Send + Sync {
    fn run(&self, job_dir: &Path) -> Result<(), SegmenterError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterSpec {
    /// `program args… <job-dir>`.
    External {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
    ThresholdMock(ThresholdConfig),
    NoisyOracle(NoisyOracleConfig),
}

impl SegmenterSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SegmenterSpec::External { program, .. } if program.as_os_str().is_empty() => {
                Err(Error::Config("external segmenter needs a program".into()))
            }
            SegmenterSpec::NoisyOracle(c) => c.validate().map_err(|e| Error::Config(e.to_string())),
            _ => Ok(()),
        }
    }
}

/// Training options forwarded untouched to the segmenter.
pub fn default_passthrough() -> serde_json::Value {
    serde_json::json!({
        "batch_size": 2,
        "optimizer": "sgd",
        "learning_rate": 0.01,
        "epochs": 1000,
        "patch_size": [80, 160, 192],
        "loss": "ce+dice"
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSet {
    /// Train job directory that produced the checkpoints.
    pub job_dir: PathBuf,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl CheckpointSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.checkpoints.iter().map(|c| c.id.as_str())
    }

    pub fn final_id(&self) -> &str {
        &self.checkpoints.last().expect("validated non-empty").id
    }

    pub fn contains(&self, id: &str) -> bool {
        self.checkpoints.iter().any(|c| c.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainCase {
    pub case_id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub pseudo: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictCase {
    pub case_id: String,
    pub image: PathBuf,
    pub tta: Option<TtaTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Mask(Mask3D),
    Probabilities(ProbabilityMap),
}

impl Prediction {
    pub fn to_mask(&self) -> Mask3D {
        match self {
            Prediction::Mask(m) => m.clone(),
            Prediction::Probabilities(p) => p.threshold(0.5),
        }
    }
}

/// Maps each view's prediction back to the original frame and fuses them:
/// mean-probability ensemble when every view gave probabilities, majority
/// vote otherwise.
pub fn merge_views(views: &[TtaTransform], preds: &[Prediction]) -> Result<Mask3D> {
    if views.len() != preds.len() {
        return Err(Error::InvalidParameter(format!("{} views but {} predictions", views.len(), preds.len())));
    }
    let maps: Option<Vec<ProbabilityMap>> = views
        .iter()
        .zip(preds)
        .map(|(t, p)| match p {
            Prediction::Probabilities(m) => Some(tta_inverse(m, t)),
            Prediction::Mask(_) => None,
        })
        .collect();
    match maps {
        Some(maps) => ensemble(&maps, 0.5),
        None => majority_vote(&views.iter().zip(preds).map(|(t, p)| t.inverse(&p.to_mask())).collect::<Vec<_>>()),
    }
}

const DONE_FILE: &str = "done";

pub struct SegmenterHandle {
    spec: SegmenterSpec,
    workdir: PathBuf,
    passthrough: serde_json::Value,
    workers: usize,
    runner: Box<dyn JobRunner>,
    handshake: OnceLock<Handshake>,
}

impl std::fmt::Debug for SegmenterHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmenterHandle")
            .field("spec", &self.spec)
            .field("workdir", &self.workdir)
            .field("workers", &self.workers)
            .finish()
    }
}

impl SegmenterHandle {
    pub fn new(spec: SegmenterSpec, workdir: impl Into<PathBuf>) -> Result<Self> {
        spec.validate()?;
        let runner: Box<dyn JobRunner> = match &spec {
            SegmenterSpec::External { program, args } => Box::new(ExternalCommand::new(program.clone(), args.clone())),
            SegmenterSpec::ThresholdMock(c) => Box::new(ThresholdMock::new(c.clone())),
            SegmenterSpec::NoisyOracle(c) => Box::new(NoisyOracleMock::new(c.clone())),
        };
        Ok(Self::with_runner(spec, runner, workdir))
    }

    /// Handle around a caller-supplied runner.
    pub fn with_runner(spec: SegmenterSpec, runner: Box<dyn JobRunner>, workdir: impl Into<PathBuf>) -> Self {
        SegmenterHandle {
            spec,
            workdir: workdir.into(),
            passthrough: default_passthrough(),
            workers: 1,
            runner,
            handshake: OnceLock::new(),
        }
    }

    pub fn with_passthrough(mut self, config: serde_json::Value) -> Self {
        self.passthrough = config;
        self
    }

    /// Upper bound on concurrent predict jobs.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn handshake(&self) -> Result<Handshake> {
        if let Some(h) = self.handshake.get() {
            return Ok(*h);
        }
        let h = match self.spec {
            SegmenterSpec::External { .. } => {
                let dir = self.execute(&Job::handshake(), |dir| Handshake::load(dir).map(|_| ()))?;
                Handshake::load(&dir)?
            }
            _ => mock::MOCK_HANDSHAKE,
        };
        Ok(*self.handshake.get_or_init(|| h))
    }

    pub fn train(&self, cases: &[TrainCase], fractions: &[f64], init_checkpoint: Option<&str>) -> Result<CheckpointSet> {
        crate::selection::validate_fractions(fractions)?;
        for c in cases {
            for stem in [&c.image, &c.label] {
                let p = BundlePaths::from_stem(stem);
                if !p.header.exists() {
                    return Err(Error::MissingHeader(p.header));
                }
            }
        }
        let job = Job {
            command: protocol::Command::Train,
            cases: cases
                .iter()
                .map(|c| JobCase {
                    case_id: c.case_id.clone(),
                    image: c.image.clone(),
                    tta: None,
                })
                .collect(),
            labels: cases.iter().map(|c| (c.case_id.clone(), c.label.clone())).collect(),
            pseudo_cases: cases.iter().filter(|c| c.pseudo).map(|c| c.case_id.clone()).collect(),
            config: self.passthrough.clone(),
            checkpoint_fractions: Some(fractions.to_vec()),
            init_checkpoint: init_checkpoint.map(str::to_string),
            ..Job::handshake()
        };
        let check = |dir: &Path| protocol::CheckpointsFile::load(dir)?.validate(fractions);
        let dir = self.execute(&job, check)?;
        let reply = protocol::CheckpointsFile::load(&dir)?;
        Ok(CheckpointSet {
            job_dir: dir,
            checkpoints: reply.checkpoints,
        })
    }

    /// Runs one checkpoint over `cases`. Falls back to masks when the
    /// segmenter cannot emit probabilities.
    pub fn predict(&self, set: &CheckpointSet, checkpoint_id: &str, cases: &[PredictCase], emit: Emit) -> Result<Vec<Prediction>> {
        if !set.contains(checkpoint_id) {
            return Err(SegmenterError::UnknownCheckpoint(checkpoint_id.into()).into());
        }
        let on_disk = protocol::CheckpointsFile::load(&set.job_dir)?;
        if !on_disk.contains(checkpoint_id) {
            return Err(SegmenterError::UnknownCheckpoint(checkpoint_id.into()).into());
        }
        let hs = self.handshake()?;
        let emit = if emit == Emit::Probabilities && !hs.probabilities { Emit::Masks } else { emit };
        if cases.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<&[PredictCase]> = if hs.concurrent_predict && self.workers > 1 {
            cases.chunks(cases.len().div_ceil(self.workers)).collect()
        } else {
            vec![cases]
        };
        let per_chunk = crate::par::map_collect(&chunks, |chunk| self.predict_chunk(set, checkpoint_id, chunk, emit))?;
        Ok(per_chunk.into_iter().flatten().collect())
    }

    fn predict_chunk(&self, set: &CheckpointSet, checkpoint_id: &str, cases: &[PredictCase], emit: Emit) -> Result<Vec<Prediction>> {
        let job = Job {
            command: protocol::Command::Predict,
            cases: cases
                .iter()
                .map(|c| JobCase {
                    case_id: c.case_id.clone(),
                    image: c.image.clone(),
                    tta: c.tta.map(|t| t.tag()),
                })
                .collect(),
            config: self.passthrough.clone(),
            checkpoint_id: Some(checkpoint_id.to_string()),
            checkpoint_dir: Some(set.job_dir.clone()),
            emit: Some(emit),
            ..Job::handshake()
        };
        let dir = self.execute(&job, |dir| {
            for c in cases {
                read_prediction(dir, c, emit)?;
            }
            Ok(())
        })?;
        cases.iter().map(|c| read_prediction(&dir, c, emit).map_err(Error::from)).collect()
    }

    /// Runs `job` in its content-addressed directory unless an earlier run
    /// already completed there, then validates the outputs with `check`.
    fn execute(&self, job: &Job, check: impl Fn(&Path) -> Result<(), SegmenterError>) -> Result<PathBuf> {
        job.validate()?;
        let bytes = serde_json::to_vec_pretty(job).expect("job serializes");
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        let tag = match job.command {
            protocol::Command::Handshake => "handshake",
            protocol::Command::Train => "train",
            protocol::Command::Predict => "predict",
        };
        let dir = self.workdir.join("jobs").join(format!("{tag}-{hex}"));
        if dir.join(DONE_FILE).exists() && check(&dir).is_ok() {
            log::debug!("reusing completed job {}", dir.display());
            return Ok(dir);
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        io::write_atomic(&dir.join(protocol::JOB_FILE), &bytes)?;
        self.runner.run(&dir)?;
        check(&dir)?;
        io::write_atomic(&dir.join(DONE_FILE), b"")?;
        Ok(dir)
    }
}

fn read_prediction(dir: &Path, case: &PredictCase, emit: Emit) -> Result<Prediction, SegmenterError> {
    let out = protocol::output_paths(dir, &case.case_id);
    if !out.header.exists() || !out.raw.exists() {
        return Err(SegmenterError::protocol(format!("no output for case {:?}", case.case_id)));
    }
    let bad = |e: Error| SegmenterError::protocol(format!("case {:?}: {e}", case.case_id));
    let (input, _) = io::read_geometry(&case.image).map_err(SegmenterError::data)?;
    let (output, dtype) = io::read_geometry(&out.header).map_err(bad)?;
    if !input.same_as(&output) {
        return Err(SegmenterError::GeometryMismatch {
            case_id: case.case_id.clone(),
            reason: format!("{:?}/{:?} vs {:?}/{:?}", output.dims(), output.spacing(), input.dims(), input.spacing()),
        });
    }
    match (emit, dtype) {
        (Emit::Masks, DType::U8) => Ok(Prediction::Mask(io::load_mask(&out.header, &out.raw, LabelMode::Strict).map_err(bad)?.mask)),
        (Emit::Probabilities, DType::F32) => {
            let v = io::load_volume(&out.header, &out.raw).map_err(bad)?;
            Ok(Prediction::Probabilities(ProbabilityMap::new(v).map_err(bad)?))
        }
        (e, d) => Err(SegmenterError::protocol(format!("case {:?}: emit {e:?} but output dtype {d:?}", case.case_id))),
    }
}
