//! In-process segmenters that speak the job protocol.
//!
//! Both read `job.json` and write the same reply files an external process
//! would, so everything downstream of the bridge is exercised unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{self, CheckpointEntry, CheckpointsFile, Command, Emit, Handshake, Job, FINAL_CHECKPOINT};
use super::{JobRunner, SegmenterError};
use crate::augment::{draw_key, draw_rng, TtaTransform};
use crate::components::{keep_largest_k, label_components, Connectivity};
use crate::io;
use crate::metrics::dice;
use crate::volume::{Geometry, Mask3D, ProbabilityMap};

pub const MOCK_HANDSHAKE: Handshake = Handshake {
    protocol_version: protocol::PROTOCOL_VERSION,
    concurrent_predict: true,
    probabilities: true,
};

const MODEL_FILE: &str = "model.json";

/// Checkpoint ids for `n` fractions: `c1 … c{n-1}, final`.
pub fn checkpoint_ids(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| if i + 1 == n { FINAL_CHECKPOINT.to_string() } else { format!("c{}", i + 1) })
        .collect()
}

fn write_checkpoints(job_dir: &Path, fractions: &[f64]) -> Result<(), SegmenterError> {
    let reply = CheckpointsFile {
        checkpoints: checkpoint_ids(fractions.len())
            .into_iter()
            .zip(fractions)
            .map(|(id, &fraction)| CheckpointEntry { id, fraction })
            .collect(),
    };
    io::write_json(&job_dir.join(protocol::CHECKPOINTS_FILE), &reply).map_err(SegmenterError::data)
}

fn write_output(job_dir: &Path, case_id: &str, mask: &Mask3D, emit: Emit) -> Result<(), SegmenterError> {
    let stem = job_dir.join(protocol::OUT_DIR).join(case_id);
    match emit {
        Emit::Masks => io::write_mask(mask, &stem),
        Emit::Probabilities => io::write_probability(&ProbabilityMap::from_mask(mask), &stem),
    }
    .map_err(SegmenterError::data)
}

fn prepare_out(job_dir: &Path) -> Result<(), SegmenterError> {
    fs::create_dir_all(job_dir.join(protocol::OUT_DIR)).map_err(SegmenterError::data)
}

fn load_model<T: for<'de> Deserialize<'de>>(job: &Job) -> Result<T, SegmenterError> {
    let dir = job.checkpoint_dir.as_ref().expect("validated predict job");
    io::read_json(&dir.join(MODEL_FILE))
        .map_err(|_| SegmenterError::UnknownCheckpoint(job.checkpoint_id.clone().unwrap_or_default()))
}

fn write_model<T: Serialize>(job_dir: &Path, model: &T) -> Result<(), SegmenterError> {
    io::write_json(&job_dir.join(MODEL_FILE), model).map_err(SegmenterError::data)
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Fixed threshold; learned from the training set when absent.
    #[serde(default)]
    pub threshold: Option<f32>,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default = "two")]
    pub keep_k: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            threshold: None,
            connectivity: Connectivity::TwentySix,
            keep_k: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ThresholdCheckpoint {
    threshold: f32,
    /// Foreground is brighter than background.
    above: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ThresholdModel {
    checkpoints: Vec<(String, ThresholdCheckpoint)>,
}

/// "Training" takes the midpoint of the foreground and background intensity
/// means over the first `fraction` of training cases; prediction thresholds
/// and keeps the `keep_k` largest components.
#[derive(Debug, Clone)]
pub struct ThresholdMock {
    config: ThresholdConfig,
}

impl ThresholdMock {
    pub fn new(config: ThresholdConfig) -> Self {
        ThresholdMock { config }
    }

    fn train(&self, job_dir: &Path, job: &Job) -> Result<(), SegmenterError> {
        if job.cases.is_empty() {
            return Err(SegmenterError::EmptyTrainingSet);
        }
        // per-case foreground / background sums, then prefix sums per fraction
        let sums = crate::par::map_collect(&job.cases, |c| -> Result<[f64; 4], SegmenterError> {
            let image = io::read_volume(&c.image).map_err(SegmenterError::data)?;
            let label = io::read_mask(&job.labels[&c.case_id]).map_err(SegmenterError::data)?;
            if !image.geometry().same_as(label.geometry()) {
                return Err(SegmenterError::Data(format!("case {:?}: image and label geometry differ", c.case_id)));
            }
            let mut s = [0.0; 4];
            for (&v, &l) in image.as_slice().iter().zip(label.as_slice()) {
                let k = if l != 0 { 0 } else { 2 };
                s[k] += v as f64;
                s[k + 1] += 1.0;
            }
            Ok(s)
        })?;
        let fractions = job.checkpoint_fractions.as_ref().expect("validated train job");
        let n = job.cases.len();
        let mut checkpoints = Vec::new();
        for (id, &f) in checkpoint_ids(fractions.len()).into_iter().zip(fractions) {
            let used = ((f * n as f64).ceil() as usize).clamp(1, n);
            let mut t = [0.0; 4];
            for s in &sums[..used] {
                for k in 0..4 {
                    t[k] += s[k];
                }
            }
            if t[1] == 0.0 || t[3] == 0.0 {
                return Err(SegmenterError::Data("training labels need foreground and background voxels".into()));
            }
            let (fg, bg) = (t[0] / t[1], t[2] / t[3]);
            let threshold = self.config.threshold.unwrap_or(((fg + bg) / 2.0) as f32);
            checkpoints.push((
                id,
                ThresholdCheckpoint {
                    threshold,
                    above: fg >= bg,
                },
            ));
        }
        write_model(job_dir, &ThresholdModel { checkpoints })?;
        write_checkpoints(job_dir, fractions)
    }

    fn predict(&self, job_dir: &Path, job: &Job) -> Result<(), SegmenterError> {
        let model: ThresholdModel = load_model(job)?;
        let id = job.checkpoint_id.as_deref().unwrap_or_default();
        let ck = model
            .checkpoints
            .iter()
            .find(|(cid, _)| cid == id)
            .map(|(_, c)| *c)
            .ok_or_else(|| SegmenterError::UnknownCheckpoint(id.to_string()))?;
        prepare_out(job_dir)?;
        let emit = job.emit.unwrap_or_default();
        crate::par::map_collect(&job.cases, |c| {
            let image = io::read_volume(&c.image).map_err(SegmenterError::data)?;
            let raw = Mask3D::from_bools(
                *image.geometry(),
                image.as_slice().iter().map(|&v| if ck.above { v > ck.threshold } else { v < ck.threshold }),
            )
            .map_err(SegmenterError::data)?;
            let mask = keep_largest_k(&raw, self.config.connectivity, self.config.keep_k);
            write_output(job_dir, &c.case_id, &mask, emit)
        })?;
        Ok(())
    }

    /// Threshold learned by checkpoint `id` of a finished train job.
    pub fn learned_threshold(train_dir: &Path, id: &str) -> Option<f32> {
        let model: ThresholdModel = io::read_json(&train_dir.join(MODEL_FILE)).ok()?;
        model.checkpoints.into_iter().find(|(c, _)| c == id).map(|(_, c)| c.threshold)
    }
}

impl JobRunner for ThresholdMock {
    fn run(&self, job_dir: &Path) -> Result<(), SegmenterError> {
        let job = Job::load(job_dir)?;
        match job.command {
            Command::Handshake => io::write_json(&job_dir.join(protocol::HANDSHAKE_FILE), &MOCK_HANDSHAKE).map_err(SegmenterError::data),
            Command::Train => self.train(job_dir, &job),
            Command::Predict => self.predict(job_dir, &job),
        }
    }
}

fn default_drop_scale() -> f64 {
    0.5
}

fn default_difficulty() -> [f64; 2] {
    [0.5, 1.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyOracleConfig {
    /// Corruption rate per checkpoint, non-increasing.
    pub schedule: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Directory of ground-truth bundles named `<case_id>`.
    pub truth_dir: PathBuf,
    /// Exponent on `n_labeled / (n_labeled + pseudo quality)`; 0 disables
    /// the data-size effect.
    #[serde(default)]
    pub improvement: f64,
    /// Component drop-out probability relative to the corruption rate.
    #[serde(default = "default_drop_scale")]
    pub drop_scale: f64,
    /// Range of the per-case multiplier on the rate.
    #[serde(default = "default_difficulty")]
    pub difficulty: [f64; 2],
}

impl NoisyOracleConfig {
    pub fn new(schedule: Vec<f64>, seed: u64, truth_dir: impl Into<PathBuf>) -> Self {
        NoisyOracleConfig {
            schedule,
            seed,
            truth_dir: truth_dir.into(),
            improvement: 0.0,
            drop_scale: default_drop_scale(),
            difficulty: default_difficulty(),
        }
    }

    pub fn validate(&self) -> Result<(), SegmenterError> {
        let bad = |m: String| Err(SegmenterError::InvalidConfig(m));
        if self.schedule.is_empty() {
            return bad("empty corruption schedule".into());
        }
        if self.schedule.iter().any(|r| !(0.0..=1.0).contains(r)) || self.schedule.windows(2).any(|w| w[1] > w[0]) {
            return bad(format!("schedule {:?} must be non-increasing rates in [0, 1]", self.schedule));
        }
        let [lo, hi] = self.difficulty;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("difficulty range {:?}", self.difficulty));
        }
        if !(self.improvement >= 0.0 && self.drop_scale >= 0.0) {
            return bad("improvement and drop_scale must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OracleModel {
    rates: Vec<(String, f64)>,
    /// Multiplier from the training-set composition.
    quality: f64,
}

const FIELD_SALT: u64 = 0x6669_656c;
const COMPONENT_SALT: u64 = 0x636f_6d70;
const DIFFICULTY_SALT: u64 = 0x6469_6666;

/// Predicts the ground truth corrupted by boundary flips and component
/// drop-out at a per-checkpoint rate.
///
/// The random field deciding which voxels flip is fixed per (seed, case,
/// view), so a lower rate flips a subset of the voxels a higher rate flips.
#[derive(Debug, Clone)]
pub struct NoisyOracleMock {
    config: NoisyOracleConfig,
}

impl NoisyOracleMock {
    pub fn new(config: NoisyOracleConfig) -> Self {
        NoisyOracleMock { config }
    }

    fn truth(&self, case_id: &str) -> Result<Mask3D, SegmenterError> {
        let stem = self.config.truth_dir.join(case_id);
        if !io::BundlePaths::from_stem(&stem).header.exists() {
            return Err(SegmenterError::MissingGroundTruth(case_id.to_string()));
        }
        io::read_mask(&stem).map_err(SegmenterError::data)
    }

    /// Per-case rate multiplier in the configured difficulty range.
    pub fn difficulty(&self, case_id: &str) -> f64 {
        let [lo, hi] = self.config.difficulty;
        let mut rng = draw_rng(self.config.seed, draw_key(case_id, 0), DIFFICULTY_SALT);
        lo + (hi - lo) * rng.random::<f64>()
    }

    /// Ground truth of `case_id` corrupted at `rate` as seen in view `view`.
    pub fn corrupt(&self, gt: &Mask3D, case_id: &str, view: &TtaTransform, rate: f64) -> Mask3D {
        let r = (rate * self.difficulty(case_id)).min(1.0);
        if r <= 0.0 {
            return gt.clone();
        }
        let labeling = label_components(gt, Connectivity::TwentySix);
        let mut comp_rng = draw_rng(self.config.seed, draw_key(case_id, 1), COMPONENT_SALT);
        let dropped: Vec<bool> = (0..labeling.count).map(|_| comp_rng.random::<f64>() < r * self.config.drop_scale).collect();
        let kept = labeling.select(|id| !dropped[id as usize - 1]);

        let mut field_rng = draw_rng(self.config.seed, draw_key(&format!("{case_id}/{}", view.tag()), 2), FIELD_SALT);
        let g = *kept.geometry();
        let [nx, ny, nz] = g.dims();
        let mut out = kept.clone();
        let src = kept.as_slice();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let u: f64 = field_rng.random();
                    if u >= r {
                        continue;
                    }
                    let i = g.index(x, y, z);
                    let on = src[i] != 0;
                    let mut border = false;
                    let mut fg_near = false;
                    for (dx, dy, dz) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                        let (px, py, pz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        let inside = px >= 0 && py >= 0 && pz >= 0 && (px as usize) < nx && (py as usize) < ny && (pz as usize) < nz;
                        let nb = inside && src[g.index(px as usize, py as usize, pz as usize)] != 0;
                        border |= !nb;
                        fg_near |= nb;
                    }
                    if on && border {
                        out.set_index(i, false);
                    } else if !on && fg_near {
                        out.set_index(i, true);
                    }
                }
            }
        }
        out
    }

    fn train(&self, job_dir: &Path, job: &Job) -> Result<(), SegmenterError> {
        if job.cases.is_empty() {
            return Err(SegmenterError::EmptyTrainingSet);
        }
        let fractions = job.checkpoint_fractions.as_ref().expect("validated train job");
        if fractions.len() != self.config.schedule.len() {
            return Err(SegmenterError::InvalidConfig(format!(
                "{} checkpoints requested but the schedule has {} rates",
                fractions.len(),
                self.config.schedule.len()
            )));
        }
        let pseudo: Vec<&str> = job.pseudo_cases.iter().map(String::as_str).collect();
        let n_labeled = job.cases.len() - pseudo.len();
        // each pseudo-labeled case counts by how well its label matches the truth
        let pseudo_quality = crate::par::map_collect(&pseudo, |id| -> Result<f64, SegmenterError> {
            let label = io::read_mask(&job.labels[*id]).map_err(SegmenterError::data)?;
            let gt = self.truth_in(id, label.geometry())?;
            dice(&label, &gt).map_err(SegmenterError::data)
        })?
        .iter()
        .sum::<f64>();
        let base = n_labeled.max(1) as f64;
        let quality = (base / (base + pseudo_quality)).powf(self.config.improvement);
        let rates = checkpoint_ids(fractions.len())
            .into_iter()
            .zip(&self.config.schedule)
            .map(|(id, &r)| (id, r * quality))
            .collect();
        write_model(job_dir, &OracleModel { rates, quality })?;
        write_checkpoints(job_dir, fractions)
    }

    /// Ground truth brought onto `target` (resampled if only spacing differs).
    fn truth_in(&self, case_id: &str, target: &Geometry) -> Result<Mask3D, SegmenterError> {
        let mut gt = self.truth(case_id)?;
        if gt.spacing() != target.spacing() {
            gt = crate::preprocess::resample_mask(&gt, target.spacing()).map_err(SegmenterError::data)?;
        }
        if gt.dims() != target.dims() {
            return Err(SegmenterError::GeometryMismatch {
                case_id: case_id.to_string(),
                reason: format!("ground truth {:?} vs input {:?}", gt.dims(), target.dims()),
            });
        }
        Ok(gt)
    }

    fn predict(&self, job_dir: &Path, job: &Job) -> Result<(), SegmenterError> {
        let model: OracleModel = load_model(job)?;
        let id = job.checkpoint_id.as_deref().unwrap_or_default();
        let rate = model
            .rates
            .iter()
            .find(|(cid, _)| cid == id)
            .map(|(_, r)| *r)
            .ok_or_else(|| SegmenterError::UnknownCheckpoint(id.to_string()))?;
        prepare_out(job_dir)?;
        let emit = job.emit.unwrap_or_default();
        crate::par::map_collect(&job.cases, |c| {
            let view = match &c.tta {
                None => TtaTransform::IDENTITY,
                Some(tag) => TtaTransform::from_tag(tag)
                    .ok_or_else(|| SegmenterError::protocol(format!("case {:?}: bad tta tag {tag:?}", c.case_id)))?,
            };
            let (input, _) = io::read_geometry(&c.image).map_err(SegmenterError::data)?;
            // corrupt in the original frame, then move into the view's frame
            let original = *view.inverse(&Mask3D::empty(input)).geometry();
            let gt = self.truth_in(&c.case_id, &original)?;
            let mut pred = view.forward(&self.corrupt(&gt, &c.case_id, &view, rate));
            if !pred.geometry().same_as(&input) {
                pred = Mask3D::new(input, pred.into_vec()).map_err(SegmenterError::data)?;
            }
            write_output(job_dir, &c.case_id, &pred, emit)
        })?;
        Ok(())
    }
}

impl JobRunner for NoisyOracleMock {
    fn run(&self, job_dir: &Path) -> Result<(), SegmenterError> {
        let job = Job::load(job_dir)?;
        match job.command {
            Command::Handshake => io::write_json(&job_dir.join(protocol::HANDSHAKE_FILE), &MOCK_HANDSHAKE).map_err(SegmenterError::data),
            Command::Train => self.train(job_dir, &job),
            Command::Predict => self.predict(job_dir, &job),
        }
    }
}
