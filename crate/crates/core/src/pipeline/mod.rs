//! The self-training loop.
//!
//! Stages run strictly in order and the state file is rewritten atomically
//! after each one, so a run can be stopped anywhere and resumed. The stages:
//!
//! * prepare: demote disconnected labels, resample and normalize, demote
//!   cases the reference model segments poorly, write the final manifest;
//! * baseline: train the first teacher on labeled cases, score heldout;
//! * per iteration: pick the teacher, predict unlabeled cases at every
//!   checkpoint (TTA on the final one), score stability and select
//!   pseudo-labels, train and score the student.

pub mod config;
pub mod report;
pub mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::augment::{draw_key, draw_rng, strong_augment, TtaTransform};
use crate::bridge::{merge_views, CheckpointSet, Emit, PredictCase, Prediction, SegmenterHandle, SegmenterSpec, TrainCase};
use crate::error::{Error, Result};
use crate::io::{self, AnnotationKind, CaseRecord, DatasetManifest, Split};
use crate::metrics::evaluate_case;
use crate::par;
use crate::preprocess::{compute_foreground_stats, resample_mask, resample_volume, znormalize, IntensityStats};
use crate::selection::{filter_blurred_boundaries, filter_dense_labels, rank_and_select, FilterReport, StabilityRecord};
use crate::volume::{Mask3D, Volume3D};

pub use config::{BlurFilterConfig, BlurReference, PipelineConfig, QuotaMode, TtaSet};
pub use report::{report, Summary, SummaryRow};
pub use state::{CaseMetrics, IterationState, IterationStatus, ModelState, PipelineState, PreparedDataset, Stage, STATE_FILE};

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";

const DATA_DIR: &str = "data";

pub struct Pipeline {
    state: PipelineState,
    segmenter: SegmenterHandle,
}

fn make_handle(config: &PipelineConfig, spec: &SegmenterSpec, dir: &str) -> Result<SegmenterHandle> {
    Ok(SegmenterHandle::new(spec.clone(), config.output_root.join(dir))?
        .with_passthrough(config.segmenter_config.clone())
        .with_workers(config.workers))
}

fn stem(root: &Path, parts: &[&str]) -> PathBuf {
    parts.iter().fold(root.to_path_buf(), |p, s| p.join(s))
}

impl Pipeline {
    /// Starts a run, or continues the one already recorded under the output
    /// root if it was started with the same config.
    pub fn start(config: PipelineConfig) -> Result<Pipeline> {
        config.validate()?;
        fs::create_dir_all(&config.output_root).map_err(|e| Error::io(&config.output_root, e))?;
        let path = config.output_root.join(STATE_FILE);
        let state = if path.exists() {
            let s = PipelineState::load(&path)?;
            if s.config != config {
                return Err(Error::StateCorruption(format!(
                    "{} belongs to a run with a different config",
                    path.display()
                )));
            }
            s
        } else {
            let s = PipelineState::new(config);
            s.save()?;
            s
        };
        Self::from_state(state)
    }

    pub fn resume(state_path: &Path) -> Result<Pipeline> {
        let state = PipelineState::load(state_path)?;
        if state.path() != state_path && state.path().canonicalize().ok() != state_path.canonicalize().ok() {
            return Err(Error::StateCorruption(format!(
                "{} records output root {}",
                state_path.display(),
                state.config.output_root.display()
            )));
        }
        state.config.validate()?;
        Self::from_state(state)
    }

    fn from_state(state: PipelineState) -> Result<Pipeline> {
        let segmenter = make_handle(&state.config, &state.config.segmenter, "segmenter")?;
        Ok(Pipeline { state, segmenter })
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.state.config
    }

    pub fn next_stage(&self) -> Stage {
        self.state.next_stage()
    }

    /// Executes one stage and persists the state. Returns the stage that ran,
    /// or `Stage::Done` when nothing was left.
    pub fn step(&mut self) -> Result<Stage> {
        let stage = self.next_stage();
        let workers = self.state.config.workers;
        par::with_workers(workers, || self.execute(stage))?;
        if stage != Stage::Done {
            self.state.check()?;
            self.state.save()?;
            log::info!("finished {stage}");
        }
        Ok(stage)
    }

    /// Runs every remaining stage and writes the summary files.
    pub fn run(&mut self) -> Result<Summary> {
        while self.step()? != Stage::Done {}
        let summary = report(&self.state)?;
        let root = &self.state.config.output_root;
        io::write_atomic(&root.join(SUMMARY_JSON), summary.to_json().as_bytes())?;
        io::write_atomic(&root.join(SUMMARY_TXT), summary.table().as_bytes())?;
        Ok(summary)
    }

    pub fn summary(&self) -> Result<Summary> {
        report(&self.state)
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Prepare => {
                let p = self.prepare()?;
                self.state.prepared = Some(p);
            }
            Stage::Baseline => {
                let train = self.labeled_training_cases(None)?;
                let m = self.train_and_evaluate(&train, 0, "baseline")?;
                self.state.baseline = Some(m);
            }
            Stage::Teacher(k) => {
                let teacher = if k == 1 {
                    self.state.baseline.as_ref().map(|b| b.checkpoints.clone())
                } else {
                    self.state.iterations.get(k - 2).and_then(|it| it.student.as_ref()).map(|s| s.checkpoints.clone())
                }
                .ok_or_else(|| Error::StateCorruption(format!("no model to act as teacher of iteration {k}")))?;
                if self.state.iterations.len() < k {
                    self.state.iterations.push(IterationState::new(k));
                }
                let it = self.iteration_mut(k)?;
                it.teacher = Some(teacher);
                it.status = IterationStatus::Trained;
            }
            Stage::Predict(k) => {
                let preds = self.predict_unlabeled(k)?;
                let it = self.iteration_mut(k)?;
                it.predictions = preds;
                it.status = IterationStatus::Predicted;
            }
            Stage::Select(k) => {
                let (records, pseudo) = self.select(k)?;
                let it = self.iteration_mut(k)?;
                it.selected = records.iter().filter(|r| r.selected).map(|r| r.case_id.clone()).collect();
                it.records = records;
                it.pseudo_labels = pseudo;
                it.status = IterationStatus::Selected;
            }
            Stage::Student(k) => {
                let m = self.train_student(k)?;
                let it = self.iteration_mut(k)?;
                it.student = Some(m);
                it.status = IterationStatus::StudentTrained;
            }
            Stage::Done => {}
        }
        Ok(())
    }

    fn iteration_mut(&mut self, k: usize) -> Result<&mut IterationState> {
        self.state
            .iterations
            .get_mut(k - 1)
            .ok_or_else(|| Error::StateCorruption(format!("iteration {k} missing")))
    }

    fn prepared(&self) -> Result<&PreparedDataset> {
        self.state
            .prepared
            .as_ref()
            .ok_or_else(|| Error::StateCorruption("dataset not prepared".into()))
    }

    fn data_root(&self) -> PathBuf {
        self.state.config.output_root.join(DATA_DIR)
    }

    fn image_stem(&self, id: &str) -> PathBuf {
        stem(&self.data_root(), &["images", id])
    }

    fn label_stem(&self, id: &str) -> PathBuf {
        stem(&self.data_root(), &["labels", id])
    }

    fn iter_root(&self, k: usize) -> PathBuf {
        self.state.config.output_root.join(format!("iter{k}"))
    }

    // ---------------------------------------------------------------- prepare

    fn prepare(&self) -> Result<PreparedDataset> {
        let cfg = &self.state.config;
        let manifest = io::load_manifest(&cfg.manifest)?;
        let conn = cfg.selection.connectivity;

        let dense: Vec<&CaseRecord> = manifest
            .split(Split::Labeled)
            .filter(|c| c.annotation_kind == AnnotationKind::Dense)
            .collect();
        let raw_labels = par::map_collect(&dense, |c| io::read_mask(manifest.resolve(c.label.as_ref().expect("dense case"))))?;
        let label_filter = filter_dense_labels(dense.iter().copied().zip(&raw_labels), conn);
        drop(raw_labels);
        let mut records = manifest.cases.clone();
        let disconnected: BTreeSet<&str> = label_filter.demoted_ids().collect();
        for r in records.iter_mut().filter(|r| disconnected.contains(r.case_id.as_str())) {
            r.demote();
        }
        carve_heldout(&mut records, cfg.heldout_from_labeled, cfg.seed)?;

        // resample everything, then normalize with labeled-foreground statistics
        let loaded = par::map_collect(&records, |r| -> Result<(Volume3D, Option<Mask3D>)> {
            let mut image = io::read_volume(manifest.resolve(&r.image))?;
            let mut label = match &r.label {
                Some(l) => Some(io::read_mask(manifest.resolve(l))?),
                None => None,
            };
            if let Some(t) = cfg.target_spacing {
                image = resample_volume(&image, t)?;
                label = label.map(|l| resample_mask(&l, t)).transpose()?;
            }
            if let Some(l) = &label {
                if !l.geometry().same_as(image.geometry()) {
                    return Err(Error::InconsistentAnnotation {
                        case_id: r.case_id.clone(),
                        reason: "label geometry differs from the image".into(),
                    });
                }
            }
            Ok((image, label))
        })?;
        let stats = if cfg.normalize {
            compute_foreground_stats(
                records
                    .iter()
                    .zip(&loaded)
                    .filter(|(r, _)| r.split == Split::Labeled)
                    .filter_map(|(_, (v, l))| l.as_ref().map(|l| (v, l))),
            )?
        } else {
            IntensityStats::identity()
        };
        let data = self.data_root();
        for d in ["images", "labels"] {
            fs::create_dir_all(data.join(d)).map_err(|e| Error::io(data.join(d), e))?;
        }
        let jobs: Vec<(&CaseRecord, &(Volume3D, Option<Mask3D>))> = records.iter().zip(&loaded).collect();
        par::map_collect(&jobs, |(r, (v, l))| -> Result<()> {
            io::write_volume(&znormalize(v, &stats)?, self.image_stem(&r.case_id))?;
            if let Some(l) = l {
                io::write_mask(l, self.label_stem(&r.case_id))?;
            }
            Ok(())
        })?;
        drop(loaded);

        let blur_filter = if cfg.blur_filter.enabled { self.blur_filter(&records)? } else { None };
        if let Some(report) = &blur_filter {
            let blurred: BTreeSet<&str> = report.demoted_ids().collect();
            for r in records.iter_mut().filter(|r| blurred.contains(r.case_id.as_str())) {
                r.demote();
            }
        }

        let final_records: Vec<CaseRecord> = records
            .iter()
            .map(|r| CaseRecord {
                case_id: r.case_id.clone(),
                image: stem(Path::new("images"), &[&r.case_id]),
                label: r.label.as_ref().map(|_| stem(Path::new("labels"), &[&r.case_id])),
                annotation_kind: r.annotation_kind,
                split: r.split,
            })
            .collect();
        let final_manifest = DatasetManifest::new(final_records)?;
        let manifest_path = data.join("manifest.json");
        io::save_manifest(&final_manifest, &manifest_path)?;
        let ids = |s: Split| final_manifest.split(s).map(|c| c.case_id.clone()).collect::<Vec<_>>();
        let prepared = PreparedDataset {
            manifest: manifest_path,
            label_filter,
            blur_filter,
            stats,
            labeled: ids(Split::Labeled),
            unlabeled: ids(Split::Unlabeled),
            heldout: ids(Split::Heldout),
        };
        log::info!(
            "dataset: {} labeled, {} unlabeled, {} heldout",
            prepared.labeled.len(),
            prepared.unlabeled.len(),
            prepared.heldout.len()
        );
        Ok(prepared)
    }

    /// Reference predictions for the labeled cases, scored against their
    /// labels. `None` when there are too few cases to cross-validate.
    fn blur_filter(&self, records: &[CaseRecord]) -> Result<Option<FilterReport>> {
        let cfg = &self.state.config;
        let labeled: Vec<&CaseRecord> = records.iter().filter(|r| r.split == Split::Labeled).collect();
        let preds: Vec<Mask3D> = match &cfg.blur_filter.reference {
            BlurReference::Predictions { dir } => {
                par::map_collect(&labeled, |r| io::read_mask(dir.join(&r.case_id)))?
            }
            BlurReference::CrossValidation { folds, segmenter } => {
                if labeled.len() < 2 {
                    log::warn!("blur filter skipped: {} labeled case(s) cannot be cross-validated", labeled.len());
                    return Ok(None);
                }
                let spec = segmenter.as_ref().unwrap_or(&cfg.segmenter);
                let handle = make_handle(cfg, spec, "reference")?;
                self.cross_validate(&handle, &labeled, (*folds).min(labeled.len()))?
            }
        };
        let labels = par::map_collect(&labeled, |r| io::read_mask(self.label_stem(&r.case_id)))?;
        let triples = labeled.iter().zip(&labels).zip(&preds).map(|((r, l), p)| (*r, l, p));
        Ok(Some(filter_blurred_boundaries(triples, cfg.blur_filter.threshold)?))
    }

    fn cross_validate(&self, handle: &SegmenterHandle, cases: &[&CaseRecord], folds: usize) -> Result<Vec<Mask3D>> {
        let cfg = &self.state.config;
        // seeded fold assignment, balanced by construction
        let mut order: Vec<usize> = (0..cases.len()).collect();
        let mut rng = draw_rng(cfg.seed, 0, 0x666f_6c64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut fold_of = vec![0; cases.len()];
        for (rank, &i) in order.iter().enumerate() {
            fold_of[i] = rank % folds;
        }
        let mut out: Vec<Option<Mask3D>> = vec![None; cases.len()];
        for f in 0..folds {
            let train: Vec<TrainCase> = cases
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_of[*i] != f)
                .map(|(_, r)| TrainCase {
                    case_id: r.case_id.clone(),
                    image: self.image_stem(&r.case_id),
                    label: self.label_stem(&r.case_id),
                    pseudo: false,
                })
                .collect();
            let held: Vec<usize> = (0..cases.len()).filter(|i| fold_of[*i] == f).collect();
            let set = handle.train(&train, &cfg.selection.checkpoint_fractions, None)?;
            let predict: Vec<PredictCase> = held
                .iter()
                .map(|&i| PredictCase {
                    case_id: cases[i].case_id.clone(),
                    image: self.image_stem(&cases[i].case_id),
                    tta: None,
                })
                .collect();
            let preds = handle.predict(&set, set.final_id(), &predict, Emit::Probabilities)?;
            for (&i, p) in held.iter().zip(preds) {
                out[i] = Some(p.to_mask());
            }
        }
        Ok(out.into_iter().map(|m| m.expect("every case is in one fold")).collect())
    }

    // --------------------------------------------------------------- training

    /// Labeled training cases; strongly augmented images when requested.
    fn labeled_training_cases(&self, sda_iteration: Option<usize>) -> Result<Vec<TrainCase>> {
        let p = self.prepared()?;
        par::map_collect(&p.labeled, |id| -> Result<TrainCase> {
            let image = match sda_iteration {
                Some(k) => self.sda_image(id, k)?,
                None => self.image_stem(id),
            };
            Ok(TrainCase {
                case_id: id.clone(),
                image,
                label: self.label_stem(id),
                pseudo: false,
            })
        })
    }

    fn sda_image(&self, id: &str, k: usize) -> Result<PathBuf> {
        let cfg = &self.state.config;
        let out = stem(&self.iter_root(k), &["sda", id]);
        let source = io::read_volume(self.image_stem(id))?;
        let draw = draw_key(&format!("{id}/sda{k}"), cfg.seed);
        io::write_volume(&strong_augment(&source, &cfg.augment, draw)?, &out)?;
        Ok(out)
    }

    fn train_and_evaluate(&self, train: &[TrainCase], row: usize, tag: &str) -> Result<ModelState> {
        let cfg = &self.state.config;
        let set = self.segmenter.train(train, &cfg.selection.checkpoint_fractions, None)?;
        let heldout = self.evaluate_heldout(&set, tag)?;
        let pseudo = train.iter().filter(|c| c.pseudo).count();
        log::info!("row {row}: {} labeled + {pseudo} pseudo", train.len() - pseudo);
        Ok(ModelState {
            checkpoints: set,
            labeled: train.len() - pseudo,
            pseudo,
            heldout,
        })
    }

    /// Final-checkpoint predictions on heldout cases, stored under
    /// `eval/<tag>/` and scored against their labels.
    fn evaluate_heldout(&self, set: &CheckpointSet, tag: &str) -> Result<Vec<CaseMetrics>> {
        let cfg = &self.state.config;
        let p = self.prepared()?;
        let cases: Vec<PredictCase> = p
            .heldout
            .iter()
            .map(|id| PredictCase {
                case_id: id.clone(),
                image: self.image_stem(id),
                tta: None,
            })
            .collect();
        let preds = self.segmenter.predict(set, set.final_id(), &cases, Emit::Probabilities)?;
        let dir = cfg.output_root.join("eval").join(tag);
        let scored: Vec<(&String, &Prediction)> = p.heldout.iter().zip(&preds).collect();
        par::map_collect(&scored, |(id, pred)| -> Result<CaseMetrics> {
            let mask = pred.to_mask();
            io::write_mask(&mask, dir.join(id.as_str()))?;
            let gt = io::read_mask(self.label_stem(id))?;
            Ok(CaseMetrics {
                case_id: (*id).clone(),
                report: evaluate_case(&mask, &gt, cfg.hd95_convention)?,
            })
        })
    }

    // ------------------------------------------------------------- iteration

    fn teacher(&self, k: usize) -> Result<&CheckpointSet> {
        self.state
            .iterations
            .get(k - 1)
            .and_then(|it| it.teacher.as_ref())
            .ok_or_else(|| Error::StateCorruption(format!("iteration {k} has no teacher")))
    }

    /// Image of `id` under view `t`, written once and shared by iterations.
    fn view_image(&self, id: &str, t: &TtaTransform) -> Result<PathBuf> {
        if t.is_identity() {
            return Ok(self.image_stem(id));
        }
        let out = stem(&self.data_root(), &["tta", &t.tag(), id]);
        if !io::BundlePaths::from_stem(&out).header.exists() {
            let v = io::read_volume(self.image_stem(id))?;
            io::write_volume(&t.forward(&v), &out)?;
        }
        Ok(out)
    }

    fn predict_unlabeled(&self, k: usize) -> Result<BTreeMap<String, BTreeMap<String, PathBuf>>> {
        let cfg = &self.state.config;
        let ids = &self.prepared()?.unlabeled;
        let teacher = self.teacher(k)?;
        let mut out = BTreeMap::new();
        if ids.is_empty() {
            return Ok(out);
        }
        let root = self.iter_root(k).join("pred");
        let store = |ckpt: &str, masks: &[Mask3D]| -> Result<BTreeMap<String, PathBuf>> {
            let pairs: Vec<(&String, &Mask3D)> = ids.iter().zip(masks).collect();
            let written = par::map_collect(&pairs, |(id, m)| -> Result<(String, PathBuf)> {
                let s = stem(&root, &[ckpt, id]);
                io::write_mask(m, &s)?;
                Ok(((*id).clone(), s))
            })?;
            Ok(written.into_iter().collect())
        };

        let final_id = teacher.final_id().to_string();
        for ckpt in teacher.ids().filter(|c| *c != final_id) {
            let cases = self.predict_cases(ids, &TtaTransform::IDENTITY)?;
            let masks: Vec<Mask3D> = self
                .segmenter
                .predict(teacher, ckpt, &cases, Emit::Probabilities)?
                .iter()
                .map(Prediction::to_mask)
                .collect();
            out.insert(ckpt.to_string(), store(ckpt, &masks)?);
        }

        let views = if cfg.tta_enabled { cfg.tta_set.transforms() } else { vec![TtaTransform::IDENTITY] };
        // per case, the prediction of every view in that view's frame
        let mut per_case: Vec<Vec<Prediction>> = vec![Vec::with_capacity(views.len()); ids.len()];
        for t in &views {
            let cases = self.predict_cases(ids, t)?;
            let preds = self.segmenter.predict(teacher, &final_id, &cases, Emit::Probabilities)?;
            for (slot, p) in per_case.iter_mut().zip(preds) {
                slot.push(p);
            }
        }
        let finals = par::map_collect(&per_case, |preds| merge_views(&views, preds))?;
        out.insert(final_id.clone(), store(&final_id, &finals)?);
        Ok(out)
    }

    fn predict_cases(&self, ids: &[String], t: &TtaTransform) -> Result<Vec<PredictCase>> {
        par::map_collect(ids, |id| -> Result<PredictCase> {
            Ok(PredictCase {
                case_id: id.clone(),
                image: self.view_image(id, t)?,
                tta: (!t.is_identity()).then_some(*t),
            })
        })
    }

    fn select(&self, k: usize) -> Result<(Vec<StabilityRecord>, BTreeMap<String, PathBuf>)> {
        let cfg = &self.state.config;
        let it = &self.state.iterations[k - 1];
        let teacher = self.teacher(k)?;
        let final_id = teacher.final_id();
        let ids = &self.prepared()?.unlabeled;
        let records = par::map_collect(ids, |id| -> Result<StabilityRecord> {
            let load = |ckpt: &str| -> Result<Mask3D> {
                let s = it
                    .predictions
                    .get(ckpt)
                    .and_then(|m| m.get(id))
                    .ok_or_else(|| Error::StateCorruption(format!("no {ckpt} prediction for {id:?}")))?;
                io::read_mask(s)
            };
            let early: Vec<Mask3D> = teacher.ids().filter(|c| *c != final_id).map(load).collect::<Result<_>>()?;
            StabilityRecord::from_masks(id.clone(), &early, &load(final_id)?, cfg.selection.connectivity)
        })?;
        let mut policy = cfg.selection.clone();
        policy.top_k = cfg.quota.quota(policy.top_k, k);
        let ranked = rank_and_select(&records, &policy);

        let dir = self.iter_root(k);
        io::write_json(&dir.join("records.json"), &ranked)?;
        let chosen: Vec<&StabilityRecord> = ranked.iter().filter(|r| r.selected).collect();
        let pseudo = par::map_collect(&chosen, |r| -> Result<(String, PathBuf)> {
            let src = &it.predictions[final_id][&r.case_id];
            let dst = stem(&dir, &["pseudo", &r.case_id]);
            io::write_mask(&io::read_mask(src)?, &dst)?;
            Ok((r.case_id.clone(), dst))
        })?;
        log::info!("iteration {k}: selected {} of {} (quota {})", chosen.len(), ranked.len(), policy.top_k);
        Ok((ranked, pseudo.into_iter().collect()))
    }

    fn train_student(&self, k: usize) -> Result<ModelState> {
        let cfg = &self.state.config;
        let it = &self.state.iterations[k - 1];
        let mut train = self.labeled_training_cases((cfg.sda_enabled && cfg.sda_on_labeled).then_some(k))?;
        let pseudo = par::map_collect(&it.selected, |id| -> Result<TrainCase> {
            Ok(TrainCase {
                case_id: id.clone(),
                image: if cfg.sda_enabled { self.sda_image(id, k)? } else { self.image_stem(id) },
                label: it.pseudo_labels[id].clone(),
                pseudo: true,
            })
        })?;
        train.extend(pseudo);
        self.train_and_evaluate(&train, k, &format!("iter{k}"))
    }
}

/// Runs (or finishes) the pipeline described by `config`.
/// Moves `n` seeded-random labeled cases to the heldout split.
fn carve_heldout(records: &mut [CaseRecord], n: usize, seed: u64) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let mut labeled: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Labeled).collect();
    if n >= labeled.len() {
        return Err(Error::Config(format!(
            "heldout_from_labeled {n} leaves no labeled cases ({} available)",
            labeled.len()
        )));
    }
    let mut rng = draw_rng(seed, 0, 0x686c_6474);
    for i in (1..labeled.len()).rev() {
        labeled.swap(i, rng.random_range(0..=i));
    }
    for &i in &labeled[..n] {
        records[i].split = Split::Heldout;
    }
    Ok(())
}

pub fn run_pipeline(config: PipelineConfig) -> Result<(PipelineState, Summary)> {
    let mut p = Pipeline::start(config)?;
    let summary = p.run()?;
    Ok((p.state, summary))
}
