use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use selret_core::augment::TtaTransform;
use selret_core::bridge::protocol::CheckpointsFile;
use selret_core::bridge::{
    merge_views, CheckpointSet, Emit, JobRunner, NoisyOracleMock, PredictCase, SegmenterHandle, SegmenterSpec,
    ThresholdMock, TrainCase,
};
use selret_core::io::{self, Split};
use selret_core::metrics::{evaluate_case, Hd95Convention, MetricsSummary};
use selret_core::phantom::{gen_dataset, DatasetSpec};
use selret_core::pipeline::{Pipeline, PipelineConfig};
use selret_core::preprocess::{compute_foreground_stats, resample_mask, resample_volume, znormalize, IntensityStats};
use selret_core::selection::{filter_blurred_boundaries, filter_dense_labels, rank_and_select, SelectionPolicy, StabilityRecord};
use selret_core::{label_components, Connectivity, Error, Mask3D, Volume3D};

use crate::{Command, ViewSet};

/// Maps library errors onto the documented exit codes.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Segmenter(_)) => 3,
        Some(Error::StateCorruption(_)) => 4,
        _ => 1,
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn read_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_segmenter(path: &Path) -> Result<SegmenterSpec> {
    let spec: SegmenterSpec = read_config(path)?;
    spec.validate()?;
    Ok(spec)
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let summary = Pipeline::start(cfg)?.run()?;
            print!("{}", summary.table());
            Ok(())
        }
        Command::Resume { state } => {
            let summary = Pipeline::resume(&state)?.run()?;
            print!("{}", summary.table());
            Ok(())
        }
        Command::Resample {
            input,
            output,
            spacing,
            mask,
        } => {
            let dims = if mask {
                let m = resample_mask(&io::read_mask(&input)?, spacing)?;
                io::write_mask(&m, &output)?;
                m.dims()
            } else {
                let v = resample_volume(&io::read_volume(&input)?, spacing)?;
                io::write_volume(&v, &output)?;
                v.dims()
            };
            print_json(&json!({ "dims": dims, "spacing_mm": spacing }))
        }
        Command::Normalize {
            input,
            output,
            stats,
            pair,
        } => normalize(input, output, stats, &pair),
        Command::Components {
            input,
            connectivity,
            labels_out,
        } => {
            let m = io::read_mask(&input)?;
            let l = label_components(&m, connectivity);
            if let Some(out) = labels_out {
                let labels = Volume3D::new(*m.geometry(), l.labels.iter().map(|&v| v as f32).collect())?;
                io::write_volume(&labels, out)?;
            }
            print_json(&json!({ "count": l.count, "sizes": l.sizes, "connectivity": connectivity }))
        }
        Command::Evaluate {
            pred,
            gt,
            manifest,
            pred_dir,
            convention,
        } => {
            let convention: Hd95Convention = serde_json::from_value(json!(convention.replace('-', "_")))
                .map_err(|_| config_error(format!("unknown HD95 convention {convention:?}")))?;
            match (pred, gt, manifest, pred_dir) {
                (Some(p), Some(g), None, None) => {
                    print_json(&evaluate_case(&io::read_mask(p)?, &io::read_mask(g)?, convention)?)
                }
                (None, None, Some(m), Some(d)) => evaluate_batch(&m, &d, convention),
                _ => bail!(config_error("give either --pred and --gt, or --manifest and --pred-dir")),
            }
        }
        Command::Train {
            segmenter,
            manifest,
            workdir,
            fractions,
        } => {
            let handle = SegmenterHandle::new(load_segmenter(&segmenter)?, workdir)?;
            let m = io::load_manifest(&manifest)?;
            let cases: Vec<TrainCase> = m
                .split(Split::Labeled)
                .map(|c| TrainCase {
                    case_id: c.case_id.clone(),
                    image: m.resolve(&c.image),
                    label: m.resolve(c.label.as_ref().expect("labeled cases carry labels")),
                    pseudo: false,
                })
                .collect();
            print_json(&handle.train(&cases, &fractions, None)?)
        }
        Command::TtaPredict {
            segmenter,
            checkpoints,
            checkpoint,
            image,
            case_id,
            output,
            workdir,
            views,
        } => tta_predict(&segmenter, &checkpoints, &checkpoint, &image, case_id, &output, &workdir, views),
        Command::ScoreStability {
            pred_root,
            checkpoints,
            connectivity,
        } => score_stability(&pred_root, &checkpoints, connectivity),
        Command::Select {
            records,
            policy,
            top_k,
            min_score,
        } => {
            let records: Vec<StabilityRecord> = read_config(&records)?;
            let mut policy: SelectionPolicy = match policy {
                Some(p) => read_config(&p)?,
                None => SelectionPolicy::default(),
            };
            policy.top_k = top_k.unwrap_or(policy.top_k);
            policy.min_score = min_score.unwrap_or(policy.min_score);
            policy.validate().map_err(|e| config_error(e.to_string()))?;
            print_json(&rank_and_select(&records, &policy))
        }
        Command::FilterDataset {
            manifest,
            out,
            reference_dir,
            threshold,
            connectivity,
        } => filter_dataset(&manifest, &out, reference_dir.as_deref(), threshold, connectivity),
        Command::GenSynth { spec, out } => {
            let spec: DatasetSpec = read_config(&spec)?;
            let m = gen_dataset(&spec, &out)?;
            print_json(&json!({
                "labeled": m.count(Split::Labeled),
                "unlabeled": m.count(Split::Unlabeled),
                "heldout": m.count(Split::Heldout),
                "manifest": out.join(selret_core::phantom::MANIFEST_FILE),
            }))
        }
        Command::MockSegmenter { spec, job_dir } => {
            let runner: Box<dyn JobRunner> = match load_segmenter(&spec)? {
                SegmenterSpec::ThresholdMock(c) => Box::new(ThresholdMock::new(c)),
                SegmenterSpec::NoisyOracle(c) => Box::new(NoisyOracleMock::new(c)),
                SegmenterSpec::External { .. } => bail!(config_error("mock-segmenter needs a mock spec, not external")),
            };
            runner.run(&job_dir).map_err(Error::from)?;
            Ok(())
        }
    }
}

fn normalize(input: Option<PathBuf>, output: Option<PathBuf>, stats: Option<PathBuf>, pair: &[PathBuf]) -> Result<()> {
    if let (Some(input), Some(output), Some(stats)) = (input, output, stats) {
        let stats: IntensityStats = read_config(&stats)?;
        let v = znormalize(&io::read_volume(&input)?, &stats)?;
        io::write_volume(&v, &output)?;
        return print_json(&stats);
    }
    if pair.is_empty() {
        bail!(config_error("give --pair IMAGE MASK (repeatable), or --input, --output and --stats"));
    }
    let loaded: Vec<(Volume3D, Mask3D)> = pair
        .chunks(2)
        .map(|p| Ok((io::read_volume(&p[0])?, io::read_mask(&p[1])?)))
        .collect::<Result<_>>()?;
    print_json(&compute_foreground_stats(loaded.iter().map(|(v, m)| (v, m)))?)
}

fn evaluate_batch(manifest: &Path, pred_dir: &Path, convention: Hd95Convention) -> Result<()> {
    let m = io::load_manifest(manifest)?;
    let mut cases = Vec::new();
    for c in m.cases.iter().filter(|c| c.label.is_some()) {
        let stem = pred_dir.join(&c.case_id);
        if !io::BundlePaths::from_stem(&stem).header.exists() {
            continue;
        }
        let gt = io::read_mask(m.resolve(c.label.as_ref().unwrap()))?;
        let report = evaluate_case(&io::read_mask(&stem)?, &gt, convention)?;
        cases.push((c.case_id.clone(), report));
    }
    if cases.is_empty() {
        bail!("no predictions in {} match labeled cases of the manifest", pred_dir.display());
    }
    let summary = MetricsSummary::of(cases.iter().map(|(_, r)| r));
    let rows: Vec<serde_json::Value> = cases
        .iter()
        .map(|(id, r)| {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v["case_id"] = json!(id);
            v
        })
        .collect();
    print_json(&json!({ "cases": rows, "summary": summary }))
}

#[allow(clippy::too_many_arguments)]
fn tta_predict(
    segmenter: &Path,
    checkpoints: &Path,
    checkpoint: &str,
    image: &Path,
    case_id: Option<String>,
    output: &Path,
    workdir: &Path,
    views: ViewSet,
) -> Result<()> {
    let handle = SegmenterHandle::new(load_segmenter(segmenter)?, workdir.join("segmenter"))?;
    let set = CheckpointSet {
        job_dir: checkpoints.to_path_buf(),
        checkpoints: CheckpointsFile::load(checkpoints).map_err(Error::from)?.checkpoints,
    };
    let case_id = match case_id {
        Some(id) => id,
        None => image
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
            .context("cannot derive a case id from the image path")?,
    };
    let transforms = match views {
        ViewSet::Full => TtaTransform::all(),
        ViewSet::Flips => TtaTransform::flip_set(),
        ViewSet::None => vec![TtaTransform::IDENTITY],
    };
    let volume = io::read_volume(image)?;
    let mut preds = Vec::with_capacity(transforms.len());
    for t in &transforms {
        let view = if t.is_identity() {
            image.to_path_buf()
        } else {
            let stem = workdir.join("views").join(t.tag()).join(&case_id);
            io::write_volume(&t.forward(&volume), &stem)?;
            stem
        };
        let case = PredictCase {
            case_id: case_id.clone(),
            image: view,
            tta: (!t.is_identity()).then_some(*t),
        };
        preds.extend(handle.predict(&set, checkpoint, &[case], Emit::Probabilities)?);
    }
    let fused = merge_views(&transforms, &preds)?;
    io::write_mask(&fused, output)?;
    print_json(&json!({ "case_id": case_id, "views": transforms.len(), "foreground_voxels": fused.count() }))
}

fn score_stability(root: &Path, checkpoints: &[String], connectivity: Connectivity) -> Result<()> {
    let Some((final_id, early)) = checkpoints.split_last() else {
        bail!(config_error("need at least one checkpoint"));
    };
    if early.is_empty() {
        bail!(config_error("stability needs at least one checkpoint before the final one"));
    }
    let final_dir = root.join(final_id);
    let mut ids: Vec<String> = std::fs::read_dir(&final_dir)
        .with_context(|| format!("reading {}", final_dir.display()))?
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".json").map(str::to_string)
        })
        .collect();
    ids.sort();
    let mut records = Vec::with_capacity(ids.len());
    for id in &ids {
        let final_mask = io::read_mask(final_dir.join(id))?;
        let masks: Vec<Mask3D> = early.iter().map(|c| io::read_mask(root.join(c).join(id))).collect::<Result<_, _>>()?;
        records.push(StabilityRecord::from_masks(id.clone(), &masks, &final_mask, connectivity)?);
    }
    print_json(&records)
}

fn filter_dataset(
    manifest: &Path,
    out: &Path,
    reference_dir: Option<&Path>,
    threshold: f64,
    connectivity: Connectivity,
) -> Result<()> {
    let mut m = io::load_manifest(manifest)?;
    let labeled: Vec<_> = m.split(Split::Labeled).cloned().collect();
    let labels: Vec<Mask3D> = labeled
        .iter()
        .map(|c| io::read_mask(m.resolve(c.label.as_ref().unwrap())))
        .collect::<Result<_, _>>()?;
    let dense = filter_dense_labels(labeled.iter().zip(&labels), connectivity);
    let mut demoted: Vec<String> = dense.demoted_ids().map(str::to_string).collect();

    let blur = match reference_dir {
        None => None,
        Some(dir) => {
            let mut kept = Vec::new();
            for (c, label) in labeled.iter().zip(&labels) {
                if dense.kept.contains(&c.case_id) {
                    kept.push((c, label, io::read_mask(dir.join(&c.case_id))?));
                }
            }
            let report = filter_blurred_boundaries(kept.iter().map(|(c, l, p)| (*c, *l, p)), threshold)?;
            demoted.extend(report.demoted_ids().map(str::to_string));
            Some(report)
        }
    };
    let out_dir = out.parent().unwrap_or(Path::new("."));
    for c in m.cases.iter_mut() {
        if demoted.contains(&c.case_id) {
            c.demote();
        }
        // keep paths pointing at the original bundles
        c.image = absolute(&m.root, &c.image);
        c.label = c.label.as_ref().map(|l| absolute(&m.root, l));
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    io::save_manifest(&m, out)?;
    print_json(&json!({
        "labeled": m.count(Split::Labeled),
        "unlabeled": m.count(Split::Unlabeled),
        "heldout": m.count(Split::Heldout),
        "dense_filter": dense,
        "blur_filter": blur,
    }))
}

fn absolute(root: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}
