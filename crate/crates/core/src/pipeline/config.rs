use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentSpec, TtaTransform};
use crate::bridge::{default_passthrough, SegmenterSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::Hd95Convention;
use crate::selection::{SelectionPolicy, BLUR_DICE_THRESHOLD};
use crate::volume::validate_spacing;

/// How many pseudo-labels iteration `i` (1-based) may select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaMode {
    /// Up to `i * top_k`, so the pseudo set grows by `top_k` per round.
    #[default]
    Cumulative,
    /// Up to `top_k` every round.
    Fixed,
}

impl QuotaMode {
    pub fn quota(self, top_k: usize, iteration: usize) -> usize {
        match self {
            QuotaMode::Cumulative => top_k.saturating_mul(iteration),
            QuotaMode::Fixed => top_k,
        }
    }
}

/// Which model supplies the predictions the blurred-boundary filter scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlurReference {
    /// k-fold cross-validation over the labeled cases; each fold is predicted
    /// by a model trained on the others.
    CrossValidation {
        #[serde(default = "default_folds")]
        folds: usize,
        /// Segmenter for the folds; the pipeline segmenter when absent.
        #[serde(default)]
        segmenter: Option<SegmenterSpec>,
    },
    /// Precomputed masks named `<dir>/<case_id>` on the preprocessed grid.
    Predictions { dir: PathBuf },
}

fn default_folds() -> usize {
    5
}

impl Default for BlurReference {
    fn default() -> Self {
        BlurReference::CrossValidation {
            folds: default_folds(),
            segmenter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurFilterConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub reference: BlurReference,
}

impl Default for BlurFilterConfig {
    fn default() -> Self {
        BlurFilterConfig {
            enabled: true,
            threshold: BLUR_DICE_THRESHOLD,
            reference: BlurReference::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaSet {
    /// All 32 flip and quarter-turn combinations.
    #[default]
    Full,
    /// Identity, single-axis flips and the xy flip.
    Flips,
}

impl TtaSet {
    pub fn transforms(self) -> Vec<TtaTransform> {
        match self {
            TtaSet::Full => TtaTransform::all(),
            TtaSet::Flips => TtaTransform::flip_set(),
        }
    }
}

fn yes() -> bool {
    true
}

fn two() -> usize {
    2
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub segmenter: SegmenterSpec,
    /// Opaque training options forwarded to the segmenter.
    #[serde(default = "default_passthrough")]
    pub segmenter_config: serde_json::Value,
    #[serde(default)]
    pub selection: SelectionPolicy,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default = "two")]
    pub iterations: usize,
    #[serde(default = "yes")]
    pub tta_enabled: bool,
    #[serde(default)]
    pub tta_set: TtaSet,
    #[serde(default = "yes")]
    pub sda_enabled: bool,
    /// Also apply strong augmentation to labeled student inputs.
    #[serde(default)]
    pub sda_on_labeled: bool,
    #[serde(default)]
    pub target_spacing: Option<[f64; 3]>,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub seed: u64,
    pub output_root: PathBuf,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub quota: QuotaMode,
    #[serde(default)]
    pub blur_filter: BlurFilterConfig,
    #[serde(default)]
    pub hd95_convention: Hd95Convention,
    /// Labeled cases moved to the heldout split (seeded pick among those
    /// passing the dense-label filter), on top of any heldout cases in the
    /// manifest.
    #[serde(default)]
    pub heldout_from_labeled: usize,
}

impl PipelineConfig {
    pub fn new(manifest: impl Into<PathBuf>, segmenter: SegmenterSpec, output_root: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            manifest: manifest.into(),
            segmenter,
            segmenter_config: default_passthrough(),
            selection: SelectionPolicy::default(),
            augment: AugmentSpec::default(),
            iterations: 2,
            tta_enabled: true,
            tta_set: TtaSet::Full,
            sda_enabled: true,
            sda_on_labeled: false,
            target_spacing: None,
            normalize: true,
            seed: 0,
            output_root: output_root.into(),
            workers: 1,
            quota: QuotaMode::Cumulative,
            blur_filter: BlurFilterConfig::default(),
            hd95_convention: Hd95Convention::Pooled,
            heldout_from_labeled: 0,
        }
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let mut c: PipelineConfig = io::read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        c.resolve_paths(&base);
        Ok(c)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_root);
        fix_segmenter(&mut self.segmenter, base);
        match &mut self.blur_filter.reference {
            BlurReference::Predictions { dir } => fix(dir),
            BlurReference::CrossValidation {
                segmenter: Some(s), ..
            } => fix_segmenter(s, base),
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !self.manifest.is_file() {
            return cfg(format!("manifest {} does not exist", self.manifest.display()));
        }
        self.segmenter.validate()?;
        self.selection.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.iterations > 0 && self.selection.checkpoint_fractions.len() < 2 {
            return cfg("stability scoring needs at least one checkpoint before the final one".into());
        }
        if self.workers == 0 {
            return cfg("workers must be >= 1".into());
        }
        if let Some(t) = self.target_spacing {
            validate_spacing(t).map_err(|e| Error::Config(e.to_string()))?;
        }
        let b = &self.blur_filter;
        if !(b.threshold > 0.0 && b.threshold <= 1.0) {
            return cfg(format!("blur threshold {} must be in (0, 1]", b.threshold));
        }
        match &b.reference {
            BlurReference::CrossValidation { folds, segmenter } => {
                if *folds < 2 {
                    return cfg(format!("cross-validation needs >= 2 folds, got {folds}"));
                }
                if let Some(s) = segmenter {
                    s.validate()?;
                }
            }
            BlurReference::Predictions { dir } if b.enabled && !dir.is_dir() => {
                return cfg(format!("reference predictions {} do not exist", dir.display()));
            }
            _ => {}
        }
        Ok(())
    }
}

fn fix_segmenter(s: &mut SegmenterSpec, base: &Path) {
    match s {
        // bare program names are looked up on PATH
        SegmenterSpec::External { program, .. } if program.is_relative() && program.components().count() > 1 => {
            *program = base.join(&*program);
        }
        SegmenterSpec::NoisyOracle(c) if c.truth_dir.is_relative() => c.truth_dir = base.join(&c.truth_dir),
        _ => {}
    }
}
