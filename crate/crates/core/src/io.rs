//! Volume bundles and dataset manifests.
//!
//! A bundle is a pair of files sharing a stem: `<name>.json` holds the
//! header and `<name>.raw` the little-endian, x-fastest payload.
//!
//! ```json
//! {"format":"volb1","dims":[nx,ny,nz],"spacing_mm":[sx,sy,sz],"dtype":"f32","order":"x-fastest"}
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mask3D, ProbabilityMap, Volume3D};

pub const BUNDLE_FORMAT: &str = "volb1";
pub const AXIS_ORDER: &str = "x-fastest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn width(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub format: String,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: DType,
    pub order: String,
}

impl BundleHeader {
    pub fn new(geometry: &Geometry, dtype: DType) -> Self {
        BundleHeader {
            format: BUNDLE_FORMAT.to_string(),
            dims: geometry.dims(),
            spacing_mm: geometry.spacing(),
            dtype,
            order: AXIS_ORDER.to_string(),
        }
    }

    fn geometry(&self, path: &Path) -> Result<Geometry> {
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        };
        if self.format != BUNDLE_FORMAT {
            return Err(malformed(format!("format {:?}, expected {BUNDLE_FORMAT:?}", self.format)));
        }
        if self.order != AXIS_ORDER {
            return Err(malformed(format!("order {:?}, expected {AXIS_ORDER:?}", self.order)));
        }
        Geometry::new(self.dims, self.spacing_mm).map_err(|e| malformed(e.to_string()))
    }
}

/// Header and payload paths for a bundle stem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BundlePaths {
    pub header: PathBuf,
    pub raw: PathBuf,
}

impl BundlePaths {
    /// Accepts the stem with or without the `.json` / `.raw` extension.
    pub fn from_stem(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref();
        let stem = match path.extension().and_then(|e| e.to_str()) {
            Some("json") | Some("raw") => path.with_extension(""),
            _ => path.to_path_buf(),
        };
        BundlePaths {
            header: append_ext(&stem, "json"),
            raw: append_ext(&stem, "raw"),
        }
    }
}

fn append_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_header(path: &Path, dtype: DType) -> Result<(BundleHeader, Geometry)> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingHeader(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let header: BundleHeader = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if header.dtype != dtype {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("dtype {:?}, expected {:?}", header.dtype, dtype),
        });
    }
    let geometry = header.geometry(path)?;
    Ok((header, geometry))
}

fn read_payload(path: &Path, geometry: &Geometry, dtype: DType) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = geometry.voxel_count() as u64 * dtype.width();
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn write_bundle(header: &BundleHeader, payload: &[u8], header_path: &Path, raw_path: &Path) -> Result<()> {
    let json = serde_json::to_string(header).map_err(|e| Error::json(header_path, e))?;
    for dir in [raw_path.parent(), header_path.parent()].into_iter().flatten() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(raw_path, payload).map_err(|e| Error::io(raw_path, e))?;
    fs::write(header_path, json).map_err(|e| Error::io(header_path, e))?;
    Ok(())
}

pub fn load_volume(header_path: impl AsRef<Path>, raw_path: impl AsRef<Path>) -> Result<Volume3D> {
    let (_, geometry) = read_header(header_path.as_ref(), DType::F32)?;
    let bytes = read_payload(raw_path.as_ref(), &geometry, DType::F32)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(geometry, data)
}

pub fn save_volume(
    volume: &Volume3D,
    header_path: impl AsRef<Path>,
    raw_path: impl AsRef<Path>,
) -> Result<()> {
    let header = BundleHeader::new(volume.geometry(), DType::F32);
    let mut payload = Vec::with_capacity(volume.len() * 4);
    for v in volume.as_slice() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_bundle(&header, &payload, header_path.as_ref(), raw_path.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Values outside {0, 1} are an error.
    Strict,
    /// Any nonzero value becomes 1.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedMask {
    pub mask: Mask3D,
    /// Voxels whose stored value was neither 0 nor 1.
    pub coerced: usize,
}

pub fn load_mask(
    header_path: impl AsRef<Path>,
    raw_path: impl AsRef<Path>,
    mode: LabelMode,
) -> Result<LoadedMask> {
    let (_, geometry) = read_header(header_path.as_ref(), DType::U8)?;
    let mut bytes = read_payload(raw_path.as_ref(), &geometry, DType::U8)?;
    let mut coerced = 0;
    for (index, v) in bytes.iter_mut().enumerate() {
        if *v > 1 {
            match mode {
                LabelMode::Strict => return Err(Error::NonBinaryLabel { index, value: *v }),
                LabelMode::Lenient => {
                    *v = 1;
                    coerced += 1;
                }
            }
        }
    }
    Ok(LoadedMask {
        mask: Mask3D::new(geometry, bytes)?,
        coerced,
    })
}

pub fn save_mask(mask: &Mask3D, header_path: impl AsRef<Path>, raw_path: impl AsRef<Path>) -> Result<()> {
    let header = BundleHeader::new(mask.geometry(), DType::U8);
    write_bundle(&header, mask.as_slice(), header_path.as_ref(), raw_path.as_ref())
}

pub fn read_volume(stem: impl AsRef<Path>) -> Result<Volume3D> {
    let p = BundlePaths::from_stem(stem);
    load_volume(&p.header, &p.raw)
}

pub fn write_volume(volume: &Volume3D, stem: impl AsRef<Path>) -> Result<()> {
    let p = BundlePaths::from_stem(stem);
    save_volume(volume, &p.header, &p.raw)
}

pub fn read_mask(stem: impl AsRef<Path>) -> Result<Mask3D> {
    let p = BundlePaths::from_stem(stem);
    Ok(load_mask(&p.header, &p.raw, LabelMode::Strict)?.mask)
}

pub fn write_mask(mask: &Mask3D, stem: impl AsRef<Path>) -> Result<()> {
    let p = BundlePaths::from_stem(stem);
    save_mask(mask, &p.header, &p.raw)
}

pub fn read_probability(stem: impl AsRef<Path>) -> Result<ProbabilityMap> {
    ProbabilityMap::new(read_volume(stem)?)
}

pub fn write_probability(map: &ProbabilityMap, stem: impl AsRef<Path>) -> Result<()> {
    write_volume(map.volume(), stem)
}

/// Reads only the geometry from a bundle header of either dtype.
pub fn read_geometry(stem: impl AsRef<Path>) -> Result<(Geometry, DType)> {
    let p = BundlePaths::from_stem(stem);
    let text = fs::read_to_string(&p.header).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingHeader(p.header.clone()),
        _ => Error::io(&p.header, e),
    })?;
    let header: BundleHeader = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: p.header.clone(),
        reason: e.to_string(),
    })?;
    let geometry = header.geometry(&p.header)?;
    Ok((geometry, header.dtype))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Dense,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Image bundle stem, relative to the manifest directory unless absolute.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub annotation_kind: AnnotationKind,
    pub split: Split,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InconsistentAnnotation {
            case_id: self.case_id.clone(),
            reason: reason.to_string(),
        };
        if self.case_id.is_empty() {
            return Err(bad("empty case id"));
        }
        match (self.annotation_kind, &self.label) {
            (AnnotationKind::Dense, None) => return Err(bad("dense annotation without a label")),
            (AnnotationKind::None, Some(_)) => return Err(bad("label present but annotation_kind is none")),
            _ => {}
        }
        if self.split == Split::Labeled && self.annotation_kind != AnnotationKind::Dense {
            return Err(bad("labeled split requires a dense label"));
        }
        Ok(())
    }

    /// Moves the case to the unlabeled pool and drops its label.
    pub fn demote(&mut self) {
        self.split = Split::Unlabeled;
        self.label = None;
        self.annotation_kind = AnnotationKind::None;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub cases: Vec<CaseRecord>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(cases: Vec<CaseRecord>) -> Result<Self> {
        let m = DatasetManifest {
            format_version: MANIFEST_VERSION,
            cases,
            root: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest format_version {}, expected {MANIFEST_VERSION}",
                self.format_version
            )));
        }
        let mut seen = HashSet::new();
        for case in &self.cases {
            if !seen.insert(case.case_id.as_str()) {
                return Err(Error::DuplicateCaseId(case.case_id.clone()));
            }
            case.validate()?;
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    manifest.validate()?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = append_ext(path, "tmp");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &json)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::json(path, e))
}
