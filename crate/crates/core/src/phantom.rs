//! Synthetic bilateral-canal phantoms.
//!
//! Each phantom holds two tubes (swept spheres along smooth random cubic
//! curves), one confined to each x-half of the grid with at least two empty
//! voxel columns between them, so the ground truth always has exactly two
//! 26-connected components. Optional end blur fades tube contrast near both
//! endpoints; optional label degradation cuts gaps into the annotation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::draw_rng;
use crate::components::{component_count, Connectivity};
use crate::error::{Error, Result};
use crate::io::{self, AnnotationKind, CaseRecord, DatasetManifest, Split};
use crate::volume::{Geometry, Mask3D, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndBlur {
    /// Arc length from each endpoint over which contrast fades.
    pub length_vox: f64,
    /// Contrast loss at the endpoint, in `[0, 1]`.
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeLabel {
    /// Number of gaps cut into the annotation.
    pub drop_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    pub tube_radius_vox: [f64; 2],
    /// Peak lateral/vertical excursion of the tube centerline in voxels.
    pub curvature: f64,
    pub foreground: f32,
    pub background: f32,
    pub noise_std: f32,
    #[serde(default)]
    pub end_blur: Option<EndBlur>,
    #[serde(default)]
    pub degrade_label: Option<DegradeLabel>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 40, 20],
            spacing_mm: [1.0; 3],
            seed: 0,
            tube_radius_vox: [1.5, 2.5],
            curvature: 3.0,
            foreground: 1.0,
            background: 0.0,
            noise_std: 0.1,
            end_blur: None,
            degrade_label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume3D,
    pub ground_truth: Mask3D,
    pub annotation: Mask3D,
}

struct Tube {
    /// (x, y, z, arc length) samples along the centerline.
    samples: Vec<[f64; 4]>,
    length: f64,
    radius: f64,
}

/// Per-voxel nearest centerline sample of the tube covering it.
#[derive(Clone, Copy)]
struct Cover {
    tube: u8,
    dist2: f64,
    arc: f64,
}

const SAMPLE_STEP: f64 = 0.25;

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let [r_lo, r_hi] = self.tube_radius_vox;
        if !(r_lo >= 1.0 && r_lo <= r_hi && r_hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("tube radius range {:?} must satisfy 1 <= lo <= hi", self.tube_radius_vox)));
        }
        if self.foreground == self.background {
            return Err(Error::InvalidParameter("foreground and background levels must differ".into()));
        }
        if !(self.noise_std >= 0.0 && self.curvature >= 0.0) {
            return Err(Error::InvalidParameter("noise_std and curvature must be >= 0".into()));
        }
        if let Some(b) = self.end_blur {
            if !(b.length_vox > 0.0 && (0.0..=1.0).contains(&b.strength)) {
                return Err(Error::InvalidParameter(format!("end blur {b:?}")));
            }
        }
        Geometry::new(self.dims, self.spacing_mm)?;
        let [nx, ny, nz] = self.dims.map(|d| d as f64);
        let too_small = |reason: &str| Error::DimsTooSmall {
            dims: self.dims,
            reason: reason.to_string(),
        };
        if nx < 4.0 * r_hi + 5.0 {
            return Err(too_small("x must hold two separated tubes"));
        }
        if nz < 2.0 * r_hi + 4.0 {
            return Err(too_small("z must hold the tube diameter"));
        }
        if ny < 2.0 * r_hi + 8.0 {
            return Err(too_small("y must hold a tube of useful length"));
        }
        Ok(())
    }
}

fn cubic_offsets<R: Rng>(rng: &mut R, amplitude: f64) -> [f64; 3] {
    std::array::from_fn(|k| amplitude * rng.random_range(-1.0..=1.0) / (k as f64 + 1.0))
}

/// Smooth offset in `[-amplitude, amplitude]`-ish: coefficients on the first
/// three Legendre polynomials of `u = 2t − 1`.
fn curve_offset(c: &[f64; 3], t: f64) -> f64 {
    let u = 2.0 * t - 1.0;
    c[0] * u + c[1] * 0.5 * (3.0 * u * u - 1.0) + c[2] * 0.5 * (5.0 * u * u * u - 3.0 * u)
}

fn build_tube<R: Rng>(rng: &mut R, spec: &PhantomSpec, side: usize) -> Tube {
    let [nx, ny, nz] = spec.dims.map(|d| d as f64);
    let [r_lo, r_hi] = spec.tube_radius_vox;
    let radius = if r_lo == r_hi { r_lo } else { rng.random_range(r_lo..=r_hi) };
    // voxel x of the left tube stays <= floor(nx/2 - 1.5), right >= ceil(nx/2 + 0.5)
    let (x_lo, x_hi) = if side == 0 {
        (radius + 1.0, nx / 2.0 - 1.5 - radius)
    } else {
        (nx / 2.0 + 0.5 + radius, nx - 2.0 - radius)
    };
    let (z_lo, z_hi) = (radius + 1.0, nz - 2.0 - radius);
    let (y0, y1) = (radius + 1.0, ny - 2.0 - radius);
    let cx = rng.random_range(x_lo..=x_hi.max(x_lo));
    let cz = rng.random_range(z_lo..=z_hi.max(z_lo));
    let ax = cubic_offsets(rng, spec.curvature);
    let az = cubic_offsets(rng, spec.curvature);

    let steps = ((y1 - y0) / SAMPLE_STEP).ceil().max(1.0) as usize * 2;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut arc = 0.0;
    let mut prev: Option<[f64; 3]> = None;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let p = [
            (cx + curve_offset(&ax, t)).clamp(x_lo, x_hi.max(x_lo)),
            y0 + t * (y1 - y0),
            (cz + curve_offset(&az, t)).clamp(z_lo, z_hi.max(z_lo)),
        ];
        if let Some(q) = prev {
            arc += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        }
        samples.push([p[0], p[1], p[2], arc]);
        prev = Some(p);
    }
    Tube {
        samples,
        length: arc,
        radius,
    }
}

fn rasterize(tubes: &[Tube], geometry: &Geometry) -> Vec<Option<Cover>> {
    let dims = geometry.dims();
    let mut cover: Vec<Option<Cover>> = vec![None; geometry.voxel_count()];
    for (ti, tube) in tubes.iter().enumerate() {
        let r = tube.radius;
        for s in &tube.samples {
            let lo: [usize; 3] = std::array::from_fn(|a| (s[a] - r).floor().max(0.0) as usize);
            let hi: [usize; 3] = std::array::from_fn(|a| ((s[a] + r).ceil() as usize).min(dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let d2 = (x as f64 - s[0]).powi(2) + (y as f64 - s[1]).powi(2) + (z as f64 - s[2]).powi(2);
                        if d2 > r * r {
                            continue;
                        }
                        let slot = &mut cover[geometry.index(x, y, z)];
                        let better = match slot {
                            None => true,
                            Some(c) => d2 < c.dist2,
                        };
                        if better {
                            *slot = Some(Cover {
                                tube: ti as u8,
                                dist2: d2,
                                arc: s[3],
                            });
                        }
                    }
                }
            }
        }
    }
    cover
}

fn blur_factor(blur: Option<EndBlur>, arc: f64, length: f64) -> f64 {
    match blur {
        None => 1.0,
        Some(b) => {
            let e = arc.min(length - arc).max(0.0);
            if e >= b.length_vox {
                1.0
            } else {
                1.0 - b.strength * (1.0 - e / b.length_vox)
            }
        }
    }
}

const CUT_ATTEMPTS: usize = 16;

fn degrade<R: Rng>(
    rng: &mut R,
    gt: &Mask3D,
    cover: &[Option<Cover>],
    tubes: &[Tube],
    drop_segments: usize,
) -> Result<Mask3D> {
    for _ in 0..CUT_ATTEMPTS {
        let mut ann = gt.clone();
        // cut positions per tube, spread over the middle half of the arc
        let mut cuts: Vec<(u8, f64, f64)> = Vec::with_capacity(drop_segments);
        for k in 0..drop_segments {
            let ti = (k % tubes.len()) as u8;
            let tube = &tubes[ti as usize];
            let width = 2.0 * tube.radius + 2.0;
            let per_tube = drop_segments.div_ceil(tubes.len());
            let slot = k / tubes.len();
            // partition the middle half into `per_tube` bins and jitter within each
            let span = 0.5 * tube.length / per_tube as f64;
            let start = 0.25 * tube.length + slot as f64 * span;
            let center = start + rng.random_range(0.0..=1.0) * (span - width).max(0.0) + width / 2.0;
            cuts.push((ti, center, width));
        }
        for (i, c) in cover.iter().enumerate() {
            if let Some(c) = c {
                if cuts.iter().any(|&(t, center, w)| t == c.tube && (c.arc - center).abs() <= w / 2.0) {
                    ann.set_index(i, false);
                }
            }
        }
        if component_count(&ann, Connectivity::TwentySix) >= 2 + drop_segments {
            return Ok(ann);
        }
    }
    Err(Error::DimsTooSmall {
        dims: gt.dims(),
        reason: format!("could not cut {drop_segments} separating gaps into the tubes"),
    })
}

pub fn gen_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geometry = Geometry::new(spec.dims, spec.spacing_mm)?;
    let mut rng = draw_rng(spec.seed, 0, 0x7068_616e);
    let tubes = [build_tube(&mut rng, spec, 0), build_tube(&mut rng, spec, 1)];
    let cover = rasterize(&tubes, &geometry);

    let ground_truth = Mask3D::from_bools(geometry, cover.iter().map(Option::is_some))?;
    let n = component_count(&ground_truth, Connectivity::TwentySix);
    if n != 2 {
        return Err(Error::InvalidParameter(format!("phantom ground truth has {n} components (spec {spec:?})")));
    }

    let contrast = (spec.foreground - spec.background) as f64;
    let mut noise_rng: ChaCha8Rng = draw_rng(spec.seed, 1, 0x6e6f_6973);
    let noise = Normal::new(0.0, spec.noise_std as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let data: Vec<f32> = cover
        .iter()
        .map(|c| {
            let base = match c {
                None => spec.background as f64,
                Some(c) => {
                    let tube = &tubes[c.tube as usize];
                    spec.background as f64 + contrast * blur_factor(spec.end_blur, c.arc, tube.length)
                }
            };
            let n = if spec.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            (base + n) as f32
        })
        .collect();
    let image = Volume3D::new(geometry, data)?;

    let annotation = match spec.degrade_label {
        Some(d) if d.drop_segments > 0 => degrade(&mut rng, &ground_truth, &cover, &tubes, d.drop_segments)?,
        _ => ground_truth.clone(),
    };
    Ok(Phantom {
        image,
        ground_truth,
        annotation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    #[serde(default)]
    pub heldout: usize,
    #[serde(default)]
    pub n_disconnected: usize,
    #[serde(default)]
    pub n_blurred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(default)]
    pub phantom: PhantomSpec,
    pub counts: DatasetCounts,
    #[serde(default)]
    pub seed: u64,
    /// End blur given to the `n_blurred` labeled cases.
    #[serde(default = "default_strong_blur")]
    pub blur: EndBlur,
    #[serde(default = "default_degrade")]
    pub degrade: DegradeLabel,
}

/// Fades the outer ~30 % of each tube fully into the background.
pub fn default_strong_blur() -> EndBlur {
    EndBlur {
        length_vox: 14.0,
        strength: 1.0,
    }
}

fn default_degrade() -> DegradeLabel {
    DegradeLabel { drop_segments: 1 }
}

/// Sidecar describing what the generator did to each case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCase {
    pub case_id: String,
    pub split: Split,
    pub ground_truth: PathBuf,
    pub degraded: bool,
    pub blurred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub cases: Vec<SynthCase>,
}

impl SynthTruth {
    pub const FILE: &'static str = "synth_truth.json";

    pub fn load(dir: &Path) -> Result<SynthTruth> {
        io::read_json(&dir.join(Self::FILE))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `images/`, `labels/`, `truth/`, `manifest.json` and
/// `synth_truth.json` under `out`.
pub fn gen_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    let c = spec.counts;
    if c.n_disconnected + c.n_blurred > c.labeled {
        return Err(Error::InvalidParameter(format!(
            "{} disconnected + {} blurred exceed {} labeled cases",
            c.n_disconnected, c.n_blurred, c.labeled
        )));
    }
    spec.phantom.validate()?;
    for d in ["images", "labels", "truth"] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }

    // which labeled cases are degraded / blurred: a seeded shuffle
    let mut order: Vec<usize> = (0..c.labeled).collect();
    let mut rng = draw_rng(spec.seed, 0, 0x7370_6c69);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut role = vec![(false, false); c.labeled];
    for (rank, &i) in order.iter().enumerate() {
        if rank < c.n_disconnected {
            role[i].0 = true;
        } else if rank < c.n_disconnected + c.n_blurred {
            role[i].1 = true;
        }
    }

    struct Job {
        case_id: String,
        split: Split,
        index: u64,
        degraded: bool,
        blurred: bool,
    }
    let mut jobs = Vec::new();
    for i in 0..c.labeled {
        jobs.push(Job {
            case_id: format!("lab{:04}", i + 1),
            split: Split::Labeled,
            index: i as u64,
            degraded: role[i].0,
            blurred: role[i].1,
        });
    }
    for i in 0..c.unlabeled {
        jobs.push(Job {
            case_id: format!("unl{:04}", i + 1),
            split: Split::Unlabeled,
            index: (c.labeled + i) as u64,
            degraded: false,
            blurred: false,
        });
    }
    for i in 0..c.heldout {
        jobs.push(Job {
            case_id: format!("hld{:04}", i + 1),
            split: Split::Heldout,
            index: (c.labeled + c.unlabeled + i) as u64,
            degraded: false,
            blurred: false,
        });
    }

    let written = crate::par::map_collect(&jobs, |job| -> Result<(CaseRecord, SynthCase)> {
        let mut p = spec.phantom.clone();
        p.seed = crate::augment::draw_key(&job.case_id, spec.seed ^ job.index);
        p.end_blur = if job.blurred { Some(spec.blur) } else { spec.phantom.end_blur };
        p.degrade_label = job.degraded.then_some(spec.degrade);
        let ph = gen_phantom(&p)?;
        let image = PathBuf::from("images").join(&job.case_id);
        let truth = PathBuf::from("truth").join(&job.case_id);
        io::write_volume(&ph.image, out.join(&image))?;
        io::write_mask(&ph.ground_truth, out.join(&truth))?;
        let label = if job.split == Split::Unlabeled {
            None
        } else {
            let l = PathBuf::from("labels").join(&job.case_id);
            io::write_mask(&ph.annotation, out.join(&l))?;
            Some(l)
        };
        let record = CaseRecord {
            case_id: job.case_id.clone(),
            image,
            annotation_kind: if label.is_some() { AnnotationKind::Dense } else { AnnotationKind::None },
            label,
            split: job.split,
        };
        let synth = SynthCase {
            case_id: job.case_id.clone(),
            split: job.split,
            ground_truth: truth,
            degraded: job.degraded,
            blurred: job.blurred,
        };
        Ok((record, synth))
    })?;

    let (records, synth): (Vec<_>, Vec<_>) = written.into_iter().unzip();
    let mut manifest = DatasetManifest::new(records)?;
    io::save_manifest(&manifest, out.join(MANIFEST_FILE))?;
    io::write_json(&out.join(SynthTruth::FILE), &SynthTruth { cases: synth })?;
    manifest.root = out.to_path_buf();
    Ok(manifest)
}
