//! Weak and strong training-time augmentation, invertible test-time
//! transforms and probability ensembling.
//!
//! Every random draw is a pure function of `(spec.seed, draw_index)`; callers
//! that need per-case streams fold the case id in with [`draw_key`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ensure_same_geometry, Geometry, Grid, Mask3D, ProbabilityMap, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    fn index(self) -> usize {
        self as usize
    }
}

/// A subset of {x, y, z}; serialized as a list of axis names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AxisSet([bool; 3]);

impl AxisSet {
    pub const NONE: AxisSet = AxisSet([false; 3]);
    pub const ALL: AxisSet = AxisSet([true; 3]);

    pub fn of(axes: &[Axis]) -> Self {
        let mut s = AxisSet::NONE;
        for a in axes {
            s.0[a.index()] = true;
        }
        s
    }

    pub fn contains(&self, axis: Axis) -> bool {
        self.0[axis.index()]
    }

    pub fn axes(&self) -> impl Iterator<Item = Axis> + '_ {
        Axis::ALL.into_iter().filter(|a| self.contains(*a))
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    /// All 8 subsets.
    pub fn subsets() -> impl Iterator<Item = AxisSet> {
        (0u8..8).map(|bits| AxisSet([bits & 1 != 0, bits & 2 != 0, bits & 4 != 0]))
    }
}

impl Serialize for AxisSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.axes())
    }
}

impl<'de> Deserialize<'de> for AxisSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let axes = Vec::<Axis>::deserialize(d)?;
        Ok(AxisSet::of(&axes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakSpec {
    /// Axes that may be flipped, each with probability 1/2.
    pub flip_axes: AxisSet,
    /// Largest number of quarter turns about z; the draw is uniform in `0..=rot90_z`.
    pub rot90_z: u8,
    pub brightness_delta_range: [f32; 2],
    pub scale_range: [f64; 2],
    /// Edge fraction of the random crop box per axis.
    pub crop_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongSpec {
    pub gamma_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub noise_std: f64,
    pub paint_patches: usize,
    /// Largest cuboid edge in voxels.
    pub paint_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub seed: u64,
    pub weak: WeakSpec,
    pub strong: StrongSpec,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            seed: 0,
            weak: WeakSpec {
                flip_axes: AxisSet::of(&[Axis::X]),
                rot90_z: 0,
                brightness_delta_range: [-0.1, 0.1],
                scale_range: [0.9, 1.1],
                crop_fraction: 1.0,
            },
            strong: StrongSpec {
                gamma_range: [0.7, 1.5],
                contrast_range: [0.75, 1.25],
                noise_std: 0.1,
                paint_patches: 3,
                paint_size: 6,
            },
        }
    }
}

impl AugmentSpec {
    /// Every transform degenerate at identity.
    pub fn identity(seed: u64) -> Self {
        AugmentSpec {
            seed,
            weak: WeakSpec {
                flip_axes: AxisSet::NONE,
                rot90_z: 0,
                brightness_delta_range: [0.0, 0.0],
                scale_range: [1.0, 1.0],
                crop_fraction: 1.0,
            },
            strong: StrongSpec {
                gamma_range: [1.0, 1.0],
                contrast_range: [1.0, 1.0],
                noise_std: 0.0,
                paint_patches: 0,
                paint_size: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        let w = &self.weak;
        let s = &self.strong;
        if w.rot90_z > 3 {
            return bad(format!("rot90_z {} must be in 0..=3", w.rot90_z));
        }
        if !ordered(w.brightness_delta_range.map(f64::from)) {
            return bad("brightness_delta_range must be finite and ordered".into());
        }
        if !ordered(w.scale_range) || w.scale_range[0] <= 0.0 {
            return bad("scale_range must be ordered and positive".into());
        }
        if !(w.crop_fraction > 0.0 && w.crop_fraction <= 1.0) {
            return bad(format!("crop_fraction {} must be in (0, 1]", w.crop_fraction));
        }
        if !ordered(s.gamma_range) || s.gamma_range[0] <= 0.0 {
            return bad("gamma_range must be ordered with a positive lower bound".into());
        }
        if !ordered(s.contrast_range) {
            return bad("contrast_range must be ordered".into());
        }
        if !(s.noise_std.is_finite() && s.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be >= 0", s.noise_std));
        }
        if s.paint_patches > 0 && s.paint_size == 0 {
            return bad("paint_size must be >= 1 when painting".into());
        }
        Ok(())
    }
}

fn ordered(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for one draw.
pub fn draw_rng(seed: u64, draw_index: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(draw_index ^ mix64(salt))))
}

/// Folds a case id into a draw index (FNV-1a over the id bytes).
pub fn draw_key(case_id: &str, draw: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in case_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h ^ mix64(draw))
}

const WEAK_SALT: u64 = 0x7765_616b;
const STRONG_SALT: u64 = 0x7374_726f;

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

// ---------------------------------------------------------------------------
// Integer-grid transforms shared by weak augmentation and TTA.

pub fn flip<T: Copy>(grid: &Grid<T>, axis: Axis) -> Grid<T> {
    let g = *grid.geometry();
    let [nx, ny, nz] = g.dims();
    let src = grid.as_slice();
    let mut data = Vec::with_capacity(src.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (sx, sy, sz) = match axis {
                    Axis::X => (nx - 1 - x, y, z),
                    Axis::Y => (x, ny - 1 - y, z),
                    Axis::Z => (x, y, nz - 1 - z),
                };
                data.push(src[g.index(sx, sy, sz)]);
            }
        }
    }
    Grid::from_parts(g, data).expect("same shape")
}

/// Rotates by `quarter_turns` × 90° about z (x → y).
pub fn rot90_z<T: Copy>(grid: &Grid<T>, quarter_turns: u8) -> Grid<T> {
    let k = quarter_turns % 4;
    if k == 0 {
        return grid.clone();
    }
    let g = *grid.geometry();
    let [nx, ny, nz] = g.dims();
    let [sx, sy, sz] = g.spacing();
    let (out_dims, out_spacing) = if k % 2 == 1 {
        ([ny, nx, nz], [sy, sx, sz])
    } else {
        ([nx, ny, nz], [sx, sy, sz])
    };
    let out = Geometry::with_dims_spacing(out_dims, out_spacing);
    let src = grid.as_slice();
    let mut data = Vec::with_capacity(src.len());
    for z in 0..nz {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let (ix, iy) = match k {
                    1 => (y, ny - 1 - x),
                    2 => (nx - 1 - x, ny - 1 - y),
                    _ => (nx - 1 - y, x),
                };
                data.push(src[g.index(ix, iy, z)]);
            }
        }
    }
    Grid::from_parts(out, data).expect("same voxel count")
}

pub fn crop<T: Copy>(grid: &Grid<T>, origin: [usize; 3], size: [usize; 3]) -> Grid<T> {
    let g = *grid.geometry();
    let out = g.with_dims(size);
    let mut data = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                data.push(grid.get(origin[0] + x, origin[1] + y, origin[2] + z));
            }
        }
    }
    Grid::from_parts(out, data).expect("crop inside grid")
}

/// Inverse mapping of an output index to input continuous index for a
/// content zoom about the grid center.
#[inline]
fn zoom_source(j: usize, n: usize, factor: f64) -> f64 {
    let center = n as f64 / 2.0;
    center + (j as f64 + 0.5 - center) / factor
}

fn zoom_volume(volume: &Volume3D, factor: f64) -> Volume3D {
    let g = *volume.geometry();
    let dims = g.dims();
    let sample = |axis: usize, j: usize| -> (usize, usize, f64) {
        let c = (zoom_source(j, dims[axis], factor) - 0.5).clamp(0.0, (dims[axis] - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(dims[axis] - 1), c - i0 as f64)
    };
    let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
    let mut data = Vec::with_capacity(volume.len());
    for z in 0..dims[2] {
        let (z0, z1, wz) = sample(2, z);
        for y in 0..dims[1] {
            let (y0, y1, wy) = sample(1, y);
            for x in 0..dims[0] {
                let (x0, x1, wx) = sample(0, x);
                let v = |x, y, z| volume.get(x, y, z) as f64;
                let c0 = lerp(lerp(v(x0, y0, z0), v(x1, y0, z0), wx), lerp(v(x0, y1, z0), v(x1, y1, z0), wx), wy);
                let c1 = lerp(lerp(v(x0, y0, z1), v(x1, y0, z1), wx), lerp(v(x0, y1, z1), v(x1, y1, z1), wx), wy);
                data.push(lerp(c0, c1, wz) as f32);
            }
        }
    }
    Volume3D::new(g, data).expect("interpolation of finite samples")
}

fn zoom_mask(mask: &Mask3D, factor: f64) -> Mask3D {
    let g = *mask.geometry();
    let dims = g.dims();
    let src = |axis: usize, j: usize| -> Option<usize> {
        let c = zoom_source(j, dims[axis], factor).floor();
        (c >= 0.0 && (c as usize) < dims[axis]).then_some(c as usize)
    };
    Mask3D::from_fn(g, |x, y, z| match (src(0, x), src(1, y), src(2, z)) {
        (Some(a), Some(b), Some(c)) => mask.is_set(a, b, c),
        _ => false,
    })
}

/// Parameters of one weak augmentation draw.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakParams {
    pub flips: AxisSet,
    pub quarter_turns: u8,
    pub brightness: f32,
    pub scale: f64,
    pub crop_origin: [usize; 3],
    pub crop_size: [usize; 3],
}

impl WeakParams {
    pub fn sample(spec: &AugmentSpec, dims: [usize; 3], draw_index: u64) -> Self {
        let w = &spec.weak;
        let mut rng = draw_rng(spec.seed, draw_index, WEAK_SALT);
        let mut flips = AxisSet::NONE;
        for a in w.flip_axes.axes() {
            flips.0[a.index()] = rng.random_bool(0.5);
        }
        let quarter_turns = if w.rot90_z == 0 { 0 } else { rng.random_range(0..=w.rot90_z) };
        let brightness = uniform(&mut rng, w.brightness_delta_range.map(f64::from)) as f32;
        let scale = uniform(&mut rng, w.scale_range);
        // crop acts after rotation, which may swap x and y
        let rotated = if quarter_turns % 2 == 1 { [dims[1], dims[0], dims[2]] } else { dims };
        let crop_size: [usize; 3] =
            std::array::from_fn(|i| ((rotated[i] as f64 * w.crop_fraction).ceil() as usize).clamp(1, rotated[i]));
        let crop_origin = std::array::from_fn(|i| {
            let slack = rotated[i] - crop_size[i];
            if slack == 0 {
                0
            } else {
                rng.random_range(0..=slack)
            }
        });
        WeakParams {
            flips,
            quarter_turns,
            brightness,
            scale,
            crop_origin,
            crop_size,
        }
    }

    fn apply_geometric<T: Copy>(&self, grid: &Grid<T>, zoom: impl Fn(&Grid<T>, f64) -> Grid<T>) -> Grid<T> {
        let mut g = grid.clone();
        for a in self.flips.axes() {
            g = flip(&g, a);
        }
        g = rot90_z(&g, self.quarter_turns);
        if self.scale != 1.0 {
            g = zoom(&g, self.scale);
        }
        if self.crop_size != g.dims() {
            g = crop(&g, self.crop_origin, self.crop_size);
        }
        g
    }
}

/// Flip, quarter-turn, content zoom and crop applied identically to image and
/// label, then a brightness shift on the image only.
pub fn weak_augment(volume: &Volume3D, mask: &Mask3D, spec: &AugmentSpec, draw_index: u64) -> Result<(Volume3D, Mask3D)> {
    ensure_same_geometry(volume.geometry(), mask.geometry())
        .map_err(|e| Error::GeometryMismatch(e.to_string()))?;
    spec.validate()?;
    let params = WeakParams::sample(spec, volume.dims(), draw_index);
    let mut v = params.apply_geometric(volume, zoom_volume);
    let m = params.apply_geometric(mask, zoom_mask);
    if params.brightness != 0.0 {
        v = v.try_map(|x| x + params.brightness)?;
    }
    Ok((v, m))
}

/// Gamma, contrast, Gaussian noise, then noise-filled cuboid patches.
/// Geometry is preserved.
pub fn strong_augment(volume: &Volume3D, spec: &AugmentSpec, draw_index: u64) -> Result<Volume3D> {
    spec.validate()?;
    let s = &spec.strong;
    let mut rng = draw_rng(spec.seed, draw_index, STRONG_SALT);
    let gamma = uniform(&mut rng, s.gamma_range);
    let contrast = uniform(&mut rng, s.contrast_range);
    let mut out = volume.clone();

    let (lo, hi) = out.min_max();
    if gamma != 1.0 && hi > lo {
        let (lo, span) = (lo as f64, (hi - lo) as f64);
        out = out.try_map(|v| (lo + span * ((v as f64 - lo) / span).clamp(0.0, 1.0).powf(gamma)) as f32)?;
    }
    if contrast != 1.0 {
        let mean = mean_of(out.as_slice());
        out = out.try_map(|v| (mean + (v as f64 - mean) * contrast) as f32)?;
    }
    out = add_noise(&out, s.noise_std, &mut rng)?;
    paint_patches(&out, s.paint_patches, s.paint_size, &mut rng)
}

fn mean_of(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

fn add_noise<R: Rng>(volume: &Volume3D, std: f64, rng: &mut R) -> Result<Volume3D> {
    if std == 0.0 {
        return Ok(volume.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    volume.try_map(|v| (v as f64 + normal.sample(rng)) as f32)
}

/// Paints `count` random cuboids with edges in `1..=size` using noise drawn
/// from the volume's global mean and std.
pub(crate) fn paint_patches<R: Rng>(volume: &Volume3D, count: usize, size: usize, rng: &mut R) -> Result<Volume3D> {
    if count == 0 {
        return Ok(volume.clone());
    }
    let mean = mean_of(volume.as_slice());
    let var = volume.as_slice().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / volume.len() as f64;
    let normal = Normal::new(mean, var.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let dims = volume.dims();
    let g = *volume.geometry();
    let mut out = volume.clone();
    for _ in 0..count {
        let edge: [usize; 3] = std::array::from_fn(|i| rng.random_range(1..=size.min(dims[i])));
        let origin: [usize; 3] = std::array::from_fn(|i| rng.random_range(0..=dims[i] - edge[i]));
        for z in origin[2]..origin[2] + edge[2] {
            for y in origin[1]..origin[1] + edge[1] {
                for x in origin[0]..origin[0] + edge[0] {
                    out.data_mut()[g.index(x, y, z)] = normal.sample(rng) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// An element of the invertible group {axis flips} × {quarter turns about z}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TtaTransform {
    pub flips: AxisSet,
    pub rot90_z: u8,
}

impl TtaTransform {
    pub const IDENTITY: TtaTransform = TtaTransform {
        flips: AxisSet::NONE,
        rot90_z: 0,
    };

    /// All 32 group elements.
    pub fn all() -> Vec<TtaTransform> {
        let mut out = Vec::with_capacity(32);
        for rot in 0..4 {
            for flips in AxisSet::subsets() {
                out.push(TtaTransform { flips, rot90_z: rot });
            }
        }
        out
    }

    /// Identity, the three single-axis flips and the xy flip pair.
    pub fn flip_set() -> Vec<TtaTransform> {
        [vec![], vec![Axis::X], vec![Axis::Y], vec![Axis::Z], vec![Axis::X, Axis::Y]]
            .into_iter()
            .map(|axes| TtaTransform {
                flips: AxisSet::of(&axes),
                rot90_z: 0,
            })
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.flips.is_empty() && self.rot90_z % 4 == 0
    }

    /// Short stable name, e.g. `fxz-r1`.
    pub fn tag(&self) -> String {
        let axes: String = self
            .flips
            .axes()
            .map(|a| match a {
                Axis::X => 'x',
                Axis::Y => 'y',
                Axis::Z => 'z',
            })
            .collect();
        format!("f{axes}-r{}", self.rot90_z % 4)
    }

    /// Inverse of [`TtaTransform::tag`].
    pub fn from_tag(tag: &str) -> Option<TtaTransform> {
        let (f, r) = tag.strip_prefix('f')?.split_once("-r")?;
        let rot90_z: u8 = r.parse().ok().filter(|k| *k < 4)?;
        let mut flips = AxisSet::NONE;
        for c in f.chars() {
            let a = match c {
                'x' => Axis::X,
                'y' => Axis::Y,
                'z' => Axis::Z,
                _ => return None,
            };
            if flips.contains(a) {
                return None;
            }
            flips.0[a.index()] = true;
        }
        Some(TtaTransform { flips, rot90_z })
    }

    pub fn forward<T: Copy>(&self, grid: &Grid<T>) -> Grid<T> {
        let mut g = grid.clone();
        for a in self.flips.axes() {
            g = flip(&g, a);
        }
        rot90_z(&g, self.rot90_z % 4)
    }

    pub fn inverse<T: Copy>(&self, grid: &Grid<T>) -> Grid<T> {
        let mut g = rot90_z(grid, (4 - self.rot90_z % 4) % 4);
        for a in self.flips.axes() {
            g = flip(&g, a);
        }
        g
    }
}

pub fn tta_forward(volume: &Volume3D, t: &TtaTransform) -> Volume3D {
    t.forward(volume)
}

pub fn tta_inverse(map: &ProbabilityMap, t: &TtaTransform) -> ProbabilityMap {
    ProbabilityMap::new(t.inverse(map.volume())).expect("permutation keeps values in [0, 1]")
}

/// Voxelwise mean probability `>= threshold` becomes foreground.
pub fn ensemble(maps: &[ProbabilityMap], threshold: f32) -> Result<Mask3D> {
    let first = maps.first().ok_or(Error::EmptyEnsemble)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} must be in (0, 1)")));
    }
    for m in &maps[1..] {
        ensure_same_geometry(first.geometry(), m.geometry()).map_err(|e| Error::GeometryMismatch(e.to_string()))?;
    }
    let n = maps.len() as f64;
    let bits = (0..first.as_slice().len()).map(|i| {
        let sum: f64 = maps.iter().map(|m| m.as_slice()[i] as f64).sum();
        sum / n >= threshold as f64
    });
    Mask3D::from_bools(*first.geometry(), bits)
}

/// Binary fallback: foreground where at least half the members agree.
pub fn majority_vote(masks: &[Mask3D]) -> Result<Mask3D> {
    let first = masks.first().ok_or(Error::EmptyEnsemble)?;
    for m in &masks[1..] {
        ensure_same_geometry(first.geometry(), m.geometry()).map_err(|e| Error::GeometryMismatch(e.to_string()))?;
    }
    let n = masks.len();
    let bits = (0..first.len()).map(|i| 2 * masks.iter().filter(|m| m.as_slice()[i] != 0).count() >= n);
    Mask3D::from_bools(*first.geometry(), bits)
}
