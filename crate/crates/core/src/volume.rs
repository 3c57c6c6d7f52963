//! Voxel grids with physical spacing.
//!
//! All grids store their samples in a flat buffer with x varying fastest:
//! `index = x + nx * (y + ny * z)`.

use crate::error::{Error, Result};

/// Voxel counts per axis plus per-axis spacing in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dims {dims:?} must be positive")));
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::InvalidGeometry(format!("dims {dims:?} overflow")));
        }
        validate_spacing(spacing)?;
        Ok(Geometry { dims, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Same voxel counts and bitwise-equal spacing.
    pub fn same_as(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn with_dims(&self, dims: [usize; 3]) -> Geometry {
        Geometry {
            dims,
            spacing: self.spacing,
        }
    }

    pub(crate) fn with_dims_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Geometry {
        Geometry { dims, spacing }
    }
}

pub(crate) fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

/// A dense 3D grid of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    geometry: Geometry,
    data: Vec<T>,
}

/// Scalar image, 32-bit float intensities.
pub type Volume3D = Grid<f32>;
/// Binary label grid; every value is 0 or 1.
pub type Mask3D = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub(crate) fn from_parts(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidGeometry(format!(
                "buffer of {} samples for dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Grid { geometry, data })
    }

    pub(crate) fn filled(geometry: Geometry, value: T) -> Self {
        Grid {
            data: vec![value; geometry.voxel_count()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Builds a grid of the same shape by mapping every sample.
    pub(crate) fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            geometry: self.geometry,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Reassigns spacing without touching samples.
    #[cfg(test)]
    pub(crate) fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        validate_spacing(spacing)?;
        self.geometry.spacing = spacing;
        Ok(self)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl Volume3D {
    /// Rejects non-finite samples.
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData { index });
        }
        Grid::from_parts(geometry, data)
    }

    pub fn constant(geometry: Geometry, value: f32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFiniteData { index: 0 });
        }
        Ok(Grid::filled(geometry, value))
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.voxel_count());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume3D::new(geometry, data)
    }

    /// Maps every sample; fails if any result is non-finite.
    pub fn try_map(&self, mut f: impl FnMut(f32) -> f32) -> Result<Volume3D> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        Volume3D::new(self.geometry, data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

impl Mask3D {
    /// Rejects any value other than 0 or 1.
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryLabel {
                index,
                value: data[index],
            });
        }
        Grid::from_parts(geometry, data)
    }

    pub fn empty(geometry: Geometry) -> Self {
        Grid::filled(geometry, 0)
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.voxel_count());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Grid { geometry, data }
    }

    pub fn from_bools(geometry: Geometry, bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        Grid::from_parts(geometry, bits.into_iter().map(u8::from).collect())
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z) != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = on as u8;
    }

    #[inline]
    pub fn set_index(&mut self, index: usize, on: bool) {
        self.data[index] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0).then_some(i))
    }
}

/// Per-voxel foreground probabilities, all within `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Volume3D);

impl ProbabilityMap {
    pub fn new(volume: Volume3D) -> Result<Self> {
        if let Some(index) = volume
            .as_slice()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidProbability {
                index,
                value: volume.as_slice()[index],
            });
        }
        Ok(ProbabilityMap(volume))
    }

    pub fn from_mask(mask: &Mask3D) -> Self {
        ProbabilityMap(mask.map(f32::from))
    }

    pub fn volume(&self) -> &Volume3D {
        &self.0
    }

    pub fn into_volume(self) -> Volume3D {
        self.0
    }

    pub fn geometry(&self) -> &Geometry {
        self.0.geometry()
    }

    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice()
    }

    pub fn threshold(&self, threshold: f32) -> Mask3D {
        self.0.map(|p| (p >= threshold) as u8)
    }
}

pub(crate) fn ensure_same_geometry(a: &Geometry, b: &Geometry) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimsMismatch(a.dims, b.dims));
    }
    if !a.same_as(b) {
        return Err(Error::GeometryMismatch(format!(
            "spacing {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}
