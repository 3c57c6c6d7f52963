//! Spacing normalisation and foreground z-scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{validate_spacing, Geometry, Mask3D, Volume3D};

/// Pooled foreground intensity statistics. `std` is the population value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    pub voxel_count: u64,
}

impl IntensityStats {
    pub fn new(mean: f64, std: f64, voxel_count: u64) -> Result<Self> {
        if voxel_count == 0 {
            return Err(Error::EmptyForeground);
        }
        if !mean.is_finite() || !std.is_finite() || std < 0.0 {
            return Err(Error::InvalidParameter(format!("stats mean {mean}, std {std}")));
        }
        Ok(IntensityStats { mean, std, voxel_count })
    }

    /// Stats that leave a volume unchanged under [`znormalize`].
    pub fn identity() -> Self {
        IntensityStats {
            mean: 0.0,
            std: 1.0,
            voxel_count: 1,
        }
    }
}

/// Output voxel counts for a spacing change, rounding half away from zero.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|i| ((dims[i] as f64 * spacing[i] / target[i]).round() as usize).max(1))
}

/// Continuous input index of every output voxel center along one axis,
/// clamped to the valid sample range.
fn axis_positions(n_in: usize, s_in: f64, n_out: usize, s_out: f64) -> Vec<(usize, usize, f64)> {
    let hi = (n_in - 1) as f64;
    // ratio first so equal spacings map centers onto samples exactly
    let ratio = s_out / s_in;
    (0..n_out)
        .map(|j| {
            let c = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, hi);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        return a;
    }
    let v = a * (1.0 - w) + b * w;
    v.clamp(a.min(b), a.max(b))
}

/// Trilinear resampling to `target` spacing, sampled at voxel centers.
pub fn resample_volume(volume: &Volume3D, target: [f64; 3]) -> Result<Volume3D> {
    validate_spacing(target)?;
    let geometry = volume.geometry();
    let dims = geometry.dims();
    let spacing = geometry.spacing();
    if spacing == target {
        return Ok(volume.clone());
    }
    let out_dims = resampled_dims(dims, spacing, target);
    let px = axis_positions(dims[0], spacing[0], out_dims[0], target[0]);
    let py = axis_positions(dims[1], spacing[1], out_dims[1], target[1]);
    let pz = axis_positions(dims[2], spacing[2], out_dims[2], target[2]);
    let src = volume.as_slice();
    let at = |x: usize, y: usize, z: usize| src[geometry.index(x, y, z)] as f64;

    let mut data = Vec::with_capacity(out_dims.iter().product());
    for &(z0, z1, wz) in &pz {
        for &(y0, y1, wy) in &py {
            for &(x0, x1, wx) in &px {
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), wx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), wx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), wx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), wx);
                let c0 = lerp(c00, c10, wy);
                let c1 = lerp(c01, c11, wy);
                data.push(lerp(c0, c1, wz) as f32);
            }
        }
    }
    Volume3D::new(Geometry::new(out_dims, target)?, data)
}

/// Nearest-neighbour resampling: each output center takes the input voxel
/// containing it.
pub fn resample_mask(mask: &Mask3D, target: [f64; 3]) -> Result<Mask3D> {
    validate_spacing(target)?;
    let geometry = mask.geometry();
    let dims = geometry.dims();
    let spacing = geometry.spacing();
    if spacing == target {
        return Ok(mask.clone());
    }
    let out_dims = resampled_dims(dims, spacing, target);
    let nearest = |axis: usize| -> Vec<usize> {
        (0..out_dims[axis])
            .map(|j| {
                let c = (j as f64 + 0.5) * (target[axis] / spacing[axis]);
                (c.floor() as usize).min(dims[axis] - 1)
            })
            .collect()
    };
    let (nx, ny, nz) = (nearest(0), nearest(1), nearest(2));
    let out = Geometry::new(out_dims, target)?;
    Ok(Mask3D::from_fn(out, |x, y, z| mask.is_set(nx[x], ny[y], nz[z])))
}

/// Mean and population std of intensities under every mask, pooled.
pub fn compute_foreground_stats<'a>(
    cases: impl IntoIterator<Item = (&'a Volume3D, &'a Mask3D)>,
) -> Result<IntensityStats> {
    // Welford keeps the pooled variance stable over millions of voxels.
    let mut count = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (volume, mask) in cases {
        crate::volume::ensure_same_geometry(volume.geometry(), mask.geometry())?;
        for i in mask.indices() {
            let v = volume.as_slice()[i] as f64;
            count += 1;
            let delta = v - mean;
            mean += delta / count as f64;
            m2 += delta * (v - mean);
        }
    }
    if count == 0 {
        return Err(Error::EmptyForeground);
    }
    IntensityStats::new(mean, (m2 / count as f64).max(0.0).sqrt(), count)
}

pub fn znormalize(volume: &Volume3D, stats: &IntensityStats) -> Result<Volume3D> {
    if stats.std == 0.0 {
        return Err(Error::ZeroStd);
    }
    let (mean, std) = (stats.mean, stats.std);
    volume.try_map(|v| ((v as f64 - mean) / std) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(dims: [usize; 3], s: [f64; 3]) -> Geometry {
        Geometry::new(dims, s).unwrap()
    }

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], s: [f64; 3]) -> Volume3D {
        let g = geom(dims, s);
        Volume3D::from_fn(g, |_, _, _| rng.random_range(-5.0f32..5.0)).unwrap()
    }

    #[test]
    fn identity_spacing_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, [5, 6, 7], [1.0, 1.0, 1.0]);
        assert_eq!(resample_volume(&v, [1.0, 1.0, 1.0]).unwrap(), v);
    }

    #[test]
    fn identity_interpolation_path_is_exact() {
        // Output centers land exactly on input samples when spacing is unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(&mut rng, [6, 5, 4], [0.7, 1.3, 2.0]);
        let px = axis_positions(6, 0.7, 6, 0.7);
        for (j, (i0, _, w)) in px.iter().enumerate() {
            assert_eq!(*i0, j);
            assert!(w.abs() < 1e-12);
        }
        assert_eq!(resample_volume(&v, [0.7, 1.3, 2.0]).unwrap(), v);
    }

    #[test]
    fn doubling_dims() {
        let v = Volume3D::constant(geom([4, 4, 4], [2.0; 3]), 3.25).unwrap();
        let r = resample_volume(&v, [1.0; 3]).unwrap();
        assert_eq!(r.dims(), [8, 8, 8]);
        assert_eq!(r.spacing(), [1.0; 3]);
        assert!(r.as_slice().iter().all(|&x| x == 3.25));
    }

    #[test]
    fn dims_round_half_away_from_zero() {
        // 5 * 1 / 2 = 2.5 -> 3
        assert_eq!(resampled_dims([5, 1, 1], [1.0; 3], [2.0, 1.0, 1.0]), [3, 1, 1]);
        // tiny volumes never collapse to zero
        assert_eq!(resampled_dims([1, 1, 1], [1.0; 3], [10.0; 3]), [1, 1, 1]);
    }

    #[test]
    fn invalid_target_spacing() {
        let v = Volume3D::constant(geom([2, 2, 2], [1.0; 3]), 0.0).unwrap();
        assert!(matches!(resample_volume(&v, [0.0, 1.0, 1.0]), Err(Error::InvalidSpacing(_))));
        assert!(matches!(resample_volume(&v, [f64::INFINITY, 1.0, 1.0]), Err(Error::InvalidSpacing(_))));
        let m = Mask3D::empty(geom([2, 2, 2], [1.0; 3]));
        assert!(matches!(resample_mask(&m, [-1.0, 1.0, 1.0]), Err(Error::InvalidSpacing(_))));
    }

    #[test]
    fn linear_ramp_matches_closed_form() {
        // f(x) = x * sx at input voxel x; the interpolated value at output
        // voxel j is the physical center position shifted by half a voxel.
        let (sx, tx) = (2.0, 1.0);
        let g = geom([10, 3, 3], [sx, 1.0, 1.0]);
        let v = Volume3D::from_fn(g, |x, _, _| (x as f64 * sx) as f32).unwrap();
        let r = resample_volume(&v, [tx, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [20, 3, 3]);
        let mut checked = 0;
        for j in 0..20 {
            let c = (j as f64 + 0.5) * tx / sx - 0.5;
            if c < 0.0 || c > 9.0 {
                continue; // clamped boundary region
            }
            let expected = c * sx;
            for z in 0..3 {
                for y in 0..3 {
                    assert!((r.get(j, y, z) as f64 - expected).abs() <= 1e-5);
                }
            }
            checked += 1;
        }
        assert_eq!(checked, 18);
    }

    #[test]
    fn mask_single_voxel_becomes_block() {
        let g = geom([5, 5, 5], [2.0; 3]);
        let mut m = Mask3D::empty(g);
        m.set(2, 2, 2, true);
        let r = resample_mask(&m, [1.0; 3]).unwrap();
        assert_eq!(r.dims(), [10, 10, 10]);
        // brute force: output voxel is set iff its center lies inside input voxel (2,2,2)
        for z in 0..10 {
            for y in 0..10 {
                for x in 0..10 {
                    let inside = [x, y, z].iter().all(|&j| {
                        let p = j as f64 + 0.5;
                        (4.0..6.0).contains(&p)
                    });
                    assert_eq!(r.is_set(x, y, z), inside, "{x} {y} {z}");
                }
            }
        }
        assert_eq!(r.count(), 8);
    }

    #[test]
    fn full_mask_stays_full() {
        let m = Mask3D::from_fn(geom([3, 4, 5], [1.0, 0.5, 3.0]), |_, _, _| true);
        for target in [[1.0; 3], [0.3, 0.7, 2.2], [4.0, 4.0, 4.0]] {
            let r = resample_mask(&m, target).unwrap();
            assert_eq!(r.count(), r.len());
        }
    }

    #[test]
    fn stats_examples() {
        let g = geom([2, 1, 1], [1.0; 3]);
        let full = Mask3D::from_fn(g, |_, _, _| true);
        let a = Volume3D::new(g, vec![0.0, 0.0]).unwrap();
        let b = Volume3D::new(g, vec![2.0, 2.0]).unwrap();
        let s = compute_foreground_stats([(&a, &full), (&b, &full)]).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert_eq!(s.voxel_count, 4);

        let g4 = geom([4, 1, 1], [1.0; 3]);
        let v = Volume3D::new(g4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = compute_foreground_stats([(&v, &Mask3D::from_fn(g4, |_, _, _| true))]).unwrap();
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);

        let empty = Mask3D::empty(g);
        assert!(matches!(
            compute_foreground_stats([(&a, &empty), (&b, &empty)]),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn stats_only_count_foreground() {
        let g = geom([4, 1, 1], [1.0; 3]);
        let v = Volume3D::new(g, vec![100.0, 1.0, 3.0, -50.0]).unwrap();
        let m = Mask3D::new(g, vec![0, 1, 1, 0]).unwrap();
        let s = compute_foreground_stats([(&v, &m)]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }

    #[test]
    fn znormalize_examples() {
        let g = geom([2, 2, 2], [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(&mut rng, [2, 2, 2], [1.0; 3]);
        assert_eq!(znormalize(&v, &IntensityStats::identity()).unwrap(), v);

        let c = Volume3D::constant(g, 7.0).unwrap();
        let s = IntensityStats::new(3.0, 2.0, 10).unwrap();
        assert!(znormalize(&c, &s).unwrap().as_slice().iter().all(|&x| x == 2.0));

        let zero = IntensityStats::new(3.0, 0.0, 10).unwrap();
        assert!(matches!(znormalize(&c, &zero), Err(Error::ZeroStd)));
        assert!(matches!(IntensityStats::new(0.0, 1.0, 0), Err(Error::EmptyForeground)));
    }

    proptest! {
        #[test]
        fn resampling_stays_within_input_range(
            seed in any::<u64>(),
            dims in proptest::array::uniform3(1usize..7),
            spacing in proptest::array::uniform3(0.3f64..3.0),
            target in proptest::array::uniform3(0.3f64..3.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_volume(&mut rng, dims, spacing);
            let (lo, hi) = v.min_max();
            let r = resample_volume(&v, target).unwrap();
            prop_assert_eq!(r.dims(), resampled_dims(dims, spacing, target));
            for &x in r.as_slice() {
                prop_assert!(x >= lo && x <= hi);
            }
            let c = Volume3D::constant(*v.geometry(), 1.75).unwrap();
            prop_assert!(resample_volume(&c, target).unwrap().as_slice().iter().all(|&x| x == 1.75));
        }

        #[test]
        fn resampled_mask_is_binary(
            seed in any::<u64>(),
            dims in proptest::array::uniform3(1usize..7),
            target in proptest::array::uniform3(0.3f64..3.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mask3D::from_fn(geom(dims, [1.0; 3]), |_, _, _| rng.random_bool(0.4));
            let r = resample_mask(&m, target).unwrap();
            prop_assert!(r.as_slice().iter().all(|&v| v <= 1));
            prop_assert_eq!(resample_mask(&m, [1.0; 3]).unwrap(), m);
        }

        #[test]
        fn znormalize_is_idempotent_under_identity(seed in any::<u64>(), mean in -10.0f64..10.0, std in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_volume(&mut rng, [3, 3, 3], [1.0; 3]);
            let s = IntensityStats::new(mean, std, 1).unwrap();
            let once = znormalize(&v, &s).unwrap();
            prop_assert_eq!(znormalize(&once, &IntensityStats::identity()).unwrap(), once);
        }
    }
}
