//! Overlap and surface-distance metrics for binary segmentations.

use serde::{Deserialize, Serialize};

use crate::distance::squared_distance_transform;
use crate::error::{Error, Result};
use crate::volume::{ensure_same_geometry, Mask3D};

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch(a.dims(), b.dims()));
    }
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        na += x as u64;
        nb += y as u64;
        both += (x & y) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one background face neighbour; outside
/// the grid counts as background.
pub fn boundary(mask: &Mask3D) -> Mask3D {
    let g = *mask.geometry();
    let [nx, ny, nz] = g.dims();
    Mask3D::from_fn(g, |x, y, z| {
        if !mask.is_set(x, y, z) {
            return false;
        }
        x == 0
            || y == 0
            || z == 0
            || x + 1 == nx
            || y + 1 == ny
            || z + 1 == nz
            || !mask.is_set(x - 1, y, z)
            || !mask.is_set(x + 1, y, z)
            || !mask.is_set(x, y - 1, z)
            || !mask.is_set(x, y + 1, z)
            || !mask.is_set(x, y, z - 1)
            || !mask.is_set(x, y, z + 1)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistances {
    /// One entry per boundary voxel of `a`, in scan order.
    pub a_to_b: Vec<f64>,
    pub b_to_a: Vec<f64>,
}

fn directed(from: &Mask3D, to: &Mask3D) -> Vec<f64> {
    let dt = squared_distance_transform(to);
    from.indices().map(|i| dt[i].sqrt()).collect()
}

/// Distances in mm from each boundary voxel to the other mask's nearest
/// boundary voxel, in both directions.
pub fn surface_distances(a: &Mask3D, b: &Mask3D) -> Result<SurfaceDistances> {
    ensure_same_geometry(a.geometry(), b.geometry())?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let (ba, bb) = (boundary(a), boundary(b));
    Ok(SurfaceDistances {
        a_to_b: directed(&ba, &bb),
        b_to_a: directed(&bb, &ba),
    })
}

/// Percentile with linear interpolation between closest ranks.
/// `values` must be sorted ascending and nonempty.
pub fn percentile_sorted(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

fn percentile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    percentile_sorted(&values, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Convention {
    /// 95th percentile of both directed distance lists pooled together.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    DirectedMax,
}

pub fn hd95(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    hd95_with(a, b, Hd95Convention::Pooled)
}

pub fn hd95_with(a: &Mask3D, b: &Mask3D, convention: Hd95Convention) -> Result<f64> {
    let d = surface_distances(a, b)?;
    Ok(hd95_from(d, convention))
}

fn hd95_from(d: SurfaceDistances, convention: Hd95Convention) -> f64 {
    match convention {
        Hd95Convention::Pooled => {
            let mut all = d.a_to_b;
            all.extend(d.b_to_a);
            percentile(all, 95.0)
        }
        Hd95Convention::DirectedMax => percentile(d.a_to_b, 95.0).max(percentile(d.b_to_a, 95.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd95_mm: Option<f64>,
    /// Directed 95th percentiles, prediction → reference and back.
    pub p95_pred_to_gt_mm: Option<f64>,
    pub p95_gt_to_pred_mm: Option<f64>,
    pub convention: Hd95Convention,
}

pub fn evaluate_case(pred: &Mask3D, gt: &Mask3D, convention: Hd95Convention) -> Result<MetricsReport> {
    ensure_same_geometry(pred.geometry(), gt.geometry())?;
    let dsc = dice(pred, gt)?;
    let (hd, p_pg, p_gp) = match surface_distances(pred, gt) {
        Ok(d) => {
            let pg = percentile(d.a_to_b.clone(), 95.0);
            let gp = percentile(d.b_to_a.clone(), 95.0);
            (Some(hd95_from(d, convention)), Some(pg), Some(gp))
        }
        Err(Error::EmptyMask) => (None, None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        dsc,
        hd95_mm: hd,
        p95_pred_to_gt_mm: p_pg,
        p95_gt_to_pred_mm: p_gp,
        convention,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Aggregate over many cases; undefined HD95 values are excluded and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub cases: usize,
    pub dsc: Option<MeanStd>,
    pub hd95_mm: Option<MeanStd>,
    pub hd95_undefined: usize,
}

impl MetricsSummary {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> MetricsSummary {
        let mut dsc = Vec::new();
        let mut hd = Vec::new();
        let mut undefined = 0;
        for r in reports {
            dsc.push(r.dsc);
            match r.hd95_mm {
                Some(h) => hd.push(h),
                None => undefined += 1,
            }
        }
        MetricsSummary {
            cases: dsc.len(),
            dsc: MeanStd::of(&dsc),
            hd95_mm: MeanStd::of(&hd),
            hd95_undefined: undefined,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(dims: [usize; 3], s: [f64; 3]) -> Geometry {
        Geometry::new(dims, s).unwrap()
    }

    fn points(dims: [usize; 3], s: [f64; 3], pts: &[[usize; 3]]) -> Mask3D {
        let mut m = Mask3D::empty(geom(dims, s));
        for p in pts {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn dice_examples() {
        let g = geom([8, 1, 1], [1.0; 3]);
        let a = Mask3D::new(g, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let b = Mask3D::new(g, vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
        let c = Mask3D::new(g, vec![0, 0, 0, 0, 0, 0, 1, 1]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&Mask3D::empty(g), &Mask3D::empty(g)).unwrap(), 1.0);
        let other = Mask3D::empty(geom([4, 2, 1], [1.0; 3]));
        assert!(matches!(dice(&a, &other), Err(Error::DimsMismatch(..))));
    }

    #[test]
    fn single_voxel_distances() {
        let a = points([4, 1, 1], [1.0; 3], &[[0, 0, 0]]);
        let b = points([4, 1, 1], [1.0; 3], &[[3, 0, 0]]);
        let d = surface_distances(&a, &b).unwrap();
        assert_eq!(d.a_to_b, vec![3.0]);
        assert_eq!(d.b_to_a, vec![3.0]);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);

        let a = points([4, 1, 1], [0.5, 1.0, 1.0], &[[0, 0, 0]]);
        let b = points([4, 1, 1], [0.5, 1.0, 1.0], &[[3, 0, 0]]);
        assert_eq!(surface_distances(&a, &b).unwrap().a_to_b, vec![1.5]);
    }

    #[test]
    fn identical_masks_have_zero_distance() {
        let g = geom([6, 6, 6], [1.0, 0.5, 2.0]);
        let m = Mask3D::from_fn(g, |x, y, z| x + y + z < 6);
        let d = surface_distances(&m, &m).unwrap();
        assert!(d.a_to_b.iter().chain(&d.b_to_a).all(|&x| x == 0.0));
        assert_eq!(hd95(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn empty_masks_are_errors_or_undefined() {
        let g = geom([3, 3, 3], [1.0; 3]);
        let full = Mask3D::from_fn(g, |_, _, _| true);
        assert!(matches!(hd95(&full, &Mask3D::empty(g)), Err(Error::EmptyMask)));
        let r = evaluate_case(&Mask3D::empty(g), &full, Hd95Convention::Pooled).unwrap();
        assert_eq!(r.dsc, 0.0);
        assert_eq!(r.hd95_mm, None);
        let r = evaluate_case(&full, &full, Hd95Convention::Pooled).unwrap();
        assert_eq!((r.dsc, r.hd95_mm), (1.0, Some(0.0)));
    }

    #[test]
    fn boundary_of_solid_cube() {
        let g = geom([5, 5, 5], [1.0; 3]);
        let full = Mask3D::from_fn(g, |_, _, _| true);
        // only the center 3x3x3 is interior
        assert_eq!(boundary(&full).count(), 125 - 27);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_sorted(&[1.0], 95.0), 1.0);
        assert!((percentile_sorted(&[0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
        let v: Vec<f64> = (0..21).map(f64::from).collect();
        assert!((percentile_sorted(&v, 95.0) - 19.0).abs() < 1e-12);
    }

    #[test]
    fn directed_max_is_at_least_pooled_lower_bound() {
        let a = points([10, 1, 1], [1.0; 3], &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]);
        let b = points([10, 1, 1], [1.0; 3], &[[9, 0, 0]]);
        let pooled = hd95_with(&a, &b, Hd95Convention::Pooled).unwrap();
        let dmax = hd95_with(&a, &b, Hd95Convention::DirectedMax).unwrap();
        assert!(dmax >= pooled - 1e-12);
        // p95 of the a-to-b distances [7, 8, 9]
        assert!((dmax - 8.9).abs() < 1e-12);
        assert!((pooled - 8.85).abs() < 1e-12);
    }

    #[test]
    fn summary_excludes_undefined() {
        let mut reports: Vec<MetricsReport> = (0..9)
            .map(|_| MetricsReport {
                dsc: 1.0,
                hd95_mm: Some(0.0),
                p95_pred_to_gt_mm: Some(0.0),
                p95_gt_to_pred_mm: Some(0.0),
                convention: Hd95Convention::Pooled,
            })
            .collect();
        reports.push(MetricsReport {
            dsc: 0.0,
            hd95_mm: None,
            p95_pred_to_gt_mm: None,
            p95_gt_to_pred_mm: None,
            convention: Hd95Convention::Pooled,
        });
        let s = MetricsSummary::of(&reports);
        assert_eq!(s.cases, 10);
        assert_eq!(s.hd95_undefined, 1);
        assert_eq!(s.hd95_mm.unwrap().n, 9);
        assert!((s.dsc.unwrap().mean - 0.9).abs() < 1e-12);
    }

    fn random_pair(seed: u64) -> (Mask3D, Mask3D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.random_range(2..8), rng.random_range(2..8), rng.random_range(2..8)];
        let g = geom(dims, [rng.random_range(0.3..2.0), rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)]);
        let p = rng.random_range(0.1..0.6);
        let mut a = Mask3D::from_fn(g, |_, _, _| rng.random_bool(p));
        let mut b = Mask3D::from_fn(g, |_, _, _| rng.random_bool(p));
        a.set(0, 0, 0, true);
        b.set(dims[0] - 1, 0, 0, true);
        (a, b)
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed in any::<u64>()) {
            let (a, b) = random_pair(seed);
            let d = dice(&a, &b).unwrap();
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            let h = hd95(&a, &b).unwrap();
            prop_assert_eq!(h, hd95(&b, &a).unwrap());
            prop_assert!(h >= 0.0);
            prop_assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn spacing_scales_hd95(seed in any::<u64>(), t in 0.25f64..4.0) {
            let (a, b) = random_pair(seed);
            let s = a.spacing();
            let scaled = [s[0] * t, s[1] * t, s[2] * t];
            let a2 = a.clone().with_spacing(scaled).unwrap();
            let b2 = b.clone().with_spacing(scaled).unwrap();
            let h = hd95(&a, &b).unwrap();
            let h2 = hd95(&a2, &b2).unwrap();
            prop_assert!((h2 - t * h).abs() <= 1e-9 * (1.0 + h2));
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&a2, &b2).unwrap());
        }
    }

    #[test]
    fn power_of_two_scaling_is_exact() {
        for seed in 0..50 {
            let (a, b) = random_pair(seed);
            let s = a.spacing();
            let scaled = [s[0] * 2.0, s[1] * 2.0, s[2] * 2.0];
            let h = hd95(&a, &b).unwrap();
            let h2 = hd95(&a.clone().with_spacing(scaled).unwrap(), &b.clone().with_spacing(scaled).unwrap()).unwrap();
            assert_eq!(h2, 2.0 * h);
        }
    }
}
