//! Exact squared Euclidean distance transform on anisotropic grids.
//!
//! Separable lower-envelope-of-parabolas algorithm applied axis by axis;
//! distances are in physical units of the grid spacing.

use crate::volume::Mask3D;

/// Squared distance in mm² from every voxel center to the nearest set voxel
/// of `features`. Infinite everywhere when `features` is empty.
pub fn squared_distance_transform(features: &Mask3D) -> Vec<f64> {
    let geometry = features.geometry();
    let dims = geometry.dims();
    let spacing = geometry.spacing();
    let mut dist: Vec<f64> = features
        .as_slice()
        .iter()
        .map(|&v| if v != 0 { 0.0 } else { f64::INFINITY })
        .collect();

    let mut scratch = Scratch::default();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let start = a * strides[o1] + b * strides[o2];
                scratch.line.clear();
                scratch.line.extend((0..n).map(|k| dist[start + k * stride]));
                scratch.out.resize(n, 0.0);
                envelope_1d(&scratch.line, spacing[axis], &mut scratch.out, &mut scratch.sites, &mut scratch.bounds);
                for k in 0..n {
                    dist[start + k * stride] = scratch.out[k];
                }
            }
        }
    }
    dist
}

#[derive(Default)]
struct Scratch {
    line: Vec<f64>,
    out: Vec<f64>,
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

/// `out[q] = min_p (s·(q − p))² + f[p]` over finite `f[p]`.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * s;
        while let Some(&p) = sites.last() {
            let xp = p as f64 * s;
            let cross = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if cross <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(cross);
                break;
            }
        }
        if sites.is_empty() {
            sites.push(q);
            bounds.push(f64::NEG_INFINITY);
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let xq = q as f64 * s;
        while k + 1 < sites.len() && bounds[k + 1] < xq {
            k += 1;
        }
        let d = xq - sites[k] as f64 * s;
        *slot = d * d + f[sites[k]];
    }
}
