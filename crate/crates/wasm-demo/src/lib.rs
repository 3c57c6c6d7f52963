//! Browser bindings for three interactive operations: render a phantom slice
//! with its annotation coloured by connected component, recount components
//! under a chosen connectivity, and run a stability-based selection round on
//! in-memory noisy predictions.
//!
//! Everything here is plain Rust as well, so the logic is tested natively.

use selret_core::augment::TtaTransform;
use selret_core::bridge::{NoisyOracleConfig, NoisyOracleMock};
use selret_core::components::{label_components, ComponentLabeling, Connectivity};
use selret_core::phantom::{default_strong_blur, gen_phantom, DegradeLabel, Phantom, PhantomSpec};
use selret_core::selection::{rank_and_select, SelectionPolicy, StabilityRecord};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

fn connectivity(c: u8) -> Result<Connectivity, String> {
    Connectivity::try_from(c)
}

fn phantom_spec(seed: u32, degrade: bool, blur: bool) -> PhantomSpec {
    PhantomSpec {
        seed: seed as u64,
        end_blur: blur.then(default_strong_blur),
        degrade_label: degrade.then_some(DegradeLabel { drop_segments: 1 }),
        ..PhantomSpec::default()
    }
}

/// One phantom and the component labeling of its annotation.
#[wasm_bindgen]
pub struct Scene {
    phantom: Phantom,
    labeling: ComponentLabeling,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, degrade: bool, blur: bool) -> Result<Scene, String> {
        let phantom = gen_phantom(&phantom_spec(seed, degrade, blur)).map_err(|e| e.to_string())?;
        let labeling = label_components(&phantom.annotation, Connectivity::TwentySix);
        Ok(Scene { phantom, labeling })
    }

    pub fn dims(&self) -> Vec<u32> {
        self.phantom.image.dims().iter().map(|&d| d as u32).collect()
    }

    /// Relabels the annotation; returns the component count.
    pub fn set_connectivity(&mut self, c: u8) -> Result<u32, String> {
        self.labeling = label_components(&self.phantom.annotation, connectivity(c)?);
        Ok(self.labeling.count as u32)
    }

    pub fn component_count(&self) -> u32 {
        self.labeling.count as u32
    }

    /// Voxel count per component, largest first.
    pub fn component_sizes(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.labeling.sizes.iter().map(|&n| n as u32).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }

    /// RGBA pixels of axial slice `z`, x to the right and y down. With
    /// `overlay`, annotated voxels are tinted by component.
    pub fn slice_rgba(&self, z: u32, overlay: bool) -> Vec<u8> {
        let img = &self.phantom.image;
        let [nx, ny, nz] = img.dims();
        let z = (z as usize).min(nz - 1);
        let mut out = Vec::with_capacity(nx * ny * 4);
        for y in 0..ny {
            for x in 0..nx {
                let g = ((img.get(x, y, z) + 0.3) / 1.6).clamp(0.0, 1.0);
                let grey = (g * 255.0) as u8;
                let mut px = [grey, grey, grey];
                let id = self.labeling.labels[img.geometry().index(x, y, z)];
                if overlay && id > 0 {
                    let c = PALETTE[(id as usize - 1) % PALETTE.len()];
                    for k in 0..3 {
                        px[k] = ((px[k] as u16 * 2 + c[k] as u16 * 3) / 5) as u8;
                    }
                }
                out.extend_from_slice(&[px[0], px[1], px[2], 255]);
            }
        }
        out
    }
}

/// Scores `cases` phantoms whose early predictions are corrupted at
/// `rate` and `0.6 * rate`, and the final one at `0.3 * rate`, then ranks and
/// selects. Returns the records as JSON.
#[wasm_bindgen]
pub fn stability_demo(seed: u32, cases: u32, rate: f64, top_k: u32, min_score: f64) -> Result<String, String> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(format!("rate {rate} must be in [0, 1]"));
    }
    let mock = NoisyOracleMock::new(NoisyOracleConfig::new(vec![rate, 0.6 * rate, 0.3 * rate], seed as u64, ""));
    let policy = SelectionPolicy {
        top_k: top_k as usize,
        min_score,
        ..SelectionPolicy::default()
    };
    policy.validate().map_err(|e| e.to_string())?;
    let mut records = Vec::with_capacity(cases as usize);
    for i in 0..cases {
        let id = format!("case{:03}", i + 1);
        let gt = gen_phantom(&phantom_spec(seed.wrapping_mul(7919).wrapping_add(i), false, false))
            .map_err(|e| e.to_string())?
            .ground_truth;
        let view = TtaTransform::IDENTITY;
        let early = [mock.corrupt(&gt, &id, &view, rate), mock.corrupt(&gt, &id, &view, 0.6 * rate)];
        let fin = mock.corrupt(&gt, &id, &view, 0.3 * rate);
        records.push(StabilityRecord::from_masks(id, &early, &fin, policy.connectivity).map_err(|e| e.to_string())?);
    }
    let ranked = rank_and_select(&records, &policy);
    serde_json::to_string(&ranked).map_err(|e| e.to_string())
}
