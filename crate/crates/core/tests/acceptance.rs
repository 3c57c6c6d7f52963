//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Every check compares the library against an independent oracle written
//! here, or against numbers fixed in advance.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selret_core::augment::{ensemble, TtaTransform};
use selret_core::bridge::{NoisyOracleConfig, SegmenterSpec, ThresholdConfig};
use selret_core::components::{component_count, label_components, Connectivity};
use selret_core::io;
use selret_core::metrics::{dice, hd95};
use selret_core::phantom::{gen_dataset, DatasetCounts, DatasetSpec, PhantomSpec, SynthTruth, MANIFEST_FILE};
use selret_core::pipeline::{BlurReference, Pipeline, PipelineConfig, Stage, TtaSet};
use selret_core::preprocess::{resample_mask, resample_volume};
use selret_core::selection::{rank_and_select, SelectionPolicy, StabilityRecord};
use selret_core::{Error, Geometry, Mask3D, ProbabilityMap, Volume3D};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s as f64, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn random_mask<R: Rng>(rng: &mut R, dims: [usize; 3], spacing: [f64; 3], density: f64) -> Mask3D {
    let g = Geometry::new(dims, spacing).unwrap();
    Mask3D::from_fn(g, |_, _, _| rng.random_bool(density))
}

// ------------------------------------------------------------------ metrics

fn oracle_boundary(m: &Mask3D) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.is_set(x, y, z) {
                    continue;
                }
                let p = [x as isize, y as isize, z as isize];
                let exposed = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|d| {
                    let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                    let outside = q[0] < 0
                        || q[1] < 0
                        || q[2] < 0
                        || q[0] >= nx as isize
                        || q[1] >= ny as isize
                        || q[2] >= nz as isize;
                    outside || !m.is_set(q[0] as usize, q[1] as usize, q[2] as usize)
                });
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn oracle_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// All-pairs boundary distances pooled over both directions.
fn oracle_hd95(a: &Mask3D, b: &Mask3D) -> Option<f64> {
    let s = a.spacing();
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    all.extend(bb.iter().map(|p| nearest(p, &ba)));
    Some(oracle_percentile(all, 95.0))
}

fn oracle_dice(a: &Mask3D, b: &Mask3D) -> Ratio<i64> {
    let inter = a.as_slice().iter().zip(b.as_slice()).filter(|(x, y)| **x != 0 && **y != 0).count() as i64;
    let total = (a.count() + b.count()) as i64;
    if total == 0 {
        Ratio::from_integer(1)
    } else {
        Ratio::new(2 * inter, total)
    }
}

fn compare_metrics(a: &Mask3D, b: &Mask3D, tag: &str) -> Result<(), String> {
    let exact = oracle_dice(a, b);
    let expected = *exact.numer() as f64 / *exact.denom() as f64;
    let got = dice(a, b).map_err(|e| format!("{tag}: dice error {e}"))?;
    check((got - expected).abs() <= 1e-12, || format!("{tag}: dice {got} vs exact {exact}"))?;
    match (hd95(a, b), oracle_hd95(a, b)) {
        (Ok(h), Some(o)) => check((h - o).abs() <= 1e-9, || format!("{tag}: hd95 {h} vs oracle {o}")),
        (Err(Error::EmptyMask), None) => Ok(()),
        (got, want) => Err(format!("{tag}: hd95 {got:?} vs oracle {want:?}")),
    }
}

fn metric_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d65_7472);
    let spacings = [[1.0, 1.0, 1.0], [0.5, 1.0, 2.0], [0.3, 0.3, 1.25], [1.5, 0.7, 0.9]];
    for trial in 0..200 {
        let dims = [rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=12)];
        let spacing = spacings[trial % spacings.len()];
        let (da, db) = (rng.random_range(0.02..0.8), rng.random_range(0.02..0.8));
        let a = random_mask(&mut rng, dims, spacing, da);
        let b = random_mask(&mut rng, dims, spacing, db);
        compare_metrics(&a, &b, &format!("trial {trial} {dims:?}"))?;
    }
    // fixed edge fixtures
    let g = Geometry::new([12, 12, 12], [0.5, 1.0, 1.0]).unwrap();
    let empty = Mask3D::empty(g);
    let full = Mask3D::from_fn(g, |_, _, _| true);
    let corner = Mask3D::from_fn(g, |x, y, z| x + y + z == 0);
    let far = Mask3D::from_fn(g, |x, y, z| (x, y, z) == (11, 11, 11));
    let slab = Mask3D::from_fn(g, |x, _, _| x < 6);
    let fixtures = [
        ("empty/empty", &empty, &empty),
        ("empty/full", &empty, &full),
        ("full/full", &full, &full),
        ("corner/far", &corner, &far),
        ("full/corner", &full, &corner),
        ("slab/full", &slab, &full),
    ];
    for (tag, a, b) in fixtures {
        compare_metrics(a, b, tag)?;
    }
    let single = Mask3D::from_fn(Geometry::new([4, 1, 1], [0.5, 1.0, 1.0]).unwrap(), |x, _, _| x == 0);
    let other = Mask3D::from_fn(*single.geometry(), |x, _, _| x == 3);
    check(hd95(&single, &other).unwrap() == 1.5, || "single voxels 3 apart at 0.5 mm".into())?;
    within(start.elapsed(), 30)?;
    Ok(format!("200 random pairs + {} fixtures in {:.2}s", fixtures.len(), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- components

fn flood_fill(m: &Mask3D, conn: Connectivity) -> Vec<u32> {
    let [nx, ny, nz] = m.dims();
    let g = m.geometry();
    let offsets: Vec<[isize; 3]> = {
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = [dx, dy, dz].iter().filter(|d| **d != 0).count();
                    let limit = match conn {
                        Connectivity::Six => 1,
                        Connectivity::Eighteen => 2,
                        Connectivity::TwentySix => 3,
                    };
                    if nonzero > 0 && nonzero <= limit {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    };
    let mut labels = vec![0u32; m.len()];
    let mut next = 0;
    for i in 0..m.len() {
        if m.as_slice()[i] == 0 || labels[i] != 0 {
            continue;
        }
        next += 1;
        labels[i] = next;
        let mut stack = vec![i];
        while let Some(j) = stack.pop() {
            let [x, y, z] = g.coords(j);
            for o in &offsets {
                let (px, py, pz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                if px < 0 || py < 0 || pz < 0 || px >= nx as isize || py >= ny as isize || pz >= nz as isize {
                    continue;
                }
                let k = g.index(px as usize, py as usize, pz as usize);
                if m.as_slice()[k] != 0 && labels[k] == 0 {
                    labels[k] = next;
                    stack.push(k);
                }
            }
        }
    }
    labels
}

/// Same partition up to a relabeling.
fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut ab: HashMap<u32, u32> = HashMap::new();
    let mut ba: HashMap<u32, u32> = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x
    })
}

fn ccl_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6363_6c00);
    for trial in 0..200 {
        let density = rng.random_range(0.05..0.6);
        let m = random_mask(&mut rng, [32, 32, 32], [1.0; 3], density);
        let mut counts = BTreeMap::new();
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let got = label_components(&m, conn);
            let want = flood_fill(&m, conn);
            check(same_partition(&got.labels, &want), || format!("trial {trial}: partition differs at {conn}"))?;
            let n_oracle = want.iter().copied().max().unwrap_or(0) as usize;
            check(got.count == n_oracle, || format!("trial {trial}: count {} vs {n_oracle} at {conn}", got.count))?;
            counts.insert(u8::from(conn), got.count);
        }
        check(counts[&26] <= counts[&6], || format!("trial {trial}: count(26) {} > count(6) {}", counts[&26], counts[&6]))?;
    }
    within(start.elapsed(), 60)?;
    Ok(format!("200 masks of 32^3 at 6 and 26 in {:.2}s", start.elapsed().as_secs_f64()))
}

// ----------------------------------------------------- dataset reconstruction

fn dataset_reconstruction(scratch: &Path) -> Outcome {
    let data = scratch.join("recon-data");
    let spec = DatasetSpec {
        phantom: PhantomSpec {
            dims: [32, 40, 20],
            ..PhantomSpec::default()
        },
        counts: DatasetCounts {
            labeled: 153,
            unlabeled: 290,
            heldout: 0,
            n_disconnected: 2,
            n_blurred: 40,
        },
        seed: 2024,
        blur: selret_core::phantom::default_strong_blur(),
        degrade: selret_core::phantom::DegradeLabel { drop_segments: 1 },
    };
    gen_dataset(&spec, &data).map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::new(
        data.join(MANIFEST_FILE),
        SegmenterSpec::ThresholdMock(ThresholdConfig::default()),
        scratch.join("recon-run"),
    );
    cfg.blur_filter.reference = BlurReference::CrossValidation {
        folds: 5,
        segmenter: Some(SegmenterSpec::ThresholdMock(ThresholdConfig::default())),
    };
    cfg.workers = 4;
    let mut p = Pipeline::start(cfg).map_err(|e| e.to_string())?;
    check(p.step().map_err(|e| e.to_string())? == Stage::Prepare, || "first stage is not prepare".into())?;
    let prepared = p.state().prepared.clone().ok_or("no prepared dataset")?;
    let (nl, nu) = (prepared.labeled.len(), prepared.unlabeled.len());
    check(nl == 111 && nu == 332, || format!("{nl} labeled / {nu} unlabeled, expected 111 / 332"))?;

    // the demoted cases are exactly the ones the generator damaged
    let truth = SynthTruth::load(&data).map_err(|e| e.to_string())?;
    let damaged: Vec<&str> = truth
        .cases
        .iter()
        .filter(|c| c.degraded || c.blurred)
        .map(|c| c.case_id.as_str())
        .collect();
    let mut demoted: Vec<&str> = prepared.label_filter.demoted_ids().collect();
    demoted.extend(prepared.blur_filter.as_ref().map(|r| r.demoted_ids().collect::<Vec<_>>()).unwrap_or_default());
    demoted.sort();
    let mut expected = damaged.clone();
    expected.sort();
    check(demoted == expected, || format!("demoted {demoted:?} differ from damaged {expected:?}"))?;
    Ok(format!("153 dense + 290 unlabeled -> {nl} labeled + {nu} unlabeled"))
}

// -------------------------------------------------------------- selection

fn record(id: String, score: f64, comps: usize) -> StabilityRecord {
    let mut r = StabilityRecord::new(id, vec![score], comps).unwrap();
    r.stability_score = score;
    r
}

fn selection_policy_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7365_6c00);
    let policy = SelectionPolicy::default();

    // strict threshold and connectivity exclusion on fixed records
    let fixed = vec![
        record("at".into(), 0.9, 2),
        record("above".into(), 0.9000001, 2),
        record("one_comp".into(), 0.99, 1),
        record("three_comp".into(), 0.99, 3),
    ];
    let sel: Vec<String> = rank_and_select(&fixed, &policy).into_iter().filter(|r| r.selected).map(|r| r.case_id).collect();
    check(sel == ["above"], || format!("fixed records selected {sel:?}"))?;

    let mut trials = 0;
    for _ in 0..500 {
        let n = rng.random_range(0..60);
        // coarse scores force ties
        let records: Vec<StabilityRecord> = (0..n)
            .map(|i| {
                let score = (rng.random_range(80..=100) as f64) / 100.0;
                record(format!("c{:03}", rng.random_range(0..1000) * 100 + i), score, rng.random_range(0..=4))
            })
            .collect();
        let policy = SelectionPolicy {
            top_k: rng.random_range(0..20),
            ..SelectionPolicy::default()
        };
        let out = rank_and_select(&records, &policy);
        let selected: Vec<&StabilityRecord> = out.iter().filter(|r| r.selected).collect();
        let eligible = records.iter().filter(|r| r.final_component_count == 2 && r.stability_score > 0.9).count();
        check(selected.len() == policy.top_k.min(eligible), || {
            format!("selected {} with K={} and {eligible} eligible", selected.len(), policy.top_k)
        })?;
        for r in &selected {
            check(r.final_component_count == 2 && r.stability_score > 0.9, || format!("ineligible {r:?} selected"))?;
        }
        // the selected set is the top of the eligible ones in (score desc, id asc) order
        let mut oracle: Vec<&StabilityRecord> =
            records.iter().filter(|r| r.final_component_count == 2 && r.stability_score > 0.9).collect();
        oracle.sort_by(|a, b| b.stability_score.partial_cmp(&a.stability_score).unwrap().then(a.case_id.cmp(&b.case_id)));
        let want: Vec<&str> = oracle.iter().take(policy.top_k).map(|r| r.case_id.as_str()).collect();
        let got: Vec<&str> = selected.iter().map(|r| r.case_id.as_str()).collect();
        check(got == want, || format!("tie-break order {got:?} vs {want:?}"))?;
        let ranks: Vec<usize> = selected.iter().map(|r| r.rank.unwrap()).collect();
        check(ranks == (1..=selected.len()).collect::<Vec<_>>(), || format!("ranks {ranks:?}"))?;
        // permutation invariance
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        check(rank_and_select(&shuffled, &policy) == out, || "result depends on input order".into())?;
        trials += 1;
    }
    Ok(format!("fixed boundary cases + {trials} randomized trials"))
}

// --------------------------------------------------------------------- TTA

fn tta_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7474_6100);
    let transforms = TtaTransform::all();
    check(transforms.len() == 32, || format!("{} transforms", transforms.len()))?;
    let mut distinct = std::collections::BTreeSet::new();
    for dims in [[5, 7, 3], [8, 8, 8], [1, 6, 2], [9, 4, 5]] {
        let g = Geometry::new(dims, [0.5, 0.8, 1.3]).unwrap();
        let v = Volume3D::from_fn(g, |_, _, _| rng.random_range(-5.0f32..5.0)).unwrap();
        let m = Mask3D::from_fn(g, |_, _, _| rng.random_bool(0.4));
        let p = ProbabilityMap::new(Volume3D::from_fn(g, |_, _, _| rng.random::<f32>()).unwrap()).unwrap();
        for t in &transforms {
            let fv = t.forward(&v);
            let back = t.inverse(&fv);
            let bits = |x: &Volume3D| x.as_slice().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            check(bits(&back) == bits(&v) && back.geometry() == v.geometry(), || format!("{} volume round trip", t.tag()))?;
            check(t.inverse(&t.forward(&m)) == m, || format!("{} mask round trip", t.tag()))?;
            let pb = selret_core::augment::tta_inverse(&ProbabilityMap::new(t.forward(p.volume())).unwrap(), t);
            check(pb == p, || format!("{} probability round trip", t.tag()))?;
            if dims == [8, 8, 8] {
                distinct.insert(bits(&fv));
            }
        }
    }
    // flipping x and y equals a half turn, so the 32 combinations realize 16 maps
    check(distinct.len() == 16, || format!("{} distinct views of a random cube, expected 16", distinct.len()))?;
    let tags: std::collections::BTreeSet<String> = transforms.iter().map(|t| t.tag()).collect();
    check(tags.len() == 32, || "tags are not unique".into())?;

    let g = Geometry::new([6, 5, 4], [1.0; 3]).unwrap();
    for members in [1, 2, 5, 32] {
        let maps: Vec<ProbabilityMap> = (0..members)
            .map(|_| ProbabilityMap::new(Volume3D::from_fn(g, |_, _, _| rng.random::<f32>()).unwrap()).unwrap())
            .collect();
        for thr in [0.25f32, 0.5, 0.75] {
            let got = ensemble(&maps, thr).map_err(|e| e.to_string())?;
            for i in 0..g.voxel_count() {
                let mut sum = 0.0f64;
                for m in &maps {
                    sum += m.as_slice()[i] as f64;
                }
                let want = sum / members as f64 >= thr as f64;
                check((got.as_slice()[i] != 0) == want, || format!("ensemble voxel {i}, {members} members, thr {thr}"))?;
            }
        }
    }
    Ok("32 transforms round-trip bitwise on 4 grids; ensemble matches the mean oracle".into())
}

// -------------------------------------------------------------- resampling

fn resampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7265_7300);
    let s = [0.7, 1.3, 2.0];
    let g = Geometry::new([9, 7, 5], s).unwrap();
    let v = Volume3D::from_fn(g, |_, _, _| rng.random_range(-100.0f32..100.0)).unwrap();
    let m = Mask3D::from_fn(g, |_, _, _| rng.random_bool(0.3));
    let rv = resample_volume(&v, s).map_err(|e| e.to_string())?;
    let max_err = v.as_slice().iter().zip(rv.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    check(rv.dims() == v.dims() && max_err <= 1e-6, || format!("identity volume error {max_err}"))?;
    check(resample_mask(&m, s).map_err(|e| e.to_string())? == m, || "identity mask changed".into())?;

    let coarse = Geometry::new([10, 6, 3], [2.0, 2.0, 2.0]).unwrap();
    let cv = Volume3D::constant(coarse, 1.0).unwrap();
    let fine = resample_volume(&cv, [1.0; 3]).map_err(|e| e.to_string())?;
    let fine_m = resample_mask(&Mask3D::empty(coarse), [1.0; 3]).map_err(|e| e.to_string())?;
    check(fine.dims() == [20, 12, 6] && fine_m.dims() == [20, 12, 6], || format!("2mm -> 1mm gave {:?}", fine.dims()))?;

    // linear ramp in physical coordinates of voxel centers
    let (a, b, c, d) = (0.37, -1.1, 0.52, 3.0);
    let ramp = |p: [f64; 3]| a * p[0] + b * p[1] + c * p[2] + d;
    let src_s = [1.0, 1.5, 2.0];
    let src = Geometry::new([16, 12, 9], src_s).unwrap();
    let vol = Volume3D::from_fn(src, |x, y, z| {
        ramp([(x as f64 + 0.5) * src_s[0], (y as f64 + 0.5) * src_s[1], (z as f64 + 0.5) * src_s[2]]) as f32
    })
    .unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for target in [[0.5, 0.75, 1.0], [1.6, 1.1, 0.9], [2.0, 3.0, 4.0]] {
        let out = resample_volume(&vol, target).map_err(|e| e.to_string())?;
        let [nx, ny, nz] = out.dims();
        let dims = src.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [(x as f64 + 0.5) * target[0], (y as f64 + 0.5) * target[1], (z as f64 + 0.5) * target[2]];
                    // off-boundary: the center lies between the first and last input centers
                    let inside = (0..3).all(|k| {
                        let c = p[k] / src_s[k] - 0.5;
                        c >= 0.0 && c <= (dims[k] - 1) as f64
                    });
                    if inside {
                        worst = worst.max((out.get(x, y, z) as f64 - ramp(p)).abs());
                        checked += 1;
                    }
                }
            }
        }
    }
    check(worst <= 1e-5, || format!("ramp error {worst}"))?;
    Ok(format!("identity exact; 2mm->1mm doubles dims; ramp error {worst:.2e} over {checked} voxels"))
}

// ---------------------------------------------------------------- end to end

fn e2e_dataset(dir: &Path, labeled: usize, unlabeled: usize, heldout: usize, seed: u64) -> Result<PathBuf, String> {
    let spec = DatasetSpec {
        phantom: PhantomSpec {
            dims: [32, 40, 20],
            ..PhantomSpec::default()
        },
        counts: DatasetCounts {
            labeled,
            unlabeled,
            heldout,
            n_disconnected: 0,
            n_blurred: 0,
        },
        seed,
        blur: selret_core::phantom::default_strong_blur(),
        degrade: selret_core::phantom::DegradeLabel { drop_segments: 1 },
    };
    gen_dataset(&spec, dir).map_err(|e| e.to_string())?;
    Ok(dir.join(MANIFEST_FILE))
}

fn oracle_config(manifest: &Path, truth: &Path, out: &Path, top_k: usize) -> PipelineConfig {
    let mut oracle = NoisyOracleConfig::new(vec![0.08, 0.07, 0.06], 17, truth);
    oracle.improvement = 1.0;
    let mut cfg = PipelineConfig::new(manifest, SegmenterSpec::NoisyOracle(oracle), out);
    cfg.selection.top_k = top_k;
    cfg.seed = 5;
    cfg.workers = 4;
    // clean phantoms: no blurred ends to filter
    cfg.blur_filter.enabled = false;
    cfg
}

fn end_to_end(scratch: &Path) -> Outcome {
    let start = Instant::now();
    let data = scratch.join("e2e-data");
    let manifest = e2e_dataset(&data, 10, 30, 10, 77)?;
    let mut summaries = Vec::new();
    let mut states = Vec::new();
    for run in ["e2e-a", "e2e-b"] {
        let cfg = oracle_config(&manifest, &data.join("truth"), &scratch.join(run), 10);
        let (state, summary) = selret_core::pipeline::run_pipeline(cfg).map_err(|e| e.to_string())?;
        summaries.push(summary.to_json());
        states.push(state);
    }
    check(summaries[0] == summaries[1], || "summary JSON differs between identical runs".into())?;
    let state = &states[0];
    let summary: selret_core::pipeline::Summary = serde_json::from_str(&summaries[0]).unwrap();
    let dsc: Vec<f64> = summary.rows.iter().map(|r| r.heldout.dsc.unwrap().mean).collect();
    check(dsc.len() == 3, || format!("{} rows", dsc.len()))?;
    for w in dsc.windows(2) {
        check(w[1] >= w[0] - 0.005, || format!("heldout DSC dropped: {dsc:?}"))?;
    }
    check(dsc[2] - dsc[0] >= 0.01, || format!("total DSC gain {:.4} < 0.01: {dsc:?}", dsc[2] - dsc[0]))?;
    let mut n_pseudo = 0;
    for it in &state.iterations {
        check(!it.selected.is_empty(), || format!("iteration {} selected nothing", it.index))?;
        for id in &it.selected {
            let m = io::read_mask(&it.pseudo_labels[id]).map_err(|e| e.to_string())?;
            let n = component_count(&m, Connectivity::TwentySix);
            check(n == 2, || format!("pseudo-mask {id} of iteration {} has {n} components", it.index))?;
            n_pseudo += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, 300)?;
    let sizes: Vec<&str> = summary.rows.iter().map(|r| r.data_size.as_str()).collect();
    Ok(format!(
        "DSC {} ({}); {n_pseudo} pseudo-masks all 2-component; 2 runs identical; {:.1}s",
        dsc.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join(" -> "),
        sizes.join(", "),
        elapsed.as_secs_f64()
    ))
}

// ------------------------------------------------------------------ resume

fn resume_case(scratch: &Path, tag: &str, base: &PipelineConfig) -> Result<usize, String> {
    let run = |out: PathBuf| {
        let mut c = base.clone();
        c.output_root = out;
        c
    };
    let mut full = Pipeline::start(run(scratch.join(format!("{tag}-full")))).map_err(|e| e.to_string())?;
    let reference = full.run().map_err(|e| e.to_string())?.to_json();
    let mut stages = 0;
    {
        let mut probe = Pipeline::start(run(scratch.join(format!("{tag}-probe")))).map_err(|e| e.to_string())?;
        while probe.step().map_err(|e| e.to_string())? != Stage::Done {
            stages += 1;
        }
    }
    for stop in 0..=stages {
        let out = scratch.join(format!("{tag}-stop{stop}"));
        {
            let mut p = Pipeline::start(run(out.clone())).map_err(|e| e.to_string())?;
            for _ in 0..stop {
                p.step().map_err(|e| e.to_string())?;
            }
        }
        // a crash inside the next stage leaves an unfinished job behind
        let jobs = out.join("segmenter").join("jobs");
        if let Ok(entries) = std::fs::read_dir(&jobs) {
            let mut dirs: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
            dirs.sort();
            if let Some(d) = dirs.first() {
                let _ = std::fs::remove_file(d.join("done"));
                let _ = std::fs::remove_dir_all(d.join("out"));
            }
        }
        let mut resumed = Pipeline::resume(&out.join(selret_core::pipeline::STATE_FILE)).map_err(|e| e.to_string())?;
        let got = resumed.run().map_err(|e| e.to_string())?.to_json();
        if got != reference {
            let _ = std::fs::write(out.join("expected.json"), &reference);
            let _ = std::fs::write(out.join("got.json"), &got);
            return Err(format!("{tag}: resuming after {stop} stage(s) changed the summary"));
        }
    }
    Ok(stages)
}

fn resume_equivalence(scratch: &Path) -> Outcome {
    let data = scratch.join("resume-data");
    let manifest = e2e_dataset(&data, 6, 10, 4, 91)?;
    let mut oracle = oracle_config(&manifest, &data.join("truth"), Path::new("unused"), 4);
    oracle.tta_set = TtaSet::Flips;
    let mut threshold = PipelineConfig::new(
        &manifest,
        SegmenterSpec::ThresholdMock(ThresholdConfig::default()),
        "unused",
    );
    threshold.selection.top_k = 4;
    threshold.selection.min_score = 0.5;
    threshold.tta_set = TtaSet::Flips;
    let a = resume_case(scratch, "oracle", &oracle)?;
    let b = resume_case(scratch, "threshold", &threshold)?;
    Ok(format!("noisy oracle ({a} stages) and threshold mock ({b} stages): every interruption point resumes identically"))
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    // ACCEPTANCE_KEEP=1 leaves the run directories behind for inspection
    let keep = std::env::var_os("ACCEPTANCE_KEEP").is_some();
    let root_buf = scratch.path().to_path_buf();
    let _guard = if keep {
        println!("keeping {}", scratch.keep().display());
        None
    } else {
        Some(scratch)
    };
    let root = root_buf.as_path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("metric oracle equivalence", Box::new(metric_oracle_equivalence)),
        ("CCL oracle equivalence", Box::new(ccl_oracle_equivalence)),
        ("dataset-reconstruction arithmetic", Box::new(|| dataset_reconstruction(root))),
        ("selection policy suite", Box::new(selection_policy_suite)),
        ("TTA exactness", Box::new(tta_exactness)),
        ("resampling", Box::new(resampling)),
        ("end-to-end synthetic self-training", Box::new(|| end_to_end(root))),
        ("resume equivalence", Box::new(|| resume_equivalence(root))),
    ];
    let mut failed = 0;
    println!();
    for (name, f) in &criteria {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("\nacceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
