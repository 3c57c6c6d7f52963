//! Labeled-set filtering and stability-ranked pseudo-label selection.
//!
//! A pseudo-label is trusted when the unlabeled case's predictions barely
//! moved between early training checkpoints and the final one, and when the
//! final mask has the expected number of connected components (one nerve
//! canal per side).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::components::{component_count, Connectivity};
use crate::error::{Error, Result};
use crate::io::CaseRecord;
use crate::metrics::dice;
use crate::volume::{ensure_same_geometry, Mask3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub case_id: String,
    /// Dice of each early checkpoint's mask against the final mask.
    pub dice_to_final: Vec<f64>,
    pub stability_score: f64,
    pub final_component_count: usize,
    #[serde(default)]
    pub selected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl StabilityRecord {
    pub fn new(case_id: impl Into<String>, dice_to_final: Vec<f64>, final_component_count: usize) -> Result<Self> {
        if dice_to_final.is_empty() {
            return Err(Error::NoEarlyMasks);
        }
        let stability_score = dice_to_final.iter().sum::<f64>() / dice_to_final.len() as f64;
        Ok(StabilityRecord {
            case_id: case_id.into(),
            dice_to_final,
            stability_score,
            final_component_count,
            selected: false,
            rank: None,
        })
    }

    /// Scores a case from its checkpoint masks.
    pub fn from_masks(
        case_id: impl Into<String>,
        early: &[Mask3D],
        final_mask: &Mask3D,
        connectivity: Connectivity,
    ) -> Result<Self> {
        let dices = early_dices(early, final_mask)?;
        StabilityRecord::new(case_id, dices, component_count(final_mask, connectivity))
    }
}

fn early_dices(early: &[Mask3D], final_mask: &Mask3D) -> Result<Vec<f64>> {
    if early.is_empty() {
        return Err(Error::NoEarlyMasks);
    }
    early
        .iter()
        .map(|m| {
            ensure_same_geometry(m.geometry(), final_mask.geometry())
                .map_err(|e| Error::GeometryMismatch(e.to_string()))?;
            dice(m, final_mask)
        })
        .collect()
}

/// Mean Dice between each early mask and the final mask.
pub fn stability_score(early: &[Mask3D], final_mask: &Mask3D) -> Result<f64> {
    let d = early_dices(early, final_mask)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub top_k: usize,
    /// Scores must be strictly greater than this.
    pub min_score: f64,
    pub required_components: usize,
    pub connectivity: Connectivity,
    /// Training fractions at which checkpoints are taken; the last is 1.
    pub checkpoint_fractions: Vec<f64>,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            top_k: 100,
            min_score: 0.9,
            required_components: 2,
            connectivity: Connectivity::TwentySix,
            checkpoint_fractions: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::InvalidParameter(format!("min_score {} outside [0, 1]", self.min_score)));
        }
        validate_fractions(&self.checkpoint_fractions)
    }

    fn eligible(&self, r: &StabilityRecord) -> bool {
        r.final_component_count == self.required_components && r.stability_score > self.min_score
    }
}

pub fn validate_fractions(f: &[f64]) -> Result<()> {
    let bad = || Error::InvalidParameter(format!("checkpoint fractions {f:?} must increase strictly in (0, 1] and end at 1"));
    if f.is_empty() || f.last() != Some(&1.0) || f[0] <= 0.0 {
        return Err(bad());
    }
    if f.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(bad());
    }
    Ok(())
}

fn rank_order(a: &StabilityRecord, b: &StabilityRecord) -> Ordering {
    b.stability_score
        .total_cmp(&a.stability_score)
        .then_with(|| a.case_id.cmp(&b.case_id))
}

/// Marks the best `min(top_k, |eligible|)` eligible records as selected.
///
/// The output is sorted by score (descending) then case id, so it does not
/// depend on input order.
pub fn rank_and_select(records: &[StabilityRecord], policy: &SelectionPolicy) -> Vec<StabilityRecord> {
    let mut out: Vec<StabilityRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            r.selected = false;
            r.rank = None;
            r
        })
        .collect();
    out.sort_by(rank_order);
    let mut next_rank = 1;
    for r in out.iter_mut() {
        if next_rank > policy.top_k {
            break;
        }
        if !r.stability_score.is_nan() && policy.eligible(r) {
            r.selected = true;
            r.rank = Some(next_rank);
            next_rank += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemotionReason {
    DisconnectedLabel,
    BlurredBoundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demotion {
    pub case_id: String,
    pub reason: DemotionReason,
    /// Component count or Dice value that triggered the demotion.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<String>,
    pub demoted: Vec<Demotion>,
    pub max_components: Option<usize>,
    pub connectivity: Option<Connectivity>,
    pub min_dice: Option<f64>,
}

impl FilterReport {
    pub fn demoted_ids(&self) -> impl Iterator<Item = &str> {
        self.demoted.iter().map(|d| d.case_id.as_str())
    }
}

/// Largest component count a dense label may have.
pub const MAX_LABEL_COMPONENTS: usize = 2;

/// Demotes labels with more than two connected components.
pub fn filter_dense_labels<'a>(
    cases: impl IntoIterator<Item = (&'a CaseRecord, &'a Mask3D)>,
    connectivity: Connectivity,
) -> FilterReport {
    let mut kept = Vec::new();
    let mut demoted = Vec::new();
    for (case, label) in cases {
        let n = component_count(label, connectivity);
        if n > MAX_LABEL_COMPONENTS {
            demoted.push(Demotion {
                case_id: case.case_id.clone(),
                reason: DemotionReason::DisconnectedLabel,
                value: n as f64,
            });
        } else {
            kept.push(case.case_id.clone());
        }
    }
    FilterReport {
        kept,
        demoted,
        max_components: Some(MAX_LABEL_COMPONENTS),
        connectivity: Some(connectivity),
        min_dice: None,
    }
}

pub const BLUR_DICE_THRESHOLD: f64 = 0.85;

/// Demotes cases whose reference prediction scores Dice strictly below
/// `threshold` against the dense label.
pub fn filter_blurred_boundaries<'a>(
    cases: impl IntoIterator<Item = (&'a CaseRecord, &'a Mask3D, &'a Mask3D)>,
    threshold: f64,
) -> Result<FilterReport> {
    let mut kept = Vec::new();
    let mut demoted = Vec::new();
    for (case, gt, pred) in cases {
        ensure_same_geometry(gt.geometry(), pred.geometry()).map_err(|e| Error::GeometryMismatch(e.to_string()))?;
        let d = dice(pred, gt)?;
        if d < threshold {
            demoted.push(Demotion {
                case_id: case.case_id.clone(),
                reason: DemotionReason::BlurredBoundary,
                value: d,
            });
        } else {
            kept.push(case.case_id.clone());
        }
    }
    Ok(FilterReport {
        kept,
        demoted,
        max_components: None,
        connectivity: None,
        min_dice: Some(threshold),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{AnnotationKind, Split};
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn rec(id: &str, score: f64, comps: usize) -> StabilityRecord {
        StabilityRecord {
            case_id: id.into(),
            dice_to_final: vec![score],
            stability_score: score,
            final_component_count: comps,
            selected: false,
            rank: None,
        }
    }

    fn case(id: &str) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            image: id.into(),
            label: Some(id.into()),
            annotation_kind: AnnotationKind::Dense,
            split: Split::Labeled,
        }
    }

    fn selected_ids(out: &[StabilityRecord]) -> Vec<(String, usize)> {
        out.iter().filter(|r| r.selected).map(|r| (r.case_id.clone(), r.rank.unwrap())).collect()
    }

    #[test]
    fn stability_examples() {
        let g = Geometry::new([4, 1, 1], [1.0; 3]).unwrap();
        let fin = Mask3D::new(g, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(stability_score(&[fin.clone(), fin.clone()], &fin).unwrap(), 1.0);
        assert_eq!(stability_score(&[Mask3D::empty(g), Mask3D::empty(g)], &fin).unwrap(), 0.0);
        assert!(matches!(stability_score(&[], &fin), Err(Error::NoEarlyMasks)));
        let other = Mask3D::empty(Geometry::new([2, 2, 1], [1.0; 3]).unwrap());
        assert!(matches!(stability_score(&[other], &fin), Err(Error::GeometryMismatch(_))));

        let r = StabilityRecord::new("a", vec![0.8, 1.0], 2).unwrap();
        assert!((r.stability_score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn selection_examples() {
        let p = SelectionPolicy::default();
        let out = rank_and_select(&[rec("a", 0.95, 2), rec("b", 0.97, 2), rec("c", 0.91, 2)], &p);
        assert_eq!(selected_ids(&out), vec![("b".into(), 1), ("a".into(), 2), ("c".into(), 3)]);

        let out = rank_and_select(&[rec("x", 0.95, 3), rec("y", 0.99, 1)], &p);
        assert!(out.iter().all(|r| !r.selected && r.rank.is_none()));

        let out = rank_and_select(&[rec("edge", 0.9, 2)], &p);
        assert!(!out[0].selected);

        let out = rank_and_select(&[rec("P7", 0.93, 2), rec("P2", 0.93, 2)], &p);
        assert_eq!(selected_ids(&out), vec![("P2".into(), 1), ("P7".into(), 2)]);
    }

    #[test]
    fn top_k_caps_selection() {
        let p = SelectionPolicy {
            top_k: 2,
            ..SelectionPolicy::default()
        };
        let recs: Vec<_> = (0..5).map(|i| rec(&format!("c{i}"), 0.91 + i as f64 * 0.01, 2)).collect();
        let out = rank_and_select(&recs, &p);
        assert_eq!(selected_ids(&out), vec![("c4".into(), 1), ("c3".into(), 2)]);
        let none = rank_and_select(&recs, &SelectionPolicy { top_k: 0, ..p });
        assert!(none.iter().all(|r| !r.selected));
    }

    #[test]
    fn nan_scores_never_selected() {
        let out = rank_and_select(&[rec("n", f64::NAN, 2), rec("ok", 0.95, 2)], &SelectionPolicy::default());
        assert_eq!(selected_ids(&out), vec![("ok".into(), 1)]);
    }

    #[test]
    fn fractions_validation() {
        assert!(validate_fractions(&[1.0 / 3.0, 2.0 / 3.0, 1.0]).is_ok());
        assert!(validate_fractions(&[0.5, 0.5, 1.0]).is_err());
        assert!(validate_fractions(&[0.5, 0.9]).is_err());
        assert!(validate_fractions(&[1.0]).is_ok());
        assert!(validate_fractions(&[]).is_err());
    }

    #[test]
    fn dense_label_filter() {
        let g = Geometry::new([9, 1, 1], [1.0; 3]).unwrap();
        let one = Mask3D::from_fn(g, |x, _, _| x < 3);
        let two = Mask3D::from_fn(g, |x, _, _| x == 0 || x == 4);
        let three = Mask3D::from_fn(g, |x, _, _| x % 4 == 0);
        let cases = [case("one"), case("two"), case("three")];
        let masks = [one, two, three];
        let r = filter_dense_labels(cases.iter().zip(masks.iter()), Connectivity::TwentySix);
        assert_eq!(r.kept, vec!["one", "two"]);
        assert_eq!(r.demoted.len(), 1);
        assert_eq!(r.demoted[0].case_id, "three");
        assert_eq!(r.demoted[0].reason, DemotionReason::DisconnectedLabel);
    }

    #[test]
    fn blurred_filter_threshold() {
        // |gt| = 50; pred covers `hit` voxels of it and nothing else.
        let g = Geometry::new([50, 1, 1], [1.0; 3]).unwrap();
        let gt = Mask3D::from_fn(g, |_, _, _| true);
        let pred_with = |hit: usize| Mask3D::from_fn(g, |x, _, _| x < hit);
        // dice = 2h / (50 + h): h = 38 -> 0.864, h = 36 -> 0.837
        let (hi, lo) = (pred_with(38), pred_with(36));
        assert!(dice(&hi, &gt).unwrap() > 0.85 && dice(&lo, &gt).unwrap() < 0.85);
        let cases = [case("ok"), case("blur")];
        let r = filter_blurred_boundaries(
            [(&cases[0], &gt, &hi), (&cases[1], &gt, &lo)],
            BLUR_DICE_THRESHOLD,
        )
        .unwrap();
        assert_eq!(r.kept, vec!["ok"]);
        assert_eq!(r.demoted[0].reason, DemotionReason::BlurredBoundary);

        let bad = Mask3D::empty(Geometry::new([10, 5, 1], [1.0; 3]).unwrap());
        assert!(filter_blurred_boundaries([(&cases[0], &gt, &bad)], 0.85).is_err());
    }

    fn arb_records() -> impl Strategy<Value = Vec<StabilityRecord>> {
        proptest::collection::vec(
            (0usize..6, prop_oneof![Just(0.9), Just(0.93), 0.0f64..=1.0], 0usize..4),
            0..40,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (bucket, s, c))| rec(&format!("c{bucket}-{i:02}"), s, c))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn selection_invariants(records in arb_records(), top_k in 0usize..10, min_score in 0.8f64..0.99, seed in any::<u64>()) {
            let base = SelectionPolicy { top_k, min_score, ..SelectionPolicy::default() };
            let out = rank_and_select(&records, &base);
            let eligible = records.iter().filter(|r| r.final_component_count == 2 && r.stability_score > min_score).count();
            let chosen: Vec<_> = out.iter().filter(|r| r.selected).collect();
            prop_assert!(chosen.len() == top_k.min(eligible));
            for r in &chosen {
                prop_assert_eq!(r.final_component_count, 2);
                prop_assert!(r.stability_score > min_score);
            }

            // permutation invariance
            let mut shuffled = records.clone();
            let n = shuffled.len();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(rank_and_select(&shuffled, &base), out.clone());

            // tightening never adds a case
            let sel: std::collections::HashSet<_> = chosen.iter().map(|r| r.case_id.clone()).collect();
            let tighter = SelectionPolicy { top_k: top_k.saturating_sub(1), min_score: (min_score + 0.02).min(1.0), ..base.clone() };
            for r in rank_and_select(&records, &tighter).iter().filter(|r| r.selected) {
                prop_assert!(sel.contains(&r.case_id));
            }
        }
    }
}
