//! Panoptic Quality and mean IoU.
//!
//! PQ follows the standard definition: predicted and ground-truth segments of
//! the same class match iff their IoU is strictly greater than 0.5 (which
//! makes the matching unique), and per class
//! `PQ = sum(matched IoU) / (TP + FP/2 + FN/2)`. Aggregates are means over the
//! requested class subset, excluding classes with neither ground-truth nor
//! predicted segments. mIoU is computed on the semantic grids alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{iou, segments_from_map, ClassId, LabelSpace, PanopticMap, Segment};

/// Outcome of matching predicted segments against ground-truth segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMatching {
    /// `(pred index, gt index, IoU)` for every matched pair.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Match segments of equal class at IoU strictly above 0.5.
///
/// The strict threshold guarantees each segment participates in at most one
/// qualifying pair, so a single scan finds the unique matching.
pub fn match_segments(pred: &[Segment], gt: &[Segment]) -> SegmentMatching {
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            if gt_used[gi] || p.class_id != g.class_id {
                continue;
            }
            let v = iou(&p.pixels, &g.pixels);
            if v > 0.5 {
                pairs.push((pi, gi, v));
                pred_used[pi] = true;
                gt_used[gi] = true;
                break;
            }
        }
    }
    SegmentMatching {
        pairs,
        unmatched_pred: (0..pred.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_gt: (0..gt.len()).filter(|&i| !gt_used[i]).collect(),
    }
}

/// Per-class PQ tallies: matched-pair IoU sum and TP/FP/FN counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPqStats {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassPqStats {
    pub fn pq(&self) -> Option<f64> {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            None
        } else {
            Some(self.iou_sum / denom)
        }
    }
}

/// Per-class semantic-IoU tallies (instances ignored).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassIouStats {
    pub intersection: u64,
    pub union: u64,
}

impl ClassIouStats {
    pub fn iou(&self) -> Option<f64> {
        if self.union == 0 {
            None
        } else {
            Some(self.intersection as f64 / self.union as f64)
        }
    }
}

/// Accumulates PQ and semantic-IoU tallies over any number of map pairs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalAccumulator {
    pub pq: BTreeMap<ClassId, ClassPqStats>,
    pub iou: BTreeMap<ClassId, ClassIouStats>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one prediction/ground-truth pair over the same canvas.
    pub fn add_pair(
        &mut self,
        pred: &PanopticMap,
        gt: &PanopticMap,
        labels: &LabelSpace,
    ) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(format!(
                "canvas mismatch: pred {}x{} vs gt {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let pred_segs = segments_from_map(pred, labels)?;
        let gt_segs = segments_from_map(gt, labels)?;
        let matching = match_segments(&pred_segs, &gt_segs);
        for &(pi, _, v) in &matching.pairs {
            let e = self.pq.entry(pred_segs[pi].class_id).or_default();
            e.tp += 1;
            e.iou_sum += v;
        }
        for &pi in &matching.unmatched_pred {
            self.pq.entry(pred_segs[pi].class_id).or_default().fp += 1;
        }
        for &gi in &matching.unmatched_gt {
            self.pq.entry(gt_segs[gi].class_id).or_default().fn_ += 1;
        }
        for i in 0..pred.semantic().len() {
            let (p, g) = (pred.semantic()[i], gt.semantic()[i]);
            if p != 0 {
                let e = self.iou.entry(p).or_default();
                e.union += 1;
                if p == g {
                    e.intersection += 1;
                }
            }
            if g != 0 && g != p {
                self.iou.entry(g).or_default().union += 1;
            }
        }
        Ok(())
    }

    fn mean_pq(&self, classes: &BTreeSet<ClassId>) -> Option<f64> {
        let vals: Vec<f64> = classes
            .iter()
            .filter_map(|c| self.pq.get(c).and_then(|s| s.pq()))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    fn mean_iou(&self, classes: &BTreeSet<ClassId>) -> Option<f64> {
        let vals: Vec<f64> = classes
            .iter()
            .filter_map(|c| self.iou.get(c).and_then(|s| s.iou()))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Aggregate into a report: `base`/`new` are the class subsets the caller
    /// wants broken out; `all` is their union.
    pub fn report(
        &self,
        base: &BTreeSet<ClassId>,
        new: &BTreeSet<ClassId>,
    ) -> MetricReport {
        let all: BTreeSet<ClassId> = base.union(new).copied().collect();
        let per_class_pq: BTreeMap<ClassId, f64> = all
            .iter()
            .filter_map(|&c| self.pq.get(&c).and_then(|s| s.pq()).map(|v| (c, v)))
            .collect();
        let per_class_iou: BTreeMap<ClassId, f64> = all
            .iter()
            .filter_map(|&c| self.iou.get(&c).and_then(|s| s.iou()).map(|v| (c, v)))
            .collect();
        let counts: BTreeMap<ClassId, (u64, u64, u64)> = all
            .iter()
            .filter_map(|&c| self.pq.get(&c).map(|s| (c, (s.tp, s.fp, s.fn_))))
            .collect();
        MetricReport {
            per_class_pq,
            per_class_iou,
            counts,
            pq_base: self.mean_pq(base),
            pq_new: if new.is_empty() { None } else { self.mean_pq(new) },
            pq_all: self.mean_pq(&all),
            miou_base: self.mean_iou(base),
            miou_new: if new.is_empty() { None } else { self.mean_iou(new) },
            miou_all: self.mean_iou(&all),
        }
    }
}

/// Aggregated evaluation over a class split. Absent aggregates (e.g. `pq_new`
/// before any incremental class exists) are `None` and render as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_pq: BTreeMap<ClassId, f64>,
    pub per_class_iou: BTreeMap<ClassId, f64>,
    /// Per class `(TP, FP, FN)`.
    pub counts: BTreeMap<ClassId, (u64, u64, u64)>,
    pub pq_base: Option<f64>,
    pub pq_new: Option<f64>,
    pub pq_all: Option<f64>,
    pub miou_base: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
}

impl MetricReport {
    /// Flat key-value view used by the CSV and JSON renderings.
    pub fn kv_pairs(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![
            ("pq_base".to_string(), self.pq_base),
            ("pq_new".to_string(), self.pq_new),
            ("pq_all".to_string(), self.pq_all),
            ("miou_base".to_string(), self.miou_base),
            ("miou_new".to_string(), self.miou_new),
            ("miou_all".to_string(), self.miou_all),
        ];
        for (c, v) in &self.per_class_pq {
            out.push((format!("pq_class_{c}"), Some(*v)));
        }
        out
    }
}

/// Panoptic quality of a single map pair over a class subset.
pub fn panoptic_quality(
    pred: &PanopticMap,
    gt: &PanopticMap,
    labels: &LabelSpace,
    classes: &BTreeSet<ClassId>,
) -> Result<MetricReport> {
    if classes.is_empty() {
        return Err(Error::validation("empty class subset"));
    }
    let mut acc = EvalAccumulator::new();
    acc.add_pair(pred, gt, labels)?;
    Ok(acc.report(classes, &BTreeSet::new()))
}

/// Mean semantic IoU of a single map pair over a class subset.
pub fn mean_iou(
    pred: &PanopticMap,
    gt: &PanopticMap,
    labels: &LabelSpace,
    classes: &BTreeSet<ClassId>,
) -> Result<f64> {
    let report = panoptic_quality(pred, gt, labels, classes)?;
    Ok(report.miou_base.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panoptic::map_from_segments;

    fn labels5() -> LabelSpace {
        LabelSpace::new((1..=5).map(|c| (format!("c{c}"), c <= 3)).collect()).unwrap()
    }

    fn seg(class_id: ClassId, instance_id: u32, pixels: Vec<(u16, u16)>) -> Segment {
        Segment { class_id, instance_id, pixels }
    }

    #[test]
    fn identical_segments_match_at_one() {
        let s = vec![
            seg(1, 1, vec![(0, 0), (0, 1)]),
            seg(4, 0, vec![(2, 0), (2, 1), (2, 2)]),
        ];
        let m = match_segments(&s, &s);
        assert_eq!(m.pairs.len(), 2);
        assert!(m.pairs.iter().all(|&(_, _, v)| v == 1.0));
        assert!(m.unmatched_pred.is_empty() && m.unmatched_gt.is_empty());
    }

    #[test]
    fn exactly_half_iou_does_not_match() {
        // |a|=|b|=2, overlap 1 would be IoU 1/3; build IoU exactly 0.5:
        // a = {x}, b = {x, y} -> 1/2.
        let p = vec![seg(1, 1, vec![(0, 0)])];
        let g = vec![seg(1, 1, vec![(0, 0), (0, 1)])];
        let m = match_segments(&p, &g);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_pred, vec![0]);
        assert_eq!(m.unmatched_gt, vec![0]);
    }

    #[test]
    fn pq_perfect_prediction_is_one() {
        let labels = labels5();
        let segs = vec![seg(4, 0, (0..4).map(|c| (0u16, c as u16)).collect())];
        let map = map_from_segments(2, 4, &segs);
        let classes: BTreeSet<ClassId> = [4].into_iter().collect();
        let r = panoptic_quality(&map, &map, &labels, &classes).unwrap();
        assert_eq!(r.pq_all, Some(1.0));
        assert_eq!(r.miou_all, Some(1.0));
    }

    #[test]
    fn pq_matched_point_six_with_one_fn() {
        // one matched pair at IoU 0.6, one FN, no FP -> PQ = 0.6 / 1.5 = 0.4
        let labels = labels5();
        // gt: thing with 5 px; pred: 3 of those + 0 extra -> IoU 3/5 = 0.6
        let gt = vec![
            seg(1, 1, vec![(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)]),
            seg(1, 2, vec![(3, 0), (3, 1)]),
        ];
        let pred = vec![seg(1, 1, vec![(0, 0), (0, 1), (0, 2)])];
        let gt_map = map_from_segments(5, 6, &gt);
        let pred_map = map_from_segments(5, 6, &pred);
        let classes: BTreeSet<ClassId> = [1].into_iter().collect();
        let r = panoptic_quality(&pred_map, &gt_map, &labels, &classes).unwrap();
        let pq = r.pq_all.unwrap();
        assert!((pq - 0.4).abs() < 1e-12, "pq = {pq}");
    }

    #[test]
    fn pq_all_void_prediction_is_zero() {
        let labels = labels5();
        let gt = map_from_segments(3, 3, &[seg(2, 1, vec![(1, 1), (1, 2)])]);
        let pred = PanopticMap::new_void(3, 3);
        let classes: BTreeSet<ClassId> = [2].into_iter().collect();
        let r = panoptic_quality(&pred, &gt, &labels, &classes).unwrap();
        assert_eq!(r.pq_all, Some(0.0));
    }

    #[test]
    fn empty_class_subset_is_error() {
        let labels = labels5();
        let map = PanopticMap::new_void(2, 2);
        assert!(panoptic_quality(&map, &map, &labels, &BTreeSet::new()).is_err());
    }

    #[test]
    fn miou_partial_overlap() {
        // one class: gt 2 px, pred 2 px, overlap 1 -> 1/3
        let labels = labels5();
        let gt = map_from_segments(2, 3, &[seg(4, 0, vec![(0, 0), (0, 1)])]);
        let pred = map_from_segments(2, 3, &[seg(4, 0, vec![(0, 1), (0, 2)])]);
        let classes: BTreeSet<ClassId> = [4].into_iter().collect();
        let v = mean_iou(&pred, &gt, &labels, &classes).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_disjoint_classes_is_zero() {
        let labels = labels5();
        let gt = map_from_segments(2, 2, &[seg(4, 0, vec![(0, 0), (0, 1), (1, 0), (1, 1)])]);
        let pred = map_from_segments(2, 2, &[seg(5, 0, vec![(0, 0), (0, 1), (1, 0), (1, 1)])]);
        let classes: BTreeSet<ClassId> = [4, 5].into_iter().collect();
        let v = mean_iou(&pred, &gt, &labels, &classes).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn swapping_pred_and_gt_swaps_fp_and_fn() {
        let labels = labels5();
        let a = map_from_segments(4, 4, &[seg(1, 1, vec![(0, 0), (0, 1)])]);
        let b = map_from_segments(
            4,
            4,
            &[seg(1, 1, vec![(0, 0), (0, 1)]), seg(2, 1, vec![(2, 2)])],
        );
        let mut acc_ab = EvalAccumulator::new();
        acc_ab.add_pair(&a, &b, &labels).unwrap();
        let mut acc_ba = EvalAccumulator::new();
        acc_ba.add_pair(&b, &a, &labels).unwrap();
        for c in [1u32, 2] {
            let ab = acc_ab.pq.get(&c).cloned().unwrap_or_default();
            let ba = acc_ba.pq.get(&c).cloned().unwrap_or_default();
            assert_eq!(ab.tp, ba.tp);
            assert_eq!(ab.fp, ba.fn_);
            assert_eq!(ab.fn_, ba.fp);
            assert_eq!(ab.iou_sum, ba.iou_sum);
        }
    }
}
