//! Centroid-based detection scoring: TP/FP/FN counts, precision, recall,
//! F1, F2 and threshold sweeps.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::assign::GroundTruth;
use crate::codec::{score_order, Detection};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalCounts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        EvalCounts { tp, fp, fn_ }
    }
}

impl AddAssign for EvalCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub counts: EvalCounts,
}

/// Score one image.
///
/// Detections are visited by descending score. The first detection whose
/// centre falls inside an unmatched box claims it (TP). Later detections
/// landing only in claimed boxes are ignored; detections inside no box are
/// false positives. Boxes never claimed are misses.
pub fn match_image(dets: &[Detection], gts: &[GroundTruth]) -> EvalCounts {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| score_order(a, b));
    let mut matched = vec![false; gts.len()];
    let mut counts = EvalCounts::default();
    for d in order {
        let (cx, cy) = d.bbox.center();
        let mut inside_any = false;
        let mut claimed = false;
        for (g, m) in gts.iter().zip(matched.iter_mut()) {
            if !g.bbox.contains(cx, cy) {
                continue;
            }
            inside_any = true;
            if !*m {
                *m = true;
                claimed = true;
                break;
            }
        }
        if claimed {
            counts.tp += 1;
        } else if !inside_any {
            counts.fp += 1;
        }
    }
    counts.fn_ = matched.iter().filter(|m| !**m).count();
    counts
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Precision, recall, F1 and F2 from counts. Empty denominators give 0.
pub fn metrics(counts: EvalCounts) -> MetricsReport {
    let tp = counts.tp as f64;
    let precision = ratio(tp, tp + counts.fp as f64);
    let recall = ratio(tp, tp + counts.fn_ as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let f2 = ratio(5.0 * precision * recall, 4.0 * precision + recall);
    MetricsReport { precision, recall, f1, f2, counts }
}

/// Detections with `score >= threshold`.
pub fn threshold_detections(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= threshold).copied().collect()
}

/// Summed counts over a set of images at one score threshold.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], threshold: f64) -> MetricsReport {
    let mut total = EvalCounts::default();
    for (d, g) in dets.iter().zip(gts) {
        total += match_image(&threshold_detections(d, threshold), g);
    }
    metrics(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub report: MetricsReport,
}

/// One metrics row per threshold.
pub fn pr_sweep(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], thresholds: &[f64]) -> Vec<SweepRow> {
    thresholds
        .iter()
        .map(|&threshold| SweepRow {
            threshold,
            report: evaluate(dets, gts, threshold),
        })
        .collect()
}

/// `0.00, 0.01, …, 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// The row with the highest F1; ties go to the lower threshold.
pub fn best_f1(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().copied().fold(None, |best, r| match best {
        Some(b) if b.report.f1 >= r.report.f1 => Some(b),
        _ => Some(r),
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,precision,recall,f1,f2\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(out, "{:.6},{:.6},{:.6},{:.6},{:.6}", r.threshold, m.precision, m.recall, m.f1, m.f2);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::BBox;
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64, score: f64) -> Detection {
        Detection::new(BBox::from_center(cx, cy, 6.0, 6.0), score)
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
        GroundTruth::new(BBox::new(x1, y1, x2, y2))
    }

    #[test]
    fn matching_rules() {
        let g = [gt(10.0, 10.0, 30.0, 30.0)];
        assert_eq!(match_image(&[det(20.0, 20.0, 0.9)], &g), EvalCounts::new(1, 0, 0));
        let three = [det(20.0, 20.0, 0.9), det(15.0, 15.0, 0.8), det(29.0, 29.0, 0.7)];
        assert_eq!(match_image(&three, &g), EvalCounts::new(1, 0, 0));
        let two = [g[0], gt(50.0, 50.0, 60.0, 60.0)];
        let dets = [det(20.0, 20.0, 0.9), det(80.0, 80.0, 0.5)];
        assert_eq!(match_image(&dets, &two), EvalCounts::new(1, 1, 1));
        // Centroid on the boundary counts as inside.
        assert_eq!(match_image(&[det(30.0, 10.0, 0.4)], &g), EvalCounts::new(1, 0, 0));
        assert_eq!(match_image(&[], &g), EvalCounts::new(0, 0, 1));
        assert_eq!(match_image(&dets, &[]), EvalCounts::new(0, 2, 0));
    }

    #[test]
    fn overlapping_truths_both_claimed() {
        let g = [gt(0.0, 0.0, 20.0, 20.0), gt(10.0, 10.0, 30.0, 30.0)];
        let d = [det(15.0, 15.0, 0.9), det(15.0, 15.0, 0.8)];
        assert_eq!(match_image(&d, &g), EvalCounts::new(2, 0, 0));
    }

    #[test]
    fn published_rows() {
        let m = metrics(EvalCounts::new(623, 4, 23));
        for (got, want) in [(m.precision, 0.99362), (m.recall, 0.96440), (m.f1, 0.97880), (m.f2, 0.97010)] {
            assert!((got - want).abs() < 5e-5, "{got} vs {want}");
        }
        let m = metrics(EvalCounts::new(168, 21, 40));
        assert!((m.precision - 0.88889).abs() < 5e-5);
        assert!((m.recall - 0.80769).abs() < 5e-5);
    }

    #[test]
    fn zero_denominators() {
        let m = metrics(EvalCounts::default());
        assert_eq!((m.precision, m.recall, m.f1, m.f2), (0.0, 0.0, 0.0, 0.0));
        let m = metrics(EvalCounts::new(0, 3, 0));
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
    }

    #[test]
    fn sweep_edges_and_csv() {
        let dets = vec![vec![det(20.0, 20.0, 0.6), det(80.0, 80.0, 0.3)]];
        let gts = vec![vec![gt(10.0, 10.0, 30.0, 30.0)]];
        let rows = pr_sweep(&dets, &gts, &[0.0, 0.5, 0.7]);
        assert_eq!(rows[0].report.counts, EvalCounts::new(1, 1, 0));
        assert_eq!(rows[1].report.counts, EvalCounts::new(1, 0, 0));
        assert_eq!(rows[2].report.counts, EvalCounts::new(0, 0, 1));
        assert_eq!(rows[2].report.recall, 0.0);
        assert_eq!(best_f1(&rows).unwrap().threshold, 0.5);
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "threshold,precision,recall,f1,f2");
        assert_eq!(lines[1], "0.000000,0.500000,1.000000,0.666667,0.833333");
        assert_eq!(lines.len(), 4);
    }

    fn scene() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
        let d = (0.0..64.0f64, 0.0..64.0f64, 0.0..1.0f64).prop_map(|(x, y, s)| det(x, y, s));
        let g = (0.0..50.0f64, 0.0..50.0f64, 2.0..20.0f64, 2.0..20.0f64)
            .prop_map(|(x, y, w, h)| gt(x, y, x + w, y + h));
        (prop::collection::vec(d, 0..12), prop::collection::vec(g, 0..5))
    }

    proptest! {
        #[test]
        fn counts_invariants((dets, gts) in scene(), rot in 0usize..12) {
            let c = match_image(&dets, &gts);
            prop_assert_eq!(c.tp + c.fn_, gts.len());
            prop_assert!(c.tp + c.fp <= dets.len());
            let mut rotated = dets.clone();
            if !rotated.is_empty() {
                let k = rot % rotated.len();
                rotated.rotate_left(k);
            }
            rotated.reverse();
            prop_assert_eq!(match_image(&rotated, &gts), c);
            let m = metrics(c);
            if m.recall > m.precision { prop_assert!(m.f2 > m.f1); }
            if m.recall < m.precision { prop_assert!(m.f2 < m.f1); }
            if c.tp > 0 && m.recall == m.precision {
                prop_assert!((m.f1 - m.precision).abs() < 1e-12 && (m.f2 - m.precision).abs() < 1e-12);
            }
        }

        #[test]
        fn sweep_matches_single_threshold((dets, gts) in scene()) {
            let thresholds = default_thresholds();
            let rows = pr_sweep(&[dets.clone()], &[gts.clone()], &thresholds);
            let mut prev_recall = f64::INFINITY;
            let mut prev_count = usize::MAX;
            for r in &rows {
                let kept = threshold_detections(&dets, r.threshold);
                prop_assert_eq!(r.report.counts, match_image(&kept, &gts));
                prop_assert!(r.report.recall <= prev_recall);
                prop_assert!(kept.len() <= prev_count);
                prev_recall = r.report.recall;
                prev_count = kept.len();
            }
        }
    }
}
