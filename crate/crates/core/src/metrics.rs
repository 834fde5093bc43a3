//! Overlap measures and task metrics: AP, mIoU and PQ.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::heads::Panoptic;

/// `(cx, cy, w, h)` to `(x1, y1, x2, y2)`.
pub fn corners(b: [f32; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b.map(|v| v as f64);
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

pub fn box_iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Mask IoU; two empty masks count as identical.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// One scored prediction or one ground-truth object of some class in some
/// image. Overlaps are supplied by the caller through `iou`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    /// Index into the caller's prediction list of that image.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub image: usize,
    pub class: usize,
    pub index: usize,
}

/// Average precision for one class at one threshold with 101-point
/// interpolated precision.
pub fn ap_at<F>(dets: &[Detection], gts: &[Target], threshold: f64, iou: &F) -> f64
where
    F: Fn(&Detection, &Target) -> f64,
{
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let mut best = None;
        let mut best_iou = threshold;
        for (k, gt) in gts.iter().enumerate() {
            if taken[k] || gt.image != det.image {
                continue;
            }
            let o = iou(det, gt);
            if o >= best_iou && best.is_none_or(|_| o > best_iou) {
                best = Some(k);
                best_iou = o;
            }
        }
        if let Some(k) = best {
            taken[k] = true;
        }
        tp.push(best.is_some());
    }
    interpolated_ap(&tp, gts.len())
}

/// Area under the 101-point interpolated precision/recall curve from a
/// ranked list of hits.
pub fn interpolated_ap(hits: &[bool], positives: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over classes and thresholds 0.50..0.95.
    pub map: f64,
    pub ap50: f64,
    /// `(class, AP over thresholds, AP50)` for every class with a target.
    pub per_class: Vec<(usize, f64, f64)>,
}

/// COCO-style AP averaged over classes that have at least one target.
/// Returns `None` when there are no targets at all.
pub fn average_precision<F>(dets: &[Detection], gts: &[Target], iou: F) -> Option<ApReport>
where
    F: Fn(&Detection, &Target) -> f64,
{
    let mut classes: BTreeMap<usize, (Vec<Detection>, Vec<Target>)> = BTreeMap::new();
    for g in gts {
        classes.entry(g.class).or_default().1.push(*g);
    }
    if classes.is_empty() {
        return None;
    }
    for d in dets {
        if let Some(e) = classes.get_mut(&d.class) {
            e.0.push(*d);
        }
    }
    let ts = coco_thresholds();
    let mut per_class = Vec::with_capacity(classes.len());
    for (&c, (d, g)) in &classes {
        let aps: Vec<f64> = ts.iter().map(|&t| ap_at(d, g, t, &iou)).collect();
        per_class.push((c, aps.iter().sum::<f64>() / ts.len() as f64, aps[0]));
    }
    let n = per_class.len() as f64;
    Some(ApReport {
        map: per_class.iter().map(|p| p.1).sum::<f64>() / n,
        ap50: per_class.iter().map(|p| p.2).sum::<f64>() / n,
        per_class,
    })
}

/// Accumulated intersections and unions per class, for mIoU across images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub inter: BTreeMap<usize, u64>,
    pub union: BTreeMap<usize, u64>,
    pub present: BTreeMap<usize, bool>,
}

impl IouAccumulator {
    /// Maps hold `0` for void (ignored) and `class + 1` otherwise.
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        for (&p, &g) in pred.iter().zip(gt) {
            if g == 0 {
                continue;
            }
            self.present.insert(g, true);
            if p == g {
                *self.inter.entry(g).or_default() += 1;
                *self.union.entry(g).or_default() += 1;
            } else {
                *self.union.entry(g).or_default() += 1;
                if p != 0 {
                    *self.union.entry(p).or_default() += 1;
                }
            }
        }
    }

    /// Per-class IoU for classes present in the ground truth.
    pub fn per_class(&self) -> Vec<(usize, f64)> {
        self.present
            .keys()
            .map(|&c| {
                let i = *self.inter.get(&c).unwrap_or(&0) as f64;
                let u = *self.union.get(&c).unwrap_or(&0) as f64;
                (c, i / u)
            })
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        let pc = self.per_class();
        (!pc.is_empty()).then(|| pc.iter().map(|p| p.1).sum::<f64>() / pc.len() as f64)
    }
}

pub fn miou(pred: &[usize], gt: &[usize]) -> Option<f64> {
    let mut acc = IouAccumulator::default();
    acc.add(pred, gt);
    acc.miou()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqCounts {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PqCounts {
    pub fn pq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if d == 0.0 {
            0.0
        } else {
            self.iou_sum / d
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if d == 0.0 {
            0.0
        } else {
            self.tp as f64 / d
        }
    }
}

/// Per-class panoptic statistics, accumulated across images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PqAccumulator {
    pub classes: BTreeMap<usize, PqCounts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqSummary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl PqAccumulator {
    /// Match the segments of one image. A pair of the same class matches
    /// when its IoU exceeds 0.5; id 0 is unlabeled in both maps and never
    /// forms a segment.
    pub fn add(&mut self, pred: &Panoptic, gt: &Panoptic) {
        let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if p != 0 && g != 0 {
                *inter.entry((p, g)).or_default() += 1;
            }
        }
        let mut gt_hit = BTreeMap::new();
        let mut pred_hit = BTreeMap::new();
        for (&(p, g), &i) in &inter {
            let ps = pred.segments.iter().find(|s| s.id == p).expect("segment table");
            let gs = gt.segments.iter().find(|s| s.id == g).expect("segment table");
            if ps.class != gs.class {
                continue;
            }
            let iou = i as f64 / (ps.area + gs.area - i) as f64;
            if iou > 0.5 {
                assert!(gt_hit.insert(g, ()).is_none(), "segment matched twice");
                assert!(pred_hit.insert(p, ()).is_none(), "segment matched twice");
                let e = self.classes.entry(gs.class).or_default();
                e.tp += 1;
                e.iou_sum += iou;
            }
        }
        for gs in &gt.segments {
            if !gt_hit.contains_key(&gs.id) {
                self.classes.entry(gs.class).or_default().fn_ += 1;
            }
        }
        for ps in &pred.segments {
            if !pred_hit.contains_key(&ps.id) {
                self.classes.entry(ps.class).or_default().fp += 1;
            }
        }
    }

    /// Averages over classes that occur in either map.
    pub fn summary(&self) -> Option<PqSummary> {
        if self.classes.is_empty() {
            return None;
        }
        let n = self.classes.len() as f64;
        let (mut pq, mut sq, mut rq) = (0.0, 0.0, 0.0);
        for c in self.classes.values() {
            pq += c.pq();
            sq += c.sq();
            rq += c.rq();
        }
        Some(PqSummary { pq: pq / n, sq: sq / n, rq: rq / n })
    }
}

pub fn panoptic_quality(pred: &Panoptic, gt: &Panoptic) -> Option<PqSummary> {
    let mut acc = PqAccumulator::default();
    acc.add(pred, gt);
    acc.summary()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::Segment;

    fn seg(id: u32, class: usize, area: usize) -> Segment {
        Segment { id, class, thing: true, score: 1.0, area }
    }

    #[test]
    fn box_iou_cases() {
        let a = [0.5, 0.5, 0.2, 0.2];
        assert!((box_iou(a, a) - 1.0).abs() < 1e-12);
        assert_eq!(box_iou(a, [0.1, 0.1, 0.05, 0.05]), 0.0);
    }

    #[test]
    fn mask_iou_grid() {
        let mut a = vec![false; 16];
        let mut b = vec![false; 16];
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            a[y * 4 + x] = true;
        }
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            b[y * 4 + x] = true;
        }
        assert!((mask_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(mask_iou(&[false; 4], &[false; 4]), 1.0);
        assert_eq!(mask_iou(&[false; 4], &[true, false, false, false]), 0.0);
    }

    #[test]
    fn single_pair_at_iou_point_six() {
        let d = [Detection { image: 0, class: 0, score: 0.3, index: 0 }];
        let g = [Target { image: 0, class: 0, index: 0 }];
        let r = average_precision(&d, &g, |_, _| 0.6).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert!((r.map - 0.3).abs() < 1e-12);
    }

    #[test]
    fn unmatched_detection_scores_zero() {
        let d = [Detection { image: 0, class: 0, score: 0.9, index: 0 }];
        let g = [Target { image: 0, class: 0, index: 0 }];
        assert_eq!(average_precision(&d, &g, |_, _| 0.0).unwrap().map, 0.0);
        assert!(average_precision(&d, &[], |_, _| 1.0).is_none());
    }

    #[test]
    fn miou_half_coverage() {
        let gt = [1, 1, 1, 1, 2, 2];
        let pred = [1, 1, 0, 0, 2, 2];
        let mut acc = IouAccumulator::default();
        acc.add(&pred, &gt);
        assert_eq!(acc.per_class(), vec![(1, 0.5), (2, 1.0)]);
        assert_eq!(miou(&gt, &gt), Some(1.0));
    }

    fn two_blobs(overlap: usize) -> (Panoptic, Panoptic) {
        // 10-pixel segments sharing `overlap` pixels on a 40-pixel strip
        let mut g = vec![0u32; 40];
        let mut p = vec![0u32; 40];
        g[..10].iter_mut().for_each(|v| *v = 1);
        p[10 - overlap..20 - overlap].iter_mut().for_each(|v| *v = 1);
        (
            Panoptic { ids: p, segments: vec![seg(1, 0, 10)] },
            Panoptic { ids: g, segments: vec![seg(1, 0, 10)] },
        )
    }

    #[test]
    fn pq_fixtures() {
        let (p, g) = two_blobs(8);
        // union = 10 + 10 - 8; predicted pixels over void still count
        let r = panoptic_quality(&p, &g).unwrap();
        assert!((r.pq - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((r.sq, r.rq), (r.pq, 1.0));
        let (p, g) = two_blobs(6);
        assert_eq!(panoptic_quality(&p, &g).unwrap().pq, 0.0);
        assert_eq!(panoptic_quality(&g, &g).unwrap().pq, 1.0);
    }
}
