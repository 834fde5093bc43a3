use proptest::prelude::*;
use uovn_core::metrics::{average_precision, coco_thresholds, Detection, Target};

/// Greedy matching in score order, then the interpolated precision at each
/// of the 101 recall levels read off the full list of operating points.
fn staircase_ap(dets: &[Detection], gts: &[Target], iou: &[Vec<f64>], t: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0;
    for (rank, &d) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..gts.len() {
            let o = iou[d][k];
            if !taken[k] && gts[k].image == dets[d].image && o >= t && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        if let Some((k, _)) = best {
            taken[k] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

#[derive(Debug, Clone)]
struct Case {
    dets: Vec<Detection>,
    gts: Vec<Target>,
    iou: Vec<Vec<f64>>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=10, 1usize..=10).prop_flat_map(|(nd, ng)| {
        (
            prop::collection::vec((0usize..2, 0.0f64..1.0), nd),
            prop::collection::vec(0usize..2, ng),
            prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], ng), nd),
        )
            .prop_map(|(d, g, iou)| Case {
                dets: d.iter().enumerate().map(|(i, &(image, score))| Detection { image, class: 0, score, index: i }).collect(),
                gts: g.iter().enumerate().map(|(i, &image)| Target { image, class: 0, index: i }).collect(),
                iou,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_matches_the_staircase_enumeration(c in case()) {
        let scores: Vec<f64> = c.dets.iter().map(|d| d.score).collect();
        prop_assume!((0..scores.len()).all(|i| (i + 1..scores.len()).all(|j| scores[i] != scores[j])));
        let r = average_precision(&c.dets, &c.gts, |d, t| c.iou[d.index][t.index]).unwrap();
        let ts = coco_thresholds();
        let want: Vec<f64> = ts.iter().map(|&t| staircase_ap(&c.dets, &c.gts, &c.iou, t)).collect();
        prop_assert!((r.ap50 - want[0]).abs() < 1e-9);
        prop_assert!((r.map - want.iter().sum::<f64>() / ts.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn ap_ignores_input_order(c in case(), rot in 0usize..10) {
        let scores: Vec<f64> = c.dets.iter().map(|d| d.score).collect();
        prop_assume!((0..scores.len()).all(|i| (i + 1..scores.len()).all(|j| scores[i] != scores[j])));
        let a = average_precision(&c.dets, &c.gts, |d, t| c.iou[d.index][t.index]).unwrap();
        let mut dets = c.dets.clone();
        let k = rot % dets.len();
        dets.rotate_left(k);
        let mut gts = c.gts.clone();
        gts.reverse();
        let b = average_precision(&dets, &gts, |d, t| c.iou[d.index][t.index]).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn panoptic(ids: Vec<u32>, classes: &[usize]) -> uovn_core::heads::Panoptic {
    use uovn_core::heads::{Panoptic, Segment};
    let segments = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let id = i as u32 + 1;
            Segment { id, class, thing: true, score: 1.0, area: ids.iter().filter(|&&v| v == id).count() }
        })
        .filter(|s| s.area > 0)
        .collect();
    Panoptic { ids, segments }
}

proptest! {
    #[test]
    fn panoptic_quality_is_bounded_and_order_free(
        pred in prop::collection::vec(0u32..5, 36),
        gt in prop::collection::vec(0u32..5, 36),
        pc in prop::collection::vec(0usize..2, 4),
        gc in prop::collection::vec(0usize..2, 4),
    ) {
        use uovn_core::metrics::panoptic_quality;
        let p = panoptic(pred, &pc);
        let g = panoptic(gt, &gc);
        if let Some(s) = panoptic_quality(&p, &g) {
            prop_assert!((0.0..=1.0).contains(&s.pq));
            let mut p2 = p.clone();
            p2.segments.reverse();
            prop_assert_eq!(Some(s), panoptic_quality(&p2, &g));
        }
    }
}
