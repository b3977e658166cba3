mod common;

use common::oracles::{jittered, micro_scenario, naive_ap};
use fsodlab::detector::{BBox, Detection, GroundTruth};
use fsodlab::eval::{average_precision, coco_map, coco_map_with, EvalOptions, EvalReport, IOU_THRESHOLDS};
use fsodlab::rng::Rng;
use proptest::prelude::*;

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn cell(r: &EvalReport, class: &str, thr: f64) -> Option<f64> {
    r.cells.iter().find(|c| c.class == class && c.iou_threshold == thr).and_then(|c| c.ap)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn equals_naive_evaluator(seed in any::<u64>()) {
        let (dets, gts) = micro_scenario(&mut Rng::new(seed), 3);
        let names = classes(3);
        let r = coco_map(&dets, &gts, &names).unwrap();
        for (c, name) in names.iter().enumerate() {
            for &thr in &IOU_THRESHOLDS {
                let (want, got) = (naive_ap(&dets, &gts, c, thr), cell(&r, name, thr));
                prop_assert_eq!(want.is_some(), got.is_some());
                if let (Some(w), Some(g)) = (want, got) {
                    prop_assert!((w - g).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ap_falls_as_threshold_rises(seed in any::<u64>()) {
        let (dets, gts) = micro_scenario(&mut Rng::new(seed), 2);
        let names = classes(2);
        let r = coco_map(&dets, &gts, &names).unwrap();
        for name in &names {
            let aps: Vec<Option<f64>> = IOU_THRESHOLDS.iter().map(|&t| cell(&r, name, t)).collect();
            for w in aps.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    prop_assert!(a >= b);
                }
            }
        }
    }

    #[test]
    fn only_score_order_matters(seed in any::<u64>(), k in 0.01..100.0f64) {
        let (dets, gts) = micro_scenario(&mut Rng::new(seed), 2);
        let scaled: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: x.score * k, ..*x }).collect())
            .collect();
        let names = classes(2);
        let (a, b) = (coco_map(&dets, &gts, &names).unwrap(), coco_map(&scaled, &gts, &names).unwrap());
        prop_assert_eq!(a.cells, b.cells);
    }

    #[test]
    fn lower_scored_duplicate_never_helps(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (mut dets, mut gts) = micro_scenario(&mut rng, 2);
        // With overlapping gts a copy could legitimately claim a second gt.
        for g in &mut gts {
            let mut kept: Vec<GroundTruth> = Vec::new();
            for x in g.iter() {
                if kept.iter().all(|k| fsodlab::detector::iou(&k.bbox, &x.bbox) == 0.0) {
                    kept.push(*x);
                }
            }
            *g = kept;
        }
        let names = classes(2);
        let before = coco_map(&dets, &gts, &names).unwrap();
        let tp = dets.iter().enumerate().flat_map(|(i, d)| d.iter().map(move |x| (i, *x))).next();
        if let Some((im, d)) = tp {
            dets[im].push(Detection { score: d.score * rng.uniform(0.0, 0.999), ..d });
            let after = coco_map(&dets, &gts, &names).unwrap();
            for (x, y) in before.cells.iter().zip(&after.cells) {
                if let (Some(p), Some(q)) = (x.ap, y.ap) {
                    prop_assert!(q <= p + 1e-12);
                }
            }
        }
    }

    #[test]
    fn aps_stay_in_unit_interval(seed in any::<u64>()) {
        let (dets, gts) = micro_scenario(&mut Rng::new(seed), 3);
        let r = coco_map(&dets, &gts, &classes(3)).unwrap();
        for c in &r.cells {
            if let Some(ap) = c.ap {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
        prop_assert!((0.0..=1.0).contains(&r.map_coco));
    }
}

#[test]
fn hand_enumerated_case_is_exact() {
    let (ap, hand) = common::suites::hand_enumerated_ap();
    assert_eq!(ap, hand);
    assert_eq!(average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2), Some(hand));
}

#[test]
fn perfect_detector_scores_one_and_jitter_degrades_with_threshold() {
    let mut rng = Rng::new(1);
    let mut gts = Vec::new();
    for _ in 0..5 {
        gts.push(
            (0..3)
                .map(|k| {
                    let x = 4.0 + 25.0 * k as f64 + rng.uniform(0.0, 3.0);
                    GroundTruth {
                        bbox: BBox::new(x, 10.0, x + 20.0, 30.0).unwrap(),
                        class_id: k % 2,
                    }
                })
                .collect::<Vec<_>>(),
        );
    }
    let perfect: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|x| Detection { bbox: x.bbox, class_id: x.class_id, score: 1.0 }).collect())
        .collect();
    assert_eq!(coco_map(&perfect, &gts, &classes(2)).unwrap().map_coco, 1.0);

    let shifted: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .map(|x| Detection { bbox: x.bbox.translate(3.0, 3.0), class_id: x.class_id, score: 0.9 })
                .collect()
        })
        .collect();
    let r = coco_map(&shifted, &gts, &classes(2)).unwrap();
    let (lo, hi) = (r.per_threshold_map["0.50"].unwrap(), r.per_threshold_map["0.95"].unwrap());
    assert_eq!(lo, 1.0);
    assert_eq!(hi, 0.0);
    assert!(r.map_coco < 1.0);
}

#[test]
fn detection_cap_applies_per_image_and_class() {
    let gt = GroundTruth { bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), class_id: 0 };
    let mut rng = Rng::new(2);
    // Three higher-scored misses in front of the hit.
    let mut dets: Vec<Detection> = (0..3)
        .map(|i| Detection { bbox: BBox::new(30.0, 30.0, 40.0, 40.0).unwrap(), class_id: 0, score: 0.9 - 0.1 * i as f64 })
        .collect();
    dets.push(Detection { bbox: jittered(&mut rng, &gt.bbox, 0.1), class_id: 0, score: 0.1 });
    let opts = EvalOptions { max_detections: 3, ..Default::default() };
    let capped = coco_map_with(&[dets.clone()], &[vec![gt]], &classes(1), &opts).unwrap();
    assert_eq!(capped.map_coco, 0.0);
    assert_eq!(capped.counts.detections, 3);
    let full = coco_map(&[dets], &[vec![gt]], &classes(1)).unwrap();
    assert!(full.per_threshold_map["0.50"].unwrap() > 0.0);
}

#[test]
fn report_round_trips_through_json() {
    let (dets, gts) = micro_scenario(&mut Rng::new(9), 2);
    let r = coco_map(&dets, &gts, &classes(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    r.save_json(&path).unwrap();
    assert_eq!(EvalReport::load_json(&path).unwrap(), r);
    assert_eq!(r.to_csv().lines().count(), 1 + 2 * IOU_THRESHOLDS.len());
}
