// Independent reference implementations. They deliberately avoid the
// library's geometry and ranking helpers.

use fsodlab::detector::{BBox, Detection, GroundTruth};
use fsodlab::rng::Rng;

pub fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// Repeatedly takes the best remaining box (highest score, then lowest
/// index) and deletes everything overlapping it above `thr`.
pub fn reference_nms(dets: &[(BBox, f64)], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].1 > dets[b].1) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && naive_iou(&dets[b].0, &dets[i].0) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

pub fn random_box(rng: &mut Rng, extent: f64) -> BBox {
    let w = rng.uniform(1.0, extent / 3.0);
    let h = rng.uniform(1.0, extent / 3.0);
    let x = rng.uniform(0.0, extent - w);
    let y = rng.uniform(0.0, extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

pub fn jittered(rng: &mut Rng, b: &BBox, px: f64) -> BBox {
    let mut d = || rng.uniform(-px, px);
    let (x1, y1) = (b.x1 + d(), b.y1 + d());
    let (x2, y2) = (b.x2 + d(), b.y2 + d());
    BBox::new(x1.min(x2 - 0.5), y1.min(y2 - 0.5), x2, y2).unwrap()
}

/// AP cell by brute force: every detection of the class across all images in
/// global score order, each taking the best free gt in its own image.
/// Precision at recall level r is the best precision at any rank whose
/// recall reaches r.
pub fn naive_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thr: f64) -> Option<f64> {
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (im, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.class_id == class {
                all.push((im, k));
            }
        }
    }
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.class_id == class).count()).sum();
    if num_gt == 0 {
        return if all.is_empty() { None } else { Some(0.0) };
    }
    // Insertion sort by descending score keeps equal scores in input order.
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for item in all {
        let s = dets[item.0][item.1].score;
        let pos = ranked.iter().position(|&(i, k)| dets[i][k].score < s).unwrap_or(ranked.len());
        ranked.insert(pos, item);
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::new();
    for &(im, k) in &ranked {
        let d = &dets[im][k];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[im].iter().enumerate() {
            if used[im][j] || g.class_id != class {
                continue;
            }
            let o = naive_iou(&d.bbox, &g.bbox);
            if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[im][j] = true;
        }
        tp_flags.push(best.is_some());
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &f) in tp_flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let p = points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 101.0)
}

/// A small random multi-image scenario: gts of up to `classes` classes and
/// detections that are jittered copies, duplicates, wrong-class copies and
/// pure false positives. Scores are distinct.
pub fn micro_scenario(rng: &mut Rng, classes: usize) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let images = rng.int_range(1, 5) as usize;
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..images {
        let mut g = Vec::new();
        for _ in 0..rng.int_range(0, 4) {
            g.push(GroundTruth {
                bbox: random_box(rng, 64.0),
                class_id: rng.index(classes),
            });
        }
        let mut d = Vec::new();
        for gt in &g {
            for _ in 0..rng.int_range(0, 2) {
                let px = rng.uniform(0.0, 6.0);
                let class_id = if rng.bernoulli(0.1) { rng.index(classes) } else { gt.class_id };
                d.push(Detection {
                    bbox: jittered(rng, &gt.bbox, px),
                    class_id,
                    score: rng.unit(),
                });
            }
        }
        for _ in 0..rng.int_range(0, 3) {
            d.push(Detection {
                bbox: random_box(rng, 64.0),
                class_id: rng.index(classes),
                score: rng.unit(),
            });
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}
