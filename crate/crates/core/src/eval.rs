//! COCO-style detection evaluation: greedy matching, 101-point interpolated
//! AP, and mAP averaged over IoU thresholds 0.50..0.95.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, Detection, GroundTruth};
use crate::error::{Error, Result};

/// `0.50, 0.55, ..., 0.95`.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const DEFAULT_MAX_DETECTIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Mean interpolated precision at recall 0.00, 0.01, ..., 1.00.
    Coco101,
    /// Area under the precision envelope at every recall step.
    AllPoints,
}

pub const DEFAULT_INTERPOLATION: Interpolation = Interpolation::Coco101;

/// TP flag per detection, in input order.
///
/// Detections are visited by descending score (ties: lower index first);
/// each claims the unmatched same-class gt of highest IoU (ties: lower gt
/// index) when that IoU reaches `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Cumulative recall/precision in rank order plus the monotone envelope.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// `ranked` holds TP flags already sorted by descending score.
pub fn precision_recall(ranked: &[bool], num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut curve = PrCurve::default();
    for (i, &flag) in ranked.iter().enumerate() {
        tp += usize::from(flag);
        curve.recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
        curve.precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..curve.precision.len()).rev() {
        if curve.precision[i] > curve.precision[i - 1] {
            curve.precision[i - 1] = curve.precision[i];
        }
    }
    curve
}

/// AP of `(score, is_tp)` pairs against `num_gt` ground truths.
///
/// `None` when there is nothing to score (no gts and no detections); `0` when
/// there are detections but no gts.
pub fn average_precision(dets: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    average_precision_with(dets, num_gt, DEFAULT_INTERPOLATION)
}

pub fn average_precision_with(dets: &[(f64, bool)], num_gt: usize, interp: Interpolation) -> Option<f64> {
    if num_gt == 0 {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0));
    let ranked: Vec<bool> = order.iter().map(|&i| dets[i].1).collect();
    let pr = precision_recall(&ranked, num_gt);
    Some(match interp {
        Interpolation::Coco101 => {
            let mut sum = 0.0;
            for j in 0..=100 {
                let r = j as f64 / 100.0;
                let idx = pr.recall.partition_point(|&x| x < r);
                sum += pr.precision.get(idx).copied().unwrap_or(0.0);
            }
            sum / 101.0
        }
        Interpolation::AllPoints => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for (r, p) in pr.recall.iter().zip(&pr.precision) {
                area += (r - prev) * p;
                prev = *r;
            }
            area
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gts: usize,
    pub detections: usize,
    pub true_positives_at_50: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub class: String,
    pub iou_threshold: f64,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    pub class: String,
    pub iou_threshold: f64,
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub interpolation: Interpolation,
    pub matching: String,
    pub max_detections: usize,
    /// Mean AP over thresholds per class; `null` when the class has neither
    /// gts nor detections.
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    /// Keyed by the threshold printed with two decimals.
    pub per_threshold_map: BTreeMap<String, Option<f64>>,
    /// Mean over all defined (class, threshold) cells; 0 when none exist.
    pub map_coco: f64,
    pub counts: EvalCounts,
    pub cells: Vec<ApCell>,
    /// Precision-recall curves at IoU 0.50.
    pub pr_curves: Vec<ClassCurve>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub max_detections: usize,
    pub interpolation: Interpolation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_detections: DEFAULT_MAX_DETECTIONS,
            interpolation: DEFAULT_INTERPOLATION,
        }
    }
}

pub fn coco_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], classes: &[String]) -> Result<EvalReport> {
    coco_map_with(dets, gts, classes, &EvalOptions::default())
}

/// Pools every image's detections per class and threshold. At most
/// `max_detections` highest-scoring detections per image and class count.
pub fn coco_map_with(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    classes: &[String],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let nc = classes.len();
    if let Some(bad) = dets.iter().flatten().map(|d| d.class_id).chain(gts.iter().flatten().map(|g| g.class_id)).find(|&c| c >= nc) {
        return Err(Error::Contract(format!("class id {bad} outside {nc} classes")));
    }

    // Per image and class: capped detections in score order.
    let per_image: Vec<Vec<(Vec<Detection>, Vec<GroundTruth>)>> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| {
            (0..nc)
                .map(|c| {
                    let mut dc: Vec<Detection> = d.iter().filter(|x| x.class_id == c).cloned().collect();
                    dc.sort_by(|a, b| b.score.total_cmp(&a.score));
                    dc.truncate(opts.max_detections);
                    let gc: Vec<GroundTruth> = g.iter().filter(|x| x.class_id == c).cloned().collect();
                    (dc, gc)
                })
                .collect()
        })
        .collect();

    let mut cells = Vec::new();
    let mut pr_curves = Vec::new();
    let mut tp50 = 0;
    let mut grid = vec![[None; IOU_THRESHOLDS.len()]; nc];
    for (c, name) in classes.iter().enumerate() {
        let num_gt: usize = per_image.iter().map(|im| im[c].1.len()).sum();
        for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            // Concatenate per image, then stable-sort by score.
            let mut pooled: Vec<(f64, bool)> = Vec::new();
            for im in &per_image {
                let (dc, gc) = &im[c];
                let flags = match_detections(dc, gc, thr);
                pooled.extend(dc.iter().zip(flags).map(|(d, f)| (d.score, f)));
            }
            let ap = average_precision_with(&pooled, num_gt, opts.interpolation);
            if t == 0 {
                tp50 += pooled.iter().filter(|p| p.1).count();
                let mut ranked = pooled.clone();
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                let flags: Vec<bool> = ranked.iter().map(|p| p.1).collect();
                pr_curves.push(ClassCurve {
                    class: name.clone(),
                    iou_threshold: thr,
                    curve: precision_recall(&flags, num_gt),
                });
            }
            grid[c][t] = ap;
            cells.push(ApCell {
                class: name.clone(),
                iou_threshold: thr,
                ap,
            });
        }
    }

    let mean = |xs: &mut dyn Iterator<Item = Option<f64>>| {
        let v: Vec<f64> = xs.flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let per_class_ap = classes
        .iter()
        .enumerate()
        .map(|(c, n)| (n.clone(), mean(&mut grid[c].iter().copied())))
        .collect();
    let per_threshold_map = IOU_THRESHOLDS
        .iter()
        .enumerate()
        .map(|(t, thr)| (format!("{thr:.2}"), mean(&mut grid.iter().map(|row| row[t]))))
        .collect();
    let map_coco = mean(&mut grid.iter().flatten().copied()).unwrap_or(0.0);

    Ok(EvalReport {
        interpolation: opts.interpolation,
        matching: "greedy highest-IoU per detection, descending score".into(),
        max_detections: opts.max_detections,
        per_class_ap,
        per_threshold_map,
        map_coco,
        counts: EvalCounts {
            gts: gts.iter().map(Vec::len).sum(),
            detections: per_image.iter().flatten().map(|(d, _)| d.len()).sum(),
            true_positives_at_50: tp50,
        },
        cells,
        pr_curves,
    })
}

impl EvalReport {
    /// One `class,iou_threshold,ap` row per cell; undefined APs are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou_threshold,ap\n");
        for c in &self.cells {
            let ap = c.ap.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.2},{}", c.class, c.iou_threshold, ap);
        }
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}
