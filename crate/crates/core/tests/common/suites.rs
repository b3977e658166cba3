// Acceptance criteria as reusable checks. Each returns whether it held and a
// one-line summary of what was measured.

use std::collections::HashSet;

use fsodlab::augment::{
    apply_jitter_factors, build_pseudo_support_set, color_jitter_logged, ColorJitterSpec, JitterFactors,
    Provenance, SupportSet,
};
use fsodlab::datasets::{
    merge_datasets, sample_k_shot, synth_generate, Annotation, AnnotationSet, Category, DomainStyle,
    EpisodeSpec, ImageEntry, SyntheticSceneConfig,
};
use fsodlab::detector::{decode_deltas, encode_deltas, iou, nms, BBox};
use fsodlab::eval::{average_precision, coco_map, IOU_THRESHOLDS};
use fsodlab::head::{cosine_logits, head_forward, CosineClassifierWeights, HeadParams};
use fsodlab::image::Image;
use fsodlab::pipeline::{
    ablation_rows, fine_tune, run_ablation, train_base, AblationOutcome, CellResult, ExperimentConfig, Toggles,
};
use fsodlab::rng::Rng;
use fsodlab::tensor::Tensor;

use super::grad::{check_op, ALL_OPS, CASES_PER_OP};
use super::oracles::{micro_scenario, naive_ap, naive_iou, random_box, reference_nms};

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: String) -> Self {
        Check { pass, detail }
    }
}

pub fn gradient_suite() -> Check {
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    let mut bad = Vec::new();
    for (i, &op) in ALL_OPS.iter().enumerate() {
        let r = check_op(op, CASES_PER_OP, 1000 + i as u64);
        w32 = w32.max(r.worst_f32);
        w64 = w64.max(r.worst_f64);
        if r.worst_f32 >= 1e-3 {
            bad.push(format!("{op:?}"));
        }
    }
    Check::new(
        bad.is_empty(),
        format!(
            "{} ops x {CASES_PER_OP} cases, worst rel err f32 {w32:.1e} (< 1e-3), f64 {w64:.1e}{}",
            ALL_OPS.len(),
            if bad.is_empty() { String::new() } else { format!(", failing {bad:?}") }
        ),
    )
}

fn random_weights(rng: &mut Rng, c: usize, d: usize, gamma: f64) -> CosineClassifierWeights<f64> {
    let w: Vec<f64> = (0..c * d).map(|_| rng.normal()).collect();
    CosineClassifierWeights::new(Tensor::new(vec![c, d], w).unwrap(), gamma, 1e-8).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn cosine_suite(cases: usize) -> Check {
    let root = Rng::new(77);
    let (mut scale_err, mut row_err, mut bound_excess) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    let mut argmax_flips = 0;
    for i in 0..cases {
        let mut rng = root.derive(i as u64);
        let (c, d) = (rng.int_range(2, 8) as usize, rng.int_range(2, 16) as usize);
        let gamma = rng.uniform(1.0, 40.0);
        let w = random_weights(&mut rng, c, d, gamma);
        let x: Vec<f64> = (0..d).map(|_| rng.normal() * rng.uniform(0.01, 10.0)).collect();
        let a = 10f64.powf(rng.uniform(-3.0, 3.0));
        let base = cosine_logits(&Tensor::vector(x.clone()), &w).unwrap();
        let scaled = cosine_logits(&Tensor::vector(x.iter().map(|v| v * a).collect()), &w).unwrap();
        for (p, q) in base.data().iter().zip(scaled.data()) {
            scale_err = scale_err.max((p - q).abs());
        }
        for &v in base.data() {
            bound_excess = bound_excess.max(v.abs() - gamma);
        }
        // Rescaling one class row leaves that class's logit alone.
        let j = rng.index(c);
        let mut wj = w.weights().clone();
        wj.data_mut()[j * d..(j + 1) * d].iter_mut().for_each(|v| *v *= a);
        let wj = CosineClassifierWeights::new(wj, gamma, 1e-8).unwrap();
        let rowed = cosine_logits(&Tensor::vector(x.clone()), &wj).unwrap();
        row_err = row_err.max((rowed.data()[j] - base.data()[j]).abs());

        // Head argmax under positive rescaling of the embedding layer.
        let (f, h) = (rng.int_range(1, 3) as usize, rng.int_range(4, 12) as usize);
        let feat_len = f * 4;
        let mut t = |shape: Vec<usize>, s: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal() * s).collect()).unwrap()
        };
        let roi = t(vec![f, 2, 2], 1.0);
        let mut params = HeadParams {
            fc1_weight: t(vec![h, feat_len], 0.7),
            fc1_bias: t(vec![h], 0.2),
            fc2_weight: t(vec![d, h], 0.7),
            fc2_bias: t(vec![d], 0.2),
            bbox_weight: t(vec![4 * (c - 1), d], 0.3),
            bbox_bias: t(vec![4 * (c - 1)], 0.1),
        };
        let before = head_forward(&roi, &params, &w).unwrap();
        params.fc2_weight.data_mut().iter_mut().for_each(|v| *v *= a);
        params.fc2_bias.data_mut().iter_mut().for_each(|v| *v *= a);
        let after = head_forward(&roi, &params, &w).unwrap();
        // A zero embedding has no direction; all logits are 0 either way.
        if before.logits.data().iter().any(|&v| v != 0.0) && argmax(before.logits.data()) != argmax(after.logits.data()) {
            argmax_flips += 1;
        }
    }
    let pass = scale_err <= 1e-6 && row_err <= 1e-6 && bound_excess <= 1e-6 && argmax_flips == 0;
    Check::new(
        pass,
        format!(
            "{cases} cases: scale err {scale_err:.1e}, row-scale err {row_err:.1e} (<= 1e-6), max |logit|-gamma {bound_excess:.1e}, argmax flips {argmax_flips}"
        ),
    )
}

pub fn geometry_suite() -> Check {
    let root = Rng::new(5150);
    let mut nms_mismatch = 0;
    let mut largest = 0;
    for s in 0..200u64 {
        let mut rng = root.derive(s);
        let n = rng.int_range(0, 200) as usize;
        largest = largest.max(n);
        let thr = rng.uniform(0.1, 0.9);
        // Coarse scores force ties so the tie rule is exercised too.
        let dets: Vec<(BBox, f64)> = (0..n)
            .map(|_| (random_box(&mut rng, 64.0), (rng.int_range(0, 40) as f64) / 40.0))
            .collect();
        if nms(&dets, thr) != reference_nms(&dets, thr) {
            nms_mismatch += 1;
        }
    }
    let mut rng = root.derive_named("deltas");
    let mut round_trip = 0.0f64;
    for _ in 0..10_000 {
        let anchor = random_box(&mut rng, 128.0);
        let (cx, cy) = anchor.center();
        let w = anchor.width() * rng.uniform(0.1, 10.0);
        let h = anchor.height() * rng.uniform(0.1, 10.0);
        let gt = BBox::from_center(cx + rng.uniform(-20.0, 20.0), cy + rng.uniform(-20.0, 20.0), w, h);
        let back = decode_deltas(&anchor, encode_deltas(&anchor, &gt));
        for (p, q) in back.to_array().iter().zip(gt.to_array()) {
            round_trip = round_trip.max((p - q).abs());
        }
    }
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).unwrap();
    let same = iou(&b(1.0, 2.0, 5.0, 7.0), &b(1.0, 2.0, 5.0, 7.0));
    let apart = iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0));
    let seventh = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0));
    let hand = same == 1.0 && apart == 0.0 && seventh == 1.0 / 7.0;
    let mut iou_dev = 0.0f64;
    for _ in 0..10_000 {
        let (p, q) = (random_box(&mut rng, 32.0), random_box(&mut rng, 32.0));
        iou_dev = iou_dev.max((iou(&p, &q) - naive_iou(&p, &q)).abs()).max((iou(&p, &q) - iou(&q, &p)).abs());
    }
    let pass = nms_mismatch == 0 && round_trip < 1e-4 && hand && iou_dev < 1e-12;
    Check::new(
        pass,
        format!(
            "nms mismatches {nms_mismatch}/200 (largest set {largest}), round-trip err {round_trip:.1e} (< 1e-4), iou hand cases {same}/{apart}/{seventh:.6}, iou vs naive {iou_dev:.1e}"
        ),
    )
}

/// The 2-gt case with detections (0.9 TP, 0.8 FP, 0.7 TP), enumerated over
/// the 101 recall points by hand.
pub fn hand_enumerated_ap() -> (f64, f64) {
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
    let mut sum = 0.0;
    for j in 0..=100 {
        // Recall reaches 0.5 at rank 1 (precision 1) and 1.0 at rank 3 (2/3).
        sum += if j <= 50 { 1.0 } else { 2.0 / 3.0 };
    }
    (ap, sum / 101.0)
}

pub fn evaluator_suite() -> Check {
    let root = Rng::new(4242);
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut worst = 0.0f64;
    let mut undefined_mismatch = 0;
    for s in 0..50u64 {
        let mut rng = root.derive(s);
        let (dets, gts) = micro_scenario(&mut rng, classes.len());
        let report = coco_map(&dets, &gts, &classes).unwrap();
        let mut cells = Vec::new();
        for (c, name) in classes.iter().enumerate() {
            for &thr in &IOU_THRESHOLDS {
                let want = naive_ap(&dets, &gts, c, thr);
                let got = report
                    .cells
                    .iter()
                    .find(|x| &x.class == name && x.iou_threshold == thr)
                    .and_then(|x| x.ap);
                match (want, got) {
                    (Some(w), Some(g)) => worst = worst.max((w - g).abs()),
                    (None, None) => {}
                    _ => undefined_mismatch += 1,
                }
                cells.extend(want);
            }
        }
        let want_map = if cells.is_empty() { 0.0 } else { cells.iter().sum::<f64>() / cells.len() as f64 };
        worst = worst.max((want_map - report.map_coco).abs());
    }
    let (ap, hand) = hand_enumerated_ap();
    let report = coco_map(&[vec![]], &[vec![]], &classes).unwrap();
    let keys: Vec<&str> = report.per_threshold_map.keys().map(String::as_str).collect();
    let expected_keys = ["0.50", "0.55", "0.60", "0.65", "0.70", "0.75", "0.80", "0.85", "0.90", "0.95"];
    let grid_exact = IOU_THRESHOLDS.iter().enumerate().all(|(i, &t)| t == (50 + 5 * i) as f64 / 100.0);
    let pass = worst <= 1e-12 && undefined_mismatch == 0 && ap == hand && keys == expected_keys && grid_exact;
    Check::new(
        pass,
        format!(
            "50 scenarios: max |AP - naive| {worst:.1e}, undefined-cell mismatches {undefined_mismatch}; hand case {ap:.9} vs {hand:.9}; thresholds {}",
            keys.join(",")
        ),
    )
}

fn random_image(rng: &mut Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..3 * w * h).map(|_| rng.unit() as f32).collect()).unwrap()
}

fn tiny_support(rng: &mut Rng, n: usize) -> SupportSet {
    let mut set = AnnotationSet {
        categories: vec![Category { id: 1, name: "a".into() }],
        ..Default::default()
    };
    for i in 0..n as u64 {
        set.images.push(ImageEntry {
            id: i + 1,
            width: 16,
            height: 16,
            file: String::new(),
            pixels: Some(random_image(rng, 16, 16)),
        });
        set.annotations.push(Annotation {
            id: i + 1,
            image_id: i + 1,
            category_id: 1,
            bbox: BBox::new(1.5, 2.0, 9.0, 12.25 + i as f64 * 0.125).unwrap(),
        });
    }
    SupportSet::from_annotations(&set).unwrap()
}

fn within_one_ulp(a: f32, b: f32) -> bool {
    a == b || (a.to_bits() as i64 - b.to_bits() as i64).abs() <= 1
}

pub fn augmentation_suite() -> Check {
    let mut rng = Rng::new(808);
    let img = random_image(&mut rng, 12, 10);
    let identity = ColorJitterSpec {
        apply_probability: 1.0,
        ..ColorJitterSpec::identity()
    };
    let (same, f) = color_jitter_logged(&img, &identity, &mut rng).unwrap();
    let identity_ok = same == img && f.is_some();

    let gray = Image::filled(5, 5, [0.5; 3]);
    let bright = apply_jitter_factors(
        &gray,
        &JitterFactors {
            brightness: 1.2,
            ..JitterFactors::identity()
        },
    )
    .unwrap();
    let brightness_ok = bright.data().iter().all(|&v| v == 0.6f32);
    let desat = apply_jitter_factors(
        &img,
        &JitterFactors {
            saturation: 0.0,
            ..JitterFactors::identity()
        },
    )
    .unwrap();
    let mut desat_ok = true;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = desat.get(x, y);
            let p = img.get(x, y);
            let luma = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            desat_ok &= r == g && g == b && (r as f64 - luma).abs() < 1e-6;
        }
    }

    let spec = ColorJitterSpec::default();
    let bounds = spec.intervals();
    let small = random_image(&mut rng, 2, 2);
    let (mut applied, mut out_of_bounds, mut out_of_range) = (0, 0, 0);
    let draws = 10_000;
    for i in 0..draws {
        let mut r = Rng::new(9000 + i);
        let (out, f) = color_jitter_logged(&small, &spec, &mut r).unwrap();
        out_of_range += usize::from(!out.in_unit_range());
        if let Some(f) = f {
            applied += 1;
            let v = [f.brightness, f.contrast, f.saturation, f.hue];
            out_of_bounds += v.iter().zip(bounds).filter(|(x, (lo, hi))| **x < *lo || **x > *hi).count();
        }
    }
    let rate = applied as f64 / draws as f64;

    let turned = apply_jitter_factors(
        &img,
        &JitterFactors {
            hue: 1.0,
            ..JitterFactors::identity()
        },
    )
    .unwrap();
    let hue_ok = turned.data().iter().zip(img.data()).all(|(&a, &b)| within_one_ulp(a, b));

    let support = tiny_support(&mut rng, 5);
    let mut pss_ok = true;
    for copies in 0..3 {
        let pss = build_pseudo_support_set(&support, &spec, copies, &Rng::new(3)).unwrap();
        pss_ok &= pss.len() == support.len() * (1 + copies);
        for (item, prov) in pss.items.iter().zip(&pss.provenance) {
            let src = match prov {
                Provenance::Original => support.items.iter().find(|s| s.image_id == item.image_id),
                Provenance::Augmented(i) => support.items.get(*i),
            };
            pss_ok &= src.is_some_and(|s| s.boxes == item.boxes && s.image_id == item.image_id);
        }
    }
    let again = build_pseudo_support_set(&support, &spec, 2, &Rng::new(3)).unwrap();
    pss_ok &= again == build_pseudo_support_set(&support, &spec, 2, &Rng::new(3)).unwrap();

    let pass = identity_ok
        && brightness_ok
        && desat_ok
        && (0.78..=0.82).contains(&rate)
        && out_of_bounds == 0
        && out_of_range == 0
        && hue_ok
        && pss_ok;
    Check::new(
        pass,
        format!(
            "identity {identity_ok}, forced brightness {brightness_ok}, forced desaturation {desat_ok}, rate {rate:.4} over {draws} (0.78..0.82), factors out of bounds {out_of_bounds}, full hue turn within 1 ulp {hue_ok}, pss size/boxes/determinism {pss_ok}"
        ),
    )
}

fn named_set(names: &[&str], images: u64, per_image: u64) -> AnnotationSet {
    let mut set = AnnotationSet {
        categories: names
            .iter()
            .enumerate()
            .map(|(i, n)| Category {
                id: 10 + i as u64,
                name: n.to_string(),
            })
            .collect(),
        ..Default::default()
    };
    let mut aid = 100;
    for i in 0..images {
        set.images.push(ImageEntry {
            id: 50 + i,
            width: 32,
            height: 32,
            file: format!("{i}.png"),
            pixels: None,
        });
        for j in 0..per_image {
            aid += 1;
            set.annotations.push(Annotation {
                id: aid,
                image_id: 50 + i,
                category_id: 10 + ((i + j) % names.len() as u64),
                bbox: BBox::new(j as f64, 1.0, j as f64 + 8.0, 9.0).unwrap(),
            });
        }
    }
    set
}

pub fn sampler_merge_suite() -> Check {
    let target = synth_generate(
        &SyntheticSceneConfig {
            num_classes: 5,
            images: 160,
            domain_style: DomainStyle::Target,
            ..Default::default()
        },
        11,
    )
    .unwrap();
    let all = target.image_ids();
    let mut shot_ok = true;
    let mut notes = Vec::new();
    for k in [1usize, 3, 5, 10] {
        let spec = EpisodeSpec {
            k,
            seed: 21,
            classes: None,
        };
        let (support, rest) = sample_k_shot(&target, &spec).unwrap();
        let counts = support.instance_counts();
        let exact = target.categories.iter().all(|c| counts.get(&c.id) == Some(&k));
        let (s, r) = (support.image_ids(), rest.image_ids());
        let partition = s.is_disjoint(&r) && s.union(&r).copied().collect::<HashSet<_>>() == all;
        let repeat = sample_k_shot(&target, &spec).unwrap().0 == support;
        shot_ok &= exact && partition && repeat;
        notes.push(format!("k={k}:{}", if exact && partition && repeat { "ok" } else { "bad" }));
    }

    let a = named_set(&["A", "B"], 4, 2);
    let b = named_set(&["C"], 3, 1);
    let merged = merge_datasets(&[a.clone(), b.clone()], &[]);
    let ids: Vec<u64> = merged.categories.iter().map(|c| c.id).collect();
    let conserve = merged.annotations.len() == a.annotations.len() + b.annotations.len()
        && ids == [1, 2, 3]
        && merged.validate().is_ok();

    let x = named_set(&["stop", "yield", "roundabout"], 6, 2);
    let y = named_set(&["Stop", "speed"], 4, 1);
    let ex = merge_datasets(&[x, y], &["stop".into(), "roundabout".into()]);
    let names: Vec<&str> = ex.categories.iter().map(|c| c.name.as_str()).collect();
    let excluded = names == ["yield", "speed"]
        && ex.validate().is_ok()
        && ex.annotations.iter().all(|an| ex.categories.iter().any(|c| c.id == an.category_id))
        && ex.images.iter().all(|im| ex.annotations.iter().any(|an| an.image_id == im.id));

    let pass = shot_ok && conserve && excluded;
    Check::new(
        pass,
        format!(
            "{}; merge conservation {conserve}; exclusion of stop/roundabout {excluded} (left {names:?})",
            notes.join(" ")
        ),
    )
}

/// Configuration shared by the overfit and ablation checks: the default
/// experiment with a longer, warmed-up base stage.
pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.base_train.iterations = 3000;
    cfg.base_train.optimizer.learning_rate = 0.005;
    cfg.base_train.warmup_iterations = 100;
    cfg
}

pub struct OverfitRun {
    pub seed: u64,
    pub class_ok: bool,
    pub iou: f64,
    pub score: f64,
}

/// Short base stage, then 200 fine-tune steps at batch 1 on a single target
/// image; the top detection must land on the gt.
pub fn overfit_run(seed: u64) -> OverfitRun {
    let mut cfg = desk_config();
    cfg.base_train.iterations = 300;
    cfg.fine_tune.iterations = 200;
    cfg.fine_tune.batch_size = 1;
    cfg.fine_tune.warmup_iterations = 0;
    cfg.toggles.pss = false;
    let (base, _) = train_base(&cfg, seed).unwrap();
    let scenes = synth_generate(
        &SyntheticSceneConfig {
            num_classes: 5,
            images: 10,
            max_signs: 1,
            domain_style: DomainStyle::Target,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let id = scenes.images[seed as usize % scenes.images.len()].id;
    let one = scenes.subset(&[id].into_iter().collect());
    let (det, _) = fine_tune(base, &cfg, &one, seed).unwrap();
    let gt = one.ground_truths(id)[0];
    let top = det.detect(one.pixels(id).unwrap()).unwrap().first().copied();
    OverfitRun {
        seed,
        class_ok: top.is_some_and(|t| t.class_id == gt.class_id),
        iou: top.map_or(0.0, |t| iou(&t.bbox, &gt.bbox)),
        score: top.map_or(0.0, |t| t.score),
    }
}

pub fn overfit_suite() -> Check {
    let runs: Vec<OverfitRun> = (0..3).map(overfit_run).collect();
    let pass = runs.iter().all(|r| r.class_ok && r.iou >= 0.5);
    let detail = runs
        .iter()
        .map(|r| format!("seed {}: class {} iou {:.2} score {:.2}", r.seed, r.class_ok, r.iou, r.score))
        .collect::<Vec<_>>()
        .join("; ");
    Check::new(pass, format!("{detail} (need class and iou >= 0.5 on 3/3)"))
}

pub fn ablation_config() -> ExperimentConfig {
    let mut cfg = desk_config();
    cfg.ablation.shots = vec![5];
    cfg.ablation.seeds = vec![0, 1, 2];
    cfg
}

fn maps(out: &AblationOutcome, t: Toggles) -> Vec<f64> {
    out.cells
        .iter()
        .filter(|c| c.toggles == t)
        .map(|c| c.outcome.as_ref().map_or(f64::NAN, |m| m.map_coco))
        .collect()
}

fn median3(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Baseline, DA-off and full rows of the grid at 5 shots over 3 seeds.
pub fn ablation_suite(progress: &(dyn Fn(&CellResult) + Sync)) -> Check {
    let cfg = ablation_config();
    let rows = ablation_rows();
    let (baseline, no_da, full) = (rows[0], rows[3], rows[4]);
    let out = run_ablation(&cfg, 0, &[baseline, no_da, full], progress).unwrap();
    let (b, n, f) = (maps(&out, baseline), maps(&out, no_da), maps(&out, full));
    let failed = out.cells.iter().filter(|c| c.outcome.is_err()).count();
    let (mb, mn, mf) = (median3(&b), median3(&n), median3(&f));
    let da_wins = n.iter().zip(&f).filter(|(x, y)| y > x).count();
    let pass = failed == 0 && mf > mb && mf >= mb + 0.05 && mf > mn && da_wins >= 2;
    Check::new(
        pass,
        format!(
            "median mAP baseline {mb:.3}, UP+PSS+EN {mn:.3}, full {mf:.3} (need full >= baseline + 0.05); DA increment positive in {da_wins}/3 seeds; failed cells {failed}"
        ),
    )
}

pub fn micro_ablation_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    if let fsodlab::pipeline::DatasetSource::Synthetic(s) = &mut cfg.base_train.dataset {
        s.images = 24;
    }
    if let fsodlab::pipeline::DatasetSource::Synthetic(s) = &mut cfg.fine_tune.dataset {
        s.images = 60;
    }
    cfg.base_train.iterations = 4;
    cfg.fine_tune.iterations = 3;
    cfg.ablation.shots = vec![1, 3];
    cfg.ablation.seeds = vec![0];
    cfg
}

pub fn determinism_suite() -> Check {
    let cfg = micro_ablation_config();
    let rows = ablation_rows();
    let run = || run_ablation(&cfg, 7, &rows, &|_: &CellResult| {}).unwrap().to_csv();
    let (first, second) = (run(), run());
    let lines = first.lines().filter(|l| !l.starts_with('#')).count();
    Check::new(
        first == second && lines > 1,
        format!("two runs with master seed 7: {} bytes each, identical {}", first.len(), first == second),
    )
}
