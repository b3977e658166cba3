use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ExperimentConfig, StageConfig};
use crate::augment::{build_pseudo_support_set, SupportSet};
use crate::datasets::{load_annotations, sample_k_shot, split_query, synth_generate, AnnotationSet, Category, EpisodeSpec};
use crate::detector::{apply_freeze_policy, Detection, Detector, FreezePolicy, GroundTruth, LossBreakdown};
use crate::error::{Error, Result};
use crate::eval::{coco_map_with, EvalOptions, EvalReport};
use crate::head::ClassifierKind;
use crate::rng::{derive_seed, label_index, Rng};

/// Outcome of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: String,
    pub iterations: usize,
    pub first_losses: LossBreakdown,
    /// Mean over the last (up to) 20 iterations.
    pub final_losses: LossBreakdown,
    pub max_abs_logit: f64,
    pub training_pool_size: usize,
    pub wall_time_secs: f64,
    pub checksum: String,
    pub report: Option<EvalReport>,
    #[serde(skip)]
    pub history: Vec<LossBreakdown>,
}

fn named_seed(seed: u64, label: &str) -> u64 {
    derive_seed(seed, label_index(label))
}

/// Loads or generates a stage's dataset. Generated sets draw from `seed`
/// mixed with `label`, so base and target scenes never share a stream.
pub fn load_source(source: &DatasetSource, seed: u64, label: &str) -> Result<AnnotationSet> {
    match source {
        DatasetSource::Path(p) => load_annotations(p),
        DatasetSource::Synthetic(cfg) => synth_generate(cfg, named_seed(seed, label)),
    }
}

/// Target images split into the held-out query set and the pool shots are
/// drawn from.
#[derive(Clone, Debug)]
pub struct TargetSplit {
    pub query: AnnotationSet,
    pub pool: AnnotationSet,
}

pub fn prepare_target(cfg: &ExperimentConfig, seed: u64) -> Result<TargetSplit> {
    let target = load_source(&cfg.fine_tune.dataset, seed, "target-data")?;
    let (query, pool) = split_query(&target, cfg.query_fraction, named_seed(seed, "query"))?;
    Ok(TargetSplit { query, pool })
}

/// Draws the k-shot support from the pool and checks it is disjoint from
/// the query images.
pub fn sample_support(cfg: &ExperimentConfig, split: &TargetSplit, k: usize, seed: u64) -> Result<AnnotationSet> {
    let spec = EpisodeSpec {
        k,
        seed: derive_seed(named_seed(seed, "episode"), cfg.episode.seed),
        classes: cfg.episode.classes.clone(),
    };
    let (support, _) = sample_k_shot(&split.pool, &spec)?;
    if !support.image_ids().is_disjoint(&split.query.image_ids()) {
        return Err(Error::Contract("support and query images overlap".into()));
    }
    Ok(support)
}

fn classifier_kind(cfg: &ExperimentConfig) -> ClassifierKind {
    if cfg.toggles.embedding_norm {
        ClassifierKind::Cosine
    } else {
        ClassifierKind::Linear
    }
}

/// Runs `stage.iterations` SGD steps over `pool`, visiting items in a fresh
/// seeded order each epoch. `rebuild` may replace the pool at each new
/// epoch after the first.
fn train_loop(
    det: &mut Detector,
    stage: &StageConfig,
    pool: SupportSet,
    rng: &mut Rng,
    rebuild: Option<&dyn Fn(usize) -> Result<SupportSet>>,
) -> Result<(Vec<LossBreakdown>, usize)> {
    if pool.is_empty() {
        return Err(Error::Data("training pool is empty".into()));
    }
    let pool_size = pool.len();
    let mut pool = pool;
    let mut order = rng.permutation(pool.len());
    let mut cursor = 0;
    let mut epoch = 0;
    let mut history = Vec::with_capacity(stage.iterations);
    for it in 0..stage.iterations {
        let mut batch_idx = Vec::with_capacity(stage.batch_size);
        while batch_idx.len() < stage.batch_size.min(pool.len()) {
            if cursor == order.len() {
                epoch += 1;
                if let Some(f) = rebuild {
                    pool = f(epoch)?;
                }
                order = rng.permutation(pool.len());
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<(&crate::image::Image, &[GroundTruth])> = batch_idx
            .iter()
            .map(|&i| (&pool.items[i].image, pool.items[i].boxes.as_slice()))
            .collect();
        let mut opt = stage.optimizer.clone();
        if it < stage.warmup_iterations {
            let t = (it + 1) as f64 / stage.warmup_iterations as f64;
            opt.learning_rate *= 0.1 + 0.9 * t;
        }
        history.push(det.train_step(&batch, &opt, rng)?);
    }
    Ok((history, pool_size))
}

fn summarize(stage: &str, det: &Detector, history: Vec<LossBreakdown>, pool: usize, start: Instant) -> StageResult {
    let tail = &history[history.len().saturating_sub(20)..];
    let n = tail.len().max(1) as f64;
    let mut mean = LossBreakdown::default();
    for l in tail {
        mean.rpn_objectness += l.rpn_objectness / n;
        mean.rpn_box += l.rpn_box / n;
        mean.cls += l.cls / n;
        mean.box_reg += l.box_reg / n;
        mean.total += l.total / n;
        mean.max_abs_logit = mean.max_abs_logit.max(l.max_abs_logit);
    }
    StageResult {
        stage: stage.into(),
        iterations: history.len(),
        first_losses: history.first().copied().unwrap_or_default(),
        final_losses: mean,
        max_abs_logit: history.iter().map(|l| l.max_abs_logit).fold(0.0, f64::max),
        training_pool_size: pool,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checksum: det.checksum(),
        report: None,
        history,
    }
}

/// Freshly initialized detector for `num_classes` with the classifier the
/// toggles ask for.
pub fn fresh_detector(cfg: &ExperimentConfig, num_classes: usize, seed: u64) -> Result<Detector> {
    let mut dc = cfg.detector.clone();
    dc.num_classes = num_classes;
    dc.classifier = classifier_kind(cfg);
    Detector::new(dc, named_seed(seed, "init"))
}

/// Trains on the base domain from a seeded initialization with every
/// parameter trainable.
pub fn train_base(cfg: &ExperimentConfig, seed: u64) -> Result<(Detector, StageResult)> {
    let start = Instant::now();
    let base = load_source(&cfg.base_train.dataset, seed, "base-data")?;
    if base.categories.is_empty() {
        return Err(Error::Data("base dataset has no categories".into()));
    }
    let mut det = fresh_detector(cfg, base.categories.len(), seed)?;
    let pool = SupportSet::from_annotations(&base)?;
    let mut rng = Rng::new(named_seed(seed, "base-train"));
    let (history, n) = train_loop(&mut det, &cfg.base_train, pool, &mut rng, None)?;
    let res = summarize("base_train", &det, history, n, start);
    Ok((det, res))
}

/// The model fine-tuning starts from: the base-trained one when domain
/// adaptation is on, otherwise a fresh initialization.
pub fn starting_model(cfg: &ExperimentConfig, seed: u64, num_classes: usize) -> Result<(Detector, Option<StageResult>)> {
    if cfg.toggles.domain_adapt {
        let (det, res) = train_base(cfg, seed)?;
        Ok((det, Some(res)))
    } else {
        Ok((fresh_detector(cfg, num_classes, seed)?, None))
    }
}

/// Adapts `det` to the support classes and trains on the support (or its
/// pseudo-support set).
pub fn fine_tune(mut det: Detector, cfg: &ExperimentConfig, support: &AnnotationSet, seed: u64) -> Result<(Detector, StageResult)> {
    let start = Instant::now();
    det.reset_classifier(support.categories.len(), classifier_kind(cfg), named_seed(seed, "novel-head"))?;
    let policy = if cfg.toggles.unfrozen {
        FreezePolicy::unfrozen()
    } else {
        FreezePolicy::frozen_backbone_rpn()
    };
    apply_freeze_policy(det.params_mut(), &policy)?;
    // Velocity from the base stage does not carry over.
    for name in det.params().names().map(str::to_string).collect::<Vec<_>>() {
        let e = det.params_mut().get_mut(&name)?;
        e.velocity.iter_mut().for_each(|v| *v = 0.0);
    }

    let raw = SupportSet::from_annotations(support)?;
    let pss_rng = Rng::new(named_seed(seed, "pss"));
    let pool = if cfg.toggles.pss {
        build_pseudo_support_set(&raw, &cfg.jitter, cfg.pss_copies, &pss_rng)?
    } else {
        raw.clone()
    };
    let rebuild = |epoch: usize| build_pseudo_support_set(&raw, &cfg.jitter, cfg.pss_copies, &pss_rng.derive(epoch as u64));
    let rebuild: Option<&dyn Fn(usize) -> Result<SupportSet>> =
        (cfg.toggles.pss && cfg.rebuild_pss_each_epoch).then_some(&rebuild);
    let mut rng = Rng::new(named_seed(seed, "fine-tune"));
    let (history, n) = train_loop(&mut det, &cfg.fine_tune, pool, &mut rng, rebuild)?;
    let res = summarize("fine_tune", &det, history, n, start);
    Ok((det, res))
}

/// Detects on every query image and scores against its annotations, using
/// the class order of `classes`. Annotations of other categories are
/// ignored. The model is only read.
pub fn evaluate(det: &Detector, query: &AnnotationSet, classes: &[Category], max_detections: usize) -> Result<EvalReport> {
    let index: std::collections::HashMap<u64, usize> = classes.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let by_image = query.annotations_by_image();
    let mut dets: Vec<Vec<Detection>> = Vec::new();
    let mut gts: Vec<Vec<GroundTruth>> = Vec::new();
    for im in &query.images {
        dets.push(det.detect(query.pixels(im.id)?)?);
        gts.push(
            by_image[&im.id]
                .iter()
                .filter_map(|a| {
                    index.get(&a.category_id).map(|&class_id| GroundTruth {
                        bbox: a.bbox,
                        class_id,
                    })
                })
                .collect(),
        );
    }
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let opts = EvalOptions {
        max_detections,
        ..Default::default()
    };
    coco_map_with(&dets, &gts, &names, &opts)
}

/// Everything one end-to-end run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub shots: usize,
    pub toggles: super::Toggles,
    pub base: Option<StageResult>,
    pub fine_tune: StageResult,
    pub report: EvalReport,
    pub support_image_ids: Vec<u64>,
    pub query_image_ids: Vec<u64>,
    #[serde(skip)]
    pub model: Option<Detector>,
}

/// Split, sample, optionally base-train, fine-tune, and evaluate.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    cfg.validate()?;
    let split = prepare_target(cfg, seed)?;
    let support = sample_support(cfg, &split, cfg.episode.k, seed)?;
    let (start, base) = starting_model(cfg, seed, support.categories.len())?;
    run_from(cfg, seed, cfg.episode.k, &split, &support, start, base)
}

pub(crate) fn run_from(
    cfg: &ExperimentConfig,
    seed: u64,
    shots: usize,
    split: &TargetSplit,
    support: &AnnotationSet,
    start: Detector,
    base: Option<StageResult>,
) -> Result<ExperimentResult> {
    let (det, mut ft) = fine_tune(start, cfg, support, seed)?;
    let report = evaluate(&det, &split.query, &support.categories, cfg.eval_max_detections)?;
    ft.report = Some(report.clone());
    let sorted = |s: HashSet<u64>| {
        let mut v: Vec<u64> = s.into_iter().collect();
        v.sort_unstable();
        v
    };
    Ok(ExperimentResult {
        seed,
        shots,
        toggles: cfg.toggles,
        base,
        fine_tune: ft,
        report,
        support_image_ids: sorted(support.image_ids()),
        query_image_ids: sorted(split.query.image_ids()),
        model: Some(det),
    })
}
