use serde::{Deserialize, Serialize};

use super::{
    assign_rpn_targets, decode_deltas, encode_deltas, generate_anchors, iou, nms, score_order, AnchorLabel, BBox,
    DetectorConfig,
};
use crate::error::{Error, Result};
use crate::head::{head_forward_var, unit_rows, ClassifierKind, ClassifierVars, HeadVars};
use crate::image::Image;
use crate::rng::Rng;
use crate::tensor::{sgd_momentum_step, Bindings, OptimizerConfig, ParameterRegistry, Tape, Tensor, Var};

/// Top-level parameter groups, in registry order.
pub const COMPONENTS: [&str; 3] = ["backbone", "rpn", "head"];

/// Scaling applied to region-head regression targets (x, y, w, h).
const HEAD_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
const RPN_SMOOTH_L1_BETA: f32 = 1.0 / 9.0;
const HEAD_SMOOTH_L1_BETA: f32 = 1.0;
/// Regions at least this large (square-root of area, pixels) pool from the
/// stride-16 level when it exists.
const SECOND_LEVEL_MIN_SIDE: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    /// Zero-based foreground class.
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Zero-based foreground class, `< num_classes`.
    pub class_id: usize,
    pub score: f64,
}

/// Batch-mean loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub cls: f64,
    pub box_reg: f64,
    pub total: f64,
    /// Largest absolute classifier logit seen in the step.
    pub max_abs_logit: f64,
}

struct Level {
    stride: usize,
    feat: Var,
    cls: Var,
    bbox: Var,
    h: usize,
    w: usize,
    anchors: Vec<BBox>,
}

/// The toy Faster R-CNN: a three-stage CNN backbone (stride 8, optionally a
/// stride-16 level), an RPN, and a region head with a cosine or linear
/// classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: ParameterRegistry<f32>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Detector {
    /// Seeded initialization: uniform `±√(1/fan_in)` weights, zero biases,
    /// unit-norm random rows for a cosine classifier.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParameterRegistry::new();
        let ch = &config.backbone_channels;
        let mut cin = 3;
        for (k, &c) in ch.iter().enumerate() {
            let name = format!("backbone.conv{}", k + 1);
            p.insert_uniform(format!("{name}.weight"), vec![c, cin, 3, 3], cin * 9, &mut rng)?;
            p.insert_zeros(format!("{name}.bias"), vec![c])?;
            cin = c;
        }
        let f = config.feature_channels();
        if config.levels() == 2 {
            p.insert_uniform("backbone.conv4.weight", vec![f, f, 3, 3], f * 9, &mut rng)?;
            p.insert_zeros("backbone.conv4.bias", vec![f])?;
        }
        let a = config.anchors.per_cell();
        p.insert_uniform("rpn.conv.weight", vec![f, f, 3, 3], f * 9, &mut rng)?;
        p.insert_zeros("rpn.conv.bias", vec![f])?;
        p.insert_uniform("rpn.cls.weight", vec![a, f, 1, 1], f, &mut rng)?;
        p.insert_zeros("rpn.cls.bias", vec![a])?;
        p.insert_uniform("rpn.bbox.weight", vec![4 * a, f, 1, 1], f, &mut rng)?;
        p.insert_zeros("rpn.bbox.bias", vec![4 * a])?;
        let flat = f * config.roi_size * config.roi_size;
        p.insert_uniform("head.fc1.weight", vec![config.hidden_dim, flat], flat, &mut rng)?;
        p.insert_zeros("head.fc1.bias", vec![config.hidden_dim])?;
        p.insert_uniform(
            "head.fc2.weight",
            vec![config.embedding_dim, config.hidden_dim],
            config.hidden_dim,
            &mut rng,
        )?;
        p.insert_zeros("head.fc2.bias", vec![config.embedding_dim])?;
        let mut det = Detector { config, params: p };
        det.init_class_layers(&mut rng, None)?;
        Ok(det)
    }

    /// (Re)creates the classifier and box regressor for
    /// `config.num_classes`. A cosine background row from `keep_background`
    /// is carried over.
    fn init_class_layers(&mut self, rng: &mut Rng, keep_background: Option<Vec<f32>>) -> Result<()> {
        let (c, d) = (self.config.num_classes + 1, self.config.embedding_dim);
        for n in ["head.cls.weight", "head.cls.bias", "head.bbox.weight", "head.bbox.bias"] {
            self.params.remove(n);
        }
        match self.config.classifier {
            ClassifierKind::Cosine => {
                let mut rows = unit_rows(c, d, rng);
                if let Some(bg) = keep_background.filter(|bg| bg.len() == d) {
                    rows[..d].copy_from_slice(&bg);
                }
                self.params.insert("head.cls.weight", Tensor::new(vec![c, d], rows)?)?;
            }
            ClassifierKind::Linear => {
                self.params.insert_uniform("head.cls.weight", vec![c, d], d, rng)?;
                self.params.insert_zeros("head.cls.bias", vec![c])?;
            }
        }
        self.params
            .insert_uniform("head.bbox.weight", vec![4 * (c - 1), d], d, rng)?;
        self.params.insert_zeros("head.bbox.bias", vec![4 * (c - 1)])?;
        Ok(())
    }

    /// Swaps the classifier and box regressor for a new foreground class
    /// count. Classifier rows are freshly initialized (the cosine background
    /// row is kept); everything else, including the classifier kind, is
    /// preserved.
    pub fn reset_classes(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let kind = self.config.classifier;
        self.reset_classifier(num_classes, kind, seed)
    }

    /// Like [`Detector::reset_classes`] but may also switch the classifier
    /// kind, in which case no row is carried over.
    pub fn reset_classifier(&mut self, num_classes: usize, kind: ClassifierKind, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be ≥ 1".into()));
        }
        let bg = match (self.config.classifier, kind) {
            (ClassifierKind::Cosine, ClassifierKind::Cosine) => {
                let d = self.config.embedding_dim;
                Some(self.params.get("head.cls.weight")?.tensor.data()[..d].to_vec())
            }
            _ => None,
        };
        self.config.num_classes = num_classes;
        self.config.classifier = kind;
        self.init_class_layers(&mut Rng::new(seed), bg)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterRegistry<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterRegistry<f32> {
        &mut self.params
    }

    /// Rebuilds a detector from saved parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_parts(config: DetectorConfig, params: ParameterRegistry<f32>) -> Result<Self> {
        let reference = Detector::new(config.clone(), 0)?;
        for (name, e) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            if got.tensor.shape() != e.tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.tensor.shape(),
                    e.tensor.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Data("checkpoint has unexpected extra parameters".into()));
        }
        Ok(Detector { config, params })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Checksum of one top-level component (`"backbone"`, `"rpn"`, `"head"`).
    pub fn component_checksum(&self, component: &str) -> String {
        self.params
            .checksum_filtered(|n| crate::tensor::name_has_prefix(n, component))
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let m = self.config.size_multiple();
        let (w, h) = (image.width(), image.height());
        if w < 2 * m || h < 2 * m {
            return Err(Error::Data(format!(
                "image {w}x{h} is smaller than the minimum backbone input {}x{}",
                2 * m,
                2 * m
            )));
        }
        if w % m != 0 || h % m != 0 {
            return Err(Error::Data(format!(
                "image {w}x{h} must have sides divisible by {m}"
            )));
        }
        Ok(())
    }

    fn forward_levels(&self, tape: &mut Tape<f32>, b: &Bindings, image: &Image) -> Result<Vec<Level>> {
        self.check_image(image)?;
        let centred: Vec<f32> = image.data().iter().map(|v| v - 0.5).collect();
        let mut x = tape.constant(vec![3, image.height(), image.width()], centred)?;
        for k in 1..=3 {
            let w = b.get(&format!("backbone.conv{k}.weight"))?;
            let bias = b.get(&format!("backbone.conv{k}.bias"))?;
            x = tape.conv2d(x, w, bias, 1, 1)?;
            x = tape.relu(x);
            x = tape.maxpool2d(x, 2)?;
        }
        let mut feats = vec![(8usize, x)];
        if self.config.levels() == 2 {
            let p = tape.maxpool2d(x, 2)?;
            let y = tape.conv2d(p, b.get("backbone.conv4.weight")?, b.get("backbone.conv4.bias")?, 1, 1)?;
            feats.push((16, tape.relu(y)));
        }
        let mut levels = Vec::with_capacity(feats.len());
        for (stride, feat) in feats {
            let shape = tape.shape(feat).to_vec();
            let (h, w) = (shape[1], shape[2]);
            let r = tape.conv2d(feat, b.get("rpn.conv.weight")?, b.get("rpn.conv.bias")?, 1, 1)?;
            let r = tape.relu(r);
            let cls = tape.conv2d(r, b.get("rpn.cls.weight")?, b.get("rpn.cls.bias")?, 1, 0)?;
            let bbox = tape.conv2d(r, b.get("rpn.bbox.weight")?, b.get("rpn.bbox.bias")?, 1, 0)?;
            let anchors = generate_anchors(&self.config.anchors, h, w, stride);
            levels.push(Level {
                stride,
                feat,
                cls,
                bbox,
                h,
                w,
                anchors,
            });
        }
        Ok(levels)
    }

    /// Flat offsets of anchor `k` of a level into its objectness map and
    /// its four delta channels.
    fn anchor_slots(&self, level: &Level, k: usize) -> (usize, [usize; 4]) {
        let a_per = self.config.anchors.per_cell();
        let (cell, a) = (k / a_per, k % a_per);
        let hw = level.h * level.w;
        let cls = a * hw + cell;
        let d = [0, 1, 2, 3].map(|c| (a * 4 + c) * hw + cell);
        (cls, d)
    }

    fn propose(&self, tape: &Tape<f32>, levels: &[Level], image: &Image, floor: Option<f64>) -> Vec<Proposal> {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (li, lv) in levels.iter().enumerate() {
            let cls = tape.data(lv.cls);
            for k in 0..lv.anchors.len() {
                let (c, _) = self.anchor_slots(lv, k);
                cands.push((cls[c] as f64, li, k));
            }
        }
        let order = score_order(cands.iter().map(|c| c.0));
        let (iw, ih) = (image.width() as f64, image.height() as f64);
        let mut props: Vec<(BBox, f64)> = Vec::new();
        for &i in order.iter().take(self.config.pre_nms_top_k) {
            let (logit, li, k) = cands[i];
            let objectness = sigmoid(logit);
            if floor.is_some_and(|f| objectness <= f) {
                continue;
            }
            let lv = &levels[li];
            let (_, d) = self.anchor_slots(lv, k);
            let bd = tape.data(lv.bbox);
            let t = d.map(|s| bd[s] as f64);
            let bx = decode_deltas(&lv.anchors[k], t).clip(iw, ih);
            if bx.width() <= self.config.min_proposal_size || bx.height() <= self.config.min_proposal_size {
                continue;
            }
            props.push((bx, objectness));
        }
        nms(&props, self.config.proposal_nms)
            .into_iter()
            .take(self.config.post_nms_top_k)
            .map(|i| Proposal {
                bbox: props[i].0,
                objectness: props[i].1,
            })
            .collect()
    }

    fn head_vars(&self, b: &Bindings) -> Result<HeadVars> {
        let classifier = match self.config.classifier {
            ClassifierKind::Cosine => ClassifierVars::Cosine {
                weight: b.get("head.cls.weight")?,
                gamma: self.config.gamma,
                eps: self.config.eps,
            },
            ClassifierKind::Linear => ClassifierVars::Linear {
                weight: b.get("head.cls.weight")?,
                bias: b.get("head.cls.bias")?,
            },
        };
        Ok(HeadVars {
            fc1_weight: b.get("head.fc1.weight")?,
            fc1_bias: b.get("head.fc1.bias")?,
            fc2_weight: b.get("head.fc2.weight")?,
            fc2_bias: b.get("head.fc2.bias")?,
            bbox_weight: b.get("head.bbox.weight")?,
            bbox_bias: b.get("head.bbox.bias")?,
            classifier,
        })
    }

    fn level_for(&self, bx: &BBox) -> usize {
        if self.config.levels() == 2 && bx.area().sqrt() >= SECOND_LEVEL_MIN_SIDE {
            1
        } else {
            0
        }
    }

    /// ROI-aligned features for `rois` as `[R, C·S·S]`, rows in the order
    /// given by the returned permutation of `rois`.
    fn pool(&self, tape: &mut Tape<f32>, levels: &[Level], rois: &[BBox]) -> Result<(Var, Vec<usize>)> {
        let s = self.config.roi_size;
        let f = self.config.feature_channels();
        let mut order = Vec::with_capacity(rois.len());
        let mut parts = Vec::new();
        for (li, lv) in levels.iter().enumerate() {
            let idx: Vec<usize> = (0..rois.len()).filter(|&i| self.level_for(&rois[i]) == li).collect();
            if idx.is_empty() {
                continue;
            }
            let boxes: Vec<[f64; 4]> = idx.iter().map(|&i| rois[i].to_array()).collect();
            parts.push(tape.roi_align(lv.feat, &boxes, s, lv.stride as f64)?);
            order.extend(idx);
        }
        let flat = if parts.len() == 1 { parts[0] } else { tape.concat(&parts) };
        let rows = tape.reshape(flat, vec![rois.len(), f * s * s])?;
        Ok((rows, order))
    }

    /// Runs the full two-stage pipeline on one image.
    pub fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let levels = self.forward_levels(&mut tape, &b, image)?;
        let proposals = self.propose(&tape, &levels, image, Some(self.config.objectness_floor));
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let (rows, order) = self.pool(&mut tape, &levels, &rois)?;
        let (logits, deltas, _) = head_forward_var(&mut tape, rows, &self.head_vars(&b)?)?;
        let c = self.config.num_classes + 1;
        let (ld, dd) = (tape.data(logits), tape.data(deltas));
        let (iw, ih) = (image.width() as f64, image.height() as f64);
        let mut per_class: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); c - 1];
        for (r, &ri) in order.iter().enumerate() {
            let row = &ld[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            for k in 1..c {
                let score = (row[k] as f64 - mx).exp() / z;
                if score <= self.config.score_threshold {
                    continue;
                }
                let base = r * 4 * (c - 1) + 4 * (k - 1);
                let t = [0, 1, 2, 3].map(|q| dd[base + q] as f64 / HEAD_DELTA_WEIGHTS[q]);
                let bx = decode_deltas(&rois[ri], t).clip(iw, ih);
                if bx.width() <= self.config.min_proposal_size || bx.height() <= self.config.min_proposal_size {
                    continue;
                }
                per_class[k - 1].push((bx, score));
            }
        }
        let mut dets = Vec::new();
        for (class_id, cands) in per_class.iter().enumerate() {
            for i in nms(cands, self.config.detection_nms) {
                dets.push(Detection {
                    bbox: cands[i].0,
                    class_id,
                    score: cands[i].1.clamp(0.0, 1.0),
                });
            }
        }
        let order = score_order(dets.iter().map(|d| d.score));
        Ok(order
            .into_iter()
            .take(self.config.max_detections)
            .map(|i| dets[i])
            .collect())
    }

    /// RPN proposals only (no region head), for inspection.
    pub fn proposals(&self, image: &Image) -> Result<Vec<Proposal>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let levels = self.forward_levels(&mut tape, &b, image)?;
        Ok(self.propose(&tape, &levels, image, Some(self.config.objectness_floor)))
    }

    /// Region embeddings (the input to the classifier) for given boxes.
    pub fn embeddings(&self, image: &Image, rois: &[BBox]) -> Result<Vec<Vec<f32>>> {
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let levels = self.forward_levels(&mut tape, &b, image)?;
        let (rows, order) = self.pool(&mut tape, &levels, rois)?;
        let (_, _, emb) = head_forward_var(&mut tape, rows, &self.head_vars(&b)?)?;
        let d = self.config.embedding_dim;
        let data = tape.data(emb);
        let mut out = vec![Vec::new(); rois.len()];
        for (r, &ri) in order.iter().enumerate() {
            out[ri] = data[r * d..(r + 1) * d].to_vec();
        }
        Ok(out)
    }

    fn image_loss(
        &self,
        tape: &mut Tape<f32>,
        b: &Bindings,
        image: &Image,
        gts: &[GroundTruth],
        rng: &mut Rng,
        parts: &mut LossBreakdown,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if let Some(g) = gts.iter().find(|g| g.class_id >= cfg.num_classes) {
            return Err(Error::Data(format!(
                "ground-truth class {} out of range for {} classes",
                g.class_id, cfg.num_classes
            )));
        }
        let levels = self.forward_levels(tape, b, image)?;
        let mut losses = Vec::new();

        // RPN targets over all levels.
        let mut anchor_ref = Vec::new();
        let mut anchors = Vec::new();
        for (li, lv) in levels.iter().enumerate() {
            for (k, a) in lv.anchors.iter().enumerate() {
                anchor_ref.push((li, k));
                anchors.push(*a);
            }
        }
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let targets = assign_rpn_targets(&anchors, &gt_boxes, cfg.rpn_positive_iou, cfg.rpn_negative_iou);
        let mut pos: Vec<usize> = (0..anchors.len())
            .filter(|&i| targets.labels[i] == AnchorLabel::Positive)
            .collect();
        let mut neg: Vec<usize> = (0..anchors.len())
            .filter(|&i| targets.labels[i] == AnchorLabel::Negative)
            .collect();
        rng.shuffle(&mut pos);
        rng.shuffle(&mut neg);
        let max_pos = (cfg.rpn_batch_per_image as f64 * cfg.rpn_positive_fraction).round() as usize;
        pos.truncate(max_pos);
        neg.truncate(cfg.rpn_batch_per_image.saturating_sub(pos.len()));

        let mut gathered = Vec::new();
        let mut labels = Vec::new();
        for (li, lv) in levels.iter().enumerate() {
            let mut idx = Vec::new();
            for (&i, t) in pos.iter().map(|i| (i, 1.0f32)).chain(neg.iter().map(|i| (i, 0.0))) {
                let (l, k) = anchor_ref[i];
                if l == li {
                    idx.push(self.anchor_slots(lv, k).0);
                    labels.push(t);
                }
            }
            if !idx.is_empty() {
                gathered.push(tape.gather(lv.cls, &idx)?);
            }
        }
        if !gathered.is_empty() {
            let logits = if gathered.len() == 1 { gathered[0] } else { tape.concat(&gathered) };
            let l = tape.bce_with_logits(logits, &labels)?;
            parts.rpn_objectness += tape.value(l).item() as f64;
            losses.push(l);
        }
        if !pos.is_empty() {
            let mut pred_parts = Vec::new();
            let mut target = Vec::new();
            for (li, lv) in levels.iter().enumerate() {
                let mut idx = Vec::new();
                for &i in &pos {
                    let (l, k) = anchor_ref[i];
                    if l == li {
                        idx.extend(self.anchor_slots(lv, k).1);
                        let g = &gt_boxes[targets.matched[i].expect("positive anchors are matched")];
                        target.extend(encode_deltas(&anchors[i], g).map(|v| v as f32));
                    }
                }
                if !idx.is_empty() {
                    pred_parts.push(tape.gather(lv.bbox, &idx)?);
                }
            }
            let pred = if pred_parts.len() == 1 { pred_parts[0] } else { tape.concat(&pred_parts) };
            let tgt = tape.constant(vec![target.len()], target)?;
            let l = tape.smooth_l1_loss(pred, tgt, RPN_SMOOTH_L1_BETA)?;
            parts.rpn_box += tape.value(l).item() as f64;
            losses.push(l);
        }

        // Region head on sampled proposals plus the ground truth itself.
        let mut rois: Vec<BBox> = self.propose(tape, &levels, image, None).iter().map(|p| p.bbox).collect();
        rois.extend(gt_boxes.iter().copied());
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        let mut roi_gt = vec![None; rois.len()];
        for (ri, r) in rois.iter().enumerate() {
            let mut best = (0.0, None);
            for (gi, g) in gt_boxes.iter().enumerate() {
                let v = iou(r, g);
                if v > best.0 {
                    best = (v, Some(gi));
                }
            }
            if best.0 >= cfg.roi_foreground_iou {
                roi_gt[ri] = best.1;
                fg.push(ri);
            } else {
                bg.push(ri);
            }
        }
        rng.shuffle(&mut fg);
        rng.shuffle(&mut bg);
        let max_fg = (cfg.roi_batch_per_image as f64 * cfg.roi_positive_fraction).round() as usize;
        fg.truncate(max_fg);
        bg.truncate(cfg.roi_batch_per_image.saturating_sub(fg.len()));
        let sampled: Vec<usize> = fg.iter().chain(&bg).copied().collect();
        if sampled.is_empty() {
            return Ok(losses);
        }
        let sampled_boxes: Vec<BBox> = sampled.iter().map(|&i| rois[i]).collect();
        let (rows, order) = self.pool(tape, &levels, &sampled_boxes)?;
        let (logits, deltas, _) = head_forward_var(tape, rows, &self.head_vars(b)?)?;
        let c = cfg.num_classes + 1;
        let row_labels: Vec<usize> = order
            .iter()
            .map(|&s| roi_gt[sampled[s]].map_or(0, |g| gts[g].class_id + 1))
            .collect();
        let l = tape.softmax_ce_loss(logits, &row_labels)?;
        parts.cls += tape.value(l).item() as f64;
        parts.max_abs_logit = tape
            .data(logits)
            .iter()
            .fold(parts.max_abs_logit, |m, &v| m.max(v.abs() as f64));
        losses.push(l);

        let mut idx = Vec::new();
        let mut target = Vec::new();
        for (r, &s) in order.iter().enumerate() {
            let ri = sampled[s];
            if let Some(g) = roi_gt[ri] {
                let cls = gts[g].class_id;
                let base = r * 4 * (c - 1) + 4 * cls;
                idx.extend(base..base + 4);
                let t = encode_deltas(&rois[ri], &gt_boxes[g]);
                target.extend((0..4).map(|q| (t[q] * HEAD_DELTA_WEIGHTS[q]) as f32));
            }
        }
        if !idx.is_empty() {
            let pred = tape.gather(deltas, &idx)?;
            let tgt = tape.constant(vec![target.len()], target)?;
            let l = tape.smooth_l1_loss(pred, tgt, HEAD_SMOOTH_L1_BETA)?;
            parts.box_reg += tape.value(l).item() as f64;
            losses.push(l);
        }
        Ok(losses)
    }

    /// Loss terms for a batch without updating anything.
    pub fn evaluate_loss(&self, batch: &[(&Image, &[GroundTruth])], rng: &mut Rng) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        self.batch_loss(&mut tape, &b, batch, rng).map(|(_, parts)| parts)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<f32>,
        b: &Bindings,
        batch: &[(&Image, &[GroundTruth])],
        rng: &mut Rng,
    ) -> Result<(Option<Var>, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let mut parts = LossBreakdown::default();
        let mut all = Vec::new();
        for (image, gts) in batch {
            all.extend(self.image_loss(tape, b, image, gts, rng, &mut parts)?);
        }
        let n = batch.len() as f64;
        parts.rpn_objectness /= n;
        parts.rpn_box /= n;
        parts.cls /= n;
        parts.box_reg /= n;
        parts.total = parts.rpn_objectness + parts.rpn_box + parts.cls + parts.box_reg;
        if all.is_empty() {
            return Ok((None, parts));
        }
        let sum = tape.add_all(&all)?;
        Ok((Some(tape.scale(sum, 1.0 / n as f32)), parts))
    }

    /// One optimizer step on a batch of images. Parameters marked
    /// non-trainable are left exactly as they are.
    pub fn train_step(
        &mut self,
        batch: &[(&Image, &[GroundTruth])],
        opt: &OptimizerConfig,
        rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let (loss, parts) = self.batch_loss(&mut tape, &b, batch, rng)?;
        if !parts.total.is_finite() {
            return Err(Error::Data(format!("non-finite training loss {parts:?}")));
        }
        if let Some(loss) = loss {
            tape.backward(loss)?;
        } else {
            // Nothing to learn from; record zero gradients for a no-op step.
            let z = tape.constant(vec![1], vec![0.0])?;
            tape.backward(z)?;
        }
        self.params.accumulate_grads(&tape, &b)?;
        sgd_momentum_step(&mut self.params, opt)?;
        Ok(parts)
    }
}
