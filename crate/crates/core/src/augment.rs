//! Seeded color jitter and pseudo-support-set construction.

use serde::{Deserialize, Serialize};

use crate::datasets::AnnotationSet;
use crate::detector::GroundTruth;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorJitterSpec {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue rotation, as a fraction of a full turn.
    pub hue: f64,
    pub apply_probability: f64,
}

impl Default for ColorJitterSpec {
    fn default() -> Self {
        ColorJitterSpec {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            apply_probability: 0.8,
        }
    }
}

impl ColorJitterSpec {
    /// Every factor fixed at identity, always applied.
    pub fn identity() -> Self {
        ColorJitterSpec {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            apply_probability: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("jitter {name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("jitter hue must be in [0, 0.5], got {}", self.hue)));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!(
                "jitter apply_probability must be in [0, 1], got {}",
                self.apply_probability
            )));
        }
        Ok(())
    }

    /// Closed interval each factor is drawn from: brightness, contrast,
    /// saturation, hue.
    pub fn intervals(&self) -> [(f64, f64); 4] {
        let mult = |x: f64| ((1.0 - x).max(0.0), 1.0 + x);
        [
            mult(self.brightness),
            mult(self.contrast),
            mult(self.saturation),
            (-self.hue, self.hue),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Concrete draw of one jitter application.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterFactors {
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in turns.
    pub hue: f64,
}

impl JitterFactors {
    pub fn identity() -> Self {
        JitterFactors {
            order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue],
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }
}

pub fn color_jitter(image: &Image, spec: &ColorJitterSpec, rng: &mut Rng) -> Result<Image> {
    Ok(color_jitter_logged(image, spec, rng)?.0)
}

/// Like [`color_jitter`], also returning the factors used (`None` when the
/// jitter was skipped).
pub fn color_jitter_logged(
    image: &Image,
    spec: &ColorJitterSpec,
    rng: &mut Rng,
) -> Result<(Image, Option<JitterFactors>)> {
    check_range(image)?;
    if !rng.bernoulli(spec.apply_probability) {
        return Ok((image.clone(), None));
    }
    let ops = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
    let perm = rng.permutation(4);
    let [b, c, s, h] = spec.intervals();
    let f = JitterFactors {
        order: std::array::from_fn(|i| ops[perm[i]]),
        brightness: rng.uniform(b.0, b.1),
        contrast: rng.uniform(c.0, c.1),
        saturation: rng.uniform(s.0, s.1),
        hue: rng.uniform(h.0, h.1),
    };
    let out = apply_jitter_factors(image, &f)?;
    Ok((out, Some(f)))
}

fn check_range(image: &Image) -> Result<()> {
    if image.in_unit_range() {
        Ok(())
    } else {
        Err(Error::Contract("color jitter needs pixel values in [0, 1]".into()))
    }
}

/// Applies fixed factors in the given order. Factors are not range-checked,
/// so a full hue turn can be exercised.
pub fn apply_jitter_factors(image: &Image, f: &JitterFactors) -> Result<Image> {
    check_range(image)?;
    let n = image.width() * image.height();
    let src = image.data();
    let mut px: Vec<[f64; 3]> = (0..n)
        .map(|i| [src[i] as f64, src[n + i] as f64, src[2 * n + i] as f64])
        .collect();
    let luma = |p: &[f64; 3]| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
    for op in f.order {
        match op {
            JitterOp::Brightness => {
                for p in &mut px {
                    *p = p.map(|v| (f.brightness * v).clamp(0.0, 1.0));
                }
            }
            JitterOp::Contrast => {
                let mean = if n == 0 { 0.0 } else { px.iter().map(luma).sum::<f64>() / n as f64 };
                for p in &mut px {
                    *p = p.map(|v| (mean + f.contrast * (v - mean)).clamp(0.0, 1.0));
                }
            }
            JitterOp::Saturation => {
                for p in &mut px {
                    let l = luma(p);
                    *p = p.map(|v| (l + f.saturation * (v - l)).clamp(0.0, 1.0));
                }
            }
            JitterOp::Hue => {
                for p in &mut px {
                    let (h, s, v) = rgb_to_hsv(*p);
                    *p = hsv_to_rgb((h + f.hue).rem_euclid(1.0), s, v);
                }
            }
        }
    }
    let mut data = vec![0f32; 3 * n];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = p[c] as f32;
        }
    }
    Image::new(image.width(), image.height(), data)
}

/// Hexagonal HSV; hue in turns.
fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let out = match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    out.map(|x| x.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Original,
    /// Index of the original item this was jittered from.
    Augmented(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportItem {
    pub image_id: u64,
    pub image: Image,
    pub boxes: Vec<GroundTruth>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupportSet {
    pub items: Vec<SupportItem>,
    pub provenance: Vec<Provenance>,
}

impl SupportSet {
    /// One original item per image of `set`, with contiguous class labels.
    /// Images need their pixels loaded.
    pub fn from_annotations(set: &AnnotationSet) -> Result<SupportSet> {
        let mut out = SupportSet::default();
        for im in &set.images {
            out.items.push(SupportItem {
                image_id: im.id,
                image: set.pixels(im.id)?.clone(),
                boxes: set.ground_truths(im.id),
            });
            out.provenance.push(Provenance::Original);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Originals first, then `copies` independently jittered variants of each
/// original (all variants of item 0, then of item 1, ...). Item `i`, copy `j`
/// draws from `rng.derive(i).derive(j)` so the result does not depend on
/// evaluation order.
pub fn build_pseudo_support_set(
    support: &SupportSet,
    spec: &ColorJitterSpec,
    copies: usize,
    rng: &Rng,
) -> Result<SupportSet> {
    let originals: Vec<usize> = (0..support.len())
        .filter(|&i| support.provenance[i] == Provenance::Original)
        .collect();
    let mut out = SupportSet {
        items: originals.iter().map(|&i| support.items[i].clone()).collect(),
        provenance: vec![Provenance::Original; originals.len()],
    };
    for (pos, &i) in originals.iter().enumerate() {
        let src = &support.items[i];
        for j in 0..copies {
            let mut r = rng.derive(pos as u64).derive(j as u64);
            out.items.push(SupportItem {
                image_id: src.image_id,
                image: color_jitter(&src.image, spec, &mut r)?,
                boxes: src.boxes.clone(),
            });
            out.provenance.push(Provenance::Augmented(pos));
        }
    }
    Ok(out)
}
