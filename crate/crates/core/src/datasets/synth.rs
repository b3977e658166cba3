use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Annotation, AnnotationSet, Category, ImageEntry};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

/// Selects one of two disjoint palette families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainStyle {
    Base,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub num_classes: usize,
    pub images: usize,
    pub width: usize,
    pub height: usize,
    /// Side length range of the sign's bounding square, in pixels.
    pub sign_size: [f64; 2],
    pub max_signs: usize,
    pub occlusion_probability: f64,
    pub occlusion_max_fraction: f64,
    pub blur_probability: f64,
    /// Odd box-blur kernel side.
    pub blur_kernel: usize,
    pub brightness_range: [f64; 2],
    /// Clutter blobs per 256 pixels of image area.
    pub clutter_density: f64,
    pub domain_style: DomainStyle,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            num_classes: 5,
            images: 100,
            width: 64,
            height: 64,
            sign_size: [12.0, 28.0],
            max_signs: 2,
            occlusion_probability: 0.2,
            occlusion_max_fraction: 0.4,
            blur_probability: 0.2,
            blur_kernel: 3,
            brightness_range: [0.7, 1.15],
            clutter_density: 0.3,
            domain_style: DomainStyle::Base,
        }
    }
}

const SHAPES: [&str; 4] = ["circle", "triangle", "square", "octagon"];
const MOTIFS: [&str; 3] = ["bar", "dot", "arrow"];
const MAX_CLASSES: usize = SHAPES.len() * 2 * MOTIFS.len();

struct Palette {
    name: &'static str,
    rim: [f32; 3],
    fill: [f32; 3],
    motif: [f32; 3],
}

const BASE_PALETTES: [Palette; 2] = [
    Palette {
        name: "red",
        rim: [0.85, 0.08, 0.08],
        fill: [0.96, 0.96, 0.96],
        motif: [0.08, 0.08, 0.08],
    },
    Palette {
        name: "blue",
        rim: [0.95, 0.95, 0.95],
        fill: [0.1, 0.3, 0.85],
        motif: [0.95, 0.95, 0.95],
    },
];

const TARGET_PALETTES: [Palette; 2] = [
    Palette {
        name: "yellow",
        rim: [0.08, 0.08, 0.08],
        fill: [0.97, 0.8, 0.1],
        motif: [0.08, 0.08, 0.08],
    },
    Palette {
        name: "green",
        rim: [0.95, 0.95, 0.95],
        fill: [0.08, 0.55, 0.25],
        motif: [0.95, 0.95, 0.95],
    },
];

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("occlusion_probability", self.occlusion_probability)?;
        prob("occlusion_max_fraction", self.occlusion_max_fraction)?;
        prob("blur_probability", self.blur_probability)?;
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.width == 0 || self.height == 0 || self.max_signs == 0 {
            return Err(Error::Config("image size and max_signs must be positive".into()));
        }
        let [lo, hi] = self.sign_size;
        if !(lo >= 4.0 && lo <= hi && hi <= self.width.min(self.height) as f64) {
            return Err(Error::Config(format!(
                "sign_size [{lo}, {hi}] must satisfy 4 <= lo <= hi <= min(width, height)"
            )));
        }
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(Error::Config(format!("blur_kernel must be odd, got {}", self.blur_kernel)));
        }
        let [b0, b1] = self.brightness_range;
        if !(b0 > 0.0 && b0 <= b1 && b1.is_finite()) {
            return Err(Error::Config(format!("brightness_range [{b0}, {b1}] is invalid")));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return Err(Error::Config("clutter_density must be non-negative".into()));
        }
        Ok(())
    }

    fn palettes(&self) -> &'static [Palette; 2] {
        match self.domain_style {
            DomainStyle::Base => &BASE_PALETTES,
            DomainStyle::Target => &TARGET_PALETTES,
        }
    }

    /// `(shape, palette, motif)` indices of a zero-based class.
    fn class_parts(class: usize) -> (usize, usize, usize) {
        (class % 4, (class / 4) % 2, (class / 8) % 3)
    }

    pub fn class_name(&self, class: usize) -> String {
        let (s, p, m) = Self::class_parts(class);
        format!("{}-{}-{}", SHAPES[s], self.palettes()[p].name, MOTIFS[m])
    }
}

/// Per-sign ground truth plus the measured occlusion, for statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SignRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    /// Share of the box area covered by the occluder.
    pub occluded_fraction: f64,
    pub blurred: bool,
}

pub fn synth_generate(cfg: &SyntheticSceneConfig, seed: u64) -> Result<AnnotationSet> {
    Ok(synth_generate_with_stats(cfg, seed)?.0)
}

pub fn synth_generate_with_stats(cfg: &SyntheticSceneConfig, seed: u64) -> Result<(AnnotationSet, Vec<SignRecord>)> {
    cfg.validate()?;
    let root = Rng::new(seed).derive_named("synth");
    let scenes: Vec<(Image, Vec<SignRecord>)> = (0..cfg.images)
        .into_par_iter()
        .map(|i| render_scene(cfg, i, &mut root.derive(i as u64)))
        .collect();

    let mut set = AnnotationSet {
        categories: (0..cfg.num_classes)
            .map(|c| Category {
                id: c as u64 + 1,
                name: cfg.class_name(c),
            })
            .collect(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for (i, (img, signs)) in scenes.into_iter().enumerate() {
        let id = i as u64 + 1;
        set.images.push(ImageEntry {
            id,
            width: cfg.width,
            height: cfg.height,
            file: format!("images/{id:06}.png"),
            pixels: Some(img),
        });
        for s in signs {
            set.annotations.push(Annotation {
                id: set.annotations.len() as u64 + 1,
                image_id: id,
                category_id: s.category_id,
                bbox: s.bbox,
            });
            records.push(s);
        }
    }
    Ok((set, records))
}

fn muted(rng: &mut Rng) -> [f32; 3] {
    let base = rng.uniform(0.2, 0.6);
    let mut c = [0f32; 3];
    for ch in &mut c {
        *ch = (base + rng.uniform(-0.08, 0.08)) as f32;
    }
    c
}

// Membership tests in a frame where the glyph spans [-1, 1]^2.
fn in_shape(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) / 1.8,
        2 => u.abs() <= 0.9 && v.abs() <= 0.9,
        _ => u.abs() <= 1.0 && v.abs() <= 1.0 && u.abs() + v.abs() <= 1.25,
    }
}

fn in_motif(motif: usize, u: f64, v: f64) -> bool {
    match motif {
        0 => v.abs() <= 0.13 && u.abs() <= 0.45,
        1 => u * u + v * v <= 0.22 * 0.22,
        _ => {
            (u.abs() <= 0.1 && (-0.1..=0.45).contains(&v))
                || ((-0.45..=-0.1).contains(&v) && u.abs() <= (v + 0.45) * 0.9)
        }
    }
}

fn render_scene(cfg: &SyntheticSceneConfig, index: usize, rng: &mut Rng) -> (Image, Vec<SignRecord>) {
    let (w, h) = (cfg.width, cfg.height);
    let top = muted(rng);
    let bottom = muted(rng);
    let mut img = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        let t = (y as f32 + 0.5) / h as f32;
        for x in 0..w {
            img.set(x, y, std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t));
        }
    }
    let blobs = (cfg.clutter_density * (w * h) as f64 / 256.0).round() as usize;
    for _ in 0..blobs {
        let color = muted(rng);
        let bw = rng.uniform(3.0, 14.0);
        let bh = rng.uniform(3.0, 14.0);
        let cx = rng.uniform(0.0, w as f64);
        let cy = rng.uniform(0.0, h as f64);
        let ellipse = rng.bernoulli(0.5);
        fill_where(&mut img, cx - bw, cy - bh, cx + bw, cy + bh, color, |px, py| {
            let (du, dv) = ((px - cx) / bw, (py - cy) / bh);
            !ellipse || du * du + dv * dv <= 1.0
        });
    }

    let n_signs = rng.int_range(1, cfg.max_signs as i64) as usize;
    let mut placed: Vec<BBox> = Vec::new();
    let mut records = Vec::new();
    for k in 0..n_signs {
        let class = if k == 0 {
            index % cfg.num_classes
        } else {
            rng.index(cfg.num_classes)
        };
        let size = rng.uniform(cfg.sign_size[0], cfg.sign_size[1]);
        let mut spot = None;
        for _ in 0..30 {
            let x0 = rng.uniform(0.0, w as f64 - size);
            let y0 = rng.uniform(0.0, h as f64 - size);
            let cand = BBox::from_center(x0 + size / 2.0, y0 + size / 2.0, size + 2.0, size + 2.0);
            if placed.iter().all(|p| crate::detector::iou(p, &cand) == 0.0) {
                spot = Some((x0, y0));
                placed.push(cand);
                break;
            }
        }
        let Some((x0, y0)) = spot else { continue };
        let Some(bbox) = draw_sign(cfg, &mut img, class, x0, y0, size) else {
            continue;
        };
        let mut occluded_fraction = 0.0;
        if rng.bernoulli(cfg.occlusion_probability) {
            let f = rng.uniform(0.0, cfg.occlusion_max_fraction);
            occluded_fraction = occlude(&mut img, &bbox, f, rng.index(4), muted(rng));
        }
        records.push(SignRecord {
            image_id: index as u64 + 1,
            category_id: class as u64 + 1,
            bbox,
            occluded_fraction,
            blurred: false,
        });
    }

    if rng.bernoulli(cfg.blur_probability) {
        box_blur(&mut img, cfg.blur_kernel);
        for r in &mut records {
            r.blurred = true;
        }
    }
    let gain = rng.uniform(cfg.brightness_range[0], cfg.brightness_range[1]) as f32;
    for v in img.data_mut() {
        *v = (*v * gain).clamp(0.0, 1.0);
    }
    img.quantize();
    (img, records)
}

fn fill_where(
    img: &mut Image,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    color: [f32; 3],
    inside: impl Fn(f64, f64) -> bool,
) {
    let xs = x1.floor().max(0.0) as usize..(x2.ceil().max(0.0) as usize).min(img.width());
    let ys = y1.floor().max(0.0) as usize..(y2.ceil().max(0.0) as usize).min(img.height());
    for y in ys {
        for x in xs.clone() {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                img.set(x, y, color);
            }
        }
    }
}

// Draws the glyph and returns the tight bounds of its outer mask.
fn draw_sign(cfg: &SyntheticSceneConfig, img: &mut Image, class: usize, x0: f64, y0: f64, size: f64) -> Option<BBox> {
    let (shape, pal, motif) = SyntheticSceneConfig::class_parts(class);
    let pal = &cfg.palettes()[pal];
    let r = size / 2.0;
    let (cx, cy) = (x0 + r, y0 + r);
    // Triangles are bottom-heavy; shift inner parts toward the centroid.
    let shift = if shape == 1 { 0.1 } else { 0.0 };
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    let xs = x0.floor() as usize..((x0 + size).ceil() as usize).min(img.width());
    for y in y0.floor() as usize..((y0 + size).ceil() as usize).min(img.height()) {
        for x in xs.clone() {
            let u = (x as f64 + 0.5 - cx) / r;
            let v = (y as f64 + 0.5 - cy) / r;
            if !in_shape(shape, u, v) {
                continue;
            }
            let (iu, iv) = (u / 0.7, (v - shift) / 0.7);
            let color = if !in_shape(shape, iu, iv) {
                pal.rim
            } else if in_motif(motif, iu, iv) {
                pal.motif
            } else {
                pal.fill
            };
            img.set(x, y, color);
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
    }
    let (a, b, c, d) = bounds?;
    Some(BBox {
        x1: a as f64,
        y1: b as f64,
        x2: c as f64 + 1.0,
        y2: d as f64 + 1.0,
    })
}

// Paints a band from one side of the box covering about `fraction` of it and
// returns the exact covered share of the box's pixels.
fn occlude(img: &mut Image, bbox: &BBox, fraction: f64, side: usize, color: [f32; 3]) -> f64 {
    let (x1, y1, x2, y2) = (bbox.x1 as usize, bbox.y1 as usize, bbox.x2 as usize, bbox.y2 as usize);
    let (bw, bh) = (x2 - x1, y2 - y1);
    let horizontal = side < 2;
    let extent = if horizontal { bw } else { bh };
    let band = (fraction * extent as f64).round() as usize;
    let (rx, ry) = match side {
        0 => (x1..x1 + band, y1..y2),
        1 => (x2 - band..x2, y1..y2),
        2 => (x1..x2, y1..y1 + band),
        _ => (x1..x2, y2 - band..y2),
    };
    for y in ry {
        for x in rx.clone() {
            img.set(x, y, color);
        }
    }
    band as f64 / extent as f64
}

fn box_blur(img: &mut Image, k: usize) {
    let (w, h) = (img.width(), img.height());
    let r = (k / 2) as isize;
    let src = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let p = src.get(sx, sy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            let n = (k * k) as f32;
            img.set(x, y, acc.map(|a| a / n));
        }
    }
}
