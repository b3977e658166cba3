use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};

/// Reference anchor pyramid: one stride per feature level, with every
/// scale × ratio combination tiled over each cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub strides: Vec<usize>,
    /// Anchor side lengths in pixels (square-equivalent).
    pub scales: Vec<f64>,
    /// Height:width aspect ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            strides: vec![8],
            scales: vec![12.0, 20.0, 32.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor strides, scales and ratios must be non-empty".into()));
        }
        if self.strides.contains(&0) || self.scales.iter().chain(&self.ratios).any(|&v| !(v > 0.0)) {
            return Err(Error::Config("anchor strides, scales and ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors for an `feature_h`×`feature_w` map, row-major over cells and then
/// scale-major over the cell's `(scale, ratio)` combinations.
///
/// For scale `s` and ratio `r` the anchor is `w = s/√r`, `h = s·√r`, centred
/// at `((j+0.5)·stride, (i+0.5)·stride)`.
pub fn generate_anchors(cfg: &AnchorConfig, feature_h: usize, feature_w: usize, stride: usize) -> Vec<BBox> {
    let mut out = Vec::with_capacity(feature_h * feature_w * cfg.per_cell());
    let s = stride as f64;
    for i in 0..feature_h {
        for j in 0..feature_w {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            for &scale in &cfg.scales {
                for &ratio in &cfg.ratios {
                    let r = ratio.sqrt();
                    out.push(BBox::from_center(cx, cy, scale / r, scale * r));
                }
            }
        }
    }
    out
}
