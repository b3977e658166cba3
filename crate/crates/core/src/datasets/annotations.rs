use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// PNG path relative to the annotation file's directory.
    pub file: String,
    #[serde(skip)]
    pub pixels: Option<Image>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    #[serde(with = "raw_box")]
    pub bbox: BBox,
}

// Boxes are parsed unchecked so validation can report the annotation id.
mod raw_box {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox { x1, y1, x2, y2 })
    }
}

/// Images, ground-truth boxes, and the category table of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub categories: Vec<Category>,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    /// Checks id uniqueness, references, and box bounds. Each failure names
    /// the offending id.
    pub fn validate(&self) -> Result<()> {
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::Data(format!("duplicate category id {}", c.id)));
            }
        }
        let mut images = HashMap::new();
        for im in &self.images {
            if images.insert(im.id, im).is_some() {
                return Err(Error::Data(format!("duplicate image id {}", im.id)));
            }
            if let Some(px) = &im.pixels {
                if px.width() != im.width || px.height() != im.height {
                    return Err(Error::Data(format!(
                        "image id {} is declared {}x{} but its pixels are {}x{}",
                        im.id,
                        im.width,
                        im.height,
                        px.width(),
                        px.height()
                    )));
                }
            }
        }
        let mut anns = HashSet::new();
        for a in &self.annotations {
            if !anns.insert(a.id) {
                return Err(Error::Data(format!("duplicate annotation id {}", a.id)));
            }
            let Some(im) = images.get(&a.image_id) else {
                return Err(Error::Data(format!(
                    "dangling image_id {} in annotation id {}",
                    a.image_id, a.id
                )));
            };
            if !cats.contains(&a.category_id) {
                return Err(Error::Data(format!(
                    "dangling category_id {} in annotation id {}",
                    a.category_id, a.id
                )));
            }
            if !a.bbox.is_valid() || !a.bbox.inside(im.width as f64, im.height as f64) {
                return Err(Error::Data(format!(
                    "out-of-bounds or invalid bbox {:?} in annotation id {} (image {}x{})",
                    a.bbox.to_array(),
                    a.id,
                    im.width,
                    im.height
                )));
            }
        }
        Ok(())
    }

    /// Contiguous zero-based label of each category id, in table order.
    pub fn label_map(&self) -> HashMap<u64, usize> {
        self.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut m: BTreeMap<u64, Vec<&Annotation>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            m.entry(a.image_id).or_default().push(a);
        }
        m
    }

    /// Ground truth of one image with contiguous class labels.
    pub fn ground_truths(&self, image_id: u64) -> Vec<GroundTruth> {
        let labels = self.label_map();
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .filter_map(|a| {
                labels.get(&a.category_id).map(|&class_id| GroundTruth {
                    bbox: a.bbox,
                    class_id,
                })
            })
            .collect()
    }

    /// Images (and their annotations) whose ids are in `ids`, all categories
    /// kept. Order follows the original image list.
    pub fn subset(&self, ids: &HashSet<u64>) -> AnnotationSet {
        AnnotationSet {
            categories: self.categories.clone(),
            images: self.images.iter().filter(|i| ids.contains(&i.id)).cloned().collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.image_id))
                .cloned()
                .collect(),
        }
    }

    pub fn image_ids(&self) -> HashSet<u64> {
        self.images.iter().map(|i| i.id).collect()
    }

    pub fn image(&self, id: u64) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Instance count per category id.
    pub fn instance_counts(&self) -> BTreeMap<u64, usize> {
        let mut m: BTreeMap<u64, usize> = self.categories.iter().map(|c| (c.id, 0)).collect();
        for a in &self.annotations {
            *m.entry(a.category_id).or_default() += 1;
        }
        m
    }

    pub fn pixels(&self, id: u64) -> Result<&Image> {
        self.image(id)
            .and_then(|i| i.pixels.as_ref())
            .ok_or_else(|| Error::Data(format!("pixels of image id {id} are not loaded")))
    }
}

fn read_index(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: AnnotationSet = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    set.validate()?;
    Ok(set)
}

/// Parses and validates an annotation file without touching image files.
pub fn load_annotations_index(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    read_index(path.as_ref())
}

/// Parses, validates, and loads every referenced PNG.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let mut set = read_index(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for im in &mut set.images {
        let px = Image::load_png(&dir.join(&im.file))?;
        im.pixels = Some(px);
    }
    set.validate()?;
    Ok(set)
}

/// Writes the JSON index and, for every image with pixels in memory, a PNG
/// under `images/` next to it. Entries without pixels keep their `file`.
pub fn save_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    set.validate()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = set.clone();
    if out.images.iter().any(|i| i.pixels.is_some()) {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for im in &mut out.images {
            if let Some(px) = &im.pixels {
                im.file = format!("images/{:06}.png", im.id);
                px.save_png(&dir.join(&im.file))?;
            }
        }
    }
    let text = serde_json::to_string_pretty(&out).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
