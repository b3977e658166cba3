use std::collections::HashMap;

use super::{Annotation, AnnotationSet, Category, ImageEntry};

/// Merges datasets into one index.
///
/// Categories are matched by case-insensitive name and renumbered from 1 in
/// first-seen order. Categories named in `exclude_names` are dropped with all
/// their annotations; images left without annotations are dropped too.
/// Image and annotation ids are reissued from 1.
pub fn merge_datasets(sets: &[AnnotationSet], exclude_names: &[String]) -> AnnotationSet {
    let excluded: Vec<String> = exclude_names.iter().map(|n| n.to_lowercase()).collect();
    let mut out = AnnotationSet::default();
    let mut by_name: HashMap<String, u64> = HashMap::new();
    let mut next_image = 1u64;
    let mut next_ann = 1u64;
    for set in sets {
        let mut cat_map: HashMap<u64, u64> = HashMap::new();
        for c in &set.categories {
            let key = c.name.to_lowercase();
            if excluded.contains(&key) {
                continue;
            }
            let id = *by_name.entry(key).or_insert_with(|| {
                let id = out.categories.len() as u64 + 1;
                out.categories.push(Category {
                    id,
                    name: c.name.clone(),
                });
                id
            });
            cat_map.insert(c.id, id);
        }
        let by_image = set.annotations_by_image();
        for im in &set.images {
            let kept: Vec<&&Annotation> = by_image
                .get(&im.id)
                .map(|v| v.iter().filter(|a| cat_map.contains_key(&a.category_id)).collect())
                .unwrap_or_default();
            if kept.is_empty() {
                continue;
            }
            let image_id = next_image;
            next_image += 1;
            out.images.push(ImageEntry { id: image_id, ..im.clone() });
            for a in kept {
                out.annotations.push(Annotation {
                    id: next_ann,
                    image_id,
                    category_id: cat_map[&a.category_id],
                    bbox: a.bbox,
                });
                next_ann += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;

    fn set(names: &[&str], per_image: usize) -> AnnotationSet {
        let categories: Vec<Category> = names
            .iter()
            .enumerate()
            .map(|(i, n)| Category {
                id: 10 + i as u64,
                name: n.to_string(),
            })
            .collect();
        let mut s = AnnotationSet {
            categories,
            ..Default::default()
        };
        for (i, c) in s.categories.clone().iter().enumerate() {
            s.images.push(ImageEntry {
                id: 100 + i as u64,
                width: 64,
                height: 64,
                file: format!("{i}.png"),
                pixels: None,
            });
            for k in 0..per_image {
                s.annotations.push(Annotation {
                    id: 1000 + (i * per_image + k) as u64,
                    image_id: 100 + i as u64,
                    category_id: c.id,
                    bbox: BBox::new(k as f64, 0.0, k as f64 + 5.0, 5.0).unwrap(),
                });
            }
        }
        s
    }

    #[test]
    fn disjoint_names_concatenate() {
        let m = merge_datasets(&[set(&["A", "B"], 1), set(&["C"], 2)], &[]);
        let names: Vec<_> = m.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        assert_eq!(names, vec![(1, "A"), (2, "B"), (3, "C")]);
        assert_eq!(m.annotations.len(), 2 + 2);
        m.validate().unwrap();
    }

    #[test]
    fn same_name_merges_case_insensitively() {
        let m = merge_datasets(&[set(&["Yield"], 1), set(&["yield", "X"], 1)], &[]);
        assert_eq!(m.categories.len(), 2);
        assert_eq!(m.categories[0].name, "Yield");
        assert!(m.annotations.iter().filter(|a| a.category_id == 1).count() == 2);
    }

    #[test]
    fn exclusion_drops_category_annotations_and_empty_images() {
        let m = merge_datasets(
            &[set(&["stop", "yield"], 1), set(&["STOP", "Roundabout", "ahead"], 1)],
            &["stop".into(), "roundabout".into()],
        );
        let names: Vec<_> = m.categories.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["yield", "ahead"]);
        assert_eq!(m.images.len(), 2);
        assert_eq!(m.annotations.len(), 2);
        m.validate().unwrap();
    }
}
