use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Annotation, AnnotationSet};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Which shots to draw for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub k: usize,
    pub seed: u64,
    /// Category names to sample; all categories when absent.
    pub classes: Option<Vec<String>>,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            k: 5,
            seed: 0,
            classes: None,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("episode k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws an instance-exact k-shot support set.
///
/// Images are visited in seeded random order. An image is taken only if it
/// holds an instance of some class that still needs shots and would not push
/// any such class past `k`; its annotations of already-full or non-target
/// classes are left out of the support view. The remainder holds every other
/// image with all its annotations.
pub fn sample_k_shot(set: &AnnotationSet, spec: &EpisodeSpec) -> Result<(AnnotationSet, AnnotationSet)> {
    spec.validate()?;
    let targets: Vec<_> = match &spec.classes {
        None => set.categories.clone(),
        Some(names) => {
            let mut out = Vec::new();
            for n in names {
                let c = set
                    .categories
                    .iter()
                    .find(|c| c.name.eq_ignore_ascii_case(n))
                    .ok_or_else(|| Error::Data(format!("unknown class '{n}' in episode spec")))?;
                out.push(c.clone());
            }
            out
        }
    };
    let counts = set.instance_counts();
    for c in &targets {
        let have = counts.get(&c.id).copied().unwrap_or(0);
        if have < spec.k {
            return Err(Error::Data(format!(
                "class '{}' has {have} instances, fewer than k = {}",
                c.name, spec.k
            )));
        }
    }
    let target_ids: HashSet<u64> = targets.iter().map(|c| c.id).collect();
    let by_image = set.annotations_by_image();
    let mut filled: HashMap<u64, usize> = target_ids.iter().map(|&id| (id, 0)).collect();
    let mut chosen: Vec<(u64, Vec<Annotation>)> = Vec::new();

    let mut rng = Rng::new(spec.seed).derive_named("k-shot");
    for idx in rng.permutation(set.images.len()) {
        if filled.values().all(|&n| n >= spec.k) {
            break;
        }
        let im = &set.images[idx];
        let mut per_class: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for a in by_image.get(&im.id).into_iter().flatten() {
            if target_ids.contains(&a.category_id) && filled[&a.category_id] < spec.k {
                per_class.entry(a.category_id).or_default().push(a);
            }
        }
        if per_class.is_empty() {
            continue;
        }
        if per_class.iter().any(|(c, v)| filled[c] + v.len() > spec.k) {
            continue;
        }
        let mut kept = Vec::new();
        for (c, v) in per_class {
            *filled.get_mut(&c).unwrap() += v.len();
            kept.extend(v.into_iter().cloned());
        }
        kept.sort_by_key(|a| a.id);
        chosen.push((im.id, kept));
    }
    for c in &targets {
        if filled[&c.id] < spec.k {
            return Err(Error::Data(format!(
                "cannot fill {} shots for class '{}' without exceeding k on some image",
                spec.k, c.name
            )));
        }
    }

    let support_ids: HashSet<u64> = chosen.iter().map(|(id, _)| *id).collect();
    let kept: HashMap<u64, Vec<Annotation>> = chosen.into_iter().collect();
    let support = AnnotationSet {
        categories: targets,
        images: set.images.iter().filter(|i| support_ids.contains(&i.id)).cloned().collect(),
        annotations: set
            .images
            .iter()
            .filter_map(|i| kept.get(&i.id))
            .flatten()
            .cloned()
            .collect(),
    };
    let rest: HashSet<u64> = set.image_ids().difference(&support_ids).copied().collect();
    Ok((support, set.subset(&rest)))
}

/// Holds out a seeded fraction of images (at least one when the set is
/// non-empty) as the query set. Returns `(query, pool)`.
pub fn split_query(set: &AnnotationSet, fraction: f64, seed: u64) -> Result<(AnnotationSet, AnnotationSet)> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::Config(format!("query fraction must be in (0, 1), got {fraction}")));
    }
    let n = set.images.len();
    let take = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 0), n);
    let mut rng = Rng::new(seed).derive_named("query-split");
    let query: HashSet<u64> = rng.permutation(n)[..take].iter().map(|&i| set.images[i].id).collect();
    let pool: HashSet<u64> = set.image_ids().difference(&query).copied().collect();
    Ok((set.subset(&query), set.subset(&pool)))
}
