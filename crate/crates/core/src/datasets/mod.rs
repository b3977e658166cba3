//! Annotation model, dataset merging, k-shot episode sampling, and the
//! procedural traffic-sign scene generator.

mod annotations;
mod merge;
mod sampler;
mod synth;

pub use annotations::{
    load_annotations, load_annotations_index, save_annotations, Annotation, AnnotationSet, Category, ImageEntry,
};
pub use merge::merge_datasets;
pub use sampler::{sample_k_shot, split_query, EpisodeSpec};
pub use synth::{synth_generate, synth_generate_with_stats, DomainStyle, SignRecord, SyntheticSceneConfig};
