//! Configuration, data loading, training, evaluation and feature caching.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod model;
pub mod samples;
pub mod toy;
pub mod train;

pub use cache::{extract_and_cache, feature_digest, CacheRecord, CacheStats, FeatureCache};
pub use checkpoint::{load_checkpoint, restore_model, save_checkpoint, Checkpoint};
pub use config::{BackboneKind, Task, TaskConfig};
pub use dataset::{load_dataset, DatasetIndex};
pub use evaluate::{evaluate, evaluate_with_stats, extract_set, ExtractedSet};
pub use model::{build_backbone, noise_seed, FrozenInputs, SketchModel};
pub use samples::{AnnotatedPair, Sample, SampleSet};
pub use toy::toy_problem;
pub use train::{train, TrainReport};
