//! Sketch features from a frozen diffusion UNet with injected
//! vision-language patch features.
//!
//! The [`pipeline`] module ties the pieces together; the common types are
//! re-exported at the crate root.

pub mod aggregator;
pub mod analysis;
pub mod backbone;
pub mod error;
pub mod grid;
pub mod heads;
pub mod injection;
pub mod metrics;
pub mod params;
pub mod pipeline;

pub use aggregator::{Aggregator, AggregatorConfig, FusedFeatureMap};
pub use backbone::{Backbone, ImageBatch, MockBackbone, MockConfig};
pub use error::{Error, Result};
pub use grid::FeatureGrid;
pub use heads::{CorrespondenceAnnotation, Keypoint, SegMask};
pub use injection::{AdapterInit, AdapterStack, InjectionMode};
pub use metrics::MetricReport;
pub use params::ParamStore;
pub use pipeline::{BackboneKind, SampleSet, SketchModel, Task, TaskConfig};
