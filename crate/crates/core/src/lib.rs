//! Connectivity-based selective re-training for semi-supervised segmentation
//! of thin bilateral tubular structures.
//!
//! The crate covers volume I/O, preprocessing, connected components,
//! surface metrics, augmentation, stability-based pseudo-label selection,
//! a file-based bridge to external segmenters, synthetic phantoms and the
//! self-training orchestrator.

pub mod augment;
pub mod bridge;
pub mod components;
pub mod distance;
pub mod error;
pub mod io;
pub mod metrics;
mod par;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod selection;
pub mod volume;

pub use components::{component_count, keep_largest_k, label_components, ComponentLabeling, Connectivity};
pub use error::{Error, Result};
pub use metrics::{dice, evaluate_case, hd95, Hd95Convention, MetricsReport, MetricsSummary};
pub use selection::{rank_and_select, SelectionPolicy, StabilityRecord};
pub use volume::{Geometry, Mask3D, ProbabilityMap, Volume3D};
