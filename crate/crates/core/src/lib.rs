//! Segment-wise quality estimation for semantic segmentation.
//!
//! The crate consumes softmax volumes of a segmentation network and
//!
//! * builds masks with Bayes, cost-based or maximum likelihood decision
//!   rules ([`decision`]),
//! * splits masks into connected segments and scores them against ground
//!   truth ([`segments`]),
//! * aggregates dispersion heatmaps into per-segment metric vectors
//!   ([`metrics`], [`dataset`]), optionally as time series over tracked
//!   segments ([`tracking`]),
//! * trains meta classifiers and regressors that predict false positives
//!   and segment IoU from those metrics ([`meta`], [`augment`]),
//! * and reports empirical CDFs of segment-wise precision and recall
//!   ([`evaluation`]).
//!
//! [`synth`] generates deterministic synthetic corpora for testing.

pub mod augment;
pub mod dataset;
pub mod decision;
pub mod evaluation;
pub mod io;
pub mod meta;
pub mod metrics;
pub mod segments;
pub mod synth;
pub mod tracking;
pub mod volume;

pub use dataset::{MetricsDataset, Row, Source};
pub use volume::{LabelMap, ProbabilityVolume, SegmentationMask, IGNORE_LABEL};
