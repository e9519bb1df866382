//! Analysis of irregularly sampled time series with frozen pre-trained
//! sequence encoders.
//!
//! The crate provides the three interchangeable series representations and
//! lossless conversions among them, continuous-time and variable embedders
//! that replace positional embeddings, a frozen pre-norm transformer stack
//! with a named-tensor weight archive, set/vector/series forward pipelines
//! with ablation switches, task heads for classification, interpolation, and
//! extrapolation, and a deterministic training and evaluation harness.

pub mod archive;
pub mod autodiff;
pub mod backbone;
pub mod data_model;
pub mod dataset_io;
pub mod embedders;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipelines;
pub mod task_prep;
pub mod trainer;
