//! RGB-D semantic segmentation with attention fusion of a depth branch,
//! trained on merged datasets with partially overlapping label sets.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod taxonomy;

pub use config::{KeyValues, ModelConfig, Variant};
pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_ID};
pub use model::{afc_fuse, param_count, param_specs, se_gate, ForwardTrace, Mode, NetworkGraph, ParamGroup};
pub use loss::{lambda_select, multisource_loss, pixel_weights, remap_labels};
pub use taxonomy::{ClassSet, LabelTaxonomy};
