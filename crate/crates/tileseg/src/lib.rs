//! tileseg: patch-level feature extraction composed with whole-slide
//! segmentation for tiled giga-raster images.
//!
//! The pipeline cuts a slide into fixed-size patches, runs a small CNN over
//! each patch, arranges the per-patch feature vectors into a zero-padded
//! centered feature map, and feeds that map to an encoder-decoder
//! segmentation network to produce a whole-slide tumor probability map.
//! Training runs either stage-by-stage (train the extractor, freeze it,
//! cache features, train the segmentation net) or end to end under a memory
//! budget: only the boundary features and the boundary gradient are
//! retained, and extractor activations are recomputed per micro-batch.
//!
//! See the crate examples for runnable walkthroughs of each capability and
//! the `tileseg` binary for the stage-oriented command line.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod eval;
pub mod featuremap;
pub mod formats;
pub mod heatmap;
pub mod models;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod trainer;
