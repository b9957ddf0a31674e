//! Graph-constrained floorplan generation with iterative layout refinement.
//!
//! A relational convolutional GAN maps bubble diagrams — rooms plus door
//! adjacencies — to per-component segmentation masks. Training follows the
//! WGAN-GP recipe with partial ground-truth conditioning; at inference the
//! generator is applied repeatedly, feeding selected previous outputs back
//! in as conditions, and the acceptance schemes that pick those outputs can
//! be tuned by a tree-structured Parzen estimator.

pub mod cli;
pub mod data;
pub mod graphs;
pub mod metaopt;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod refine;
pub mod training;

pub use cli::run;
