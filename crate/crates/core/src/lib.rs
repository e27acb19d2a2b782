//! Face alignment policy search.
//!
//! A face template is reduced to a crop policy `{m, delta}` on a canvas the
//! face has been aligned to once. This crate provides the policy geometry
//! ([`geometry`]), the similarity-transform algebra that makes a policy
//! equivalent to a full template ([`affine`]), the pixel-level realization
//! of both alignment paths ([`imaging`]), and a population-based search over
//! policies with intersection crossover ([`search`]) driven through an
//! abstract [`trainers::Trainer`].
//!
//! Batch loops (grid evaluation, warps, seed ensembles) run on rayon when
//! the default `parallel` feature is enabled; see [`exec::Execution`].

pub mod affine;
pub mod config;
pub mod exec;
pub mod geometry;
pub mod imaging;
pub mod search;
pub mod testcard;
pub mod trainers;

pub use affine::{BaseTemplate, LandmarkSet, Point2, SimilarityTransform};
pub use config::RunConfig;
pub use exec::Execution;
pub use geometry::{AlignmentPolicy, CropBox, SearchSpace};
pub use imaging::ImageBuffer;
pub use search::{run_search, SearchConfig, SearchResult};
pub use trainers::{SyntheticTrainer, Trainer};
