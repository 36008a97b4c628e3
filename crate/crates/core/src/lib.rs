//! Few-shot segmentation head built on prototype cosine similarity, with
//! closed-form feature relevance weighting and gradient-guided ensemble
//! inference over the class vector.

pub mod boosting;
pub mod embedding;
pub mod episode;
pub mod error;
pub mod experiment;
pub mod gradients;
pub mod head;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod rng;
pub mod similarity;
pub mod synthetic;
pub mod tensor;

pub use error::{FsError, Result};
pub use mask::BinaryMask;
pub use tensor::Tensor;
