//! Audio-visual segmentation kernels: density-peaks token grouping,
//! audio-guided merging with contrastive alignment, Dirichlet pixel
//! uncertainty, and a miniature trainable pipeline over synthetic clips.

pub mod ama;
pub mod error;
pub mod gradsuite;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod synthdata;
pub mod uncertainty;

pub use error::{Error, Result};
