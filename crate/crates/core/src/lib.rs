pub mod autograd;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod geometry_labels;
pub mod grouping;
pub mod hrgn;
pub mod losses;
pub mod model;
pub mod params;
pub mod proposal_graph;
pub mod sapn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
