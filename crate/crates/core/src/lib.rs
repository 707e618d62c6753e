pub mod checkpoint;
pub mod density;
pub mod diffusion;
pub mod image;
pub mod lap;
pub mod metrics;
pub mod model;
pub mod netsimplex;
pub mod points;
pub mod scalar;
pub mod stipplers;
pub mod tensor;
pub mod training;
pub mod transport;
pub mod voronoi;

pub use density::{DensityMap, DensitySpec};
pub use image::GrayImage;
pub use points::PointSet;
pub use scalar::{DType, Scalar};
pub use tensor::{Gradients, Graph, NodeId, Tensor, TensorError};
pub use transport::OtGrid;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
