//! Tensor operations and their backward rules.

mod conv;
mod elementwise;
mod matmul;
mod pool;
mod reduce;
mod shape;
mod softmax;

pub use conv::conv3d_output_dims;
