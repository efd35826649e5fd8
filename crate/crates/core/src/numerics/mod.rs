//! Dense `f32` tensors, the kernels the networks need, a reverse-mode tape,
//! and a central-difference gradient checker.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use ops::{
    area_resize, center_crop, conv2d, conv2d_strided, global_avg_pool, leaky_relu, matmul,
    transpose, upsample_nearest2x, ConvGeom, Padding,
};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
