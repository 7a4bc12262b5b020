//! Dense CPU tensors with an eager, tape-recorded reverse mode.
//!
//! ```
//! use lambda_tensor::{grad, Tape, TensorData};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.var(TensorData::scalar(2.0)).unwrap();
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = grad(&y, &[&x], true).unwrap();
//! let d2y = grad(&dy[0], &[&x], false).unwrap();
//! assert_eq!(dy[0].item(), 12.0);
//! assert_eq!(d2y[0].item(), 12.0);
//! ```

mod data;
mod error;
mod kernels;
mod ops;
mod scalar;
mod tape;

pub use data::{numel, TensorData};
pub use error::{Result, TensorError};
pub use ops::{conv2d_input_grad, conv2d_weight_grad, matmul_t};
pub use scalar::Scalar;
pub use tape::{grad, Tape, Tensor};
