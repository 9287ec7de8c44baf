//! Minimal dense-tensor engine with define-by-run reverse-mode automatic
//! differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every leaf created with `requires_grad`.
//!
//! ```
//! use anchorinv_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(&Tensor::scalar(3.0).with_grad());
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```
//!
//! Storage is generic over [`Scalar`]; models run in `f32` while gradient
//! checks run the same graphs in `f64`.

mod adam;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::Adam;
pub use error::TensorError;
pub use gradcheck::finite_difference_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
