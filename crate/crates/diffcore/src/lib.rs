//! Minimal reverse-mode automatic differentiation over dense real arrays.
//!
//! A [`Tape`] records every forward operation as a node in creation order,
//! which is also a topological order, so [`Tape::backward`] is a single
//! reverse sweep. Trainable values live in a [`ParamStore`] and enter a tape
//! through [`Tape::param`]; gradients flow back into the store and an
//! [`Optimizer`] consumes them.
//!
//! ```
//! use diffcore::{Array, ParamStore, Tape};
//!
//! let mut params = ParamStore::new();
//! let x = params.insert("x", Array::scalar(3.0)).unwrap();
//! let mut tape = Tape::new();
//! let xv = tape.param(&params, x);
//! let loss = tape.square(xv).unwrap();
//! tape.backward(loss, &mut params).unwrap();
//! assert_eq!(params.grad(x).unwrap().data()[0], 6.0);
//! ```

mod array;
pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use error::{DiffError, Result};
pub use optim::{Method, Optimizer, OptimizerConfig};
pub use params::{glorot_bound, ParamId, ParamStore, Parameter};
pub use tape::{BackwardStats, Padding, Tape, Var};

/// Scalar type used for every array element.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type used for every array element.
#[cfg(feature = "f32")]
pub type Real = f32;
