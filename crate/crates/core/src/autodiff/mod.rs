//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every training step. Ops evaluate eagerly and
//! append a node holding the output and the rule needed to push gradients
//! back to the inputs. Parameters live outside the graph in a
//! [`ParamStore`]; [`Graph::param`] copies a parameter onto the tape and
//! [`Gradients::accumulate_into`] writes the result back.
//!
//! ```
//! use adamorph::autodiff::{Array, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Array::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod array;
mod gradcheck;
mod graph;
mod kernels;
mod params;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, FD_STEP};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;
