//! Tape-based reverse-mode automatic differentiation for small image networks.
//!
//! A forward pass records values on a [`Tape`]; [`Tape::backward`] sweeps the
//! records in reverse. Parameters live in a [`ParamStore`] and enter a tape
//! through [`nn::Bound`], either as trainable leaves or as constants.

mod element;
mod image_ops;
pub mod linalg;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use element::Element;
pub use image_ops::reflect_index;
pub use params::{spectral_norm_estimate, ParamId, ParamStore, SpectralId};
pub use tape::{BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;
