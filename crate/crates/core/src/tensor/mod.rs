//! Dense-tensor engine with reverse-mode differentiation: the numeric
//! substrate for every other module.

pub mod adam;
pub mod array;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use array::{mean_abs_diff, mse, Array};
pub use params::{Binding, ParamStore};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Tape, Var};

/// Training precision.
pub type F = f32;
/// Verification precision for gradient oracles.
pub type V = f64;
