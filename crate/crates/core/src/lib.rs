//! Offline meta-reinforcement learning for UAV trajectory planning and
//! AoI-aware device scheduling.

pub mod env;
pub mod harness;
pub mod error;
pub mod meta;
pub mod nn;
pub mod offline;
pub mod rl;
pub mod scalar;
pub mod util;

pub use error::{Error, Result};
pub use scalar::{Dual, Scalar};

/// Double-precision parameter vector, the default everywhere.
pub type ParamVector = nn::ParamVector<f64>;
pub type ParamVector32 = nn::ParamVector<f32>;
pub type Mlp = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
pub type AdamState = nn::AdamState<f64>;
