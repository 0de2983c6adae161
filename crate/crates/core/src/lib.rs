//! Meta-learning with stochastic local winner-takes-all networks.
//!
//! Networks are built from blocks of linear units that compete for the
//! right to emit their value. The winner of each block is drawn from a
//! Categorical posterior over the units' linear responses, and every weight
//! carries a factorized Gaussian posterior. Training runs a first-order
//! inner/outer meta-loop on a single-sample Monte-Carlo ELBO; prediction
//! averages the outputs of several posterior draws.

/// Enum with fixed lowercase names, `Display` and `FromStr`.
macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub const NAMES: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }

        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $ty {
            type Err = $crate::Error;

            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err($crate::Error::Config(format!(
                        "unknown {} '{}', expected one of {:?}",
                        stringify!($ty), other, Self::NAMES
                    ))),
                }
            }
        }
    };
}

pub mod active;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layers;
pub mod meta;
pub mod metrics;
pub mod objective;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};
