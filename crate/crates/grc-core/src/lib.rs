//! Core library for a small transformer whose attention layers carry a
//! gated recurrent cache: a compressed memory tensor that is updated across
//! training steps with learned gates and read through a second attention
//! branch. Everything here is `no_std`-compatible (with `alloc`); file IO
//! and the command-line frontend live in the companion `grc` binary crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod cache;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use rng::SeededRng;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
