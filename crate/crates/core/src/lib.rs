//! Knockoff generation by direct likelihood minimax training and
//! knockoff-filter variable selection with false discovery rate control.

pub mod autoregressive;
pub mod benchmarks;
pub mod data;
pub mod error;
pub mod filter;
pub mod gmm;
pub mod mdn;
pub mod model_file;
pub mod optim;
pub mod response;
pub mod seeding;
pub mod swap;
pub mod trainer;

pub use error::{Error, Result};
