pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod preprocess;
pub mod train;

pub use error::{Error, Result};
