pub mod annotate;
pub mod audio;
pub mod classes;
pub mod eval;
pub mod events;
pub mod metrics;
pub mod personalize;
pub mod pipeline;
pub mod error;
pub mod frontend;
pub mod linalg;
pub mod synthbench;
pub mod tcn;
pub mod train;

pub use error::{Error, Result};
