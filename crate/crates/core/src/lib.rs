pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graphs;
pub mod harness;
pub mod model;
pub mod seqhead;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
