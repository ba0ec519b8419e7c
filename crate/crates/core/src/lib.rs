pub mod error;
pub mod eval;
pub mod geom;
pub mod graph;
pub mod instances;
pub mod io;
pub mod matching;
pub mod nets;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
