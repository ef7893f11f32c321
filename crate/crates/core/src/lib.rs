pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod distributions;
pub mod params;
pub mod dgp;
pub mod rtn;
pub mod synthdata;
pub mod model;
pub mod training;
pub mod evaluation;
pub mod checkpoint;
pub mod cli;
