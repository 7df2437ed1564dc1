pub mod checkpoint;
pub mod dataset;
pub mod dynamics;
pub mod emission;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod params;
pub mod plant;
pub mod scan;
pub mod screening;
pub mod series;
pub mod simulator;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
