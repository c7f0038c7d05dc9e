pub mod error;
pub mod imageio;
pub mod raster;

pub use error::{Error, Result};
pub mod encoders;
pub mod agents;
pub mod optim;
pub mod losses;
pub mod data;
pub mod assets;
pub mod checkpoint;
pub mod game;
pub mod probe;
