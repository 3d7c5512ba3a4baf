pub mod error;
pub mod evaluation;
pub mod filters;
pub mod layers;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod trainer;
pub mod translator;
pub mod volume;

pub use error::{Error, Result};
