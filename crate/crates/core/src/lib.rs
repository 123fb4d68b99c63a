//! RGB patch → spectral reflectance regression with dense-block features, plus a
//! spectral material classifier and a two-headed co-learning variant.

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod colearn;
pub mod data;
pub mod error;
pub mod head;
pub mod layers;
pub mod optim;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, Result};
