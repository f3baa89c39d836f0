//! Text-supervised fine-tuning of a classification head over frozen
//! feature embeddings.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ndcore;
pub mod optim;
pub mod rng;
mod scalar;
pub mod theory;

pub use scalar::Scalar;

pub type Matrix64 = ndcore::Matrix<f64>;
pub type Matrix32 = ndcore::Matrix<f32>;
pub type Model64 = model::ModelState<f64>;
pub type Model32 = model::ModelState<f32>;
pub type Dataset64 = data::FeatureDataset<f64>;
pub type Dataset32 = data::FeatureDataset<f32>;
