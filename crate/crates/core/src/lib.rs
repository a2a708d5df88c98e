//! City-scene classification: dataset handling, a small CNN and a VGG16
//! transfer model trained with Adam, evaluation and reporting.

pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod reports;
pub mod rng;
pub mod tensor;
pub mod training;
