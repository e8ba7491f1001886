pub mod bspline;
pub mod datagen;
pub mod estimator;
pub mod evaluation;
pub mod rng;
pub mod theory;
pub mod experiment;
