pub mod attacks;
pub mod data;
pub mod experiment;
pub mod models;
pub mod protocol;
pub mod seed;
pub mod vna;
pub mod tensor;
