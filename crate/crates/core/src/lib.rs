pub mod attention;
pub mod cells;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod par;
pub mod seed;
pub mod streaming;
pub mod training;
pub mod xlstm;

pub use error::{Error, Result};
