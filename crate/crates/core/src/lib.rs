//! Exact simulation, compilation and differential testing of padded, looped
//! averaging-hard-attention transformers (AHATs).

pub mod error;
pub mod radical;
pub mod rational;

pub use error::{Error, Result};
pub use radical::{RadicalSum, Sign};
pub use rational::Rational;
pub mod ir;
pub mod sim;
pub mod builder;
pub mod logic;
pub mod compile;
pub mod circuit;
pub mod mask;
pub mod poly;
pub mod reduce;
pub mod corpus;
pub mod fuzz;
