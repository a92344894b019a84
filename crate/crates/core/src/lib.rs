pub mod error;
pub mod numerics;
pub mod blocks;
pub mod fuser;
pub mod translator;
pub mod twin;
pub mod captioner;
pub mod synthdata;
pub mod harness;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
