pub mod attention;
pub mod bitstream;
pub mod codec;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod frame;
pub mod mgp;
pub mod nn;
pub mod oracle;
pub mod rdt;
pub mod selftest;
pub mod sfd;
pub mod tensor;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
