pub mod annotations;
pub mod attention;
pub mod baseline;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod init;
pub mod io;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
