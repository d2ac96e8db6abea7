pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod lesion;
pub mod losses;
pub mod nets;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod volumes;
