pub mod config;
pub mod codec;
pub mod eval;
pub mod model;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use model::Model;
