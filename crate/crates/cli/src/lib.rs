//! Pipeline driver: configuration, artifacts and the subcommands behind the `dmmia` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pgm;

pub use commands::Context;
pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
pub use pgm::render_grid;
