//! Batch pipeline driver: run configuration, stage orchestration with
//! content-hash stamps, and JSON-line logging.

pub mod config;
pub mod logging;
pub mod pipeline;
pub mod stamp;

pub use config::{ConfigError, RunConfig};
pub use pipeline::{Outcome, Pipeline, PipelineError, Stage};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const PRECONDITION: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

pub fn exit_code(err: &PipelineError) -> i32 {
    if err.is_numeric() {
        exit::NUMERIC
    } else {
        exit::PRECONDITION
    }
}
