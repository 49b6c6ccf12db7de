//! Config-driven command-line workflows over `sctfusion-core`.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_misalign, cmd_phantom, cmd_report, cmd_sweep, cmd_train, SweepOptions, SweepOutcome};
pub use config::{RunConfig, SCHEMA_VERSION};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(e: &sctfusion_core::Error) -> i32 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}
