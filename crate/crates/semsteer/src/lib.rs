//! File formats, the staged pipeline, self-checks and the explorer HTTP
//! service built on `semsteer-core`. The `semsteer` binary is a thin clap
//! front end over these modules.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod server;
pub mod verify;

/// Process exit codes of the `semsteer` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const VERIFY_FAILED: i32 = 2;
    pub const INCOMPATIBLE: i32 = 3;
}
