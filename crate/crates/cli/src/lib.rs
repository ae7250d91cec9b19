//! Library side of the `poslab` command line: run configuration and the
//! command bodies, shared by the binary and its integration tests.

pub mod commands;
pub mod config;

pub use commands::Outcome;
pub use config::{RunConfig, CONFIG_FILE};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VERIFICATION: u8 = 3;

/// Process exit status for a command result. Recorded divergence is a
/// successful run.
pub fn exit_code(result: &anyhow::Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::VerificationFailed) => EXIT_VERIFICATION,
        Err(e) => match e.downcast_ref::<poslab::Error>() {
            Some(poslab::Error::Config(_)) => EXIT_USAGE,
            Some(poslab::Error::Oracle { .. }) => EXIT_VERIFICATION,
            _ => EXIT_FAILURE,
        },
    }
}
