//! Command line entry points and the HTTP annotation service.

pub mod commands;
pub mod server;

use voxsel_core::ErrorKind;

/// Process exit status for a failed command.
pub fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Conflict => 3,
        ErrorKind::Io => 4,
    }
}
