//! Library side of the `sugkit` binary: configuration, command
//! implementations, and the benchmark harness.

pub mod bench;
pub mod commands;
pub mod config;

use sugkit::error::CoreError;

/// 0 success, 2 input/configuration trouble, 3 training divergence,
/// 4 runtime invariant violation.
pub fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::Diverged(_) => 3,
        CoreError::Invariant(_) => 4,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_cover_the_error_kinds() {
        assert_eq!(exit_code(&CoreError::Input("x".into())), 2);
        assert_eq!(exit_code(&CoreError::Ordering("x".into())), 2);
        assert_eq!(exit_code(&CoreError::Config("x".into())), 2);
        assert_eq!(exit_code(&CoreError::Diverged("x".into())), 3);
        assert_eq!(exit_code(&CoreError::Invariant("x".into())), 4);
        let io = CoreError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(exit_code(&io), 2);
    }
}
