//! Process-level error carrying the documented exit code:
//! 2 configuration, 3 training divergence, 4 I/O, 1 anything else.

use std::fmt;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub type CliResult<T> = Result<T, Failure>;

pub fn config_error(path: &str, message: impl fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("config error at {path}: {message}"),
    }
}

impl From<clkd_core::Error> for Failure {
    fn from(e: clkd_core::Error) -> Self {
        use clkd_core::Error::*;
        let code = match &e {
            Diverged { .. } => 3,
            Io { .. } | Format { .. } => 4,
            Config(_) | InvalidParameter(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}
