use std::fmt;

use harmonize_core::Error;

pub const CONFIG: u8 = 2;
pub const SHAPE: u8 = 3;
pub const NUMERIC: u8 = 4;
/// A sweep where fewer than 90% of runs succeeded.
pub const SWEEP: u8 = 1;

/// A one-line diagnostic plus the process exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn context(self, what: &str) -> Self {
        Self {
            message: format!("{what}: {}", self.message),
            ..self
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(e: &Error) -> u8 {
    match e {
        Error::Shape(_) => SHAPE,
        Error::Numeric(_) | Error::Diverged { .. } | Error::Training { .. } => NUMERIC,
        _ => CONFIG,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: code_for(&e),
            message: e.to_string(),
        }
    }
}

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::config(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, Failure>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_documented_codes() {
        assert_eq!(code_for(&Error::Shape("mask".into())), SHAPE);
        assert_eq!(code_for(&Error::Numeric("nan".into())), NUMERIC);
        let diverged = Error::Diverged {
            level: 3,
            message: "inf".into(),
            last_finite: None,
        };
        assert_eq!(code_for(&diverged), NUMERIC);
        assert_eq!(code_for(&Error::Parameter("t_aug".into())), CONFIG);
        assert_eq!(code_for(&Error::Contract("level".into())), CONFIG);
    }

    #[test]
    fn context_prefixes_message_and_keeps_code() {
        let f = Failure::from(Error::Shape("8x8 vs 16x16".into())).context("mask");
        assert_eq!(f.code, SHAPE);
        assert!(f.message.starts_with("mask: "));
    }
}
