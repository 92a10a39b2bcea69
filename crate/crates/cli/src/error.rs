use std::error::Error;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Io,
}

/// Failure of a command: a short machine-readable code plus a message.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn validation(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: "IO",
            kind: Kind::Io,
            message: message.into(),
        }
    }

    /// An I/O error anywhere in the source chain makes this an I/O failure.
    pub fn wrap(code: &'static str, context: impl fmt::Display, err: &(dyn Error + 'static)) -> Self {
        let message = format!("{context}: {err}");
        let mut cur: Option<&(dyn Error + 'static)> = Some(err);
        while let Some(e) = cur {
            if e.is::<std::io::Error>() {
                return Self::io(message);
            }
            cur = e.source();
        }
        Self::validation(code, message)
    }

    /// Prefixes the message with a pipeline stage; validation failures get
    /// the stage code.
    pub fn in_stage(self, stage: &str) -> Self {
        Self {
            code: if self.kind == Kind::Io { self.code } else { "STAGE" },
            kind: self.kind,
            message: format!("stage '{stage}' failed: {}", self.message),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Validation => 1,
            Kind::Io => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl Error for CliError {}

pub trait Context<T> {
    fn ctx(self, code: &'static str, what: impl fmt::Display) -> Result<T, CliError>;
}

impl<T, E: Error + 'static> Context<T> for Result<T, E> {
    fn ctx(self, code: &'static str, what: impl fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| CliError::wrap(code, what, &e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn io_errors_are_found_in_the_chain() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let e = CliError::wrap("NPY", "reading x", &io);
        assert_eq!((e.code, e.exit_code()), ("IO", 2));
        let fmt: Result<(), std::fmt::Error> = Err(std::fmt::Error);
        let e = fmt.ctx("NPY", "x").unwrap_err();
        assert_eq!((e.code, e.exit_code()), ("NPY", 1));
    }

    #[test]
    fn stage_prefix_keeps_io_kind() {
        let e = CliError::io("disk full").in_stage("metrics");
        assert_eq!(e.code, "IO");
        assert!(e.message.starts_with("stage 'metrics'"));
        let e = CliError::validation("DATA", "bad").in_stage("predict");
        assert_eq!((e.code, e.exit_code()), ("STAGE", 1));
    }
}
